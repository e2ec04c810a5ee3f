//! Bias-free linear, MLP and small convolutional models.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::regularizers::conv_reshape;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Linear,
    Mlp {
        #[serde(default = "default_hidden_layers")]
        hidden_layers: usize,
        #[serde(default = "default_width")]
        width: usize,
    },
    SmallConv {
        #[serde(default = "default_channels")]
        channels: Vec<usize>,
    },
}

fn default_hidden_layers() -> usize {
    3
}
fn default_width() -> usize {
    200
}
fn default_channels() -> Vec<usize> {
    vec![16, 32]
}

impl ModelKind {
    pub fn mlp() -> Self {
        ModelKind::Mlp {
            hidden_layers: default_hidden_layers(),
            width: default_width(),
        }
    }

    pub fn small_conv() -> Self {
        ModelKind::SmallConv {
            channels: default_channels(),
        }
    }
}

/// Where the first hidden representation is read for the penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationPoint {
    #[default]
    Post,
    Pre,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Shape of one input sample, e.g. `[500]` or `[3, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub outputs: usize,
    #[serde(default)]
    pub hidden_point: ActivationPoint,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.outputs == 0 || self.input_shape.iter().product::<usize>() == 0 {
            return Err(invalid("model", "input and output sizes must be positive"));
        }
        match &self.kind {
            ModelKind::Linear => {}
            ModelKind::Mlp { hidden_layers, width } => {
                if *hidden_layers == 0 || *width == 0 {
                    return Err(invalid("model", "mlp needs at least one hidden layer of positive width"));
                }
            }
            ModelKind::SmallConv { channels } => {
                let s = &self.input_shape;
                let pools = channels.len() as u32;
                if s.len() != 3 || channels.is_empty() || s[1] % 2usize.pow(pools) != 0 || s[2] % 2usize.pow(pools) != 0 {
                    return Err(invalid(
                        "model",
                        format!("small_conv needs a (C, H, W) input divisible by 2^{pools}, got {s:?}"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let d: usize = self.input_shape.iter().product();
        match &self.kind {
            ModelKind::Linear => vec![vec![d, self.outputs]],
            ModelKind::Mlp { hidden_layers, width } => {
                let mut shapes = vec![vec![d, *width]];
                for _ in 1..*hidden_layers {
                    shapes.push(vec![*width, *width]);
                }
                shapes.push(vec![*width, self.outputs]);
                shapes
            }
            ModelKind::SmallConv { channels } => {
                let mut shapes = Vec::new();
                let mut c_in = self.input_shape[0];
                for &c in channels {
                    shapes.push(vec![c, c_in, 3, 3]);
                    c_in = c;
                }
                let scale = 2usize.pow(channels.len() as u32);
                let flat = c_in * (self.input_shape[1] / scale) * (self.input_shape[2] / scale);
                shapes.push(vec![flat, self.outputs]);
                shapes
            }
        }
    }
}

/// Model parameters plus the [`ModelSpec`] that gives them meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `(B, outputs)`.
    pub output: Var,
    /// First hidden representation as rows `(N, F)`; `N = B·H·W` for conv.
    pub hidden: Option<Var>,
    /// Rows of `hidden` per input sample.
    pub rows_per_sample: usize,
}

fn fan_in(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[1] * shape[2] * shape[3]
    } else {
        shape[0]
    }
}

impl Model {
    /// Uniform `±1/√fan_in` initialization from a seeded stream. The linear
    /// model starts at zero.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let zero = spec.kind == ModelKind::Linear;
        let mut r = rng::stream(rng::derive(seed, "init"), 0);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let bound = 1.0 / (fan_in(&shape) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| if zero { 0.0 } else { r.random_range(-bound..bound) }).collect();
                Tensor::new(shape, data).map(Tensor::with_grad)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.params.iter().map(Tensor::sum_squares).sum()
    }

    /// Put the parameters on the tape. Constants when `track` is false.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if track {
                    tape.leaf(p)
                } else {
                    tape.constant(Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("valid"))
                }
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Forward> {
        let shape = tape.value(x).shape().to_vec();
        let b = shape[0];
        if shape[1..] != self.spec.input_shape[..] {
            return Err(crate::error::Error::ShapeMismatch {
                op: "model.forward",
                lhs: shape,
                rhs: self.spec.input_shape.clone(),
            });
        }
        let post = self.spec.hidden_point == ActivationPoint::Post;
        match &self.spec.kind {
            ModelKind::Linear => {
                let flat = tape.reshape(x, &[b, self.spec.input_shape.iter().product()])?;
                let out = tape.matmul(flat, params[0])?;
                Ok(Forward {
                    output: out,
                    hidden: None,
                    rows_per_sample: 1,
                })
            }
            ModelKind::Mlp { hidden_layers, .. } => {
                let mut h = tape.reshape(x, &[b, self.spec.input_shape.iter().product()])?;
                let mut first = None;
                for (l, w) in params[..*hidden_layers].iter().enumerate() {
                    let z = tape.matmul(h, *w)?;
                    h = tape.relu(z);
                    if l == 0 {
                        first = Some(if post { h } else { z });
                    }
                }
                let out = tape.matmul(h, params[*hidden_layers])?;
                Ok(Forward {
                    output: out,
                    hidden: first,
                    rows_per_sample: 1,
                })
            }
            ModelKind::SmallConv { channels } => {
                let mut h = x;
                let mut first = None;
                let mut rows = 1;
                for (l, w) in params[..channels.len()].iter().enumerate() {
                    let z = tape.conv2d(h, *w, 1)?;
                    let a = tape.relu(z);
                    if l == 0 {
                        let s = tape.value(z).shape();
                        rows = s[2] * s[3];
                        first = Some(conv_reshape(tape, if post { a } else { z })?);
                    }
                    h = tape.avg_pool2(a)?;
                }
                let s = tape.value(h).shape().to_vec();
                let flat = tape.reshape(h, &[b, s[1] * s[2] * s[3]])?;
                let out = tape.matmul(flat, params[channels.len()])?;
                Ok(Forward {
                    output: out,
                    hidden: first,
                    rows_per_sample: rows,
                })
            }
        }
    }

    /// Forward pass without gradient tracking; returns `(B, outputs)` values.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let xv = tape.leaf(x);
        let f = self.forward(&mut tape, xv, &params)?;
        Ok(tape.value(f.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mlp_shape() {
        let spec = ModelSpec {
            kind: ModelKind::mlp(),
            input_shape: vec![500],
            outputs: 1,
            hidden_point: ActivationPoint::Post,
        };
        let m = Model::init(spec, 0).unwrap();
        let shapes: Vec<_> = m.params.iter().map(|p| p.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![500, 200], vec![200, 200], vec![200, 200], vec![200, 1]]);
    }

    #[test]
    fn small_conv_forward_shapes() {
        let spec = ModelSpec {
            kind: ModelKind::small_conv(),
            input_shape: vec![3, 8, 8],
            outputs: 10,
            hidden_point: ActivationPoint::Post,
        };
        let m = Model::init(spec, 1).unwrap();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, true);
        let x = tape.leaf(&Tensor::zeros(&[2, 3, 8, 8]));
        let f = m.forward(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(f.output).shape(), &[2, 10]);
        assert_eq!(tape.value(f.hidden.unwrap()).shape(), &[2 * 64, 16]);
        assert_eq!(f.rows_per_sample, 64);
    }

    #[test]
    fn conv_needs_divisible_input() {
        let spec = ModelSpec {
            kind: ModelKind::small_conv(),
            input_shape: vec![3, 6, 6],
            outputs: 10,
            hidden_point: ActivationPoint::Post,
        };
        assert!(Model::init(spec, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec {
            kind: ModelKind::Mlp { hidden_layers: 1, width: 3 },
            input_shape: vec![7],
            outputs: 1,
            hidden_point: ActivationPoint::Post,
        };
        let a = Model::init(spec.clone(), 4).unwrap();
        let b = Model::init(spec.clone(), 4).unwrap();
        let c = Model::init(spec, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
