//! Correlation-penalty regularization: a small reverse-mode autodiff engine,
//! synthetic datasets with closed-form optima, a training loop with baseline
//! regularizers, input-sensitivity analysis, the colored-MNIST shift
//! benchmark and the experiment harness that drives them.

pub mod autodiff;
pub mod closed_form;
pub mod cmnist;
pub mod data;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod regularizers;
pub mod rng;
pub mod sensitivity;
pub mod synth;
pub mod tensor;
pub mod tensorio;
pub mod train;

pub use autodiff::{Tape, Var};
pub use data::LabeledDataset;
pub use error::{Error, Result};
pub use model::{ActivationPoint, Model, ModelKind, ModelSpec};
pub use optim::AdamConfig;
pub use regularizers::BaselineRegSpec;
pub use synth::{SynthSpec, SynthSpecA, SynthSpecB};
pub use tensor::Tensor;
pub use train::{Attach, LossKind, RegularizedObjectiveConfig, Schedule, TrainConfig};
