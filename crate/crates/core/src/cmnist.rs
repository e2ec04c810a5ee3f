//! MNIST ingestion from IDX files and the colored variant with a
//! class-correlated training palette and an independent test palette.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const NUM_CLASSES: usize = 10;

/// Grayscale digits, row-major `n × 28 × 28` bytes, with labels `0..=9`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawMnist {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawMnist {
    pub fn new(images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * PIXELS {
            return Err(Error::CountMismatch {
                images: images.len() / PIXELS,
                labels: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(invalid("mnist", format!("label {bad} out of range")));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    /// The first `n` images (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * PIXELS].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what}: header ends at byte {}", bytes.len())))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = offset + len;
    if bytes.len() < end {
        return Err(Error::Truncated(format!("{what}: expected {end} bytes, found {}", bytes.len())));
    }
    if bytes.len() > end {
        return Err(invalid("idx", format!("{what}: {} trailing bytes", bytes.len() - end)));
    }
    Ok(&bytes[offset..end])
}

/// Parse an IDX3 image file. Returns the pixel bytes and the image count.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<u8>, usize)> {
    check_magic(bytes, IMAGE_MAGIC, "images")?;
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    if rows != SIDE || cols != SIDE {
        return Err(invalid("idx", format!("expected {SIDE}x{SIDE} images, found {rows}x{cols}")));
    }
    Ok((body(bytes, 16, n * PIXELS, "images")?.to_vec(), n))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC, "labels")?;
    let n = be_u32(bytes, 4, "labels")? as usize;
    Ok(body(bytes, 8, n, "labels")?.to_vec())
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<RawMnist> {
    let (images, n) = parse_idx_images(&fs::read(image_path)?)?;
    let labels = parse_idx_labels(&fs::read(label_path)?)?;
    if n != labels.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    RawMnist::new(images, labels)
}

pub fn encode_idx_images(raw: &RawMnist) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + raw.images.len());
    for v in [IMAGE_MAGIC, raw.len() as u32, SIDE as u32, SIDE as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&raw.images);
    out
}

pub fn encode_idx_labels(raw: &RawMnist) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + raw.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(raw.len() as u32).to_be_bytes());
    out.extend_from_slice(&raw.labels);
    out
}

pub fn write_idx(raw: &RawMnist, image_path: &Path, label_path: &Path) -> Result<()> {
    fs::write(image_path, encode_idx_images(raw))?;
    fs::write(label_path, encode_idx_labels(raw))?;
    Ok(())
}

/// Standard MNIST file names inside `dir`: `(train, test)`.
pub fn load_mnist_dir(dir: &Path) -> Result<(RawMnist, RawMnist)> {
    let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestPool {
    /// One 10-color pool for both roles; foreground and background differ per image.
    #[default]
    Shared,
    /// Independent 10-color pools for foreground and background.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CMnistSeeds {
    pub palette: u64,
    pub assignment: u64,
    pub noise: u64,
    pub split: u64,
}

impl CMnistSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            palette: rng::derive(seed, "palette"),
            assignment: rng::derive(seed, "assignment"),
            noise: rng::derive(seed, "noise"),
            split: rng::derive(seed, "split"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CMnistSpec {
    /// Two foreground colors per class.
    pub fg_colors: Vec<[Rgb; 2]>,
    /// Two background colors per class.
    pub bg_colors: Vec<[Rgb; 2]>,
    /// Test colors; the foreground pool in `Separate` mode.
    pub test_palette: Vec<Rgb>,
    /// Background pool in `Separate` mode, otherwise empty.
    #[serde(default)]
    pub test_bg_palette: Vec<Rgb>,
    #[serde(default)]
    pub test_pool: TestPool,
    pub threshold: u8,
    pub noise_std: f64,
    pub split: f64,
    pub seeds: CMnistSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TrainVal,
    Test,
}

fn random_color(r: &mut rng::Rng) -> Rgb {
    [r.random(), r.random(), r.random()]
}

impl CMnistSpec {
    /// Palettes drawn `U[0, 1]³` per channel. Training and test palettes use
    /// separate streams.
    pub fn random(seeds: CMnistSeeds, test_pool: TestPool) -> Self {
        let mut train = rng::stream(seeds.palette, 0);
        let fg_colors = (0..NUM_CLASSES).map(|_| [random_color(&mut train), random_color(&mut train)]).collect();
        let bg_colors = (0..NUM_CLASSES).map(|_| [random_color(&mut train), random_color(&mut train)]).collect();
        let mut test = rng::stream(seeds.palette, 1);
        let test_palette = (0..10).map(|_| random_color(&mut test)).collect();
        let test_bg_palette = match test_pool {
            TestPool::Shared => Vec::new(),
            TestPool::Separate => {
                let mut bg = rng::stream(seeds.palette, 2);
                (0..10).map(|_| random_color(&mut bg)).collect()
            }
        };
        Self {
            fg_colors,
            bg_colors,
            test_palette,
            test_bg_palette,
            test_pool,
            threshold: 150,
            noise_std: 0.04,
            split: 0.9,
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fg_colors.len() != NUM_CLASSES || self.bg_colors.len() != NUM_CLASSES {
            return Err(Error::InvalidSpec(format!(
                "need {NUM_CLASSES} fg and bg color pairs, got {} and {}",
                self.fg_colors.len(),
                self.bg_colors.len()
            )));
        }
        let min_test = if self.test_pool == TestPool::Shared { 2 } else { 1 };
        if self.test_palette.len() < min_test || (self.test_pool == TestPool::Separate && self.test_bg_palette.is_empty()) {
            return Err(Error::InvalidSpec("test palette is empty or too small".into()));
        }
        let all = self.fg_colors.iter().chain(&self.bg_colors).flatten().chain(&self.test_palette).chain(&self.test_bg_palette);
        if all.flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidSpec("colors must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidSpec(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::InvalidSpec(format!("split {} must lie in (0, 1)", self.split)));
        }
        Ok(())
    }

    /// Foreground and background colors for image `i` with label `label`.
    pub fn colors_for(&self, mode: Mode, i: usize, label: usize) -> (Rgb, Rgb) {
        let mut r = rng::stream(self.seeds.assignment, stream_id(mode, i));
        match mode {
            Mode::TrainVal => (self.fg_colors[label][r.random_range(0..2)], self.bg_colors[label][r.random_range(0..2)]),
            Mode::Test => match self.test_pool {
                TestPool::Shared => {
                    let n = self.test_palette.len();
                    let fg = r.random_range(0..n);
                    let mut bg = r.random_range(0..n - 1);
                    if bg >= fg {
                        bg += 1;
                    }
                    (self.test_palette[fg], self.test_palette[bg])
                }
                TestPool::Separate => (
                    self.test_palette[r.random_range(0..self.test_palette.len())],
                    self.test_bg_palette[r.random_range(0..self.test_bg_palette.len())],
                ),
            },
        }
    }
}

fn stream_id(mode: Mode, i: usize) -> u64 {
    let tag = match mode {
        Mode::TrainVal => 0,
        Mode::Test => 1u64 << 40,
    };
    tag | i as u64
}

/// Foreground mask of one image: `pixel >= threshold`.
pub fn foreground_mask(image: &[u8], threshold: u8) -> Vec<bool> {
    image.iter().map(|&p| p >= threshold).collect()
}

/// Colored `(n, 3, 28, 28)` images in `[0, 1]` with the raw labels.
pub fn generate_cmnist(raw: &RawMnist, spec: &CMnistSpec, mode: Mode) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = raw.len();
    let mut data = vec![0.0; n * 3 * PIXELS];
    for (i, out) in data.chunks_exact_mut(3 * PIXELS).enumerate() {
        let label = raw.labels[i] as usize;
        let (fg, bg) = spec.colors_for(mode, i, label);
        let mut noise = rng::stream(spec.seeds.noise, stream_id(mode, i));
        for (c, plane) in out.chunks_exact_mut(PIXELS).enumerate() {
            for (px, &v) in plane.iter_mut().zip(raw.image(i)) {
                let base = if v >= spec.threshold { fg[c] } else { bg[c] };
                let z: f64 = if spec.noise_std > 0.0 { noise.sample(StandardNormal) } else { 0.0 };
                *px = (base + spec.noise_std * z).clamp(0.0, 1.0);
            }
        }
    }
    let y = raw.labels.iter().map(|&l| f64::from(l)).collect();
    LabeledDataset::new(Tensor::new(vec![n, 3, SIDE, SIDE], data)?, y)
}

/// Seeded disjoint split; each part keeps source order.
pub fn split_trainval(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid("split_trainval", format!("fraction {fraction} must lie in (0, 1)")));
    }
    let n = data.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, 0));
    let cut = (fraction * n as f64).round() as usize;
    let (mut a, mut b) = (idx[..cut].to_vec(), idx[cut..].to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((data.subset(&a), data.subset(&b)))
}

/// Grayscale digits scaled to `[0, 1]` with the channel copied three times.
pub fn mnist_as_ood(raw: &RawMnist) -> Result<LabeledDataset> {
    let n = raw.len();
    let mut data = Vec::with_capacity(n * 3 * PIXELS);
    for i in 0..n {
        let img = raw.image(i);
        for _ in 0..3 {
            data.extend(img.iter().map(|&v| f64::from(v) / 255.0));
        }
    }
    let y = raw.labels.iter().map(|&l| f64::from(l)).collect();
    LabeledDataset::new(Tensor::new(vec![n, 3, SIDE, SIDE], data)?, y)
}

/// Train, validation and shifted test sets plus the [`CMnistSpec`] that produced them.
#[derive(Debug, Clone)]
pub struct CMnistCorpus {
    pub spec: CMnistSpec,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn generate_corpus(train_raw: &RawMnist, test_raw: &RawMnist, spec: &CMnistSpec) -> Result<CMnistCorpus> {
    let trainval = generate_cmnist(train_raw, spec, Mode::TrainVal)?;
    let (train, val) = split_trainval(&trainval, spec.split, spec.seeds.split)?;
    let test = generate_cmnist(test_raw, spec, Mode::Test)?;
    Ok(CMnistCorpus {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}
