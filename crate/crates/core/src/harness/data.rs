//! Labelled datasets: MNIST IDX files and seeded synthetic blobs.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Environment variable pointing at a directory holding the four MNIST
/// IDX files.
pub const MNIST_DIR_ENV: &str = "LYAPNET_MNIST_DIR";

/// Inputs `(N, ...)` with one class label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rank() < 2 || x.batch() != y.len() {
            return Err(Error::shape(format!(
                "{} labels for inputs of shape {:?}",
                y.len(),
                x.shape()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Self { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Same samples viewed with a different per-sample shape.
    pub fn with_sample_shape(self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Self {
            x: self.x.reshape(full)?,
            ..self
        })
    }

    pub fn slice(&self, r: Range<usize>) -> Self {
        Self {
            x: self.x.slice_rows(r.start, r.end),
            y: self.y[r].to_vec(),
            classes: self.classes,
        }
    }

    pub fn gather(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.x.gather_rows(idx),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }
}

struct Idx<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Idx<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::format(self.pos as u64, format!("truncated before {what}")))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn body(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + len;
        if self.bytes.len() < end {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!(
                    "{what} ends after {} of {len} bytes",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        if self.bytes.len() > end {
            return Err(Error::format(
                end as u64,
                format!("trailing bytes after {what}"),
            ));
        }
        Ok(&self.bytes[self.pos..end])
    }
}

/// Parses an IDX image file into `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let mut r = Idx { bytes, pos: 0 };
    let magic = r.u32("magic")?;
    if magic != IDX_IMAGES {
        return Err(Error::format(
            0,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        ));
    }
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let px = r.body(n * rows * cols, "pixel data")?;
    Ok((rows, cols, px))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let mut r = Idx { bytes, pos: 0 };
    let magic = r.u32("magic")?;
    if magic != IDX_LABELS {
        return Err(Error::format(
            0,
            format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        ));
    }
    let n = r.u32("label count")? as usize;
    r.body(n, "label data")
}

/// Decodes an image/label file pair. Pixels map to `p/255 − 0.5`, so the
/// inputs lie in `[−0.5, 0.5]`; samples are flattened to `rows·cols`.
pub fn decode_mnist(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (rows, cols, px) = parse_idx_images(images)?;
    let lb = parse_idx_labels(labels)?;
    let d = rows * cols;
    let n = px.len().checked_div(d).unwrap_or(0);
    if n != lb.len() {
        return Err(Error::format(
            4,
            format!("{n} images but {} labels", lb.len()),
        ));
    }
    if let Some(i) = lb.iter().position(|&l| l > 9) {
        return Err(Error::format(
            8 + i as u64,
            format!("label {} out of range", lb[i]),
        ));
    }
    let data: Vec<f32> = px.iter().map(|&p| p as f32 / 255.0 - 0.5).collect();
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        lb.iter().map(|&l| l as usize).collect(),
        10,
    )
}

pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    decode_mnist(&fs::read(images)?, &fs::read(labels)?)
}

/// The MNIST directory: `LYAPNET_MNIST_DIR` if set, else `data/mnist`
/// under the workspace.
pub fn default_mnist_dir() -> PathBuf {
    std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// Loads `(train, test)` from the standard file names in `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_mnist_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Gaussian class blobs. Class `c` is centred at `separation` along axis
/// `c mod dim` (negated on every other wrap) with isotropic noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub seed: u64,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_separation() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.2
}

impl SynthSpec {
    pub fn new(classes: usize, dim: usize, per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            dim,
            per_class,
            seed,
            separation: default_separation(),
            noise: default_noise(),
        }
    }

    /// Centre of class `c`.
    pub fn mean(&self, c: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        let sign = if (c / self.dim).is_multiple_of(2) {
            1.0
        } else {
            -1.0
        };
        m[c % self.dim] = sign * self.separation;
        m
    }
}

/// Deterministic synthetic dataset; sample `i` belongs to class `i mod classes`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.dim == 0 || spec.per_class == 0 {
        return Err(Error::Input(format!(
            "synthetic dataset needs positive counts, got {spec:?}"
        )));
    }
    if !(spec.noise >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::Input(
            "synthetic noise must be ≥ 0 and separation finite".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let means: Vec<Vec<f64>> = (0..spec.classes).map(|c| spec.mean(c)).collect();
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        for &m in &means[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push((m + spec.noise * z) as f32);
        }
        y.push(c);
    }
    Dataset::new(Tensor::new(vec![n, spec.dim], data)?, y, spec.classes)
}
