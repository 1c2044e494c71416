//! Datasets: seeded synthetic tasks and IDX files.

use std::io::Read;
use std::path::Path;

use groupclip_core::nn::{LossKind, Targets};
use groupclip_core::optim::Dataset;
use groupclip_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{HarnessError, Result};

/// A Gaussian-mixture classification task.
///
/// Class `c` has its center at distance `separation` from the origin in a
/// random direction and unit isotropic spread. The drift variant then
/// rescales input coordinates over a wide geometric range, so the first
/// layer sees inputs far larger than the rest of the network does.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub train_size: usize,
    pub test_size: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub drift: bool,
}

/// ChaCha stream for data generation, apart from the training and
/// initialization streams of the same seed.
const DATA_STREAM: u64 = (1 << 62) + 1;

/// Largest-to-smallest input scale ratio of the drift variant.
pub const DRIFT_SCALE_RANGE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Dataset,
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Per-coordinate input scales of the drift variant: geometric from
/// `1/sqrt(range)` to `sqrt(range)`.
pub fn drift_scales(dim: usize) -> Vec<f64> {
    let half = DRIFT_SCALE_RANGE.ln() / 2.0;
    (0..dim)
        .map(|j| {
            let t = if dim == 1 {
                0.0
            } else {
                j as f64 / (dim - 1) as f64
            };
            (half * (2.0 * t - 1.0)).exp()
        })
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<TaskData> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::Input(format!(
            "synthetic task needs at least 2 classes and 2 dimensions, got {} and {}",
            spec.classes, spec.dim
        ))
        .into());
    }
    if spec.train_size == 0 || spec.test_size == 0 {
        return Err(Error::Input("synthetic splits must be nonempty".into()).into());
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(Error::Input(format!(
            "separation {} must be finite and >= 0",
            spec.separation
        ))
        .into());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let g: Vec<f64> = (0..spec.dim).map(|_| normal(&mut rng)).collect();
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            g.iter().map(|v| v * spec.separation / n).collect()
        })
        .collect();
    let scales = spec.drift.then(|| drift_scales(spec.dim));

    let mut split = |n: usize| -> Result<Dataset> {
        let mut x = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..spec.classes);
            for (j, mu) in centers[c].iter().enumerate() {
                let v = mu + normal(&mut rng);
                x.push(match &scales {
                    Some(s) => v * s[j],
                    None => v,
                });
            }
            labels.push(c);
        }
        Ok(Dataset::new(
            Tensor::new(vec![n, spec.dim], x)?,
            Targets::Classes(labels),
            LossKind::CrossEntropy,
        )?)
    };
    let train = split(spec.train_size)?;
    let test = split(spec.test_size)?;
    Ok(TaskData { train, test })
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Contents of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `[n, rows * cols]` pixels scaled to `[0, 1]`.
    Images {
        images: Tensor,
        rows: usize,
        cols: usize,
    },
    Labels(Vec<usize>),
}

fn format_error(offset: u64, detail: impl Into<String>) -> HarnessError {
    Error::Format {
        offset,
        detail: detail.into(),
    }
    .into()
}

/// Parses an IDX image (magic 2051) or label (magic 2049) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let word = |at: usize| -> Result<usize> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| format_error(bytes.len() as u64, "header is truncated"))
    };
    let magic = word(0)? as u32;
    let (dims, header) = match magic {
        IDX_IMAGES_MAGIC => (vec![word(4)?, word(8)?, word(12)?], 16),
        IDX_LABELS_MAGIC => (vec![word(4)?], 8),
        m => return Err(format_error(0, format!("bad magic number {m}"))),
    };
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_error(4, "dimension sizes overflow"))?;
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(format_error(
            bytes.len() as u64,
            format!("payload is truncated: expected {count} bytes after the header"),
        ));
    }
    if payload.len() > count {
        return Err(format_error(
            (header + count) as u64,
            "trailing bytes after payload",
        ));
    }
    Ok(match magic {
        IDX_IMAGES_MAGIC => {
            let (n, rows, cols) = (dims[0], dims[1], dims[2]);
            let px = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
            IdxData::Images {
                images: Tensor::new(vec![n, rows * cols], px)?,
                rows,
                cols,
            }
        }
        _ => IdxData::Labels(payload.iter().map(|&b| b as usize).collect()),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HarnessError::io(path, e))?;
    parse_idx(&bytes)
}

/// An image file and a label file of the same length as a dataset.
pub fn idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let IdxData::Images { images: x, .. } = read_idx(images)? else {
        return Err(HarnessError::Config(format!(
            "{} is not an image file",
            images.display()
        )));
    };
    let IdxData::Labels(y) = read_idx(labels)? else {
        return Err(HarnessError::Config(format!(
            "{} is not a label file",
            labels.display()
        )));
    };
    if x.batch() != y.len() {
        return Err(HarnessError::Config(format!(
            "{} images but {} labels",
            x.batch(),
            y.len()
        )));
    }
    Ok(Dataset::new(
        x,
        Targets::Classes(y),
        LossKind::CrossEntropy,
    )?)
}
