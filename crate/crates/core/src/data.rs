//! Datasets: IDX (MNIST) files and synthetic generators.

use crate::net::Targets;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: wrong magic number 0x{found:08x} at byte 0, expected 0x{expected:08x}")]
    WrongMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated { path: PathBuf, offset: usize, needed: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N x d]`.
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() == 0 {
            return Err(DataError::Invalid(format!("inputs of shape {:?}", inputs.shape())));
        }
        if targets.len() != inputs.rows() {
            return Err(DataError::CountMismatch {
                images: inputs.rows(),
                labels: targets.len(),
            });
        }
        if let Targets::Labels { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(DataError::Invalid(format!("label {bad} with {classes} classes")));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select(idx),
        }
    }

    /// The first `n` examples (or all of them if there are fewer).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(DataError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(DataError::WrongMagic {
                path: self.path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Reads an IDX image file as `[N x rows*cols]` pixels scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    c.magic(IDX_IMAGES_MAGIC)?;
    let n = c.u32()? as usize;
    let d = c.u32()? as usize * c.u32()? as usize;
    let px = c.take(n * d)?;
    Ok(Tensor::matrix(n, d, px.iter().map(|&p| f64::from(p) / 255.0).collect()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    let mut c = Cursor { path, bytes: &bytes, pos: 0 };
    c.magic(IDX_LABELS_MAGIC)?;
    let n = c.u32()? as usize;
    Ok(c.take(n)?.iter().map(|&l| l as usize).collect())
}

/// Loads an image/label IDX pair; gzip-compressed files are detected automatically.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.rows() != y.len() {
        return Err(DataError::CountMismatch {
            images: x.rows(),
            labels: y.len(),
        });
    }
    let classes = y.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(x, Targets::Labels { labels: y, classes })
}

/// Writes a labelled dataset as uncompressed IDX files with `rows x cols` images.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path, rows: usize, cols: usize) -> Result<()> {
    let Targets::Labels { labels: y, .. } = &ds.targets else {
        return Err(DataError::Invalid("IDX needs integer labels".into()));
    };
    if rows * cols != ds.dim() {
        return Err(DataError::Invalid(format!("{rows}x{cols} images but {} inputs", ds.dim())));
    }
    if y.iter().any(|&l| l > 255) {
        return Err(DataError::Invalid("labels must fit in a byte".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.inputs.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [ds.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(ds.inputs.data().iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + y.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(y.len() as u32).to_be_bytes());
    lab.extend(y.iter().map(|&l| l as u8));
    for (path, bytes) in [(images, img), (labels, lab)] {
        std::fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Linear regression data `y = X w* + noise` with exactly `k_active` non-zero
/// coordinates in `w*`, each `+1` or `-1`. Returns the data and the sorted support.
pub fn synth_sparse_regression(
    n: usize,
    d: usize,
    k_active: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    if n == 0 || k_active == 0 || k_active > d || !(noise_std >= 0.0) {
        return Err(DataError::Invalid(format!(
            "n={n}, d={d}, k_active={k_active}, noise_std={noise_std}"
        )));
    }
    let mut rng = RngStream::new(seed);
    let mut support = rng.permutation(d)[..k_active].to_vec();
    support.sort_unstable();
    let mut w = vec![0.0; d];
    for &j in &support {
        w[j] = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    }
    let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + noise_std * rng.normal()
        })
        .collect();
    let ds = Dataset::new(Tensor::matrix(n, d, x), Targets::Values(Tensor::matrix(n, 1, y)))?;
    Ok((ds, support))
}

/// Noisy XOR of two coordinates: points near the corners of the unit square,
/// labelled 1 when exactly one coordinate is near 1.
pub fn synth_xor(n: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(DataError::Invalid("n must be positive".into()));
    }
    let mut rng = RngStream::new(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = ((i & 1) as f64, ((i >> 1) & 1) as f64);
        x.push(a + spread * rng.normal());
        x.push(b + spread * rng.normal());
        y.push((i & 1) ^ ((i >> 1) & 1));
    }
    Dataset::new(Tensor::matrix(n, 2, x), Targets::Labels { labels: y, classes: 2 })
}
