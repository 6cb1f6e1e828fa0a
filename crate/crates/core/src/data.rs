//! Datasets: seeded synthetic generators, IDX and CSV loaders, batching.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Fraction of generated samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Blobs,
    Spirals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum Provenance {
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        num_classes: usize,
        noise: f64,
        seed: u64,
    },
    File {
        sha256: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...feature shape]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

/// A training/validation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, provenance: Provenance) -> Result<Self> {
        if features.rank() < 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("features {:?} for {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Contract(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    fn row_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.row_len();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(&self.features.values()[i * d..(i + 1) * d]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.feature_shape());
        Batch {
            x: Tensor::new(shape, x).expect("non-empty selection"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let b = self.select(indices);
        Dataset {
            features: b.x,
            labels: b.labels,
            num_classes: self.num_classes,
            split,
            provenance: self.provenance.clone(),
        }
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch {
            x: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Seeded shuffle, then the first `TRAIN_FRACTION` goes to training.
    pub fn split(&self, seed: u64) -> Result<Splits> {
        let n = self.len();
        let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::Contract(format!("{n} samples are too few to split")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, Stream::DataSplit, 0));
        Ok(Splits {
            train: self.subset(&order[..n_train], Split::Train),
            val: self.subset(&order[n_train..], Split::Val),
        })
    }
}

/// One mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Balanced labels: class `c` gets `n / K` samples, the first `n % K` classes
/// one extra.
fn balanced_labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

/// Generates `n` 2-D points and splits them 80/20.
///
/// Blobs: one isotropic Gaussian (std `noise`) per class, centered on the
/// unit circle at angle `2 pi c / K`. Spirals: arm `c` follows
/// `r = t, angle = 4 t + 2 pi c / K` for `t ~ U(0, 1)`, plus Gaussian noise.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, num_classes: usize, noise: f64, seed: u64) -> Result<Splits> {
    if num_classes < 2 || n < num_classes {
        return Err(Error::Contract(format!("need n >= classes >= 2, got n={n}, classes={num_classes}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Contract(format!("noise must be finite and >= 0, got {noise}")));
    }
    let mut rng = stream_rng(seed, Stream::DataGen, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let labels = balanced_labels(n, num_classes);
    let mut x = Vec::with_capacity(2 * n);
    for &c in &labels {
        let phase = std::f64::consts::TAU * c as f64 / num_classes as f64;
        let (cx, cy) = match kind {
            SyntheticKind::Blobs => (phase.cos(), phase.sin()),
            SyntheticKind::Spirals => {
                let t: f64 = rng.random();
                let a = 4.0 * t + phase;
                (t * a.cos(), t * a.sin())
            }
        };
        let (nx, ny): (f64, f64) = (normal.sample(&mut rng), normal.sample(&mut rng));
        x.push(cx + noise * nx);
        x.push(cy + noise * ny);
    }
    let full = Dataset::new(
        Tensor::new(vec![n, 2], x)?,
        labels,
        num_classes,
        Split::Full,
        Provenance::Synthetic {
            kind,
            n,
            num_classes,
            noise,
            seed,
        },
    )?;
    full.split(seed)
}

/// Batches for one epoch: a permutation keyed by `(seed, epoch)`, chunked,
/// with the final partial batch kept.
pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    Ok(epoch_order(ds.len(), seed, epoch)
        .chunks(batch_size)
        .map(|idx| ds.select(idx))
        .collect())
}

pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Batches, epoch as u64));
    order
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl IdxReader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(self.path, "truncated header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn payload(&self, len: usize) -> Result<&[u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::format(
                self.path,
                format!("truncated payload: expected {len} bytes, found {}", rest.len()),
            ));
        }
        Ok(&rest[..len])
    }
}

fn magic(r: &mut IdxReader<'_>, expected: u32) -> Result<()> {
    let m = r.u32()?;
    if m != expected {
        return Err(Error::format(
            r.path,
            format!("bad magic 0x{m:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

/// Reads an IDX image/label pair (MNIST layout). Pixels are scaled by 1/255
/// and images get a singleton channel axis: `[N, 1, rows, cols]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images)?;
    let lbl_bytes = fs::read(labels)?;

    let mut r = IdxReader {
        path: images,
        bytes: &img_bytes,
        pos: 0,
    };
    magic(&mut r, IDX_IMAGES_MAGIC)?;
    let (n, rows, cols) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(images, format!("empty dimensions {n}x{rows}x{cols}")));
    }
    let pixels = r.payload(n * rows * cols)?;
    let x: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();

    let mut r = IdxReader {
        path: labels,
        bytes: &lbl_bytes,
        pos: 0,
    };
    magic(&mut r, IDX_LABELS_MAGIC)?;
    let n_labels = r.u32()? as usize;
    if n_labels != n {
        return Err(Error::format(labels, format!("{n_labels} labels for {n} images")));
    }
    let ys: Vec<usize> = r.payload(n)?.iter().map(|&b| b as usize).collect();
    let num_classes = ys.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], x)?,
        ys,
        num_classes,
        Split::Full,
        Provenance::File {
            sha256: sha256_hex(&[&img_bytes, &lbl_bytes]),
        },
    )
}

/// Writes `ds` as an IDX pair. Features must have shape `[N, 1, rows, cols]`
/// with values that are exact multiples of 1/255 in `[0, 1]`.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let &[n, 1, rows, cols] = ds.features.shape() else {
        return Err(Error::shape("write_idx", format!("features {:?}", ds.features.shape())));
    };
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &v in ds.features.values() {
        let b = (v * 255.0).round();
        if !(0.0..=255.0).contains(&b) || (b / 255.0 - v).abs() > 1e-12 {
            return Err(Error::Contract(format!("pixel value {v} is not a byte / 255")));
        }
        img.push(b as u8);
    }
    let mut lbl = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lbl.extend_from_slice(&v.to_be_bytes());
    }
    for &y in &ds.labels {
        lbl.push(u8::try_from(y).map_err(|_| Error::Contract(format!("label {y} exceeds a byte")))?);
    }
    fs::File::create(images)?.write_all(&img)?;
    fs::File::create(labels)?.write_all(&lbl)?;
    Ok(())
}

/// Reads a CSV with a header row: column `label` holds class indices, every
/// other column is a numeric feature.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let headers = rdr.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::format(path, "no `label` column"))?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(Error::format(path, "no feature columns"));
    }
    let mut x = Vec::new();
    let mut ys = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                ys.push(field.parse::<usize>().map_err(|_| {
                    Error::format(path, format!("row {}: label `{field}` is not a class index", line + 1))
                })?);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::format(path, format!("row {}: `{field}` is not a number", line + 1)))?;
                x.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(Error::format(path, "no data rows"));
    }
    let num_classes = ys.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![ys.len(), d], x)?,
        ys,
        num_classes,
        Split::Full,
        Provenance::File {
            sha256: sha256_hex(&[&bytes]),
        },
    )
}
