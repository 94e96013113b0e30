//! Per-sample loss and gradient oracles, dataset generation, partitioning
//! and IDX ingestion.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{self, tag};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("sample index {idx} out of range for {m} samples")]
    IndexOutOfRange { idx: usize, m: usize },
    #[error("{0} is not supported for this objective")]
    Unsupported(&'static str),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("bad IDX magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("dataset csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Row-major feature matrix with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Option<Vec<u32>>,
    classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Option<Vec<u32>>,
        classes: usize,
    ) -> Result<Self, ObjectiveError> {
        if dim == 0 {
            return Err(ObjectiveError::InvalidDataset("feature dimension is zero".into()));
        }
        if features.is_empty() || features.len() % dim != 0 {
            return Err(ObjectiveError::InvalidDataset(format!(
                "{} feature values do not form rows of length {dim}",
                features.len()
            )));
        }
        let m = features.len() / dim;
        if let Some(labels) = &labels {
            if labels.len() != m {
                return Err(ObjectiveError::CountMismatch {
                    images: m,
                    labels: labels.len(),
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
                return Err(ObjectiveError::InvalidDataset(format!(
                    "label {bad} outside 0..{classes}"
                )));
            }
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn label(&self, idx: usize) -> Option<u32> {
        self.labels.as_ref().map(|l| l[idx])
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (acc, x) in mean.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        let m = self.len() as f64;
        mean.iter_mut().for_each(|v| *v /= m);
        mean
    }

    /// Rows selected by `order`, in that order.
    pub fn select(&self, order: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: self.labels.as_ref().map(|l| order.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
        }
    }

    /// One row per sample: `label,f0,f1,...` (label empty when absent).
    pub fn write_csv(&self, path: &Path) -> Result<(), ObjectiveError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for i in 0..self.len() {
            let mut rec = vec![self.label(i).map(|l| l.to_string()).unwrap_or_default()];
            rec.extend(self.row(i).iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|source| ObjectiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Dataset, ObjectiveError> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        let mut labelled = None;
        for rec in r.records() {
            let rec = rec?;
            let row_dim = rec.len().saturating_sub(1);
            if *dim.get_or_insert(row_dim) != row_dim {
                return Err(ObjectiveError::InvalidDataset("ragged csv rows".into()));
            }
            let has_label = !rec[0].is_empty();
            if *labelled.get_or_insert(has_label) != has_label {
                return Err(ObjectiveError::InvalidDataset("mixed labelled/unlabelled rows".into()));
            }
            if has_label {
                labels.push(rec[0].parse::<u32>().map_err(|_| {
                    ObjectiveError::InvalidDataset(format!("bad label `{}`", &rec[0]))
                })?);
            }
            for field in rec.iter().skip(1) {
                features.push(field.parse::<f64>().map_err(|_| {
                    ObjectiveError::InvalidDataset(format!("bad feature `{field}`"))
                })?);
            }
        }
        let dim = dim.unwrap_or(0);
        if labelled == Some(true) {
            let classes = labels.iter().max().map_or(0, |&l| l as usize + 1);
            Dataset::new(features, dim, Some(labels), classes)
        } else {
            Dataset::new(features, dim, None, 0)
        }
    }
}

/// Loss family. Logistic models are laid out as a `classes x features`
/// weight matrix (row-major) followed by `classes` biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `f(w; x) = 0.5 * |w - x|^2`
    MeanQuadratic { dim: usize },
    /// Multinomial cross-entropy plus `0.5 * l2 * |w|^2`.
    Logistic { classes: usize, features: usize, l2: f64 },
}

impl Objective {
    pub fn model_dim(&self) -> usize {
        match *self {
            Objective::MeanQuadratic { dim } => dim,
            Objective::Logistic { classes, features, .. } => classes * (features + 1),
        }
    }

    fn feature_dim(&self) -> usize {
        match *self {
            Objective::MeanQuadratic { dim } => dim,
            Objective::Logistic { features, .. } => features,
        }
    }

    fn check(&self, w: &[f64], ds: &Dataset) -> Result<(), ObjectiveError> {
        if w.len() != self.model_dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.model_dim(),
                actual: w.len(),
            });
        }
        if ds.dim() != self.feature_dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.feature_dim(),
                actual: ds.dim(),
            });
        }
        if let Objective::Logistic { classes, .. } = *self {
            if ds.labels().is_none() {
                return Err(ObjectiveError::InvalidDataset("logistic loss needs labels".into()));
            }
            if ds.classes() > classes {
                return Err(ObjectiveError::InvalidDataset(format!(
                    "dataset has {} classes, model has {classes}",
                    ds.classes()
                )));
            }
        }
        Ok(())
    }

    /// Checks that `w` and `ds` fit this objective. The `*_unchecked`
    /// methods assume this has passed.
    pub fn validate(&self, w: &[f64], ds: &Dataset) -> Result<(), ObjectiveError> {
        self.check(w, ds)
    }

    pub fn grad(&self, w: &[f64], ds: &Dataset, idx: usize) -> Result<Vec<f64>, ObjectiveError> {
        self.check(w, ds)?;
        if idx >= ds.len() {
            return Err(ObjectiveError::IndexOutOfRange { idx, m: ds.len() });
        }
        let mut out = vec![0.0; w.len()];
        self.grad_into_unchecked(w, ds, idx, &mut out);
        Ok(out)
    }

    /// Writes the gradient of sample `idx` into `out`.
    pub fn grad_into_unchecked(&self, w: &[f64], ds: &Dataset, idx: usize, out: &mut [f64]) {
        let x = ds.row(idx);
        match *self {
            Objective::MeanQuadratic { .. } => {
                for ((o, wi), xi) in out.iter_mut().zip(w).zip(x) {
                    *o = wi - xi;
                }
            }
            Objective::Logistic { classes, features, l2 } => {
                let y = ds.label(idx).expect("checked: labels present") as usize;
                let probs = softmax_probs(w, x, classes, features);
                let bias = classes * features;
                for k in 0..classes {
                    let delta = probs[k] - if k == y { 1.0 } else { 0.0 };
                    let row = &mut out[k * features..(k + 1) * features];
                    for (o, xi) in row.iter_mut().zip(x) {
                        *o = delta * xi;
                    }
                    out[bias + k] = delta;
                }
                if l2 > 0.0 {
                    for (o, wi) in out.iter_mut().zip(w) {
                        *o += l2 * wi;
                    }
                }
            }
        }
    }

    fn sample_loss(&self, w: &[f64], ds: &Dataset, idx: usize) -> f64 {
        let x = ds.row(idx);
        match *self {
            Objective::MeanQuadratic { .. } => {
                0.5 * w.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            Objective::Logistic { classes, features, .. } => {
                let y = ds.label(idx).expect("checked: labels present") as usize;
                let logits = logits(w, x, classes, features);
                log_sum_exp(&logits) - logits[y]
            }
        }
    }

    /// Mean per-sample loss (plus the L2 term for logistic models).
    pub fn loss(&self, w: &[f64], ds: &Dataset) -> Result<f64, ObjectiveError> {
        self.check(w, ds)?;
        let total: f64 = (0..ds.len()).map(|i| self.sample_loss(w, ds, i)).sum();
        let mut loss = total / ds.len() as f64;
        if let Objective::Logistic { l2, .. } = *self {
            loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(loss)
    }

    /// Full gradient of [`Objective::loss`].
    pub fn full_grad(&self, w: &[f64], ds: &Dataset) -> Result<Vec<f64>, ObjectiveError> {
        self.check(w, ds)?;
        let mut acc = vec![0.0; w.len()];
        let mut g = vec![0.0; w.len()];
        // The per-sample gradient already carries the L2 term once.
        for i in 0..ds.len() {
            self.grad_into_unchecked(w, ds, i, &mut g);
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let m = ds.len() as f64;
        acc.iter_mut().for_each(|a| *a /= m);
        Ok(acc)
    }

    /// Fraction of samples whose argmax class matches the label. Ties go to
    /// the lowest class id.
    pub fn accuracy(&self, w: &[f64], ds: &Dataset) -> Result<f64, ObjectiveError> {
        let (classes, features) = match *self {
            Objective::MeanQuadratic { .. } => return Err(ObjectiveError::Unsupported("accuracy")),
            Objective::Logistic { classes, features, .. } => (classes, features),
        };
        self.check(w, ds)?;
        let correct = (0..ds.len())
            .filter(|&i| {
                let z = logits(w, ds.row(i), classes, features);
                argmax(&z) == ds.label(i).expect("checked") as usize
            })
            .count();
        Ok(correct as f64 / ds.len() as f64)
    }
}

fn logits(w: &[f64], x: &[f64], classes: usize, features: usize) -> Vec<f64> {
    let bias = classes * features;
    (0..classes)
        .map(|k| {
            let row = &w[k * features..(k + 1) * features];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[bias + k]
        })
        .collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_probs(w: &[f64], x: &[f64], classes: usize, features: usize) -> Vec<f64> {
    let z = logits(w, x, classes, features);
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Balanced Gaussian clusters (unit variance) whose centers sit at radius
/// `separation` from the origin, evenly spaced on a circle in the first two
/// coordinates. Centers do not depend on `seed`, so two seeds draw from the
/// same distribution.
pub fn synthetic_blobs(
    seed: u64,
    m: usize,
    dim: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset, ObjectiveError> {
    if classes < 2 || m < classes || dim == 0 {
        return Err(ObjectiveError::InvalidDataset(format!(
            "blobs need classes >= 2, m >= classes and dim >= 1 (m={m}, dim={dim}, classes={classes})"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if dim == 1 {
                c[0] = separation * (2.0 * k as f64 / (classes - 1) as f64 - 1.0);
            } else {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                c[0] = separation * angle.cos();
                c[1] = separation * angle.sin();
            }
            c
        })
        .collect();
    let mut rng = seeding::stream(seed, tag::DATA, 0);
    let mut features = Vec::with_capacity(m * dim);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let k = i % classes;
        for c in &centers[k] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(c + z);
        }
        labels.push(k as u32);
    }
    Dataset::new(features, dim, Some(labels), classes)
}

/// Unlabelled Gaussian cloud centered at the all-ones vector with
/// per-coordinate standard deviation `spread`.
pub fn synthetic_cloud(seed: u64, m: usize, dim: usize, spread: f64) -> Result<Dataset, ObjectiveError> {
    if m == 0 || dim == 0 || !(spread >= 0.0) {
        return Err(ObjectiveError::InvalidDataset(format!(
            "cloud needs m >= 1, dim >= 1, spread >= 0 (m={m}, dim={dim}, spread={spread})"
        )));
    }
    let mut rng = seeding::stream(seed, tag::DATA, 1);
    let features = (0..m * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            1.0 + spread * z
        })
        .collect();
    Dataset::new(features, dim, None, 0)
}

/// Per-node index sets into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    shards: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    /// Every node samples from the whole dataset.
    Shared,
    /// Random disjoint shards of (nearly) equal size.
    #[default]
    Iid,
    /// Contiguous slices of the label-sorted dataset.
    LabelSkew,
}

impl Partition {
    pub fn build(kind: PartitionKind, seed: u64, n: usize, ds: &Dataset) -> Result<Self, ObjectiveError> {
        let m = ds.len();
        if n == 0 || m < n {
            return Err(ObjectiveError::InvalidDataset(format!(
                "cannot split {m} samples across {n} nodes"
            )));
        }
        let shards = match kind {
            PartitionKind::Shared => vec![(0..m).collect(); n],
            PartitionKind::Iid => {
                let mut order: Vec<usize> = (0..m).collect();
                order.shuffle(&mut seeding::stream(seed, tag::PARTITION, 0));
                let mut shards = vec![Vec::new(); n];
                for (pos, idx) in order.into_iter().enumerate() {
                    shards[pos % n].push(idx);
                }
                // Sorted so that a single shard is the identity ordering.
                shards.iter_mut().for_each(|s| s.sort_unstable());
                shards
            }
            PartitionKind::LabelSkew => {
                let labels = ds.labels().ok_or_else(|| {
                    ObjectiveError::InvalidDataset("label-skew partition needs labels".into())
                })?;
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by_key(|&i| (labels[i], i));
                let base = m / n;
                let extra = m % n;
                let mut start = 0;
                (0..n)
                    .map(|c| {
                        let len = base + usize::from(c < extra);
                        let shard = order[start..start + len].to_vec();
                        start += len;
                        shard
                    })
                    .collect()
            }
        };
        Ok(Partition { shards })
    }

    pub fn shard(&self, node: usize) -> &[usize] {
        &self.shards[node]
    }

    pub fn node_count(&self) -> usize {
        self.shards.len()
    }
}

/// Draws one index uniformly (with replacement) from `shard`.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, shard: &[usize]) -> usize {
    shard[rng.random_range(0..shard.len())]
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, ObjectiveError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(ObjectiveError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parsed IDX image file: `count` images of `rows x cols` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, ObjectiveError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(ObjectiveError::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(ObjectiveError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, ObjectiveError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(ObjectiveError::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(ObjectiveError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Builds a dataset from parsed IDX parts; pixels scale by 1/255.
pub fn idx_dataset(images: &IdxImages, labels: &[u8]) -> Result<Dataset, ObjectiveError> {
    if images.count != labels.len() {
        return Err(ObjectiveError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let dim = images.rows * images.cols;
    let features = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let classes = labels.iter().max().map_or(0, |&l| l as usize + 1);
    Dataset::new(features, dim, Some(labels), classes)
}

fn read_file(path: &Path) -> Result<Vec<u8>, ObjectiveError> {
    fs::read(path).map_err(|source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, ObjectiveError> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    idx_dataset(&images, &labels)
}
