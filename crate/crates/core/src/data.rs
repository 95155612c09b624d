//! Labelled datasets with features in `[0, 1]^D`: synthetic generators and a
//! CSV loader.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, n_classes: usize) -> Result<Self> {
        ensure!(dim >= 1, Input, "feature dimension must be positive");
        ensure!(!labels.is_empty(), Input, "dataset must contain at least one sample");
        ensure!(
            features.len() == labels.len() * dim,
            Input,
            "{} features do not fit {} samples of width {dim}",
            features.len(),
            labels.len()
        );
        ensure!(
            features.iter().all(|v| v.is_finite()),
            Numeric,
            "features must be finite"
        );
        ensure!(n_classes >= 2, Input, "need at least 2 classes");
        ensure!(
            labels.iter().all(|&y| y < n_classes),
            Input,
            "label out of range for {n_classes} classes"
        );
        Ok(Self {
            features,
            labels,
            dim,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// All features as an `N×D` tensor.
    pub fn inputs(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.dim], self.features.clone())
    }

    /// Rows `indices` as an `(inputs, labels)` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            x.extend_from_slice(self.x(i));
        }
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(vec![indices.len(), self.dim], x), y)
    }

    /// The samples at `indices`, keeping the class count.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        ensure!(!indices.is_empty(), Input, "empty subset");
        let (x, y) = self.batch(indices);
        Self::new(x.into_values(), y, self.dim, self.n_classes)
    }

    /// SHA-256 over dimension, class count, feature bits and labels.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.n_classes as u64).to_le_bytes());
        for v in &self.features {
            h.update(v.to_bits().to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV without renormalizing; the inverse of [`Dataset::write_csv`].
    pub fn read_csv_raw(path: impl AsRef<Path>) -> Result<Self> {
        let (features, labels, dim) = parse_csv(path.as_ref())?;
        let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
        ensure!(
            features.iter().all(|v| (0.0..=1.0).contains(v)),
            Format,
            "{}: features outside [0, 1]",
            path.as_ref().display()
        );
        Self::new(features, labels, dim, n_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoGaussians,
    Rings,
    XorGrid,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::TwoGaussians => "two_gaussians",
            DatasetKind::Rings => "rings",
            DatasetKind::XorGrid => "xor_grid",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_gaussians" => Ok(Self::TwoGaussians),
            "rings" => Ok(Self::Rings),
            "xor_grid" => Ok(Self::XorGrid),
            other => Err(Error::Input(format!(
                "unknown dataset kind {other:?} (expected two_gaussians, rings or xor_grid)"
            ))),
        }
    }
}

/// Two-dimensional, two-class synthetic data, min-max mapped into `[0,1]²`.
///
/// * `two_gaussians`: class means `(−1, −1)` and `(1, 1)`, isotropic noise.
/// * `rings`: radius 1 (class 0) and radius 2 (class 1), radial noise.
/// * `xor_grid`: clusters at `(±1, ±1)`, label = quadrant parity.
///
/// Sample `i` belongs to class `i % 2`, so classes are balanced to ±1.
pub fn generate_dataset(kind: DatasetKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    ensure!(n >= 4, Input, "dataset size must be at least 4, got {n}");
    ensure!(
        noise >= 0.0 && noise.is_finite(),
        Input,
        "noise must be finite and non-negative"
    );
    let mut rng = seed::rng(seed);
    let mut gauss = || -> f64 { rng.sample::<f64, _>(StandardNormal) };
    let mut raw = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (x, y) = match kind {
            DatasetKind::TwoGaussians => {
                let c = if label == 0 { -1.0 } else { 1.0 };
                (c + noise * gauss(), c + noise * gauss())
            }
            DatasetKind::Rings => {
                let radius = if label == 0 { 1.0 } else { 2.0 };
                let angle = std::f64::consts::TAU * (i / 2) as f64 / n.div_ceil(2) as f64;
                let r = radius + noise * gauss();
                (r * angle.cos(), r * angle.sin())
            }
            DatasetKind::XorGrid => {
                // Quadrants 0 and 3 are class 0, 1 and 2 are class 1.
                let alt = (i / 2) % 2 == 1;
                let quadrant = match (label, alt) {
                    (0, false) => 0,
                    (0, true) => 3,
                    (_, false) => 1,
                    (_, true) => 2,
                };
                let sx = if quadrant & 1 == 0 { -1.0 } else { 1.0 };
                let sy = if quadrant & 2 == 0 { -1.0 } else { 1.0 };
                (sx + noise * gauss(), sy + noise * gauss())
            }
        };
        raw.push(x);
        raw.push(y);
        labels.push(label);
    }
    min_max_normalize(&mut raw, 2);
    Dataset::new(raw, labels, 2, 2)
}

/// Per-column min-max scaling into `[0, 1]`; constant columns become 0.
fn min_max_normalize(values: &mut [f64], dim: usize) {
    for j in 0..dim {
        let col = values.iter().skip(j).step_by(dim);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let span = hi - lo;
        for v in values.iter_mut().skip(j).step_by(dim) {
            *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
}

fn parse_csv(path: &Path) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let width = rdr.headers()?.len();
    ensure!(
        width >= 2,
        Format,
        "{}: need at least one feature column and a label column",
        path.display()
    );
    let dim = width - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // 1-based data row numbers, header excluded.
        let row = r + 1;
        ensure!(
            rec.len() == width,
            Format,
            "row {row}: expected {width} columns, got {}",
            rec.len()
        );
        for (c, cell) in rec.iter().enumerate().take(dim) {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Format(format!("row {row}, column {}: non-numeric cell {cell:?}", c + 1))
            })?;
            ensure!(
                v.is_finite(),
                Format,
                "row {row}, column {}: non-finite value",
                c + 1
            );
            features.push(v);
        }
        let cell = &rec[dim];
        let y: usize = cell.parse().map_err(|_| {
            Error::Format(format!("row {row}, column {width}: label {cell:?} is not a class index"))
        })?;
        labels.push(y);
    }
    ensure!(!labels.is_empty(), Format, "{}: file has no data rows", path.display());
    Ok((features, labels, dim))
}

/// Loads `x0,…,x{D-1},label` rows, min-max normalizing every feature column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let (mut features, labels, dim) = parse_csv(path)?;
    let n_classes = labels.iter().max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; n_classes];
        labels.iter().for_each(|&y| seen[y] = true);
        seen.iter().filter(|&&s| s).count()
    };
    ensure!(distinct >= 2, Format, "{}: only a single class present", path.display());
    min_max_normalize(&mut features, dim);
    Dataset::new(features, labels, dim, n_classes)
}

/// Bernoulli(`p`) inclusion mask for `n` samples. An empty draw is redrawn
/// with a derived seed.
pub fn sample_membership(n: usize, p: f64, seed: u64) -> Result<Vec<bool>> {
    ensure!(p > 0.0 && p < 1.0, Input, "inclusion probability must be in (0, 1), got {p}");
    ensure!(n >= 1, Input, "cannot subsample an empty dataset");
    for attempt in 0..1000u64 {
        let s = if attempt == 0 { seed } else { seed::mix(seed, attempt) };
        let mut rng = seed::rng(s);
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
        if mask.iter().any(|&m| m) {
            return Ok(mask);
        }
        log::warn!("empty subsample for seed {s:#x}; redrawing (attempt {})", attempt + 1);
    }
    Err(Error::Numeric("could not draw a non-empty subsample".into()))
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::mix(seed, epoch as u64)));
    order
}
