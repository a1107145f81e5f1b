//! Datasets: synthetic generation, CSV ingestion, splitting and corruption.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_rng;

/// Radius of the sphere the blob centers sit on.
pub const CENTER_RADIUS: f64 = 4.0;

/// A labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub name: String,
}

impl Dataset {
    /// Builds a dataset, checking every invariant.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        if n_classes == 0 {
            return Err(Error::invalid("n_classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            name: name.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_samples()) {
            return Err(Error::IndexOutOfRange(format!(
                "sample {bad} of {}",
                self.n_samples()
            )));
        }
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.n_classes, name)
    }
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::invalid("split fractions must lie in (0, 1)"));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        Ok(())
    }
}

// Products like 0.15 * 2000 land a hair below the integer they denote.
fn floor_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

fn center_directions(k: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = derive_rng(seed, "blob-centers", 0);
    match dim {
        1 => (0..k)
            .map(|j| {
                let t = if k == 1 { 0.0 } else { 2.0 * j as f64 / (k - 1) as f64 - 1.0 };
                vec![t]
            })
            .collect(),
        2 => {
            let offset: f64 = rng.random();
            (0..k)
                .map(|j| {
                    let angle = 2.0 * PI * (offset + j as f64 / k as f64);
                    vec![angle.cos(), angle.sin()]
                })
                .collect()
        }
        _ => {
            // Halton points with a random Cranley-Patterson shift, centred
            // and projected onto the unit sphere.
            let shift: Vec<f64> = (0..dim).map(|_| rng.random()).collect();
            let bases = first_primes(dim);
            (0..k)
                .map(|j| {
                    let mut v: Vec<f64> = bases
                        .iter()
                        .zip(&shift)
                        .map(|(&b, &s)| 2.0 * ((radical_inverse(j as u64 + 1, b) + s) % 1.0) - 1.0)
                        .collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        v.iter_mut().for_each(|x| *x /= norm);
                    } else {
                        v[0] = 1.0;
                    }
                    v
                })
                .collect()
        }
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Gaussian blobs with label noise.
///
/// Sample `i` is drawn from cluster `i % k`, so classes are balanced. Exactly
/// `floor(label_noise * n)` samples then get a uniformly drawn different label.
pub fn gen_blobs(n: usize, k: usize, dim: usize, label_noise: f64, seed: u64) -> Result<Dataset> {
    if k < 2 || n < k {
        return Err(Error::invalid(format!("need n >= k >= 2, got n={n}, k={k}")));
    }
    if dim == 0 {
        return Err(Error::invalid("dim must be at least 1"));
    }
    if !(0.0..1.0).contains(&label_noise) {
        return Err(Error::invalid("label_noise must lie in [0, 1)"));
    }
    let centers = center_directions(k, dim, seed);
    let mut rng = derive_rng(seed, "blob-samples", 0);
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.axis_iter_mut(Axis(0)).enumerate() {
        let c = i % k;
        for (x, &dir) in row.iter_mut().zip(&centers[c]) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *x = CENTER_RADIUS * dir + z;
        }
        labels.push(c);
    }
    let n_flip = floor_count(label_noise, n);
    let mut rng = derive_rng(seed, "label-noise", 0);
    for i in index::sample(&mut rng, n, n_flip).into_iter() {
        let shift = rng.random_range(1..k);
        labels[i] = (labels[i] + shift) % k;
    }
    Dataset::new(features, labels, k, "blobs")
}

/// Index sets of a seeded split: shuffled, then cut into
/// `[train | val | test]`. Validation and test take the floor of their share,
/// train gets the remainder.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let n_val = floor_count(spec.val_fraction, n);
    let n_test = floor_count(spec.test_fraction, n);
    if n_val == 0 || n_test == 0 || n_val + n_test >= n {
        return Err(Error::invalid(format!(
            "split of {n} samples leaves an empty partition"
        )));
    }
    let mut rng = derive_rng(spec.seed, "split", 0);
    let order = index::sample(&mut rng, n, n).into_vec();
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok((train, val, test))
}

pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = split_indices(d.n_samples(), spec)?;
    Ok((
        d.subset(&tr, format!("{}-train", d.name))?,
        d.subset(&va, format!("{}-val", d.name))?,
        d.subset(&te, format!("{}-test", d.name))?,
    ))
}

/// Noise standard deviation for a corruption severity level.
pub fn corruption_sigma(severity: u8) -> f64 {
    0.2 * f64::from(severity)
}

/// Additive Gaussian feature noise; labels are left untouched.
pub fn corrupt_gaussian(d: &Dataset, severity: u8, seed: u64) -> Result<Dataset> {
    if !(1..=5).contains(&severity) {
        return Err(Error::invalid(format!("severity {severity} outside 1..=5")));
    }
    let noise = Normal::new(0.0, corruption_sigma(severity))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = derive_rng(seed, "corrupt-gaussian", u64::from(severity));
    let mut features = d.features.clone();
    features.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
    Dataset::new(
        features,
        d.labels.clone(),
        d.n_classes,
        format!("{}-gauss{severity}", d.name),
    )
}

/// Reads `f0,...,f{d-1},label` rows; `n_classes` becomes `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, message: e.to_string() })?
        .clone();
    let width = header.len();
    if width < 2 || &header[width - 1] != "label" {
        return Err(Error::Parse {
            row: 0,
            message: "header must be f0,...,f{d-1},label".into(),
        });
    }
    let dim = width - 1;
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for field in record.iter().take(dim) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("bad feature value {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite feature at row {row}")));
            }
            flat.push(v);
        }
        let raw = record[dim].trim();
        let y: usize = raw.parse().map_err(|_| Error::Parse {
            row,
            message: format!("bad label {raw:?}"),
        })?;
        labels.push(y);
    }
    let n = labels.len();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = Array2::from_shape_vec((n, dim), flat)
        .map_err(|e| Error::Format(e.to_string()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(features, labels, n_classes, name)
}

pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(to_err)?;
    let mut header: Vec<String> = (0..d.n_features()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(to_err)?;
    for (row, &y) in d.features.axis_iter(Axis(0)).zip(&d.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
