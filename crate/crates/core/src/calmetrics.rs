//! Calibration and evaluation metrics.
//!
//! All binned metrics share one binning rule: with `B` bins, bin `i`
//! (1-based) holds confidences in `((i-1)/B, i/B]`. A confidence of exactly
//! zero lands in the first bin. Empty bins contribute nothing.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, softmax_rows};

/// Bin count used when none is given.
pub const DEFAULT_BINS: usize = 15;

/// Model outputs on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub probs: Array2<f64>,
    pub labels: Vec<usize>,
    pub logits: Option<Array2<f64>>,
}

impl PredictionSet {
    pub fn new(probs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if probs.nrows() == 0 {
            return Err(Error::invalid("prediction set is empty"));
        }
        if probs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: probs.nrows(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&y| y >= probs.ncols()) {
            return Err(Error::invalid("label outside probability columns"));
        }
        for row in probs.axis_iter(Axis(0)) {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::invalid(format!("probability row sums to {s}")));
            }
        }
        Ok(Self { probs, labels, logits: None })
    }

    pub fn from_logits(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let probs = softmax_rows(&logits);
        let mut p = Self::new(probs, labels)?;
        p.logits = Some(logits);
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `(confidence, correct)`: max probability and whether the
    /// first-index argmax matches the label.
    pub fn confidences(&self) -> Vec<(f64, bool)> {
        self.probs
            .axis_iter(Axis(0))
            .zip(&self.labels)
            .map(|(row, &y)| {
                let k = argmax(row);
                (row[k], k == y)
            })
            .collect()
    }
}

/// 1-based bin of a confidence value.
pub fn bin_of(confidence: f64, n_bins: usize) -> usize {
    let b = n_bins as f64;
    let mut i = ((confidence * b).ceil() as usize).clamp(1, n_bins);
    // The float product can step across an edge; settle against the edges
    // exactly as they are written, (i-1)/B and i/B.
    while i > 1 && confidence <= (i - 1) as f64 / b {
        i -= 1;
    }
    while i < n_bins && confidence > i as f64 / b {
        i += 1;
    }
    i
}

fn check_bins(n_bins: usize) -> Result<()> {
    if n_bins < 1 {
        return Err(Error::invalid("n_bins must be at least 1"));
    }
    Ok(())
}

/// One row of a reliability table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction correct; zero for an empty bin.
    pub accuracy: f64,
    /// Mean confidence; zero for an empty bin.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTable {
    pub bins: Vec<Bin>,
    pub n: usize,
}

impl BinTable {
    fn from_groups<'a>(groups: impl Iterator<Item = (f64, f64, &'a [(f64, bool)])>, n: usize) -> Self {
        let bins = groups
            .map(|(lo, hi, members)| {
                let count = members.len();
                let (mut conf, mut hits) = (0.0, 0usize);
                for &(c, ok) in members {
                    conf += c;
                    hits += usize::from(ok);
                }
                let (accuracy, confidence) = if count == 0 {
                    (0.0, 0.0)
                } else {
                    (hits as f64 / count as f64, conf / count as f64)
                };
                Bin { lo, hi, count, accuracy, confidence }
            })
            .collect();
        Self { bins, n }
    }

    /// Count-weighted mean gap between accuracy and confidence.
    pub fn ece(&self) -> f64 {
        let n = self.n as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / n) * (b.accuracy - b.confidence).abs())
            .sum()
    }

    /// Largest gap over non-empty bins.
    pub fn mce(&self) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.accuracy - b.confidence).abs())
            .fold(0.0, f64::max)
    }

    /// `bin_lo,bin_hi,count,accuracy,confidence`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,accuracy,confidence\n");
        for b in &self.bins {
            let _ = writeln!(out, "{:?},{:?},{},{:?},{:?}", b.lo, b.hi, b.count, b.accuracy, b.confidence);
        }
        out
    }
}

fn equal_width_groups(samples: &[(f64, bool)], n_bins: usize) -> Vec<Vec<(f64, bool)>> {
    let mut groups = vec![Vec::new(); n_bins];
    for &s in samples {
        groups[bin_of(s.0, n_bins) - 1].push(s);
    }
    groups
}

fn equal_width_table(samples: &[(f64, bool)], n_bins: usize) -> BinTable {
    let groups = equal_width_groups(samples, n_bins);
    let b = n_bins as f64;
    BinTable::from_groups(
        groups
            .iter()
            .enumerate()
            .map(|(i, g)| (i as f64 / b, (i + 1) as f64 / b, g.as_slice())),
        samples.len(),
    )
}

/// The equal-width table behind [`ece`] and [`mce`].
pub fn reliability_table(p: &PredictionSet, n_bins: usize) -> Result<BinTable> {
    check_bins(n_bins)?;
    Ok(equal_width_table(&p.confidences(), n_bins))
}

/// Expected calibration error over equal-width bins.
pub fn ece(p: &PredictionSet, n_bins: usize) -> Result<f64> {
    Ok(reliability_table(p, n_bins)?.ece())
}

/// Maximum calibration error over non-empty equal-width bins.
pub fn mce(p: &PredictionSet, n_bins: usize) -> Result<f64> {
    Ok(reliability_table(p, n_bins)?.mce())
}

/// Sizes of equal-count bins: the first `n % B` bins hold one extra sample.
pub fn adaptive_bin_sizes(n: usize, n_bins: usize) -> Vec<usize> {
    (0..n_bins)
        .map(|i| n / n_bins + usize::from(i < n % n_bins))
        .collect()
}

/// ECE over equal-count bins of the confidence-sorted samples.
pub fn adaptive_ece(p: &PredictionSet, n_bins: usize) -> Result<f64> {
    Ok(adaptive_table(p, n_bins)?.ece())
}

pub fn adaptive_table(p: &PredictionSet, n_bins: usize) -> Result<BinTable> {
    check_bins(n_bins)?;
    if p.len() < n_bins {
        return Err(Error::invalid(format!(
            "adaptive ECE needs at least {n_bins} samples, got {}",
            p.len()
        )));
    }
    let mut samples = p.confidences();
    // Stable sort keeps original index order among equal confidences.
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let sizes = adaptive_bin_sizes(samples.len(), n_bins);
    let mut start = 0;
    let groups: Vec<(f64, f64, &[(f64, bool)])> = sizes
        .iter()
        .map(|&s| {
            let g = &samples[start..start + s];
            start += s;
            (g[0].0, g[s - 1].0, g)
        })
        .collect();
    Ok(BinTable::from_groups(groups.into_iter(), samples.len()))
}

/// Classwise ECE: every class's probability column is binned on its own and
/// the per-class ECEs are averaged.
pub fn classwise_ece(p: &PredictionSet, n_bins: usize) -> Result<f64> {
    check_bins(n_bins)?;
    let k = p.probs.ncols();
    let total: f64 = (0..k)
        .map(|j| {
            let samples: Vec<(f64, bool)> = p
                .probs
                .column(j)
                .iter()
                .zip(&p.labels)
                .map(|(&pj, &y)| (pj, y == j))
                .collect();
            equal_width_table(&samples, n_bins).ece()
        })
        .sum();
    Ok(total / k as f64)
}

/// Probability floor applied before taking logs.
pub const NLL_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of the true class.
pub fn nll(p: &PredictionSet) -> f64 {
    let total: f64 = p
        .probs
        .axis_iter(Axis(0))
        .zip(&p.labels)
        .map(|(row, &y)| -row[y].max(NLL_FLOOR).ln())
        .sum();
    total / p.len() as f64
}

/// Fraction of samples whose first-index argmax differs from the label.
pub fn error(p: &PredictionSet) -> f64 {
    let wrong = p.confidences().iter().filter(|c| !c.1).count();
    wrong as f64 / p.len() as f64
}

/// Softmax of `logits / tau`.
pub fn apply_temperature(logits: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(softmax_rows(&(logits / tau)))
}

/// `0.1, 0.2, ..., 10.0`. Zero is left out since it divides by zero.
pub fn default_temperature_grid() -> Vec<f64> {
    (1..=100).map(|k| k as f64 / 10.0).collect()
}

/// Grid temperature minimizing post-scaling ECE. Ties go to the temperature
/// nearest 1.0, then to the smaller one.
pub fn temperature_search(
    logits: &Array2<f64>,
    labels: &[usize],
    grid: &[f64],
    n_bins: usize,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::invalid("temperature grid is empty"));
    }
    let mut best: Option<(f64, f64)> = None;
    for &tau in grid {
        let p = PredictionSet::new(apply_temperature(logits, tau)?, labels.to_vec())?;
        let e = ece(&p, n_bins)?;
        let better = match best {
            None => true,
            Some((bt, be)) => {
                e < be
                    || (e == be
                        && ((tau - 1.0).abs() < (bt - 1.0).abs()
                            || ((tau - 1.0).abs() == (bt - 1.0).abs() && tau < bt)))
            }
        };
        if better {
            best = Some((tau, e));
        }
    }
    Ok(best.map(|b| b.0).expect("grid is non-empty"))
}

/// Probability that an in-distribution score beats an out-of-distribution
/// score, ties counting one half (Mann-Whitney U over `n_in * n_out`).
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::invalid("AUROC needs non-empty score sets"));
    }
    if scores_in.iter().chain(scores_out).any(|s| !s.is_finite()) {
        return Err(Error::invalid("AUROC scores must be finite"));
    }
    let mut out = scores_out.to_vec();
    out.sort_by(f64::total_cmp);
    // Twice U, so ties stay integral.
    let mut twice_u: u128 = 0;
    for &s in scores_in {
        let below = out.partition_point(|&o| o < s);
        let not_above = out.partition_point(|&o| o <= s);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    let twice_n = 2 * scores_in.len() as u128 * scores_out.len() as u128;
    let n = twice_n as f64;
    // Divide whichever side of the statistic is smaller, so swapping the
    // arguments gives exactly the complement.
    let complement = twice_n - twice_u;
    Ok(if twice_u <= complement {
        twice_u as f64 / n
    } else {
        1.0 - complement as f64 / n
    })
}

/// Max-softmax confidence of every row.
pub fn max_confidence(probs: &Array2<f64>) -> Vec<f64> {
    probs
        .axis_iter(Axis(0))
        .map(|r: ArrayView1<'_, f64>| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// The metric bundle recorded for every evaluated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub err: f64,
    pub ece: f64,
    pub adaece: f64,
    pub cwece: f64,
    pub mce: f64,
    pub nll: f64,
}

pub fn summarize(p: &PredictionSet, n_bins: usize) -> Result<MetricSet> {
    let table = reliability_table(p, n_bins)?;
    Ok(MetricSet {
        err: error(p),
        ece: table.ece(),
        adaece: adaptive_ece(p, n_bins.min(p.len()))?,
        cwece: classwise_ece(p, n_bins)?,
        mce: table.mce(),
        nll: nll(p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    // Probability rows whose maximum is `c`, placed on the label when
    // `correct`; ten classes keep the remaining mass below `c`.
    pub(crate) fn set_from(conf: &[f64], correct: &[bool]) -> PredictionSet {
        let k = 10;
        let mut probs = Array2::zeros((conf.len(), k));
        let mut labels = Vec::new();
        for (i, (&c, &ok)) in conf.iter().zip(correct).enumerate() {
            let rest = (1.0 - c) / (k - 1) as f64;
            probs.row_mut(i).fill(rest);
            probs[[i, 0]] = c;
            labels.push(if ok { 0 } else { 1 });
        }
        PredictionSet::new(probs, labels).unwrap()
    }

    fn four() -> PredictionSet {
        set_from(&[0.3, 0.7, 0.8, 0.9], &[false, true, true, true])
    }

    #[test]
    fn ece_hand_example() {
        assert!((ece(&four(), 2).unwrap() - 0.225).abs() < 1e-12);
    }

    #[test]
    fn ece_perfect_and_single_bin() {
        let p = PredictionSet::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]).unwrap();
        assert_eq!(ece(&p, 15).unwrap(), 0.0);
        let q = four();
        let acc: f64 = 0.75;
        let mean_conf = (0.3 + 0.7 + 0.8 + 0.9) / 4.0;
        assert!((ece(&q, 1).unwrap() - (acc - mean_conf).abs()).abs() < 1e-15);
    }

    #[test]
    fn mce_hand_example() {
        assert!((mce(&four(), 2).unwrap() - 0.3).abs() < 1e-12);
        let p = set_from(&[0.5, 0.5], &[true, false]);
        assert_eq!(mce(&p, 1).unwrap(), 0.0);
        assert!(mce(&four(), 2).unwrap() >= ece(&four(), 2).unwrap());
    }

    #[test]
    fn adaptive_hand_example() {
        assert!((adaptive_ece(&four(), 2).unwrap() - 0.075).abs() < 1e-12);
        assert_eq!(adaptive_ece(&four(), 1).unwrap(), ece(&four(), 1).unwrap());
        assert_eq!(adaptive_bin_sizes(7, 3), vec![3, 2, 2]);
        assert!(adaptive_ece(&four(), 5).is_err());
    }

    #[test]
    fn classwise_hand_example() {
        let p = PredictionSet::new(array![[0.8, 0.2], [0.6, 0.4]], vec![0, 0]).unwrap();
        assert!((classwise_ece(&p, 1).unwrap() - 0.3).abs() < 1e-12);
        let onehot = PredictionSet::new(array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], vec![0, 2]).unwrap();
        assert_eq!(classwise_ece(&onehot, 15).unwrap(), 0.0);
    }

    #[test]
    fn nll_and_error() {
        let sure = PredictionSet::new(array![[1.0, 0.0]], vec![0]).unwrap();
        assert_eq!(nll(&sure), 0.0);
        let half = PredictionSet::new(array![[0.5, 0.5]], vec![0]).unwrap();
        assert!((nll(&half) - std::f64::consts::LN_2).abs() < 1e-12);
        let zero = PredictionSet::new(array![[1.0, 0.0]], vec![1]).unwrap();
        assert!((nll(&zero) - 1e12f64.ln()).abs() < 1e-9);
        let p = set_from(&[0.9, 0.9, 0.9, 0.9], &[true, true, true, false]);
        assert_eq!(error(&p), 0.25);
        assert_eq!(error(&sure), 0.0);
    }

    #[test]
    fn bins_are_left_open() {
        assert_eq!(bin_of(0.5, 2), 1);
        assert_eq!(bin_of(0.500001, 2), 2);
        assert_eq!(bin_of(0.0, 4), 1);
        assert_eq!(bin_of(1.0, 15), 15);
        for k in 1..15 {
            let edge = k as f64 / 15.0;
            assert_eq!(bin_of(edge, 15), k, "edge {edge}");
        }
        assert_eq!(bin_of(0.2, 15), 3);
    }

    #[test]
    fn reliability_hand_example() {
        let t = reliability_table(&four(), 2).unwrap();
        assert_eq!(t.bins[0].count, 1);
        assert_eq!(t.bins[0].accuracy, 0.0);
        assert!((t.bins[0].confidence - 0.3).abs() < 1e-15);
        assert_eq!(t.bins[1].count, 3);
        assert_eq!(t.bins[1].accuracy, 1.0);
        assert!((t.bins[1].confidence - 0.8).abs() < 1e-15);
        assert_eq!(t.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(t.ece(), ece(&four(), 2).unwrap());
        assert!(t.to_csv().starts_with("bin_lo,bin_hi,count,accuracy,confidence\n0.0,0.5,1,"));
    }

    #[test]
    fn temperature_examples() {
        let p = apply_temperature(&array![[2.0, 0.0]], 2.0).unwrap();
        assert!((p[[0, 0]] - 0.731059).abs() < 1e-6);
        assert!((p[[0, 1]] - 0.268941).abs() < 1e-6);
        let l = array![[0.3, -1.0, 2.0]];
        assert_eq!(apply_temperature(&l, 1.0).unwrap(), softmax_rows(&l));
        assert!(apply_temperature(&l, 0.0).is_err());
        assert!(temperature_search(&l, &[2], &[], 15).is_err());
    }

    #[test]
    fn temperature_tie_prefers_one() {
        // All predictions correct with saturated logits: any temperature in
        // the grid drives ECE to the same (zero) floor once confidence is 1.
        let logits = array![[800.0, 0.0], [0.0, 800.0]];
        let tau = temperature_search(&logits, &[0, 1], &[0.5, 1.0, 2.0], 15).unwrap();
        assert_eq!(tau, 1.0);
        let tau = temperature_search(&logits, &[0, 1], &[0.5, 2.0], 15).unwrap();
        assert_eq!(tau, 0.5);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[0.5]).unwrap(), 0.5);
        assert!(auroc(&[], &[0.1]).is_err());
    }
}
