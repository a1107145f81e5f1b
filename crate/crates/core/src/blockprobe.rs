//! Per-block overfitting probe and candidate-frequency statistics.
//!
//! The probe holds every block but one at a fixed epoch, swaps the free
//! block through each stored candidate, and records validation metrics
//! after the usual recovery epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combsearch::DiscretePc;
use crate::error::{Error, Result};
use crate::netcore::TrainLog;
use crate::orchestrator::{baseline_early_stop, evaluate_pc, EvalContext, EvalRecord, StopCriterion};

/// Epoch the other blocks are held at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fixing {
    /// Early-stopping epoch on validation loss.
    SweetPointLoss,
    /// Early-stopping epoch on validation error.
    SweetPointError,
    FinalEpoch,
}

impl Fixing {
    pub fn resolve(self, log: &TrainLog) -> Result<usize> {
        match self {
            Fixing::SweetPointLoss => baseline_early_stop(log, StopCriterion::Loss),
            Fixing::SweetPointError => baseline_early_stop(log, StopCriterion::Error),
            Fixing::FinalEpoch => log.records.last().map(|r| r.epoch).ok_or_else(|| Error::invalid("training log is empty")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub val_nll: f64,
    pub val_ece: f64,
    pub val_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCurve {
    pub block: usize,
    pub fixing: Fixing,
    pub fixing_epoch: usize,
    /// One point per stored candidate, in epoch order.
    pub points: Vec<CurvePoint>,
}

impl BlockCurve {
    /// Epoch with the lowest validation NLL, earliest on ties.
    pub fn argmin_nll_epoch(&self) -> Option<usize> {
        let mut best: Option<&CurvePoint> = None;
        for p in &self.points {
            if best.is_none_or(|b| p.val_nll < b.val_nll) {
                best = Some(p);
            }
        }
        best.map(|p| p.epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,val_nll,val_ece,val_error\n");
        for p in &self.points {
            writeln!(s, "{},{:?},{:?},{:?}", p.epoch, p.val_nll, p.val_ece, p.val_error).expect("string write");
        }
        s
    }
}

pub fn probe_block(ctx: &EvalContext<'_>, block: usize, fixing: Fixing, log: &TrainLog) -> Result<BlockCurve> {
    let n_blocks = ctx.source.architecture().n_blocks();
    if block >= n_blocks {
        return Err(Error::IndexOutOfRange(format!("block {block} of {n_blocks}")));
    }
    let fixing_epoch = fixing.resolve(log)?;
    let fixed = ctx
        .source
        .candidate_of(fixing_epoch)
        .ok_or(Error::MissingCheckpoint { block, candidate: fixing_epoch })?;
    let k = ctx.source.n_candidates();
    let records = (0..k)
        .into_par_iter()
        .map(|c| {
            let mut choices = vec![fixed; n_blocks];
            choices[block] = c;
            evaluate_pc(ctx, &DiscretePc::new(choices, k)?)
        })
        .collect::<Vec<_>>();
    let points = records
        .into_iter()
        .zip(ctx.source.candidate_epochs())
        .map(|(r, &epoch)| {
            r.map(|r| CurvePoint { epoch, val_nll: r.val.nll, val_ece: r.val.ece, val_error: r.val.err })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockCurve { block, fixing, fixing_epoch, points })
}

/// Selection counts per block over candidate epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcHistogram {
    /// `counts[block]` maps candidate epoch to how often it was chosen.
    pub counts: Vec<BTreeMap<usize, usize>>,
    pub n_records: usize,
    pub empty: bool,
}

impl PcHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,candidate_epoch,count\n");
        for (b, h) in self.counts.iter().enumerate() {
            for (e, c) in h {
                writeln!(s, "{b},{e},{c}").expect("string write");
            }
        }
        s
    }
}

/// Histogram over the records whose validation NLL is below `nll_threshold`.
pub fn pc_statistics(history: &[EvalRecord], nll_threshold: f64) -> PcHistogram {
    let n_blocks = history.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
    let mut counts = vec![BTreeMap::new(); n_blocks];
    let mut n_records = 0;
    for r in history.iter().filter(|r| r.val.nll < nll_threshold) {
        n_records += 1;
        for (b, &e) in r.epochs.iter().enumerate() {
            *counts[b].entry(e).or_insert(0) += 1;
        }
    }
    if n_records == 0 {
        counts.iter_mut().for_each(BTreeMap::clear);
    }
    PcHistogram { counts, n_records, empty: n_records == 0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calmetrics::MetricSet;

    fn rec(epochs: Vec<usize>, nll: f64) -> EvalRecord {
        let m = MetricSet { err: 0.1, ece: 0.1, adaece: 0.1, cwece: 0.1, mce: 0.1, nll };
        EvalRecord {
            pc: epochs.clone(),
            epochs,
            fine_tuned: true,
            val: m,
            test: None,
            temperature: 1.0,
            val_post: m,
            test_post: None,
            ood_auroc: None,
            ood_auroc_post: None,
        }
    }

    #[test]
    fn single_record_is_a_point_mass() {
        let h = pc_statistics(&[rec(vec![2, 2, 2], 0.1)], 0.2);
        assert_eq!(h.n_records, 1);
        for b in &h.counts {
            assert_eq!(b.iter().collect::<Vec<_>>(), vec![(&2, &1)]);
        }
        assert!(!h.empty);
    }

    #[test]
    fn threshold_below_everything_is_empty() {
        let h = pc_statistics(&[rec(vec![1, 2], 0.5), rec(vec![3, 3], 0.4)], 0.1);
        assert!(h.empty);
        assert_eq!(h.n_records, 0);
        assert_eq!(h.to_csv(), "block,candidate_epoch,count\n");
    }

    #[test]
    fn counts_sum_to_survivors() {
        let hist = [rec(vec![1, 2], 0.1), rec(vec![3, 2], 0.15), rec(vec![1, 1], 0.3)];
        let h = pc_statistics(&hist, 0.2);
        assert_eq!(h.n_records, 2);
        for b in &h.counts {
            assert_eq!(b.values().sum::<usize>(), 2);
        }
        assert_eq!(h.to_csv(), "block,candidate_epoch,count\n0,1,1\n0,3,1\n1,2,2\n");
    }
}
