//! Warm-up, surrogate-guided search, best-record selection, baselines and
//! the evaluation protocol shared by all of them.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calmetrics::{
    apply_temperature, auroc, default_temperature_grid, max_confidence, summarize, temperature_search,
    MetricSet, PredictionSet, DEFAULT_BINS,
};
use crate::ckptstore::BlockSource;
use crate::combsearch::{gumbel_noise, gumbel_softmax_vjp, relax_with_noise, to_discrete, update_selection, DiscretePc, GumbelSchedule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netcore::{assemble, fine_tune_one_epoch, predict, BlockwiseModel, FineTune, TrainLog};
use crate::seed::{derive_rng, derive_seed};
use crate::surrogate::{init_estimator, EstimatorOptimizer, FitConfig, Memory, MemoryEntry, Surrogate, SurrogateEstimator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Warm-up population size.
    pub population: usize,
    /// Search steps.
    pub steps: usize,
    pub lambda: f64,
    /// Weight of the ECE term in the estimator loss.
    pub gamma: f64,
    /// Step size of the selection-logit update.
    pub selection_lr: f64,
    pub gumbel: GumbelSchedule,
    pub fine_tune: FineTune,
    pub hidden: usize,
    pub memory_capacity: usize,
    pub estimator_steps: usize,
    pub estimator_lr: f64,
    pub estimator_optimizer: EstimatorOptimizer,
    /// Records with validation NLL above this quantile of the history are
    /// not eligible as the best record.
    pub nll_quantile: f64,
    pub n_bins: usize,
    /// Set from the run's root seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 100,
            steps: 100,
            lambda: 50.0,
            gamma: 1.0,
            selection_lr: 1.0,
            gumbel: GumbelSchedule::default(),
            fine_tune: FineTune::default(),
            hidden: 32,
            memory_capacity: 256,
            estimator_steps: 200,
            estimator_lr: 1e-2,
            estimator_optimizer: EstimatorOptimizer::Gd,
            nll_quantile: 0.25,
            n_bins: DEFAULT_BINS,
            seed: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.steps == 0 {
            return Err(Error::invalid("population and steps must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.selection_lr > 0.0) {
            return Err(Error::invalid("need lambda >= 0, gamma >= 0 and selection_lr > 0"));
        }
        if !(self.gumbel.start > 0.0) || (self.gumbel.anneal && !(self.gumbel.end > 0.0)) {
            return Err(Error::invalid("Gumbel temperatures must be positive"));
        }
        if self.hidden == 0 || self.memory_capacity == 0 || self.n_bins == 0 {
            return Err(Error::invalid("hidden, memory_capacity and n_bins must be positive"));
        }
        if !(self.estimator_lr > 0.0) {
            return Err(Error::invalid("estimator_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.nll_quantile) {
            return Err(Error::invalid("nll_quantile must lie in [0, 1]"));
        }
        Ok(())
    }

    fn fit_config(&self, objective: Objective) -> FitConfig {
        FitConfig {
            steps: self.estimator_steps,
            lr: self.estimator_lr,
            optimizer: self.estimator_optimizer,
            loss_weights: match objective {
                Objective::ErrEce => vec![1.0, self.gamma],
                Objective::Nll => vec![1.0],
            },
        }
    }
}

/// What the surrogate predicts and the selection logits descend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Validation error plus `lambda` times validation ECE.
    ErrEce,
    /// Validation NLL alone.
    Nll,
}

impl Objective {
    pub fn n_outputs(self) -> usize {
        match self {
            Objective::ErrEce => 2,
            Objective::Nll => 1,
        }
    }

    fn targets(self, r: &EvalRecord) -> Vec<f64> {
        match self {
            Objective::ErrEce => vec![r.val.err, r.val.ece],
            Objective::Nll => vec![r.val.nll],
        }
    }

    fn weights(self, lambda: f64) -> Vec<f64> {
        match self {
            Objective::ErrEce => vec![1.0, lambda],
            Objective::Nll => vec![1.0],
        }
    }
}

/// Everything one evaluated model is scored on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Candidate index per block.
    pub pc: Vec<usize>,
    /// Training epoch behind each chosen candidate.
    pub epochs: Vec<usize>,
    pub fine_tuned: bool,
    pub val: MetricSet,
    pub test: Option<MetricSet>,
    /// Grid temperature minimizing validation ECE.
    pub temperature: f64,
    pub val_post: MetricSet,
    pub test_post: Option<MetricSet>,
    pub ood_auroc: Option<f64>,
    pub ood_auroc_post: Option<f64>,
}

impl EvalRecord {
    pub fn objective(&self, lambda: f64) -> f64 {
        self.val.err + lambda * self.val.ece
    }
}

/// Datasets and protocol settings shared by every evaluation in a run.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub source: &'a dyn BlockSource,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
    pub ood: Option<&'a Dataset>,
    pub fine_tune: FineTune,
    /// Shuffling seed of the recovery epoch; fixed per run so a
    /// combination always evaluates to the same record.
    pub fine_tune_seed: u64,
    pub n_bins: usize,
}

impl<'a> EvalContext<'a> {
    pub fn new(source: &'a dyn BlockSource, train: &'a Dataset, val: &'a Dataset, cfg: &SearchConfig) -> Self {
        Self {
            source,
            train,
            val,
            test: None,
            ood: None,
            fine_tune: cfg.fine_tune,
            fine_tune_seed: derive_seed(cfg.seed, "fine-tune", 0),
            n_bins: cfg.n_bins,
        }
    }

    pub fn with_test(mut self, test: &'a Dataset) -> Self {
        self.test = Some(test);
        self
    }

    pub fn with_ood(mut self, ood: &'a Dataset) -> Self {
        self.ood = Some(ood);
        self
    }
}

fn scaled(p: &PredictionSet, tau: f64) -> Result<PredictionSet> {
    let logits = p.logits.as_ref().ok_or_else(|| Error::invalid("prediction set has no logits"))?;
    let mut out = PredictionSet::new(apply_temperature(logits, tau)?, p.labels.clone())?;
    out.logits = Some(logits / tau);
    Ok(out)
}

/// Scores a model as is (no recovery epoch).
pub fn evaluate_model(ctx: &EvalContext<'_>, m: &BlockwiseModel, pc: &DiscretePc, fine_tuned: bool) -> Result<EvalRecord> {
    let epochs = pc.choices().iter().map(|&k| ctx.source.candidate_epochs()[k]).collect();
    let val = predict(m, ctx.val)?;
    let val_logits = val.logits.as_ref().expect("predict keeps logits");
    let tau = temperature_search(val_logits, &val.labels, &default_temperature_grid(), ctx.n_bins)?;
    let val_post = scaled(&val, tau)?;
    let test = ctx.test.map(|d| predict(m, d)).transpose()?;
    let test_post = test.as_ref().map(|p| scaled(p, tau)).transpose()?;
    let (mut ood_auroc, mut ood_auroc_post) = (None, None);
    if let (Some(t), Some(tp), Some(o)) = (&test, &test_post, ctx.ood) {
        let ood = predict(m, o)?;
        let ood_post = scaled(&ood, tau)?;
        ood_auroc = Some(auroc(&max_confidence(&t.probs), &max_confidence(&ood.probs))?);
        ood_auroc_post = Some(auroc(&max_confidence(&tp.probs), &max_confidence(&ood_post.probs))?);
    }
    Ok(EvalRecord {
        pc: pc.choices().to_vec(),
        epochs,
        fine_tuned,
        val: summarize(&val, ctx.n_bins)?,
        test: test.as_ref().map(|p| summarize(p, ctx.n_bins)).transpose()?,
        temperature: tau,
        val_post: summarize(&val_post, ctx.n_bins)?,
        test_post: test_post.as_ref().map(|p| summarize(p, ctx.n_bins)).transpose()?,
        ood_auroc,
        ood_auroc_post,
    })
}

/// Assembles `pc` and runs the recovery epoch.
pub fn recover(ctx: &EvalContext<'_>, pc: &DiscretePc) -> Result<BlockwiseModel> {
    let m = assemble(ctx.source, pc.choices())?;
    fine_tune_one_epoch(&m, ctx.train, &ctx.fine_tune, ctx.fine_tune_seed)
}

/// Assembles `pc`, runs the recovery epoch, and scores the result.
pub fn evaluate_pc(ctx: &EvalContext<'_>, pc: &DiscretePc) -> Result<EvalRecord> {
    evaluate_model(ctx, &recover(ctx, pc)?, pc, ctx.fine_tune.lr > 0.0)
}

/// Scores a stored whole-model epoch without the recovery epoch.
pub fn evaluate_epoch(ctx: &EvalContext<'_>, epoch: usize) -> Result<EvalRecord> {
    let k = ctx
        .source
        .candidate_of(epoch)
        .ok_or(Error::MissingCheckpoint { block: 0, candidate: epoch })?;
    let pc = DiscretePc::uniform(ctx.source.architecture().n_blocks(), k, ctx.source.n_candidates())?;
    let m = assemble(ctx.source, pc.choices())?;
    evaluate_model(ctx, &m, &pc, false)
}

/// Warm-up population, its memory, and the estimator fitted on it.
pub struct WarmUp<S> {
    pub records: Vec<EvalRecord>,
    pub memory: Memory,
    pub estimator: S,
    pub loss_trace: Vec<f64>,
}

/// Draws and evaluates `cfg.population` relaxed combinations around
/// all-zero logits, then fits a fresh estimator on them.
pub fn warm_up(ctx: &EvalContext<'_>, cfg: &SearchConfig, objective: Objective) -> Result<WarmUp<SurrogateEstimator>> {
    cfg.validate()?;
    let (m, k) = (ctx.source.architecture().n_blocks(), ctx.source.n_candidates());
    let logits = Array2::zeros((m, k));
    let evaluated = (0..cfg.population)
        .into_par_iter()
        .map(|i| -> Result<(Array2<f64>, EvalRecord)> {
            let mut rng = derive_rng(cfg.seed, "warm-up", i as u64);
            let noise = gumbel_noise((m, k), &mut rng);
            let relaxed = relax_with_noise(&logits, &noise, cfg.gumbel.start)?;
            let record = evaluate_pc(ctx, &to_discrete(&relaxed))?;
            Ok((relaxed.into_rows(), record))
        })
        .collect::<Vec<_>>();
    let mut memory = Memory::new(cfg.memory_capacity)?;
    let mut records = Vec::with_capacity(cfg.population);
    for (index, r) in evaluated.into_iter().enumerate() {
        let (pc, record) = r.map_err(|e| Error::Population { index, source: Box::new(e) })?;
        memory.push(MemoryEntry { pc, targets: objective.targets(&record) });
        records.push(record);
    }
    let mut estimator = init_estimator(k, cfg.hidden, objective.n_outputs(), derive_seed(cfg.seed, "estimator", 0))?;
    let loss_trace = estimator.fit(&memory, &cfg.fit_config(objective))?;
    Ok(WarmUp { records, memory, estimator, loss_trace })
}

/// Switches used by tests to isolate the selection update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchOptions {
    pub train_surrogate: bool,
    /// When off, the relaxed sample is the plain softmax of `A / tau`.
    pub gumbel_noise: bool,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { train_surrogate: true, gumbel_noise: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// One record per completed step, in order.
    pub history: Vec<EvalRecord>,
    /// Index into `history` chosen by the selection rule.
    pub best: usize,
    pub final_logits: Array2<f64>,
    /// Surrogate objective at each step's relaxed sample, before the update.
    pub predicted: Vec<f64>,
    pub aborted: Option<AbortInfo>,
}

impl SearchOutcome {
    pub fn best_record(&self) -> &EvalRecord {
        &self.history[self.best]
    }
}

/// The search loop from all-zero logits, given a warmed-up memory and
/// surrogate.
pub fn run_search<S: Surrogate>(
    ctx: &EvalContext<'_>,
    cfg: &SearchConfig,
    objective: Objective,
    surrogate: &mut S,
    memory: &mut Memory,
    options: SearchOptions,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if surrogate.n_outputs() != objective.n_outputs() {
        return Err(Error::DimensionMismatch { expected: objective.n_outputs(), got: surrogate.n_outputs() });
    }
    let (m, k) = (ctx.source.architecture().n_blocks(), ctx.source.n_candidates());
    let weights = objective.weights(cfg.lambda);
    let fit = cfg.fit_config(objective);
    let mut logits = Array2::zeros((m, k));
    let mut history = Vec::with_capacity(cfg.steps);
    let mut predicted = Vec::with_capacity(cfg.steps);
    let mut aborted = None;
    for t in 1..=cfg.steps {
        let tau = cfg.gumbel.at(t, cfg.steps);
        let noise = if options.gumbel_noise {
            gumbel_noise((m, k), &mut derive_rng(cfg.seed, "search", t as u64))
        } else {
            Array2::zeros((m, k))
        };
        let relaxed = relax_with_noise(&logits, &noise, tau)?;
        let record = evaluate_pc(ctx, &to_discrete(&relaxed))?;
        memory.push(MemoryEntry { pc: relaxed.rows().clone(), targets: objective.targets(&record) });
        history.push(record);
        let step = (|| -> Result<Array2<f64>> {
            if options.train_surrogate {
                surrogate.fit(memory, &fit)?;
            }
            let out = surrogate.predict(relaxed.rows())?;
            predicted.push(out.iter().zip(&weights).map(|(o, w)| o * w).sum());
            let grad_rows = surrogate.objective_gradient(relaxed.rows(), &weights)?;
            let grad = gumbel_softmax_vjp(&relaxed, &grad_rows, tau)?;
            update_selection(&logits, &grad, cfg.selection_lr)
        })();
        match step {
            Ok(next) => logits = next,
            Err(e @ (Error::NonFiniteGradient(_) | Error::NumericOverflow { .. })) => {
                aborted = Some(AbortInfo { step: t, reason: e.to_string() });
                break;
            }
            Err(e) => return Err(Error::SearchAborted { step: t, source: Box::new(e) }),
        }
    }
    let best = match objective {
        Objective::ErrEce => select_best(&history, cfg.lambda, cfg.nll_quantile)?,
        Objective::Nll => argmin_by(&history, |r| r.val.nll)?,
    };
    Ok(SearchOutcome { history, best, final_logits: logits, predicted, aborted })
}

/// Full search output including the warm-up stage.
pub struct SearchRun {
    pub warm_up: Vec<EvalRecord>,
    pub outcome: SearchOutcome,
    pub estimator: SurrogateEstimator,
    pub memory: Memory,
}

/// Warm-up followed by the error + ECE search.
pub fn pcs_search(ctx: &EvalContext<'_>, cfg: &SearchConfig) -> Result<SearchRun> {
    search_with(ctx, cfg, Objective::ErrEce)
}

/// The same loop descending on predicted validation NLL only.
pub fn baseline_search_on_loss(ctx: &EvalContext<'_>, cfg: &SearchConfig) -> Result<SearchRun> {
    search_with(ctx, cfg, Objective::Nll)
}

fn search_with(ctx: &EvalContext<'_>, cfg: &SearchConfig, objective: Objective) -> Result<SearchRun> {
    let WarmUp { records, mut memory, mut estimator, .. } = warm_up(ctx, cfg, objective)?;
    let outcome = run_search(ctx, cfg, objective, &mut estimator, &mut memory, SearchOptions::default())?;
    Ok(SearchRun { warm_up: records, outcome, estimator, memory })
}

fn argmin_by(records: &[EvalRecord], key: impl Fn(&EvalRecord) -> f64) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        let v = key(r);
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::invalid("no records to select from"))
}

/// Nearest-rank quantile: the smallest value with at least `q * n` values
/// at or below it.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty set"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Among records whose validation NLL is at most the `q` quantile, the one
/// with the smallest validation `err + lambda * ece` (earliest on ties).
pub fn select_best(history: &[EvalRecord], lambda: f64, q: f64) -> Result<usize> {
    let nlls: Vec<f64> = history.iter().map(|r| r.val.nll).collect();
    let threshold = quantile(&nlls, q)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in history.iter().enumerate() {
        if r.val.nll > threshold {
            continue;
        }
        let v = r.objective(lambda);
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    Ok(best.expect("the minimum NLL record always passes").0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    Loss,
    Error,
    Ece,
}

/// 1-based epoch minimizing the validation criterion, earliest on ties.
pub fn baseline_early_stop(log: &TrainLog, criterion: StopCriterion) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for r in &log.records {
        let v = match criterion {
            StopCriterion::Loss => r.val_loss,
            StopCriterion::Error => r.val_error,
            StopCriterion::Ece => r.val_ece,
        };
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((r.epoch, v));
        }
    }
    best.map(|b| b.0).ok_or_else(|| Error::invalid("training log is empty"))
}

/// Random search over uniform discrete combinations; the candidates and the
/// index of the one with the lowest validation NLL.
pub fn baseline_random_search(ctx: &EvalContext<'_>, n_samples: usize, seed: u64) -> Result<(Vec<EvalRecord>, usize)> {
    use rand::Rng as _;
    if n_samples == 0 {
        return Err(Error::invalid("random search needs at least one sample"));
    }
    let (m, k) = (ctx.source.architecture().n_blocks(), ctx.source.n_candidates());
    let mut rng = derive_rng(seed, "random-search", 0);
    let pcs = (0..n_samples)
        .map(|_| DiscretePc::new((0..m).map(|_| rng.random_range(0..k)).collect(), k))
        .collect::<Result<Vec<_>>>()?;
    let records = pcs
        .par_iter()
        .map(|pc| evaluate_pc(ctx, pc))
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| Error::Population { index, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    let best = argmin_by(&records, |r| r.val.nll)?;
    Ok((records, best))
}
