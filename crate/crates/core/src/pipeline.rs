//! Run configuration and the stages that read and write a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json            resolved configuration
//! data/{train,val,test,ood}.csv
//! checkpoints/           candidate store
//! train_log.json
//! warmup.json  history.json  best_pc.json  selection_params.csv
//! estimator/             surrogate weights
//! random_search.json  loss_search_history.json
//! methods/<name>.json    one scored model per method
//! reliability/<name>_test_{pre,post}.csv
//! probe/block_<i>.csv  probe/pc_histogram.csv
//! report.json  report.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blockprobe::{pc_statistics, probe_block, Fixing};
use crate::calmetrics::{reliability_table, PredictionSet};
use crate::ckptstore::{sample_epochs, BlockSource, CandidatePool, CheckpointStore, SamplingStrategy, SamplingVariant, SnapshotCollector};
use crate::combsearch::DiscretePc;
use crate::data::{corrupt_gaussian, gen_blobs, load_csv, save_csv, split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::netcore::{init_model, predict, train_epochs, Architecture, BlockwiseModel, LossKind, TrainConfig, TrainLog};
use crate::orchestrator::{
    baseline_early_stop, baseline_random_search, baseline_search_on_loss, evaluate_model, pcs_search, recover,
    EvalContext, EvalRecord, SearchConfig, StopCriterion,
};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs { n: usize, classes: usize, dim: usize, label_noise: f64 },
    /// `f0,...,label` rows.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Gaussian-noise severity of the shifted test copy.
    pub ood_severity: u8,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs { n: 2000, classes: 4, dim: 2, label_noise: 0.2 },
            train_fraction: 0.7,
            val_fraction: 0.15,
            test_fraction: 0.15,
            ood_severity: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_blocks: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_blocks: 4, width: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossKind,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr_schedule: vec![(0, 0.1), (30, 0.01), (50, 0.001)],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            loss: LossKind::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub k: usize,
    pub variant: SamplingVariant,
    pub scale: Option<f64>,
    /// Laplace centres for the piecewise variant; the learning-rate drops
    /// when empty.
    pub schedule_points: Vec<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { k: 10, variant: SamplingVariant::Random, scale: None, schedule_points: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub random_samples: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { random_samples: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub fixing: Fixing,
    /// Blocks to probe; all when empty.
    pub blocks: Vec<usize>,
    /// Histogram keeps records with validation NLL below this; all when absent.
    pub nll_threshold: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { fixing: Fixing::SweetPointLoss, blocks: Vec::new(), nll_threshold: None }
    }
}

/// Everything a run needs besides the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub sampling: SamplingConfig,
    pub search: SearchConfig,
    pub baselines: BaselineConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            sampling: SamplingConfig::default(),
            search: SearchConfig::default(),
            baselines: BaselineConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        if let DataSource::Blobs { n, classes, dim, label_noise } = self.data.source {
            if classes < 2 || n < classes || dim == 0 || !(0.0..1.0).contains(&label_noise) {
                return Err(Error::invalid("blobs need n >= classes >= 2, dim >= 1 and label_noise in [0, 1)"));
            }
        }
        if !(1..=5).contains(&self.data.ood_severity) {
            return Err(Error::invalid("ood_severity must lie in 1..=5"));
        }
        if self.model.width == 0 {
            return Err(Error::invalid("model width must be positive"));
        }
        self.train_config().validate()?;
        if self.sampling.k < 2 || self.sampling.k > self.train.epochs {
            return Err(Error::invalid("sampling.k must lie in [2, train.epochs]"));
        }
        self.search_config().validate()?;
        if self.baselines.random_samples == 0 {
            return Err(Error::invalid("baselines.random_samples must be positive"));
        }
        let n_blocks = self.model.hidden_blocks + 1;
        if let Some(&b) = self.probe.blocks.iter().find(|&&b| b >= n_blocks) {
            return Err(Error::invalid(format!("probe block {b} out of range for {n_blocks} blocks")));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.data.train_fraction,
            val_fraction: self.data.val_fraction,
            test_fraction: self.data.test_fraction,
            seed: derive_seed(self.seed, "split", 0),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr_schedule: t.lr_schedule.clone(),
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            loss: t.loss,
            seed: derive_seed(self.seed, "train", 0),
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig { seed: derive_seed(self.seed, "search", 0), ..self.search.clone() }
    }

    pub fn sampling_strategy(&self) -> SamplingStrategy {
        let mut schedule_points = self.sampling.schedule_points.clone();
        if schedule_points.is_empty() {
            schedule_points = self.train_config().schedule_points();
        }
        SamplingStrategy { variant: self.sampling.variant, scale: self.sampling.scale, schedule_points }
    }

    pub fn architecture(&self, data: &Splits) -> Result<Architecture> {
        Architecture::uniform(data.train.n_features(), data.train.n_classes, self.model.hidden_blocks, self.model.width)
    }
}

/// The four datasets of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    /// Noise-corrupted copy of the test set.
    pub ood: Dataset,
}

const SPLIT_NAMES: [&str; 4] = ["train", "val", "test", "ood"];

pub fn build_splits(cfg: &RunConfig) -> Result<Splits> {
    let full = match &cfg.data.source {
        DataSource::Blobs { n, classes, dim, label_noise } => {
            gen_blobs(*n, *classes, *dim, *label_noise, derive_seed(cfg.seed, "data", 0))?
        }
        DataSource::Csv { path } => load_csv(path)?,
    };
    let (train, val, test) = split(&full, &cfg.split_spec())?;
    let ood = corrupt_gaussian(&test, cfg.data.ood_severity, derive_seed(cfg.seed, "ood", 0))?;
    Ok(Splits { train, val, test, ood })
}

fn data_dir(run: &Path) -> PathBuf {
    run.join("data")
}

pub fn write_splits(run: &Path, s: &Splits) -> Result<()> {
    let dir = data_dir(run);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, d) in SPLIT_NAMES.iter().zip([&s.train, &s.val, &s.test, &s.ood]) {
        save_csv(d, dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

pub fn read_splits(run: &Path) -> Result<Splits> {
    let dir = data_dir(run);
    let mut sets = SPLIT_NAMES
        .iter()
        .map(|name| load_csv(dir.join(format!("{name}.csv"))))
        .collect::<Result<Vec<_>>>()?;
    // Label sets of small splits can miss a class; the widest one wins.
    let n_classes = sets.iter().map(|d| d.n_classes).max().unwrap_or(0);
    for d in &mut sets {
        d.n_classes = n_classes;
    }
    let mut it = sets.into_iter();
    let mut next = || it.next().expect("four splits");
    Ok(Splits { train: next(), val: next(), test: next(), ood: next() })
}

/// Data already in the run directory, or freshly built and written there.
pub fn ensure_splits(cfg: &RunConfig, run: &Path) -> Result<Splits> {
    if data_dir(run).join("train.csv").exists() {
        return read_splits(run);
    }
    let s = build_splits(cfg)?;
    write_splits(run, &s)?;
    Ok(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    write_file(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// One scored model as stored under `methods/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub record: EvalRecord,
}

fn write_method(run: &Path, ctx: &EvalContext<'_>, name: &str, m: &BlockwiseModel, record: &EvalRecord) -> Result<()> {
    if let Some(test) = ctx.test {
        let p = predict(m, test)?;
        let logits = p.logits.as_ref().expect("predict keeps logits") / record.temperature;
        let post = PredictionSet::from_logits(logits, p.labels.clone())?;
        for (tag, set) in [("pre", &p), ("post", &post)] {
            let csv = reliability_table(set, ctx.n_bins)?.to_csv();
            write_file(&run.join("reliability").join(format!("{name}_test_{tag}.csv")), &csv)?;
        }
    }
    write_json(
        &run.join("methods").join(format!("{name}.json")),
        &MethodResult { method: name.to_string(), record: record.clone() },
    )
}

fn context<'a>(source: &'a dyn BlockSource, s: &'a Splits, search: &SearchConfig) -> EvalContext<'a> {
    EvalContext::new(source, &s.train, &s.val, search).with_test(&s.test).with_ood(&s.ood)
}

fn score_epoch(run: &Path, ctx: &EvalContext<'_>, name: &str, epoch: usize) -> Result<EvalRecord> {
    let k = ctx.source.candidate_of(epoch).ok_or(Error::MissingCheckpoint { block: 0, candidate: epoch })?;
    let pc = DiscretePc::uniform(ctx.source.architecture().n_blocks(), k, ctx.source.n_candidates())?;
    let m = crate::netcore::assemble(ctx.source, pc.choices())?;
    let record = evaluate_model(ctx, &m, &pc, false)?;
    write_method(run, ctx, name, &m, &record)?;
    Ok(record)
}

fn score_pc(run: &Path, ctx: &EvalContext<'_>, name: &str, pc: &DiscretePc) -> Result<EvalRecord> {
    let m = recover(ctx, pc)?;
    let record = evaluate_model(ctx, &m, pc, ctx.fine_tune.lr > 0.0)?;
    write_method(run, ctx, name, &m, &record)?;
    Ok(record)
}

pub struct TrainOutput {
    pub log: TrainLog,
    pub pool: CandidatePool,
    pub sampled_epochs: Vec<usize>,
}

/// Trains from scratch and stores the candidate snapshots; also scores the
/// final-epoch model.
pub fn train_stage(cfg: &RunConfig, run: &Path) -> Result<TrainOutput> {
    cfg.validate()?;
    write_json(&run.join("config.json"), cfg)?;
    let s = ensure_splits(cfg, run)?;
    let arch = cfg.architecture(&s)?;
    let tc = cfg.train_config();
    let sampled = sample_epochs(&cfg.sampling_strategy(), cfg.sampling.k, tc.epochs, derive_seed(cfg.seed, "sampling", 0))?;
    let mut collector = SnapshotCollector::new(&sampled, tc.epochs)?;
    let model = init_model(&arch, derive_seed(cfg.seed, "init", 0))?;
    let (_, log) = train_epochs(model, &s.train, &s.val, &tc, &mut collector)?;
    let pool = collector.finish(&arch)?;
    let ckpt = run.join("checkpoints");
    if ckpt.exists() {
        std::fs::remove_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    }
    pool.persist(&ckpt)?;
    write_json(&run.join("train_log.json"), &log)?;
    let search = cfg.search_config();
    let ctx = context(&pool, &s, &search);
    score_epoch(run, &ctx, "final_epoch", tc.epochs)?;
    Ok(TrainOutput { log, pool, sampled_epochs: sampled })
}

// Later stages fail on a missing store before touching anything else.
fn require_checkpoints(run: &Path) -> Result<()> {
    let dir = run.join("checkpoints");
    if dir.join(crate::ckptstore::MANIFEST_FILE).exists() {
        Ok(())
    } else {
        Err(Error::MissingManifest(dir))
    }
}

/// The stored candidates, loaded into memory.
pub fn open_candidates(cfg: &RunConfig, run: &Path, s: &Splits) -> Result<CandidatePool> {
    let store = CheckpointStore::open(run.join("checkpoints"), &cfg.architecture(s)?)?;
    CandidatePool::load(&store)
}

pub fn read_train_log(run: &Path) -> Result<TrainLog> {
    read_json(&run.join("train_log.json"))
}

fn selection_csv(logits: &ndarray::Array2<f64>) -> String {
    let mut s = String::from("block");
    for k in 0..logits.ncols() {
        write!(s, ",c{k}").expect("string write");
    }
    s.push('\n');
    for (i, row) in logits.rows().into_iter().enumerate() {
        write!(s, "{i}").expect("string write");
        for v in row {
            write!(s, ",{v:?}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// The error + ECE search; writes the history, best combination, final
/// selection logits, estimator, and the scored best model.
pub fn search_stage(cfg: &RunConfig, run: &Path) -> Result<EvalRecord> {
    cfg.validate()?;
    require_checkpoints(run)?;
    let s = read_splits(run)?;
    let pool = open_candidates(cfg, run, &s)?;
    let search = cfg.search_config();
    let ctx = context(&pool, &s, &search);
    let out = pcs_search(&ctx, &search)?;
    write_json(&run.join("warmup.json"), &out.warm_up)?;
    write_json(&run.join("history.json"), &out.outcome.history)?;
    if let Some(a) = &out.outcome.aborted {
        write_json(&run.join("search_aborted.json"), a)?;
    }
    let best = out.outcome.best_record().clone();
    write_file(&run.join("best_pc.json"), &format!("{}\n", serde_json::to_string(&best.pc).expect("integers")))?;
    write_file(&run.join("selection_params.csv"), &selection_csv(&out.outcome.final_logits))?;
    out.estimator.save(&run.join("estimator"))?;
    let pc = DiscretePc::new(best.pc.clone(), pool.n_candidates())?;
    score_pc(run, &ctx, "pcs", &pc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    EarlyStop,
    Random,
    LossSearch,
}

/// Runs one baseline family; returns the scored records by method name.
pub fn baseline_stage(cfg: &RunConfig, run: &Path, which: Baseline) -> Result<Vec<MethodResult>> {
    cfg.validate()?;
    require_checkpoints(run)?;
    let s = read_splits(run)?;
    let pool = open_candidates(cfg, run, &s)?;
    let search = cfg.search_config();
    let ctx = context(&pool, &s, &search);
    let mut out = Vec::new();
    match which {
        Baseline::EarlyStop => {
            let log = read_train_log(run)?;
            for (name, c) in [
                ("early_stop_loss", StopCriterion::Loss),
                ("early_stop_error", StopCriterion::Error),
                ("early_stop_ece", StopCriterion::Ece),
            ] {
                let epoch = baseline_early_stop(&log, c)?;
                out.push(MethodResult { method: name.into(), record: score_epoch(run, &ctx, name, epoch)? });
            }
        }
        Baseline::Random => {
            let (records, best) =
                baseline_random_search(&ctx, cfg.baselines.random_samples, derive_seed(cfg.seed, "random-search", 0))?;
            write_json(&run.join("random_search.json"), &records)?;
            let pc = DiscretePc::new(records[best].pc.clone(), pool.n_candidates())?;
            out.push(MethodResult { method: "random_search".into(), record: score_pc(run, &ctx, "random_search", &pc)? });
        }
        Baseline::LossSearch => {
            let r = baseline_search_on_loss(&ctx, &search)?;
            write_json(&run.join("loss_search_history.json"), &r.outcome.history)?;
            let pc = DiscretePc::new(r.outcome.best_record().pc.clone(), pool.n_candidates())?;
            out.push(MethodResult { method: "loss_search".into(), record: score_pc(run, &ctx, "loss_search", &pc)? });
        }
    }
    Ok(out)
}

/// Scores an explicit combination under `methods/<name>.json`.
pub fn evaluate_stage(cfg: &RunConfig, run: &Path, pc: &[usize], name: &str) -> Result<EvalRecord> {
    cfg.validate()?;
    require_checkpoints(run)?;
    let s = read_splits(run)?;
    let pool = open_candidates(cfg, run, &s)?;
    let search = cfg.search_config();
    let ctx = context(&pool, &s, &search);
    score_pc(run, &ctx, name, &DiscretePc::new(pc.to_vec(), pool.n_candidates())?)
}

pub fn read_best_pc(run: &Path) -> Result<Vec<usize>> {
    read_json(&run.join("best_pc.json"))
}

/// Per-block probe curves plus, when a search history exists, the
/// candidate-frequency histogram.
pub fn probe_stage(cfg: &RunConfig, run: &Path) -> Result<Vec<crate::blockprobe::BlockCurve>> {
    cfg.validate()?;
    require_checkpoints(run)?;
    let s = read_splits(run)?;
    let pool = open_candidates(cfg, run, &s)?;
    let log = read_train_log(run)?;
    let search = cfg.search_config();
    let ctx = context(&pool, &s, &search);
    let blocks: Vec<usize> = if cfg.probe.blocks.is_empty() {
        (0..pool.architecture().n_blocks()).collect()
    } else {
        cfg.probe.blocks.clone()
    };
    let mut curves = Vec::new();
    for b in blocks {
        let c = probe_block(&ctx, b, cfg.probe.fixing, &log)?;
        write_file(&run.join("probe").join(format!("block_{b}.csv")), &c.to_csv())?;
        curves.push(c);
    }
    let history = run.join("history.json");
    if history.exists() {
        let h: Vec<EvalRecord> = read_json(&history)?;
        let hist = pc_statistics(&h, cfg.probe.nll_threshold.unwrap_or(f64::INFINITY));
        write_file(&run.join("probe").join("pc_histogram.csv"), &hist.to_csv())?;
    }
    Ok(curves)
}

/// Every scored method in the run, ordered by name.
pub fn read_methods(run: &Path) -> Result<Vec<MethodResult>> {
    let dir = run.join("methods");
    let mut paths = match std::fs::read_dir(&dir) {
        Ok(rd) => rd
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
            .collect::<Result<Vec<_>>>()?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&dir, e)),
    };
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Writes `report.json` and `report.txt` from the stored method records.
pub fn report(run: &Path) -> Result<String> {
    let methods = read_methods(run)?;
    write_json(&run.join("report.json"), &methods)?;
    let mut t = String::new();
    writeln!(
        t,
        "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>5} {:>7} {:>7}",
        "method", "err", "ece", "ece_T", "adaece", "adaeceT", "cwece", "nll", "nll_T", "tau", "auroc", "auroc_T"
    )
    .expect("string write");
    for m in &methods {
        let r = &m.record;
        let (pre, post) = (r.test.unwrap_or(r.val), r.test_post.unwrap_or(r.val_post));
        writeln!(
            t,
            "{:<18} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>5.1} {:>7} {:>7}",
            m.method,
            pre.err,
            pre.ece,
            post.ece,
            pre.adaece,
            post.adaece,
            pre.cwece,
            pre.nll,
            post.nll,
            r.temperature,
            opt(r.ood_auroc),
            opt(r.ood_auroc_post)
        )
        .expect("string write");
    }
    write_file(&run.join("report.txt"), &t)?;
    Ok(t)
}

/// Every stage in order: data, training, search, all baselines, probes,
/// report.
pub fn run_all(cfg: &RunConfig, run: &Path) -> Result<Vec<MethodResult>> {
    train_stage(cfg, run)?;
    search_stage(cfg, run)?;
    for b in [Baseline::EarlyStop, Baseline::Random, Baseline::LossSearch] {
        baseline_stage(cfg, run, b)?;
    }
    probe_stage(cfg, run)?;
    report(run)?;
    read_methods(run)
}
