//! Blockwise feedforward classifier with hand-written backpropagation.
//!
//! A model is a chain of `M` blocks. Blocks `1..M-1` are affine maps
//! followed by ReLU; the last block is a bare affine map producing logits.
//! Blocks are the unit that checkpoint recombination acts on.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calmetrics::{self, PredictionSet, DEFAULT_BINS};
use crate::ckptstore::BlockSource;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::derive_rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_features: usize,
    pub n_classes: usize,
    /// Output widths of the `M - 1` hidden blocks.
    pub block_widths: Vec<usize>,
}

impl Architecture {
    pub fn new(n_features: usize, n_classes: usize, block_widths: Vec<usize>) -> Result<Self> {
        let arch = Self { n_features, n_classes, block_widths };
        arch.validate()?;
        Ok(arch)
    }

    /// `hidden_blocks` hidden blocks of equal `width`, plus the linear head.
    pub fn uniform(n_features: usize, n_classes: usize, hidden_blocks: usize, width: usize) -> Result<Self> {
        Self::new(n_features, n_classes, vec![width; hidden_blocks])
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_widths.is_empty() {
            return Err(Error::invalid("an architecture needs at least two blocks"));
        }
        if self.n_features == 0 || self.n_classes == 0 || self.block_widths.contains(&0) {
            return Err(Error::invalid("all widths must be at least 1"));
        }
        Ok(())
    }

    /// Block count `M`.
    pub fn n_blocks(&self) -> usize {
        self.block_widths.len() + 1
    }

    /// `(fan_in, fan_out)` of block `i` (0-based).
    pub fn block_shape(&self, i: usize) -> (usize, usize) {
        let fan_in = if i == 0 { self.n_features } else { self.block_widths[i - 1] };
        let fan_out = self.block_widths.get(i).copied().unwrap_or(self.n_classes);
        (fan_in, fan_out)
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_blocks())
            .map(|i| {
                let (a, b) = self.block_shape(i);
                a * b + b
            })
            .sum()
    }

    /// SHA-256 of a canonical description; stamped into checkpoint manifests.
    pub fn digest(&self) -> [u8; 32] {
        let widths: Vec<String> = self.block_widths.iter().map(ToString::to_string).collect();
        let canon = format!(
            "mlp;in={};classes={};widths={}",
            self.n_features,
            self.n_classes,
            widths.join(",")
        );
        Sha256::digest(canon.as_bytes()).into()
    }
}

/// Weights of one block: `weights` is `[fan_out x fan_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Block {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.weights.ncols(), self.weights.nrows())
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockwiseModel {
    pub arch: Architecture,
    pub blocks: Vec<Block>,
}

impl BlockwiseModel {
    /// Assembles a model from explicit blocks, checking they chain.
    pub fn from_blocks(arch: Architecture, blocks: Vec<Block>) -> Result<Self> {
        arch.validate()?;
        if blocks.len() != arch.n_blocks() {
            return Err(Error::DimensionMismatch { expected: arch.n_blocks(), got: blocks.len() });
        }
        for (i, b) in blocks.iter().enumerate() {
            let (fan_in, fan_out) = arch.block_shape(i);
            if b.weights.dim() != (fan_out, fan_in) || b.bias.len() != fan_out {
                return Err(Error::Format(format!(
                    "block {i} has shape {:?}, expected ({fan_out}, {fan_in})",
                    b.weights.dim()
                )));
            }
            if !b.is_finite() {
                return Err(Error::invalid(format!("block {i} has non-finite parameters")));
            }
        }
        Ok(Self { arch, blocks })
    }

    /// All parameters flattened block by block, weights before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.weights.iter().chain(b.bias.iter()).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for b in &mut self.blocks {
            b.weights.iter_mut().chain(b.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(arch: &Architecture, seed: u64) -> Result<BlockwiseModel> {
    arch.validate()?;
    let blocks = (0..arch.n_blocks())
        .map(|i| {
            let (fan_in, fan_out) = arch.block_shape(i);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let mut rng = derive_rng(seed, "init-block", i as u64);
            let mut b = Block::zeros(fan_in, fan_out);
            b.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
            b
        })
        .collect();
    BlockwiseModel::from_blocks(arch.clone(), blocks)
}

struct ForwardCache {
    /// Input to every block; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

fn forward_cached(m: &BlockwiseModel, x: &Array2<f64>) -> Result<ForwardCache> {
    if x.ncols() != m.arch.n_features {
        return Err(Error::DimensionMismatch { expected: m.arch.n_features, got: x.ncols() });
    }
    let last = m.blocks.len() - 1;
    let mut inputs = Vec::with_capacity(m.blocks.len());
    let mut h = x.clone();
    for (i, b) in m.blocks.iter().enumerate() {
        let mut z = h.dot(&b.weights.t());
        z += &b.bias;
        if i < last {
            z.mapv_inplace(|v| v.max(0.0));
        }
        inputs.push(std::mem::replace(&mut h, z));
    }
    Ok(ForwardCache { inputs, logits: h })
}

/// Logits and their row-wise softmax.
pub fn forward(m: &BlockwiseModel, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let logits = forward_cached(m, x)?.logits;
    let probs = crate::math::softmax_rows(&logits);
    Ok((logits, probs))
}

/// Predictions of `m` on a dataset, logits included.
pub fn predict(m: &BlockwiseModel, d: &Dataset) -> Result<PredictionSet> {
    let (logits, probs) = forward(m, &d.features)?;
    let mut p = PredictionSet::new(probs, d.labels.clone())?;
    p.logits = Some(logits);
    Ok(p)
}

/// Training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    CrossEntropy,
    /// Squared error between the softmax output and the one-hot label.
    Brier,
    LabelSmoothing { alpha: f64 },
    Focal { gamma: f64 },
    /// Focal loss with gamma 5 below true-class probability 0.2, else 3.
    Flsd53,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::CrossEntropy
    }
}

pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.05;
pub const DEFAULT_FOCAL_GAMMA: f64 = 3.0;

fn check_loss(kind: LossKind) -> Result<()> {
    match kind {
        LossKind::LabelSmoothing { alpha } if !(0.0..1.0).contains(&alpha) => {
            Err(Error::invalid(format!("label smoothing alpha {alpha} outside [0, 1)")))
        }
        LossKind::Focal { gamma } if !(gamma >= 0.0) => {
            Err(Error::invalid(format!("focal gamma {gamma} must be non-negative")))
        }
        _ => Ok(()),
    }
}

fn focal_gamma(kind: LossKind, p_true: f64) -> f64 {
    match kind {
        LossKind::Focal { gamma } => gamma,
        _ if p_true < 0.2 => 5.0,
        _ => 3.0,
    }
}

/// Batch-mean loss and its gradient with respect to the logits.
pub fn loss_and_logit_grad(
    probs: &Array2<f64>,
    labels: &[usize],
    kind: LossKind,
) -> Result<(f64, Array2<f64>)> {
    check_loss(kind)?;
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: probs.nrows(), got: labels.len() });
    }
    let n = labels.len() as f64;
    let k = probs.ncols();
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut total = 0.0;
    for ((p, mut g), &y) in probs.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(labels) {
        match kind {
            LossKind::CrossEntropy => {
                total += -p[y].ln();
                g.assign(&p);
                g[y] -= 1.0;
            }
            LossKind::LabelSmoothing { alpha } => {
                let off = alpha / k as f64;
                for j in 0..k {
                    let q = off + if j == y { 1.0 - alpha } else { 0.0 };
                    if q > 0.0 {
                        total -= q * p[j].ln();
                    }
                    g[j] = p[j] - q;
                }
            }
            LossKind::Brier => {
                // dL/dp_j = 2 (p_j - e_j), pulled back through the softmax.
                let dp: Vec<f64> = (0..k).map(|j| 2.0 * (p[j] - f64::from(u8::from(j == y)))).collect();
                total += (0..k).map(|j| (dp[j] / 2.0).powi(2)).sum::<f64>();
                let dot: f64 = (0..k).map(|j| dp[j] * p[j]).sum();
                for j in 0..k {
                    g[j] = p[j] * (dp[j] - dot);
                }
            }
            LossKind::Focal { .. } | LossKind::Flsd53 => {
                let pt = p[y];
                let gamma = focal_gamma(kind, pt);
                let one_minus = 1.0 - pt;
                let log_p = pt.ln();
                total += -one_minus.powf(gamma) * log_p;
                // p * dL/dp, then dp_y/dz_j = p_y (1{j=y} - p_j).
                let scale = if gamma == 0.0 {
                    -1.0
                } else {
                    gamma * pt * one_minus.powf(gamma - 1.0) * log_p - one_minus.powf(gamma)
                };
                for j in 0..k {
                    g[j] = scale * (f64::from(u8::from(j == y)) - p[j]);
                }
            }
        }
    }
    grad /= n;
    Ok((total / n, grad))
}

/// Batch-mean training loss.
pub fn train_loss(probs: &Array2<f64>, labels: &[usize], kind: LossKind) -> Result<f64> {
    Ok(loss_and_logit_grad(probs, labels, kind)?.0)
}

fn backward(m: &BlockwiseModel, cache: &ForwardCache, dlogits: Array2<f64>) -> Vec<Block> {
    let mut grads: Vec<Block> = Vec::with_capacity(m.blocks.len());
    let mut dz = dlogits;
    for i in (0..m.blocks.len()).rev() {
        let input = &cache.inputs[i];
        let weights = dz.t().dot(input);
        let bias = dz.sum_axis(Axis(0));
        if i > 0 {
            let mut da = dz.dot(&m.blocks[i].weights);
            // `input` is the post-ReLU activation of block i-1.
            Zip::from(&mut da).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            dz = da;
        }
        grads.push(Block { weights, bias });
    }
    grads.reverse();
    grads
}

/// Mean loss on a batch and its gradient for every block.
pub fn loss_and_grad(
    m: &BlockwiseModel,
    x: &Array2<f64>,
    labels: &[usize],
    kind: LossKind,
) -> Result<(f64, Vec<Block>)> {
    let cache = forward_cached(m, x)?;
    let probs = crate::math::softmax_rows(&cache.logits);
    let (loss, dlogits) = loss_and_logit_grad(&probs, labels, kind)?;
    Ok((loss, backward(m, &cache, dlogits)))
}

/// SGD with momentum and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Block>,
}

impl Sgd {
    pub fn new(arch: &Architecture, momentum: f64, weight_decay: f64) -> Self {
        let velocity = (0..arch.n_blocks())
            .map(|i| {
                let (a, b) = arch.block_shape(i);
                Block::zeros(a, b)
            })
            .collect();
        Self { momentum, weight_decay, velocity }
    }

    /// `w <- w - lr*wd*w`, then `v <- mu*v + g`, `w <- w - lr*v`.
    pub fn step(&mut self, m: &mut BlockwiseModel, grads: &[Block], lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((b, g), v) in m.blocks.iter_mut().zip(grads).zip(&mut self.velocity) {
            Zip::from(&mut b.weights).and(&g.weights).and(&mut v.weights).for_each(|w, &g, v| {
                *w -= lr * wd * *w;
                *v = mu * *v + g;
                *w -= lr * *v;
            });
            Zip::from(&mut b.bias).and(&g.bias).and(&mut v.bias).for_each(|w, &g, v| {
                *w -= lr * wd * *w;
                *v = mu * *v + g;
                *w -= lr * *v;
            });
        }
    }
}

/// Piecewise-constant learning rate: `(start_epoch, lr)` pieces, where a
/// piece starting at `s` covers training epochs `s+1, s+2, ...` (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 350,
            lr_schedule: vec![(0, 0.1), (150, 0.01), (250, 0.001)],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            loss: LossKind::CrossEntropy,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.lr_schedule.first().map(|p| p.0) != Some(0) {
            return Err(Error::invalid("learning-rate schedule must start at epoch 0"));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("schedule epochs must strictly increase"));
        }
        if self.lr_schedule.iter().any(|p| !(p.1 >= 0.0) || !p.1.is_finite()) {
            return Err(Error::invalid("learning rates must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        check_loss(self.loss)
    }

    /// Learning rate for 1-based training epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|p| p.0 < epoch)
            .map_or(self.lr_schedule[0].1, |p| p.1)
    }

    /// Epochs at which the learning rate changes.
    pub fn schedule_points(&self) -> Vec<usize> {
        self.lr_schedule.iter().skip(1).map(|p| p.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation negative log-likelihood.
    pub val_loss: f64,
    pub val_error: f64,
    pub val_ece: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub checkpoint_epochs: Vec<usize>,
}

/// Receives the model after every training epoch.
pub trait CheckpointSink {
    /// Returns whether a checkpoint was persisted for `epoch`.
    fn on_epoch_end(&mut self, epoch: usize, model: &BlockwiseModel, record: &EpochRecord) -> Result<bool>;
}

/// Discards everything.
pub struct NullSink;

impl CheckpointSink for NullSink {
    fn on_epoch_end(&mut self, _: usize, _: &BlockwiseModel, _: &EpochRecord) -> Result<bool> {
        Ok(false)
    }
}

fn check_dims(m: &BlockwiseModel, d: &Dataset) -> Result<()> {
    if d.n_features() != m.arch.n_features {
        return Err(Error::DimensionMismatch { expected: m.arch.n_features, got: d.n_features() });
    }
    if d.n_classes > m.arch.n_classes {
        return Err(Error::DimensionMismatch { expected: m.arch.n_classes, got: d.n_classes });
    }
    Ok(())
}

// One pass over `train` in a seeded order; returns the mean batch loss.
fn run_epoch(
    m: &mut BlockwiseModel,
    opt: &mut Sgd,
    train: &Dataset,
    batch_size: usize,
    lr: f64,
    loss: LossKind,
    order_seed: u64,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.n_samples()).collect();
    order.shuffle(&mut crate::seed::rng_from_seed(order_seed));
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let x = train.features.select(Axis(0), chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
        let (l, grads) = loss_and_grad(m, &x, &y, loss)?;
        if !l.is_finite() {
            return Err(Error::NumericOverflow { epoch });
        }
        opt.step(m, &grads, lr);
        total += l;
        batches += 1;
    }
    if m.blocks.iter().any(|b| !b.is_finite()) {
        return Err(Error::NumericOverflow { epoch });
    }
    Ok(total / batches as f64)
}

/// Trains for `cfg.epochs` epochs, handing the model to `sink` after each.
pub fn train_epochs(
    mut m: BlockwiseModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn CheckpointSink,
) -> Result<(BlockwiseModel, TrainLog)> {
    cfg.validate()?;
    check_dims(&m, train)?;
    check_dims(&m, val)?;
    let mut opt = Sgd::new(&m.arch, cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let order_seed = crate::seed::derive_seed(cfg.seed, "epoch-order", epoch as u64);
        let train_loss =
            run_epoch(&mut m, &mut opt, train, cfg.batch_size, cfg.lr_at(epoch), cfg.loss, order_seed, epoch)?;
        let p = predict(&m, val)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: calmetrics::nll(&p),
            val_error: calmetrics::error(&p),
            val_ece: calmetrics::ece(&p, DEFAULT_BINS)?,
        };
        if sink.on_epoch_end(epoch, &m, &record)? {
            log.checkpoint_epochs.push(epoch);
        }
        log.records.push(record);
    }
    Ok((m, log))
}

/// Optimizer settings for the single recovery epoch after recombination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTune {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for FineTune {
    fn default() -> Self {
        Self { lr: 1e-2, momentum: 0.9, weight_decay: 5e-4, batch_size: 128 }
    }
}

/// One epoch of cross-entropy SGD from fresh optimizer state.
pub fn fine_tune_one_epoch(m: &BlockwiseModel, train: &Dataset, ft: &FineTune, seed: u64) -> Result<BlockwiseModel> {
    if !(ft.lr >= 0.0) {
        return Err(Error::invalid("fine-tune learning rate must be non-negative"));
    }
    if ft.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    check_dims(m, train)?;
    let mut out = m.clone();
    let mut opt = Sgd::new(&m.arch, ft.momentum, ft.weight_decay);
    let order_seed = crate::seed::derive_seed(seed, "fine-tune-order", 0);
    run_epoch(&mut out, &mut opt, train, ft.batch_size, ft.lr, LossKind::CrossEntropy, order_seed, 0)?;
    Ok(out)
}

/// Model whose block `i` comes from candidate `choices[i]` of `source`.
pub fn assemble(source: &dyn BlockSource, choices: &[usize]) -> Result<BlockwiseModel> {
    let arch = source.architecture().clone();
    if choices.len() != arch.n_blocks() {
        return Err(Error::DimensionMismatch { expected: arch.n_blocks(), got: choices.len() });
    }
    let blocks = choices
        .iter()
        .enumerate()
        .map(|(i, &k)| source.block(i, k))
        .collect::<Result<Vec<_>>>()?;
    BlockwiseModel::from_blocks(arch, blocks)
}
