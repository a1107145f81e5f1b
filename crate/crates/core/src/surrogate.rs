//! Trainable estimator mapping a relaxed combination to predicted metrics.
//!
//! A one-layer LSTM reads the `M` rows of the relaxed combination in block
//! order; a linear head maps the final hidden state to the outputs
//! (classification error and ECE for the main search, NLL alone for the
//! loss-only baseline). Gradients are available both for the parameters
//! (training) and for the input rows (driving the selection update).

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::ckptstore::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::seed::derive_rng;

/// Anything the search can query and fit.
pub trait Surrogate {
    fn n_outputs(&self) -> usize;

    fn predict(&self, pc: &Array2<f64>) -> Result<Vec<f64>>;

    /// Gradient of `sum_o weights[o] * output[o]` with respect to the input.
    fn objective_gradient(&self, pc: &Array2<f64>, weights: &[f64]) -> Result<Array2<f64>>;

    /// Fits on the memory; returns the loss before each step.
    fn fit(&mut self, memory: &Memory, fit: &FitConfig) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorOptimizer {
    /// Plain full-batch gradient descent.
    Gd,
    Adam,
}

/// How one round of estimator training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: EstimatorOptimizer,
    /// Per-output weight of the squared error; `[1, gamma]` for (err, ece).
    pub loss_weights: Vec<f64>,
}

impl FitConfig {
    pub fn err_ece(steps: usize, lr: f64, optimizer: EstimatorOptimizer, gamma: f64) -> Self {
        Self { steps, lr, optimizer, loss_weights: vec![1.0, gamma] }
    }
}

/// One evaluated combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub pc: Array2<f64>,
    pub targets: Vec<f64>,
}

/// Bounded FIFO of evaluated combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    entries: VecDeque<MemoryEntry>,
    capacity: usize,
}

impl Memory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory capacity must be positive"));
        }
        Ok(Self { entries: VecDeque::with_capacity(capacity.min(1024)), capacity })
    }

    /// Appends, evicting the oldest entry once over capacity.
    pub fn push(&mut self, entry: MemoryEntry) {
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// The LSTM estimator. Gate rows of `lstm_w` are stacked
/// `[forget; input; output; cell]`, each `d` rows over `[x; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEstimator {
    pub input_size: usize,
    pub hidden: usize,
    pub lstm_w: Array2<f64>,
    pub lstm_b: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    adam: Option<AdamState>,
}

/// Parameter gradients, same layout as the estimator.
#[derive(Debug, Clone)]
pub struct EstimatorGrads {
    pub lstm_w: Array2<f64>,
    pub lstm_b: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl EstimatorGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.lstm_w
            .iter()
            .chain(&self.lstm_b)
            .chain(&self.head_w)
            .chain(&self.head_b)
            .copied()
            .collect()
    }
}

struct StepCache {
    z: Array2<f64>,
    f: Array2<f64>,
    i: Array2<f64>,
    o: Array2<f64>,
    g: Array2<f64>,
    c_prev: Array2<f64>,
    tanh_c: Array2<f64>,
}

struct Trace {
    steps: Vec<StepCache>,
    h: Array2<f64>,
    out: Array2<f64>,
}

/// LSTM weights and head weights uniform in `+-1/sqrt(d)`; forget-gate
/// bias 1, all other biases 0.
pub fn init_estimator(input_size: usize, hidden: usize, n_outputs: usize, seed: u64) -> Result<SurrogateEstimator> {
    if input_size == 0 || hidden == 0 || n_outputs == 0 {
        return Err(Error::invalid("estimator sizes must be positive"));
    }
    let bound = 1.0 / (hidden as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let mut rng = derive_rng(seed, "estimator-init", 0);
    let lstm_w = Array2::from_shape_simple_fn((4 * hidden, input_size + hidden), || dist.sample(&mut rng));
    let head_w = Array2::from_shape_simple_fn((n_outputs, hidden), || dist.sample(&mut rng));
    let mut lstm_b = Array1::zeros(4 * hidden);
    lstm_b.slice_mut(s![..hidden]).fill(1.0);
    Ok(SurrogateEstimator {
        input_size,
        hidden,
        lstm_w,
        lstm_b,
        head_w,
        head_b: Array1::zeros(n_outputs),
        adam: None,
    })
}

impl SurrogateEstimator {
    pub fn n_params(&self) -> usize {
        self.lstm_w.len() + self.lstm_b.len() + self.head_w.len() + self.head_b.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.lstm_w
            .iter()
            .chain(&self.lstm_b)
            .chain(&self.head_w)
            .chain(&self.head_b)
            .copied()
            .collect()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter().copied();
        self.lstm_w
            .iter_mut()
            .chain(self.lstm_b.iter_mut())
            .chain(self.head_w.iter_mut())
            .chain(self.head_b.iter_mut())
            .for_each(|p| *p = it.next().expect("length checked"));
    }

    fn check_input(&self, pc: &Array2<f64>) -> Result<()> {
        if pc.ncols() != self.input_size {
            return Err(Error::DimensionMismatch { expected: self.input_size, got: pc.ncols() });
        }
        if pc.nrows() == 0 {
            return Err(Error::invalid("combination has no blocks"));
        }
        if pc.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("combination contains non-finite entries"));
        }
        Ok(())
    }

    // Step t of every sample, stacked: [n x K].
    fn step_inputs(batch: &[&Array2<f64>], t: usize) -> Array2<f64> {
        let k = batch[0].ncols();
        let mut x = Array2::zeros((batch.len(), k));
        for (mut row, pc) in x.axis_iter_mut(Axis(0)).zip(batch) {
            row.assign(&pc.row(t));
        }
        x
    }

    fn run(&self, batch: &[&Array2<f64>]) -> Result<Trace> {
        for pc in batch {
            self.check_input(pc)?;
        }
        let n_steps = batch[0].nrows();
        if batch.iter().any(|p| p.nrows() != n_steps) {
            return Err(Error::invalid("all combinations in a batch need the same block count"));
        }
        let (n, d, k) = (batch.len(), self.hidden, self.input_size);
        let mut h = Array2::zeros((n, d));
        let mut c = Array2::zeros((n, d));
        let mut steps = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let mut z = Array2::zeros((n, k + d));
            z.slice_mut(s![.., ..k]).assign(&Self::step_inputs(batch, t));
            z.slice_mut(s![.., k..]).assign(&h);
            let mut a = z.dot(&self.lstm_w.t());
            a += &self.lstm_b;
            let f = a.slice(s![.., ..d]).mapv(sigmoid);
            let i = a.slice(s![.., d..2 * d]).mapv(sigmoid);
            let o = a.slice(s![.., 2 * d..3 * d]).mapv(sigmoid);
            let g = a.slice(s![.., 3 * d..]).mapv(f64::tanh);
            let c_new = &f * &c + &i * &g;
            let tanh_c = c_new.mapv(f64::tanh);
            h = &o * &tanh_c;
            steps.push(StepCache { z, f, i, o, g, c_prev: std::mem::replace(&mut c, c_new), tanh_c });
        }
        let mut out = h.dot(&self.head_w.t());
        out += &self.head_b;
        Ok(Trace { steps, h, out })
    }

    // Backpropagation through time from output gradients `dy` [n x outputs].
    fn backward(&self, trace: &Trace, dy: &Array2<f64>) -> (EstimatorGrads, Vec<Array2<f64>>) {
        let (d, k) = (self.hidden, self.input_size);
        let n = dy.nrows();
        let mut gw = Array2::zeros(self.lstm_w.raw_dim());
        let mut gb = Array1::zeros(self.lstm_b.len());
        let head_w = dy.t().dot(&trace.h);
        let head_b = dy.sum_axis(Axis(0));
        let mut dh = dy.dot(&self.head_w);
        let mut dc = Array2::<f64>::zeros((n, d));
        let mut dx = vec![Array2::zeros((n, k)); trace.steps.len()];
        for (t, st) in trace.steps.iter().enumerate().rev() {
            let mut da = Array2::zeros((n, 4 * d));
            Zip::from(&mut dc)
                .and(&dh)
                .and(&st.o)
                .and(&st.tanh_c)
                .for_each(|dc, &dh, &o, &tc| *dc += dh * o * (1.0 - tc * tc));
            {
                let (mut df, mut rest) = da.view_mut().split_at(Axis(1), d);
                let (mut di, mut rest) = rest.view_mut().split_at(Axis(1), d);
                let (mut d_o, mut dg) = rest.view_mut().split_at(Axis(1), d);
                Zip::from(&mut df).and(&dc).and(&st.c_prev).and(&st.f).for_each(|a, &dc, &cp, &f| {
                    *a = dc * cp * f * (1.0 - f);
                });
                Zip::from(&mut di).and(&dc).and(&st.g).and(&st.i).for_each(|a, &dc, &g, &i| {
                    *a = dc * g * i * (1.0 - i);
                });
                Zip::from(&mut d_o).and(&dh).and(&st.tanh_c).and(&st.o).for_each(|a, &dh, &tc, &o| {
                    *a = dh * tc * o * (1.0 - o);
                });
                Zip::from(&mut dg).and(&dc).and(&st.i).and(&st.g).for_each(|a, &dc, &i, &g| {
                    *a = dc * i * (1.0 - g * g);
                });
            }
            gw += &da.t().dot(&st.z);
            gb += &da.sum_axis(Axis(0));
            let dz = da.dot(&self.lstm_w);
            dx[t] = dz.slice(s![.., ..k]).to_owned();
            dh = dz.slice(s![.., k..]).to_owned();
            dc = &dc * &st.f;
        }
        (EstimatorGrads { lstm_w: gw, lstm_b: gb, head_w, head_b }, dx)
    }

    /// Predicted outputs for one combination.
    pub fn predict(&self, pc: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.run(&[pc])?.out.row(0).to_vec())
    }

    /// Gradient of `err + lambda * ece` with respect to the input rows.
    pub fn input_gradient(&self, pc: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
        self.objective_gradient(pc, &[1.0, lambda])
    }

    pub fn objective_gradient(&self, pc: &Array2<f64>, weights: &[f64]) -> Result<Array2<f64>> {
        if weights.len() != self.head_b.len() {
            return Err(Error::DimensionMismatch { expected: self.head_b.len(), got: weights.len() });
        }
        let trace = self.run(&[pc])?;
        let dy = Array2::from_shape_vec((1, weights.len()), weights.to_vec()).expect("row vector");
        let (_, dx) = self.backward(&trace, &dy);
        let mut grad = Array2::zeros(pc.raw_dim());
        for (t, g) in dx.iter().enumerate() {
            grad.row_mut(t).assign(&g.row(0));
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient("estimator input gradient".into()));
        }
        Ok(grad)
    }

    /// Weighted mean squared error over a batch and its parameter gradient:
    /// `(1/n) sum_s sum_o w_o (y_hat - y)^2`.
    pub fn loss_and_grad(
        &self,
        inputs: &[&Array2<f64>],
        targets: &[&[f64]],
        weights: &[f64],
    ) -> Result<(f64, EstimatorGrads)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::invalid("need a non-empty batch with one target per input"));
        }
        let n_out = self.head_b.len();
        if weights.len() != n_out || targets.iter().any(|t| t.len() != n_out) {
            return Err(Error::DimensionMismatch { expected: n_out, got: weights.len() });
        }
        let trace = self.run(inputs)?;
        let n = inputs.len() as f64;
        let mut loss = 0.0;
        let mut dy = Array2::zeros(trace.out.raw_dim());
        for (s, t) in targets.iter().enumerate() {
            for o in 0..n_out {
                let r = trace.out[[s, o]] - t[o];
                loss += weights[o] * r * r;
                dy[[s, o]] = 2.0 * weights[o] * r / n;
            }
        }
        let (grads, _) = self.backward(&trace, &dy);
        Ok((loss / n, grads))
    }

    /// Trains on the whole memory, continuing from the current parameters
    /// (and optimizer state). Returns the loss before each step.
    pub fn train_estimator(&mut self, memory: &Memory, fit: &FitConfig) -> Result<Vec<f64>> {
        if memory.is_empty() {
            return Err(Error::invalid("cannot train the estimator on an empty memory"));
        }
        if fit.loss_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        let inputs: Vec<&Array2<f64>> = memory.iter().map(|e| &e.pc).collect();
        let targets: Vec<&[f64]> = memory.iter().map(|e| e.targets.as_slice()).collect();
        let mut trace = Vec::with_capacity(fit.steps);
        for _ in 0..fit.steps {
            let (loss, grads) = self.loss_and_grad(&inputs, &targets, &fit.loss_weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient("estimator loss diverged".into()));
            }
            trace.push(loss);
            let g = grads.flatten();
            let mut p = self.params_flat();
            match fit.optimizer {
                EstimatorOptimizer::Gd => p.iter_mut().zip(&g).for_each(|(p, g)| *p -= fit.lr * g),
                EstimatorOptimizer::Adam => {
                    let n = p.len();
                    let st = self.adam.get_or_insert_with(|| AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
                    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                    st.t += 1;
                    let c1 = 1.0 - b1.powi(st.t);
                    let c2 = 1.0 - b2.powi(st.t);
                    for j in 0..n {
                        st.m[j] = b1 * st.m[j] + (1.0 - b1) * g[j];
                        st.v[j] = b2 * st.v[j] + (1.0 - b2) * g[j] * g[j];
                        p[j] -= fit.lr * (st.m[j] / c1) / ((st.v[j] / c2).sqrt() + eps);
                    }
                }
            }
            self.set_params_flat(&p);
        }
        Ok(trace)
    }

    /// Writes the parameters as f32 tensors (`lstm_w.w`, `lstm_b.w`,
    /// `head_w.w`, `head_b.w`) in the checkpoint blob format.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, dims: Vec<usize>, data: Vec<f32>| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, encode_tensor(&dims, &data)?).map_err(|e| Error::io(&path, e))
        };
        let f32s = |it: ndarray::iter::Iter<'_, f64, _>| it.map(|&v| v as f32).collect::<Vec<_>>();
        put("lstm_w.w", self.lstm_w.shape().to_vec(), self.lstm_w.iter().map(|&v| v as f32).collect())?;
        put("lstm_b.w", vec![self.lstm_b.len()], f32s(self.lstm_b.iter()))?;
        put("head_w.w", self.head_w.shape().to_vec(), self.head_w.iter().map(|&v| v as f32).collect())?;
        put("head_b.w", vec![self.head_b.len()], f32s(self.head_b.iter()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let path = dir.join(name);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (dims, data) = decode_tensor(&bytes)?;
            Ok((dims, data.into_iter().map(f64::from).collect()))
        };
        let mat = |(dims, data): (Vec<usize>, Vec<f64>)| -> Result<Array2<f64>> {
            if dims.len() != 2 {
                return Err(Error::Format("expected a matrix".into()));
            }
            Array2::from_shape_vec((dims[0], dims[1]), data).map_err(|e| Error::Format(e.to_string()))
        };
        let lstm_w = mat(get("lstm_w.w")?)?;
        let head_w = mat(get("head_w.w")?)?;
        let lstm_b = Array1::from(get("lstm_b.w")?.1);
        let head_b = Array1::from(get("head_b.w")?.1);
        let hidden = head_w.ncols();
        if lstm_w.nrows() != 4 * hidden || lstm_b.len() != 4 * hidden || head_b.len() != head_w.nrows() || lstm_w.ncols() <= hidden {
            return Err(Error::Format("estimator tensors have inconsistent shapes".into()));
        }
        Ok(Self { input_size: lstm_w.ncols() - hidden, hidden, lstm_w, lstm_b, head_w, head_b, adam: None })
    }
}

impl Surrogate for SurrogateEstimator {
    fn n_outputs(&self) -> usize {
        self.head_b.len()
    }

    fn predict(&self, pc: &Array2<f64>) -> Result<Vec<f64>> {
        SurrogateEstimator::predict(self, pc)
    }

    fn objective_gradient(&self, pc: &Array2<f64>, weights: &[f64]) -> Result<Array2<f64>> {
        SurrogateEstimator::objective_gradient(self, pc, weights)
    }

    fn fit(&mut self, memory: &Memory, fit: &FitConfig) -> Result<Vec<f64>> {
        self.train_estimator(memory, fit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_pc(m: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = derive_rng(seed, "pc", 0);
        let mut a = Array2::from_shape_simple_fn((m, k), || rng.random_range(0.0..1.0));
        for mut r in a.axis_iter_mut(Axis(0)) {
            let s = r.sum();
            r /= s;
        }
        a
    }

    #[test]
    fn init_rules() {
        let e = init_estimator(5, 4, 2, 3).unwrap();
        assert!(e.lstm_b.slice(s![..4]).iter().all(|&b| b == 1.0));
        assert!(e.lstm_b.slice(s![4..]).iter().all(|&b| b == 0.0));
        assert!(e.lstm_w.iter().chain(&e.head_w).all(|w| w.abs() <= 0.5));
        assert_eq!(e, init_estimator(5, 4, 2, 3).unwrap());
        let out = e.predict(&random_pc(3, 5, 1)).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_head_predicts_zero() {
        let mut e = init_estimator(5, 4, 2, 3).unwrap();
        e.head_w.fill(0.0);
        assert_eq!(e.predict(&random_pc(3, 5, 2)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_step_passes_head_bias() {
        let mut e = init_estimator(1, 1, 2, 0).unwrap();
        e.lstm_w.fill(0.0);
        e.head_w.fill(0.7);
        e.head_b = Array1::from(vec![0.25, -0.5]);
        let out = e.predict(&Array2::from_elem((1, 1), 1.0)).unwrap();
        assert_eq!(out, vec![0.25, -0.5]);
    }

    #[test]
    fn zero_input_weights_zero_gradient() {
        let mut e = init_estimator(5, 4, 2, 3).unwrap();
        e.lstm_w.slice_mut(s![.., ..5]).fill(0.0);
        let g = e.input_gradient(&random_pc(3, 5, 4), 2.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_lambda() {
        let e = init_estimator(5, 4, 2, 6).unwrap();
        let pc = random_pc(3, 5, 5);
        let err = e.objective_gradient(&pc, &[1.0, 0.0]).unwrap();
        let ece = e.objective_gradient(&pc, &[0.0, 1.0]).unwrap();
        let both = e.input_gradient(&pc, 2.0).unwrap();
        let expect = &err + &(&ece * 2.0);
        assert!(both.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let e = init_estimator(5, 4, 2, 6).unwrap();
        let pc = random_pc(3, 5, 5);
        let y = e.predict(&pc).unwrap();
        let (loss, g) = e.loss_and_grad(&[&pc], &[&y], &[1.0, 1.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        // gamma = 0 drops the second output.
        let off = [y[0], y[1] + 3.0];
        assert_eq!(e.loss_and_grad(&[&pc], &[&off], &[1.0, 0.0]).unwrap().0, 0.0);
    }

    #[test]
    fn memory_is_fifo() {
        let mut m = Memory::new(2).unwrap();
        for v in [1.0, 2.0, 3.0] {
            m.push(MemoryEntry { pc: Array2::zeros((1, 1)), targets: vec![v] });
            assert!(m.len() <= 2);
        }
        let kept: Vec<f64> = m.iter().map(|e| e.targets[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0]);
        assert!(Memory::new(0).is_err());
    }

    #[test]
    fn save_load_round_trip_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let e = init_estimator(5, 4, 2, 8).unwrap();
        e.save(dir.path()).unwrap();
        let back = SurrogateEstimator::load(dir.path()).unwrap();
        assert_eq!((back.input_size, back.hidden), (5, 4));
        for (a, b) in e.params_flat().iter().zip(back.params_flat()) {
            assert_eq!(*a as f32 as f64, b);
        }
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        num / den.max(1e-300)
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let e = init_estimator(5, 4, 2, 11).unwrap();
        let pc = random_pc(3, 5, 12);
        let lambda = 2.5;
        let f = |x: &Array2<f64>| {
            let y = e.predict(x).unwrap();
            y[0] + lambda * y[1]
        };
        let g = e.input_gradient(&pc, lambda).unwrap();
        let h = 1e-6;
        let mut fd = Vec::new();
        for idx in 0..pc.len() {
            let (r, c) = (idx / 5, idx % 5);
            let mut p = pc.clone();
            p[[r, c]] += h;
            let up = f(&p);
            p[[r, c]] -= 2.0 * h;
            fd.push((up - f(&p)) / (2.0 * h));
        }
        let an: Vec<f64> = g.iter().copied().collect();
        assert!(rel_err(&an, &fd) < 1e-6, "{}", rel_err(&an, &fd));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let e = init_estimator(5, 4, 2, 13).unwrap();
        let pcs: Vec<Array2<f64>> = (0..3).map(|s| random_pc(3, 5, 20 + s)).collect();
        let ys = [vec![0.2, 0.05], vec![0.4, 0.1], vec![0.1, 0.3]];
        let inputs: Vec<&Array2<f64>> = pcs.iter().collect();
        let targets: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let w = [1.0, 1.5];
        let (_, g) = e.loss_and_grad(&inputs, &targets, &w).unwrap();
        let theta = e.params_flat();
        let h = 1e-6;
        let mut probe = e.clone();
        let fd: Vec<f64> = (0..theta.len())
            .map(|j| {
                let mut t = theta.clone();
                t[j] += h;
                probe.set_params_flat(&t);
                let up = probe.loss_and_grad(&inputs, &targets, &w).unwrap().0;
                t[j] -= 2.0 * h;
                probe.set_params_flat(&t);
                let dn = probe.loss_and_grad(&inputs, &targets, &w).unwrap().0;
                (up - dn) / (2.0 * h)
            })
            .collect();
        assert!(rel_err(&g.flatten(), &fd) < 1e-5, "{}", rel_err(&g.flatten(), &fd));
    }
}
