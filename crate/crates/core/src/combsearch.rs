//! Predecessor-combination representations.
//!
//! A combination picks one of `K` candidates for each of the `M` blocks. The
//! discrete form holds one-hot rows; the relaxed form holds rows on the
//! probability simplex drawn with the Gumbel-Softmax trick from the
//! selection logits `A` (`M x K`).

use ndarray::{Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, softmax_in_place};
use crate::seed::Rng;

/// Selection logits plus the hyperparameters of their update.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionParams {
    pub logits: Array2<f64>,
    pub lr: f64,
    pub lambda: f64,
    pub gumbel_tau: f64,
}

impl SelectionParams {
    /// All-zero logits, i.e. a uniform selection distribution.
    pub fn zeros(n_blocks: usize, n_candidates: usize, lr: f64, lambda: f64, gumbel_tau: f64) -> Result<Self> {
        let p = Self { logits: Array2::zeros((n_blocks, n_candidates)), lr, lambda, gumbel_tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("selection logits must be finite"));
        }
        if !(self.gumbel_tau > 0.0) || !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("need gumbel_tau > 0, lr > 0 and lambda >= 0"));
        }
        Ok(())
    }
}

/// One-hot rows: a concrete choice per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscretePc {
    choices: Vec<usize>,
    n_candidates: usize,
}

impl DiscretePc {
    pub fn new(choices: Vec<usize>, n_candidates: usize) -> Result<Self> {
        if choices.is_empty() {
            return Err(Error::invalid("a combination needs at least one block"));
        }
        if let Some(&bad) = choices.iter().find(|&&c| c >= n_candidates) {
            return Err(Error::IndexOutOfRange(format!("candidate {bad} of {n_candidates}")));
        }
        Ok(Self { choices, n_candidates })
    }

    /// Every block on the same candidate.
    pub fn uniform(n_blocks: usize, candidate: usize, n_candidates: usize) -> Result<Self> {
        Self::new(vec![candidate; n_blocks], n_candidates)
    }

    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    pub fn n_candidates(&self) -> usize {
        self.n_candidates
    }

    pub fn one_hot(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.choices.len(), self.n_candidates));
        for (i, &c) in self.choices.iter().enumerate() {
            m[[i, c]] = 1.0;
        }
        m
    }

    /// `[c_1, ..., c_M]` as a JSON array.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.choices).expect("plain integers")
    }

    pub fn from_json(s: &str, n_candidates: usize) -> Result<Self> {
        let choices: Vec<usize> = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(choices, n_candidates)
    }
}

/// Rows on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPc {
    rows: Array2<f64>,
}

impl RelaxedPc {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for r in rows.axis_iter(Axis(0)) {
            if r.iter().any(|&v| !(v >= 0.0)) || (r.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("relaxed rows must be non-negative and sum to 1"));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }
}

/// Row-wise argmax of the selection logits.
pub fn harden(logits: &Array2<f64>) -> DiscretePc {
    let choices = logits.axis_iter(Axis(0)).map(argmax).collect();
    DiscretePc { choices, n_candidates: logits.ncols() }
}

/// Gumbel(0, 1) noise, `-ln(-ln u)` with `u` strictly inside (0, 1).
pub fn gumbel_noise(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let mut u: f64 = rng.random();
        while u <= 0.0 || u >= 1.0 {
            u = rng.random();
        }
        -(-u.ln()).ln()
    })
}

/// Softmax of `(A + noise) / tau`, row by row.
pub fn relax_with_noise(logits: &Array2<f64>, noise: &Array2<f64>, tau: f64) -> Result<RelaxedPc> {
    if !(tau > 0.0) {
        return Err(Error::invalid("Gumbel temperature must be positive"));
    }
    if logits.dim() != noise.dim() {
        return Err(Error::DimensionMismatch { expected: logits.len(), got: noise.len() });
    }
    let mut rows = (logits + noise) / tau;
    for r in rows.axis_iter_mut(Axis(0)) {
        softmax_in_place(r);
    }
    Ok(RelaxedPc { rows })
}

/// A Gumbel-Softmax sample around `logits`; also returns the noise used.
pub fn gumbel_relax(logits: &Array2<f64>, tau: f64, rng: &mut Rng) -> Result<(RelaxedPc, Array2<f64>)> {
    let noise = gumbel_noise(logits.dim(), rng);
    Ok((relax_with_noise(logits, &noise, tau)?, noise))
}

/// Row-wise argmax of a relaxed sample.
pub fn to_discrete(p: &RelaxedPc) -> DiscretePc {
    harden(&p.rows)
}

/// Pulls a gradient on the relaxed rows back to the logits:
/// `dL/da_k' = sum_k dL/dr_k * (1/tau) r_k (1{k=k'} - r_k')`.
pub fn gumbel_softmax_vjp(relaxed: &RelaxedPc, grad_rows: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if relaxed.rows.dim() != grad_rows.dim() {
        return Err(Error::DimensionMismatch { expected: relaxed.rows.len(), got: grad_rows.len() });
    }
    let mut out = Array2::zeros(grad_rows.raw_dim());
    for ((r, g), mut o) in relaxed
        .rows
        .axis_iter(Axis(0))
        .zip(grad_rows.axis_iter(Axis(0)))
        .zip(out.axis_iter_mut(Axis(0)))
    {
        let mean = r.dot(&g);
        for k in 0..r.len() {
            o[k] = r[k] * (g[k] - mean) / tau;
        }
    }
    Ok(out)
}

/// Jacobian of one relaxed row with respect to its logits; entry `[k, k']`
/// is `d r_k / d a_k'`.
pub fn gumbel_softmax_jacobian(row: &[f64], tau: f64) -> Array2<f64> {
    let k = row.len();
    Array2::from_shape_fn((k, k), |(a, b)| row[a] * (f64::from(u8::from(a == b)) - row[b]) / tau)
}

/// `A' = A - lr * grad`.
pub fn update_selection(logits: &Array2<f64>, grad: &Array2<f64>, lr: f64) -> Result<Array2<f64>> {
    if logits.dim() != grad.dim() {
        return Err(Error::DimensionMismatch { expected: logits.len(), got: grad.len() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient("selection gradient".into()));
    }
    Ok(logits - &(grad * lr))
}

/// Linear Gumbel temperature schedule for step `t` of `steps` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal: bool,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.1, anneal: false }
    }
}

impl GumbelSchedule {
    pub fn at(&self, t: usize, steps: usize) -> f64 {
        if !self.anneal || steps <= 1 {
            return self.start;
        }
        let frac = (t.saturating_sub(1)) as f64 / (steps - 1) as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use ndarray::array;

    #[test]
    fn harden_examples() {
        let pc = harden(&array![[0.1, 0.9, 0.3], [0.5, 0.5, 0.0]]);
        assert_eq!(pc.choices(), &[1, 0]);
        assert_eq!(pc.one_hot(), array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        let shifted = array![[0.1, 0.9, 0.3], [0.5, 0.5, 0.0]] + 3.7;
        assert_eq!(harden(&shifted), pc);
    }

    #[test]
    fn relax_without_noise() {
        let zero = Array2::zeros((1, 2));
        let r = relax_with_noise(&array![[0.0, 0.0]], &zero, 1.0).unwrap();
        assert_eq!(r.rows(), &array![[0.5, 0.5]]);
        let r = relax_with_noise(&array![[2f64.ln(), 0.0]], &zero, 1.0).unwrap();
        assert!((r.rows()[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.rows()[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
        assert!(relax_with_noise(&array![[0.0, 0.0]], &zero, 0.0).is_err());
    }

    #[test]
    fn to_discrete_examples() {
        let r = RelaxedPc::new(array![[0.7, 0.2, 0.1], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(to_discrete(&r).choices(), &[0, 1]);
        let mut rng = rng_from_seed(5);
        let a = array![[0.3, 0.1, -0.2, 0.8], [1.0, 1.1, 0.2, 0.0]];
        let noise = gumbel_noise(a.dim(), &mut rng);
        let r = relax_with_noise(&a, &noise, 1e-4).unwrap();
        assert_eq!(to_discrete(&r), harden(&(&a + &noise)));
    }

    #[test]
    fn update_examples() {
        let a = update_selection(&array![[0.0, 0.0]], &array![[1.0, -1.0]], 0.1).unwrap();
        assert_eq!(a, array![[-0.1, 0.1]]);
        let z = update_selection(&array![[0.4, 2.0]], &Array2::zeros((1, 2)), 0.1).unwrap();
        assert_eq!(z, array![[0.4, 2.0]]);
        assert!(update_selection(&array![[0.0]], &array![[f64::NAN]], 0.1).is_err());
    }

    #[test]
    fn jacobian_rows_sum_to_zero_and_match_vjp() {
        let row = [0.2, 0.5, 0.3];
        let j = gumbel_softmax_jacobian(&row, 0.7);
        for col in 0..3 {
            let s: f64 = (0..3).map(|k| j[[k, col]]).sum();
            assert!(s.abs() < 1e-15);
        }
        let g = array![[0.3, -1.2, 2.0]];
        let pc = RelaxedPc::new(array![[0.2, 0.5, 0.3]]).unwrap();
        let v = gumbel_softmax_vjp(&pc, &g, 0.7).unwrap();
        for kp in 0..3 {
            let direct: f64 = (0..3).map(|k| g[[0, k]] * j[[k, kp]]).sum();
            assert!((v[[0, kp]] - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn pc_json() {
        let pc = DiscretePc::new(vec![3, 1, 4, 1, 5], 9).unwrap();
        assert_eq!(pc.to_json(), "[3,1,4,1,5]");
        assert_eq!(DiscretePc::from_json("[3,1,4,1,5]", 9).unwrap(), pc);
        assert!(DiscretePc::from_json("[9]", 9).is_err());
    }

    #[test]
    fn gumbel_anneal() {
        let s = GumbelSchedule { anneal: true, ..GumbelSchedule::default() };
        assert_eq!(s.at(1, 10), 1.0);
        assert!((s.at(10, 10) - 0.1).abs() < 1e-15);
        assert_eq!(GumbelSchedule::default().at(7, 10), 1.0);
    }
}
