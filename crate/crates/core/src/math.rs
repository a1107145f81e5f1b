//! Small numeric helpers shared by the network, metrics and search code.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis};

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v || i == 0 {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn argmax_slice(row: &[f64]) -> usize {
    argmax(ArrayView1::from(row))
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(mut row: ArrayViewMut1<'_, f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    row.mapv_inplace(|z| {
        let e = (z - max).exp();
        sum += e;
        e
    });
    row.mapv_inplace(|e| e / sum);
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for row in probs.axis_iter_mut(Axis(0)) {
        softmax_in_place(row);
    }
    probs
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_two_and_zero() {
        let p = softmax_rows(&array![[2.0, 0.0]]);
        let e2 = 2f64.exp();
        assert!((p[[0, 0]] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[[0, 0]] - 0.8808).abs() < 1e-4);
        assert!((p[[0, 1]] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax_slice(&[0.5, 0.5]), 0);
        assert_eq!(argmax_slice(&[0.1, 0.9, 0.3]), 1);
    }
}
