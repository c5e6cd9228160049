//! Elementary losses with their gradients, generic over [`Scalar`].

use super::matrix::Matrix;
use super::scalar::{softmax, Scalar};

/// Mean softmax cross-entropy over `rows` of `logits`, where row `rows[k]`
/// has target class `targets[k]`. Returns the loss and `∂loss/∂logits`
/// (zero on unselected rows). An empty selection gives zero loss.
pub fn cross_entropy<S: Scalar>(logits: &Matrix<S>, rows: &[usize], targets: &[usize]) -> (S, Matrix<S>) {
    debug_assert_eq!(rows.len(), targets.len());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    if rows.is_empty() {
        return (S::zero(), grad);
    }
    let inv = 1.0 / rows.len() as f64;
    let mut loss = S::zero();
    for (&r, &t) in rows.iter().zip(targets) {
        let p = softmax(logits.row(r));
        loss -= p[t].ln();
        let g = grad.row_mut(r);
        for (j, &pj) in p.iter().enumerate() {
            let y = if j == t { S::one() } else { S::zero() };
            g[j] += (pj - y).scale(inv);
        }
    }
    (loss.scale(inv), grad)
}

/// Huber-style smooth-L1 with unit transition, summed over columns and
/// averaged over `rows`. `targets[k]` is the target row for `rows[k]`.
pub fn smooth_l1<S: Scalar>(pred: &Matrix<S>, rows: &[usize], targets: &[Vec<f64>]) -> (S, Matrix<S>) {
    debug_assert_eq!(rows.len(), targets.len());
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    if rows.is_empty() {
        return (S::zero(), grad);
    }
    let inv = 1.0 / rows.len() as f64;
    let mut loss = S::zero();
    for (&r, t) in rows.iter().zip(targets) {
        for (j, &tj) in t.iter().enumerate() {
            let d = pred[(r, j)] - S::from_f64(tj);
            if d.re().abs() < 1.0 {
                loss += (d * d).scale(0.5);
                grad[(r, j)] += d.scale(inv);
            } else {
                let sign = if d.re() > 0.0 { 1.0 } else { -1.0 };
                loss += d.scale(sign) - S::from_f64(0.5);
                grad[(r, j)] += S::from_f64(sign * inv);
            }
        }
    }
    (loss.scale(inv), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_on_uniform_logits() {
        let logits = Matrix::from_vec(1, 4, vec![0.0; 4]).unwrap();
        let (l, g) = cross_entropy(&logits, &[0], &[2]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g[(0, 2)] + 0.75).abs() < 1e-12);
        assert!((g[(0, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_regions() {
        let pred = Matrix::from_vec(1, 2, vec![0.5, 3.0]).unwrap();
        let (l, g) = smooth_l1(&pred, &[0], &[vec![0.0, 0.0]]);
        assert!((l - (0.125 + 2.5)).abs() < 1e-12);
        assert_eq!(g.as_slice(), &[0.5, 1.0]);
    }

    #[test]
    fn empty_selection_is_zero() {
        let logits = Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap();
        let (l, g) = cross_entropy(&logits, &[], &[]);
        assert_eq!(l, 0.0);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }
}
