//! Row normalization and cosine similarity with their gradients.

use super::matrix::Matrix;

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Unit-normalized rows and the original norms. Zero rows stay zero.
pub fn normalize_rows(z: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let n = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(n);
        if n > ZERO_NORM {
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
    }
    (out, norms)
}

/// Maps `∂L/∂n` to `∂L/∂z` for `n = z / |z|`: `(dn − n·(n·dn)) / |z|`.
pub fn normalize_rows_backward(n: &Matrix, norms: &[f64], dn: &Matrix) -> Matrix {
    let mut dz = Matrix::zeros(n.rows(), n.cols());
    for r in 0..n.rows() {
        if norms[r] <= ZERO_NORM {
            continue;
        }
        let nr = n.row(r);
        let g = dn.row(r);
        let proj: f64 = nr.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&a, &b)) in dz.row_mut(r).iter_mut().zip(nr.iter().zip(g)) {
            *o = (b - proj * a) / norms[r];
        }
    }
    dz
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 − cos`, with a zero-norm argument treated as orthogonal (distance 1).
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - cosine(a, b).unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_backward_matches_differences() {
        let z = Matrix::from_rows(&[vec![0.3, -1.2, 0.5], vec![2.0, 0.1, -0.4]], 3).unwrap();
        let w = Matrix::from_rows(&[vec![0.7, 0.2, -0.9], vec![-0.3, 1.1, 0.4]], 3).unwrap();
        let f = |z: &Matrix| -> f64 {
            let (n, _) = normalize_rows(z);
            n.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (n, norms) = normalize_rows(&z);
        let dz = normalize_rows_backward(&n, &norms, &w);
        let h = 1e-6;
        for k in 0..6 {
            let mut p = z.clone();
            p.as_mut_slice()[k] += h;
            let mut m = z.clone();
            m.as_mut_slice()[k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - dz.as_slice()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_vector_is_orthogonal() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert!((cosine_distance(&[2.0, 0.0], &[3.0, 0.0])).abs() < 1e-15);
    }
}
