//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::error::{Error, Result};

/// Default floor on gradient norms when forming relative errors.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    pub seed: u64,
    /// Smallest denominator of the relative error, so gradients that are
    /// zero by construction are judged on absolute error.
    pub norm_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_entries_per_tensor: None, seed: 0, norm_floor: GRAD_NORM_FLOOR }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorDeviation {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)` over the
    /// checked entries.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorDeviation>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.tensors.extend(other.tensors);
    }
}

/// Compares the gradients stored in `params` with central differences of
/// `loss`, which is re-evaluated on perturbed copies of `params`.
pub fn grad_check<F>(params: &ParamSet<f64>, opts: &GradCheckOptions, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::Diagnostic(format!("loss is not finite ({base})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    for ti in 0..params.len() {
        let p = params.by_index(ti);
        if !p.trainable || p.is_empty() {
            continue;
        }
        let entries: Vec<usize> = match opts.max_entries_per_tensor {
            Some(k) if k < p.len() => {
                let mut v = sample(&mut rng, p.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..p.len()).collect(),
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &k in &entries {
            let orig = p.value[k];
            probe.by_index_mut(ti).value[k] = orig + opts.step;
            let up = loss(&probe)?;
            probe.by_index_mut(ti).value[k] = orig - opts.step;
            let down = loss(&probe)?;
            probe.by_index_mut(ti).value[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Diagnostic(format!("loss not finite when perturbing {}[{k}]", p.name)));
            }
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = p.grad[k];
            let d = analytic - numeric;
            diff2 += d * d;
            a2 += analytic * analytic;
            n2 += numeric * numeric;
            max_abs = max_abs.max(d.abs());
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(opts.norm_floor);
        let rel_error = if diff2 == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        tensors.push(TensorDeviation {
            name: p.name.clone(),
            checked: entries.len(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dense::{Activation, DenseNet, LayerSpec};
    use crate::nn::matrix::Matrix;
    use rand::Rng;

    fn least_squares(net: &DenseNet, x: &Matrix, y: &Matrix) -> f64 {
        let (out, _) = net.forward_traced(x).unwrap();
        out.as_slice().iter().zip(y.as_slice()).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
    }

    #[test]
    fn linear_least_squares_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = DenseNet::new(&[LayerSpec::new(3, 2, Activation::Identity, false)], &mut rng).unwrap();
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y = Matrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = net.forward(&x).unwrap();
        let mut resid = out.clone();
        for (r, t) in resid.as_mut_slice().iter_mut().zip(y.as_slice()) {
            *r -= t;
        }
        net.backward(&resid).unwrap();
        let specs = net.specs().to_vec();
        let report = grad_check(net.params(), &GradCheckOptions::default(), |p| {
            let probe = DenseNet::from_params(&specs, p.clone())?;
            Ok(least_squares(&probe, &x, &y))
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_deviation() {
        let net = DenseNet::identity(2);
        let report = grad_check(net.params(), &GradCheckOptions::default(), |_| Ok(3.0)).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn non_finite_loss_is_diagnostic() {
        let net = DenseNet::identity(2);
        let err = grad_check(net.params(), &GradCheckOptions::default(), |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Diagnostic(_)));
    }
}
