//! Mapping network and the adversarial semantics calibration loss: gradient
//! alignment between the weak-through-student and strong views, balanced by
//! an InfoNCE term that keeps distinct instances apart.
//!
//! The alignment term is `1 − cos(g₁, g₂)` where `gₖ` is the gradient of a
//! classification loss with respect to the mapping network. Its own gradient
//! needs Hessian-vector products, which are computed exactly by running the
//! reverse pass on dual numbers whose tangents are seeded with `∂L/∂gₖ`.

use rand::Rng;

use crate::error::{config, Result};
use crate::nn::cosine::{normalize_rows, normalize_rows_backward, ZERO_NORM};
use crate::nn::loss::cross_entropy;
use crate::nn::scalar::log_sum_exp;
use crate::nn::{Activation, DenseNet, LayerSpec, Matrix, Scalar};

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// `d → 2d` with normalization and relu, `2d → 2d`, then `2d → d_embed`.
pub fn mnet_specs(d_feat: usize, d_embed: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(d_feat, 2 * d_feat, Activation::Relu, true),
        LayerSpec::new(2 * d_feat, 2 * d_feat, Activation::Identity, false),
        LayerSpec::new(2 * d_feat, d_embed, Activation::Identity, false),
    ]
}

pub fn new_mnet<R: Rng + ?Sized>(d_feat: usize, d_embed: usize, rng: &mut R) -> Result<DenseNet> {
    DenseNet::new(&mnet_specs(d_feat, d_embed), rng)
}

/// Linear classifier on embeddings used inside the alignment term. It is
/// never optimized.
pub fn new_probe<R: Rng + ?Sized>(d_embed: usize, classes: usize, rng: &mut R) -> Result<DenseNet> {
    DenseNet::new(&[LayerSpec::new(d_embed, classes + 1, Activation::Identity, false)], rng)
}

/// Row-wise mapping-network forward.
pub fn project(mnet: &DenseNet, features: &Matrix) -> Result<Matrix> {
    Ok(mnet.forward_traced(features)?.0)
}

/// Row-aligned embeddings of the weak view through the student (`Z̄′`) and
/// of the strong view (`Ẑ`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPairBatch {
    pub weak_prime: Matrix,
    pub strong: Matrix,
}

impl EmbeddingPairBatch {
    pub fn new(weak_prime: Matrix, strong: Matrix) -> Result<Self> {
        if weak_prime.shape() != strong.shape() {
            return Err(config(format!(
                "paired embeddings have shapes {:?} and {:?}",
                weak_prime.shape(),
                strong.shape()
            )));
        }
        Ok(Self { weak_prime, strong })
    }

    pub fn len(&self) -> usize {
        self.strong.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.strong.rows() == 0
    }
}

/// Classification targets for the alignment term: proposal rows and classes.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub rows: &'a [usize],
    pub classes: &'a [usize],
}

/// Classification loss along `[ext →] mnet → probe`, accumulating gradients
/// into every net it passes through.
fn class_path<S: Scalar>(
    ext: Option<&mut DenseNet<S>>,
    mnet: &mut DenseNet<S>,
    probe: &mut DenseNet<S>,
    x: &Matrix<S>,
    t: Targets,
) -> Result<S> {
    let (f, ext_trace) = match &ext {
        Some(e) => {
            let (f, tr) = e.forward_traced(x)?;
            (f, Some(tr))
        }
        None => (x.clone(), None),
    };
    let (z, mt) = mnet.forward_traced(&f)?;
    let (logits, pt) = probe.forward_traced(&z)?;
    let (loss, dl) = cross_entropy(&logits, t.rows, t.classes);
    let dz = probe.backward_traced(&pt, &dl)?;
    let df = mnet.backward_traced(&mt, &dz)?;
    if let (Some(e), Some(tr)) = (ext, ext_trace) {
        e.backward_traced(&tr, &df)?;
    }
    Ok(loss)
}

/// `∇_mnet` of the probe cross-entropy on `features` (mapping-network inputs).
pub fn class_gradient(mnet: &DenseNet, probe: &DenseNet, features: &Matrix, t: Targets) -> Result<Vec<f64>> {
    let mut m = mnet.clone();
    let mut p = probe.clone();
    m.params_mut().zero_grad();
    class_path(None, &mut m, &mut p, features, t)?;
    Ok(m.params().flat_grad())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradAlignment {
    /// `1 − cos(g₁, g₂)`; 0 when skipped.
    pub value: f64,
    pub cos: f64,
    pub g_weak: Vec<f64>,
    pub g_strong: Vec<f64>,
    /// No targets were available.
    pub skipped: bool,
    /// A gradient vanished; cosine taken as 0.
    pub zero_norm: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn alignment(g_weak: Vec<f64>, g_strong: Vec<f64>) -> GradAlignment {
    let (n1, n2) = (norm(&g_weak), norm(&g_strong));
    if n1 <= ZERO_NORM || n2 <= ZERO_NORM {
        return GradAlignment { value: 1.0, cos: 0.0, g_weak, g_strong, skipped: false, zero_norm: true };
    }
    let dot: f64 = g_weak.iter().zip(&g_strong).map(|(a, b)| a * b).sum();
    let cos = dot / (n1 * n2);
    GradAlignment { value: 1.0 - cos, cos, g_weak, g_strong, skipped: false, zero_norm: false }
}

fn skipped() -> GradAlignment {
    GradAlignment { value: 0.0, cos: 0.0, g_weak: Vec::new(), g_strong: Vec::new(), skipped: true, zero_norm: false }
}

/// Alignment value from mapping-network inputs of both views.
pub fn l_grad(
    mnet: &DenseNet,
    probe: &DenseNet,
    weak_prime_features: &Matrix,
    strong_features: &Matrix,
    t: Targets,
) -> Result<GradAlignment> {
    if t.rows.is_empty() {
        return Ok(skipped());
    }
    let g1 = class_gradient(mnet, probe, weak_prime_features, t)?;
    let g2 = class_gradient(mnet, probe, strong_features, t)?;
    Ok(alignment(g1, g2))
}

/// Alignment value starting from extractor inputs (`ext` maps both views).
pub fn l_grad_through(
    ext: &DenseNet,
    mnet: &DenseNet,
    probe: &DenseNet,
    weak_inputs: &Matrix,
    strong_inputs: &Matrix,
    t: Targets,
) -> Result<GradAlignment> {
    let fa = ext.forward_traced(weak_inputs)?.0;
    let fb = ext.forward_traced(strong_inputs)?.0;
    l_grad(mnet, probe, &fa, &fb, t)
}

/// Computes the alignment term and accumulates `weight · ∂L/∂θ` into the
/// mapping network and, when given, the extractor. Inputs are extractor
/// inputs when `ext` is present and mapping-network inputs otherwise.
pub fn l_grad_backward(
    mut ext: Option<&mut DenseNet>,
    mnet: &mut DenseNet,
    probe: &DenseNet,
    weak_inputs: &Matrix,
    strong_inputs: &Matrix,
    t: Targets,
    weight: f64,
) -> Result<GradAlignment> {
    let res = match ext.as_deref() {
        Some(e) => l_grad_through(e, mnet, probe, weak_inputs, strong_inputs, t)?,
        None => l_grad(mnet, probe, weak_inputs, strong_inputs, t)?,
    };
    if res.skipped || res.zero_norm || weight == 0.0 {
        return Ok(res);
    }
    let (n1, n2) = (norm(&res.g_weak), norm(&res.g_strong));
    // ∂(1 − cos)/∂g₁ = −(g₂/(n₁n₂) − cos·g₁/n₁²), symmetric in the other view.
    let u = |own: &[f64], other: &[f64], n_own: f64, n_other: f64| -> Vec<f64> {
        own.iter()
            .zip(other)
            .map(|(&a, &b)| -(b / (n_own * n_other) - res.cos * a / (n_own * n_own)))
            .collect()
    };
    let u1 = u(&res.g_weak, &res.g_strong, n1, n2);
    let u2 = u(&res.g_strong, &res.g_weak, n2, n1);
    for (x, dir) in [(weak_inputs, u1), (strong_inputs, u2)] {
        let mut md = mnet.lift(Some(&dir))?;
        let mut pd = probe.lift(None)?;
        let mut ed = match ext.as_deref() {
            Some(e) => Some(e.lift(None)?),
            None => None,
        };
        class_path(ed.as_mut(), &mut md, &mut pd, &x.lift(), t)?;
        let hv: Vec<f64> = md.params().flat_grad_tangent().into_iter().map(|v| weight * v).collect();
        mnet.params_mut().accumulate_flat_grad(&hv)?;
        if let (Some(e), Some(ed)) = (ext.as_deref_mut(), ed) {
            let hv: Vec<f64> = ed.params().flat_grad_tangent().into_iter().map(|v| weight * v).collect();
            e.params_mut().accumulate_flat_grad(&hv)?;
        }
    }
    Ok(res)
}

/// InfoNCE over the union of both views and its gradients on the raw
/// embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct UnsupLoss {
    pub value: f64,
    pub d_weak_prime: Matrix,
    pub d_strong: Matrix,
    /// Fewer than two pairs: no negatives exist.
    pub skipped: bool,
}

/// Each of the `2M` embeddings is an anchor whose positive is its
/// cross-view partner and whose denominator runs over every other embedding.
/// Cosine logits are divided by `tau`; the loss is the mean over anchors.
pub fn l_unsup(batch: &EmbeddingPairBatch, tau: f64) -> Result<UnsupLoss> {
    if !(tau > 0.0) {
        return Err(config(format!("temperature {tau} must be positive")));
    }
    let m = batch.len();
    let e = batch.strong.cols();
    if m < 2 {
        return Ok(UnsupLoss {
            value: 0.0,
            d_weak_prime: Matrix::zeros(m, e),
            d_strong: Matrix::zeros(m, e),
            skipped: true,
        });
    }
    let n = 2 * m;
    let mut all = batch.weak_prime.as_slice().to_vec();
    all.extend_from_slice(batch.strong.as_slice());
    let z = Matrix::from_vec(n, e, all)?;
    let (u, norms) = normalize_rows(&z);
    let sim = u.matmul_t(&u)?;
    let mut g = Matrix::zeros(n, n);
    let mut total = 0.0;
    let inv = 1.0 / n as f64;
    for a in 0..n {
        let partner = (a + m) % n;
        let others: Vec<usize> = (0..n).filter(|&j| j != a).collect();
        let logits: Vec<f64> = others.iter().map(|&j| sim[(a, j)] / tau).collect();
        let lse = log_sum_exp(&logits);
        total += lse - sim[(a, partner)] / tau;
        for (&j, &l) in others.iter().zip(&logits) {
            g[(a, j)] += inv * (l - lse).exp() / tau;
        }
        g[(a, partner)] -= inv / tau;
    }
    let sym = {
        let mut s = g.clone();
        for a in 0..n {
            for b in 0..n {
                s[(a, b)] = g[(a, b)] + g[(b, a)];
            }
        }
        s
    };
    let du = sym.matmul(&u)?;
    let dz = normalize_rows_backward(&u, &norms, &du);
    let (wp, st) = dz.as_slice().split_at(m * e);
    Ok(UnsupLoss {
        value: total * inv,
        d_weak_prime: Matrix::from_vec(m, e, wp.to_vec())?,
        d_strong: Matrix::from_vec(m, e, st.to_vec())?,
        skipped: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScLoss {
    pub value: f64,
    pub grad: f64,
    pub unsup: f64,
    pub grad_skipped: bool,
    pub unsup_skipped: bool,
}

/// `l_grad + α·l_unsup`, skipped components contributing 0.
pub fn l_sc(grad: &GradAlignment, unsup: &UnsupLoss, alpha: f64) -> ScLoss {
    sc_from_parts(grad.value, grad.skipped, unsup.value, unsup.skipped, alpha)
}

pub fn sc_from_parts(grad: f64, grad_skipped: bool, unsup: f64, unsup_skipped: bool, alpha: f64) -> ScLoss {
    let g = if grad_skipped { 0.0 } else { grad };
    let u = if unsup_skipped { 0.0 } else { unsup };
    ScLoss { value: g + alpha * u, grad: g, unsup: u, grad_skipped, unsup_skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamSet};
    use crate::rng::rng_for;

    fn linear(w: Vec<f64>, rows: usize, cols: usize) -> DenseNet {
        let mut p = ParamSet::new();
        p.push(Param::new("l0.weight", (rows, cols), w).unwrap()).unwrap();
        p.push(Param::new("l0.bias", (1, cols), vec![0.0; cols]).unwrap()).unwrap();
        DenseNet::from_params(&[LayerSpec::new(rows, cols, Activation::Identity, false)], p).unwrap()
    }

    #[test]
    fn identity_mnet_projects_unchanged() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]], 3).unwrap();
        assert_eq!(project(&DenseNet::identity(3), &x).unwrap(), x);
    }

    #[test]
    fn projection_is_batch_consistent_without_norm() {
        let mut rng = rng_for(1, &[]);
        let specs = [
            LayerSpec::new(4, 6, Activation::Relu, false),
            LayerSpec::new(6, 3, Activation::Identity, false),
        ];
        let net = DenseNet::new(&specs, &mut rng).unwrap();
        let a = vec![0.1, 0.2, -0.3, 0.4];
        let b = vec![-1.0, 0.5, 0.0, 2.0];
        let both = project(&net, &Matrix::from_rows(&[a.clone(), b.clone()], 4).unwrap()).unwrap();
        let pa = project(&net, &Matrix::from_rows(&[a], 4).unwrap()).unwrap();
        let pb = project(&net, &Matrix::from_rows(&[b], 4).unwrap()).unwrap();
        assert_eq!(both.row(0), pa.row(0));
        assert_eq!(both.row(1), pb.row(0));
    }

    #[test]
    fn identical_views_align_perfectly() {
        let mut rng = rng_for(2, &[]);
        let mnet = new_mnet(4, 3, &mut rng).unwrap();
        let probe = new_probe(3, 2, &mut rng).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, -0.3, 0.4], vec![1.0, 0.0, 0.3, -0.2], vec![0.5, 0.5, 0.5, 0.1]], 4)
            .unwrap();
        let t = Targets { rows: &[0, 2], classes: &[1, 0] };
        let r = l_grad(&mnet, &probe, &x, &x, t).unwrap();
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn opposite_gradients_give_two() {
        // Zero input through an identity map into an identity probe gives
        // equal logits, so flipping the target negates every gradient entry.
        let mnet = DenseNet::identity(2);
        let probe = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Matrix::from_rows(&[vec![0.0, 0.0]], 2).unwrap();
        let g1 = class_gradient(&mnet, &probe, &x, Targets { rows: &[0], classes: &[0] }).unwrap();
        let g2 = class_gradient(&mnet, &probe, &x, Targets { rows: &[0], classes: &[1] }).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*a, -*b);
        }
        assert!((alignment(g1, g2).value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_targets_skip() {
        let mnet = DenseNet::identity(2);
        let probe = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = Matrix::from_rows(&[vec![1.0, 0.5]], 2).unwrap();
        let r = l_grad(&mnet, &probe, &x, &x, Targets { rows: &[], classes: &[] }).unwrap();
        assert!(r.skipped);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn zero_gradient_is_flagged() {
        let mnet = DenseNet::identity(2);
        let probe = linear(vec![0.0; 4], 2, 2);
        let x = Matrix::from_rows(&[vec![1.0, 0.5]], 2).unwrap();
        let r = l_grad(&mnet, &probe, &x, &x, Targets { rows: &[0], classes: &[0] }).unwrap();
        assert!(r.zero_norm);
        assert_eq!(r.cos, 0.0);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn unsup_closed_forms() {
        let tau = DEFAULT_TAU;
        let wp = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let l = l_unsup(&EmbeddingPairBatch::new(wp.clone(), wp).unwrap(), tau).unwrap();
        let e = (1.0 / tau).exp();
        let expect = -(e / (e + 2.0)).ln();
        assert!((l.value - expect).abs() < 1e-10, "{} vs {expect}", l.value);

        let same = Matrix::from_rows(&vec![vec![0.3, 0.4]; 3], 2).unwrap();
        let l = l_unsup(&EmbeddingPairBatch::new(same.clone(), same).unwrap(), tau).unwrap();
        assert!((l.value - 5f64.ln()).abs() < 1e-10);

        let one = Matrix::from_rows(&[vec![0.3, 0.4]], 2).unwrap();
        assert!(l_unsup(&EmbeddingPairBatch::new(one.clone(), one).unwrap(), tau).unwrap().skipped);
    }

    #[test]
    fn sc_composition() {
        let s = sc_from_parts(0.4, false, 1.2, false, 0.1);
        assert!((s.value - 0.52).abs() < 1e-12);
        assert_eq!(sc_from_parts(0.4, false, 1.2, false, 0.0).value, 0.4);
        let both = sc_from_parts(0.0, true, 0.0, true, 0.1);
        assert_eq!(both.value, 0.0);
        assert!(both.grad_skipped && both.unsup_skipped);
    }

    #[test]
    fn l_grad_gradient_matches_differences() {
        use crate::nn::{grad_check, GradCheckOptions};
        let mut rng = rng_for(3, &[]);
        let mut ext = DenseNet::new(&[LayerSpec::new(4, 4, Activation::Identity, false)], &mut rng).unwrap();
        let mut mnet = new_mnet(4, 3, &mut rng).unwrap();
        let probe = new_probe(3, 2, &mut rng).unwrap();
        let xa = Matrix::from_rows(&[vec![0.1, 0.9, -0.3, 0.4], vec![1.0, 0.0, 0.3, -0.2], vec![0.5, -0.5, 0.5, 0.1]], 4)
            .unwrap();
        let xb = xa.map(|v| v * v - 0.3 * v);
        let t = Targets { rows: &[0, 2], classes: &[1, 0] };
        let r = l_grad_backward(Some(&mut ext), &mut mnet, &probe, &xa, &xb, t, 1.0).unwrap();
        assert!(r.value > 1e-4, "{}", r.value);
        let opts = GradCheckOptions::default();
        let m0 = mnet.clone();
        let rep = grad_check(mnet.params(), &opts, |p| {
            let m = DenseNet::from_params(m0.specs(), p.clone())?;
            Ok(l_grad_through(&ext, &m, &probe, &xa, &xb, t)?.value)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        let e0 = ext.clone();
        let rep = grad_check(ext.params(), &opts, |p| {
            let e = DenseNet::from_params(e0.specs(), p.clone())?;
            Ok(l_grad_through(&e, &mnet, &probe, &xa, &xb, t)?.value)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn unsup_gradient_matches_differences() {
        let wp = Matrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![0.1, 0.8, -0.4], vec![-0.6, 0.2, 0.3]], 3).unwrap();
        let st = Matrix::from_rows(&[vec![0.2, -0.1, 1.0], vec![0.4, 0.5, -0.1], vec![-0.9, 0.4, 0.1]], 3).unwrap();
        let tau = 0.5;
        let l = l_unsup(&EmbeddingPairBatch::new(wp.clone(), st.clone()).unwrap(), tau).unwrap();
        let h = 1e-6;
        for (which, base, grad) in [(0, &wp, &l.d_weak_prime), (1, &st, &l.d_strong)] {
            for k in 0..9 {
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m.as_mut_slice()[k] += delta;
                    let b = if which == 0 {
                        EmbeddingPairBatch::new(m, st.clone())
                    } else {
                        EmbeddingPairBatch::new(wp.clone(), m)
                    };
                    l_unsup(&b.unwrap(), tau).unwrap().value
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - grad.as_slice()[k]).abs() < 1e-7, "{which} {k}: {fd} vs {}", grad.as_slice()[k]);
            }
        }
    }
}
