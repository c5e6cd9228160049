//! Finite-difference audit of every training loss at random points.
//!
//! Each loss is checked against central differences of its own value.
//! Points that sit within a small margin of a non-smooth region (a relu
//! kink, the smooth-L1 transition, a tie in the hard/easy ranking, an
//! embedding at the origin) are
//! redrawn, since a difference quotient straddling a kink measures nothing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::{l_grad_backward, l_grad_through, l_unsup, new_mnet, new_probe, EmbeddingPairBatch, Targets};
use crate::contrastive::{build_partitions, l_uscl, similarity, ContrastPartition};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mt::{backward_branch, filter_high_confidence, l_mt, run_branch_on_pooled, Detector, PseudoLabelSet};
use crate::nn::loss::{cross_entropy, smooth_l1};
use crate::nn::{grad_check, Activation, DenseNet, GradCheckOptions, GradCheckReport, LayerSpec, Matrix, Param, ParamSet};
use crate::rng::rng_for;
use crate::trainer::{objective, AdaptOptions, ContrastTargets, ObjectiveInputs, TrainConfig, Variant};

/// Distance from a non-smooth point below which a draw is rejected.
const KINK_MARGIN: f64 = 1e-3;
/// Cosine similarity is singular at the origin; embeddings shorter than
/// this make the difference quotient meaningless.
const MIN_NORM: f64 = 0.05;
const MAX_DRAWS_PER_POINT: usize = 50;
/// Biases feeding a normalized layer have an exactly zero gradient, and the
/// difference quotient there is pure roundoff (about 1e-10). Below this norm
/// a tensor is held to an absolute error of `tolerance · NORM_FLOOR`.
const NORM_FLOOR: f64 = 1e-4;

pub const LOSSES: [&str; 7] = ["cross-entropy", "smooth-l1", "consistency-kl", "grad-align", "info-nce", "uscl", "total"];

#[derive(Clone, Debug, PartialEq)]
pub struct LossAudit {
    pub loss: &'static str,
    pub points: usize,
    /// Draws rejected for sitting near a kink.
    pub redrawn: usize,
    pub max_rel_error: f64,
}

impl LossAudit {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Audits every loss in [`LOSSES`] at `points` random points each.
pub fn audit_all(points: usize, seed: u64) -> Result<Vec<LossAudit>> {
    LOSSES.iter().map(|&name| audit(name, points, seed)).collect()
}

pub fn audit(loss: &'static str, points: usize, seed: u64) -> Result<LossAudit> {
    let idx = LOSSES
        .iter()
        .position(|&l| l == loss)
        .ok_or_else(|| crate::error::config(format!("unknown loss {loss}")))?;
    let mut out = LossAudit { loss, points, redrawn: 0, max_rel_error: 0.0 };
    for p in 0..points {
        let mut rng = rng_for(seed, &[0x61756469, idx as u64, p as u64]);
        let mut report = None;
        for _ in 0..MAX_DRAWS_PER_POINT {
            let r = match idx {
                0 => cross_entropy_point(&mut rng)?,
                1 => smooth_l1_point(&mut rng)?,
                2 => consistency_point(&mut rng)?,
                3 => grad_align_point(&mut rng)?,
                4 => info_nce_point(&mut rng)?,
                5 => uscl_point(&mut rng)?,
                _ => total_point(&mut rng)?,
            };
            match r {
                Some(r) => {
                    report = Some(r);
                    break;
                }
                None => out.redrawn += 1,
            }
        }
        let report =
            report.ok_or_else(|| Error::Diagnostic(format!("{loss}: no smooth point after {MAX_DRAWS_PER_POINT} draws")))?;
        out.max_rel_error = out.max_rel_error.max(report.max_rel_error());
    }
    Ok(out)
}

fn opts(max_entries: Option<usize>, rng: &mut ChaCha8Rng) -> GradCheckOptions {
    GradCheckOptions { step: 1e-5, max_entries_per_tensor: max_entries, seed: rng.random(), norm_floor: NORM_FLOOR }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape matches data")
}

/// A single-tensor parameter set holding `m` and its gradient.
fn as_params(m: &Matrix, grad: &Matrix) -> Result<ParamSet> {
    let mut p = Param::new("x", m.shape(), m.as_slice().to_vec())?;
    p.grad = grad.as_slice().to_vec();
    let mut set = ParamSet::new();
    set.push(p)?;
    Ok(set)
}

fn matrix_of(p: &ParamSet) -> Result<Matrix> {
    let t = p.by_index(0);
    Matrix::from_vec(t.shape.0, t.shape.1, t.value.clone())
}

fn has_short_row(m: &Matrix) -> bool {
    m.iter_rows().any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() < MIN_NORM)
}

fn subset(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).collect();
    if rows.is_empty() {
        rows.push(rng.random_range(0..n));
    }
    rows
}

fn cross_entropy_point(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let (m, k) = (rng.random_range(2..8), rng.random_range(2..6));
    let logits = uniform(rng, m, k, 3.0);
    let rows = subset(rng, m);
    let targets: Vec<usize> = rows.iter().map(|_| rng.random_range(0..k)).collect();
    let (_, g) = cross_entropy(&logits, &rows, &targets);
    let o = opts(None, rng);
    grad_check(&as_params(&logits, &g)?, &o, |p| Ok(cross_entropy(&matrix_of(p)?, &rows, &targets).0)).map(Some)
}

fn smooth_l1_point(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let m = rng.random_range(2..8);
    let pred = uniform(rng, m, 4, 2.0);
    let rows = subset(rng, m);
    let targets: Vec<Vec<f64>> = rows.iter().map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let near_kink =
        rows.iter().zip(&targets).any(|(&r, t)| t.iter().enumerate().any(|(j, &tj)| ((pred[(r, j)] - tj).abs() - 1.0).abs() < KINK_MARGIN));
    if near_kink {
        return Ok(None);
    }
    let (_, g) = smooth_l1(&pred, &rows, &targets);
    let o = opts(None, rng);
    grad_check(&as_params(&pred, &g)?, &o, |p| Ok(smooth_l1(&matrix_of(p)?, &rows, &targets).0)).map(Some)
}

fn random_detector(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Result<Detector> {
    let mut det = Detector::new(d, k, rng)?;
    det.ext = DenseNet::new(&[LayerSpec::new(d, d, Activation::Identity, false)], rng)?;
    Ok(det)
}

fn random_boxes(rng: &mut ChaCha8Rng, m: usize) -> Result<Vec<BBox>> {
    (0..m)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
            BBox::new(x, y, x + rng.random_range(0.05..0.3), y + rng.random_range(0.05..0.3))
        })
        .collect()
}

/// Checks `value` against the gradients accumulated in every detector net.
fn check_detector<F>(det: &Detector, rng: &mut ChaCha8Rng, max_entries: Option<usize>, value: F) -> Result<GradCheckReport>
where
    F: Fn(&Detector) -> Result<f64>,
{
    let mut report = GradCheckReport { tensors: Vec::new() };
    for part in 0..3 {
        let net = det.nets()[part];
        let o = opts(max_entries, rng);
        report.merge(grad_check(net.params(), &o, |p| {
            let mut probe = det.clone();
            *probe.nets_mut()[part] = DenseNet::from_params(net.specs(), p.clone())?;
            value(&probe)
        })?);
    }
    Ok(report)
}

fn consistency_point(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let (d, k, m) = (6, rng.random_range(2..4), rng.random_range(2..7));
    let boxes = random_boxes(rng, m)?;
    let teacher = random_detector(rng, d, k)?;
    let mut student = random_detector(rng, d, k)?;
    let t_out = run_branch_on_pooled(&teacher, uniform(rng, m, d, 1.0), &boxes)?;
    let pooled = uniform(rng, m, d, 1.0);
    let none = PseudoLabelSet::default();
    let value = |det: &Detector| -> Result<f64> {
        let s = run_branch_on_pooled(det, pooled.clone(), &boxes)?;
        Ok(l_mt(&s, &none, &t_out)?.con)
    };
    student.zero_grad();
    let s_out = run_branch_on_pooled(&student, pooled.clone(), &boxes)?;
    let mt = l_mt(&s_out, &none, &t_out)?;
    backward_branch(&mut student, &s_out, &mt.d_logits, &mt.d_offsets, None)?;
    check_detector(&student, rng, None, value).map(Some)
}

fn grad_align_point(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let (d, e, k, m) = (5, 3, 2, rng.random_range(3..6));
    let mut ext = DenseNet::new(&[LayerSpec::new(d, d, Activation::Identity, false)], rng)?;
    let mut mnet = new_mnet(d, e, rng)?;
    let probe = new_probe(e, k, rng)?;
    let (xa, xb) = (uniform(rng, m, d, 1.0), uniform(rng, m, d, 1.0));
    for x in [&xa, &xb] {
        let f = ext.forward_traced(x)?.0;
        if mnet.forward_traced(&f)?.1.relu_margin(mnet.specs()) < KINK_MARGIN {
            return Ok(None);
        }
    }
    let rows = subset(rng, m);
    let classes: Vec<usize> = rows.iter().map(|_| rng.random_range(0..=k)).collect();
    let t = Targets { rows: &rows, classes: &classes };
    let r = l_grad_backward(Some(&mut ext), &mut mnet, &probe, &xa, &xb, t, 1.0)?;
    if r.zero_norm {
        return Ok(None);
    }
    let mut report = GradCheckReport { tensors: Vec::new() };
    let o = opts(Some(12), rng);
    report.merge(grad_check(mnet.params(), &o, |p| {
        let m = DenseNet::from_params(mnet.specs(), p.clone())?;
        Ok(l_grad_through(&ext, &m, &probe, &xa, &xb, t)?.value)
    })?);
    let o = opts(Some(12), rng);
    report.merge(grad_check(ext.params(), &o, |p| {
        let x = DenseNet::from_params(ext.specs(), p.clone())?;
        Ok(l_grad_through(&x, &mnet, &probe, &xa, &xb, t)?.value)
    })?);
    Ok(Some(report))
}

fn info_nce_point(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let (m, e) = (rng.random_range(2..6), rng.random_range(2..5));
    let tau = rng.random_range(0.07..1.0);
    let (wp, st) = (uniform(rng, m, e, 1.0), uniform(rng, m, e, 1.0));
    if has_short_row(&wp) || has_short_row(&st) {
        return Ok(None);
    }
    let l = l_unsup(&EmbeddingPairBatch::new(wp.clone(), st.clone())?, tau)?;
    let mut report = GradCheckReport { tensors: Vec::new() };
    let o = opts(None, rng);
    report.merge(grad_check(&as_params(&wp, &l.d_weak_prime)?, &o, |p| {
        Ok(l_unsup(&EmbeddingPairBatch::new(matrix_of(p)?, st.clone())?, tau)?.value)
    })?);
    let o = opts(None, rng);
    report.merge(grad_check(&as_params(&st, &l.d_strong)?, &o, |p| {
        Ok(l_unsup(&EmbeddingPairBatch::new(wp.clone(), matrix_of(p)?)?, tau)?.value)
    })?);
    Ok(Some(report))
}

/// Smallest gap between the similarity that closes an anchor's neighborhood
/// and the next one; hard/easy membership is constant while it is positive.
fn ranking_gap(embs: &Matrix, parts: &[ContrastPartition]) -> Result<f64> {
    let sim = similarity(embs)?;
    let mut gap = f64::INFINITY;
    for p in parts {
        let mut s: Vec<f64> = (0..embs.rows()).filter(|&j| j != p.anchor).map(|j| sim[(p.anchor, j)]).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let n = p.positives.len();
        if n > 0 && n < s.len() {
            gap = gap.min(s[n - 1] - s[n]);
        }
    }
    Ok(gap)
}

fn uscl_point(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let (n, e, k) = (rng.random_range(3..9), rng.random_range(2..5), rng.random_range(1..4));
    let embs = uniform(rng, n, e, 1.0);
    if has_short_row(&embs) {
        return Ok(None);
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..=k)).collect();
    let sigma = rng.random_range(0.0..40.0);
    let (lambda, tau) = (rng.random_range(0.0..=1.0), rng.random_range(0.07..1.0));
    let parts = build_partitions(&embs, &labels, k, sigma, 20.0)?;
    if parts.iter().all(|p| p.is_skipped()) {
        return Ok(None);
    }
    let l = l_uscl(&embs, &parts, lambda, tau)?;
    let o = opts(None, rng);
    // Partitions are held at their base-point value.
    grad_check(&as_params(&embs, &l.d_embs)?, &o, |p| Ok(l_uscl(&matrix_of(p)?, &parts, lambda, tau)?.value)).map(Some)
}

fn total_point(rng: &mut ChaCha8Rng) -> Result<Option<GradCheckReport>> {
    let (d, k, m) = (5, 2, rng.random_range(4..8));
    let cfg = TrainConfig { d_embed: 3, ..TrainConfig::default() };
    let o = AdaptOptions::new(Variant::Wsco);
    let boxes = random_boxes(rng, m)?;
    let teacher = random_detector(rng, d, k)?;
    let mut student = random_detector(rng, d, k)?;
    let mut mnet = new_mnet(d, cfg.d_embed, rng)?;
    let probe = new_probe(cfg.d_embed, k, rng)?;
    let t_out = run_branch_on_pooled(&teacher, uniform(rng, m, d, 1.0), &boxes)?;
    let strong_pooled = uniform(rng, m, d, 1.0);
    let mut scores: Vec<f64> = t_out.detections.iter().map(|d| d.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    let pseudo = filter_high_confidence(&t_out, scores[m / 2].clamp(1e-6, 1.0 - 1e-6))?;
    let contrast = ContrastTargets {
        labels: (0..m).map(|_| rng.random_range(0..=k)).collect(),
        sigma: rng.random_range(0.0..40.0),
    };
    let inputs = ObjectiveInputs { strong_pooled: &strong_pooled, teacher: &t_out, pseudo: &pseudo, contrast: Some(&contrast) };

    // Reject draws near a relu kink, a smooth-L1 transition or a ranking tie.
    let s_out = run_branch_on_pooled(&student, strong_pooled.clone(), &boxes)?;
    let wp_out = run_branch_on_pooled(&student, t_out.pooled.clone(), &boxes)?;
    let (z_s, ts) = mnet.forward_traced(&s_out.instance_features)?;
    let (z_wp, tw) = mnet.forward_traced(&wp_out.instance_features)?;
    if has_short_row(&z_s) || has_short_row(&z_wp) {
        return Ok(None);
    }
    if [&ts, &tw].iter().any(|t| t.relu_margin(mnet.specs()) < KINK_MARGIN) {
        return Ok(None);
    }
    let near_transition = pseudo.indices.iter().zip(&pseudo.box_targets).any(|(&r, t)| {
        t.iter().enumerate().any(|(j, &tj)| ((s_out.offsets[(r, j)] - tj).abs() - 1.0).abs() < KINK_MARGIN)
    });
    let parts = build_partitions(&z_s, &contrast.labels, k, contrast.sigma, cfg.u)?;
    if near_transition || ranking_gap(&z_s, &parts)? < KINK_MARGIN {
        return Ok(None);
    }

    student.zero_grad();
    mnet.params_mut().zero_grad();
    let base = objective(&cfg, o, &mut student, &mut mnet, &probe, &inputs)?.partitions;
    let flipped = std::cell::Cell::new(false);
    let value = |det: &Detector, mn: &DenseNet| -> Result<f64> {
        let (mut det, mut mn) = (det.clone(), mn.clone());
        let obj = objective(&cfg, o, &mut det, &mut mn, &probe, &inputs)?;
        if obj.partitions != base {
            flipped.set(true);
        }
        Ok(obj.losses.total)
    };
    let mut report = check_detector(&student, rng, Some(10), |det| value(det, &mnet))?;
    let go = opts(Some(10), rng);
    report.merge(grad_check(mnet.params(), &go, |p| value(&student, &DenseNet::from_params(mnet.specs(), p.clone())?))?);
    Ok((!flipped.get()).then_some(report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_at_a_few_points() {
        for a in audit_all(3, 9).unwrap() {
            assert!(a.passes(1e-4), "{a:?}");
        }
    }

    #[test]
    fn unknown_loss_is_rejected() {
        assert!(audit("hinge", 1, 0).is_err());
    }
}
