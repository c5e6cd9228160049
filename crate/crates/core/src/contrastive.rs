//! Uncertainty-aware contrastive learning on strong instance embeddings:
//! hard/easy positive partition, proposal-count uncertainty, adaptive
//! negative selection, the two-term loss and the hard-to-easy ratio.

use std::collections::BTreeSet;

use crate::error::{config, Result};
use crate::geometry::{nms, Detection};
use crate::nn::cosine::{normalize_rows, normalize_rows_backward};
use crate::nn::scalar::log_sum_exp;
use crate::nn::Matrix;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_UNCERTAINTY_THRESHOLD: f64 = 20.0;
pub const DEFAULT_NMS_LEVELS: usize = 9;

/// Index sets for one anchor, all into the strong embedding rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContrastPartition {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub hard: Vec<usize>,
    pub easy: Vec<usize>,
    pub complement: Vec<usize>,
    pub background: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl ContrastPartition {
    /// The anchor contributes nothing to the loss.
    pub fn is_skipped(&self) -> bool {
        self.positives.is_empty() || self.negatives.is_empty()
    }
}

/// Cosine similarity matrix of the rows.
pub fn similarity(embs: &Matrix) -> Result<Matrix> {
    let (u, _) = normalize_rows(embs);
    u.matmul_t(&u)
}

/// Positives of `anchor` split by whether they fall among its `|positives|`
/// most similar other embeddings (ties to the lower index).
pub fn split_hard_easy(anchor: usize, sim: &Matrix, labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let positives: Vec<usize> = (0..n).filter(|&j| j != anchor && labels[j] == labels[anchor]).collect();
    if positives.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let mut others: Vec<usize> = (0..n).filter(|&j| j != anchor).collect();
    others.sort_by(|&a, &b| sim[(anchor, b)].total_cmp(&sim[(anchor, a)]).then(a.cmp(&b)));
    let hood: BTreeSet<usize> = others.into_iter().take(positives.len()).collect();
    positives.into_iter().partition(|j| !hood.contains(j))
}

/// Variance of the number of proposals kept by NMS across thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageUncertainty {
    pub sigma: f64,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// No proposals were given.
    pub empty: bool,
}

/// Runs NMS at `0.1·h` for `h = 1..=levels` and returns the population
/// variance of the kept counts.
pub fn image_uncertainty(proposals: &[Detection], levels: usize) -> Result<ImageUncertainty> {
    if levels < 2 {
        return Err(config("uncertainty needs at least two NMS thresholds"));
    }
    if proposals.is_empty() {
        return Ok(ImageUncertainty { sigma: 0.0, counts: vec![0; levels], mean: 0.0, empty: true });
    }
    let counts: Vec<usize> = (1..=levels).map(|h| nms(proposals, 0.1 * h as f64).len()).collect();
    let mean = counts.iter().sum::<usize>() as f64 / levels as f64;
    let sigma = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / levels as f64;
    Ok(ImageUncertainty { sigma, counts, mean, empty: false })
}

/// The complement, minus background-labeled rows when `sigma > u`.
pub fn select_negatives(partition: &ContrastPartition, sigma: f64, u: f64) -> Vec<usize> {
    if sigma > u {
        partition.complement.iter().copied().filter(|j| !partition.background.contains(j)).collect()
    } else {
        partition.complement.clone()
    }
}

/// Partitions for every anchor with a foreground label. `labels` use
/// `background` as the background index.
pub fn build_partitions(
    embs: &Matrix,
    labels: &[usize],
    background: usize,
    sigma: f64,
    u: f64,
) -> Result<Vec<ContrastPartition>> {
    if labels.len() != embs.rows() {
        return Err(config("one label per embedding required"));
    }
    let sim = similarity(embs)?;
    let n = labels.len();
    let mut out = Vec::new();
    for i in 0..n {
        if labels[i] == background {
            continue;
        }
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let (hard, easy) = split_hard_easy(i, &sim, labels);
        let complement: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
        let bg: Vec<usize> = complement.iter().copied().filter(|&j| labels[j] == background).collect();
        let mut p = ContrastPartition {
            anchor: i,
            positives,
            hard,
            easy,
            complement,
            background: bg,
            negatives: Vec::new(),
        };
        p.negatives = select_negatives(&p, sigma, u);
        out.push(p);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsclLoss {
    pub value: f64,
    /// Gradient with respect to the raw embeddings.
    pub d_embs: Matrix,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
}

/// Per anchor, `−(λ/|hard|)·Σ log softmax` over hard positives plus the same
/// with `1 − λ` over easy positives. Each softmax compares the positive's
/// logit against the anchor's negatives; logits are cosine / `tau`. Summed
/// over anchors.
pub fn l_uscl(embs: &Matrix, partitions: &[ContrastPartition], lambda: f64, tau: f64) -> Result<UsclLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(config(format!("hard-positive weight {lambda} outside [0, 1]")));
    }
    if !(tau > 0.0) {
        return Err(config(format!("temperature {tau} must be positive")));
    }
    let n = embs.rows();
    let (u, norms) = normalize_rows(embs);
    let sim = u.matmul_t(&u)?;
    let mut g: Matrix = Matrix::zeros(n, n);
    let mut value = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for p in partitions {
        if p.is_skipped() {
            skipped += 1;
            continue;
        }
        used += 1;
        let i = p.anchor;
        let neg_logits: Vec<f64> = p.negatives.iter().map(|&k| sim[(i, k)] / tau).collect();
        let lse = log_sum_exp(&neg_logits);
        let soft: Vec<f64> = neg_logits.iter().map(|l| (l - lse).exp()).collect();
        for (set, weight) in [(&p.hard, lambda), (&p.easy, 1.0 - lambda)] {
            if set.is_empty() || weight == 0.0 {
                continue;
            }
            let w = weight / set.len() as f64;
            for &j in set {
                value -= w * (sim[(i, j)] / tau - lse);
                g[(i, j)] -= w / tau;
                for (&k, &s) in p.negatives.iter().zip(&soft) {
                    g[(i, k)] += w * s / tau;
                }
            }
        }
    }
    let mut sym = Matrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            sym[(a, b)] = g[(a, b)] + g[(b, a)];
        }
    }
    let du = sym.matmul(&u)?;
    let d_embs = normalize_rows_backward(&u, &norms, &du);
    Ok(UsclLoss { value, d_embs, anchors_used: used, anchors_skipped: skipped })
}

/// `|hard| / |easy|` per anchor with a 0.1-wide histogram.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeRatio {
    pub ratios: Vec<(usize, f64)>,
    /// Anchors with positives but no easy ones.
    pub zero_denominator: Vec<usize>,
    /// `(bin lower edge, count)`.
    pub histogram: Vec<(f64, usize)>,
}

impl HeRatio {
    pub fn mean(&self) -> f64 {
        if self.ratios.is_empty() {
            return 0.0;
        }
        self.ratios.iter().map(|r| r.1).sum::<f64>() / self.ratios.len() as f64
    }

    /// Adds another batch of ratios and rebuilds the histogram.
    pub fn merge(&mut self, other: &HeRatio) {
        self.ratios.extend_from_slice(&other.ratios);
        self.zero_denominator.extend_from_slice(&other.zero_denominator);
        self.histogram = histogram(&self.ratios);
    }
}

pub const HISTOGRAM_BIN: f64 = 0.1;

fn histogram(ratios: &[(usize, f64)]) -> Vec<(f64, usize)> {
    let bin = |r: f64| ((r / HISTOGRAM_BIN) + 1e-9).floor() as usize;
    let Some(top) = ratios.iter().map(|r| bin(r.1)).max() else { return Vec::new() };
    let mut counts = vec![0; top + 1];
    for r in ratios {
        counts[bin(r.1)] += 1;
    }
    counts.into_iter().enumerate().map(|(b, c)| (b as f64 * HISTOGRAM_BIN, c)).collect()
}

pub fn he_ratio_score(partitions: &[ContrastPartition]) -> HeRatio {
    let mut out = HeRatio::default();
    for p in partitions.iter().filter(|p| !p.positives.is_empty()) {
        if p.easy.is_empty() {
            out.zero_denominator.push(p.anchor);
        } else {
            out.ratios.push((p.anchor, p.hard.len() as f64 / p.easy.len() as f64));
        }
    }
    out.histogram = histogram(&out.ratios);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn embs(rows: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), 2).unwrap()
    }

    #[test]
    fn nearest_positives_are_easy() {
        let z = embs(&[[1.0, 0.0], [0.99, 0.1], [0.95, 0.3], [-1.0, 0.0], [0.0, -1.0]]);
        let sim = similarity(&z).unwrap();
        let (hard, easy) = split_hard_easy(0, &sim, &[0, 0, 0, 1, 1]);
        assert!(hard.is_empty());
        assert_eq!(easy, vec![1, 2]);
        let (hard, easy) = split_hard_easy(0, &sim, &[0, 1, 1, 0, 0]);
        assert_eq!(hard, vec![3, 4]);
        assert!(easy.is_empty());
        assert_eq!(split_hard_easy(0, &sim, &[0, 1, 1, 1, 1]), (vec![], vec![]));
    }

    #[test]
    fn disjoint_proposals_have_no_uncertainty() {
        let dets: Vec<Detection> = (0..4)
            .map(|i| Detection::scored(BBox::new(0.2 * i as f64, 0.0, 0.2 * i as f64 + 0.1, 0.1).unwrap(), 0, 0.5))
            .collect();
        let u = image_uncertainty(&dets, DEFAULT_NMS_LEVELS).unwrap();
        assert_eq!(u.sigma, 0.0);
        assert_eq!(u.counts, vec![4; 9]);
        assert!(image_uncertainty(&[], 9).unwrap().empty);
        assert!(image_uncertainty(&dets, 1).is_err());
    }

    #[test]
    fn negatives_drop_background_only_when_uncertain() {
        let p = ContrastPartition { complement: vec![1, 2, 3], background: vec![2, 3], ..Default::default() };
        assert_eq!(select_negatives(&p, 0.0, 20.0), vec![1, 2, 3]);
        assert_eq!(select_negatives(&p, 25.0, 20.0), vec![1]);
        let all_bg = ContrastPartition { complement: vec![2, 3], background: vec![2, 3], ..Default::default() };
        assert!(select_negatives(&all_bg, 25.0, 20.0).is_empty());
    }

    #[test]
    fn uscl_matches_direct_sum() {
        // Anchor 0 with hard positive 1, easy positive 2, negatives 3 and 4.
        let z = embs(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8], [-1.0, 0.0], [0.8, -0.6]]);
        let p = ContrastPartition {
            anchor: 0,
            positives: vec![1, 2],
            hard: vec![1],
            easy: vec![2],
            complement: vec![3, 4],
            background: vec![],
            negatives: vec![3, 4],
        };
        let (lambda, tau) = (0.5, 0.07);
        let l = l_uscl(&z, std::slice::from_ref(&p), lambda, tau).unwrap();
        let denom = (-1.0f64 / tau).exp() + (0.8f64 / tau).exp();
        let expect = -lambda * ((0.0f64 / tau).exp() / denom).ln() - (1.0 - lambda) * ((0.6f64 / tau).exp() / denom).ln();
        assert!((l.value - expect).abs() < 1e-10, "{} vs {expect}", l.value);
        let only_hard = l_uscl(&z, std::slice::from_ref(&p), 1.0, tau).unwrap();
        assert!((only_hard.value + ((0.0f64 / tau).exp() / denom).ln()).abs() < 1e-10);
    }

    #[test]
    fn he_ratio_examples() {
        let mk = |h: usize, e: usize| ContrastPartition {
            positives: (0..h + e).collect(),
            hard: (0..h).collect(),
            easy: (h..h + e).collect(),
            ..Default::default()
        };
        let r = he_ratio_score(&[mk(2, 2), mk(0, 3), mk(3, 2), mk(2, 0)]);
        let vals: Vec<f64> = r.ratios.iter().map(|x| x.1).collect();
        assert_eq!(vals, vec![1.0, 0.0, 1.5]);
        assert_eq!(r.zero_denominator.len(), 1);
        assert_eq!(r.histogram.len(), 16);
        assert_eq!(r.histogram[10], (1.0, 1));
        assert_eq!(r.histogram[15].1, 1);
    }
}
