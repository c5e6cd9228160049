//! Boxes, IoU, non-maximum suppression, greedy TP/FP matching, all-point
//! mAP and FP-Gain.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Axis-aligned box with `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(config(format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Builds a box from possibly unordered coordinates, enforcing a minimum
    /// side length so the result is always valid.
    pub fn from_coords_clamped(c: [f64; 4], min_side: f64) -> Self {
        let (mut x1, mut x2) = (c[0].min(c[2]), c[0].max(c[2]));
        let (mut y1, mut y2) = (c[1].min(c[3]), c[1].max(c[3]));
        if x2 - x1 < min_side {
            let m = 0.5 * (x1 + x2);
            x1 = m - 0.5 * min_side;
            x2 = m + 0.5 * min_side;
        }
        if y2 - y1 < min_side {
            let m = 0.5 * (y1 + y2);
            y1 = m - 0.5 * min_side;
            y2 = m + 0.5 * min_side;
        }
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    /// Distribution over `K` foreground classes followed by background.
    pub class_dist: Vec<f64>,
}

impl Detection {
    /// Derives class and score from the distribution: the argmax and maximum
    /// over the foreground entries (ties to the lower class).
    pub fn from_distribution(bbox: BBox, class_dist: Vec<f64>) -> Result<Self> {
        if class_dist.len() < 2 {
            return Err(config("class distribution needs at least one foreground class and background"));
        }
        let sum: f64 = class_dist.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || class_dist.iter().any(|p| !(0.0..=1.0 + 1e-12).contains(p)) {
            return Err(Error::Computation(format!("class distribution sums to {sum}")));
        }
        let k = class_dist.len() - 1;
        let (class_id, score) = argmax(&class_dist[..k]);
        Ok(Self { bbox, class_id, score, class_dist })
    }

    /// A detection that only carries a box and a score (e.g. a raw proposal).
    pub fn scored(bbox: BBox, class_id: usize, score: f64) -> Self {
        Self { bbox, class_id, score, class_dist: Vec::new() }
    }

    pub fn background_prob(&self) -> f64 {
        self.class_dist.last().copied().unwrap_or(0.0)
    }
}

fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Indices of boxes kept by greedy NMS, in descending-score order. A box is
/// suppressed when its IoU with an already kept box exceeds `threshold`.
/// Equal scores keep insertion order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Class-agnostic greedy NMS over detections.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, threshold).into_iter().map(|i| dets[i].clone()).collect()
}

/// Greedy NMS run independently within each predicted class.
pub fn nms_per_class(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut by_class: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for d in dets {
        by_class.entry(d.class_id).or_default().push(d.clone());
    }
    by_class.values().flat_map(|v| nms(v, threshold)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Per-class and aggregate match counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchCounts {
    pub per_class: BTreeMap<usize, Counts>,
}

impl MatchCounts {
    pub fn total(&self) -> Counts {
        let mut t = Counts::default();
        for c in self.per_class.values() {
            t += *c;
        }
        t
    }

    pub fn merge(&mut self, other: &MatchCounts) {
        for (k, c) in &other.per_class {
            *self.per_class.entry(*k).or_default() += *c;
        }
    }
}

impl fmt::Display for MatchCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.total();
        write!(f, "tp={} fp={} fn={}", t.tp, t.fp, t.fn_)
    }
}

/// Outcome of matching one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatch {
    /// `true` for detections matched to a ground truth, aligned with input order.
    pub is_tp: Vec<bool>,
    pub counts: MatchCounts,
}

/// Per class, detections in descending score order each claim the
/// highest-IoU unmatched ground truth of their class with IoU ≥ `iou_thr`
/// (TP) or count as FP; leftover ground truths are FN.
pub fn match_image(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> ImageMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut matched = vec![false; gts.len()];
    let mut is_tp = vec![false; dets.len()];
    let mut counts = MatchCounts::default();
    for g in gts {
        counts.per_class.entry(g.class_id).or_default();
    }
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] || g.class_id != d.class_id {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let c = counts.per_class.entry(d.class_id).or_default();
        match best {
            Some((j, _)) => {
                matched[j] = true;
                is_tp[i] = true;
                c.tp += 1;
            }
            None => c.fp += 1,
        }
    }
    for (j, g) in gts.iter().enumerate() {
        if !matched[j] {
            counts.per_class.entry(g.class_id).or_default().fn_ += 1;
        }
    }
    ImageMatch { is_tp, counts }
}

pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> MatchCounts {
    match_image(dets, gts, iou_thr).counts
}

/// One image's detections with its ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// All-point interpolated AP from score-ranked TP flags: area under the
/// precision envelope of the exact PR staircase.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(ranked_tp.len());
    for (k, &hit) in ranked_tp.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        if r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = r;
        }
    }
    ap
}

/// Per-class AP and their mean over classes that have ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub per_class: BTreeMap<usize, f64>,
    pub map: f64,
}

pub fn mean_average_precision(results: &[ImageResult], iou_thr: f64) -> Result<MapReport> {
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for r in results {
        for g in &r.ground_truth {
            *gt_count.entry(g.class_id).or_default() += 1;
        }
    }
    if gt_count.is_empty() {
        return Err(Error::Computation("mAP is undefined without ground truth".into()));
    }
    let mut ranked: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for r in results {
        let m = match_image(&r.detections, &r.ground_truth, iou_thr);
        for (d, &tp) in r.detections.iter().zip(&m.is_tp) {
            ranked.entry(d.class_id).or_default().push((d.score, tp));
        }
    }
    let mut per_class = BTreeMap::new();
    for (&c, &n) in &gt_count {
        let mut list = ranked.remove(&c).unwrap_or_default();
        list.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = list.into_iter().map(|(_, t)| t).collect();
        per_class.insert(c, average_precision(&flags, n));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(MapReport { per_class, map })
}

/// `ΔTP / ΔFP` against the source model's counts. No change at all gives 0;
/// a TP change with no FP change gives a signed infinity.
pub fn fp_gain(source: &Counts, epoch: &Counts) -> f64 {
    let d_tp = epoch.tp as f64 - source.tp as f64;
    let d_fp = epoch.fp as f64 - source.fp as f64;
    if d_fp == 0.0 {
        if d_tp == 0.0 {
            0.0
        } else {
            d_tp.signum() * f64::INFINITY
        }
    } else {
        d_tp / d_fp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bx: BBox, class_id: usize, score: f64) -> Detection {
        Detection::scored(bx, class_id, score)
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn nms_examples() {
        let one = vec![det(b(0.0, 0.0, 1.0, 1.0), 0, 0.3)];
        assert_eq!(nms(&one, 0.5), one);
        let a = b(0.0, 0.0, 1.0, 1.0);
        let kept = nms(&[det(a, 0, 0.8), det(a, 0, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let far = vec![det(a, 0, 0.8), det(b(5.0, 5.0, 6.0, 6.0), 0, 0.9)];
        for phi in [0.0, 0.5, 1.0] {
            assert_eq!(nms(&far, phi).len(), 2);
        }
    }

    #[test]
    fn nms_ties_keep_lower_index() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        let boxes = [a, a];
        assert_eq!(nms_indices(&boxes, &[0.5, 0.5], 0.5), vec![0]);
    }

    #[test]
    fn matching_examples() {
        let g = GroundTruth { bbox: b(0.0, 0.0, 1.0, 1.0), class_id: 0 };
        let c = match_detections(&[], &[g, g], 0.5).total();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 2));
        let c = match_detections(&[det(g.bbox, 0, 0.7)], &[g], 0.5).total();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 0));
        let c = match_detections(&[det(g.bbox, 0, 0.9), det(b(0.0, 0.0, 1.0, 0.9), 0, 0.8)], &[g], 0.5).total();
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 0));
        // Wrong class never matches.
        let c = match_detections(&[det(g.bbox, 1, 0.9)], &[g], 0.5).total();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
    }

    #[test]
    fn ap_hand_example() {
        // Ranked TP, FP, TP over two ground truths.
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn map_perfect_and_empty() {
        let g = GroundTruth { bbox: b(0.0, 0.0, 1.0, 1.0), class_id: 1 };
        let perfect = ImageResult { detections: vec![det(g.bbox, 1, 0.9)], ground_truth: vec![g] };
        assert_eq!(mean_average_precision(&[perfect], 0.5).unwrap().map, 1.0);
        let none = ImageResult { detections: vec![], ground_truth: vec![g] };
        assert_eq!(mean_average_precision(&[none], 0.5).unwrap().map, 0.0);
        assert!(mean_average_precision(&[ImageResult::default()], 0.5).is_err());
    }

    #[test]
    fn fp_gain_cases() {
        let s = Counts { tp: 10, fp: 5, fn_: 3 };
        assert_eq!(fp_gain(&s, &s), 0.0);
        assert_eq!(fp_gain(&s, &Counts { tp: 20, fp: 10, fn_: 0 }), 2.0);
        assert_eq!(fp_gain(&s, &Counts { tp: 13, fp: 5, fn_: 0 }), f64::INFINITY);
        assert_eq!(fp_gain(&s, &Counts { tp: 7, fp: 5, fn_: 0 }), f64::NEG_INFINITY);
    }

    #[test]
    fn detection_from_distribution_picks_foreground_argmax() {
        let d = Detection::from_distribution(b(0.0, 0.0, 1.0, 1.0), vec![0.1, 0.3, 0.6]).unwrap();
        assert_eq!((d.class_id, d.score), (1, 0.3));
        assert!(Detection::from_distribution(b(0.0, 0.0, 1.0, 1.0), vec![0.5, 0.6]).is_err());
    }
}
