use super::TrainConfig;
use crate::error::Result;
use crate::geometry::{match_detections, mean_average_precision, nms_per_class, Counts, Detection, ImageResult, MatchCounts};
use crate::mt::{run_branch, Detector};
use crate::rng::derive_seed;
use crate::synth::{teacher_proposals, Scenario};

pub(super) const EVAL_STREAM: u64 = 2;

/// Counts at the count threshold and mAP over detections above the mAP floor.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub counts: MatchCounts,
    pub total: Counts,
    pub map: f64,
}

/// Per-class NMS followed by a score floor.
pub fn postprocess(dets: &[Detection], nms_iou: f64, min_score: f64) -> Vec<Detection> {
    nms_per_class(dets, nms_iou).into_iter().filter(|d| d.score >= min_score).collect()
}

/// Runs `det` over each scenario's proposals (seeded per run, identical across
/// epochs) and scores the post-processed detections at IoU 0.5.
pub fn evaluate(det: &Detector, scenarios: &[Scenario], cfg: &TrainConfig) -> Result<EvalReport> {
    let seed = derive_seed(cfg.seed, &[EVAL_STREAM]);
    let mut counts = MatchCounts::default();
    let mut results = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        let boxes: Vec<_> = teacher_proposals(s, &cfg.proposals, seed).into_iter().map(|d| d.bbox).collect();
        let out = run_branch(det, s, &boxes, cfg.max_proposals)?;
        let kept = postprocess(&out.detections, cfg.nms_iou, cfg.map_min_score);
        let gts = s.ground_truth();
        let counted: Vec<Detection> = kept.iter().filter(|d| d.score >= cfg.count_threshold).cloned().collect();
        counts.merge(&match_detections(&counted, &gts, 0.5));
        results.push(ImageResult { detections: kept, ground_truth: gts });
    }
    let map = mean_average_precision(&results, 0.5)?.map;
    let total = counts.total();
    Ok(EvalReport { counts, total, map })
}
