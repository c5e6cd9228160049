use rand::seq::SliceRandom;

use super::eval::evaluate;
use super::TrainConfig;
use crate::error::{config, Result};
use crate::geometry::iou;
use crate::mt::{backward_branch, encode_offsets, run_branch, Detector};
use crate::nn::loss::{cross_entropy, smooth_l1};
use crate::nn::Sgd;
use crate::rng::{derive_seed, rng_for};
use crate::synth::{teacher_proposals, Scenario};

const PRETRAIN_STREAM: u64 = 5;
/// Proposals overlapping a ground-truth box at least this much inherit its class.
pub const FOREGROUND_IOU: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub detector: Detector,
    pub epochs: usize,
    pub source_map: f64,
    pub reached_floor: bool,
    /// Mean supervised loss per epoch.
    pub losses: Vec<f64>,
}

/// Supervised training on labeled source scenarios: cross-entropy over every
/// proposal (background when no ground truth overlaps by 0.5) plus smooth-L1
/// box regression on foreground proposals. Stops once the minimum epoch count
/// is done and the source mAP has reached the configured floor, or after the
/// maximum number of epochs.
pub fn pretrain_source(cfg: &TrainConfig, source: &[Scenario]) -> Result<PretrainReport> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(config("pre-training needs at least one source scenario"));
    }
    let k = cfg.synth.classes;
    let mut det = Detector::new(cfg.synth.d_feat, k, &mut rng_for(cfg.seed, &[PRETRAIN_STREAM, u64::MAX]))?;
    let mut opts: Vec<Sgd> = (0..3).map(|_| Sgd::new(cfg.pretrain_lr, cfg.momentum)).collect::<Result<_>>()?;
    let mut losses = Vec::new();
    let mut source_map = 0.0;
    let mut reached = false;
    let mut epochs = 0;
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[PRETRAIN_STREAM, epoch as u64]));
        let mut total = 0.0;
        for (it, &idx) in order.iter().enumerate() {
            let s = &source[idx];
            let seed = derive_seed(cfg.seed, &[PRETRAIN_STREAM, epoch as u64, it as u64]);
            let boxes: Vec<_> = teacher_proposals(s, &cfg.proposals, seed).into_iter().map(|d| d.bbox).collect();
            let out = run_branch(&det, s, &boxes, cfg.max_proposals)?;
            let rows: Vec<usize> = (0..boxes.len()).collect();
            let mut classes = Vec::with_capacity(boxes.len());
            let (mut fg_rows, mut fg_targets) = (Vec::new(), Vec::new());
            for (r, b) in boxes.iter().enumerate() {
                let best = s
                    .instances
                    .iter()
                    .map(|i| (iou(b, &i.bbox), i))
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                match best {
                    Some((o, inst)) if o >= FOREGROUND_IOU => {
                        classes.push(inst.class_id);
                        fg_rows.push(r);
                        fg_targets.push(encode_offsets(b, &inst.bbox));
                    }
                    _ => classes.push(k),
                }
            }
            let (l_cls, d_logits) = cross_entropy(&out.logits, &rows, &classes);
            let (l_box, d_offsets) = smooth_l1(&out.offsets, &fg_rows, &fg_targets);
            total += l_cls + l_box;
            backward_branch(&mut det, &out, &d_logits, &d_offsets, None)?;
            for (net, opt) in det.nets_mut().into_iter().zip(opts.iter_mut()) {
                opt.step(net.params_mut())?;
            }
        }
        losses.push(total / source.len() as f64);
        epochs = epoch + 1;
        source_map = evaluate(&det, source, cfg)?.map;
        reached = source_map >= cfg.pretrain_map_floor;
        if reached && epochs >= cfg.pretrain_min_epochs {
            break;
        }
    }
    Ok(PretrainReport { detector: det, epochs, source_map, reached_floor: reached, losses })
}
