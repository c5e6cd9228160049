//! Teacher region proposals: jittered boxes around objects and clutter plus
//! random background boxes, ranked by a synthetic objectness score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{random_box, Scenario, MIN_SIDE};
use crate::error::{config, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::rng::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub per_object: usize,
    pub per_clutter: usize,
    pub background: usize,
    /// Capacity `M`: at most this many proposals (highest scores) are kept.
    pub max: usize,
    /// Jitter per coordinate as a fraction of the box side.
    pub jitter: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { per_object: 6, per_clutter: 3, background: 8, max: 300, jitter: 0.15 }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max == 0 {
            return Err(config("proposal capacity must be positive"));
        }
        if self.per_object == 0 {
            return Err(config("need at least one proposal per object"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(config("proposal jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

fn jitter_box<R: Rng + ?Sized>(b: &BBox, frac: f64, rng: &mut R) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = || if frac > 0.0 { rng.random_range(-frac..=frac) } else { 0.0 };
    let c = [b.x1() + d() * w, b.y1() + d() * h, b.x2() + d() * w, b.y2() + d() * h];
    BBox::from_coords_clamped(c.map(|v| v.clamp(0.0, 1.0)), MIN_SIDE)
}

/// Class-agnostic proposals for one image. The first proposal of each object
/// is its exact box. Background boxes have IoU < 0.3 with every object.
pub fn teacher_proposals(s: &Scenario, cfg: &ProposalConfig, seed: u64) -> Vec<Detection> {
    let mut rng = rng_for(seed, &[s.image_id, 0x7072]);
    let mut out = Vec::new();
    for inst in &s.instances {
        for k in 0..cfg.per_object {
            let b = if k == 0 { inst.bbox } else { jitter_box(&inst.bbox, cfg.jitter, &mut rng) };
            let score = (0.4 + 0.6 * iou(&b, &inst.bbox) * rng.random_range(0.8..=1.0)).min(1.0);
            out.push(Detection::scored(b, 0, score));
        }
    }
    for c in &s.clutter {
        for _ in 0..cfg.per_clutter {
            let b = jitter_box(&c.bbox, cfg.jitter, &mut rng);
            out.push(Detection::scored(b, 0, rng.random_range(0.2..0.6)));
        }
    }
    let mut placed = 0;
    for _ in 0..cfg.background * 20 {
        if placed == cfg.background {
            break;
        }
        let b = random_box(&mut rng, 0.05, 0.3);
        if s.instances.iter().all(|i| iou(&b, &i.bbox) < 0.3) {
            out.push(Detection::scored(b, 0, rng.random_range(0.05..0.35)));
            placed += 1;
        }
    }
    if out.len() > cfg.max {
        let mut order: Vec<usize> = (0..out.len()).collect();
        order.sort_by(|&a, &b| out[b].score.total_cmp(&out[a].score));
        order.truncate(cfg.max);
        order.sort_unstable();
        out = order.into_iter().map(|i| out[i].clone()).collect();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scenarios, SynthConfig};

    #[test]
    fn capacity_and_determinism() {
        let set = generate_scenarios(3, &SynthConfig { source_images: 1, target_images: 2, ..Default::default() }).unwrap();
        let s = &set.target[0];
        let cfg = ProposalConfig { max: 10, ..Default::default() };
        let p = teacher_proposals(s, &cfg, 1);
        assert_eq!(p.len(), 10);
        assert_eq!(p, teacher_proposals(s, &cfg, 1));
        let full = teacher_proposals(s, &ProposalConfig::default(), 1);
        assert!(full.len() >= s.instances.len() * 6);
        assert_eq!(ProposalConfig::default().max, 300);
    }
}
