//! Synthetic detection scenarios.
//!
//! An "image" is a set of object instances on the unit canvas, each carrying
//! a latent feature vector: its class signature plus per-instance noise and,
//! in the target domain, a fixed domain shift. The first quarter of the
//! feature coordinates carry the class identity; the rest carry a shared
//! objectness pattern and weak class cues. Images also contain clutter
//! regions that partially resemble objects, which is where false positives
//! come from once a detector becomes aggressive.

mod augment;
mod entropy;
mod proposals;

pub use augment::{
    apply_mask, augment_feature, strong_augment, weak_augment, MaskOperator, StrongLevel, StrongView,
};
pub use entropy::{
    entropy_sweep, nested_masks, Classifier, EntropySweep,
    estimate_conditional_entropy, predictive_entropy, train_feature_classifier, EntropyEstimate,
    FeatureAugment, SoftmaxClassifier,
};
pub use proposals::{teacher_proposals, ProposalConfig};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::geometry::{iou, BBox, GroundTruth};
use crate::rng::rng_for;

/// Smallest box side on the unit canvas.
pub const MIN_SIDE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of foreground classes `K`.
    pub classes: usize,
    pub d_feat: usize,
    pub source_images: usize,
    pub target_images: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_clutter: usize,
    pub max_clutter: usize,
    /// Class prior; empty means uniform.
    pub class_prior: Vec<f64>,
    /// Per-coordinate standard deviation of the target domain shift. The
    /// shift leaves the class-identity coordinates alone.
    pub shift: f64,
    /// Per-coordinate instance noise in the source domain.
    pub noise: f64,
    /// Per-coordinate noise on the class-identity coordinates of target
    /// objects and clutter; other coordinates and plain background keep the
    /// source noise.
    pub target_noise: f64,
    /// Scale of the class-identity coordinates of a signature.
    pub relevant_scale: f64,
    /// Scale of the class cues spread over the remaining coordinates.
    pub irrelevant_scale: f64,
    /// Scale of the objectness pattern shared by all classes.
    pub objectness_scale: f64,
    /// Clutter resembles a random class signature on the class-identity
    /// coordinates with a weight drawn from this range.
    pub clutter_resemblance: (f64, f64),
    /// Weight of that signature on the remaining coordinates.
    pub clutter_objectness: f64,
    pub min_box_side: f64,
    pub max_box_side: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            d_feat: 64,
            source_images: 60,
            target_images: 300,
            min_instances: 2,
            max_instances: 5,
            min_clutter: 2,
            max_clutter: 5,
            class_prior: Vec::new(),
            shift: 0.3,
            noise: 0.6,
            target_noise: 1.4,
            relevant_scale: 1.0,
            irrelevant_scale: 0.35,
            objectness_scale: 1.0,
            clutter_resemblance: (0.15, 0.65),
            clutter_objectness: 0.8,
            min_box_side: 0.08,
            max_box_side: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config("need at least two classes"));
        }
        if self.d_feat < 8 {
            return Err(config("feature width must be at least 8"));
        }
        if self.source_images == 0 || self.target_images == 0 {
            return Err(config("image counts must be at least one"));
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(config("instance range must be nonempty and start at one or more"));
        }
        if self.min_clutter > self.max_clutter {
            return Err(config("clutter range is empty"));
        }
        if !self.class_prior.is_empty() {
            if self.class_prior.len() != self.classes {
                return Err(config("class prior length must equal the class count"));
            }
            if self.class_prior.iter().any(|&p| !(p >= 0.0)) || self.class_prior.iter().sum::<f64>() <= 0.0 {
                return Err(config("class prior must be nonnegative with positive mass"));
            }
        }
        if !(self.min_box_side >= MIN_SIDE && self.min_box_side <= self.max_box_side && self.max_box_side < 0.5) {
            return Err(config("box side range must lie within [0.01, 0.5)"));
        }
        if [self.shift, self.clutter_objectness, self.noise, self.target_noise, self.relevant_scale, self.irrelevant_scale, self.objectness_scale]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(config("scales must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Number of leading coordinates that carry class identity.
    pub fn relevant_dims(&self) -> usize {
        relevant_dims(self.d_feat)
    }

    /// Normalized class prior.
    pub fn prior(&self) -> Vec<f64> {
        if self.class_prior.is_empty() {
            vec![1.0 / self.classes as f64; self.classes]
        } else {
            let s: f64 = self.class_prior.iter().sum();
            self.class_prior.iter().map(|p| p / s).collect()
        }
    }
}

pub fn relevant_dims(d_feat: usize) -> usize {
    (d_feat / 4).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    pub feature: Vec<f64>,
    pub bbox: BBox,
}

/// A background region that partially resembles an object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clutter {
    pub feature: Vec<f64>,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub image_id: u64,
    pub domain: Domain,
    pub instances: Vec<Instance>,
    pub clutter: Vec<Clutter>,
    /// Feature pooled by proposals that cover neither instances nor clutter.
    pub background: Vec<f64>,
    pub shift: Vec<f64>,
    pub noise: f64,
}

impl Scenario {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.instances.iter().map(|i| GroundTruth { bbox: i.bbox, class_id: i.class_id }).collect()
    }

    pub fn d_feat(&self) -> usize {
        self.background.len()
    }
}

/// Class signatures and the shared objectness pattern of one generated world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub signatures: Vec<Vec<f64>>,
    pub objectness: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub world: World,
    pub source: Vec<Scenario>,
    pub target: Vec<Scenario>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sample_class<R: Rng + ?Sized>(rng: &mut R, prior: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in prior.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    prior.len() - 1
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> BBox {
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let x = rng.random_range(0.0..=1.0 - w);
    let y = rng.random_range(0.0..=1.0 - h);
    BBox::from_coords_clamped([x, y, x + w, y + h], MIN_SIDE)
}

/// Places a box with IoU ≤ `max_overlap` to every box in `taken`, giving up
/// after a bounded number of attempts.
fn place_box<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig, taken: &[BBox], max_overlap: f64) -> Option<BBox> {
    (0..50)
        .map(|_| random_box(rng, cfg.min_box_side, cfg.max_box_side))
        .find(|b| taken.iter().all(|t| iou(b, t) <= max_overlap))
}

impl World {
    pub fn sample<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let rel = cfg.relevant_dims();
        let objectness = gaussian(rng, cfg.d_feat, cfg.objectness_scale);
        let signatures = (0..cfg.classes)
            .map(|_| {
                let mut s = gaussian(rng, cfg.d_feat, cfg.irrelevant_scale);
                for (j, v) in s.iter_mut().enumerate() {
                    if j < rel {
                        *v = cfg.relevant_scale * rng.sample::<f64, _>(StandardNormal);
                    } else {
                        *v += objectness[j];
                    }
                }
                s
            })
            .collect();
        let shift = gaussian(rng, cfg.d_feat, 1.0)
            .into_iter()
            .enumerate()
            .map(|(j, v)| if j < rel { 0.0 } else { v * cfg.shift })
            .collect();
        Self { signatures, objectness, shift }
    }

    /// Builds one image. Source images carry no shift.
    pub fn scenario<R: Rng + ?Sized>(&self, cfg: &SynthConfig, domain: Domain, image_id: u64, rng: &mut R) -> Scenario {
        let rel = cfg.relevant_dims();
        let d = cfg.d_feat;
        let (shift, id_sd) = match domain {
            Domain::Source => (vec![0.0; d], cfg.noise),
            Domain::Target => (self.shift.clone(), cfg.target_noise),
        };
        let region_noise = |rng: &mut R| -> Vec<f64> {
            (0..d)
                .map(|j| rng.sample::<f64, _>(StandardNormal) * if j < rel { id_sd } else { cfg.noise })
                .collect()
        };
        let prior = cfg.prior();
        let n_inst = rng.random_range(cfg.min_instances..=cfg.max_instances);
        let mut taken: Vec<BBox> = Vec::new();
        let mut instances = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let Some(bbox) = place_box(rng, cfg, &taken, 0.1) else { break };
            taken.push(bbox);
            let class_id = sample_class(rng, &prior);
            let noise = region_noise(rng);
            let feature = (0..d).map(|j| self.signatures[class_id][j] + shift[j] + noise[j]).collect();
            instances.push(Instance { class_id, feature, bbox });
        }
        let n_clutter = rng.random_range(cfg.min_clutter..=cfg.max_clutter);
        let mut clutter = Vec::with_capacity(n_clutter);
        for _ in 0..n_clutter {
            let Some(bbox) = place_box(rng, cfg, &taken, 0.0) else { break };
            taken.push(bbox);
            let like = rng.random_range(0..cfg.classes);
            let (lo, hi) = cfg.clutter_resemblance;
            let w = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let noise = region_noise(rng);
            let feature = (0..d)
                .map(|j| {
                    let weight = if j < rel { w } else { cfg.clutter_objectness };
                    weight * self.signatures[like][j] + shift[j] + noise[j]
                })
                .collect();
            clutter.push(Clutter { feature, bbox });
        }
        let noise = gaussian(rng, d, cfg.noise);
        let background = (0..d).map(|j| shift[j] + noise[j]).collect();
        Scenario { image_id, domain, instances, clutter, background, shift, noise: id_sd.max(cfg.noise) }
    }
}

/// Draws class signatures once, then `source_images` source scenarios and
/// `target_images` shifted target scenarios. Deterministic in `seed`.
pub fn generate_scenarios(seed: u64, cfg: &SynthConfig) -> Result<ScenarioSet> {
    cfg.validate()?;
    let mut wrng = rng_for(seed, &[0]);
    let world = World::sample(cfg, &mut wrng);
    let source = (0..cfg.source_images)
        .map(|i| world.scenario(cfg, Domain::Source, i as u64, &mut rng_for(seed, &[1, i as u64])))
        .collect();
    let target = (0..cfg.target_images)
        .map(|i| {
            let id = (cfg.source_images + i) as u64;
            world.scenario(cfg, Domain::Target, id, &mut rng_for(seed, &[2, i as u64]))
        })
        .collect();
    Ok(ScenarioSet { world, source, target })
}

/// One JSON record per line.
pub fn scenarios_to_lines(scenarios: &[Scenario]) -> String {
    let mut out = String::new();
    for s in scenarios {
        out.push_str(&serde_json::to_string(s).expect("scenarios serialize"));
        out.push('\n');
    }
    out
}

/// Inverse of [`scenarios_to_lines`]; blank lines are skipped.
pub fn scenarios_from_lines(text: &str) -> Result<Vec<Scenario>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_lines_round_trip() {
        let cfg = SynthConfig { source_images: 3, target_images: 2, ..Default::default() };
        let set = generate_scenarios(3, &cfg).unwrap();
        let text = scenarios_to_lines(&set.target);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(scenarios_from_lines(&text).unwrap(), set.target);
        assert!(matches!(scenarios_from_lines("\n{oops").unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig { source_images: 4, target_images: 4, ..Default::default() };
        assert_eq!(generate_scenarios(7, &cfg).unwrap(), generate_scenarios(7, &cfg).unwrap());
        assert_ne!(generate_scenarios(7, &cfg).unwrap(), generate_scenarios(8, &cfg).unwrap());
    }

    #[test]
    fn zero_shift_zero_noise_target_equals_signatures() {
        let cfg = SynthConfig { shift: 0.0, noise: 0.0, target_noise: 0.0, source_images: 2, target_images: 3, ..Default::default() };
        let set = generate_scenarios(3, &cfg).unwrap();
        for s in &set.target {
            for inst in &s.instances {
                assert_eq!(inst.feature, set.world.signatures[inst.class_id]);
            }
        }
    }

    #[test]
    fn class_frequencies_follow_prior() {
        let prior = vec![0.5, 0.3, 0.2];
        let cfg = SynthConfig {
            classes: 3,
            class_prior: prior.clone(),
            source_images: 60,
            target_images: 1,
            min_instances: 2,
            max_instances: 3,
            min_clutter: 0,
            max_clutter: 0,
            ..Default::default()
        };
        let set = generate_scenarios(11, &cfg).unwrap();
        let labels: Vec<usize> =
            set.source.iter().flat_map(|s| s.instances.iter().map(|i| i.class_id)).take(100).collect();
        assert_eq!(labels.len(), 100);
        for (k, &p) in prior.iter().enumerate() {
            let n = labels.iter().filter(|&&c| c == k).count() as f64;
            let sd = (100.0 * p * (1.0 - p)).sqrt();
            assert!((n - 100.0 * p).abs() <= 3.0 * sd, "class {k}: {n}");
        }
    }

    #[test]
    fn boxes_stay_on_canvas_and_clutter_avoids_objects() {
        let set = generate_scenarios(5, &SynthConfig::default()).unwrap();
        for s in set.source.iter().chain(&set.target) {
            for i in &s.instances {
                let c = i.bbox.coords();
                assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(i.class_id < 4);
            }
            for c in &s.clutter {
                assert!(s.instances.iter().all(|i| iou(&i.bbox, &c.bbox) == 0.0));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SynthConfig { classes: 1, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { d_feat: 4, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { target_images: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { class_prior: vec![1.0], ..Default::default() }.validate().is_err());
    }
}
