//! Weak and strong augmentation on latent features.
//!
//! Strong augmentation is modelled as `x ⊙ Ω + noise` with a binary keep
//! mask Ω. Levels are cumulative: each level zeroes a larger share of the
//! class-irrelevant coordinates and adds more noise; from level 4 on, the
//! mask may also erase class-identity coordinates.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{relevant_dims, Scenario, MIN_SIDE};
use crate::error::{config, Result};
use crate::geometry::BBox;
use crate::rng::rng_for;

/// Binary keep mask over feature coordinates. The first `relevant` entries
/// are the class-identity coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskOperator {
    pub keep: Vec<u8>,
    pub relevant: usize,
}

impl MaskOperator {
    pub fn ones(d: usize) -> Self {
        Self { keep: vec![1; d], relevant: relevant_dims(d) }
    }

    pub fn zeros(d: usize) -> Self {
        Self { keep: vec![0; d], relevant: relevant_dims(d) }
    }

    pub fn erased(&self) -> usize {
        self.keep.iter().filter(|&&k| k == 0).count()
    }

    pub fn erased_relevant(&self) -> usize {
        self.keep[..self.relevant].iter().filter(|&&k| k == 0).count()
    }

    /// `self ≤ other` element-wise.
    pub fn is_within(&self, other: &MaskOperator) -> bool {
        self.keep.iter().zip(&other.keep).all(|(a, b)| a <= b)
    }
}

/// `feature ⊙ Ω`.
pub fn apply_mask(feature: &[f64], mask: &MaskOperator) -> Vec<f64> {
    feature.iter().zip(&mask.keep).map(|(&v, &k)| if k == 1 { v } else { 0.0 }).collect()
}

/// One strong-augmentation intensity in `1..=5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrongLevel {
    level: u8,
    /// Probability of erasing class-identity coordinates at the top level.
    pub p_erase: f64,
}

impl StrongLevel {
    pub const MAX: u8 = 5;

    pub fn new(level: u8, p_erase: f64) -> Result<Self> {
        if !(1..=Self::MAX).contains(&level) {
            return Err(config(format!("strong augmentation level {level} outside 1..=5")));
        }
        if !(0.0..=1.0).contains(&p_erase) {
            return Err(config(format!("erase probability {p_erase} outside [0, 1]")));
        }
        Ok(Self { level, p_erase })
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    /// Additive noise standard deviation on the class-identity coordinates.
    /// Photometric changes mostly corrupt appearance.
    pub fn noise(&self) -> f64 {
        0.4 * self.level as f64
    }

    /// Additive noise standard deviation on the remaining coordinates.
    pub fn nuisance_noise(&self) -> f64 {
        0.25 * self.noise()
    }

    /// Share of class-irrelevant coordinates zeroed.
    pub fn irrelevant_drop(&self) -> f64 {
        0.05 * self.level as f64
    }

    /// Probability that class-identity coordinates are erased.
    pub fn relevant_erase_prob(&self) -> f64 {
        match self.level {
            4 => 0.5 * self.p_erase,
            5 => self.p_erase,
            _ => 0.0,
        }
    }

    /// Draws a mask for a `d`-wide feature.
    pub fn sample_mask<R: Rng + ?Sized>(&self, d: usize, rng: &mut R) -> MaskOperator {
        let rel = relevant_dims(d);
        let mut mask = MaskOperator::ones(d);
        let n_irr = d - rel;
        let drop = ((self.irrelevant_drop() * n_irr as f64).round() as usize).max(1).min(n_irr);
        for j in sample(rng, n_irr, drop) {
            mask.keep[rel + j] = 0;
        }
        if rng.random::<f64>() < self.relevant_erase_prob() {
            let n = rng.random_range(rel.div_ceil(2)..=rel);
            for j in sample(rng, rel, n) {
                mask.keep[j] = 0;
            }
        }
        mask
    }
}

/// Strongly augments one feature vector: `x ⊙ Ω + noise`.
pub fn augment_feature<R: Rng + ?Sized>(feature: &[f64], level: &StrongLevel, rng: &mut R) -> (Vec<f64>, MaskOperator) {
    let mask = level.sample_mask(feature.len(), rng);
    let rel = relevant_dims(feature.len());
    let out = apply_mask(feature, &mask)
        .into_iter()
        .enumerate()
        .map(|(j, v)| {
            let sd = if j < rel { level.noise() } else { level.nuisance_noise() };
            v + sd * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    (out, mask)
}

/// A strongly augmented scenario with the masks applied to its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongView {
    pub scenario: Scenario,
    pub masks: Vec<MaskOperator>,
}

/// Photometric strong augmentation: geometry is untouched, every feature
/// (instances, clutter, background) is masked and perturbed.
pub fn strong_augment(s: &Scenario, level: &StrongLevel, seed: u64) -> StrongView {
    let mut rng = rng_for(seed, &[s.image_id, 0x5742]);
    let mut out = s.clone();
    let mut masks = Vec::with_capacity(s.instances.len());
    for inst in &mut out.instances {
        let (f, m) = augment_feature(&inst.feature, level, &mut rng);
        inst.feature = f;
        masks.push(m);
    }
    for c in &mut out.clutter {
        c.feature = augment_feature(&c.feature, level, &mut rng).0;
    }
    out.background = augment_feature(&out.background, level, &mut rng).0;
    StrongView { scenario: out, masks }
}

/// Weak augmentation: small feature noise (`sigma` per coordinate) and box
/// jitter of at most 2% of the canvas per coordinate.
pub fn weak_augment(s: &Scenario, sigma: f64, seed: u64) -> Scenario {
    let mut rng = rng_for(seed, &[s.image_id, 0x7765]);
    let mut out = s.clone();
    let perturb = |f: &mut Vec<f64>, rng: &mut rand_chacha::ChaCha8Rng| {
        if sigma > 0.0 {
            for v in f.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    };
    let jitter = |b: &BBox, rng: &mut rand_chacha::ChaCha8Rng| {
        let c = b.coords().map(|v| (v + rng.random_range(-0.02..=0.02)).clamp(0.0, 1.0));
        BBox::from_coords_clamped(c, MIN_SIDE)
    };
    for inst in &mut out.instances {
        perturb(&mut inst.feature, &mut rng);
        inst.bbox = jitter(&inst.bbox, &mut rng);
    }
    for c in &mut out.clutter {
        perturb(&mut c.feature, &mut rng);
        c.bbox = jitter(&c.bbox, &mut rng);
    }
    perturb(&mut out.background, &mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scenarios, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn mask_extremes() {
        let f = vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(apply_mask(&f, &MaskOperator::ones(8)), f);
        assert!(apply_mask(&f, &MaskOperator::zeros(8)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weak_augment_zero_sigma_keeps_features() {
        let set = generate_scenarios(1, &SynthConfig { source_images: 1, target_images: 1, ..Default::default() }).unwrap();
        let s = &set.target[0];
        let w = weak_augment(s, 0.0, 9);
        for (a, b) in s.instances.iter().zip(&w.instances) {
            assert_eq!(a.feature, b.feature);
            for (x, y) in a.bbox.coords().iter().zip(b.bbox.coords()) {
                assert!((x - y).abs() <= 0.02 + 1e-12);
            }
        }
        assert_eq!(weak_augment(s, 0.01, 9), weak_augment(s, 0.01, 9));
    }

    #[test]
    fn weak_augment_preserves_direction() {
        let set = generate_scenarios(2, &SynthConfig { source_images: 1, target_images: 320, ..Default::default() }).unwrap();
        let mut draws = 0;
        for (i, s) in set.target.iter().enumerate() {
            let w = weak_augment(s, 0.01, i as u64);
            for (a, b) in s.instances.iter().zip(&w.instances) {
                assert!(cosine(&a.feature, &b.feature) > 0.99);
                draws += 1;
            }
        }
        assert!(draws >= 1000, "{draws}");
    }

    #[test]
    fn erase_fraction_matches_parameter() {
        let level = StrongLevel::new(5, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let hits = (0..n).filter(|_| level.sample_mask(64, &mut rng).erased_relevant() > 0).count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.3).abs() <= 0.05, "{frac}");
    }

    #[test]
    fn lower_levels_never_touch_relevant_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for l in 1..=3 {
            let level = StrongLevel::new(l, 1.0).unwrap();
            for _ in 0..500 {
                assert_eq!(level.sample_mask(32, &mut rng).erased_relevant(), 0);
            }
        }
    }

    #[test]
    fn erased_count_grows_with_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mean = |l: u8, rng: &mut ChaCha8Rng| {
            let level = StrongLevel::new(l, 0.3).unwrap();
            (0..10_000).map(|_| level.sample_mask(64, rng).erased() as f64).sum::<f64>() / 10_000.0
        };
        let means: Vec<f64> = (1..=5).map(|l| mean(l, &mut rng)).collect();
        for w in means.windows(2) {
            assert!(w[1] > w[0], "{means:?}");
        }
    }

    #[test]
    fn level_bounds_validated() {
        assert!(StrongLevel::new(0, 0.3).is_err());
        assert!(StrongLevel::new(6, 0.3).is_err());
        assert!(StrongLevel::new(3, 1.5).is_err());
    }
}
