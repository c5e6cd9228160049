//! End-to-end training: source pre-training, mean-teacher adaptation with
//! the WSCo terms, epoch-wise teacher EMA, evaluation and the augmentation
//! trend experiment.

mod adapt;
mod checkpoint;
mod eval;
mod pretrain;
mod trend;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::synth::{ProposalConfig, StrongLevel, SynthConfig};

pub use adapt::{
    objective, split_target, AdaptState, ContrastTargets, EpochReport, HeSummary, HookContext, HookOutput,
    IterationLosses, LossSummary, Objective, ObjectiveInputs, QuadraticPenalty, Regularizer, Trainer,
};
pub use eval::{evaluate, postprocess, EvalReport};
pub use pretrain::{pretrain_source, PretrainReport};
pub use trend::{trend_experiment, TrendRow};

/// Which branch inputs and which extra terms an adaptation run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Standard mean teacher with a strongly augmented student.
    Smt,
    /// Mean teacher plus semantics calibration and uncertainty-aware
    /// contrastive learning.
    Wsco,
    /// Mean teacher whose student also sees the weak view.
    WeakOnly,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smt" => Ok(Self::Smt),
            "wsco" => Ok(Self::Wsco),
            "weak-only" => Ok(Self::WeakOnly),
            other => Err(config(format!("unknown variant {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Smt => "smt",
            Self::Wsco => "wsco",
            Self::WeakOnly => "weak-only",
        })
    }
}

/// Variant plus ablation switches. The switches only matter for `Wsco`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptOptions {
    pub variant: Variant,
    pub calibration: bool,
    pub contrastive: bool,
    pub mapping_network: bool,
}

impl AdaptOptions {
    pub fn new(variant: Variant) -> Self {
        Self { variant, calibration: true, contrastive: true, mapping_network: true }
    }

    pub fn uses_calibration(&self) -> bool {
        self.variant == Variant::Wsco && self.calibration
    }

    pub fn uses_contrastive(&self) -> bool {
        self.variant == Variant::Wsco && self.contrastive
    }

    pub fn uses_mapping_network(&self) -> bool {
        self.variant == Variant::Wsco && self.mapping_network
    }

    pub fn label(&self) -> String {
        let mut s = self.variant.to_string();
        if self.variant == Variant::Wsco {
            for (on, tag) in [(self.calibration, "no-lsc"), (self.contrastive, "no-luscl"), (self.mapping_network, "no-mnet")] {
                if !on {
                    s.push('+');
                    s.push_str(tag);
                }
            }
        }
        s
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Weight of the InfoNCE term inside the calibration loss.
    pub alpha: f64,
    /// Weight of hard positives in the contrastive loss.
    pub lambda: f64,
    /// Weight of the contrastive loss in the total objective.
    pub beta: f64,
    /// Uncertainty above which background negatives are dropped.
    pub u: f64,
    pub tau: f64,
    pub bank_capacity: usize,
    pub proto_momentum: f64,
    pub ema_rate: f64,
    pub confidence: f64,
    pub max_proposals: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub nms_levels: usize,
    pub kmeans_rounds: usize,
    pub d_embed: usize,
    pub strong_level: u8,
    pub p_erase: f64,
    pub weak_sigma: f64,
    /// Share of target scenarios held out for evaluation.
    pub eval_fraction: f64,
    /// Detections at or above this score count towards TP/FP.
    pub count_threshold: f64,
    /// Detections below this score are dropped before mAP.
    pub map_min_score: f64,
    pub nms_iou: f64,
    pub pretrain_epochs: usize,
    /// Pre-training never stops before this many epochs.
    pub pretrain_min_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_map_floor: f64,
    pub synth: SynthConfig,
    pub proposals: ProposalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            alpha: 0.1,
            lambda: 0.5,
            beta: 0.5,
            u: 20.0,
            tau: 0.07,
            bank_capacity: 10,
            proto_momentum: 0.4,
            ema_rate: 0.9,
            confidence: 0.9,
            max_proposals: 300,
            lr: 0.001,
            momentum: 0.9,
            epochs: 10,
            nms_levels: 9,
            kmeans_rounds: 2,
            d_embed: 32,
            strong_level: 5,
            p_erase: 0.3,
            weak_sigma: 0.02,
            eval_fraction: 0.2,
            count_threshold: 0.5,
            map_min_score: 0.05,
            nms_iou: 0.5,
            pretrain_epochs: 30,
            pretrain_min_epochs: 10,
            pretrain_lr: 0.01,
            pretrain_map_floor: 0.6,
            synth: SynthConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit_open = |v: f64| v > 0.0 && v < 1.0;
        let checks: [(bool, &str); 23] = [
            (self.alpha >= 0.0 && self.alpha.is_finite(), "alpha must be finite and nonnegative"),
            ((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]"),
            (self.beta >= 0.0 && self.beta.is_finite(), "beta must be finite and nonnegative"),
            (self.u >= 0.0 && self.u.is_finite(), "u must be finite and nonnegative"),
            (self.tau > 0.0 && self.tau.is_finite(), "tau must be positive"),
            (self.bank_capacity > 0, "bank capacity must be positive"),
            ((0.0..1.0).contains(&self.proto_momentum), "prototype momentum must lie in [0, 1)"),
            ((0.0..=1.0).contains(&self.ema_rate), "EMA rate must lie in [0, 1]"),
            (unit_open(self.confidence), "confidence threshold must lie in (0, 1)"),
            (self.max_proposals > 0, "proposal capacity must be positive"),
            (self.lr >= 0.0 && self.lr.is_finite(), "learning rate must be finite and nonnegative"),
            ((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1)"),
            (self.nms_levels >= 2, "at least two NMS thresholds are needed"),
            (self.d_embed > 0, "embedding width must be positive"),
            ((1..=StrongLevel::MAX).contains(&self.strong_level), "strong level must lie in 1..=5"),
            ((0.0..=1.0).contains(&self.p_erase), "erase probability must lie in [0, 1]"),
            (self.weak_sigma >= 0.0 && self.weak_sigma.is_finite(), "weak noise must be nonnegative"),
            (unit_open(self.eval_fraction), "evaluation fraction must lie in (0, 1)"),
            (unit_open(self.count_threshold), "count threshold must lie in (0, 1)"),
            ((0.0..1.0).contains(&self.map_min_score), "mAP score floor must lie in [0, 1)"),
            (unit_open(self.nms_iou), "NMS IoU must lie in (0, 1)"),
            (self.pretrain_min_epochs <= self.pretrain_epochs, "minimum pre-training epochs exceed the maximum"),
            (self.pretrain_lr >= 0.0 && self.pretrain_lr.is_finite(), "pre-training rate must be nonnegative"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(config(msg));
            }
        }
        self.synth.validate()?;
        self.proposals.validate()?;
        if self.proposals.max > self.max_proposals {
            return Err(config("proposal generator capacity exceeds the branch capacity"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn strong(&self) -> Result<StrongLevel> {
        StrongLevel::new(self.strong_level, self.p_erase)
    }
}


#[cfg(test)]
mod scenarios_tests;
