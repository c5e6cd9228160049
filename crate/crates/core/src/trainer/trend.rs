use super::adapt::{split_target, Trainer};
use super::eval::{evaluate, EvalReport};
use super::{AdaptOptions, TrainConfig, Variant};
use crate::error::{config, Result};
use crate::mt::Detector;
use crate::synth::{Scenario, StrongLevel};

/// Final-epoch teacher counts divided by the source model's counts on the
/// same held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendRow {
    /// `"source"`, `"weak-only"` or `"level-N"`.
    pub label: String,
    /// Strong augmentation level; 0 for the source and weak-only rows.
    pub level: u8,
    pub tp_norm: f64,
    pub fp_norm: f64,
    pub map: f64,
}

impl TrendRow {
    fn from_eval(label: String, level: u8, ev: &EvalReport, source: &EvalReport) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
        Self {
            label,
            level,
            tp_norm: ratio(ev.total.tp, source.total.tp),
            fp_norm: ratio(ev.total.fp, source.total.fp),
            map: ev.map,
        }
    }
}

/// Rows for the source model, the weak-only baseline and the mean teacher
/// adapted at each cumulative strong level in `levels`, which must be exactly
/// `1, 2, ..., L`.
pub fn trend_experiment(
    cfg: &TrainConfig,
    source_model: &Detector,
    target: &[Scenario],
    levels: &[u8],
) -> Result<Vec<TrendRow>> {
    let ascending = !levels.is_empty() && levels.iter().enumerate().all(|(i, &l)| l as usize == i + 1);
    if !ascending || levels.len() > StrongLevel::MAX as usize {
        return Err(config(format!("trend levels must run 1..=L with L ≤ {}", StrongLevel::MAX)));
    }
    let (_, eval) = split_target(target, cfg.eval_fraction)?;
    let source = evaluate(source_model, &eval, cfg)?;
    let mut rows = vec![TrendRow::from_eval("source".into(), 0, &source, &source)];
    let run = |c: &TrainConfig, variant: Variant| -> Result<EvalReport> {
        let mut t = Trainer::new(c.clone(), AdaptOptions::new(variant))?;
        let reports = t.adapt(source_model, target)?;
        let last = reports.last().ok_or_else(|| config("trend runs need at least one epoch"))?;
        Ok(EvalReport { counts: last.counts.clone(), total: last.total, map: last.map })
    };
    let weak = run(cfg, Variant::WeakOnly)?;
    rows.push(TrendRow::from_eval("weak-only".into(), 0, &weak, &source));
    for &level in levels {
        let c = TrainConfig { strong_level: level, ..cfg.clone() };
        let ev = run(&c, Variant::Smt)?;
        rows.push(TrendRow::from_eval(format!("level-{level}"), level, &ev, &source));
    }
    Ok(rows)
}
