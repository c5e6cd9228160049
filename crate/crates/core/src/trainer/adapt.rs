use rand::seq::SliceRandom;

use super::eval::{evaluate, EvalReport};
use super::{AdaptOptions, TrainConfig, Variant};
use crate::calibration::{l_grad_backward, l_unsup, new_mnet, new_probe, EmbeddingPairBatch, Targets};
use crate::contrastive::{build_partitions, he_ratio_score, image_uncertainty, l_uscl, ContrastPartition, HeRatio};
use crate::error::{config, Error, Result};
use crate::geometry::{fp_gain, Counts, MatchCounts};
use crate::labeling::{
    centroid_distances, nearest_labels, update_prototypes, warmup_blend, warmup_weight, weighted_kmeans_refine,
    MemoryBank, PrototypeSet,
};
use crate::mt::{
    backward_branch, backward_features, filter_high_confidence, l_mt, pool_regions, run_branch, run_branch_on_pooled,
    BranchOutput, Detector, PseudoLabelSet,
};
use crate::nn::{DenseNet, Matrix, Mode, Sgd};
use crate::rng::{derive_seed, rng_for};
use crate::synth::{strong_augment, teacher_proposals, weak_augment, Scenario};

const ITER_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
/// Consecutive non-finite iterations that abort a run.
const MAX_CONSECUTIVE_SKIPS: usize = 3;

/// What a regularizer hook sees each iteration.
pub struct HookContext<'a> {
    pub student: &'a Detector,
    pub student_out: &'a BranchOutput,
    pub teacher_out: &'a BranchOutput,
    /// Strong embeddings when the contrastive branch ran.
    pub embeddings: Option<&'a Matrix>,
}

/// Hook value with optional gradients on the student logits and on the
/// student parameters (flat, extractor then classifier then box head).
#[derive(Clone, Debug, Default)]
pub struct HookOutput {
    pub value: f64,
    pub d_logits: Option<Matrix>,
    pub d_params: Option<Vec<f64>>,
}

/// A base-method regularizer added to the total objective.
pub trait Regularizer {
    fn name(&self) -> &str;
    fn evaluate(&mut self, ctx: &HookContext) -> Result<HookOutput>;
}

/// `weight · ‖θ_cls‖²`, a toy hook used to check loss bookkeeping.
#[derive(Clone, Debug)]
pub struct QuadraticPenalty {
    pub weight: f64,
}

impl Regularizer for QuadraticPenalty {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn evaluate(&mut self, ctx: &HookContext) -> Result<HookOutput> {
        let ext = ctx.student.ext.params().trainable_len();
        let cls = ctx.student.cls.params().flat_values();
        let reg = ctx.student.reg.params().trainable_len();
        let value = self.weight * cls.iter().map(|v| v * v).sum::<f64>();
        let mut g = vec![0.0; ext];
        g.extend(cls.iter().map(|v| 2.0 * self.weight * v));
        g.extend(std::iter::repeat_n(0.0, reg));
        Ok(HookOutput { value, d_logits: None, d_params: Some(g) })
    }
}

/// Loss components of one iteration. Disabled terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLosses {
    pub det_box: f64,
    pub det_cls: f64,
    pub con: f64,
    pub reg: f64,
    pub grad: Option<f64>,
    pub unsup: Option<f64>,
    pub uscl: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
    pub pseudo_labels: usize,
    pub sigma: Option<f64>,
}

impl IterationLosses {
    /// `det + con + R + grad + α·unsup + β·uscl` from the logged parts.
    pub fn ledger_total(&self) -> f64 {
        self.det_box
            + self.det_cls
            + self.con
            + self.reg
            + self.grad.unwrap_or(0.0)
            + self.alpha * self.unsup.unwrap_or(0.0)
            + self.beta * self.uscl.unwrap_or(0.0)
    }
}

/// Means over an epoch's completed iterations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossSummary {
    pub det: f64,
    pub con: f64,
    pub reg: f64,
    pub grad: Option<f64>,
    pub unsup: Option<f64>,
    pub uscl: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeSummary {
    pub mean: f64,
    pub anchors: usize,
    pub zero_denominator: usize,
    pub histogram: Vec<(f64, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// One-based.
    pub epoch: usize,
    pub counts: MatchCounts,
    pub total: Counts,
    pub map: f64,
    pub fp_gain: f64,
    pub tp_norm: f64,
    pub fp_norm: f64,
    pub mean_sigma: Option<f64>,
    pub losses: LossSummary,
    pub he: Option<HeSummary>,
    pub pseudo_labels: usize,
    pub skipped: usize,
    pub hook_disabled: bool,
    pub student_checksum: String,
    pub teacher_checksum: String,
    pub iterations: Vec<IterationLosses>,
}

/// Everything an adaptation run carries between iterations.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub student: Detector,
    pub teacher: Detector,
    pub mnet: DenseNet,
    pub probe: DenseNet,
    pub bank: MemoryBank,
    /// Prototypes in embedding space and in extractor-feature space.
    pub protos_z: PrototypeSet,
    pub protos_x: PrototypeSet,
    /// Extractor, classifier, box head, mapping network.
    pub optimizers: Vec<Sgd>,
    /// Completed epochs.
    pub epoch: usize,
    pub source: EvalReport,
}

/// Holds out the last `fraction` of the target scenarios (at least one) for
/// evaluation.
pub fn split_target(target: &[Scenario], fraction: f64) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    if target.len() < 2 {
        return Err(config("need at least two target scenarios to hold one out"));
    }
    let n_eval = ((target.len() as f64 * fraction).round() as usize).clamp(1, target.len() - 1);
    let cut = target.len() - n_eval;
    Ok((target[..cut].to_vec(), target[cut..].to_vec()))
}

pub struct Trainer {
    cfg: TrainConfig,
    options: AdaptOptions,
    hooks: Vec<Box<dyn Regularizer>>,
    hook_disabled: bool,
}

struct StepOutcome {
    losses: Option<IterationLosses>,
    he: Option<HeRatio>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, options: AdaptOptions) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, options, hooks: Vec::new(), hook_disabled: false })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn options(&self) -> AdaptOptions {
        self.options
    }

    pub fn register_base_regularizer_hook(&mut self, hook: Box<dyn Regularizer>) -> &mut Self {
        self.hooks.push(hook);
        self
    }

    /// Teacher and student both start from the source model.
    pub fn init_state(&self, source_model: &Detector, eval: &[Scenario]) -> Result<AdaptState> {
        let c = &self.cfg;
        let d = source_model.d_feat();
        let k = source_model.classes();
        if d != c.synth.d_feat || k != c.synth.classes {
            return Err(config("source model does not match the configured feature width and classes"));
        }
        let mnet = new_mnet(d, c.d_embed, &mut rng_for(c.seed, &[INIT_STREAM, 0]))?;
        let probe = new_probe(c.d_embed, k, &mut rng_for(c.seed, &[INIT_STREAM, 1]))?;
        let optimizers = (0..4).map(|_| Sgd::new(c.lr, c.momentum)).collect::<Result<_>>()?;
        Ok(AdaptState {
            student: source_model.clone(),
            teacher: source_model.clone(),
            mnet,
            probe,
            bank: MemoryBank::new(k, c.bank_capacity)?,
            protos_z: PrototypeSet::new(k),
            protos_x: PrototypeSet::new(k),
            optimizers,
            epoch: 0,
            source: evaluate(source_model, eval, c)?,
        })
    }

    /// Splits the target set, then runs every configured epoch.
    pub fn adapt(&mut self, source_model: &Detector, target: &[Scenario]) -> Result<Vec<EpochReport>> {
        let (train, eval) = split_target(target, self.cfg.eval_fraction)?;
        let mut state = self.init_state(source_model, &eval)?;
        self.run(&mut state, &train, &eval, self.cfg.epochs)
    }

    /// Continues `state` until `until` epochs are complete.
    pub fn run(
        &mut self,
        state: &mut AdaptState,
        train: &[Scenario],
        eval: &[Scenario],
        until: usize,
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while state.epoch < until {
            reports.push(self.run_epoch(state, train, eval)?);
        }
        Ok(reports)
    }

    pub fn run_epoch(&mut self, state: &mut AdaptState, train: &[Scenario], eval: &[Scenario]) -> Result<EpochReport> {
        if train.is_empty() {
            return Err(config("adaptation needs at least one training scenario"));
        }
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(self.cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut iterations = Vec::with_capacity(train.len());
        let mut he = HeRatio::default();
        let mut any_he = false;
        let (mut skipped, mut consecutive) = (0, 0);
        for (it, &idx) in order.iter().enumerate() {
            let omega = warmup_weight(epoch, it, train.len());
            let out = self.step(state, &train[idx], epoch, it, omega)?;
            match out.losses {
                Some(l) => {
                    consecutive = 0;
                    iterations.push(l);
                }
                None => {
                    skipped += 1;
                    consecutive += 1;
                    if consecutive >= MAX_CONSECUTIVE_SKIPS {
                        return Err(Error::Diagnostic(format!(
                            "{MAX_CONSECUTIVE_SKIPS} consecutive non-finite iterations in epoch {}",
                            epoch + 1
                        )));
                    }
                }
            }
            if let Some(h) = out.he {
                any_he = true;
                he.merge(&h);
            }
        }
        state.teacher.ema_from(&state.student, self.cfg.ema_rate)?;
        state.epoch += 1;
        let ev = evaluate(&state.teacher, eval, &self.cfg)?;
        Ok(self.report(state, ev, iterations, any_he.then_some(he), skipped))
    }

    fn report(
        &self,
        state: &AdaptState,
        ev: EvalReport,
        iterations: Vec<IterationLosses>,
        he: Option<HeRatio>,
        skipped: usize,
    ) -> EpochReport {
        let n = iterations.len().max(1) as f64;
        let mean = |f: &dyn Fn(&IterationLosses) -> f64| iterations.iter().map(f).sum::<f64>() / n;
        let mean_opt = |f: &dyn Fn(&IterationLosses) -> Option<f64>| {
            let v: Vec<f64> = iterations.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let losses = LossSummary {
            det: mean(&|l| l.det_box + l.det_cls),
            con: mean(&|l| l.con),
            reg: mean(&|l| l.reg),
            grad: mean_opt(&|l| l.grad),
            unsup: mean_opt(&|l| l.unsup),
            uscl: mean_opt(&|l| l.uscl),
            total: mean(&|l| l.total),
        };
        let src = state.source.total;
        let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
        EpochReport {
            epoch: state.epoch,
            total: ev.total,
            fp_gain: fp_gain(&src, &ev.total),
            tp_norm: ratio(ev.total.tp, src.tp),
            fp_norm: ratio(ev.total.fp, src.fp),
            counts: ev.counts,
            map: ev.map,
            mean_sigma: mean_opt(&|l| l.sigma),
            losses,
            he: he.map(|h| HeSummary {
                mean: h.mean(),
                anchors: h.ratios.len(),
                zero_denominator: h.zero_denominator.len(),
                histogram: h.histogram,
            }),
            pseudo_labels: iterations.iter().map(|l| l.pseudo_labels).sum(),
            skipped,
            hook_disabled: self.hook_disabled,
            student_checksum: state.student.checksum(),
            teacher_checksum: state.teacher.checksum(),
            iterations,
        }
    }

    /// One scenario through both branches, every enabled loss and one
    /// optimizer step. Returns `None` losses when the step was skipped.
    fn step(&mut self, st: &mut AdaptState, s: &Scenario, epoch: usize, it: usize, omega: f64) -> Result<StepOutcome> {
        let c = self.cfg.clone();
        let o = self.options;
        let seed = derive_seed(c.seed, &[ITER_STREAM, epoch as u64, it as u64]);
        let weak = weak_augment(s, c.weak_sigma, seed);
        let strong = match o.variant {
            Variant::WeakOnly => weak.clone(),
            _ => strong_augment(&weak, &c.strong()?, seed).scenario,
        };
        let boxes: Vec<_> = teacher_proposals(&weak, &c.proposals, seed).into_iter().map(|d| d.bbox).collect();
        let t_out = run_branch(&st.teacher, &weak, &boxes, c.max_proposals)?;
        let strong_pooled = pool_regions(&strong, &boxes)?;
        let pseudo = filter_high_confidence(&t_out, c.confidence)?;

        if (o.uses_calibration() || o.uses_contrastive()) && o.uses_mapping_network() {
            // Normalization statistics track the strong view only.
            let f = st.student.ext.forward_traced(&strong_pooled)?.0;
            let (_, trace) = st.mnet.forward_traced(&f)?;
            st.mnet.commit_stats(&trace);
        }
        let contrast = if o.uses_contrastive() { Some(pseudo_categories(&c, o, st, &t_out, &pseudo, omega)?) } else { None };

        st.student.zero_grad();
        st.mnet.params_mut().zero_grad();
        let inputs = ObjectiveInputs { strong_pooled: &strong_pooled, teacher: &t_out, pseudo: &pseudo, contrast: contrast.as_ref() };
        let obj = objective(&c, o, &mut st.student, &mut st.mnet, &st.probe, &inputs)?;
        let mut losses = obj.losses;
        let he = obj.partitions.as_deref().map(he_ratio_score);

        if !self.hook_disabled && !self.hooks.is_empty() {
            let ctx = HookContext {
                student: &st.student,
                student_out: &obj.student_out,
                teacher_out: &t_out,
                embeddings: obj.strong_embeddings.as_ref(),
            };
            let mut outs = Vec::with_capacity(self.hooks.len());
            for h in &mut self.hooks {
                outs.push(h.evaluate(&ctx)?);
            }
            if outs.iter().all(|h| h.value.is_finite()) {
                let no_offsets = Matrix::zeros(obj.student_out.offsets.rows(), obj.student_out.offsets.cols());
                for h in outs {
                    losses.reg += h.value;
                    if let Some(d) = &h.d_logits {
                        backward_branch(&mut st.student, &obj.student_out, d, &no_offsets, None)?;
                    }
                    if let Some(g) = &h.d_params {
                        accumulate_detector_grad(&mut st.student, g)?;
                    }
                }
                losses.total = losses.ledger_total();
            } else {
                self.hook_disabled = true;
            }
        }

        let grads_finite = st.student.nets().iter().all(|n| n.params().flat_grad().iter().all(|g| g.is_finite()))
            && st.mnet.params().flat_grad().iter().all(|g| g.is_finite());
        if !losses.total.is_finite() || !grads_finite {
            st.student.zero_grad();
            st.mnet.params_mut().zero_grad();
            return Ok(StepOutcome { losses: None, he: None });
        }
        let (opt_det, opt_mnet) = st.optimizers.split_at_mut(3);
        for (net, opt) in st.student.nets_mut().into_iter().zip(opt_det.iter_mut()) {
            opt.step(net.params_mut())?;
        }
        if o.uses_mapping_network() && (o.uses_calibration() || o.uses_contrastive()) {
            opt_mnet[0].step(st.mnet.params_mut())?;
        }
        Ok(StepOutcome { losses: Some(losses), he })
    }
}

/// Pseudo categories of the weak proposals and the image uncertainty, for
/// the contrastive term. Updates the memory bank and both prototype sets.
fn pseudo_categories(
    c: &TrainConfig,
    o: AdaptOptions,
    st: &mut AdaptState,
    t_out: &BranchOutput,
    pseudo: &PseudoLabelSet,
    omega: f64,
) -> Result<ContrastTargets> {
    let f_weak = &t_out.instance_features;
    let candidates: Vec<(usize, Vec<f64>, f64)> = pseudo
        .indices
        .iter()
        .zip(&pseudo.classes)
        .zip(&pseudo.confidences)
        .map(|((&i, &cls), &conf)| (cls, f_weak.row(i).to_vec(), conf))
        .collect();
    st.bank.update(&candidates)?;
    let bg: Vec<f64> = t_out.detections.iter().map(|d| d.background_prob()).collect();
    let use_mnet = o.uses_mapping_network();
    let mut eval_mnet = st.mnet.clone();
    eval_mnet.set_mode(Mode::Eval);
    let map_z = |m: &Matrix| -> Result<Matrix> {
        if use_mnet {
            Ok(eval_mnet.forward_traced(m)?.0)
        } else {
            Ok(m.clone())
        }
    };
    let identity = |m: &Matrix| -> Result<Matrix> { Ok(m.clone()) };
    let z_weak = map_z(f_weak)?;
    update_prototypes(&mut st.protos_z, &st.bank, &map_z, &z_weak, &bg, c.proto_momentum)?;
    update_prototypes(&mut st.protos_x, &st.bank, &identity, f_weak, &bg, c.proto_momentum)?;
    let km_z = {
        let init = nearest_labels(&z_weak, &st.protos_z.centroids());
        weighted_kmeans_refine(&z_weak, &init.labels, &st.protos_z.centroids(), c.kmeans_rounds)?
    };
    let labels = if omega < 1.0 {
        let init = nearest_labels(f_weak, &st.protos_x.centroids());
        let km_x = weighted_kmeans_refine(f_weak, &init.labels, &st.protos_x.centroids(), c.kmeans_rounds)?;
        (0..z_weak.rows())
            .map(|i| {
                let dx = centroid_distances(f_weak.row(i), &km_x.centroids);
                let dz = centroid_distances(z_weak.row(i), &km_z.centroids);
                warmup_blend(&dx, &dz, omega)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        km_z.labels
    };
    let sigma = image_uncertainty(&t_out.detections, c.nms_levels)?.sigma;
    Ok(ContrastTargets { labels, sigma })
}

/// Per-proposal pseudo categories (`K` is background) and the image
/// uncertainty that gates background negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastTargets {
    pub labels: Vec<usize>,
    pub sigma: f64,
}

/// Everything the differentiable part of an iteration holds fixed.
pub struct ObjectiveInputs<'a> {
    /// Student input: pooled regions of the strong view.
    pub strong_pooled: &'a Matrix,
    /// Teacher on the weak view; its pooled regions also feed the weak'
    /// student pass.
    pub teacher: &'a BranchOutput,
    pub pseudo: &'a PseudoLabelSet,
    /// Required when the contrastive term is enabled.
    pub contrast: Option<&'a ContrastTargets>,
}

pub struct Objective {
    pub losses: IterationLosses,
    pub student_out: BranchOutput,
    pub strong_embeddings: Option<Matrix>,
    pub partitions: Option<Vec<ContrastPartition>>,
}

/// The per-iteration training objective. Accumulates its gradient into the
/// student detector and the mapping network; callers zero them first.
pub fn objective(
    c: &TrainConfig,
    o: AdaptOptions,
    student: &mut Detector,
    mnet: &mut DenseNet,
    probe: &DenseNet,
    inp: &ObjectiveInputs,
) -> Result<Objective> {
    let t_out = inp.teacher;
    let pseudo = inp.pseudo;
    let s_out = run_branch_on_pooled(student, inp.strong_pooled.clone(), &t_out.proposals)?;
    let mt = l_mt(&s_out, pseudo, t_out)?;
    let mut losses = IterationLosses {
        det_box: mt.det_box,
        det_cls: mt.det_cls,
        con: mt.con,
        reg: 0.0,
        grad: None,
        unsup: None,
        uscl: None,
        alpha: c.alpha,
        beta: c.beta,
        total: 0.0,
        pseudo_labels: pseudo.len(),
        sigma: None,
    };
    let mut strong_embeddings = None;
    let mut partitions = None;

    if o.uses_calibration() || o.uses_contrastive() {
        let k = student.classes();
        let wp_out = run_branch_on_pooled(student, t_out.pooled.clone(), &t_out.proposals)?;
        let use_mnet = o.uses_mapping_network();
        let (z_s, tr_s, z_wp, tr_wp) = if use_mnet {
            let (zs, ts) = mnet.forward_traced(&s_out.instance_features)?;
            let (zw, tw) = mnet.forward_traced(&wp_out.instance_features)?;
            (zs, Some(ts), zw, Some(tw))
        } else {
            (s_out.instance_features.clone(), None, wp_out.instance_features.clone(), None)
        };
        let mut d_zs = Matrix::zeros(z_s.rows(), z_s.cols());
        let mut d_zwp = Matrix::zeros(z_wp.rows(), z_wp.cols());

        if o.uses_calibration() {
            let unsup = l_unsup(&EmbeddingPairBatch::new(z_wp.clone(), z_s.clone())?, c.tau)?;
            if !unsup.skipped {
                axpy(&mut d_zs, c.alpha, &unsup.d_strong);
                axpy(&mut d_zwp, c.alpha, &unsup.d_weak_prime);
            }
            losses.unsup = Some(unsup.value);
            if use_mnet {
                let t = Targets { rows: &pseudo.indices, classes: &pseudo.classes };
                let g = l_grad_backward(Some(&mut student.ext), mnet, probe, &t_out.pooled, &s_out.pooled, t, 1.0)?;
                losses.grad = Some(g.value);
            } else {
                losses.grad = Some(0.0);
            }
        }

        if o.uses_contrastive() {
            let ct = inp.contrast.ok_or_else(|| config("the contrastive term needs pseudo categories"))?;
            let parts = build_partitions(&z_s, &ct.labels, k, ct.sigma, c.u)?;
            let uscl = l_uscl(&z_s, &parts, c.lambda, c.tau)?;
            axpy(&mut d_zs, c.beta, &uscl.d_embs);
            losses.uscl = Some(uscl.value);
            losses.sigma = Some(ct.sigma);
            partitions = Some(parts);
        }

        let (d_fs, d_fwp) = match (tr_s, tr_wp) {
            (Some(ts), Some(tw)) => (mnet.backward_traced(&ts, &d_zs)?, mnet.backward_traced(&tw, &d_zwp)?),
            _ => (d_zs, d_zwp),
        };
        backward_features(student, &s_out, &d_fs)?;
        backward_features(student, &wp_out, &d_fwp)?;
        strong_embeddings = Some(z_s);
    }

    backward_branch(student, &s_out, &mt.d_logits, &mt.d_offsets, None)?;
    losses.total = losses.ledger_total();
    Ok(Objective { losses, student_out: s_out, strong_embeddings, partitions })
}

fn axpy(acc: &mut Matrix, a: f64, x: &Matrix) {
    for (v, &d) in acc.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *v += a * d;
    }
}

fn accumulate_detector_grad(det: &mut Detector, flat: &[f64]) -> Result<()> {
    let total: usize = det.nets().iter().map(|n| n.params().trainable_len()).sum();
    if flat.len() != total {
        return Err(config(format!("hook gradient has {} entries, detector has {total}", flat.len())));
    }
    let mut off = 0;
    for net in det.nets_mut() {
        let n = net.params().trainable_len();
        net.params_mut().accumulate_flat_grad(&flat[off..off + n])?;
        off += n;
    }
    Ok(())
}
