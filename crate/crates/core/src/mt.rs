//! Mean-teacher plumbing: the detector, region pooling, the two branches,
//! confidence filtering of teacher outputs and the standard MT objective.

use rand::Rng;

use crate::error::{config, Error, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::manifest::Manifest;
use crate::nn::loss::{cross_entropy, smooth_l1};
use crate::nn::scalar::softmax;
use crate::nn::{ema_update, Activation, DenseNet, LayerSpec, Matrix, Trace};
use crate::synth::Scenario;

pub const DEFAULT_CONFIDENCE: f64 = 0.9;
/// Floor applied to the teacher distribution inside the KL term.
pub const KL_FLOOR: f64 = 1e-8;
/// Proposals overlapping every object and clutter region less than this pool
/// the scenario background.
pub const POOL_MIN_IOU: f64 = 0.3;

/// Feature extractor, classification head (`K` classes + background) and
/// box-offset head.
#[derive(Clone, Debug)]
pub struct Detector {
    pub ext: DenseNet,
    pub cls: DenseNet,
    pub reg: DenseNet,
}

const PARTS: [&str; 3] = ["ext", "cls", "reg"];

impl Detector {
    /// The extractor starts as the identity map.
    pub fn new<R: Rng + ?Sized>(d_feat: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if d_feat == 0 || classes == 0 {
            return Err(config("detector needs positive feature width and class count"));
        }
        Ok(Self {
            ext: DenseNet::identity(d_feat),
            cls: DenseNet::new(&[LayerSpec::new(d_feat, classes + 1, Activation::Identity, false)], rng)?,
            reg: DenseNet::new(&[LayerSpec::new(d_feat, 4, Activation::Identity, false)], rng)?,
        })
    }

    pub fn d_feat(&self) -> usize {
        self.ext.input_width()
    }

    pub fn classes(&self) -> usize {
        self.cls.output_width() - 1
    }

    pub fn nets(&self) -> [&DenseNet; 3] {
        [&self.ext, &self.cls, &self.reg]
    }

    pub fn nets_mut(&mut self) -> [&mut DenseNet; 3] {
        [&mut self.ext, &mut self.cls, &mut self.reg]
    }

    pub fn zero_grad(&mut self) {
        for n in self.nets_mut() {
            n.params_mut().zero_grad();
        }
    }

    pub fn checksum(&self) -> String {
        self.nets().iter().map(|n| n.params().checksum()).collect::<Vec<_>>().join(":")
    }

    pub fn all_finite(&self) -> bool {
        self.nets().iter().all(|n| n.params().all_finite())
    }

    /// `self ← rate·self + (1 − rate)·student`.
    pub fn ema_from(&mut self, student: &Detector, rate: f64) -> Result<()> {
        for (t, s) in self.nets_mut().into_iter().zip(student.nets()) {
            ema_update(t.params_mut(), s.params(), rate)?;
        }
        Ok(())
    }

    pub fn store(&self, m: &mut Manifest, prefix: &str) {
        for (part, net) in PARTS.iter().zip(self.nets()) {
            m.put_params(&format!("{prefix}.{part}."), net.params());
        }
    }

    pub fn load(m: &Manifest, prefix: &str, d_feat: usize, classes: usize) -> Result<Self> {
        let specs = [
            vec![LayerSpec::new(d_feat, d_feat, Activation::Identity, false)],
            vec![LayerSpec::new(d_feat, classes + 1, Activation::Identity, false)],
            vec![LayerSpec::new(d_feat, 4, Activation::Identity, false)],
        ];
        let mut nets = Vec::with_capacity(3);
        for (part, spec) in PARTS.iter().zip(&specs) {
            nets.push(DenseNet::from_params(spec, m.take_params(&format!("{prefix}.{part}."))?)?);
        }
        let reg = nets.pop().unwrap();
        let cls = nets.pop().unwrap();
        let ext = nets.pop().unwrap();
        Ok(Self { ext, cls, reg })
    }
}

/// Region feature for each proposal: the best-overlapping object or clutter
/// feature blended with the background by that overlap, or the background
/// alone when nothing overlaps by at least [`POOL_MIN_IOU`].
pub fn pool_regions(s: &Scenario, proposals: &[BBox]) -> Result<Matrix> {
    let d = s.d_feat();
    let mut rows = Vec::with_capacity(proposals.len());
    for p in proposals {
        let mut best: Option<(f64, &[f64])> = None;
        let regions = s
            .instances
            .iter()
            .map(|i| (&i.bbox, i.feature.as_slice()))
            .chain(s.clutter.iter().map(|c| (&c.bbox, c.feature.as_slice())));
        for (b, f) in regions {
            let o = iou(p, b);
            if best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, f));
            }
        }
        let row: Vec<f64> = match best {
            Some((o, f)) if o >= POOL_MIN_IOU => {
                f.iter().zip(&s.background).map(|(&x, &bg)| o * x + (1.0 - o) * bg).collect()
            }
            _ => s.background.clone(),
        };
        rows.push(row);
    }
    Matrix::from_rows(&rows, d)
}

/// `(target − proposal)` per coordinate, in units of the proposal side.
pub fn encode_offsets(proposal: &BBox, target: &BBox) -> Vec<f64> {
    let (w, h) = (proposal.width(), proposal.height());
    let (p, t) = (proposal.coords(), target.coords());
    vec![(t[0] - p[0]) / w, (t[1] - p[1]) / h, (t[2] - p[2]) / w, (t[3] - p[3]) / h]
}

pub fn decode_offsets(proposal: &BBox, offsets: &[f64]) -> BBox {
    let (w, h) = (proposal.width(), proposal.height());
    let p = proposal.coords();
    let c = [p[0] + offsets[0] * w, p[1] + offsets[1] * h, p[2] + offsets[2] * w, p[3] + offsets[3] * h];
    BBox::from_coords_clamped(c.map(|v| v.clamp(0.0, 1.0)), crate::synth::MIN_SIDE)
}

#[derive(Clone, Debug)]
pub(crate) struct BranchTraces {
    ext: Trace,
    cls: Trace,
    reg: Trace,
}

/// One branch evaluated on one scenario, row-aligned with the proposals.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// Pooled region features fed to the extractor.
    pub pooled: Matrix,
    /// Extractor output per proposal.
    pub instance_features: Matrix,
    pub logits: Matrix,
    pub offsets: Matrix,
    /// Proposal box, full class distribution and best foreground score.
    pub detections: Vec<Detection>,
    pub proposals: Vec<BBox>,
    pub(crate) traces: BranchTraces,
}

impl BranchOutput {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Regressed box per proposal.
    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().zip(self.offsets.iter_rows()).map(|(p, o)| decode_offsets(p, o)).collect()
    }
}

/// Runs pooling, extractor and both heads. Fails on an empty proposal list
/// or more proposals than `capacity`.
pub fn run_branch(det: &Detector, s: &Scenario, proposals: &[BBox], capacity: usize) -> Result<BranchOutput> {
    if proposals.is_empty() {
        return Err(config("branch needs at least one proposal"));
    }
    if proposals.len() > capacity {
        return Err(config(format!("{} proposals exceed capacity {capacity}", proposals.len())));
    }
    if s.d_feat() != det.d_feat() {
        return Err(config(format!("scenario width {} does not match detector {}", s.d_feat(), det.d_feat())));
    }
    let pooled = pool_regions(s, proposals)?;
    run_branch_on_pooled(det, pooled, proposals)
}

pub fn run_branch_on_pooled(det: &Detector, pooled: Matrix, proposals: &[BBox]) -> Result<BranchOutput> {
    let (instance_features, ext) = det.ext.forward_traced(&pooled)?;
    let (logits, cls) = det.cls.forward_traced(&instance_features)?;
    let (offsets, reg) = det.reg.forward_traced(&instance_features)?;
    let mut detections = Vec::with_capacity(proposals.len());
    for (p, z) in proposals.iter().zip(logits.iter_rows()) {
        detections.push(Detection::from_distribution(*p, softmax(z))?);
    }
    Ok(BranchOutput {
        pooled,
        instance_features,
        logits,
        offsets,
        detections,
        proposals: proposals.to_vec(),
        traces: BranchTraces { ext, cls, reg },
    })
}

/// Accumulates detector gradients for upstream gradients on the logits, the
/// offsets and (optionally) the instance features of a branch output.
pub fn backward_branch(
    det: &mut Detector,
    out: &BranchOutput,
    d_logits: &Matrix,
    d_offsets: &Matrix,
    d_features: Option<&Matrix>,
) -> Result<()> {
    let mut g = det.cls.backward_traced(&out.traces.cls, d_logits)?;
    g.add_assign(&det.reg.backward_traced(&out.traces.reg, d_offsets)?)?;
    if let Some(extra) = d_features {
        g.add_assign(extra)?;
    }
    det.ext.backward_traced(&out.traces.ext, &g)?;
    Ok(())
}

/// Backward from instance-feature gradients only.
pub fn backward_features(det: &mut Detector, out: &BranchOutput, d_features: &Matrix) -> Result<()> {
    det.ext.backward_traced(&out.traces.ext, d_features)?;
    Ok(())
}

/// Teacher predictions retained as pseudo labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
    pub confidences: Vec<f64>,
    /// Teacher box per retained index, as offsets from its proposal.
    pub box_targets: Vec<Vec<f64>>,
    num_classes: usize,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// One-hot target over `K + 1` entries per retained index.
    pub fn one_hot(&self) -> Vec<Vec<f64>> {
        self.classes
            .iter()
            .map(|&c| {
                let mut v = vec![0.0; self.num_classes + 1];
                v[c] = 1.0;
                v
            })
            .collect()
    }
}

/// Keeps proposals whose best foreground probability reaches `threshold`.
pub fn filter_high_confidence(teacher: &BranchOutput, threshold: f64) -> Result<PseudoLabelSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config(format!("confidence threshold {threshold} outside (0, 1)")));
    }
    let num_classes = teacher.logits.cols() - 1;
    let mut set = PseudoLabelSet { num_classes, ..Default::default() };
    for (i, d) in teacher.detections.iter().enumerate() {
        if d.score >= threshold {
            set.indices.push(i);
            set.classes.push(d.class_id);
            set.confidences.push(d.score);
            set.box_targets.push(teacher.offsets.row(i).to_vec());
        }
    }
    Ok(set)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Computation(format!("{what} is not a distribution (sum {sum})")));
    }
    Ok(())
}

/// `Σ p ln(p / max(q, ε))` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(config("KL arguments differ in length"));
    }
    check_distribution(p, "first KL argument")?;
    check_distribution(q, "second KL argument")?;
    Ok(kl_unchecked(p, q).max(0.0))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln())).sum()
}

/// Components of the MT objective and its gradients on the student outputs.
#[derive(Clone, Debug)]
pub struct MtLoss {
    pub det_box: f64,
    pub det_cls: f64,
    pub con: f64,
    pub d_logits: Matrix,
    pub d_offsets: Matrix,
}

impl MtLoss {
    pub fn det(&self) -> f64 {
        self.det_box + self.det_cls
    }

    pub fn total(&self) -> f64 {
        self.det() + self.con
    }
}

/// Detection loss on the pseudo-labeled indices (smooth-L1 towards the teacher
/// box plus cross-entropy against its class) and the mean KL consistency
/// `D(student ∥ teacher)` over every proposal.
pub fn l_mt(student: &BranchOutput, pseudo: &PseudoLabelSet, teacher: &BranchOutput) -> Result<MtLoss> {
    if student.len() != teacher.len() || student.logits.cols() != teacher.logits.cols() {
        return Err(config("student and teacher outputs are not aligned"));
    }
    let (det_box, d_offsets) = smooth_l1(&student.offsets, &pseudo.indices, &pseudo.box_targets);
    let (det_cls, mut d_logits) = cross_entropy(&student.logits, &pseudo.indices, &pseudo.classes);
    let m = student.len();
    let inv = 1.0 / m as f64;
    let mut con = 0.0;
    for i in 0..m {
        let p = &student.detections[i].class_dist;
        let q = &teacher.detections[i].class_dist;
        let kl = kl_unchecked(p, q);
        con += kl;
        let g = d_logits.row_mut(i);
        for j in 0..p.len() {
            if p[j] > 0.0 {
                g[j] += inv * p[j] * (p[j].ln() - q[j].max(KL_FLOOR).ln() - kl);
            }
        }
    }
    Ok(MtLoss { det_box, det_cls, con: con * inv, d_logits, d_offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::nn::ParamSet;
    use crate::synth::{generate_scenarios, SynthConfig};

    fn scenario(noise: f64) -> Scenario {
        let cfg = SynthConfig { source_images: 1, target_images: 1, noise, ..Default::default() };
        generate_scenarios(5, &cfg).unwrap().target[0].clone()
    }

    #[test]
    fn exact_proposal_pools_instance_feature() {
        let s = scenario(0.0);
        let inst = &s.instances[0];
        let pooled = pool_regions(&s, &[inst.bbox]).unwrap();
        assert_eq!(pooled.row(0), inst.feature.as_slice());
    }

    #[test]
    fn far_proposal_pools_background() {
        let s = scenario(0.35);
        let far = (0..200)
            .map(|k| {
                let x = (k % 20) as f64 * 0.045;
                let y = (k / 20) as f64 * 0.09;
                BBox::new(x, y, x + 0.05, y + 0.05).unwrap()
            })
            .find(|b| s.instances.iter().all(|i| iou(b, &i.bbox) < 0.3) && s.clutter.iter().all(|c| iou(b, &c.bbox) < 0.3))
            .unwrap();
        assert_eq!(pool_regions(&s, &[far]).unwrap().row(0), s.background.as_slice());
    }

    #[test]
    fn branch_validates_proposals() {
        let s = scenario(0.35);
        let det = Detector::new(64, 4, &mut rng_for(0, &[])).unwrap();
        assert!(matches!(run_branch(&det, &s, &[], 300), Err(Error::Config(_))));
        let many = vec![s.instances[0].bbox; 301];
        assert!(run_branch(&det, &s, &many, 300).is_err());
        let out = run_branch(&det, &s, &many[..3], 300).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.instance_features.shape(), (3, 64));
    }

    fn branch_with_logits(rows: Vec<Vec<f64>>) -> BranchOutput {
        let k1 = rows[0].len();
        let logits = Matrix::from_rows(&rows, k1).unwrap();
        let boxes: Vec<BBox> = (0..rows.len()).map(|_| BBox::new(0.1, 0.1, 0.3, 0.3).unwrap()).collect();
        let det = Detector {
            ext: DenseNet::identity(k1),
            cls: DenseNet::identity(k1),
            reg: DenseNet::from_params(
                &[LayerSpec::new(k1, 4, Activation::Identity, false)],
                {
                    let mut p = ParamSet::new();
                    p.push(crate::nn::Param::new("l0.weight", (k1, 4), vec![0.0; k1 * 4]).unwrap()).unwrap();
                    p.push(crate::nn::Param::new("l0.bias", (1, 4), vec![0.0; 4]).unwrap()).unwrap();
                    p
                },
            )
            .unwrap(),
        };
        run_branch_on_pooled(&det, logits, &boxes).unwrap()
    }

    #[test]
    fn uniform_teacher_yields_no_pseudo_labels() {
        let t = branch_with_logits(vec![vec![0.0; 3]; 4]);
        assert!(filter_high_confidence(&t, DEFAULT_CONFIDENCE).unwrap().is_empty());
    }

    #[test]
    fn confident_detection_is_retained() {
        // softmax([ln 19, 0, -inf-ish]) puts 0.95 on class 0.
        let t = branch_with_logits(vec![vec![19f64.ln(), 0.0, -60.0], vec![0.0, 0.0, 0.0]]);
        let p = filter_high_confidence(&t, 0.9).unwrap();
        assert_eq!(p.indices, vec![0]);
        assert_eq!(p.one_hot(), vec![vec![1.0, 0.0, 0.0]]);
        assert!((p.confidences[0] - 0.95).abs() < 1e-9);
        assert!(filter_high_confidence(&t, 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        for k in 2..8 {
            let u = vec![1.0 / k as f64; k];
            assert!(kl_divergence(&u, &u).unwrap().abs() < 1e-15);
        }
        assert!(matches!(kl_divergence(&[0.6, 0.6], &[0.5, 0.5]), Err(Error::Computation(_))));
    }

    #[test]
    fn identical_branches_have_zero_mt_loss() {
        let rows = vec![vec![0.2, -0.1, 0.5], vec![1.0, 0.0, -1.0]];
        let s = branch_with_logits(rows.clone());
        let t = branch_with_logits(rows);
        let l = l_mt(&s, &PseudoLabelSet::default(), &t).unwrap();
        assert!(l.total().abs() < 1e-15);
    }

    #[test]
    fn one_hot_student_against_uniform_teacher() {
        let s = branch_with_logits(vec![vec![60.0, 0.0]]);
        let t = branch_with_logits(vec![vec![0.0, 0.0]]);
        let l = l_mt(&s, &PseudoLabelSet::default(), &t).unwrap();
        assert!((l.con - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.det(), 0.0);
    }
}
