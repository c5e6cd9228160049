use super::*;
use crate::manifest::Manifest;
use crate::mt::Detector;
use crate::synth::{generate_scenarios, Scenario};

fn small_cfg() -> TrainConfig {
    let mut c = TrainConfig { epochs: 2, pretrain_epochs: 4, pretrain_min_epochs: 2, ..Default::default() };
    c.synth.source_images = 12;
    c.synth.target_images = 10;
    c
}

fn setup(c: &TrainConfig) -> (Detector, Vec<Scenario>) {
    let set = generate_scenarios(c.seed, &c.synth).unwrap();
    let pre = pretrain_source(c, &set.source).unwrap();
    (pre.detector, set.target)
}

fn run(c: &TrainConfig, o: AdaptOptions, src: &Detector, target: &[Scenario]) -> Vec<EpochReport> {
    Trainer::new(c.clone(), o).unwrap().adapt(src, target).unwrap()
}

#[test]
fn disabling_both_wsco_terms_matches_smt() {
    let c = small_cfg();
    let (src, target) = setup(&c);
    let smt = run(&c, AdaptOptions::new(Variant::Smt), &src, &target);
    let off = AdaptOptions { calibration: false, contrastive: false, ..AdaptOptions::new(Variant::Wsco) };
    let ablated = run(&c, off, &src, &target);
    for (a, b) in smt.iter().zip(&ablated) {
        assert_eq!(a.student_checksum, b.student_checksum);
        assert_eq!(a.teacher_checksum, b.teacher_checksum);
        assert!(b.iterations.iter().all(|l| l.grad.is_none() && l.unsup.is_none() && l.uscl.is_none()));
    }
}

#[test]
fn runs_are_deterministic_and_losses_add_up() {
    let c = small_cfg();
    let (src, target) = setup(&c);
    let a = run(&c, AdaptOptions::new(Variant::Wsco), &src, &target);
    let b = run(&c, AdaptOptions::new(Variant::Wsco), &src, &target);
    assert_eq!(a, b);
    for l in a.iter().flat_map(|r| &r.iterations) {
        assert!(l.uscl.is_some() && l.unsup.is_some() && l.grad.is_some());
        assert!((l.total - l.ledger_total()).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let c = small_cfg();
    let (src, target) = setup(&c);
    let (train, eval) = split_target(&target, c.eval_fraction).unwrap();
    let mut t = Trainer::new(c.clone(), AdaptOptions::new(Variant::Wsco)).unwrap();
    let mut straight = t.init_state(&src, &eval).unwrap();
    let full = t.run(&mut straight, &train, &eval, 2).unwrap();

    let mut t = Trainer::new(c.clone(), AdaptOptions::new(Variant::Wsco)).unwrap();
    let mut st = t.init_state(&src, &eval).unwrap();
    t.run(&mut st, &train, &eval, 1).unwrap();
    let text = st.to_manifest().to_text();
    let mut resumed = AdaptState::from_manifest(&Manifest::from_text(&text).unwrap()).unwrap();
    let rest = t.run(&mut resumed, &train, &eval, 2).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0], full[1]);
}

#[test]
fn zero_hook_changes_nothing() {
    let c = small_cfg();
    let (src, target) = setup(&c);
    let plain = run(&c, AdaptOptions::new(Variant::Smt), &src, &target);
    let mut t = Trainer::new(c.clone(), AdaptOptions::new(Variant::Smt)).unwrap();
    t.register_base_regularizer_hook(Box::new(QuadraticPenalty { weight: 0.0 }));
    let hooked = t.adapt(&src, &target).unwrap();
    assert_eq!(plain, hooked);

    let mut t = Trainer::new(c.clone(), AdaptOptions::new(Variant::Smt)).unwrap();
    t.register_base_regularizer_hook(Box::new(QuadraticPenalty { weight: 0.01 }));
    let weighted = t.adapt(&src, &target).unwrap();
    assert_ne!(plain[0].student_checksum, weighted[0].student_checksum);
    assert!(weighted[0].iterations.iter().all(|l| l.reg > 0.0));
}

struct Exploding;

impl Regularizer for Exploding {
    fn name(&self) -> &str {
        "exploding"
    }
    fn evaluate(&mut self, _: &HookContext) -> crate::error::Result<HookOutput> {
        Ok(HookOutput { value: f64::NAN, ..Default::default() })
    }
}

#[test]
fn non_finite_hook_is_disabled() {
    let c = TrainConfig { epochs: 1, ..small_cfg() };
    let (src, target) = setup(&c);
    let plain = run(&c, AdaptOptions::new(Variant::Smt), &src, &target);
    let mut t = Trainer::new(c, AdaptOptions::new(Variant::Smt)).unwrap();
    t.register_base_regularizer_hook(Box::new(Exploding));
    let r = t.adapt(&src, &target).unwrap();
    assert!(r[0].hook_disabled);
    assert_eq!(r[0].student_checksum, plain[0].student_checksum);
}

#[test]
fn weak_only_differs_from_strong_student() {
    let c = TrainConfig { epochs: 1, ..small_cfg() };
    let (src, target) = setup(&c);
    let weak = run(&c, AdaptOptions::new(Variant::WeakOnly), &src, &target);
    let weak_again = run(&TrainConfig { strong_level: 1, ..c.clone() }, AdaptOptions::new(Variant::WeakOnly), &src, &target);
    let smt = run(&c, AdaptOptions::new(Variant::Smt), &src, &target);
    // The strong level is irrelevant when the student sees the weak view.
    assert_eq!(weak[0].student_checksum, weak_again[0].student_checksum);
    assert_ne!(weak[0].student_checksum, smt[0].student_checksum);
}

#[test]
fn trend_rejects_bad_levels() {
    let c = small_cfg();
    let src = Detector::new(c.synth.d_feat, c.synth.classes, &mut crate::rng::rng_for(0, &[0])).unwrap();
    let target = generate_scenarios(0, &c.synth).unwrap().target;
    for bad in [&[][..], &[2, 3], &[1, 3], &[1, 2, 3, 4, 5, 6]] {
        assert!(trend_experiment(&c, &src, &target, bad).is_err());
    }
}

#[test]
fn split_needs_two_scenarios() {
    let c = small_cfg();
    let target = generate_scenarios(0, &c.synth).unwrap().target;
    assert!(split_target(&target[..1], 0.2).is_err());
    let (train, eval) = split_target(&target, 0.2).unwrap();
    assert_eq!((train.len(), eval.len()), (8, 2));
    let (train, eval) = split_target(&target[..2], 0.9).unwrap();
    assert_eq!((train.len(), eval.len()), (1, 1));
}

#[test]
fn empty_inputs_are_errors() {
    let c = small_cfg();
    assert!(pretrain_source(&c, &[]).is_err());
    let (src, target) = setup(&c);
    let mut t = Trainer::new(c.clone(), AdaptOptions::new(Variant::Smt)).unwrap();
    let mut st = t.init_state(&src, &target).unwrap();
    assert!(t.run_epoch(&mut st, &[], &target).is_err());
}

#[test]
fn mismatched_source_model_is_rejected() {
    let c = small_cfg();
    let wrong = Detector::new(c.synth.d_feat, c.synth.classes + 1, &mut crate::rng::rng_for(0, &[0])).unwrap();
    let target = generate_scenarios(0, &c.synth).unwrap().target;
    assert!(Trainer::new(c, AdaptOptions::new(Variant::Smt)).unwrap().adapt(&wrong, &target).is_err());
}
