use proptest::prelude::*;

use wsco::contrastive::{build_partitions, image_uncertainty};
use wsco::geometry::{fp_gain, iou, match_image, nms_indices, BBox, Counts, Detection, GroundTruth};
use wsco::labeling::{update_prototypes, MemoryBank, PrototypeSet};
use wsco::nn::Matrix;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.7f64, 0.0..0.7f64, 0.02..0.3f64, 0.02..0.3f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((bbox(), 0..3usize, 0.0..1.0f64), 0..max)
        .prop_map(|v| v.into_iter().map(|(b, c, s)| Detection::scored(b, c, s)).collect())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_separated_score_ordered_subset(dets in detections(20), thr in 0.05..0.95f64) {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let keep = nms_indices(&boxes, &scores, thr);
        prop_assert!(keep.windows(2).all(|w| scores[w[0]] >= scores[w[1]]));
        for (a, &i) in keep.iter().enumerate() {
            for &j in &keep[a + 1..] {
                prop_assert!(iou(&boxes[i], &boxes[j]) <= thr);
            }
        }
        if let Some(top) = (0..dets.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))) {
            prop_assert_eq!(keep[0], top);
        }
        // Every dropped box overlaps some kept, better-ranked box.
        for i in (0..dets.len()).filter(|i| !keep.contains(i)) {
            prop_assert!(keep.iter().any(|&k| iou(&boxes[k], &boxes[i]) > thr));
        }
    }

    #[test]
    fn nms_is_monotone_in_threshold(dets in detections(12)) {
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        prop_assert_eq!(nms_indices(&boxes, &scores, 1.0).len(), dets.len());
        let at_zero = nms_indices(&boxes, &scores, 0.0);
        for (a, &i) in at_zero.iter().enumerate() {
            for &j in &at_zero[a + 1..] {
                prop_assert_eq!(iou(&boxes[i], &boxes[j]), 0.0);
            }
        }
    }

    #[test]
    fn match_counts_add_up(
        dets in detections(10),
        gts in prop::collection::vec((bbox(), 0..3usize), 0..8),
        thr in 0.1..0.9f64,
    ) {
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(bbox, class_id)| GroundTruth { bbox, class_id }).collect();
        let m = match_image(&dets, &gts, thr);
        let t = m.counts.total();
        prop_assert_eq!(t.tp + t.fp, dets.len());
        prop_assert_eq!(t.tp + t.fn_, gts.len());
        prop_assert_eq!(m.is_tp.iter().filter(|&&b| b).count(), t.tp);
        for (c, counts) in &m.counts.per_class {
            let n_gt = gts.iter().filter(|g| g.class_id == *c).count();
            prop_assert_eq!(counts.tp + counts.fn_, n_gt);
        }
    }

    #[test]
    fn uncertainty_ignores_input_order(dets in detections(10), rot in 0..10usize) {
        // Distinct scores so the ranking does not depend on input order.
        let dets: Vec<Detection> = dets
            .into_iter()
            .enumerate()
            .map(|(i, d)| Detection::scored(d.bbox, d.class_id, d.score * 0.5 + i as f64 * 1e-3))
            .collect();
        let mut shuffled = dets.clone();
        if !shuffled.is_empty() {
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
        }
        let a = image_uncertainty(&dets, 9).unwrap();
        let b = image_uncertainty(&shuffled, 9).unwrap();
        prop_assert_eq!(a.counts.clone(), b.counts);
        prop_assert!(a.sigma >= 0.0);
        prop_assert!(a.counts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn partitions_cover_every_other_row(
        rows in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 2..12),
        labels in prop::collection::vec(0..4usize, 12),
        sigma in 0.0..40.0f64,
    ) {
        let n = rows.len();
        let labels = &labels[..n];
        let embs = Matrix::from_rows(&rows, 3).unwrap();
        for p in build_partitions(&embs, labels, 3, sigma, 20.0).unwrap() {
            let mut all: Vec<usize> = p.positives.iter().chain(&p.complement).copied().collect();
            all.push(p.anchor);
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let mut split: Vec<usize> = p.hard.iter().chain(&p.easy).copied().collect();
            split.sort_unstable();
            prop_assert_eq!(split, p.positives.clone());
            prop_assert!(p.negatives.iter().all(|j| p.complement.contains(j)));
            prop_assert!(p.background.iter().all(|j| p.complement.contains(j)));
        }
    }

    #[test]
    fn prototype_ema_contracts(
        old in prop::collection::vec(-5.0..5.0f64, 3),
        feats in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 1..6),
        eta in 0.0..0.999f64,
    ) {
        let mut protos = PrototypeSet::new(1);
        protos.foreground[0] = Some(old.clone());
        let mut bank = MemoryBank::new(1, 10).unwrap();
        bank.update(&feats.iter().map(|f| (0, f.clone(), 1.0)).collect::<Vec<_>>()).unwrap();
        let mean: Vec<f64> = (0..3).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / feats.len() as f64).collect();
        let weak = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]], 3).unwrap();
        update_prototypes(&mut protos, &bank, &|m| Ok(m.clone()), &weak, &[1.0], eta).unwrap();
        let new = protos.foreground[0].as_ref().unwrap();
        let dist = |a: &[f64]| a.iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>().sqrt();
        prop_assert!((dist(new) - (1.0 - eta) * dist(&old)).abs() < 1e-9);
    }

    #[test]
    fn fp_gain_is_ratio_of_changes(tp in 0..50usize, fp in 0..50usize, dtp in 0..20usize, dfp in 1..20usize) {
        let src = Counts { tp, fp, fn_: 0 };
        let now = Counts { tp: tp + dtp, fp: fp + dfp, fn_: 0 };
        prop_assert!((fp_gain(&src, &now) - dtp as f64 / dfp as f64).abs() < 1e-12);
    }
}
