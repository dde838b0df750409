mod common;

use std::fs;

use advpatch::applier::{BoundingBox, TransformConfig};
use advpatch::data::Split;
use advpatch::detector::fixture::fixture_detector;
use advpatch::detector::Detection;
use advpatch::evaluator::{
    curve_from_matches, evaluate_condition, pr_curve, recall_at, report, working_point, ConditionKind, ConditionResult,
    EvalCondition, EvalOptions, ImageDetections,
};
use advpatch::patch::{init_patch, InitMode};
use advpatch::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Enumerates every distinct threshold, computes precision and recall by
/// counting, takes the best precision at equal-or-higher recall, and
/// integrates over recall levels.
fn ap_oracle(pairs: &[(f64, bool)], num_gt: usize) -> f64 {
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let pr: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<_> = pairs.iter().filter(|p| p.0 >= t).collect();
            let tp = kept.iter().filter(|p| p.1).count();
            (tp as f64 / kept.len() as f64, tp as f64 / num_gt as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    let mut levels: Vec<f64> = pr.iter().map(|p| p.1).collect();
    levels.dedup();
    for r in levels {
        let interp = pr.iter().filter(|p| p.1 >= r).map(|p| p.0).fold(0.0, f64::max);
        ap += (r - prev) * interp;
        prev = r;
    }
    ap
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<(f64, bool)>, usize) {
    let n = rng.gen_range(0..=20);
    let pairs: Vec<(f64, bool)> = (0..n)
        .map(|_| (rng.gen_range(0..10) as f64 / 10.0, rng.gen_bool(0.5)))
        .collect();
    let tps = pairs.iter().filter(|p| p.1).count();
    (pairs, tps + rng.gen_range(0..4).max(usize::from(tps == 0)))
}

#[test]
fn ap_equals_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let (pairs, gt) = random_case(&mut rng);
        let curve = curve_from_matches(pairs.clone(), gt).unwrap();
        assert_eq!(curve.ap, ap_oracle(&pairs, gt), "case {case}: {pairs:?} gt {gt}");
    }
}

#[test]
fn ap_worked_example() {
    let c = curve_from_matches(vec![(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
    assert!((c.ap - 0.8333333333333333).abs() < 1e-12);
}

fn det(cx: f64, conf: f64) -> Detection {
    Detection {
        bbox: BoundingBox {
            cx,
            cy: 0.5,
            w: 0.2,
            h: 0.4,
        },
        objectness: conf,
        class_index: 0,
        class_prob: 1.0,
        confidence: conf,
    }
}

fn image(dets: Vec<Detection>, gt: Vec<f64>) -> ImageDetections {
    ImageDetections {
        path: "x".into(),
        detections: dets,
        ground_truth: gt
            .into_iter()
            .map(|cx| BoundingBox {
                cx,
                cy: 0.5,
                w: 0.2,
                h: 0.4,
            })
            .collect(),
    }
}

#[test]
fn matching_is_one_to_one() {
    // Two detections on one GT: only the more confident one counts.
    let imgs = [image(
        vec![det(0.3, 0.9), det(0.31, 0.8), det(0.7, 0.6)],
        vec![0.3, 0.7],
    )];
    let c = pr_curve(&imgs, 0.5).unwrap();
    let last = c.points.last().unwrap();
    assert_eq!((last.precision, last.recall), (2.0 / 3.0, 1.0));
    assert_eq!(recall_at(&imgs, 0.85, 0.5), 50.0);
    assert_eq!(recall_at(&imgs, 0.0, 0.5), 100.0);
    assert_eq!(recall_at(&[image(vec![], vec![0.3])], 0.0, 0.5), 0.0);
    assert!(matches!(
        pr_curve(&[image(vec![det(0.3, 0.9)], vec![])], 0.5),
        Err(Error::InvalidArgument(_))
    ));
}

proptest! {
    #[test]
    fn recall_is_monotone_in_threshold(confs in prop::collection::vec(0.0f64..1.0, 0..12),
                                       xs in prop::collection::vec(0.1f64..0.9, 12),
                                       gts in prop::collection::vec(0.1f64..0.9, 1..6)) {
        let dets = confs.iter().zip(&xs).map(|(c, x)| det(*x, *c)).collect();
        let imgs = [image(dets, gts)];
        let mut prev = f64::INFINITY;
        for k in 0..=20 {
            let r = recall_at(&imgs, k as f64 / 20.0, 0.5);
            prop_assert!((0.0..=100.0).contains(&r));
            prop_assert!(r <= prev);
            prev = r;
        }
        let curve = pr_curve(&imgs, 0.5).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].recall <= w[1].recall);
        }
        prop_assert!((0.0..=1.0).contains(&curve.ap));
    }
}

#[test]
fn clean_condition_recovers_every_pseudo_label() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::desk_dataset(dir.path(), 5, 12, Split::Test);
    let det = fixture_detector(0);
    let opts = EvalOptions::default();
    let imgs = evaluate_condition(&det, &ds, &EvalCondition::clean(), &TransformConfig::default(), &opts).unwrap();
    let min_conf = ds
        .items
        .iter()
        .flat_map(|i| i.boxes.iter().map(|b| b.confidence))
        .fold(1.0, f64::min);
    assert_eq!(recall_at(&imgs, min_conf, 0.5), 100.0);
    assert_eq!(recall_at(&imgs, 0.0, 0.5), 100.0);
    let curve = pr_curve(&imgs, 0.5).unwrap();
    let wp = working_point(&curve).unwrap();
    assert_eq!(recall_at(&imgs, wp, 0.5), 100.0);
}

#[test]
fn noise_condition_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::desk_dataset(dir.path(), 5, 6, Split::Test);
    let det = fixture_detector(0);
    let t = TransformConfig {
        base_scale: 0.6,
        ..TransformConfig::default()
    };
    let opts = EvalOptions {
        seed: 3,
        passes: 2,
        ..EvalOptions::default()
    };
    let noise = EvalCondition::noise(32, 3).unwrap();
    let a = evaluate_condition(&det, &ds, &noise, &t, &opts).unwrap();
    let b = evaluate_condition(&det, &ds, &EvalCondition::noise(32, 3).unwrap(), &t, &opts).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a, b);
    let c = evaluate_condition(&det, &ds, &noise, &t, &EvalOptions { seed: 4, ..opts }).unwrap();
    assert_ne!(a, c);
}

fn results(dir: &std::path::Path, kinds: &[ConditionKind]) -> Vec<ConditionResult> {
    let ds = common::desk_dataset(dir, 7, 8, Split::Test);
    let det = fixture_detector(0);
    let t = TransformConfig {
        base_scale: 0.6,
        ..TransformConfig::default()
    };
    let opts = EvalOptions::default();
    let gray = init_patch(32, 32, InitMode::Gray, 0).unwrap();
    kinds
        .iter()
        .map(|&kind| {
            let cond = match kind {
                ConditionKind::Clean => EvalCondition::clean(),
                ConditionKind::Noise => EvalCondition::noise(32, 0).unwrap(),
                k => EvalCondition::trained(k, Some(gray.clone())).unwrap(),
            };
            let images = evaluate_condition(&det, &ds, &cond, &t, &opts).unwrap();
            let curve = pr_curve(&images, 0.5).unwrap();
            ConditionResult { kind, images, curve }
        })
        .collect()
}

#[test]
fn report_writes_files_in_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let kinds = [
        ConditionKind::Cls,
        ConditionKind::Obj,
        ConditionKind::Noise,
        ConditionKind::ObjCls,
        ConditionKind::Clean,
    ];
    let res = results(dir.path(), &kinds);
    let out = dir.path().join("report");
    let rows = report(&res, &out, 0.5).unwrap();
    let order: Vec<_> = rows.iter().map(|r| r.condition).collect();
    assert_eq!(order, ConditionKind::ALL);
    assert_eq!(rows[0].recall_pct, 100.0);
    for name in [
        "pr_clean.csv",
        "pr_noise.csv",
        "pr_obj.csv",
        "pr_cls.csv",
        "pr_obj-cls.csv",
        "pr_curves.png",
    ] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let summary = fs::read_to_string(out.join("recall_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "condition,recall_pct,threshold_used");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["CLEAN", "NOISE", "OBJ-CLS", "OBJ", "CLS"]);

    let first: Vec<Vec<u8>> = ["recall_summary.csv", "pr_noise.csv", "pr_curves.png"]
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect();
    let again = results(dir.path(), &kinds);
    report(&again, &out, 0.5).unwrap();
    let second: Vec<Vec<u8>> = ["recall_summary.csv", "pr_noise.csv", "pr_curves.png"]
        .iter()
        .map(|n| fs::read(out.join(n)).unwrap())
        .collect();
    assert_eq!(first, second);
}

#[test]
fn report_with_single_condition_and_without_clean() {
    let dir = tempfile::tempdir().unwrap();
    let res = results(dir.path(), &[ConditionKind::Clean]);
    let out = dir.path().join("one");
    assert_eq!(report(&res, &out, 0.5).unwrap().len(), 1);
    assert_eq!(
        fs::read_to_string(out.join("recall_summary.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let noise_only = results(dir.path(), &[ConditionKind::Noise]);
    assert!(report(&noise_only, &dir.path().join("none"), 0.5).is_err());
}
