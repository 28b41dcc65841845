mod common;

use common::{naive_components, random_mask, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use segimprint::data::{gen_dataset, pnm, DatasetConfig, Sample, CLASS_NAMES};
use segimprint::eval::{
    components, image_level_label, instance_detection, render_overlay, report_csv, score_predictions, write_outputs,
    Connectivity, EvalConfig, EvalError, Verdict, CLASS_COLORS,
};
use segimprint::{Mask, Tensor};

fn all_classes() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

fn test_split() -> Vec<Sample> {
    let config = DatasetConfig {
        train_samples: 3,
        test_defective: 20,
        test_defect_free: 10,
        ..DatasetConfig::default()
    };
    gen_dataset(&config, 5).unwrap().test
}

#[test]
fn components_match_label_propagation() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let m = random_mask(&mut r, 12, 9, 3);
        for class in 0..3 {
            assert_eq!(components(&m, class, Connectivity::Four), naive_components(&m, class), "seed {seed}");
        }
    }
}

#[test]
fn diagonal_pixels_join_only_under_eight_connectivity() {
    let mut m = Mask::background(3, 3);
    m.set(0, 0, 1);
    m.set(1, 1, 1);
    m.set(2, 2, 1);
    assert_eq!(components(&m, 1, Connectivity::Four).len(), 3);
    assert_eq!(components(&m, 1, Connectivity::Eight), vec![vec![0, 4, 8]]);
}

#[test]
fn detection_ignores_relabelling_of_predicted_defects() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let truth = random_mask(&mut r, 16, 16, 6);
        let pred = random_mask(&mut r, 16, 16, 6);
        let mut perm: Vec<u8> = (1..6).collect();
        perm.shuffle(&mut r);
        let mut relabelled = pred.clone();
        for v in relabelled.data_mut() {
            if *v != 0 {
                *v = perm[*v as usize - 1];
            }
        }
        let a = instance_detection(&pred, &truth, Connectivity::Four).unwrap();
        let b = instance_detection(&relabelled, &truth, Connectivity::Four).unwrap();
        let flags = |v: &[segimprint::eval::InstanceRecord]| v.iter().map(|i| (i.class, i.size, i.detected)).collect::<Vec<_>>();
        assert_eq!(flags(&a), flags(&b));
    }
}

#[test]
fn threshold_is_monotone() {
    let mut r = rng(3);
    for _ in 0..100 {
        let m = random_mask(&mut r, 8, 8, 2);
        let t = r.gen_range(0..64);
        if image_level_label(&m, t) == Verdict::DefectFree {
            assert_eq!(image_level_label(&m, t + r.gen_range(1..10)), Verdict::DefectFree);
        }
    }
}

#[test]
fn twenty_pixel_boundary() {
    let mut m = Mask::background(8, 8);
    m.data_mut()[..20].fill(2);
    assert_eq!(image_level_label(&m, 20), Verdict::DefectFree);
    m.data_mut()[20] = 5;
    assert_eq!(image_level_label(&m, 20), Verdict::Defective);
}

#[test]
fn perfect_predictor_scores_full_marks() {
    let samples = test_split();
    let preds: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let r = score_predictions(&all_classes(), &samples, &preds, &EvalConfig::default()).unwrap();
    assert_eq!(r.counts.recall(), Some(1.0));
    assert_eq!(r.counts.precision(), Some(1.0));
    assert_eq!(r.counts.specificity(), Some(1.0));
    for c in &r.classes {
        assert!(c.total > 0);
        assert_eq!(c.rate(), Some(1.0));
        assert_eq!(c.strict_rate(), Some(1.0));
    }
}

#[test]
fn background_predictor_detects_nothing() {
    let samples = test_split();
    let preds: Vec<Mask> = samples.iter().map(|_| Mask::background(64, 64)).collect();
    let r = score_predictions(&all_classes(), &samples, &preds, &EvalConfig::default()).unwrap();
    assert_eq!(r.counts.specificity(), Some(1.0));
    assert_eq!(r.counts.recall(), Some(0.0));
    assert_eq!(r.counts.precision(), None);
    for c in &r.classes {
        assert_eq!(c.rate(), Some(0.0));
    }
}

#[test]
fn classes_without_a_slot_report_zero() {
    let samples = test_split();
    let preds: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let r = score_predictions(&all_classes()[..4], &samples, &preds, &EvalConfig::default()).unwrap();
    for name in ["black_spot", "bad_soldering"] {
        let c = r.class(name).unwrap();
        assert!(!c.in_model && c.total > 0);
        assert_eq!(r.detection_rate(name), 0.0);
    }
    assert_eq!(r.detection_rate("crack"), 1.0);
}

#[test]
fn rates_stay_in_unit_interval() {
    let samples = test_split();
    let mut r = rng(8);
    for _ in 0..10 {
        let preds: Vec<Mask> = samples.iter().map(|_| random_mask(&mut r, 64, 64, 6)).collect();
        let report = score_predictions(&all_classes(), &samples, &preds, &EvalConfig::default()).unwrap();
        let c = report.counts;
        for v in [c.precision(), c.recall(), c.specificity()].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn report_rows_match_test_size() {
    let samples = test_split();
    let preds: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let r = score_predictions(&all_classes(), &samples, &preds, &EvalConfig::default()).unwrap();
    let csv = report_csv(&r);
    assert_eq!(csv.lines().count(), samples.len() + 1);
    assert!(csv.starts_with("id,truth,verdict,background_px"));
}

#[test]
fn catalog_and_length_mismatches_are_errors() {
    let samples = test_split();
    let preds: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let mut names = all_classes();
    names.swap(1, 2);
    assert!(matches!(
        score_predictions(&names, &samples, &preds, &EvalConfig::default()),
        Err(EvalError::CatalogMismatch { .. })
    ));
    assert!(matches!(
        score_predictions(&all_classes(), &samples, &preds[1..], &EvalConfig::default()),
        Err(EvalError::LengthMismatch { .. })
    ));
}

#[test]
fn overlays() {
    let image = Tensor::full(&[1, 8, 8], 0.5);
    let empty = Mask::background(8, 8);
    let plain = render_overlay(&image, &empty, &empty).unwrap();
    assert_eq!(plain.channels, 3);
    assert!(plain.pixels.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));

    let mut crack = Mask::background(8, 8);
    for y in 2..5 {
        for x in 2..5 {
            crack.set(y, x, 1);
        }
    }
    let tinted = render_overlay(&image, &crack, &crack).unwrap();
    let centre = &tinted.pixels[(3 * 8 + 3) * 3..(3 * 8 + 3) * 3 + 3];
    assert!(centre[2] > centre[0] && centre[2] > centre[1], "{centre:?}");
    let edge = &tinted.pixels[(2 * 8 + 2) * 3..(2 * 8 + 2) * 3 + 3];
    assert_eq!(edge, &[255, 255, 255]);
    assert_eq!(CLASS_COLORS[1], [0, 0, 255]);

    let decoded = pnm::decode(&pnm::encode(&tinted)).unwrap();
    assert_eq!(decoded, tinted);
    assert!(pnm::encode(&tinted).starts_with(b"P6"));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let samples = test_split();
    let preds: Vec<Mask> = samples.iter().map(|s| s.mask.clone()).collect();
    let r = score_predictions(&all_classes(), &samples, &preds, &EvalConfig::default()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_outputs(a.path(), &r, &samples, Some(&preds)).unwrap();
    write_outputs(b.path(), &r, &samples, Some(&preds)).unwrap();
    for name in ["report.csv", "instances.csv", "summary.txt"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    let overlays = std::fs::read_dir(a.path().join("overlays")).unwrap().count();
    assert_eq!(overlays, samples.len());
}
