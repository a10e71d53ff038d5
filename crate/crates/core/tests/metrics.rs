mod common;

use common::*;
use image::{GrayImage, Luma};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use sam3unet::metrics::{self, evaluate_folder, FMode, MetricsConfig};
use sam3unet::Error;

fn example() -> (Array2<f64>, Array2<f64>) {
    (array![[0.9, 0.1, 0.3], [0.2, 0.8, 0.6], [0.0, 0.7, 0.4]], array![[1.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 1.0, 0.0]])
}

#[test]
fn frozen_values_on_a_fixed_example() {
    let (p, g) = example();
    let (pv, gv) = (p.view(), g.view());
    assert!((metrics::mae(pv, gv).unwrap() - 2.0 / 9.0).abs() < 1e-12);
    assert_eq!(metrics::iou(pv, gv, 0.5).unwrap(), 1.0);
    // Adaptive threshold 2 * 4/9 keeps 0.9 only: precision 1, recall 1/4.
    let f_adapt = 1.3 * 0.25 / (0.3 + 0.25);
    assert!((metrics::f_measure(pv, gv, FMode::Adaptive).unwrap() - f_adapt).abs() < 1e-12);
    assert_eq!(metrics::f_measure(pv, gv, FMode::Max).unwrap(), 1.0);
    assert!((metrics::s_measure(pv, gv, 0.5).unwrap() - S_EXAMPLE).abs() < 1e-12);
    assert!((metrics::e_measure_mean(pv, gv).unwrap() - E_EXAMPLE).abs() < 1e-12);
}

const S_EXAMPLE: f64 = 0.866_105_553_384_104_6;
const E_EXAMPLE: f64 = 0.662_416_596_579_274_5;

#[test]
fn reference_implementations_agree_on_the_fixed_example() {
    let (p, g) = example();
    assert!((s_measure(&p, &g) - S_EXAMPLE).abs() < 1e-12);
    assert!((e_mean(&p, &g) - E_EXAMPLE).abs() < 1e-12);
}

#[test]
fn matches_scalar_references_on_random_instances() {
    let mut r = rng(1234);
    for _ in 0..300 {
        let (p, g) = random_metric_instance(&mut r);
        let (pv, gv) = (p.view(), g.view());
        let t = r.random_range(0.05..0.95);
        assert!((metrics::iou(pv, gv, t).unwrap() - iou(&p, &g, t)).abs() < 1e-12);
        assert!((metrics::mae(pv, gv).unwrap() - mae(&p, &g)).abs() < 1e-12);
        assert!((metrics::f_measure(pv, gv, FMode::Adaptive).unwrap() - f_adaptive(&p, &g)).abs() < 1e-12);
        assert!((metrics::f_measure(pv, gv, FMode::Max).unwrap() - f_max(&p, &g)).abs() < 1e-12);
        assert!((metrics::s_measure(pv, gv, 0.5).unwrap() - s_measure(&p, &g)).abs() < 1e-10);
        assert!((metrics::e_measure_mean(pv, gv).unwrap() - e_mean(&p, &g)).abs() < 1e-10);
    }
}

#[test]
fn degenerate_masks() {
    let zeros = Array2::<f64>::zeros((4, 4));
    let ones = Array2::<f64>::ones((4, 4));
    let half = Array2::from_elem((4, 4), 0.5);
    assert_eq!(metrics::iou(zeros.view(), zeros.view(), 0.5).unwrap(), 1.0);
    assert_eq!(metrics::s_measure(half.view(), zeros.view(), 0.5).unwrap(), 0.5);
    assert_eq!(metrics::s_measure(half.view(), ones.view(), 0.5).unwrap(), 0.5);
    assert_eq!(metrics::e_measure_mean(zeros.view(), zeros.view()).unwrap(), 1.0);
    assert_eq!(metrics::f_measure(zeros.view(), ones.view(), FMode::Max).unwrap(), 0.0);
    assert_eq!(metrics::mae(zeros.view(), ones.view()).unwrap(), 1.0);
}

#[test]
fn size_mismatch_is_a_shape_error() {
    let a = Array2::<f64>::zeros((2, 3));
    let b = Array2::<f64>::zeros((3, 2));
    assert!(matches!(metrics::mae(a.view(), b.view()), Err(Error::Shape(_))));
}

#[test]
fn f_mode_parses() {
    assert_eq!("max".parse::<FMode>().unwrap(), FMode::Max);
    assert!(matches!("mean".parse::<FMode>(), Err(Error::Config { ref field, .. }) if field == "metrics.f_mode"));
}

fn write_gray(path: &std::path::Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
}

#[test]
fn folder_evaluation_resamples_and_tracks_unmatched() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    let square = |x: u32, y: u32, n: u32| if x < n / 2 && y < n / 2 { 255 } else { 0 };
    write_gray(&gt.join("a.png"), 16, 16, |x, y| square(x, y, 16));
    write_gray(&pred.join("a.png"), 32, 32, |x, y| square(x, y, 32));
    write_gray(&gt.join("b.png"), 8, 8, |_, _| 0);
    write_gray(&pred.join("b.png"), 8, 8, |_, _| 0);
    write_gray(&pred.join("extra.png"), 8, 8, |_, _| 0);

    let report = evaluate_folder("toy", &pred, &gt, &MetricsConfig::default()).unwrap();
    let s = &report.datasets["toy"];
    assert_eq!(s.count, 2);
    assert_eq!(s.iou, 1.0);
    assert!(s.mae < 1e-12);
    assert_eq!(report.unmatched.len(), 1);
    let text = report.to_text();
    assert!(text.contains("toy.iou = 1.0000"));
    assert!(text.contains("toy.count = 2"));
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["datasets"]["toy"]["count"], 2);

    let strict = MetricsConfig { strict: true, ..MetricsConfig::default() };
    assert!(matches!(evaluate_folder("toy", &pred, &gt, &strict), Err(Error::Unmatched(v)) if v.len() == 1));
}

proptest! {
    #[test]
    fn scores_lie_in_the_unit_interval(seed in 0u64..100_000) {
        let (p, g) = random_metric_instance(&mut rng(seed));
        let (pv, gv) = (p.view(), g.view());
        for v in [
            metrics::iou(pv, gv, 0.5).unwrap(),
            metrics::mae(pv, gv).unwrap(),
            metrics::f_measure(pv, gv, FMode::Adaptive).unwrap(),
            metrics::f_measure(pv, gv, FMode::Max).unwrap(),
            metrics::s_measure(pv, gv, 0.5).unwrap(),
            metrics::e_measure_mean(pv, gv).unwrap(),
        ] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
