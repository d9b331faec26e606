mod common;

use pmt_iqa::model::Variant;
use pmt_iqa::protocols::{run_ablation, run_cross, run_within, EvalReport, ProtocolKind, ProtocolOptions};
use pmt_iqa::report::{render_csv, render_text};
use pmt_iqa::synthetic::Distortion;

fn opts(runs: usize) -> ProtocolOptions {
    ProtocolOptions { num_runs: runs, ..ProtocolOptions::default() }
}

#[test]
fn within_dataset_reports_every_run_and_the_median() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(dir.path(), 10, 24, Distortion::GaussianBlur, 1, 24);
    let setup = common::tiny_setup(ds.name(), 24, 2, 3, Variant::PmtFull);
    let report = run_within(&ds, &setup, &opts(3)).unwrap();
    assert_eq!(report.protocol, ProtocolKind::WithinDataset);
    assert_eq!(report.runs.len(), 3);
    let seeds: Vec<u64> = report.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![3, 4, 5]);
    let m = report.median.unwrap();
    let mut s: Vec<f64> = report.runs.iter().map(|r| r.srcc).collect();
    s.sort_by(f64::total_cmp);
    assert_eq!(m.srcc, s[1]);
    assert!(report.curves.is_empty());
    assert_eq!(render_csv(&report).unwrap().lines().count(), 1 + 3);
    assert!(render_text(&report).contains("median"));

    let path = dir.path().join("r.json");
    report.save(&path).unwrap();
    assert_eq!(EvalReport::load(&path).unwrap(), report);
}

#[test]
fn cross_database_trains_on_source_and_scores_target() {
    let dir = tempfile::tempdir().unwrap();
    let a = common::synthetic(&dir.path().join("a"), 8, 24, Distortion::GaussianBlur, 1, 24);
    let b = common::synthetic(&dir.path().join("b"), 6, 24, Distortion::GaussianNoise, 2, 24);
    assert_ne!(a.name(), b.name());
    let setup = common::tiny_setup(a.name(), 24, 1, 0, Variant::PmtFull);
    let o = ProtocolOptions { track_curves: true, ..opts(2) };
    let report = run_cross(&a, &b, &setup, &o).unwrap();
    assert_eq!(report.protocol, ProtocolKind::CrossDatabase);
    assert_eq!((report.train_dataset.as_str(), report.test_dataset.as_str()), (a.name(), b.name()));
    assert_eq!(report.runs.len(), 2);
    assert_eq!(report.curves.len(), 2);
    assert!(report.curves.iter().all(|c| c.log.eval.len() == 1));
    assert!(run_cross(&a, &a, &setup, &opts(1)).is_err());
}

#[test]
fn ablation_covers_all_variants_on_shared_splits() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(dir.path(), 8, 24, Distortion::JpegLike, 7, 24);
    let setup = common::tiny_setup(ds.name(), 24, 2, 0, Variant::PmtFull);
    let report = run_ablation(&ds, &setup, &opts(1)).unwrap();
    let variants = report.variants.as_ref().unwrap();
    assert_eq!(variants.iter().map(|v| v.variant).collect::<Vec<_>>(), Variant::ALL);
    let full = variants[3].params as f64;
    for v in variants {
        assert!((v.params as f64 - full).abs() / full <= 0.10, "{} has {} params", v.variant, v.params);
        assert_eq!(v.runs.len(), 1);
        assert_eq!(v.runs[0].seed, variants[0].runs[0].seed);
        assert_eq!(v.lambdas.len(), 2);
    }
    assert!(variants[2].lambdas.iter().all(|&l| l == (0.5, 0.5)));
    assert!(variants[1].lambdas.iter().all(|&l| l == (1.0, 0.0)));
    assert_eq!(variants[3].lambdas[0], (0.0, 1.0));
    assert_eq!(render_csv(&report).unwrap().lines().count(), 1 + 4);
}

#[test]
fn zero_runs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(dir.path(), 4, 24, Distortion::GaussianBlur, 1, 24);
    let setup = common::tiny_setup(ds.name(), 24, 1, 0, Variant::PmtFull);
    assert!(run_within(&ds, &setup, &opts(0)).is_err());
}
