use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rfp_core::experiment::*;
use rfp_core::mcaff::ModelKind;
use rfp_core::radio::dataset::write_dataset;
use rfp_core::radio::{generate_dataset, GenConfig};
use rfp_core::train::TrainConfig;

fn dataset(dir: &Path) -> std::path::PathBuf {
    let (m, f) = generate_dataset(&GenConfig::new(3, 3, 8, 21)).unwrap();
    let path = dir.join("d.wfdi");
    write_dataset(&path, &m, &f).unwrap();
    path
}

fn spec(name: ExperimentName, data: &Path, out: &Path, sweep: Vec<f64>) -> ExperimentSpec {
    ExperimentSpec {
        models: vec![ModelKind::Miq],
        sweep,
        train: TrainConfig {
            batch_size: 8,
            max_epochs: 2,
            seed: 21,
            ..TrainConfig::default()
        },
        ..ExperimentSpec::new(name, data, out, 21)
    }
}

#[test]
fn day_suites_label_their_conditions() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("out");
    let same = run_experiment(&spec(ExperimentName::SameDay, &data, &out, vec![1.0, 3.0])).unwrap();
    assert_eq!(same.conditions(), ["D1", "D3"]);
    let split = run_experiment(&spec(ExperimentName::DaySplit, &data, &out, vec![1.0, 2.0])).unwrap();
    assert_eq!(split.conditions(), ["1/2", "2/1"]);
    for t in [&same, &split] {
        assert_eq!(t.models(), ["miq"]);
        assert!(t.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy) && r.seed == 21));
    }
    assert!(run_experiment(&spec(ExperimentName::DaySplit, &data, &out, vec![3.0])).is_err());
    assert!(run_experiment(&spec(ExperimentName::SameDay, &data, &out, vec![0.0])).is_err());
}

#[test]
fn snr_sweep_reuses_one_trained_cell_per_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("out");
    let mut s = spec(ExperimentName::SnrSweep, &data, &out, vec![4.0, 18.0, 30.0]);
    s.models = vec![ModelKind::Miq, ModelKind::Mcfo];
    let t = run_experiment(&s).unwrap();
    assert_eq!(t.conditions(), ["4dB", "18dB", "30dB"]);
    assert_eq!(t.series("mcfo").len(), 3);
    let prov = t.provenance.as_ref().unwrap();
    assert_eq!(prov.cells.len(), 2);
    for c in &prov.cells {
        let bytes = fs::read(c.checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(sha256_hex(&bytes), c.checkpoint_sha256);
    }

    // a second run loads the cached cells and scores them identically
    let again = run_experiment(&s).unwrap();
    assert_eq!(again.rows.iter().map(|r| r.accuracy).collect::<Vec<_>>(), t.rows.iter().map(|r| r.accuracy).collect::<Vec<_>>());
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = dir.path().join("out");
    let t = run_experiment(&spec(ExperimentName::AblationFraction, &data, &out, vec![0.25, 0.5])).unwrap();
    let files = emit_report(&t, &out).unwrap();
    let back = ResultTable::from_csv(&t.experiment, &fs::read_to_string(&files.csv).unwrap()).unwrap();
    assert_eq!(back.rows, t.rows);
    let svg = fs::read_to_string(&files.svg).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    let prov: Provenance = serde_json::from_str(&fs::read_to_string(files.provenance.unwrap()).unwrap()).unwrap();
    assert_eq!(&prov, t.provenance.as_ref().unwrap());
    assert_eq!(prov.dataset_seed, 21);
}

/// Spearman from the rank-difference formula, valid without ties.
fn rank_difference_spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> { v.iter().map(|a| v.iter().filter(|b| *b < a).count() as f64).collect() };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

proptest! {
    #[test]
    fn spearman_matches_rank_difference_formula(v in prop::collection::hash_set(-1000i32..1000, 2..30), seed in any::<u64>()) {
        let x: Vec<f64> = v.iter().map(|&a| a as f64).collect();
        // distinct y values in a seed-dependent order
        let y: Vec<f64> = (0..x.len()).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1_000_003) as f64 + i as f64 * 1e-3).collect();
        let rho = spearman(&x, &y).unwrap();
        prop_assert!((rho - rank_difference_spearman(&x, &y)).abs() < 1e-9);
        prop_assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }
}
