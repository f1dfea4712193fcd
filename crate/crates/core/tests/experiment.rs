mod common;

use std::path::Path;

use cgp_nas::catalog::default_catalog;
use cgp_nas::evolution::FitnessRecord;
use cgp_nas::experiment::{read_json, run_experiment, sweep, ExperimentError, RunConfig, RunReport, SweepSummary};
use cgp_nas::genome::Genome;

fn tiny_config(root: &Path) -> RunConfig {
    let data = root.join("synth");
    let (ti, tl) = common::write_synthetic_idx(&data, "train", 400, 1);
    let (si, sl) = common::write_synthetic_idx(&data, "t10k", 100, 2);
    let text = format!(
        "cgp.cols = 6\ncgp.levels_back = 3\nmutation_rate = 0.2\ngenerations = 2\neval_epochs = 1\n\
         train_epochs = 2\neval_records = 100\nfinal_repeats = 2\nfinal_train_limit = 200\n\
         final_test_limit = 100\nseed = 7\n\
         train_images = {}\ntrain_labels = {}\ntest_images = {}\ntest_labels = {}\n",
        ti.display(),
        tl.display(),
        si.display(),
        sl.display()
    );
    RunConfig::parse(&text, None).unwrap()
}

#[test]
fn end_to_end_run_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("run");
    let report = run_experiment(&cfg, &default_catalog(), &out).unwrap();

    assert_eq!(report.dataset, "synth");
    assert_eq!(report.final_accuracies.len(), 2);
    assert!(report.final_accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    let mean = report.final_accuracies.iter().sum::<f64>() / 2.0;
    assert!((report.mean_accuracy - mean).abs() < 1e-12);
    // P x G x E x T = 1 x 2 x 1 x 2
    assert_eq!(report.budget, 4);

    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], FitnessRecord::CSV_HEADER);
    assert_eq!(lines.len(), 1 + cfg.generations);
    let best: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*best.last().unwrap(), report.evolution.best_fitness);

    let genome = std::fs::read_to_string(out.join("best.genome")).unwrap();
    assert_eq!(genome, report.evolution.best_genome);
    Genome::from_text(&genome, &default_catalog()).unwrap();
    for f in ["best.dot", "config.txt", "catalog.txt", "evolve.json", "train_log.csv", "best.params"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let back: RunReport = read_json(&out.join("report.json")).unwrap();
    assert_eq!(back.final_accuracies, report.final_accuracies);
    assert_eq!(RunConfig::parse(&std::fs::read_to_string(out.join("config.txt")).unwrap(), None).unwrap(), cfg);
}

#[test]
fn same_seed_same_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = run_experiment(&cfg, &default_catalog(), &tmp.path().join("a")).unwrap();
    let b = run_experiment(&cfg, &default_catalog(), &tmp.path().join("b")).unwrap();
    let ja = serde_json::to_string(&a.without_timing()).unwrap();
    let jb = serde_json::to_string(&b.without_timing()).unwrap();
    assert_eq!(ja, jb);
    for f in ["history.csv", "best.genome", "best.dot", "train_log.csv"] {
        assert_eq!(std::fs::read(tmp.path().join("a").join(f)).unwrap(), std::fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_summary_matches_cell_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.sweep_mutation_rates = vec![0.1, 0.3];
    cfg.sweep_generations = vec![1];
    cfg.final_repeats = 1;
    let out = tmp.path().join("sweep");
    let s = sweep(&cfg, &default_catalog(), &out, 2).unwrap();
    assert_eq!(s.cells.len(), 2);
    for cell in &s.cells {
        let r = cell.outcome.as_ref().unwrap();
        let report: RunReport = read_json(&cell.dir.join("report.json")).unwrap();
        assert_eq!(r.accuracies, report.final_accuracies);
        assert_eq!(r.mean, report.mean_accuracy);
        assert_eq!(cell.budget, 2);
    }
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv, s.to_csv());
    assert_eq!(csv.lines().count(), 3);
    let back: SweepSummary = read_json(&out.join("summary.json")).unwrap();
    assert_eq!(back.cells.len(), 2);
}

#[test]
fn config_errors_carry_line_numbers() {
    match RunConfig::parse("seed = 1\n\nbogus_key = 3\n", None) {
        Err(ExperimentError::Config { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    assert!(RunConfig::parse("cgp.rows = 2\n", None).is_err());
    assert!(RunConfig::parse("mutation_rate = 1.5\n", None).and_then(|c| c.validate()).is_err());
}

#[test]
fn missing_dataset_is_an_error_not_a_panic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(tmp.path());
    cfg.datasets[0].train_images = tmp.path().join("nope");
    let e = run_experiment(&cfg, &default_catalog(), &tmp.path().join("x")).unwrap_err();
    assert!(matches!(e.kind(), "io" | "data"), "{e}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let standard = RunConfig::from_file(&dir.join("standard.conf")).unwrap();
    assert_eq!(standard, RunConfig { datasets: standard.datasets.clone(), ..RunConfig::default() });
    assert_eq!(standard.datasets.iter().map(|d| d.name.as_str()).collect::<Vec<_>>(), ["mnist", "fashion"]);
    assert_eq!(cgp_nas::budget(&standard.budget_spec()).unwrap(), 25_000);

    let reduced = RunConfig::from_file(&dir.join("reduced.conf")).unwrap();
    assert_eq!((reduced.generations, reduced.mutation_rate, reduced.eval_epochs), (10, 0.05, 5));
    assert_eq!((reduced.train_epochs, reduced.final_repeats), (20, 3));
    assert_eq!((reduced.final_train_limit, reduced.final_test_limit), (10_000, 2_000));
    assert_eq!(reduced.eval_settings().split_sizes(), (700, 300));
}
