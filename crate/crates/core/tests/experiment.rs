use std::fs;

use ultr_core::corpus::SynthConfig;
use ultr_core::ensemble::GbdtHyperparams;
use ultr_core::experiment::{run_experiment, Layout, PipelineConfig, Variant};
use ultr_core::pretrain::{IpwMode, PretrainLoss};

fn tiny() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 5;
    cfg.synth = SynthConfig { vocab_size: 300, num_queries: 40, docs_per_query: 10, ..SynthConfig::default() };
    cfg.simulate.num_sessions = 400;
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 1;
    cfg.ensemble.candidates = vec![
        GbdtHyperparams { num_iterations: 10, min_samples_leaf: 2, ..GbdtHyperparams::default() },
        GbdtHyperparams { num_iterations: 5, num_leaves: 3, max_depth: 2, min_samples_leaf: 2, ..GbdtHyperparams::default() },
    ];
    cfg.experiment.variants = vec![
        Variant { name: "cr-list".into(), ipw: IpwMode::ClickRatio, loss: PretrainLoss::ListwiseLog },
        Variant { name: "dla-pair".into(), ipw: IpwMode::Dla, loss: PretrainLoss::PairwisePriority },
    ];
    cfg
}

#[test]
fn experiment_writes_all_artifacts_and_reports_every_run() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&tiny(), dir.path()).unwrap();
    let ids: Vec<&str> = report.runs.iter().map(|r| r.run_id.as_str()).collect();
    assert_eq!(
        ids,
        ["bm25", "pretrain-cr-list", "finetune-cr-list", "pretrain-dla-pair", "finetune-dla-pair", "ensemble"]
    );
    for r in &report.runs {
        assert_eq!(r.num_queries, 8, "{}", r.run_id);
        assert!(r.mean_dcg.is_finite() && r.mean_ndcg <= 1.0 + 1e-12);
    }
    let l = Layout { root: dir.path().to_path_buf() };
    for p in [l.clicks(), l.features(), l.pretrained("cr-list"), l.finetuned("dla-pair"), l.ensemble_model(), l.report(), l.report_json()] {
        assert!(p.exists(), "{}", p.display());
    }
}

#[test]
fn experiment_is_reproducible_and_resumes_from_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let ra = run_experiment(&cfg, a.path()).unwrap();
    let rb = run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(ra, rb);
    let report = fs::read(a.path().join("report.json")).unwrap();
    assert_eq!(report, fs::read(b.path().join("report.json")).unwrap());

    // Second run in the same directory reuses everything and agrees.
    let again = run_experiment(&cfg, a.path()).unwrap();
    assert_eq!(again, ra);
}

#[test]
fn experiment_rejects_directory_from_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_experiment(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(run_experiment(&other, dir.path()).is_err());
}
