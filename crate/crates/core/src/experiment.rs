//! End-to-end synthetic experiment: corpus → click log → features →
//! pretraining variants → fine-tuning → ensemble → evaluation on held-out
//! queries. Every stage writes its artifact under the output directory and
//! is loaded from there instead of recomputed when present.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clicklog::{read_click_log, simulate_log, write_click_log, ClickSession, ClickSimConfig, MAX_POSITIONS};
use crate::corpus::{
    generate_synthetic_corpus, read_documents, read_queries, read_relevance, write_documents, write_queries,
    write_relevance, Corpus, Relevance, SynthConfig,
};
use crate::dataset::{score_pairs, Featurizer};
use crate::ensemble::{assemble_rows, select_and_train, write_model, EnsembleTable, GbdtHyperparams, RunManifest};
use crate::error::{Error, Result};
use crate::eval::{comparison_table, evaluate_run, write_run_scores, Gain, MetricsReport, RunScores, DEFAULT_K};
use crate::features::{read_feature_dump, write_feature_dump, FeatureName, FeatureParams, FeatureTable};
use crate::finetune::{
    annotations_to_relevance, finetune, read_annotations, split_by_query, synthetic_annotations, write_annotations,
    AnnotatedExample, FinetuneConfig,
};
use crate::neural::{read_checkpoint, write_checkpoint, Checkpoint, ScorerConfig};
use crate::pretrain::{pretrain, IpwMode, PretrainConfig, PretrainLoss};
use crate::seed;

pub const EXPERIMENT_FORMAT: &str = "ultr-experiment";
pub const EXPERIMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoggingOrder {
    /// Candidates in generation order.
    GenerationOrder,
    /// One fixed random permutation per query.
    Shuffled,
    /// Sorted by `policy_feature`, smallest first.
    Ascending,
    /// Sorted by `policy_feature`, largest first.
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub num_sessions: usize,
    /// How the logging ranker orders each query's candidates before the top
    /// ten are shown.
    pub policy: LoggingOrder,
    pub policy_feature: FeatureName,
    pub eta: f64,
    pub epsilon_noise: f64,
    pub shuffle_top10: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            num_sessions: 10_000,
            policy: LoggingOrder::Ascending,
            policy_feature: FeatureName::DocLen,
            eta: 1.0,
            epsilon_noise: 0.1,
            shuffle_top10: false,
        }
    }
}

impl SimulateConfig {
    pub fn click_config(&self, seed: u64) -> ClickSimConfig {
        ClickSimConfig {
            eta: self.eta,
            epsilon_noise: self.epsilon_noise,
            shuffle_top10: self.shuffle_top10,
            seed,
        }
    }
}

/// Top-ten rankings of the logging ranker for every query in `relevance`.
pub fn logging_rankings(
    data: &Featurizer,
    relevance: &Relevance,
    cfg: &SimulateConfig,
    seed: u64,
) -> Result<Vec<(String, Vec<String>)>> {
    let mut by_query: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (q, d) in relevance.keys() {
        by_query.entry(q).or_default().push(d);
    }
    by_query
        .into_iter()
        .map(|(q, mut docs)| {
            match cfg.policy {
                LoggingOrder::GenerationOrder => {}
                LoggingOrder::Shuffled => docs.shuffle(&mut seed::rng(seed, "logging-shuffle", seed::mix(hash(q)))),
                LoggingOrder::Ascending | LoggingOrder::Descending => {
                    let mut keyed = docs
                        .iter()
                        .map(|d| Ok((data.features::<f64>(q, d)?.get(cfg.policy_feature), *d)))
                        .collect::<Result<Vec<_>>>()?;
                    let desc = cfg.policy == LoggingOrder::Descending;
                    keyed.sort_by(|a, b| {
                        let o = a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal);
                        (if desc { o.reverse() } else { o }).then_with(|| a.1.cmp(b.1))
                    });
                    docs = keyed.into_iter().map(|(_, d)| d).collect();
                }
            }
            docs.truncate(MAX_POSITIONS);
            Ok((q.to_owned(), docs.into_iter().map(str::to_owned).collect()))
        })
        .collect()
}

fn hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub ipw: IpwMode,
    pub loss: PretrainLoss,
}

fn default_variants() -> Vec<Variant> {
    let mut out = Vec::new();
    for (lname, loss) in [("listwise", PretrainLoss::ListwiseLog), ("pairwise", PretrainLoss::PairwisePriority)] {
        for (iname, ipw) in [("none", IpwMode::None), ("click_ratio", IpwMode::ClickRatio), ("dla", IpwMode::Dla)] {
            out.push(Variant { name: format!("{iname}-{lname}"), ipw, loss });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    /// Fraction of queries held out from clicks, fine-tuning and the
    /// ensemble, used only for the final comparison.
    pub test_fraction: f64,
    pub variants: Vec<Variant>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            test_fraction: 0.2,
            variants: default_variants(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Candidate hyperparameters; more than one triggers selection on a
    /// query-level sub-split of the ensemble's training data.
    pub candidates: Vec<GbdtHyperparams>,
    pub tuning_ratio: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            candidates: vec![
                GbdtHyperparams::default(),
                GbdtHyperparams { num_leaves: 7, max_depth: 3, ..GbdtHyperparams::default() },
                GbdtHyperparams { num_leaves: 31, max_depth: 6, learning_rate: 0.05, num_iterations: 200, ..GbdtHyperparams::default() },
            ],
            tuning_ratio: 0.8,
        }
    }
}

/// Every module's configuration plus the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub simulate: SimulateConfig,
    pub features: FeatureParams,
    pub scorer: ScorerConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub ensemble: EnsembleConfig,
    pub experiment: ExperimentSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            synth: SynthConfig::default(),
            simulate: SimulateConfig::default(),
            features: FeatureParams::default(),
            scorer: ScorerConfig {
                embed_dim: 16,
                num_layers: 1,
                num_heads: 2,
                ff_dim: 32,
                max_seq_len: 32,
                feature_proj_dim: 8,
                mlp_dims: vec![16, 1],
                ..ScorerConfig::default()
            },
            pretrain: PretrainConfig { lr: 3e-3, ..PretrainConfig::default() },
            finetune: FinetuneConfig::default(),
            ensemble: EnsembleConfig::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

/// Seed of stream `stage` under the global seed.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    seed::derive(global, stage, 0)
}

impl PipelineConfig {
    /// Copy with every module seed derived from the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = stage_seed(self.seed, "pretrain");
        c.finetune.seed = stage_seed(self.seed, "finetune");
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.scorer.validate().or_else(|e| match e {
            // vocab_size is filled in from the corpus.
            Error::InvalidArgument(m) if m.contains("vocab_size") => Ok(()),
            e => Err(e),
        })?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        for hp in &self.ensemble.candidates {
            hp.validate()?;
        }
        if self.ensemble.candidates.is_empty() {
            return Err(Error::invalid("ensemble.candidates is empty"));
        }
        let t = self.experiment.test_fraction;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::invalid("experiment.test_fraction must lie in (0, 1)"));
        }
        let names: BTreeSet<&str> = self.experiment.variants.iter().map(|v| v.name.as_str()).collect();
        if names.len() != self.experiment.variants.len() || self.experiment.variants.is_empty() {
            return Err(Error::invalid("experiment.variants must be non-empty with distinct names"));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\', ' ', '\t'])) {
            return Err(Error::invalid("variant names must be non-empty without separators"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: PipelineConfig,
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    /// Test-set metrics for every run, in report order.
    pub runs: Vec<MetricsReport>,
    /// Index of the ensemble's chosen hyperparameter candidate.
    pub ensemble_candidate: usize,
}

impl ExperimentReport {
    pub fn run(&self, id: &str) -> Option<&MetricsReport> {
        self.runs.iter().find(|r| r.run_id == id)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment seed {}: held-out DCG@{DEFAULT_K}", self.seed);
        s.push_str(&comparison_table(&self.runs));
        s
    }
}

/// Paths of the experiment artifacts under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn documents(&self) -> PathBuf {
        self.root.join("data/documents.tsv")
    }
    pub fn queries(&self) -> PathBuf {
        self.root.join("data/queries.tsv")
    }
    pub fn relevance(&self) -> PathBuf {
        self.root.join("data/relevance.tsv")
    }
    pub fn dev_annotations(&self) -> PathBuf {
        self.root.join("data/annotations_dev.tsv")
    }
    pub fn test_annotations(&self) -> PathBuf {
        self.root.join("data/annotations_test.tsv")
    }
    pub fn clicks(&self) -> PathBuf {
        self.root.join("data/clicks.tsv")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("data/features.tsv")
    }
    pub fn pretrained(&self, variant: &str) -> PathBuf {
        self.root.join(format!("pretrain/{variant}/checkpoint.json"))
    }
    pub fn finetuned(&self, variant: &str) -> PathBuf {
        self.root.join(format!("finetune/{variant}/checkpoint.json"))
    }
    pub fn run_scores(&self, run: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run}.tsv"))
    }
    pub fn ensemble_model(&self) -> PathBuf {
        self.root.join("ensemble/model.txt")
    }
    pub fn ensemble_manifest(&self) -> PathBuf {
        self.root.join("ensemble/manifest.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_manifest(layout: &Layout, cfg: &PipelineConfig) -> Result<()> {
    let path = layout.manifest();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: serde_json::Value = serde_json::from_str(&text)?;
        if header.get("format").and_then(|v| v.as_str()) != Some(EXPERIMENT_FORMAT)
            || header.get("version").and_then(|v| v.as_u64()) != Some(EXPERIMENT_VERSION as u64)
        {
            return Err(Error::Format {
                path,
                message: format!("not a version {EXPERIMENT_VERSION} {EXPERIMENT_FORMAT} directory"),
            });
        }
        let m: Manifest = serde_json::from_str(&text)?;
        if m.config != *cfg {
            return Err(Error::Format {
                path,
                message: "artifacts were produced by a different configuration; use a fresh output directory".into(),
            });
        }
        return Ok(());
    }
    let m = Manifest {
        format: EXPERIMENT_FORMAT.into(),
        version: EXPERIMENT_VERSION,
        config: cfg.clone(),
    };
    write_text(&path, &serde_json::to_string_pretty(&m)?)
}

fn feature_table(data: &Featurizer, relevance: &Relevance) -> Result<FeatureTable<f64>> {
    relevance
        .keys()
        .map(|(q, d)| Ok(((q.clone(), d.clone()), data.features(q, d)?)))
        .collect()
}

fn load_or<T>(path: &Path, load: impl FnOnce(&Path) -> Result<T>, make: impl FnOnce() -> Result<T>, save: impl FnOnce(&Path, &T) -> Result<()>) -> Result<T> {
    if path.exists() {
        log::info!("reusing {}", path.display());
        return load(path);
    }
    let value = make()?;
    save(path, &value)?;
    Ok(value)
}

/// Runs (or resumes) the whole experiment under `out_dir`.
pub fn run_experiment(cfg: &PipelineConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let layout = Layout { root: out_dir.to_path_buf() };
    check_manifest(&layout, &cfg)?;
    let global = cfg.seed;

    // synth
    let synth_seed = stage_seed(global, "synth");
    let (documents, queries, relevance) = if layout.documents().exists() {
        (
            read_documents(&layout.documents())?,
            read_queries(&layout.queries())?,
            read_relevance(&layout.relevance())?,
        )
    } else {
        let s = generate_synthetic_corpus(&cfg.synth, synth_seed)?;
        write_documents(&layout.documents(), &s.documents)?;
        write_queries(&layout.queries(), &s.queries)?;
        write_relevance(&layout.relevance(), &s.relevance)?;
        (s.documents, s.queries, s.relevance)
    };
    let all_annotations = synthetic_annotations(&crate::corpus::SynthCorpus {
        documents: Vec::new(),
        queries: queries.clone(),
        relevance: relevance.clone(),
    });
    let data = Featurizer::new(Corpus::new(documents)?, queries, cfg.features)?;

    // held-out split
    let (dev, test) = if layout.dev_annotations().exists() {
        (read_annotations(&layout.dev_annotations())?, read_annotations(&layout.test_annotations())?)
    } else {
        let (dev, test) = split_by_query(&all_annotations, 1.0 - cfg.experiment.test_fraction, stage_seed(global, "test-split"))?;
        write_annotations(&layout.dev_annotations(), &dev)?;
        write_annotations(&layout.test_annotations(), &test)?;
        (dev, test)
    };
    let dev_rel = annotations_to_relevance(&dev)?;
    let test_rel = annotations_to_relevance(&test)?;

    // simulate
    let sessions: Vec<ClickSession> = load_or(
        &layout.clicks(),
        read_click_log,
        || {
            let click_seed = stage_seed(global, "simulate");
            let rankings = logging_rankings(&data, &dev_rel, &cfg.simulate, click_seed)?;
            simulate_log(&relevance, &rankings, cfg.simulate.num_sessions, &cfg.simulate.click_config(click_seed))
        },
        |p, s| write_click_log(p, s),
    )?;

    // features
    let features: FeatureTable<f64> = load_or(
        &layout.features(),
        read_feature_dump,
        || feature_table(&data, &relevance),
        write_feature_dump,
    )?;

    let mut runs: Vec<(String, RunScores<f64>)> = Vec::new();
    let bm25: RunScores<f64> = features.iter().map(|(k, v)| (k.clone(), v.bm25)).collect();
    runs.push(("bm25".into(), bm25));

    let mut validation: Option<Vec<AnnotatedExample>> = None;
    for v in &cfg.experiment.variants {
        let pcfg = PretrainConfig { ipw: v.ipw, loss: v.loss, ..cfg.pretrain.clone() };
        let pre: Checkpoint<f64> = load_or(
            &layout.pretrained(&v.name),
            read_checkpoint,
            || {
                let out = pretrain(&data, &sessions, &cfg.scorer, &pcfg)?;
                let mut log = String::from("epoch\tloss\twall_secs\n");
                for r in &out.log {
                    let _ = writeln!(log, "{}\t{}\t{:.3}", r.epoch, r.loss, r.wall_secs);
                }
                write_text(&layout.root.join(format!("pretrain/{}/train_log.tsv", v.name)), &log)?;
                Ok(out.checkpoint)
            },
            write_checkpoint,
        )?;
        let pre_scores = score_pairs(&pre.scorer, &data, &pre.vocab, relevance.keys())?;
        let fine: Checkpoint<f64> = load_or(
            &layout.finetuned(&v.name),
            read_checkpoint,
            || {
                let out = finetune(&pre, &data, &dev, &cfg.finetune)?;
                let mut log = String::from("epoch\ttrain_loss\tvalidation_dcg@10\twall_secs\n");
                for r in &out.log {
                    let _ = writeln!(log, "{}\t{}\t{}\t{:.3}", r.epoch, r.train_loss, r.validation_dcg, r.wall_secs);
                }
                write_text(&layout.root.join(format!("finetune/{}/train_log.tsv", v.name)), &log)?;
                Ok(out.checkpoint)
            },
            write_checkpoint,
        )?;
        let fine_scores = score_pairs(&fine.scorer, &data, &fine.vocab, relevance.keys())?;
        for (stage, scores) in [("pretrain", pre_scores), ("finetune", fine_scores)] {
            let name = format!("{stage}-{}", v.name);
            write_run_scores(&layout.run_scores(&name), &scores)?;
            runs.push((name, scores));
        }
        if validation.is_none() {
            validation = Some(split_by_query(&dev, cfg.finetune.split_ratio, cfg.finetune.seed)?.1);
        }
    }

    // ensemble, trained on the fine-tuning validation split
    let validation = validation.expect("at least one variant");
    let val_rel = annotations_to_relevance(&validation)?;
    let model_runs: Vec<(String, RunScores<f64>)> = runs.iter().filter(|(n, _)| n != "bm25").cloned().collect();
    let table: EnsembleTable<f64> = assemble_rows(&val_rel, &features, &model_runs)?;
    let (model, chosen) = select_and_train(&table, &cfg.ensemble.candidates, cfg.ensemble.tuning_ratio, stage_seed(global, "ensemble"))?;
    write_model(&layout.ensemble_model(), &model)?;
    let manifest = RunManifest {
        feature_columns: table.columns[..table.columns.len() - model_runs.len()].to_vec(),
        runs: model_runs
            .iter()
            // Relative to the experiment directory, so the tree can be moved.
            .map(|(n, _)| (n.clone(), format!("runs/{n}.tsv")))
            .collect(),
    };
    write_text(&layout.ensemble_manifest(), &serde_json::to_string_pretty(&manifest)?)?;
    let full = assemble_rows(&relevance, &features, &model_runs)?;
    let preds = model.predict_table(&full)?;
    let ens: RunScores<f64> = full
        .rows
        .iter()
        .zip(preds)
        .map(|(r, p)| ((r.query_id.clone(), r.doc_id.clone()), p))
        .collect();
    write_run_scores(&layout.run_scores("ensemble"), &ens)?;
    runs.push(("ensemble".into(), ens));

    // evaluate on the held-out queries
    let reports = runs
        .iter()
        .map(|(name, scores)| {
            let s: RunScores<f64> = scores
                .iter()
                .filter(|(k, _)| test_rel.contains_key(*k))
                .map(|(k, v)| (k.clone(), *v))
                .collect();
            evaluate_run(name, &s, &test_rel, DEFAULT_K, Gain::Exponential)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ExperimentReport {
        seed: global,
        runs: reports,
        ensemble_candidate: chosen,
    };
    write_text(&layout.report(), &report.to_table())?;
    write_text(&layout.report_json(), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
