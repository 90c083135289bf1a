//! `ultr`: command-line driver for the unbiased learning-to-rank pipeline.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use ultr_core::clicklog::{read_click_log, simulate_log, write_click_log};
use ultr_core::corpus::{
    generate_synthetic_corpus, read_documents, read_queries, write_documents, write_queries,
    write_relevance, Corpus,
};
use ultr_core::dataset::{score_pairs, Featurizer};
use ultr_core::ensemble::{assemble_rows, read_model, select_and_train, write_model, RunManifest};
use ultr_core::eval::{evaluate_run, read_run_scores, write_run_scores, Gain};
use ultr_core::experiment::{logging_rankings, run_experiment, stage_seed, PipelineConfig};
use ultr_core::features::{read_feature_dump, write_feature_dump};
use ultr_core::finetune::{annotations_to_relevance, finetune, read_annotations, synthetic_annotations, write_annotations};
use ultr_core::neural::{read_checkpoint, write_checkpoint};
use ultr_core::pretrain::pretrain;
use ultr_core::{CheckpointF64, FeatureTableF64, RunScoresF64};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ultr", version, about = "Unbiased learning-to-rank: click pretraining, fine-tuning, ensembling")]
struct Cli {
    /// TOML pipeline configuration, one [section] per module.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CorpusArg {
    /// Directory holding documents.tsv and queries.tsv.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with graded relevance and annotations.
    Synth,
    /// Simulate position-biased clicks on the logging ranker's top ten.
    Simulate {
        #[command(flatten)]
        corpus: CorpusArg,
        /// Annotation file naming the candidates and their true grades.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the handcrafted features of every annotated pair.
    Features {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the neural scorer on a click log.
    Pretrain {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        clicklog: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on graded annotations.
    Finetune {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every annotated pair with a checkpoint, writing a run file.
    Score {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train or apply the LambdaRank tree ensemble.
    #[command(subcommand)]
    Ensemble(EnsembleCommand),
    /// Compute DCG@k and NDCG@k of a run against annotations.
    Evaluate {
        /// Run file: query_id, doc_id, score per line.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_enum, default_value_t = GainArg::Exponential)]
        gain: GainArg,
        /// Per-query metrics output (query_id, dcg, ndcg).
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// Run the whole synthetic comparison, resuming from artifacts in --out-dir.
    Experiment,
}

#[derive(Subcommand, Debug)]
enum EnsembleCommand {
    /// Train on the annotated pairs; extra columns come from run files.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Score column as NAME=FILE; repeatable.
        #[arg(long = "run", value_parser = parse_run)]
        runs: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict for every annotated pair using the runs in the model's manifest.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Overrides a manifest entry as NAME=FILE; repeatable.
        #[arg(long = "run", value_parser = parse_run)]
        runs: Vec<(String, PathBuf)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum GainArg {
    Exponential,
    Linear,
}

fn parse_run(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_owned(), PathBuf::from(p))),
        _ => Err(format!("expected NAME=FILE, got {s:?}")),
    }
}

/// Configuration problems are usage errors, not data errors.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.chain().find_map(|e| e.downcast_ref::<ultr_core::Error>()) {
        Some(e) if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(UsageError(anyhow!("--threads must be at least 1")).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("initializing thread pool")?;
    let cfg = config::load(cli.config.as_deref(), cli.seed).map_err(UsageError)?;
    info!("resolved config: {}", config::to_json(&cfg));
    let out = |given: Option<PathBuf>, name: &str| given.unwrap_or_else(|| cli.out_dir.join(name));

    match cli.command {
        Command::Synth => synth(&cfg, &cli.out_dir),
        Command::Simulate { corpus, annotations, out: o } => {
            let data = featurizer(&corpus.corpus, &cfg)?;
            let truth = annotations_to_relevance(&read_annotations(&annotations)?)?;
            let seed = stage_seed(cfg.seed, "simulate");
            let rankings = logging_rankings(&data, &truth, &cfg.simulate, seed)?;
            let sessions = simulate_log(&truth, &rankings, cfg.simulate.num_sessions, &cfg.simulate.click_config(seed))?;
            let path = out(o, "clicks.tsv");
            write_click_log(&path, &sessions)?;
            info!("wrote {} sessions to {}", sessions.len(), path.display());
            Ok(())
        }
        Command::Features { corpus, annotations, out: o } => {
            let data = featurizer(&corpus.corpus, &cfg)?;
            let table = read_annotations(&annotations)?
                .iter()
                .map(|a| Ok(((a.query_id.clone(), a.doc_id.clone()), data.features(&a.query_id, &a.doc_id)?)))
                .collect::<Result<FeatureTableF64>>()?;
            let path = out(o, "features.tsv");
            write_feature_dump(&path, &table)?;
            info!("wrote {} feature rows to {}", table.len(), path.display());
            Ok(())
        }
        Command::Pretrain { corpus, clicklog, out: o } => {
            let data = featurizer(&corpus.corpus, &cfg)?;
            let sessions = read_click_log(&clicklog)?;
            let result = pretrain::<f64>(&data, &sessions, &cfg.scorer, &cfg.pretrain)?;
            let path = out(o, "pretrained.json");
            write_checkpoint(&path, &result.checkpoint)?;
            let mut log = String::from("epoch\tloss\twall_secs\n");
            for r in &result.log {
                info!("epoch {} loss {:.6} ({:.2}s)", r.epoch, r.loss, r.wall_secs);
                log.push_str(&format!("{}\t{}\t{:.3}\n", r.epoch, r.loss, r.wall_secs));
            }
            write_file(&path.with_extension("log.tsv"), &log)?;
            info!("wrote {}", path.display());
            Ok(())
        }
        Command::Finetune { corpus, checkpoint, annotations, out: o } => {
            let data = featurizer(&corpus.corpus, &cfg)?;
            let ckpt: CheckpointF64 = read_checkpoint(&checkpoint)?;
            let result = finetune(&ckpt, &data, &read_annotations(&annotations)?, &cfg.finetune)?;
            let path = out(o, "finetuned.json");
            write_checkpoint(&path, &result.checkpoint)?;
            let mut log = String::from("epoch\ttrain_loss\tvalidation_dcg@10\twall_secs\n");
            for r in &result.log {
                info!("epoch {} loss {:.6} validation DCG@10 {:.5} ({:.2}s)", r.epoch, r.train_loss, r.validation_dcg, r.wall_secs);
                log.push_str(&format!("{}\t{}\t{}\t{:.3}\n", r.epoch, r.train_loss, r.validation_dcg, r.wall_secs));
            }
            write_file(&path.with_extension("log.tsv"), &log)?;
            info!("kept epoch {}; wrote {}", result.best_epoch, path.display());
            Ok(())
        }
        Command::Score { corpus, checkpoint, annotations, out: o } => {
            let data = featurizer(&corpus.corpus, &cfg)?;
            let ckpt: CheckpointF64 = read_checkpoint(&checkpoint)?;
            let rel = annotations_to_relevance(&read_annotations(&annotations)?)?;
            let scores = score_pairs(&ckpt.scorer, &data, &ckpt.vocab, rel.keys())?;
            let path = out(o, "run.tsv");
            write_run_scores(&path, &scores)?;
            info!("wrote {} scores to {}", scores.len(), path.display());
            Ok(())
        }
        Command::Ensemble(EnsembleCommand::Train { features, annotations, runs, out: o }) => {
            let rel = annotations_to_relevance(&read_annotations(&annotations)?)?;
            let table: FeatureTableF64 = read_feature_dump(&features)?;
            let loaded = load_runs(&runs)?;
            let rows = assemble_rows(&rel, &table, &loaded)?;
            let seed = stage_seed(cfg.seed, "ensemble");
            let (model, chosen) = select_and_train(&rows, &cfg.ensemble.candidates, cfg.ensemble.tuning_ratio, seed)?;
            let path = out(o, "model.txt");
            write_model(&path, &model)?;
            let manifest = RunManifest {
                feature_columns: rows.columns[..rows.columns.len() - runs.len()].to_vec(),
                runs: runs.iter().map(|(n, p)| (n.clone(), p.display().to_string())).collect(),
            };
            write_file(&manifest_path(&path), &serde_json::to_string_pretty(&manifest)?)?;
            info!("chose candidate {chosen}: {:?}; wrote {}", cfg.ensemble.candidates[chosen], path.display());
            Ok(())
        }
        Command::Ensemble(EnsembleCommand::Predict { model, features, annotations, runs, out: o }) => {
            let gbdt = read_model::<f64>(&model)?;
            let mpath = manifest_path(&model);
            let manifest: RunManifest = serde_json::from_str(
                &std::fs::read_to_string(&mpath).with_context(|| format!("reading {}", mpath.display()))?,
            )
            .with_context(|| format!("parsing {}", mpath.display()))?;
            let overrides: std::collections::BTreeMap<_, _> = runs.into_iter().collect();
            for name in overrides.keys() {
                if !manifest.runs.iter().any(|(n, _)| n == name) {
                    bail!("run {name:?} is not a column of the model");
                }
            }
            let runs: Vec<(String, PathBuf)> = manifest
                .runs
                .iter()
                .map(|(n, p)| (n.clone(), overrides.get(n).cloned().unwrap_or_else(|| PathBuf::from(p))))
                .collect();
            let rel = annotations_to_relevance(&read_annotations(&annotations)?)?;
            let table: FeatureTableF64 = read_feature_dump(&features)?;
            let rows = assemble_rows(&rel, &table, &load_runs(&runs)?)?;
            let preds = gbdt.predict_table(&rows)?;
            let scores: RunScoresF64 = rows
                .rows
                .iter()
                .zip(preds)
                .map(|(r, p)| ((r.query_id.clone(), r.doc_id.clone()), p))
                .collect();
            let path = out(o, "ensemble_run.tsv");
            write_run_scores(&path, &scores)?;
            info!("wrote {} scores to {}", scores.len(), path.display());
            Ok(())
        }
        Command::Evaluate { run, annotations, k, gain, per_query } => {
            let rel = annotations_to_relevance(&read_annotations(&annotations)?)?;
            let scores: RunScoresF64 = read_run_scores(&run)?;
            let gain = match gain {
                GainArg::Exponential => Gain::Exponential,
                GainArg::Linear => Gain::Linear,
            };
            let id = run.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            let report = evaluate_run(&id, &scores, &rel, k, gain)?;
            if let Some(p) = per_query {
                report.write_per_query(&p)?;
            }
            println!("{report}");
            Ok(())
        }
        Command::Experiment => {
            let report = run_experiment(&cfg, &cli.out_dir)?;
            println!("{}", report.to_table());
            Ok(())
        }
    }
}

/// Error chain joined by ": ", dropping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn synth(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let s = generate_synthetic_corpus(&cfg.synth, stage_seed(cfg.seed, "synth"))?;
    write_documents(&dir.join("documents.tsv"), &s.documents)?;
    write_queries(&dir.join("queries.tsv"), &s.queries)?;
    write_relevance(&dir.join("relevance.tsv"), &s.relevance)?;
    write_annotations(&dir.join("annotations.tsv"), &synthetic_annotations(&s))?;
    info!(
        "wrote {} documents, {} queries, {} judgments to {}",
        s.documents.len(),
        s.queries.len(),
        s.relevance.len(),
        dir.display()
    );
    Ok(())
}

fn featurizer(dir: &Path, cfg: &PipelineConfig) -> Result<Featurizer> {
    let docs = read_documents(&dir.join("documents.tsv"))?;
    let queries = read_queries(&dir.join("queries.tsv"))?;
    Ok(Featurizer::new(Corpus::new(docs)?, queries, cfg.features)?)
}

fn load_runs(runs: &[(String, PathBuf)]) -> Result<Vec<(String, RunScoresF64)>> {
    runs.iter().map(|(n, p)| Ok((n.clone(), read_run_scores(p)?))).collect()
}

fn manifest_path(model: &Path) -> PathBuf {
    model.with_extension("manifest.json")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

