pub mod clicklog;
pub mod corpus;
pub mod dataset;
pub mod ensemble;
pub mod experiment;
pub mod error;
pub mod eval;
pub mod features;
pub mod finetune;
pub mod neural;
pub mod pretrain;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::Scalar;

// Double-precision instantiations used by the CLI and the experiment.
pub type FeatureVectorF64 = features::FeatureVector<f64>;
pub type FeatureTableF64 = features::FeatureTable<f64>;
pub type RunScoresF64 = eval::RunScores<f64>;
pub type ScorerF64 = neural::WideDeepScorer<f64>;
pub type CheckpointF64 = neural::Checkpoint<f64>;
pub type PropensityModelF64 = clicklog::PropensityModel<f64>;
pub type EnsembleTableF64 = ensemble::EnsembleTable<f64>;
pub type GbdtModelF64 = ensemble::GbdtModel<f64>;
pub type PretrainOutputF64 = pretrain::PretrainOutput<f64>;
pub type FinetuneOutputF64 = finetune::FinetuneOutput<f64>;
