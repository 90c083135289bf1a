//! Checkpoint container.
//!
//! A checkpoint is one JSON document:
//!
//! ```text
//! {
//!   "format": "ultr-checkpoint",
//!   "version": 1,
//!   "scalar": "f64",
//!   "config": { ScorerConfig fields },
//!   "vocab": [ term for ids 4, 5, ... ],
//!   "parameters": [ { "name", "rows", "cols", "data": [...] }, ... ],
//!   "optimizer": null | { "config", "step", "first_moment", "second_moment" },
//!   "propensity": null | { "kind": "click_ratio" | "dla", ... },
//!   "metadata": { string: string }
//! }
//! ```
//!
//! Parameter blocks appear in [`WideDeepScorer::tensors`] order and are matched
//! by name and shape on load. Floats are written in shortest round-trip form.

use std::any::type_name;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, ScorerConfig, Tensor, Vocab, WideDeepScorer};
use crate::clicklog::PropensityModel;
use crate::error::{Error, Result};
use crate::Scalar;

pub const CHECKPOINT_FORMAT: &str = "ultr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub vocab: Vocab,
    pub scorer: WideDeepScorer<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub propensity: Option<PropensityModel<T>>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Block<T> {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct File<T> {
    format: String,
    version: u32,
    scalar: String,
    config: ScorerConfig,
    vocab: Vocab,
    parameters: Vec<Block<T>>,
    optimizer: Option<OptimizerState<T>>,
    propensity: Option<PropensityModel<T>>,
    metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
}

pub fn write_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let file = File {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        scalar: type_name::<T>().into(),
        config: ckpt.scorer.config.clone(),
        vocab: ckpt.vocab.clone(),
        parameters: ckpt
            .scorer
            .tensors()
            .into_iter()
            .map(|(name, t)| Block {
                name,
                rows: t.rows,
                cols: t.cols,
                data: t.data.clone(),
            })
            .collect(),
        optimizer: ckpt.optimizer.clone(),
        propensity: ckpt.propensity.clone(),
        metadata: ckpt.metadata.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string(&file)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let format_err = |message: String| Error::Format {
        path: path.to_owned(),
        message,
    };
    let header: Header =
        serde_json::from_str(&text).map_err(|e| format_err(format!("not a checkpoint: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(format_err(format!("format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(format_err(format!(
            "checkpoint version {} (this build reads version {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    if header.scalar != type_name::<T>() {
        return Err(format_err(format!(
            "stored as {}, requested {}",
            header.scalar,
            type_name::<T>()
        )));
    }
    let file: File<T> = serde_json::from_str(&text)?;
    file.config.validate()?;
    let mut scorer = WideDeepScorer::<T>::zeros(&file.config);
    let names: Vec<String> = scorer.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != file.parameters.len() {
        return Err(format_err(format!(
            "{} parameter blocks, expected {}",
            file.parameters.len(),
            names.len()
        )));
    }
    for ((slot, name), block) in scorer.tensors_mut().into_iter().zip(&names).zip(file.parameters) {
        if *name != block.name || slot.rows != block.rows || slot.cols != block.cols || block.data.len() != slot.len() {
            return Err(format_err(format!(
                "block {:?} ({}×{}) does not match expected {name:?} ({}×{})",
                block.name, block.rows, block.cols, slot.rows, slot.cols
            )));
        }
        *slot = Tensor {
            rows: block.rows,
            cols: block.cols,
            data: block.data,
        };
    }
    Ok(Checkpoint {
        vocab: file.vocab,
        scorer,
        optimizer: file.optimizer,
        propensity: file.propensity,
        metadata: file.metadata,
    })
}
