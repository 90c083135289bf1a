//! LambdaRank gradient-boosted regression trees over heuristic features and
//! the scores of trained runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Relevance;
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, Gain, RunScores, DEFAULT_K};
use crate::features::{FeatureTable, FEATURE_NAMES};
use crate::scalar::sigmoid;
use crate::Scalar;

pub const MODEL_FORMAT: &str = "ultr-gbdt";
pub const MODEL_VERSION: u32 = 1;

/// Smoothing added to hessian sums in leaf values and split gains.
const HESSIAN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRow<T> {
    pub query_id: String,
    pub doc_id: String,
    pub values: Vec<T>,
    pub grade: u8,
}

/// Rows in `(query_id, doc_id)` order; columns are the eight heuristic
/// features followed by one column per run, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTable<T> {
    pub columns: Vec<String>,
    pub rows: Vec<EnsembleRow<T>>,
}

/// Joins annotations, features and run scores on `(query_id, doc_id)`.
pub fn assemble_rows<T: Scalar>(
    annotations: &Relevance,
    features: &FeatureTable<T>,
    runs: &[(String, RunScores<T>)],
) -> Result<EnsembleTable<T>> {
    let mut columns: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    for (name, _) in runs {
        if columns.contains(name) {
            return Err(Error::invalid(format!("duplicate column {name:?}")));
        }
        columns.push(name.clone());
    }
    let mut rows = Vec::with_capacity(annotations.len());
    for (key, &grade) in annotations {
        let missing = |source: &str| Error::MissingKey {
            query_id: key.0.clone(),
            doc_id: key.1.clone(),
            source_name: source.to_owned(),
        };
        let mut values = features.get(key).ok_or_else(|| missing("feature dump"))?.to_array().to_vec();
        for (name, scores) in runs {
            values.push(*scores.get(key).ok_or_else(|| missing(&format!("scores of run {name}")))?);
        }
        rows.push(EnsembleRow {
            query_id: key.0.clone(),
            doc_id: key.1.clone(),
            values,
            grade,
        });
    }
    Ok(EnsembleTable { columns, rows })
}

impl<T: Scalar> EnsembleTable<T> {
    /// Row index ranges of each query (rows are sorted by query).
    pub fn query_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].query_id != self.rows[start].query_id {
                out.push(start..i);
                start = i;
            }
        }
        out
    }

    pub fn relevance(&self) -> Relevance {
        self.rows
            .iter()
            .map(|r| ((r.query_id.clone(), r.doc_id.clone()), r.grade))
            .collect()
    }

    pub fn column(&self, c: usize) -> RunScores<T> {
        self.rows
            .iter()
            .map(|r| ((r.query_id.clone(), r.doc_id.clone()), r.values[c]))
            .collect()
    }

    /// Rows of the listed queries, in table order.
    pub fn subset(&self, queries: &BTreeSet<String>) -> Self {
        EnsembleTable {
            columns: self.columns.clone(),
            rows: self.rows.iter().filter(|r| queries.contains(&r.query_id)).cloned().collect(),
        }
    }

    /// Mean DCG@10 of ranking each query by `scores` (one per row).
    pub fn dcg(&self, scores: &[T]) -> Result<f64> {
        let run: RunScores<T> = self
            .rows
            .iter()
            .zip(scores)
            .map(|(r, &s)| ((r.query_id.clone(), r.doc_id.clone()), s))
            .collect();
        Ok(evaluate_run("ensemble", &run, &self.relevance(), DEFAULT_K, Gain::Exponential)?.mean_dcg)
    }
}

/// LambdaRank gradients and hessians of one query.
///
/// For every pair with `grade_i > grade_j`, `λ = −σ(s_j − s_i)·|ΔDCG@10|` is
/// added to `g_i` and subtracted from `g_j`, where `|ΔDCG@10|` is the change
/// from swapping the two in the current score order (ties by index).
/// Hessians accumulate `σ(1 − σ)·|ΔDCG@10|` on both.
pub fn lambdarank_gradients<T: Scalar>(scores: &[T], grades: &[u8]) -> (Vec<T>, Vec<T>) {
    let n = scores.len();
    let mut g = vec![T::zero(); n];
    let mut h = vec![T::zero(); n];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut discount = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < DEFAULT_K {
            discount[i] = 1.0 / ((rank + 2) as f64).log2();
        }
    }
    for i in 0..n {
        for j in 0..n {
            if grades[i] <= grades[j] {
                continue;
            }
            let delta = ((Gain::Exponential.of(grades[i]) - Gain::Exponential.of(grades[j]))
                * (discount[i] - discount[j]))
                .abs();
            if delta == 0.0 {
                continue;
            }
            let delta = T::of(delta);
            let rho = sigmoid(scores[j] - scores[i]);
            let lambda = -rho * delta;
            g[i] += lambda;
            g[j] -= lambda;
            let hess = rho * (T::one() - rho) * delta;
            h[i] += hess;
            h[j] += hess;
        }
    }
    (g, h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtHyperparams {
    pub num_leaves: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub num_iterations: usize,
    pub min_samples_leaf: usize,
    /// Minimum hessian sum of a child for a split to be considered.
    pub min_hessian_leaf: f64,
}

impl Default for GbdtHyperparams {
    fn default() -> Self {
        GbdtHyperparams {
            num_leaves: 15,
            max_depth: 5,
            learning_rate: 0.1,
            num_iterations: 100,
            min_samples_leaf: 5,
            min_hessian_leaf: 1e-3,
        }
    }
}

impl GbdtHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.num_leaves < 2 {
            return Err(Error::invalid("num_leaves must be at least 2"));
        }
        if self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::invalid("max_depth and min_samples_leaf must be positive"));
        }
        if !(self.learning_rate >= 0.0) || !(self.min_hessian_leaf >= 0.0) {
            return Err(Error::invalid("learning_rate and min_hessian_leaf must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node<T> {
    /// Rows with `value[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: T,
        left: usize,
        right: usize,
    },
    Leaf {
        value: T,
    },
}

/// Binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree<T> {
    pub nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tree<T> {
    pub fn predict(&self, values: &[T]) -> T {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    i = if values[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtModel<T> {
    pub columns: Vec<String>,
    pub trees: Vec<Tree<T>>,
    pub learning_rate: T,
    pub base_score: T,
}

impl<T: Scalar> GbdtModel<T> {
    /// `base_score + lr · Σ tree outputs`.
    pub fn predict(&self, values: &[T]) -> Result<T> {
        if values.len() != self.columns.len() {
            return Err(Error::LengthMismatch {
                what: "row columns vs model columns",
                left: values.len(),
                right: self.columns.len(),
            });
        }
        let sum: T = self.trees.iter().map(|t| t.predict(values)).sum();
        Ok(self.base_score + self.learning_rate * sum)
    }

    /// Predicts every row of `table`, whose columns must match the model's.
    pub fn predict_table(&self, table: &EnsembleTable<T>) -> Result<Vec<T>> {
        if table.columns != self.columns {
            return Err(Error::invalid(format!(
                "table columns {:?} do not match model columns {:?}",
                table.columns, self.columns
            )));
        }
        table.rows.iter().map(|r| self.predict(&r.values)).collect()
    }
}

struct SplitCandidate<T> {
    gain: f64,
    feature: usize,
    threshold: T,
    left: Vec<usize>,
    right: Vec<usize>,
}

fn leaf_score(g: f64, h: f64) -> f64 {
    g * g / (h + HESSIAN_EPS)
}

/// Best split of `rows`, or `None` when no split has positive gain.
/// Ties keep the lower feature index, then the lower threshold.
fn best_split<T: Scalar>(
    table: &EnsembleTable<T>,
    rows: &[usize],
    grad: &[f64],
    hess: &[f64],
    hp: &GbdtHyperparams,
) -> Option<SplitCandidate<T>> {
    let g_total: f64 = rows.iter().map(|&r| grad[r]).sum();
    let h_total: f64 = rows.iter().map(|&r| hess[r]).sum();
    let parent = leaf_score(g_total, h_total);
    let mut best: Option<(f64, usize, usize, Vec<usize>)> = None;
    let num_features = table.columns.len();
    for f in 0..num_features {
        let mut sorted = rows.to_vec();
        sorted.sort_by(|&a, &b| {
            table.rows[a].values[f]
                .partial_cmp(&table.rows[b].values[f])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let (mut gl, mut hl) = (0.0, 0.0);
        for k in 0..sorted.len() - 1 {
            gl += grad[sorted[k]];
            hl += hess[sorted[k]];
            let here = table.rows[sorted[k]].values[f];
            let next = table.rows[sorted[k + 1]].values[f];
            if !(next > here) {
                continue;
            }
            let (nl, nr) = (k + 1, sorted.len() - k - 1);
            if nl < hp.min_samples_leaf || nr < hp.min_samples_leaf {
                continue;
            }
            let (gr, hr) = (g_total - gl, h_total - hl);
            if hl < hp.min_hessian_leaf || hr < hp.min_hessian_leaf {
                continue;
            }
            let gain = leaf_score(gl, hl) + leaf_score(gr, hr) - parent;
            if gain > 1e-12 * parent.abs().max(1.0) && best.as_ref().is_none_or(|b| gain > b.0) {
                best = Some((gain, f, k, sorted.clone()));
            }
        }
    }
    best.map(|(gain, feature, k, sorted)| {
        let here = table.rows[sorted[k]].values[feature];
        let next = table.rows[sorted[k + 1]].values[feature];
        let mut threshold = here + (next - here) / T::of(2.0);
        if !(threshold < next) {
            threshold = here;
        }
        let mut left = sorted[..=k].to_vec();
        let mut right = sorted[k + 1..].to_vec();
        left.sort_unstable();
        right.sort_unstable();
        SplitCandidate {
            gain,
            feature,
            threshold,
            left,
            right,
        }
    })
}

/// Grows one tree leaf-wise: the leaf with the largest gain splits next.
fn fit_tree<T: Scalar>(table: &EnsembleTable<T>, grad: &[f64], hess: &[f64], hp: &GbdtHyperparams) -> Tree<T> {
    struct Open<T> {
        node: usize,
        depth: usize,
        split: Option<SplitCandidate<T>>,
    }
    let leaf_value = |rows: &[usize]| {
        let g: f64 = rows.iter().map(|&r| grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| hess[r]).sum();
        T::of(-g / (h + HESSIAN_EPS))
    };
    let all: Vec<usize> = (0..table.rows.len()).collect();
    let mut nodes = vec![Node::Leaf { value: leaf_value(&all) }];
    let root_split = (hp.max_depth > 0).then(|| best_split(table, &all, grad, hess, hp)).flatten();
    let mut open = vec![Open { node: 0, depth: 0, split: root_split }];
    let mut leaves = 1;
    while leaves < hp.num_leaves {
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.split.as_ref().map(|s| (i, s.gain)))
            .fold(None, |acc: Option<(usize, f64)>, (i, g)| match acc {
                Some((_, bg)) if bg >= g => acc,
                _ => Some((i, g)),
            });
        let Some((i, _)) = pick else { break };
        let leaf = open.swap_remove(i);
        let split = leaf.split.expect("picked leaf has a split");
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: leaf_value(&split.left) });
        nodes.push(Node::Leaf { value: leaf_value(&split.right) });
        nodes[leaf.node] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        leaves += 1;
        for (node, rows) in [(l, split.left), (r, split.right)] {
            let depth = leaf.depth + 1;
            let s = (depth < hp.max_depth).then(|| best_split(table, &rows, grad, hess, hp)).flatten();
            open.push(Open { node, depth, split: s });
        }
        // Keep the scan order independent of swap_remove.
        open.sort_by_key(|o| o.node);
    }
    Tree { nodes }
}

/// Boosts `hp.num_iterations` LambdaRank trees. Training is deterministic;
/// `seed` is recorded for interface symmetry and draws nothing.
pub fn train_gbdt<T: Scalar>(table: &EnsembleTable<T>, hp: &GbdtHyperparams, _seed: u64) -> Result<GbdtModel<T>> {
    hp.validate()?;
    let ranges = table.query_ranges();
    let varied = ranges.iter().any(|r| {
        let g: BTreeSet<u8> = table.rows[r.clone()].iter().map(|x| x.grade).collect();
        g.len() > 1
    });
    if !varied {
        return Err(Error::NoTrainableData("no query has differing grades".into()));
    }
    if let Some(r) = table.rows.iter().find(|r| r.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("input value for ({}, {})", r.query_id, r.doc_id)));
    }
    let mut model = GbdtModel {
        columns: table.columns.clone(),
        trees: Vec::with_capacity(hp.num_iterations),
        learning_rate: T::of(hp.learning_rate),
        base_score: T::zero(),
    };
    let mut scores = vec![model.base_score; table.rows.len()];
    let grades: Vec<u8> = table.rows.iter().map(|r| r.grade).collect();
    let mut grad = vec![0.0; table.rows.len()];
    let mut hess = vec![0.0; table.rows.len()];
    for _ in 0..hp.num_iterations {
        for r in &ranges {
            let (g, h) = lambdarank_gradients(&scores[r.clone()], &grades[r.clone()]);
            for (k, i) in r.clone().enumerate() {
                grad[i] = g[k].as_f64();
                hess[i] = h[k].as_f64();
            }
        }
        let tree = fit_tree(table, &grad, &hess, hp);
        for (s, row) in scores.iter_mut().zip(&table.rows) {
            *s += model.learning_rate * tree.predict(&row.values);
        }
        model.trees.push(tree);
    }
    Ok(model)
}

/// Picks the candidate with the best DCG@10 on a query-level sub-split of
/// `table` (first `ratio` of queries train, rest score), then retrains it on
/// the whole table. Returns the model and the index of the chosen candidate.
pub fn select_and_train<T: Scalar>(
    table: &EnsembleTable<T>,
    candidates: &[GbdtHyperparams],
    ratio: f64,
    seed: u64,
) -> Result<(GbdtModel<T>, usize)> {
    if candidates.is_empty() {
        return Err(Error::invalid("no hyperparameter candidates"));
    }
    let mut queries: Vec<String> = table.query_ranges().iter().map(|r| table.rows[r.start].query_id.clone()).collect();
    use rand::seq::SliceRandom;
    queries.shuffle(&mut crate::seed::rng(seed, "ensemble-tuning-split", 0));
    let cut = ((ratio * queries.len() as f64).round() as usize).clamp(1, queries.len().saturating_sub(1).max(1));
    let fit: BTreeSet<String> = queries[..cut].iter().cloned().collect();
    let held: BTreeSet<String> = queries[cut..].iter().cloned().collect();
    let (fit_t, held_t) = (table.subset(&fit), table.subset(&held));
    let mut best = (f64::NEG_INFINITY, 0);
    if candidates.len() > 1 && !held_t.rows.is_empty() {
        for (i, hp) in candidates.iter().enumerate() {
            let Ok(m) = train_gbdt(&fit_t, hp, seed) else { continue };
            let dcg = held_t.dcg(&m.predict_table(&held_t)?)?;
            if dcg > best.0 {
                best = (dcg, i);
            }
        }
    }
    Ok((train_gbdt(table, &candidates[best.1], seed)?, best.1))
}

/// Text dump:
///
/// ```text
/// ultr-gbdt 1
/// learning_rate <lr>
/// base_score <b>
/// columns <name> <name> ...
/// tree <t> <num_nodes>
/// <node> split <feature> <threshold> <left> <right>
/// <node> leaf <value>
/// ```
pub fn model_to_string<T: Scalar>(model: &GbdtModel<T>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MODEL_FORMAT} {MODEL_VERSION}");
    let _ = writeln!(s, "learning_rate {}", model.learning_rate);
    let _ = writeln!(s, "base_score {}", model.base_score);
    let _ = writeln!(s, "columns {}", model.columns.join(" "));
    for (t, tree) in model.trees.iter().enumerate() {
        let _ = writeln!(s, "tree {t} {}", tree.nodes.len());
        for (i, node) in tree.nodes.iter().enumerate() {
            let _ = match node {
                Node::Split { feature, threshold, left, right } => {
                    writeln!(s, "{i} split {feature} {threshold} {left} {right}")
                }
                Node::Leaf { value } => writeln!(s, "{i} leaf {value}"),
            };
        }
    }
    s
}

pub fn write_model<T: Scalar>(path: &Path, model: &GbdtModel<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, model_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn read_model<T: Scalar>(path: &Path) -> Result<GbdtModel<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text).map_err(|(line, message)| Error::parse(path, line, message))
}

fn parse_model<T: Scalar>(text: &str) -> std::result::Result<GbdtModel<T>, (usize, String)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let mut next = |what: &str| lines.next().ok_or((0, format!("unexpected end of file, expected {what}")));
    let num = |n: usize, s: &str| -> std::result::Result<T, (usize, String)> {
        s.parse::<f64>().map(T::of).map_err(|_| (n, format!("bad number {s:?}")))
    };
    let idx = |n: usize, s: &str| -> std::result::Result<usize, (usize, String)> {
        s.parse::<usize>().map_err(|_| (n, format!("bad index {s:?}")))
    };
    let (n, header) = next("header")?;
    if header != format!("{MODEL_FORMAT} {MODEL_VERSION}") {
        return Err((n, format!("expected header \"{MODEL_FORMAT} {MODEL_VERSION}\", found {header:?}")));
    }
    let mut field = |key: &str| -> std::result::Result<(usize, String), (usize, String)> {
        let (n, l) = next(key)?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
            .map(|r| (n, r.to_owned()))
            .ok_or((n, format!("expected {key}")))
    };
    let (n, lr) = field("learning_rate")?;
    let learning_rate = num(n, &lr)?;
    let (n, b) = field("base_score")?;
    let base_score = num(n, &b)?;
    let (_, cols) = field("columns")?;
    let columns: Vec<String> = cols.split_whitespace().map(str::to_owned).collect();
    let mut trees = Vec::new();
    while let Some((n, line)) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "tree" {
            return Err((n, format!("expected \"tree <index> <nodes>\", found {line:?}")));
        }
        let count = idx(n, parts[2])?;
        let mut nodes = Vec::with_capacity(count);
        for k in 0..count {
            let (n, line) = lines.next().ok_or((n, "tree ended early".to_owned()))?;
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.first().map(|s| idx(n, s)).transpose()? != Some(k) {
                return Err((n, format!("expected node {k}")));
            }
            nodes.push(match (p.get(1).copied(), p.len()) {
                (Some("leaf"), 3) => Node::Leaf { value: num(n, p[2])? },
                (Some("split"), 6) => {
                    let node = Node::Split {
                        feature: idx(n, p[2])?,
                        threshold: num(n, p[3])?,
                        left: idx(n, p[4])?,
                        right: idx(n, p[5])?,
                    };
                    if let Node::Split { feature, left, right, .. } = node {
                        if feature >= columns.len() || left >= count || right >= count || left <= k || right <= k {
                            return Err((n, "split refers to a missing column or node".to_owned()));
                        }
                    }
                    node
                }
                _ => return Err((n, format!("bad node line {line:?}"))),
            });
        }
        trees.push(Tree { nodes });
    }
    Ok(GbdtModel { columns, trees, learning_rate, base_score })
}

/// JSON manifest naming the run score columns of an ensemble model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub feature_columns: Vec<String>,
    /// Run name → score file, in column order.
    pub runs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn runs_map(&self) -> BTreeMap<String, String> {
        self.runs.iter().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fv(v: f64) -> FeatureVector<f64> {
        FeatureVector::from_array([v, 0.0, 0.0, v * 2.0, -v, 1.0, 2.0, 10.0 - v])
    }

    fn toy() -> (Relevance, FeatureTable<f64>) {
        let mut rel = Relevance::new();
        let mut ft = FeatureTable::new();
        for q in 0..4 {
            for d in 0..10 {
                let key = (format!("q{q}"), format!("d{d}"));
                let g = ((d * 7 + q) % 5) as u8;
                rel.insert(key.clone(), g);
                ft.insert(key, fv(g as f64 + 0.1 * ((d * 3) % 4) as f64));
            }
        }
        (rel, ft)
    }

    #[test]
    fn assembly_columns_and_errors() {
        let (rel, ft) = toy();
        let t = assemble_rows(&rel, &ft, &[]).unwrap();
        assert_eq!(t.columns.len(), 8);
        assert_eq!(t.rows.len(), 40);
        let run: RunScores<f64> = rel.keys().map(|k| (k.clone(), 1.0)).collect();
        let t = assemble_rows(&rel, &ft, &[("a".into(), run.clone()), ("b".into(), run.clone())]).unwrap();
        assert_eq!(t.columns.len(), 10);
        let disjoint: RunScores<f64> = [(("zz".to_string(), "zz".to_string()), 0.0)].into();
        let err = assemble_rows(&rel, &ft, &[("a".into(), disjoint)]).unwrap_err();
        assert!(matches!(err, Error::MissingKey { .. }));
        assert!(err.to_string().contains("q0"));
    }

    #[test]
    fn lambda_hand_cases() {
        let (g, h) = lambdarank_gradients(&[0.5_f64, 0.5, 0.5], &[2, 2, 2]);
        assert_eq!(g, vec![0.0; 3]);
        assert_eq!(h, vec![0.0; 3]);
        let (g, _) = lambdarank_gradients(&[0.0_f64, 0.0], &[4, 0]);
        assert_eq!(g[0], -g[1]);
        // |ΔDCG| = 15·(1 − 1/log2 3); σ(0) = 1/2
        assert_abs_diff_eq!(g[0], -0.5 * 15.0 * (1.0 - 1.0 / 3f64.log2()), epsilon = 1e-12);
    }

    #[test]
    fn swapping_scores_mirrors_the_pair_term() {
        // σ(d) + σ(−d) = 1: the λ of the swapped pair is −|Δ|·σ(−d) vs −|Δ|·σ(d).
        let d = 0.7_f64;
        let (g1, _) = lambdarank_gradients(&[d, 0.0], &[3, 1]);
        let (g2, _) = lambdarank_gradients(&[0.0, d], &[3, 1]);
        let delta = 6.0 * (1.0 - 1.0 / 3f64.log2());
        assert_abs_diff_eq!(g1[0], -delta * sigmoid(-d), epsilon = 1e-12);
        assert_abs_diff_eq!(g2[0], -delta * sigmoid(d), epsilon = 1e-12);
        assert_abs_diff_eq!(g1[0] + g2[0], -delta, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn lambdas_sum_to_zero(
            rows in proptest::collection::vec((-3.0f64..3.0, 0u8..5), 1..15),
        ) {
            let (s, g): (Vec<f64>, Vec<u8>) = rows.into_iter().unzip();
            let (lam, h) = lambdarank_gradients(&s, &g);
            let total: f64 = lam.iter().sum();
            prop_assert!(total.abs() < 1e-9);
            prop_assert!(h.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn zero_iterations_and_zero_rate() {
        let (rel, ft) = toy();
        let t = assemble_rows(&rel, &ft, &[]).unwrap();
        let m = train_gbdt(&t, &GbdtHyperparams { num_iterations: 0, ..Default::default() }, 0).unwrap();
        assert!(m.predict_table(&t).unwrap().iter().all(|&p| p == m.base_score));
        let m = train_gbdt(&t, &GbdtHyperparams { learning_rate: 0.0, num_iterations: 5, ..Default::default() }, 0).unwrap();
        assert!(m.predict_table(&t).unwrap().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn boosting_beats_every_single_column() {
        let (rel, ft) = toy();
        let t = assemble_rows(&rel, &ft, &[]).unwrap();
        let m = train_gbdt(&t, &GbdtHyperparams { num_iterations: 50, min_samples_leaf: 2, ..Default::default() }, 0).unwrap();
        let ours = t.dcg(&m.predict_table(&t).unwrap()).unwrap();
        for c in 0..t.columns.len() {
            let col: Vec<f64> = t.rows.iter().map(|r| r.values[c]).collect();
            assert!(ours >= t.dcg(&col).unwrap() - 1e-12, "column {}", t.columns[c]);
        }
    }

    #[test]
    fn constant_column_changes_nothing_and_training_is_deterministic() {
        let (rel, ft) = toy();
        let base = assemble_rows(&rel, &ft, &[]).unwrap();
        let konst: RunScores<f64> = rel.keys().map(|k| (k.clone(), 3.0)).collect();
        let with = assemble_rows(&rel, &ft, &[("k".into(), konst)]).unwrap();
        let hp = GbdtHyperparams { num_iterations: 10, min_samples_leaf: 2, ..Default::default() };
        let a = train_gbdt(&base, &hp, 1).unwrap();
        let b = train_gbdt(&with, &hp, 1).unwrap();
        assert_eq!(a.predict_table(&base).unwrap(), b.predict_table(&with).unwrap());
        assert_eq!(a, train_gbdt(&base, &hp, 1).unwrap());
    }

    #[test]
    fn monotone_doc_id_relabeling_does_not_change_predictions() {
        let (rel, ft) = toy();
        let rename = |d: &str| format!("x{}", 10 + d[1..].parse::<usize>().unwrap());
        let rel2: Relevance = rel.iter().map(|((q, d), &g)| ((q.clone(), rename(d)), g)).collect();
        let ft2: FeatureTable<f64> = ft.iter().map(|((q, d), v)| ((q.clone(), rename(d)), *v)).collect();
        let hp = GbdtHyperparams { num_iterations: 10, min_samples_leaf: 2, ..Default::default() };
        let t1 = assemble_rows(&rel, &ft, &[]).unwrap();
        let t2 = assemble_rows(&rel2, &ft2, &[]).unwrap();
        let m1 = train_gbdt(&t1, &hp, 0).unwrap();
        let m2 = train_gbdt(&t2, &hp, 0).unwrap();
        for r in &t1.rows {
            assert_eq!(m1.predict(&r.values).unwrap(), m2.predict(&r.values).unwrap());
        }
    }

    #[test]
    fn no_grade_variation_is_an_error() {
        let (rel, ft) = toy();
        let flat: Relevance = rel.keys().map(|k| (k.clone(), 1)).collect();
        let t = assemble_rows(&flat, &ft, &[]).unwrap();
        assert!(matches!(train_gbdt(&t, &GbdtHyperparams::default(), 0), Err(Error::NoTrainableData(_))));
    }

    #[test]
    fn stump_and_empty_model_predictions() {
        let stump = GbdtModel {
            columns: vec!["bm25".into()],
            trees: vec![Tree {
                nodes: vec![
                    Node::Split { feature: 0, threshold: 1.5, left: 1, right: 2 },
                    Node::Leaf { value: -1.0 },
                    Node::Leaf { value: 2.0 },
                ],
            }],
            learning_rate: 0.5,
            base_score: 0.25,
        };
        assert_eq!(stump.predict(&[1.0]).unwrap(), -0.25);
        assert_eq!(stump.predict(&[2.0]).unwrap(), 1.25);
        assert_eq!(stump.predict(&[2.0]).unwrap(), stump.predict(&[2.0]).unwrap());
        assert!(stump.predict(&[1.0, 2.0]).is_err());
        let empty = GbdtModel::<f64> { trees: vec![], ..stump.clone() };
        assert_eq!(empty.predict(&[7.0]).unwrap(), 0.25);
    }

    #[test]
    fn model_file_round_trip() {
        let (rel, ft) = toy();
        let t = assemble_rows(&rel, &ft, &[]).unwrap();
        let m = train_gbdt(&t, &GbdtHyperparams { num_iterations: 5, min_samples_leaf: 2, ..Default::default() }, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        write_model(&p, &m).unwrap();
        assert_eq!(read_model::<f64>(&p).unwrap(), m);
        std::fs::write(&p, model_to_string(&m).replace("ultr-gbdt 1", "ultr-gbdt 0")).unwrap();
        assert!(read_model::<f64>(&p).is_err());
    }

    #[test]
    fn selection_picks_a_candidate() {
        let (rel, ft) = toy();
        let t = assemble_rows(&rel, &ft, &[]).unwrap();
        let c = vec![
            GbdtHyperparams { num_iterations: 0, ..Default::default() },
            GbdtHyperparams { num_iterations: 10, min_samples_leaf: 2, ..Default::default() },
        ];
        let (_, i) = select_and_train(&t, &c, 0.75, 0).unwrap();
        assert!(i < 2);
    }
}
