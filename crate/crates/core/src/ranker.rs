//! Pairwise gradient-boosted regression trees with NDCG-weighted lambda
//! gradients (LambdaMART), and the NDCG metric.
//!
//! Splits are exact: every distinct raw feature value is a candidate
//! threshold. Trees grow leaf-wise, always expanding the leaf with the
//! largest variance reduction of the lambda targets. Leaf values are Newton
//! steps `sum(lambda) / sum(hessian)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::debias::TrainingDataset;
use crate::math::{exp, log2};
use crate::{par, Error, Result, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerParams {
    pub num_trees: usize,
    pub learning_rate: f64,
    pub max_leaves: usize,
    pub min_examples_per_leaf: usize,
    pub ndcg_truncation: usize,
    /// Steepness of the pairwise logistic.
    pub sigma: f64,
}

impl Default for RankerParams {
    fn default() -> Self {
        Self {
            num_trees: 300,
            learning_rate: 0.1,
            max_leaves: 31,
            min_examples_per_leaf: 20,
            ndcg_truncation: DEFAULT_PAGE_SIZE,
            sigma: 1.0,
        }
    }
}

impl RankerParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_trees < 1 {
            return Err(Error::Config("num_trees must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config("learning_rate must be in (0, 1]".into()));
        }
        if self.max_leaves < 2 {
            return Err(Error::Config("max_leaves must be >= 2".into()));
        }
        if self.min_examples_per_leaf < 1 {
            return Err(Error::Config("min_examples_per_leaf must be >= 1".into()));
        }
        if self.ndcg_truncation < 1 {
            return Err(Error::Config("ndcg_truncation must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("sigma must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

/// A regression tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf(value)],
        }
    }

    pub fn evaluate(&self, features: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if features[feature] <= threshold {
                        left
                    } else {
                        right
                    }
                }
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }

    /// Checks child links, feature bounds and leaf finiteness.
    pub fn validate(&self, feature_dimension: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Data("tree has no nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match *n {
                Node::Leaf(v) if !v.is_finite() => {
                    return Err(Error::Data(format!("non-finite leaf value at node {i}")))
                }
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= feature_dimension {
                        return Err(Error::Data(format!(
                            "node {i} splits on feature {feature}, dimension is {feature_dimension}"
                        )));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::Data(format!("non-finite threshold at node {i}")));
                    }
                    // children always come after their parent, so links cannot cycle
                    if left <= i
                        || right <= i
                        || left >= self.nodes.len()
                        || right >= self.nodes.len()
                    {
                        return Err(Error::Data(format!("bad child link at node {i}")));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelMetadata {
    pub seed: u64,
    /// Hash of the training manifest, filled in by the caller.
    pub training_manifest_hash: Option<String>,
}

/// Additive tree ensemble: `score = sum(learning_rate * tree(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerModel {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub feature_dimension: usize,
    pub params: RankerParams,
    pub metadata: ModelMetadata,
}

impl RankerModel {
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dimension {
            return Err(Error::Usage(format!(
                "model expects {} features, got {}",
                self.feature_dimension,
                features.len()
            )));
        }
        Ok(self.predict_unchecked(features))
    }

    /// Same as [`predict`](Self::predict) without the length check.
    pub fn predict_unchecked(&self, features: &[f64]) -> f64 {
        let mut score = 0.0;
        for tree in &self.trees {
            score += self.learning_rate * tree.evaluate(features);
        }
        score
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Data("learning rate must be positive".into()));
        }
        for tree in &self.trees {
            tree.validate(self.feature_dimension)?;
        }
        Ok(())
    }
}

#[inline]
fn gain(label: u8) -> f64 {
    ((1u64 << label) - 1) as f64
}

#[inline]
fn discount(rank: usize) -> f64 {
    // rank is 1-based
    1.0 / log2(1.0 + rank as f64)
}

/// Indices sorted by descending score, ties by original index.
fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn ideal_dcg(labels: &[u8], k: usize) -> f64 {
    let mut sorted: Vec<u8> = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &l)| gain(l) * discount(i + 1))
        .sum()
}

/// NDCG@k with gain `2^label - 1` and discount `1 / log2(1 + rank)`.
///
/// Items are ordered by descending score, ties by index. A list whose ideal
/// DCG is zero (all labels zero) scores 1.
pub fn ndcg_at_k(labels: &[u8], scores: &[f64], k: usize) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Usage(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Usage("ndcg of an empty list".into()));
    }
    if labels.iter().any(|&l| l > 30) {
        return Err(Error::Usage("labels above 30 overflow the gain".into()));
    }
    Ok(ndcg_unchecked(labels, scores, k))
}

fn ndcg_unchecked(labels: &[u8], scores: &[f64], k: usize) -> f64 {
    let ideal = ideal_dcg(labels, k);
    if ideal == 0.0 {
        return 1.0;
    }
    let dcg: f64 = order_by_score(scores)
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &j)| gain(labels[j]) * discount(i + 1))
        .sum();
    dcg / ideal
}

/// Lambda gradients and hessians of one group.
///
/// For every pair with `label_i > label_j`, with `rho = 1 / (1 + exp(sigma
/// (s_i - s_j)))` and `w = |delta NDCG@truncation|` of swapping the two at
/// the current ranking, `grad_i -= sigma rho w`, `grad_j += sigma rho w`, and
/// both hessians gain `sigma^2 rho (1 - rho) w`. Gradients are of the loss;
/// trees fit their negation.
pub fn lambda_gradients(
    labels: &[u8],
    scores: &[f64],
    sigma: f64,
    truncation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    if n < 2 {
        return (grad, hess);
    }
    let ideal = ideal_dcg(labels, truncation);
    if ideal == 0.0 {
        return (grad, hess);
    }
    let mut rank_discount = vec![0.0; n];
    for (r, &i) in order_by_score(scores).iter().enumerate() {
        rank_discount[i] = if r < truncation { discount(r + 1) } else { 0.0 };
    }
    let lowest = labels.iter().copied().min().unwrap_or(0);
    for i in 0..n {
        if labels[i] == lowest {
            continue;
        }
        for j in 0..n {
            if labels[i] <= labels[j] {
                continue;
            }
            let delta =
                ((gain(labels[i]) - gain(labels[j])) * (rank_discount[i] - rank_discount[j])).abs()
                    / ideal;
            if delta == 0.0 {
                continue;
            }
            let rho = 1.0 / (1.0 + exp(sigma * (scores[i] - scores[j])));
            let g = sigma * rho * delta;
            let h = sigma * sigma * rho * (1.0 - rho) * delta;
            grad[i] -= g;
            grad[j] += g;
            hess[i] += h;
            hess[j] += h;
        }
    }
    (grad, hess)
}

/// What [`fit_with_trace`] records besides the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    /// Mean training NDCG@truncation after each tree.
    pub train_ndcg: Vec<f64>,
    /// Training-set scores after the last tree.
    pub final_scores: Vec<f64>,
}

/// Trains an ensemble on `dataset`.
///
/// `seed` is recorded in the model metadata; the procedure itself draws no
/// randomness.
pub fn fit(dataset: &TrainingDataset, params: &RankerParams, seed: u64) -> Result<RankerModel> {
    fit_inner(dataset, params, seed, false).map(|(m, _)| m)
}

pub fn fit_with_trace(
    dataset: &TrainingDataset,
    params: &RankerParams,
    seed: u64,
) -> Result<(RankerModel, FitTrace)> {
    fit_inner(dataset, params, seed, true)
}

fn fit_inner(
    dataset: &TrainingDataset,
    params: &RankerParams,
    seed: u64,
    trace: bool,
) -> Result<(RankerModel, FitTrace)> {
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let d = dataset.feature_dimension;
    if d == 0 {
        return Err(Error::Training("training set has no features".into()));
    }
    let n = dataset.len();
    if n > u32::MAX as usize {
        return Err(Error::Training("training set too large".into()));
    }
    let mut columns = vec![Vec::with_capacity(n); d];
    for (row, e) in dataset.examples.iter().enumerate() {
        if e.features.len() != d {
            return Err(Error::Training(format!(
                "example {row} has {} features, expected {d}",
                e.features.len()
            )));
        }
        for (c, &x) in columns.iter_mut().zip(&e.features) {
            if !x.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite feature in example {row}"
                )));
            }
            c.push(x);
        }
    }
    let labels: Vec<u8> = dataset.examples.iter().map(|e| e.label).collect();
    if labels.iter().any(|&l| l > 30) {
        return Err(Error::Training("labels above 30 overflow the gain".into()));
    }
    let groups = dataset.group_ranges();

    let coded: Vec<CodedColumn> = par::map(d, |f| CodedColumn::new(&columns[f]));

    let mut scores = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.num_trees);
    let mut history = Vec::new();
    let mut target = vec![0.0; n];
    let mut hessian = vec![0.0; n];
    let mut leaf_of = vec![0u32; n];
    for _ in 0..params.num_trees {
        let per_group = par::map(groups.len(), |g| {
            let (s, e) = groups[g];
            lambda_gradients(
                &labels[s..e],
                &scores[s..e],
                params.sigma,
                params.ndcg_truncation,
            )
        });
        for (&(s, _), (g, h)) in groups.iter().zip(per_group) {
            for (k, (gv, hv)) in g.into_iter().zip(h).enumerate() {
                target[s + k] = -gv;
                hessian[s + k] = hv;
            }
        }
        let tree = grow_tree(&columns, &coded, &target, &hessian, params, &mut leaf_of);
        for (score, &leaf) in scores.iter_mut().zip(&leaf_of) {
            if let Node::Leaf(v) = tree.nodes[leaf as usize] {
                *score += params.learning_rate * v;
            }
        }
        trees.push(tree);
        if trace {
            history.push(mean_ndcg(&labels, &scores, &groups, params.ndcg_truncation));
        }
    }
    let model = RankerModel {
        trees,
        learning_rate: params.learning_rate,
        feature_dimension: d,
        params: params.clone(),
        metadata: ModelMetadata {
            seed,
            training_manifest_hash: None,
        },
    };
    Ok((
        model,
        FitTrace {
            train_ndcg: history,
            final_scores: scores,
        },
    ))
}

/// Mean NDCG@k over the groups of a dataset scored by `scores`.
pub fn mean_ndcg(labels: &[u8], scores: &[f64], groups: &[(usize, usize)], k: usize) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    let per = par::map(groups.len(), |g| {
        let (s, e) = groups[g];
        ndcg_unchecked(&labels[s..e], &scores[s..e], k)
    });
    per.iter().sum::<f64>() / groups.len() as f64
}

/// A feature column coded by the rank of each row's value among the
/// column's distinct values.
struct CodedColumn {
    codes: Vec<u32>,
    /// Distinct values, ascending.
    values: Vec<f64>,
}

impl CodedColumn {
    fn new(column: &[f64]) -> Self {
        let mut values = column.to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let codes = column
            .iter()
            .map(|x| values.partition_point(|v| v < x) as u32)
            .collect();
        Self { codes, values }
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitCandidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct OpenLeaf {
    node: usize,
    /// Ascending row indices.
    rows: Vec<u32>,
    sum_target: f64,
    sum_hessian: f64,
    best: Option<SplitCandidate>,
}

fn leaf_value(sum_target: f64, sum_hessian: f64) -> f64 {
    if sum_hessian <= 1e-12 {
        0.0
    } else {
        sum_target / sum_hessian
    }
}

/// Per distinct value present in the leaf: (code, target sum, row count),
/// ascending by code. Within a value, targets are summed in row order.
fn value_sums(col: &CodedColumn, rows: &[u32], target: &[f64]) -> Vec<(u32, f64, usize)> {
    let mut out = Vec::new();
    if col.values.len() <= 4 * rows.len() {
        let mut sum = vec![0.0; col.values.len()];
        let mut count = vec![0usize; col.values.len()];
        for &r in rows {
            let c = col.codes[r as usize] as usize;
            sum[c] += target[r as usize];
            count[c] += 1;
        }
        for (c, (&s, &n)) in sum.iter().zip(&count).enumerate() {
            if n > 0 {
                out.push((c as u32, s, n));
            }
        }
    } else {
        let mut pairs: Vec<(u32, f64)> = rows
            .iter()
            .map(|&r| (col.codes[r as usize], target[r as usize]))
            .collect();
        pairs.sort_by_key(|p| p.0);
        for (c, t) in pairs {
            match out.last_mut() {
                Some((lc, s, n)) if *lc == c => {
                    *s += t;
                    *n += 1;
                }
                _ => out.push((c, t, 1)),
            }
        }
    }
    out
}

/// Best variance-reduction split of one feature. Candidate thresholds lie
/// between consecutive distinct values present in the leaf.
fn best_split_for_column(
    col: &CodedColumn,
    feature: usize,
    rows: &[u32],
    target: &[f64],
    total: f64,
    min_leaf: usize,
) -> Option<SplitCandidate> {
    let n = rows.len();
    if n < 2 * min_leaf {
        return None;
    }
    let sums = value_sums(col, rows, target);
    let parent = total * total / n as f64;
    let mut prefix = 0.0;
    let mut left_n = 0;
    let mut best: Option<SplitCandidate> = None;
    for w in sums.windows(2) {
        let (ca, s, c) = w[0];
        prefix += s;
        left_n += c;
        let right_n = n - left_n;
        if left_n < min_leaf {
            continue;
        }
        if right_n < min_leaf {
            break;
        }
        let suffix = total - prefix;
        let g = prefix * prefix / left_n as f64 + suffix * suffix / right_n as f64 - parent;
        if best.map_or(true, |b| g > b.gain) {
            let (a, b) = (col.values[ca as usize], col.values[w[1].0 as usize]);
            let mid = a + (b - a) / 2.0;
            let threshold = if mid < b { mid } else { a };
            best = Some(SplitCandidate {
                feature,
                threshold,
                gain: g,
            });
        }
    }
    best
}

fn find_best_split(
    columns: &[CodedColumn],
    rows: &[u32],
    target: &[f64],
    total: f64,
    min_leaf: usize,
) -> Option<SplitCandidate> {
    let per_feature = par::map(columns.len(), |f| {
        best_split_for_column(&columns[f], f, rows, target, total, min_leaf)
    });
    // first feature wins ties
    let mut best: Option<SplitCandidate> = None;
    for c in per_feature.into_iter().flatten() {
        if best.map_or(true, |b| c.gain > b.gain) {
            best = Some(c);
        }
    }
    best.filter(|c| c.gain > 1e-12)
}

fn open_leaf(
    node: usize,
    rows: Vec<u32>,
    columns: &[CodedColumn],
    target: &[f64],
    hessian: &[f64],
    min_leaf: usize,
    search: bool,
) -> OpenLeaf {
    let mut sum_target = 0.0;
    let mut sum_hessian = 0.0;
    for &r in &rows {
        sum_target += target[r as usize];
        sum_hessian += hessian[r as usize];
    }
    let best = if search {
        find_best_split(columns, &rows, target, sum_target, min_leaf)
    } else {
        None
    };
    OpenLeaf {
        node,
        rows,
        sum_target,
        sum_hessian,
        best,
    }
}

/// Grows one tree leaf-wise and records each row's leaf node in `leaf_of`.
fn grow_tree(
    raw_columns: &[Vec<f64>],
    coded: &[CodedColumn],
    target: &[f64],
    hessian: &[f64],
    params: &RankerParams,
    leaf_of: &mut [u32],
) -> Tree {
    let min_leaf = params.min_examples_per_leaf;
    let mut nodes = vec![Node::Leaf(0.0)];
    let all: Vec<u32> = (0..target.len() as u32).collect();
    let mut open = vec![open_leaf(
        0,
        all,
        coded,
        target,
        hessian,
        min_leaf,
        params.max_leaves > 1,
    )];
    let mut leaves = 1;
    while leaves < params.max_leaves {
        // expand the open leaf with the largest gain; earliest node wins ties
        let mut pick: Option<usize> = None;
        for (i, leaf) in open.iter().enumerate() {
            if let Some(c) = leaf.best {
                let better = match pick {
                    None => true,
                    Some(p) => c.gain > open[p].best.map_or(f64::NEG_INFINITY, |b| b.gain),
                };
                if better {
                    pick = Some(i);
                }
            }
        }
        let Some(i) = pick else { break };
        let leaf = open.swap_remove(i);
        let split = leaf.best.expect("picked leaf has a split");
        let col = &raw_columns[split.feature];
        let (lrows, rrows): (Vec<u32>, Vec<u32>) = leaf
            .rows
            .iter()
            .partition(|&&r| col[r as usize] <= split.threshold);
        let left = nodes.len();
        let right = left + 1;
        nodes.push(Node::Leaf(0.0));
        nodes.push(Node::Leaf(0.0));
        nodes[leaf.node] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        leaves += 1;
        let search = leaves < params.max_leaves;
        open.push(open_leaf(
            left, lrows, coded, target, hessian, min_leaf, search,
        ));
        open.push(open_leaf(
            right, rrows, coded, target, hessian, min_leaf, search,
        ));
    }
    for leaf in &open {
        nodes[leaf.node] = Node::Leaf(leaf_value(leaf.sum_target, leaf.sum_hessian));
        for &r in &leaf.rows {
            leaf_of[r as usize] = leaf.node as u32;
        }
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::debias::TrainingExample;
    use crate::types::{HotelId, SessionId};

    pub(crate) fn dataset(groups: &[Vec<(u8, Vec<f64>)>]) -> TrainingDataset {
        let mut examples = Vec::new();
        for (g, rows) in groups.iter().enumerate() {
            for (i, (label, x)) in rows.iter().enumerate() {
                examples.push(TrainingExample {
                    session_id: SessionId(g as u64),
                    hotel_id: HotelId(i as u64),
                    label: *label,
                    features: x.clone(),
                    position: i as u32 + 1,
                });
            }
        }
        let d = groups[0][0].1.len();
        TrainingDataset {
            examples,
            feature_dimension: d,
        }
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[5, 0], &[2.0, 1.0], 30).unwrap(), 1.0);
        let reversed = ndcg_at_k(&[5, 0], &[1.0, 2.0], 30).unwrap();
        assert!((reversed - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((reversed - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[0, 0, 0], &[0.3, 0.1, 0.2], 30).unwrap(), 1.0);
    }

    #[test]
    fn ndcg_ties_broken_by_index() {
        // equal scores keep input order
        assert_eq!(ndcg_at_k(&[5, 0], &[1.0, 1.0], 30).unwrap(), 1.0);
        assert!(ndcg_at_k(&[0, 5], &[1.0, 1.0], 30).unwrap() < 1.0);
    }

    #[test]
    fn ndcg_length_mismatch_is_usage_error() {
        assert!(matches!(
            ndcg_at_k(&[1, 0], &[1.0], 5),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn equal_labels_give_zero_gradients() {
        let (g, h) = lambda_gradients(&[2, 2, 2], &[0.1, -0.3, 0.7], 1.0, 30);
        assert!(g.iter().chain(&h).all(|&v| v == 0.0));
    }

    #[test]
    fn two_item_gradient_by_hand() {
        let sigma = 1.5;
        let (g, h) = lambda_gradients(&[5, 0], &[0.0, 0.0], sigma, 30);
        // equal scores keep index order: item 0 at rank 1, item 1 at rank 2
        let w = 1.0 - 1.0 / 3f64.log2();
        assert!((g[0] + 0.5 * sigma * w).abs() < 1e-15);
        assert!((g[1] - 0.5 * sigma * w).abs() < 1e-15);
        assert!((h[0] - sigma * sigma * 0.25 * w).abs() < 1e-15);
        assert_eq!(h[0], h[1]);
    }

    #[test]
    fn single_leaf_prediction() {
        let model = RankerModel {
            trees: vec![Tree::leaf(2.5)],
            learning_rate: 0.1,
            feature_dimension: 2,
            params: RankerParams::default(),
            metadata: ModelMetadata::default(),
        };
        assert_eq!(model.predict(&[0.0, 0.0]).unwrap(), 2.5 * 0.1);
        assert!(matches!(model.predict(&[0.0]), Err(Error::Usage(_))));
        let empty = RankerModel {
            trees: vec![],
            ..model
        };
        assert_eq!(empty.predict(&[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn all_zero_labels_give_zero_model() {
        let ds = dataset(&[(0..10).map(|i| (0, vec![i as f64])).collect()]);
        let params = RankerParams {
            num_trees: 5,
            min_examples_per_leaf: 1,
            ..RankerParams::default()
        };
        let model = fit(&ds, &params, 1).unwrap();
        for t in &model.trees {
            assert_eq!(t.nodes, vec![Node::Leaf(0.0)]);
        }
        let preds: Vec<f64> = (0..10)
            .map(|i| model.predict(&[i as f64]).unwrap())
            .collect();
        assert!(preds.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn empty_or_mismatched_dataset_rejected() {
        let empty = TrainingDataset::default();
        assert!(matches!(
            fit(&empty, &RankerParams::default(), 0),
            Err(Error::Training(_))
        ));
        let mut ds = dataset(&[vec![(1, vec![1.0, 2.0]), (0, vec![0.0, 1.0])]]);
        ds.examples[1].features.pop();
        assert!(matches!(
            fit(&ds, &RankerParams::default(), 0),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn threshold_is_midpoint_of_distinct_values() {
        let col = CodedColumn::new(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(col.codes, vec![2, 0, 1, 1]);
        assert_eq!(col.values, vec![1.0, 2.0, 3.0]);
        // both splits gain 4/3; the lower threshold is found first
        let target = [1.0, -1.0, 0.0, 0.0];
        let c = best_split_for_column(&col, 0, &[0, 1, 2, 3], &target, 0.0, 1).unwrap();
        assert_eq!(c.threshold, 1.5);
        assert!((c.gain - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_and_dense_value_sums_agree() {
        let column: Vec<f64> = (0..100).map(|i| f64::from((i * 37) % 100)).collect();
        let col = CodedColumn::new(&column);
        let target: Vec<f64> = (0..100).map(|i| f64::from(i) * 0.25 - 3.0).collect();
        let few = [3u32, 17, 42, 43, 99];
        let all: Vec<u32> = (0..100).collect();
        assert!(col.values.len() > 4 * few.len());
        let sparse = value_sums(&col, &few, &target);
        assert_eq!(sparse.len(), 5);
        let dense = value_sums(&col, &all, &target);
        for (c, s, n) in sparse {
            assert_eq!(n, 1);
            assert_eq!(dense.iter().find(|d| d.0 == c).unwrap().1, s);
        }
    }

    #[test]
    fn tree_validation_catches_bad_links() {
        let t = Tree {
            nodes: vec![Node::Split {
                feature: 0,
                threshold: 0.0,
                left: 0,
                right: 5,
            }],
        };
        assert!(t.validate(1).is_err());
        let t = Tree {
            nodes: vec![
                Node::Split {
                    feature: 3,
                    threshold: 0.0,
                    left: 1,
                    right: 2,
                },
                Node::Leaf(0.0),
                Node::Leaf(1.0),
            ],
        };
        assert!(t.validate(2).is_err());
        assert!(t.validate(4).is_ok());
    }
}
