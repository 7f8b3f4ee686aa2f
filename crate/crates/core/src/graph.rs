//! Attributed graphs, synthetic generators, edge perturbation and the
//! normalized propagation operator.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CsrMatrix, Matrix};

/// Normalizes an undirected pair to `(min, max)`.
#[inline]
pub fn canonical(u: usize, v: usize) -> (usize, usize) {
    if u <= v {
        (u, v)
    } else {
        (v, u)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    /// Sorted, deduplicated canonical pairs with `u < v`.
    edges: Vec<(usize, usize)>,
    train_mask: Vec<bool>,
    val_mask: Vec<bool>,
    test_mask: Vec<bool>,
}

impl Graph {
    /// Validates and assembles a graph. Edges are canonicalized and
    /// deduplicated; self-loops are rejected (use the loaders to drop them).
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        masks: [Vec<bool>; 3],
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::validation(format!(
                "{} labels for {n} nodes",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::validation(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::validation(format!(
                    "edge ({u}, {v}) outside [0, {n})"
                )));
            }
            if u == v {
                return Err(Error::validation(format!("self-loop at node {u}")));
            }
            set.insert(canonical(u, v));
        }
        let [train_mask, val_mask, test_mask] = masks;
        for m in [&train_mask, &val_mask, &test_mask] {
            if m.len() != n {
                return Err(Error::validation(format!(
                    "mask of length {} for {n} nodes",
                    m.len()
                )));
            }
        }
        for i in 0..n {
            let hits = [train_mask[i], val_mask[i], test_mask[i]]
                .iter()
                .filter(|&&b| b)
                .count();
            if hits > 1 {
                return Err(Error::validation(format!("node {i} is in more than one split")));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            edges: set.into_iter().collect(),
            train_mask,
            val_mask,
            test_mask,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn val_mask(&self) -> &[bool] {
        &self.val_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&canonical(u, v)).is_ok()
    }

    /// Adjacency lists of the original graph (no self-loops).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Same nodes, features and splits with a different edge set.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
            edges,
            [
                self.train_mask.clone(),
                self.val_mask.clone(),
                self.test_mask.clone(),
            ],
        )
    }

    pub fn with_split(&self, split: &SplitSpec) -> Result<Self> {
        let masks = split.masks(self.num_nodes())?;
        let mut g = self.clone();
        [g.train_mask, g.val_mask, g.test_mask] = masks;
        Ok(g)
    }
}

/// How node splits are produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Seeded shuffle of all nodes, then consecutive train/val/test slices.
    Fractions {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
    Indices {
        train: Vec<usize>,
        val: Vec<usize>,
        test: Vec<usize>,
    },
}

impl SplitSpec {
    pub fn fractions(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec::Fractions {
            train,
            val,
            test,
            seed,
        }
    }

    pub fn masks(&self, n: usize) -> Result<[Vec<bool>; 3]> {
        let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
        match self {
            SplitSpec::Fractions {
                train,
                val,
                test,
                seed,
            } => {
                let fr = [*train, *val, *test];
                if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || fr.iter().sum::<f64>() > 1.0 + 1e-9
                {
                    return Err(Error::validation(format!(
                        "split fractions {fr:?} must be in [0, 1] and sum to at most 1"
                    )));
                }
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
                let mut start = 0;
                for (mask, f) in masks.iter_mut().zip(fr) {
                    let count = ((f * n as f64).floor() as usize).min(n - start);
                    for &i in &order[start..start + count] {
                        mask[i] = true;
                    }
                    start += count;
                }
            }
            SplitSpec::Indices { train, val, test } => {
                for (mask, idx) in masks.iter_mut().zip([train, val, test]) {
                    for &i in idx {
                        if i >= n {
                            return Err(Error::validation(format!(
                                "split index {i} outside [0, {n})"
                            )));
                        }
                        mask[i] = true;
                    }
                }
                let total: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
                let distinct = (0..n).filter(|&i| masks.iter().any(|m| m[i])).count();
                if total != distinct {
                    return Err(Error::validation("split index lists overlap"));
                }
            }
        }
        Ok(masks)
    }
}

#[derive(Clone, Debug)]
pub struct LoadedGraph {
    pub graph: Graph,
    pub warnings: Vec<String>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses a whitespace-separated `u v` edge list. Returns raw pairs with
/// their 1-based line numbers.
pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let (Some(a), Some(b), None) = (tok.next(), tok.next(), tok.next()) else {
            return Err(parse_err(path, i + 1, format!("expected `u v`, got {line:?}")));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| parse_err(path, i + 1, format!("bad node index {s:?}")))
        };
        out.push((parse(a)?, parse(b)?, i + 1));
    }
    Ok(out)
}

pub fn read_feature_csv(path: &Path) -> Result<Matrix> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("bad number {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("{} columns, expected {first}", row.len()),
                ));
            }
        }
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// Reads one unsigned integer per non-empty line (labels or split indices).
pub fn read_index_file(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse::<usize>()
                .map_err(|_| parse_err(path, i + 1, format!("bad integer {line:?}")))?,
        );
    }
    Ok(out)
}

/// Loads an attributed graph from an edge list plus headerless feature and
/// label CSVs. Self-loops are dropped with a warning; duplicate and reversed
/// edges collapse to one undirected edge.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    split: &SplitSpec,
) -> Result<LoadedGraph> {
    let features = read_feature_csv(feature_path)?;
    let labels = read_index_file(label_path)?;
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::validation(format!(
            "{} labels but {n} feature rows",
            labels.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut edges = Vec::new();
    for (u, v, line) in read_edge_list(edge_path)? {
        if u >= n || v >= n {
            return Err(Error::validation(format!(
                "{}:{line}: edge ({u}, {v}) outside [0, {n})",
                edge_path.display()
            )));
        }
        if u == v {
            let msg = format!("{}:{line}: self-loop ({u}, {u}) dropped", edge_path.display());
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        edges.push((u, v));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let masks = split.masks(n)?;
    let graph = Graph::new(features, labels, num_classes, edges, masks)?;
    Ok(LoadedGraph { graph, warnings })
}

/// Writes the graph in the loader's file formats.
pub fn save_graph(g: &Graph, dir: &Path) -> Result<()> {
    use std::fmt::Write as _;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut edges = String::new();
    for &(u, v) in g.edges() {
        let _ = writeln!(edges, "{u} {v}");
    }
    let mut feats = String::new();
    for r in 0..g.num_nodes() {
        let row: Vec<String> = g.features().row(r).iter().map(|x| format!("{x:?}")).collect();
        let _ = writeln!(feats, "{}", row.join(","));
    }
    let mut labels = String::new();
    for y in g.labels() {
        let _ = writeln!(labels, "{y}");
    }
    let mut splits = [String::new(), String::new(), String::new()];
    for (s, mask) in splits.iter_mut().zip([g.train_mask(), g.val_mask(), g.test_mask()]) {
        for (i, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
            let _ = writeln!(s, "{i}");
        }
    }
    let files = [
        ("edges.txt", edges),
        ("features.csv", feats),
        ("labels.csv", labels),
        ("train.idx", splits[0].clone()),
        ("val.idx", splits[1].clone()),
        ("test.idx", splits[2].clone()),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmConfig {
    pub num_nodes: usize,
    pub num_blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub noise_scale: f64,
    pub seed: u64,
    /// Train/val/test fractions for the seeded node split.
    pub split: [f64; 3],
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            num_nodes: 200,
            num_blocks: 2,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 16,
            noise_scale: 0.1,
            seed: 42,
            split: [0.6, 0.2, 0.2],
        }
    }
}

impl SbmConfig {
    pub fn new(
        num_nodes: usize,
        num_blocks: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
        noise_scale: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_nodes,
            num_blocks,
            p_in,
            p_out,
            feature_dim,
            noise_scale,
            seed,
            ..Self::default()
        }
    }
}

/// Stochastic block model with contiguous equal-size blocks. Features are the
/// one-hot block indicator padded to `feature_dim` plus Gaussian noise.
pub fn generate_sbm(cfg: &SbmConfig) -> Result<Graph> {
    let SbmConfig {
        num_nodes: n,
        num_blocks: b,
        p_in,
        p_out,
        feature_dim,
        noise_scale,
        seed,
        split,
    } = *cfg;
    if !(0.0 <= p_out && p_out < p_in && p_in <= 1.0) {
        return Err(Error::validation(format!(
            "need 0 <= p_out < p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if b == 0 || n == 0 || n % b != 0 {
        return Err(Error::validation(format!(
            "{b} blocks must evenly divide {n} nodes"
        )));
    }
    if feature_dim < b {
        return Err(Error::validation(format!(
            "feature_dim {feature_dim} cannot hold a {b}-block indicator"
        )));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::validation("noise_scale must be non-negative"));
    }
    let block_size = n / b;
    let block = |i: usize| i / block_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block(u) == block(v) { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let mut features = Matrix::zeros(n, feature_dim);
    for u in 0..n {
        let row = features.row_mut(u);
        for x in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = noise_scale * z;
        }
        row[block(u)] += 1.0;
    }
    let labels = (0..n).map(block).collect();
    let masks = SplitSpec::fractions(split[0], split[1], split[2], seed).masks(n)?;
    Graph::new(features, labels, b, edges, masks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// `D̃^{-1/2} Ã D̃^{-1/2}`
    Symmetric,
    /// `D̃^{-1} Ã`, unit row sums.
    RowStochastic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationOperator {
    pub mode: PropagationMode,
    pub matrix: Arc<CsrMatrix>,
}

impl PropagationOperator {
    pub fn num_nodes(&self) -> usize {
        self.matrix.rows()
    }
}

/// Normalized adjacency with self-loops from an explicit edge list.
pub fn propagation_from_edges(
    num_nodes: usize,
    edges: &[(usize, usize)],
    mode: PropagationMode,
) -> Result<PropagationOperator> {
    let mut degree = vec![1.0_f64; num_nodes];
    for &(u, v) in edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let weight = |u: usize, v: usize| match mode {
        PropagationMode::Symmetric => 1.0 / (degree[u] * degree[v]).sqrt(),
        PropagationMode::RowStochastic => 1.0 / degree[u],
    };
    let triplets = (0..num_nodes)
        .map(|u| (u, u, weight(u, u)))
        .chain(
            edges
                .iter()
                .flat_map(|&(u, v)| [(u, v, weight(u, v)), (v, u, weight(v, u))]),
        );
    let matrix = CsrMatrix::from_triplets(num_nodes, num_nodes, triplets)?;
    Ok(PropagationOperator {
        mode,
        matrix: Arc::new(matrix),
    })
}

pub fn build_propagation(g: &Graph, mode: PropagationMode) -> Result<PropagationOperator> {
    propagation_from_edges(g.num_nodes(), g.edges(), mode)
}

/// Adds `⌊fraction·|E|⌋` new undirected edges drawn uniformly without
/// replacement from the non-adjacent distinct pairs.
pub fn inject_random_edges(g: &Graph, fraction: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=2.0).contains(&fraction) {
        return Err(Error::validation(format!(
            "injection fraction {fraction} outside [0, 2]"
        )));
    }
    let count = (fraction * g.num_edges() as f64).floor() as usize;
    let n = g.num_nodes();
    let existing: HashSet<(usize, usize)> = g.edges().iter().copied().collect();
    let added = sample_non_edges(n, &existing, count, &mut ChaCha8Rng::seed_from_u64(seed))?;
    g.with_edges(g.edges().iter().copied().chain(added))
}

/// Samples `count` distinct canonical pairs `u < v` absent from `exclude`,
/// uniformly without replacement.
pub fn sample_non_edges<R: Rng>(
    n: usize,
    exclude: &HashSet<(usize, usize)>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let total_pairs = n * n.saturating_sub(1) / 2;
    let pool = total_pairs - exclude.len().min(total_pairs);
    if count > pool {
        return Err(Error::validation(format!(
            "requested {count} new edges but only {pool} non-adjacent pairs exist"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if count * 2 > pool {
        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|p| !exclude.contains(p))
            .collect();
        let (picked, _) = candidates.partial_shuffle(rng, count);
        return Ok(picked.to_vec());
    }
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let e = canonical(u, v);
        if exclude.contains(&e) || !chosen.insert(e) {
            continue;
        }
        out.push(e);
    }
    Ok(out)
}

/// `max_u ‖x_u‖∞`.
pub fn feature_inf_norm_max(g: &Graph) -> f64 {
    g.features().max_abs()
}

/// Edge-level split for link prediction. Message passing uses only
/// `train_graph`'s edges.
#[derive(Clone, Debug)]
pub struct EdgeSplit {
    pub train_graph: Graph,
    pub train_pos: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
}

pub fn split_edges(g: &Graph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    if val_frac < 0.0 || test_frac < 0.0 || val_frac + test_frac >= 1.0 {
        return Err(Error::validation("edge split fractions must leave training edges"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = g.edges().to_vec();
    edges.shuffle(&mut rng);
    let m = edges.len();
    let n_test = (test_frac * m as f64).floor() as usize;
    let n_val = (val_frac * m as f64).floor() as usize;
    let test_pos = edges[..n_test].to_vec();
    let val_pos = edges[n_test..n_test + n_val].to_vec();
    let train_pos = edges[n_test + n_val..].to_vec();
    if train_pos.is_empty() {
        return Err(Error::validation("no training edges left after split"));
    }
    let all: HashSet<(usize, usize)> = g.edges().iter().copied().collect();
    let neg = sample_non_edges(g.num_nodes(), &all, n_val + n_test, &mut rng)?;
    let (val_neg, test_neg) = (neg[..n_val].to_vec(), neg[n_val..].to_vec());
    Ok(EdgeSplit {
        train_graph: g.with_edges(train_pos.iter().copied())?,
        train_pos,
        val_pos,
        val_neg,
        test_pos,
        test_neg,
    })
}
