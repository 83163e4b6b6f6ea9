//! Pixel-to-node graph construction and uncertainty-gated edge pruning.
//!
//! A feature map `h×w×c` becomes `N = h·w` nodes. Pairwise inner products
//! give a dense similarity matrix with a zero diagonal; degree
//! normalization turns each row into a connectivity distribution; each
//! neighbor `j` of node `i` is then scored by `Ŝ[i,j]·‖H_j‖₁`. Only the
//! nodes the coarse prediction is least sure about keep edges, and each of
//! them keeps its `K` best-scoring neighbors.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PsgrError, Result};
use crate::tensor::{Scalar, Tensor};

/// Node count above which [`build_sparse_graph`] stops materializing the
/// dense `N×N` matrices and scores uncertain rows on the fly.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `D^{-1/2} S D^{-1/2}`.
    Symmetric,
    /// `D^{-1} S`; rows sum to one.
    #[default]
    RandomWalk,
}

impl std::str::FromStr for NormMode {
    type Err = PsgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(NormMode::Symmetric),
            "random_walk" => Ok(NormMode::RandomWalk),
            other => Err(PsgrError::invalid(format!("unknown norm mode {other:?}"))),
        }
    }
}

/// Neighbor budget per uncertain node: a fixed count, or half the node count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KChoice {
    #[default]
    Auto,
    Fixed(usize),
}

impl KChoice {
    pub fn resolve(self, n_nodes: usize) -> usize {
        match self {
            KChoice::Auto => default_k(n_nodes),
            KChoice::Fixed(k) => k,
        }
    }
}

impl std::str::FromStr for KChoice {
    type Err = PsgrError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(KChoice::Auto);
        }
        s.parse::<usize>()
            .map(KChoice::Fixed)
            .map_err(|_| PsgrError::invalid(format!("k must be an integer or \"auto\", got {s:?}")))
    }
}

impl Serialize for KChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KChoice::Auto => s.serialize_str("auto"),
            KChoice::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(KChoice::Fixed(k as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// `floor(N/2)` clamped to `[1, N-1]`.
pub fn default_k(n_nodes: usize) -> usize {
    (n_nodes / 2).clamp(1, n_nodes.saturating_sub(1).max(1))
}

/// `round(ratio·N)` with halves rounded up.
pub fn uncertain_count(ratio: f64, n_nodes: usize) -> usize {
    ((ratio * n_nodes as f64) + 0.5).floor() as usize
}

/// `N×c` node features, one row per pixel in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureMatrix<T> {
    values: Tensor<T>,
}

impl<T: Scalar> NodeFeatureMatrix<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values })
    }

    /// Flattens an `h×w×c` feature map.
    pub fn from_feature_map(map: &Tensor<T>) -> Result<Self> {
        match map.shape() {
            &[h, w, c] => Ok(Self {
                values: map.reshape(&[h * w, c])?,
            }),
            s => Err(PsgrError::shape(
                "from_feature_map",
                format!("expected h×w×c, got {s:?}"),
            )),
        }
    }

    pub fn to_feature_map(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        self.values.reshape(&[h, w, self.n_channels()])
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Per-node L1 norms `‖H_j‖₁`.
    pub fn l1_norms(&self) -> Vec<T> {
        (0..self.n_nodes())
            .map(|j| {
                self.values
                    .row(j)
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + v.abs())
            })
            .collect()
    }
}

#[inline]
fn clamp0<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Similarity between two distinct nodes: the clamped inner product.
#[inline]
pub(crate) fn pair_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    clamp0(dot(a, b))
}

/// Normalized weight of the edge `i → j` given the similarity and degrees.
#[inline]
pub(crate) fn normalized_weight<T: Scalar>(s_ij: T, d_i: T, d_j: T, mode: NormMode) -> T {
    match mode {
        NormMode::RandomWalk => {
            if d_i > T::zero() {
                s_ij / d_i
            } else {
                T::zero()
            }
        }
        NormMode::Symmetric => {
            if d_i > T::zero() && d_j > T::zero() {
                s_ij / (d_i.sqrt() * d_j.sqrt())
            } else {
                T::zero()
            }
        }
    }
}

/// Dense similarity (`S`), degrees (`D`) and, once normalized, the
/// connectivity distribution (`Ŝ`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityGraph<T> {
    similarity: Tensor<T>,
    degrees: Vec<T>,
    normalized: Option<Tensor<T>>,
    norm_mode: Option<NormMode>,
}

/// `S = max(HHᵀ, 0)` with the diagonal forced to zero.
pub fn build_similarity<T: Scalar>(h: &NodeFeatureMatrix<T>) -> Result<ConnectivityGraph<T>> {
    let n = h.n_nodes();
    if n < 2 {
        return Err(PsgrError::DegenerateGraph(format!(
            "need at least 2 nodes, got {n}"
        )));
    }
    let gram = h.values.matmul(&h.values.transpose()?)?;
    let mut s = gram.into_data();
    for i in 0..n {
        for j in 0..n {
            let v = &mut s[i * n + j];
            *v = if i == j { T::zero() } else { clamp0(*v) };
        }
    }
    ConnectivityGraph::from_parts(Tensor::from_parts(vec![n, n], s))
}

impl<T: Scalar> ConnectivityGraph<T> {
    fn from_parts(similarity: Tensor<T>) -> Result<Self> {
        let n = similarity.shape()[0];
        let degrees = (0..n)
            .map(|i| similarity.row(i).iter().fold(T::zero(), |acc, &v| acc + v))
            .collect();
        Ok(Self {
            similarity,
            degrees,
            normalized: None,
            norm_mode: None,
        })
    }

    /// Wraps a precomputed similarity matrix after checking it is square,
    /// symmetric, nonnegative and zero on the diagonal.
    pub fn from_similarity(similarity: Tensor<T>) -> Result<Self> {
        let (n, m) = similarity.dims2()?;
        if n != m {
            return Err(PsgrError::shape("from_similarity", "matrix is not square"));
        }
        if n < 2 {
            return Err(PsgrError::DegenerateGraph("need at least 2 nodes".into()));
        }
        for i in 0..n {
            if similarity.at2(i, i) != T::zero() {
                return Err(PsgrError::invalid("similarity diagonal must be zero"));
            }
            for j in 0..n {
                let v = similarity.at2(i, j);
                if v < T::zero() || v != similarity.at2(j, i) {
                    return Err(PsgrError::invalid(
                        "similarity must be symmetric and nonnegative",
                    ));
                }
            }
        }
        Self::from_parts(similarity)
    }

    pub fn n_nodes(&self) -> usize {
        self.degrees.len()
    }

    pub fn similarity(&self) -> &Tensor<T> {
        &self.similarity
    }

    pub fn degrees(&self) -> &[T] {
        &self.degrees
    }

    pub fn normalized(&self) -> Option<&Tensor<T>> {
        self.normalized.as_ref()
    }

    pub fn norm_mode(&self) -> Option<NormMode> {
        self.norm_mode
    }

    /// Fills in `Ŝ`. Zero-degree nodes get all-zero rows and columns.
    pub fn normalize(mut self, mode: NormMode) -> Self {
        let n = self.n_nodes();
        let d = &self.degrees;
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = normalized_weight(self.similarity.at2(i, j), d[i], d[j], mode);
            }
        }
        self.normalized = Some(Tensor::from_parts(vec![n, n], out));
        self.norm_mode = Some(mode);
        self
    }

    fn require_normalized(&self) -> Result<&Tensor<T>> {
        self.normalized
            .as_ref()
            .ok_or_else(|| PsgrError::invalid("connectivity graph has not been normalized"))
    }
}

/// Scores of every neighbor of node `i`: `Ŝ[i,j]·‖H_j‖₁`, zero for `j = i`.
pub fn information_scores<T: Scalar>(
    g: &ConnectivityGraph<T>,
    h: &NodeFeatureMatrix<T>,
    i: usize,
) -> Result<Vec<T>> {
    let s_hat = g.require_normalized()?;
    let n = g.n_nodes();
    if h.n_nodes() != n {
        return Err(PsgrError::shape(
            "information_scores",
            format!("graph has {n} nodes, features have {}", h.n_nodes()),
        ));
    }
    if i >= n {
        return Err(PsgrError::invalid(format!("node {i} out of range 0..{n}")));
    }
    Ok(row_scores(s_hat.row(i), &h.l1_norms(), i))
}

fn row_scores<T: Scalar>(s_hat_row: &[T], l1: &[T], i: usize) -> Vec<T> {
    s_hat_row
        .iter()
        .zip(l1)
        .enumerate()
        .map(|(j, (&w, &norm))| if j == i { T::zero() } else { w * norm })
        .collect()
}

/// The nodes the coarse prediction is least sure about.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySelection<T> {
    pub ratio: f64,
    /// Top-1 minus top-2 class probability per node.
    pub margins: Vec<T>,
    /// Selected node indices in ascending order.
    pub selected: Vec<usize>,
}

impl<T> UncertaintySelection<T> {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.selected.binary_search(&i).is_ok()
    }
}

/// Picks `round(ratio·N)` nodes with the smallest top-1/top-2 probability
/// margin. Ties go to the lower node index.
pub fn select_uncertain<T: Scalar>(
    probs: &Tensor<T>,
    ratio: f64,
) -> Result<UncertaintySelection<T>> {
    let (n, classes) = probs.dims2()?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(PsgrError::invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    if classes < 2 {
        return Err(PsgrError::invalid(
            "uncertainty needs at least two class probabilities",
        ));
    }
    let mut margins = Vec::with_capacity(n);
    for i in 0..n {
        let row = probs.row(i);
        let total = row.iter().fold(0.0, |acc, v| acc + v.as_f64());
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < T::zero()) {
            return Err(PsgrError::invalid(format!(
                "row {i} is not a probability distribution (sum {total})"
            )));
        }
        let (mut first, mut second) = (T::neg_infinity(), T::neg_infinity());
        for &p in row {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        margins.push((first - second).max(T::zero()).min(T::one()));
    }
    let count = uncertain_count(ratio, n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| margins[a].partial_cmp(&margins[b]).unwrap().then(a.cmp(&b)));
    let mut selected = order[..count].to_vec();
    selected.sort_unstable();
    Ok(UncertaintySelection {
        ratio,
        margins,
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<T> {
    pub source: usize,
    pub target: usize,
    pub weight: T,
}

/// Weighted edges kept for uncertain rows, sorted by source then target.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency<T> {
    pub n_nodes: usize,
    pub k: usize,
    pub uncertain: Vec<usize>,
    pub edges: Vec<Edge<T>>,
}

impl<T: Scalar> SparseAdjacency<T> {
    pub fn empty(n_nodes: usize, k: usize) -> Self {
        Self {
            n_nodes,
            k,
            uncertain: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.edges.len()
    }

    pub fn row(&self, source: usize) -> &[Edge<T>] {
        let lo = self.edges.partition_point(|e| e.source < source);
        let hi = self.edges.partition_point(|e| e.source <= source);
        &self.edges[lo..hi]
    }

    pub fn is_uncertain(&self, i: usize) -> bool {
        self.uncertain.binary_search(&i).is_ok()
    }

    /// Bytes held by the edge list.
    pub fn storage_bytes(&self) -> usize {
        self.edges.capacity() * std::mem::size_of::<Edge<T>>()
            + self.uncertain.capacity() * std::mem::size_of::<usize>()
    }

    /// Text form: a `N K |Omega_u|` header, then one `i j weight` line per
    /// edge with 17 significant digits.
    pub fn write_text(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{} {} {}", self.n_nodes, self.k, self.uncertain.len())?;
        for e in &self.edges {
            writeln!(out, "{} {} {:.16e}", e.source, e.target, e.weight.as_f64())?;
        }
        Ok(())
    }
}

/// Header fields and edges parsed back from [`SparseAdjacency::write_text`].
pub fn read_edge_list(input: impl BufRead) -> Result<(usize, usize, usize, Vec<Edge<f64>>)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| PsgrError::Format("empty edge list".into()))??;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| PsgrError::Format(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [n, k, u] = nums[..] else {
        return Err(PsgrError::Format(format!("bad header {header:?}")));
    };
    let mut edges = Vec::new();
    for line in lines {
        let line = line?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [i, j, w] = parts[..] else {
            return Err(PsgrError::Format(format!("bad edge line {line:?}")));
        };
        let bad = || PsgrError::Format(format!("bad edge line {line:?}"));
        edges.push(Edge {
            source: i.parse().map_err(|_| bad())?,
            target: j.parse().map_err(|_| bad())?,
            weight: w.parse().map_err(|_| bad())?,
        });
    }
    Ok((n, k, u, edges))
}

/// Indices of the `k` highest scores, skipping `skip`; ties go to the lower
/// index. Returned in ascending index order.
fn top_k_targets<T: Scalar>(scores: &[T], skip: usize, k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&j| j != skip).collect();
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap()
            .then(a.cmp(b))
    };
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable();
    cand
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k + 1 > n {
        return Err(PsgrError::invalid(format!("k = {k} outside [1, {}]", n - 1)));
    }
    Ok(())
}

/// Keeps, for each uncertain node, the `k` neighbors with the highest
/// information scores.
pub fn prune<T: Scalar>(
    g: &ConnectivityGraph<T>,
    h: &NodeFeatureMatrix<T>,
    sel: &UncertaintySelection<T>,
    k: usize,
) -> Result<SparseAdjacency<T>> {
    let s_hat = g.require_normalized()?;
    let n = g.n_nodes();
    check_k(k, n)?;
    if h.n_nodes() != n || sel.margins.len() != n {
        return Err(PsgrError::shape("prune", "graph, features and selection disagree on N"));
    }
    let l1 = h.l1_norms();
    let rows: Vec<Vec<Edge<T>>> = sel
        .selected
        .par_iter()
        .map(|&i| {
            let row = s_hat.row(i);
            let scores = row_scores(row, &l1, i);
            top_k_targets(&scores, i, k)
                .into_iter()
                .map(|j| Edge {
                    source: i,
                    target: j,
                    weight: row[j],
                })
                .collect()
        })
        .collect();
    Ok(SparseAdjacency {
        n_nodes: n,
        k,
        uncertain: sel.selected.clone(),
        edges: rows.into_iter().flatten().collect(),
    })
}

/// Same result as `normalize` + [`prune`], computed row by row without
/// materializing any `N×N` matrix.
pub fn prune_streaming<T: Scalar>(
    h: &NodeFeatureMatrix<T>,
    sel: &UncertaintySelection<T>,
    k: usize,
    mode: NormMode,
) -> Result<SparseAdjacency<T>> {
    let n = h.n_nodes();
    if n < 2 {
        return Err(PsgrError::DegenerateGraph(format!(
            "need at least 2 nodes, got {n}"
        )));
    }
    check_k(k, n)?;
    let hv = h.values();
    let sim_row = |i: usize| -> Vec<T> {
        (0..n)
            .map(|j| {
                if i == j {
                    T::zero()
                } else {
                    pair_similarity(hv.row(i), hv.row(j))
                }
            })
            .collect()
    };
    let degree = |row: &[T]| row.iter().fold(T::zero(), |acc, &v| acc + v);
    let all_degrees: Option<Vec<T>> = match mode {
        NormMode::Symmetric if !sel.selected.is_empty() => {
            Some((0..n).into_par_iter().map(|i| degree(&sim_row(i))).collect())
        }
        _ => None,
    };
    let l1 = h.l1_norms();
    let rows: Vec<Vec<Edge<T>>> = sel
        .selected
        .par_iter()
        .map(|&i| {
            let s = sim_row(i);
            let d_i = degree(&s);
            let weights: Vec<T> = (0..n)
                .map(|j| {
                    let d_j = all_degrees.as_ref().map_or(T::zero(), |d| d[j]);
                    normalized_weight(s[j], d_i, d_j, mode)
                })
                .collect();
            let scores = row_scores(&weights, &l1, i);
            top_k_targets(&scores, i, k)
                .into_iter()
                .map(|j| Edge {
                    source: i,
                    target: j,
                    weight: weights[j],
                })
                .collect()
        })
        .collect();
    Ok(SparseAdjacency {
        n_nodes: n,
        k,
        uncertain: sel.selected.clone(),
        edges: rows.into_iter().flatten().collect(),
    })
}

/// Full construction: selection from the coarse probabilities, then the
/// pruned adjacency. Uses the dense path up to `dense_limit` nodes and the
/// streaming path beyond it.
pub fn build_sparse_graph<T: Scalar>(
    h: &NodeFeatureMatrix<T>,
    coarse_probs: &Tensor<T>,
    ratio: f64,
    k: KChoice,
    mode: NormMode,
    dense_limit: usize,
) -> Result<(UncertaintySelection<T>, SparseAdjacency<T>)> {
    let n = h.n_nodes();
    if coarse_probs.shape().first() != Some(&n) {
        return Err(PsgrError::shape(
            "build_sparse_graph",
            format!("{n} nodes but coarse map has shape {:?}", coarse_probs.shape()),
        ));
    }
    let sel = select_uncertain(coarse_probs, ratio)?;
    let k = k.resolve(n);
    if sel.is_empty() {
        if n < 2 {
            return Err(PsgrError::DegenerateGraph("need at least 2 nodes".into()));
        }
        check_k(k, n)?;
        return Ok((sel, SparseAdjacency::empty(n, k)));
    }
    let adj = if n <= dense_limit {
        let g = build_similarity(h)?.normalize(mode);
        prune(&g, h, &sel, k)?
    } else {
        prune_streaming(h, &sel, k, mode)?
    };
    Ok((sel, adj))
}
