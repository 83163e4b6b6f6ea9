//! Graph reasoning on the pruned pixel graph and the full reasoning module:
//! input projection, graph construction, stacked GNN layers, output
//! projection and residual fusion.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{
    check::CheckCase, EdgeWeightSpec, NeighborLists, NeighborWeight, Tape, Var,
};
use crate::error::{PsgrError, Result};
use crate::graph::{
    build_sparse_graph, uncertain_count, KChoice, NodeFeatureMatrix, NormMode, SparseAdjacency,
    UncertaintySelection, DEFAULT_DENSE_LIMIT,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Sigmoid,
    Relu,
    Identity,
}

impl std::str::FromStr for Nonlinearity {
    type Err = PsgrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            other => Err(PsgrError::invalid(format!("unknown nonlinearity {other:?}"))),
        }
    }
}

impl Nonlinearity {
    fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Self::Sigmoid => tape.sigmoid(x),
            Self::Relu => tape.relu(x),
            Self::Identity => Ok(x),
        }
    }
}

/// Parameters of one message-passing layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnLayerParams<T> {
    pub theta1: Tensor<T>,
    pub theta2: Tensor<T>,
    pub nonlinearity: Nonlinearity,
    pub use_edge_weights: bool,
    pub include_local: bool,
}

impl<T: Scalar> GnnLayerParams<T> {
    pub fn new(
        theta1: Tensor<T>,
        theta2: Tensor<T>,
        nonlinearity: Nonlinearity,
        use_edge_weights: bool,
        include_local: bool,
    ) -> Result<Self> {
        let c = theta1.shape().first().copied().unwrap_or(0);
        if theta1.shape() != [c, c] || theta2.shape() != [c, c] {
            return Err(PsgrError::shape(
                "gnn_layer",
                format!(
                    "theta1 {:?} and theta2 {:?} must be equal square matrices",
                    theta1.shape(),
                    theta2.shape()
                ),
            ));
        }
        Ok(Self {
            theta1,
            theta2,
            nonlinearity,
            use_edge_weights,
            include_local,
        })
    }

    /// `θ1 = I`, `θ2 = 0`, identity nonlinearity.
    pub fn identity(c: usize) -> Self {
        Self {
            theta1: Tensor::eye(c),
            theta2: Tensor::zeros(&[c, c]),
            nonlinearity: Nonlinearity::Identity,
            use_edge_weights: true,
            include_local: true,
        }
    }
}

/// Local (4-connected grid) and global (pruned-graph) neighbors per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSets {
    pub height: usize,
    pub width: usize,
    pub local: Vec<Vec<usize>>,
    pub global: Vec<Vec<usize>>,
}

fn grid_neighbors(height: usize, width: usize) -> Vec<Vec<usize>> {
    (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            let mut out = Vec::with_capacity(4);
            if y > 0 {
                out.push(i - width);
            }
            if x > 0 {
                out.push(i - 1);
            }
            if x + 1 < width {
                out.push(i + 1);
            }
            if y + 1 < height {
                out.push(i + width);
            }
            out
        })
        .collect()
}

impl NeighborhoodSets {
    /// Grid neighbors only.
    pub fn grid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            local: grid_neighbors(height, width),
            global: vec![Vec::new(); height * width],
        }
    }

    pub fn new<T: Scalar>(height: usize, width: usize, adj: &SparseAdjacency<T>) -> Result<Self> {
        if adj.n_nodes != height * width {
            return Err(PsgrError::shape(
                "neighborhoods",
                format!("{} nodes for a {height}x{width} grid", adj.n_nodes),
            ));
        }
        let mut sets = Self::grid(height, width);
        for e in &adj.edges {
            sets.global[e.source].push(e.target);
        }
        Ok(sets)
    }

    pub fn n_nodes(&self) -> usize {
        self.local.len()
    }

    /// Sorted union of local and global neighbors of `i`.
    pub fn phi(&self, i: usize, include_local: bool) -> Vec<usize> {
        let mut out: Vec<usize> = self.global[i].clone();
        if include_local {
            out.extend(&self.local[i]);
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Neighbor lists for `blocks` stacked graphs. A node that is both a local
/// and a global neighbor appears once, with the global weight.
fn union_lists<T: Scalar>(
    height: usize,
    width: usize,
    adjs: &[&SparseAdjacency<T>],
    use_edge_weights: bool,
    include_local: bool,
) -> (NeighborLists, Vec<(usize, usize)>) {
    let n = height * width;
    let local = grid_neighbors(height, width);
    let mut lists = Vec::with_capacity(n * adjs.len());
    let mut edges = Vec::new();
    for (b, adj) in adjs.iter().enumerate() {
        let off = b * n;
        let mut per_node: Vec<Vec<(usize, NeighborWeight)>> = vec![Vec::new(); n];
        for e in &adj.edges {
            let w = if use_edge_weights {
                NeighborWeight::Edge(edges.len())
            } else {
                NeighborWeight::One
            };
            edges.push((off + e.source, off + e.target));
            per_node[e.source].push((off + e.target, w));
        }
        for (i, mut row) in per_node.into_iter().enumerate() {
            if include_local {
                for &j in &local[i] {
                    if !row.iter().any(|&(t, _)| t == off + j) {
                        row.push((off + j, NeighborWeight::One));
                    }
                }
            }
            row.sort_by_key(|&(j, _)| j);
            lists.push(row);
        }
    }
    (
        NeighborLists::new(lists).expect("neighbor indices are in range by construction"),
        edges,
    )
}

/// Records one layer `F(Zθ1 + Σ_j w_ij Z_j θ2)` on the tape.
pub fn gnn_layer_tape<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    theta1: Var,
    theta2: Var,
    lists: &Arc<NeighborLists>,
    weights: Option<Var>,
    nonlinearity: Nonlinearity,
) -> Result<Var> {
    let own = tape.matmul(z, theta1)?;
    let msg = tape.matmul(z, theta2)?;
    let agg = tape.sparse_aggregate(msg, lists, weights)?;
    let pre = tape.add(own, agg)?;
    nonlinearity.apply(tape, pre)
}

/// One message-passing layer over `Φ(i) = N_l(i) ∪ N_g(i)` with fixed
/// edge weights taken from `adj`.
pub fn gnn_layer<T: Scalar>(
    z: &Tensor<T>,
    nbhd: &NeighborhoodSets,
    adj: &SparseAdjacency<T>,
    p: &GnnLayerParams<T>,
) -> Result<Tensor<T>> {
    let (n, c) = z.dims2()?;
    if adj.n_nodes != n || nbhd.n_nodes() != n {
        return Err(PsgrError::shape(
            "gnn_layer",
            format!("{n} feature rows, {} graph nodes", adj.n_nodes),
        ));
    }
    if p.theta1.shape() != [c, c] {
        return Err(PsgrError::shape("gnn_layer", "theta does not match channels"));
    }
    let (lists, _) = union_lists(
        nbhd.height,
        nbhd.width,
        &[adj],
        p.use_edge_weights,
        p.include_local,
    );
    let weights = Tensor::checked(
        "gnn_layer",
        vec![adj.edges.len()],
        adj.edges.iter().map(|e| e.weight).collect(),
    )?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let t1 = tape.constant(p.theta1.clone());
    let t2 = tape.constant(p.theta2.clone());
    let wv = p.use_edge_weights.then(|| tape.constant(weights));
    let out = gnn_layer_tape(&mut tape, zv, t1, t2, &Arc::new(lists), wv, p.nonlinearity)?;
    Ok(tape.value(out).clone())
}

/// Hyperparameters of the reasoning module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsgrConfig {
    pub ru: f64,
    pub k: KChoice,
    pub norm_mode: NormMode,
    pub n_layers: usize,
    /// Inner width `c'`; `None` keeps the input width.
    pub channels_inner: Option<usize>,
    pub nonlinearity: Nonlinearity,
    pub use_edge_weights: bool,
    pub include_local: bool,
    pub dense_limit: usize,
}

impl Default for PsgrConfig {
    fn default() -> Self {
        Self {
            ru: 0.005,
            k: KChoice::Auto,
            norm_mode: NormMode::RandomWalk,
            n_layers: 1,
            channels_inner: None,
            nonlinearity: Nonlinearity::Sigmoid,
            use_edge_weights: true,
            include_local: true,
            dense_limit: DEFAULT_DENSE_LIMIT,
        }
    }
}

impl PsgrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ru) {
            return Err(PsgrError::invalid(format!("ru = {} outside [0, 1]", self.ru)));
        }
        if self.n_layers == 0 {
            return Err(PsgrError::invalid("n_layers must be at least 1"));
        }
        if self.channels_inner == Some(0) {
            return Err(PsgrError::invalid("channels_inner must be positive"));
        }
        Ok(())
    }

    pub fn inner(&self, c: usize) -> usize {
        self.channels_inner.unwrap_or(c)
    }
}

/// Weights of the reasoning module for `c` input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PsgrParams<T> {
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    /// `(θ1, θ2)` per layer.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

impl<T: Scalar> PsgrParams<T> {
    /// Scaled-normal initialization. With `zero_output` the output
    /// projection starts at zero so the module begins as the identity.
    pub fn init(c: usize, cfg: &PsgrConfig, rng: &mut Rng, zero_output: bool) -> Result<Self> {
        cfg.validate()?;
        let ci = cfg.inner(c);
        let scaled = |rng: &mut Rng, shape: &[usize], fan_in: usize| {
            rng.normal_tensor::<T>(shape)
                .scale(1.0 / (fan_in as f64).sqrt())
        };
        let w_in = scaled(rng, &[c, ci], c)?;
        let layers = (0..cfg.n_layers)
            .map(|_| Ok((scaled(rng, &[ci, ci], ci)?, scaled(rng, &[ci, ci], ci)?)))
            .collect::<Result<Vec<_>>>()?;
        let w_out = if zero_output {
            Tensor::zeros(&[ci, c])
        } else {
            scaled(rng, &[ci, c], ci)?
        };
        Ok(Self {
            w_in,
            b_in: Tensor::zeros(&[ci]),
            layers,
            w_out,
            b_out: Tensor::zeros(&[c]),
        })
    }

    pub fn channels(&self) -> usize {
        self.w_in.shape()[0]
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("w_in".to_string(), &self.w_in), ("b_in".to_string(), &self.b_in)];
        for (l, (t1, t2)) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.theta1"), t1));
            out.push((format!("layer{l}.theta2"), t2));
        }
        out.push(("w_out".to_string(), &self.w_out));
        out.push(("b_out".to_string(), &self.b_out));
        out
    }

    /// Records the parameters on a tape.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> PsgrVars {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        PsgrVars {
            w_in: leaf(&self.w_in),
            b_in: leaf(&self.b_in),
            layers: self.layers.iter().map(|(a, b)| (leaf(a), leaf(b))).collect(),
            w_out: leaf(&self.w_out),
            b_out: leaf(&self.b_out),
        }
    }
}

/// Tape handles of [`PsgrParams`].
#[derive(Debug, Clone)]
pub struct PsgrVars {
    pub w_in: Var,
    pub b_in: Var,
    pub layers: Vec<(Var, Var)>,
    pub w_out: Var,
    pub b_out: Var,
}

impl PsgrVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.w_in, self.b_in];
        for &(a, b) in &self.layers {
            out.extend([a, b]);
        }
        out.extend([self.w_out, self.b_out]);
        out
    }
}

/// Graph structure for a batch of `h×w` images: the selected nodes and
/// pruned adjacency per image, treated as constants when differentiating.
#[derive(Debug, Clone)]
pub struct PsgrStructure<T> {
    pub height: usize,
    pub width: usize,
    pub selections: Vec<UncertaintySelection<T>>,
    pub adjacency: Vec<SparseAdjacency<T>>,
}

impl<T: Scalar> PsgrStructure<T> {
    /// Builds per-image structure from projected node features
    /// `h_rows: [B·N, c']` and coarse probabilities `[B·N, classes]`.
    pub fn build(
        h_rows: &Tensor<T>,
        coarse_rows: &Tensor<T>,
        height: usize,
        width: usize,
        cfg: &PsgrConfig,
    ) -> Result<Self> {
        let n = height * width;
        let (m, c) = h_rows.dims2()?;
        let (mp, classes) = coarse_rows.dims2()?;
        if n == 0 || m % n != 0 || mp != m {
            return Err(PsgrError::shape(
                "psgr",
                format!("{m} feature rows and {mp} probability rows for {height}x{width} images"),
            ));
        }
        let mut selections = Vec::new();
        let mut adjacency = Vec::new();
        for b in 0..m / n {
            let h = Tensor::from_parts(vec![n, c], h_rows.data()[b * n * c..(b + 1) * n * c].to_vec());
            let p = Tensor::from_parts(
                vec![n, classes],
                coarse_rows.data()[b * n * classes..(b + 1) * n * classes].to_vec(),
            );
            let (sel, adj) = build_sparse_graph(
                &NodeFeatureMatrix::new(h)?,
                &p,
                cfg.ru,
                cfg.k,
                cfg.norm_mode,
                cfg.dense_limit,
            )?;
            selections.push(sel);
            adjacency.push(adj);
        }
        Ok(Self {
            height,
            width,
            selections,
            adjacency,
        })
    }

    pub fn n_uncertain(&self) -> usize {
        self.adjacency.iter().map(|a| a.uncertain.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_uncertain() == 0
    }
}

/// Reasoning branch and fusion on node rows, given the projected features
/// `h_var` and a fixed structure. Returns `F_r` rows.
fn psgr_fuse<T: Scalar>(
    tape: &mut Tape<T>,
    f_rows: Var,
    h_var: Var,
    structure: &PsgrStructure<T>,
    vars: &PsgrVars,
    cfg: &PsgrConfig,
) -> Result<(Var, Var)> {
    let adjs: Vec<&SparseAdjacency<T>> = structure.adjacency.iter().collect();
    let (lists, edges) = union_lists(
        structure.height,
        structure.width,
        &adjs,
        cfg.use_edge_weights,
        cfg.include_local,
    );
    let lists = Arc::new(lists);
    let weights = if cfg.use_edge_weights && !edges.is_empty() {
        let spec = EdgeWeightSpec {
            edges,
            block: structure.height * structure.width,
            mode: cfg.norm_mode,
        };
        Some(tape.edge_weights(h_var, &spec)?)
    } else {
        None
    };
    let mut z = h_var;
    for &(t1, t2) in &vars.layers {
        z = gnn_layer_tape(tape, z, t1, t2, &lists, weights, cfg.nonlinearity)?;
    }
    let proj = tape.matmul(z, vars.w_out)?;
    let proj = tape.add_row_bias(proj, vars.b_out)?;
    Ok((tape.add(f_rows, proj)?, proj))
}

fn project_in<T: Scalar>(tape: &mut Tape<T>, f_rows: Var, vars: &PsgrVars) -> Result<Var> {
    let h = tape.matmul(f_rows, vars.w_in)?;
    tape.add_row_bias(h, vars.b_in)
}

/// Full module on node rows `f_rows: [B·N, c]`. The structure is built
/// from the current projected features and the (constant) coarse
/// probabilities. When no node is selected the input is returned as is.
pub fn psgr_tape<T: Scalar>(
    tape: &mut Tape<T>,
    f_rows: Var,
    coarse_rows: &Tensor<T>,
    height: usize,
    width: usize,
    vars: &PsgrVars,
    cfg: &PsgrConfig,
) -> Result<(Var, Option<PsgrStructure<T>>)> {
    cfg.validate()?;
    if uncertain_count(cfg.ru, height * width) == 0 {
        return Ok((f_rows, None));
    }
    let h_var = project_in(tape, f_rows, vars)?;
    let structure = PsgrStructure::build(tape.value(h_var), coarse_rows, height, width, cfg)?;
    let (out, _) = psgr_fuse(tape, f_rows, h_var, &structure, vars, cfg)?;
    Ok((out, Some(structure)))
}

/// Full module with a structure fixed in advance.
pub fn psgr_tape_frozen<T: Scalar>(
    tape: &mut Tape<T>,
    f_rows: Var,
    structure: &PsgrStructure<T>,
    vars: &PsgrVars,
    cfg: &PsgrConfig,
) -> Result<Var> {
    cfg.validate()?;
    if structure.is_empty() {
        return Ok(f_rows);
    }
    let h_var = project_in(tape, f_rows, vars)?;
    Ok(psgr_fuse(tape, f_rows, h_var, structure, vars, cfg)?.0)
}

/// Result of [`psgr_forward`] with the intermediate pieces exposed.
#[derive(Debug, Clone)]
pub struct PsgrOutput<T> {
    /// `F_r`, shaped like the input feature map.
    pub output: Tensor<T>,
    /// `F_r − F` as computed by the branch (zero when nothing is selected).
    pub branch: Tensor<T>,
    pub structure: Option<PsgrStructure<T>>,
}

fn hwc_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(PsgrError::shape(
            "psgr_forward",
            format!("{what} must be h×w×c, got {s:?}"),
        )),
    }
}

fn run_hwc<T: Scalar>(
    f: &Tensor<T>,
    params: &PsgrParams<T>,
    cfg: &PsgrConfig,
    structure: impl FnOnce(&Tensor<T>) -> Result<Option<PsgrStructure<T>>>,
) -> Result<PsgrOutput<T>> {
    let (h, w, c) = hwc_dims(f, "features")?;
    if params.channels() != c {
        return Err(PsgrError::shape(
            "psgr_forward",
            format!("parameters expect {} channels, features have {c}", params.channels()),
        ));
    }
    cfg.validate()?;
    let mut tape = Tape::new();
    let f_rows = tape.constant(f.reshape(&[h * w, c])?);
    let vars = params.register(&mut tape, false);
    let h_var = project_in(&mut tape, f_rows, &vars)?;
    let Some(structure) = structure(tape.value(h_var))?.filter(|s| !s.is_empty()) else {
        return Ok(PsgrOutput {
            output: f.clone(),
            branch: Tensor::zeros(f.shape()),
            structure: None,
        });
    };
    let (out, proj) = psgr_fuse(&mut tape, f_rows, h_var, &structure, &vars, cfg)?;
    Ok(PsgrOutput {
        output: tape.value(out).reshape(&[h, w, c])?,
        branch: tape.value(proj).reshape(&[h, w, c])?,
        structure: Some(structure),
    })
}

/// Full module on one `h×w×c` feature map. `coarse` holds per-pixel class
/// probabilities (`h×w×n_classes`, rows summing to one).
pub fn psgr_forward<T: Scalar>(
    f: &Tensor<T>,
    coarse: &Tensor<T>,
    cfg: &PsgrConfig,
    params: &PsgrParams<T>,
) -> Result<PsgrOutput<T>> {
    let (h, w, _) = hwc_dims(f, "features")?;
    let (ch, cw, classes) = hwc_dims(coarse, "coarse probabilities")?;
    if (ch, cw) != (h, w) {
        return Err(PsgrError::shape(
            "psgr_forward",
            format!("features {h}x{w} vs coarse {ch}x{cw}"),
        ));
    }
    let coarse_rows = coarse.reshape(&[h * w, classes])?;
    if uncertain_count(cfg.ru, h * w) == 0 {
        cfg.validate()?;
        return Ok(PsgrOutput {
            output: f.clone(),
            branch: Tensor::zeros(f.shape()),
            structure: None,
        });
    }
    run_hwc(f, params, cfg, |hv| {
        PsgrStructure::build(hv, &coarse_rows, h, w, cfg).map(Some)
    })
}

/// Full module on one feature map with a fixed structure.
pub fn psgr_forward_with_structure<T: Scalar>(
    f: &Tensor<T>,
    structure: &PsgrStructure<T>,
    cfg: &PsgrConfig,
    params: &PsgrParams<T>,
) -> Result<PsgrOutput<T>> {
    let (h, w, _) = hwc_dims(f, "features")?;
    if (structure.height, structure.width) != (h, w) || structure.adjacency.len() != 1 {
        return Err(PsgrError::shape(
            "psgr_forward",
            "structure does not describe a single image of this size",
        ));
    }
    run_hwc(f, params, cfg, |_| Ok(Some(structure.clone())))
}

/// Row `i` of the pruned adjacency laid out on the `h×w` grid.
pub fn attention_row_dump<T: Scalar>(
    adj: &SparseAdjacency<T>,
    i: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    if height * width != adj.n_nodes {
        return Err(PsgrError::shape(
            "attention_row_dump",
            format!("{} nodes on a {height}x{width} grid", adj.n_nodes),
        ));
    }
    let row = adj.row(i);
    if !adj.is_uncertain(i) || row.is_empty() {
        return Err(PsgrError::NotUncertain(i));
    }
    let mut map = vec![T::zero(); adj.n_nodes];
    for e in row {
        map[e.target] = e.weight;
    }
    Tensor::new(&[height, width], map)
}

fn random_probs(rng: &mut Rng, n: usize, classes: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * classes);
    for _ in 0..n {
        let raw: Vec<f64> = (0..classes).map(|_| rng.uniform_in(0.05, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / total));
    }
    Tensor::from_parts(vec![n, classes], data)
}

fn gradcheck_gnn(rng: &mut Rng, nonlinearity: Nonlinearity, weighted: bool) -> Result<CheckCase> {
    let (h, w, c) = (3, 3, 3);
    let n = h * w;
    let feats: Tensor<f64> = rng.normal_tensor(&[n, c]);
    let (_, adj) = build_sparse_graph(
        &NodeFeatureMatrix::new(feats)?,
        &random_probs(rng, n, 2),
        0.34,
        KChoice::Fixed(3),
        NormMode::RandomWalk,
        DEFAULT_DENSE_LIMIT,
    )?;
    let (lists, _) = union_lists(h, w, &[&adj], weighted, true);
    let lists = Arc::new(lists);
    let weights = Tensor::from_parts(
        vec![adj.edges.len()],
        adj.edges.iter().map(|e| e.weight).collect(),
    );
    Ok(CheckCase {
        params: vec![
            ("z", rng.normal_tensor(&[n, c])),
            ("theta1", rng.normal_tensor(&[c, c])),
            ("theta2", rng.normal_tensor(&[c, c])),
        ],
        forward: Box::new(move |t, v| {
            let wv = weighted.then(|| t.constant(weights.clone()));
            gnn_layer_tape(t, v[0], v[1], v[2], &lists, wv, nonlinearity)
        }),
    })
}

pub(crate) fn gradcheck_gnn_layer(rng: &mut Rng) -> Result<CheckCase> {
    gradcheck_gnn(rng, Nonlinearity::Sigmoid, true)
}

pub(crate) fn gradcheck_gnn_layer_relu(rng: &mut Rng) -> Result<CheckCase> {
    gradcheck_gnn(rng, Nonlinearity::Relu, false)
}

fn gradcheck_psgr(rng: &mut Rng, norm_mode: NormMode) -> Result<CheckCase> {
    let (h, w, c) = (6, 6, 4);
    let cfg = PsgrConfig {
        ru: 0.1,
        norm_mode,
        ..PsgrConfig::default()
    };
    let params = PsgrParams::<f64>::init(c, &cfg, rng, false)?;
    let f: Tensor<f64> = rng.normal_tensor(&[h * w, c]);
    let coarse = random_probs(rng, h * w, 3);
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let vars = params.register(&mut tape, false);
    let h_var = project_in(&mut tape, fv, &vars)?;
    let structure = PsgrStructure::build(tape.value(h_var), &coarse, h, w, &cfg)?;
    let mut list: Vec<(&'static str, Tensor<f64>)> = vec![("features", f)];
    let names = ["w_in", "b_in", "theta1", "theta2", "w_out", "b_out"];
    let tensors = [
        params.w_in.clone(),
        params.b_in.clone(),
        params.layers[0].0.clone(),
        params.layers[0].1.clone(),
        params.w_out.clone(),
        params.b_out.clone(),
    ];
    list.extend(names.into_iter().zip(tensors));
    Ok(CheckCase {
        params: list,
        forward: Box::new(move |t, v| {
            let vars = PsgrVars {
                w_in: v[1],
                b_in: v[2],
                layers: vec![(v[3], v[4])],
                w_out: v[5],
                b_out: v[6],
            };
            psgr_tape_frozen(t, v[0], &structure, &vars, &cfg)
        }),
    })
}

pub(crate) fn gradcheck_psgr_frozen(rng: &mut Rng) -> Result<CheckCase> {
    gradcheck_psgr(rng, NormMode::RandomWalk)
}

pub(crate) fn gradcheck_psgr_frozen_symmetric(rng: &mut Rng) -> Result<CheckCase> {
    gradcheck_psgr(rng, NormMode::Symmetric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    fn adjacency(n: usize, edges: &[(usize, usize, f64)]) -> SparseAdjacency<f64> {
        let mut uncertain: Vec<usize> = edges.iter().map(|e| e.0).collect();
        uncertain.dedup();
        SparseAdjacency {
            n_nodes: n,
            k: 1,
            uncertain,
            edges: edges
                .iter()
                .map(|&(source, target, weight)| Edge {
                    source,
                    target,
                    weight,
                })
                .collect(),
        }
    }

    /// `F(Zθ1 + (A_local + W_global) Z θ2)` with dense matrices.
    fn dense_oracle(
        z: &Tensor<f64>,
        nbhd: &NeighborhoodSets,
        adj: &SparseAdjacency<f64>,
        p: &GnnLayerParams<f64>,
    ) -> Tensor<f64> {
        let n = z.shape()[0];
        let mut a = vec![0.0; n * n];
        if p.include_local {
            for (i, l) in nbhd.local.iter().enumerate() {
                for &j in l {
                    a[i * n + j] = 1.0;
                }
            }
        }
        for e in &adj.edges {
            a[e.source * n + e.target] = if p.use_edge_weights { e.weight } else { 1.0 };
        }
        let a = Tensor::new(&[n, n], a).unwrap();
        let pre = z
            .matmul(&p.theta1)
            .unwrap()
            .add(&a.matmul(z).unwrap().matmul(&p.theta2).unwrap())
            .unwrap();
        match p.nonlinearity {
            Nonlinearity::Sigmoid => pre.sigmoid().unwrap(),
            Nonlinearity::Relu => pre.relu().unwrap(),
            Nonlinearity::Identity => pre,
        }
    }

    #[test]
    fn identity_configuration_is_identity() {
        let mut rng = Rng::new(1);
        let z: Tensor<f64> = rng.normal_tensor(&[16, 3]);
        let adj = adjacency(16, &[(2, 9, 0.4), (2, 11, 0.6), (7, 0, 1.0)]);
        let nbhd = NeighborhoodSets::new(4, 4, &adj).unwrap();
        let out = gnn_layer(&z, &nbhd, &adj, &GnnLayerParams::identity(3)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn single_weighted_edge_by_hand() {
        let adj = adjacency(2, &[(0, 1, 0.5)]);
        let nbhd = NeighborhoodSets::new(1, 2, &adj).unwrap();
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let p = GnnLayerParams::new(one.clone(), one, Nonlinearity::Identity, true, false).unwrap();
        let z = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let out = gnn_layer(&z, &nbhd, &adj, &p).unwrap();
        assert_eq!(out.data()[0], 2.0);
        assert_eq!(out.data()[1], 2.0);
    }

    #[test]
    fn empty_selection_without_local_is_pointwise() {
        let mut rng = Rng::new(2);
        let z: Tensor<f64> = rng.normal_tensor(&[9, 2]);
        let adj = SparseAdjacency::empty(9, 4);
        let nbhd = NeighborhoodSets::new(3, 3, &adj).unwrap();
        let p = GnnLayerParams::new(
            rng.normal_tensor(&[2, 2]),
            rng.normal_tensor(&[2, 2]),
            Nonlinearity::Sigmoid,
            true,
            false,
        )
        .unwrap();
        let out = gnn_layer(&z, &nbhd, &adj, &p).unwrap();
        let expected = z.matmul(&p.theta1).unwrap().sigmoid().unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn grid_neighbors_are_symmetric() {
        let sets = NeighborhoodSets::grid(4, 5);
        for (i, l) in sets.local.iter().enumerate() {
            assert!((2..=4).contains(&l.len()));
            for &j in l {
                assert!(sets.local[j].contains(&i));
            }
        }
    }

    #[test]
    fn matches_dense_oracle_on_random_instances() {
        let mut rng = Rng::new(3);
        for case in 0..40 {
            let (h, w, c) = (2 + rng.below(6), 2 + rng.below(6), 1 + rng.below(5));
            let n = h * w;
            let feats: Tensor<f64> = rng.normal_tensor(&[n, c]);
            let probs = random_probs(&mut rng, n, 2);
            let (_, adj) = build_sparse_graph(
                &NodeFeatureMatrix::new(feats).unwrap(),
                &probs,
                0.3,
                KChoice::Auto,
                NormMode::RandomWalk,
                DEFAULT_DENSE_LIMIT,
            )
            .unwrap();
            let nbhd = NeighborhoodSets::new(h, w, &adj).unwrap();
            let nonlinearity = [Nonlinearity::Sigmoid, Nonlinearity::Relu, Nonlinearity::Identity][case % 3];
            let p = GnnLayerParams::new(
                rng.normal_tensor(&[c, c]),
                rng.normal_tensor(&[c, c]),
                nonlinearity,
                case % 2 == 0,
                case % 4 < 2,
            )
            .unwrap();
            let z: Tensor<f64> = rng.normal_tensor(&[n, c]);
            let got = gnn_layer(&z, &nbhd, &adj, &p).unwrap();
            let want = dense_oracle(&z, &nbhd, &adj, &p);
            assert!(got.max_abs_diff(&want) <= 1e-12, "case {case}");
        }
    }

    #[test]
    fn influence_is_local_with_frozen_structure() {
        let mut rng = Rng::new(4);
        let (h, w, c) = (5, 5, 2);
        let n = h * w;
        let (_, adj) = build_sparse_graph(
            &NodeFeatureMatrix::new(rng.normal_tensor::<f64>(&[n, c])).unwrap(),
            &random_probs(&mut rng, n, 2),
            0.12,
            KChoice::Fixed(4),
            NormMode::RandomWalk,
            DEFAULT_DENSE_LIMIT,
        )
        .unwrap();
        let nbhd = NeighborhoodSets::new(h, w, &adj).unwrap();
        let p = GnnLayerParams::new(
            rng.normal_tensor(&[c, c]),
            rng.normal_tensor(&[c, c]),
            Nonlinearity::Sigmoid,
            true,
            false,
        )
        .unwrap();
        let z: Tensor<f64> = rng.normal_tensor(&[n, c]);
        for i in 0..n {
            let g = crate::autograd::finite_diff(
                |x| Ok(gnn_layer(x, &nbhd, &adj, &p)?.row(i).iter().sum()),
                &z,
                1e-5,
            )
            .unwrap();
            let phi = nbhd.phi(i, false);
            for j in 0..n {
                let touched = g.row(j).iter().any(|&v| v != 0.0);
                if i == j || phi.contains(&j) {
                    assert!(touched, "node {i} ignores neighbor {j}");
                } else {
                    assert!(!touched, "node {j} leaks into {i}");
                }
            }
        }
    }

    #[test]
    fn stacked_identity_layers_are_idempotent() {
        let mut rng = Rng::new(5);
        let z: Tensor<f64> = rng.normal_tensor(&[12, 3]);
        let adj = adjacency(12, &[(1, 5, 0.3), (1, 8, 0.7)]);
        let nbhd = NeighborhoodSets::new(3, 4, &adj).unwrap();
        let p = GnnLayerParams::identity(3);
        let once = gnn_layer(&z, &nbhd, &adj, &p).unwrap();
        let twice = gnn_layer(&once, &nbhd, &adj, &p).unwrap();
        assert!(once.bitwise_eq(&twice));
    }

    fn probs_map(rng: &mut Rng, h: usize, w: usize, classes: usize) -> Tensor<f64> {
        random_probs(rng, h * w, classes).reshape(&[h, w, classes]).unwrap()
    }

    #[test]
    fn empty_selection_returns_input_bitwise() {
        let mut rng = Rng::new(6);
        let f: Tensor<f64> = rng.normal_tensor(&[8, 8, 4]);
        let cfg = PsgrConfig {
            ru: 0.0,
            ..PsgrConfig::default()
        };
        let params = PsgrParams::init(4, &cfg, &mut rng, false).unwrap();
        let out = psgr_forward(&f, &probs_map(&mut rng, 8, 8, 2), &cfg, &params).unwrap();
        assert!(out.output.bitwise_eq(&f));
        assert!(out.structure.is_none());
    }

    #[test]
    fn zero_output_projection_returns_input_bitwise() {
        let mut rng = Rng::new(7);
        let f: Tensor<f32> = rng.normal_tensor(&[8, 8, 4]);
        let cfg = PsgrConfig {
            ru: 0.2,
            ..PsgrConfig::default()
        };
        let params = PsgrParams::init(4, &cfg, &mut rng, true).unwrap();
        let coarse = probs_map(&mut rng, 8, 8, 3).cast::<f32>().unwrap();
        let out = psgr_forward(&f, &coarse, &cfg, &params).unwrap();
        assert!(out.output.bitwise_eq(&f));
        assert!(out.structure.unwrap().n_uncertain() > 0);
    }

    #[test]
    fn residual_decomposition() {
        let mut rng = Rng::new(8);
        let f: Tensor<f64> = rng.normal_tensor(&[8, 8, 3]);
        let cfg = PsgrConfig {
            ru: 0.05,
            ..PsgrConfig::default()
        };
        let params = PsgrParams::init(3, &cfg, &mut rng, false).unwrap();
        let out = psgr_forward(&f, &probs_map(&mut rng, 8, 8, 2), &cfg, &params).unwrap();
        assert_eq!(out.structure.as_ref().unwrap().n_uncertain(), 3);
        let diff = out.output.sub(&f).unwrap();
        assert!(diff.max_abs_diff(&out.branch) <= 1e-12);
        assert!(out.branch.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_structure_reproduces_live_forward() {
        let mut rng = Rng::new(9);
        let f: Tensor<f64> = rng.normal_tensor(&[6, 6, 4]);
        let cfg = PsgrConfig {
            ru: 0.1,
            norm_mode: NormMode::Symmetric,
            ..PsgrConfig::default()
        };
        let params = PsgrParams::init(4, &cfg, &mut rng, false).unwrap();
        let live = psgr_forward(&f, &probs_map(&mut rng, 6, 6, 2), &cfg, &params).unwrap();
        let structure = live.structure.clone().unwrap();
        let frozen = psgr_forward_with_structure(&f, &structure, &cfg, &params).unwrap();
        assert!(live.output.bitwise_eq(&frozen.output));
    }

    #[test]
    fn attention_dump_places_weights() {
        let adj = adjacency(4, &[(1, 2, 0.7)]);
        let map = attention_row_dump(&adj, 1, 2, 2).unwrap();
        assert_eq!(map.data(), &[0.0, 0.0, 0.7, 0.0]);
        assert_eq!(map.sum(), 0.7);
        assert!(matches!(
            attention_row_dump(&adj, 0, 2, 2),
            Err(PsgrError::NotUncertain(0))
        ));
    }

    #[test]
    fn gnn_gradchecks_are_tight() {
        for op in ["gnn_layer", "psgr_frozen"] {
            let r = crate::autograd::gradcheck(op, 11).unwrap();
            assert!(r.max_rel_err <= 1e-5, "{r:?}");
        }
    }

    #[test]
    fn output_shape_matches_input_on_all_small_shapes() {
        let mut rng = Rng::new(10);
        let cfg = PsgrConfig {
            ru: 0.1,
            ..PsgrConfig::default()
        };
        for h in 2..=16 {
            for w in 2..=16 {
                for c in 2..=16 {
                    let f: Tensor<f32> = rng.normal_tensor(&[h, w, c]);
                    let params = PsgrParams::init(c, &cfg, &mut rng, false).unwrap();
                    let probs = probs_map(&mut rng, h, w, 2).cast::<f32>().unwrap();
                    let out = psgr_forward(&f, &probs, &cfg, &params).unwrap();
                    assert_eq!(out.output.shape(), f.shape());
                }
            }
        }
    }
}
