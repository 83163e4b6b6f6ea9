//! Differentiable pieces of graph reasoning over a fixed structure: edge
//! weights recomputed from node features, and sparse neighbor aggregation.

use std::sync::Arc;

use rayon::prelude::*;

use super::{Backward, Tape, Var};
use crate::error::{PsgrError, Result};
use crate::graph::{normalized_weight, pair_similarity, NormMode};
use crate::tensor::{Scalar, Tensor};

/// A fixed list of directed edges over node rows, grouped in independent
/// blocks of `block` consecutive rows (one block per image). Degrees are
/// computed within a block.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeightSpec {
    pub edges: Vec<(usize, usize)>,
    pub block: usize,
    pub mode: NormMode,
}

fn block_similarity<T: Scalar>(h: &[T], c: usize, start: usize, n: usize) -> Vec<T> {
    let row = |i: usize| &h[(start + i) * c..(start + i + 1) * c];
    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = pair_similarity(row(i), row(j));
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    s
}

fn row_degrees<T: Scalar>(s: &[T], n: usize) -> Vec<T> {
    s.chunks(n)
        .map(|r| r.iter().fold(T::zero(), |acc, &v| acc + v))
        .collect()
}

struct EdgeWeights {
    spec: Arc<EdgeWeightSpec>,
}

impl<T: Scalar> Backward<T> for EdgeWeights {
    fn name(&self) -> &'static str {
        "edge_weights"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let h = inputs[0];
        let (m, c) = h.dims2()?;
        let n = self.spec.block;
        let blocks = m / n;
        let half = T::from_f64(0.5);
        let parts: Vec<Vec<T>> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let start = b * n;
                let s = block_similarity(h.data(), c, start, n);
                let d = row_degrees(&s, n);
                // Gradient w.r.t. every ordered similarity entry.
                let mut gs = vec![T::zero(); n * n];
                let mut gd = vec![T::zero(); n];
                for (e, &(i, j)) in self.spec.edges.iter().enumerate() {
                    if i / n != b {
                        continue;
                    }
                    let (i, j) = (i - start, j - start);
                    let g = grad.data()[e];
                    let w = output.data()[e];
                    match self.spec.mode {
                        NormMode::RandomWalk => {
                            if d[i] > T::zero() {
                                gs[i * n + j] = gs[i * n + j] + g / d[i];
                                gd[i] = gd[i] - g * w / d[i];
                            }
                        }
                        NormMode::Symmetric => {
                            if d[i] > T::zero() && d[j] > T::zero() {
                                gs[i * n + j] = gs[i * n + j] + g / (d[i].sqrt() * d[j].sqrt());
                                gd[i] = gd[i] - half * g * w / d[i];
                                gd[j] = gd[j] - half * g * w / d[j];
                            }
                        }
                    }
                }
                let hb = &h.data()[start * c..(start + n) * c];
                let mut gh = vec![T::zero(); n * c];
                for k in 0..n {
                    for l in 0..n {
                        if k == l || s[k * n + l] <= T::zero() {
                            continue;
                        }
                        // S_kl enters d_k directly and sits at (k, l); the
                        // mirrored use through (l, k) is handled when k and l swap.
                        let g = gs[k * n + l] + gd[k];
                        if g == T::zero() {
                            continue;
                        }
                        for t in 0..c {
                            gh[k * c + t] = gh[k * c + t] + g * hb[l * c + t];
                            gh[l * c + t] = gh[l * c + t] + g * hb[k * c + t];
                        }
                    }
                }
                gh
            })
            .collect();
        Ok(vec![Some(Tensor::from_parts(
            vec![m, c],
            parts.into_iter().flatten().collect(),
        ))])
    }
}

/// Weight attached to one entry of a neighbor list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborWeight {
    One,
    /// Index into the edge-weight vector passed to the aggregation.
    Edge(usize),
}

/// Per-node neighbor lists in a fixed iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborLists {
    lists: Vec<Vec<(usize, NeighborWeight)>>,
}

impl NeighborLists {
    pub fn new(lists: Vec<Vec<(usize, NeighborWeight)>>) -> Result<Self> {
        let n = lists.len();
        if let Some(bad) = lists.iter().flatten().find(|(j, _)| *j >= n) {
            return Err(PsgrError::invalid(format!(
                "neighbor {} out of range for {n} nodes",
                bad.0
            )));
        }
        Ok(Self { lists })
    }

    pub fn n_nodes(&self) -> usize {
        self.lists.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, NeighborWeight)] {
        &self.lists[i]
    }

    fn max_edge(&self) -> Option<usize> {
        self.lists
            .iter()
            .flatten()
            .filter_map(|(_, w)| match w {
                NeighborWeight::Edge(e) => Some(*e),
                NeighborWeight::One => None,
            })
            .max()
    }
}

fn edge_weight<T: Scalar>(w: NeighborWeight, weights: Option<&[T]>) -> T {
    match (w, weights) {
        (NeighborWeight::Edge(e), Some(ws)) => ws[e],
        _ => T::one(),
    }
}

struct Aggregate {
    lists: Arc<NeighborLists>,
}

impl<T: Scalar> Backward<T> for Aggregate {
    fn name(&self) -> &'static str {
        "sparse_aggregate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let z = inputs[0];
        let (m, c) = z.dims2()?;
        let weights = inputs.get(1).map(|w| w.data());
        let g = grad.data();
        let dz = needs[0].then(|| {
            let mut dz = vec![T::zero(); m * c];
            for i in 0..m {
                for &(j, w) in self.lists.row(i) {
                    let w = edge_weight(w, weights);
                    for t in 0..c {
                        dz[j * c + t] = dz[j * c + t] + w * g[i * c + t];
                    }
                }
            }
            Tensor::from_parts(vec![m, c], dz)
        });
        let mut out = vec![dz];
        if let Some(wt) = inputs.get(1) {
            out.push(needs[1].then(|| {
                let mut dw = vec![T::zero(); wt.len()];
                for i in 0..m {
                    for &(j, w) in self.lists.row(i) {
                        if let NeighborWeight::Edge(e) = w {
                            let gi = &g[i * c..(i + 1) * c];
                            let zj = &z.data()[j * c..(j + 1) * c];
                            dw[e] = gi.iter().zip(zj).fold(dw[e], |a, (&x, &y)| a + x * y);
                        }
                    }
                }
                Tensor::from_parts(wt.shape().to_vec(), dw)
            }));
        }
        Ok(out)
    }
}

impl<T: Scalar> Tape<T> {
    /// Normalized similarity weights of the edges in `spec`, recomputed from
    /// node features `h: [M, c]` so that gradients reach `h` through both the
    /// pairwise similarity and the degrees.
    pub fn edge_weights(&mut self, h: Var, spec: &EdgeWeightSpec) -> Result<Var> {
        let (m, c) = self.value(h).dims2()?;
        let n = spec.block;
        if n < 2 || m % n != 0 {
            return Err(PsgrError::shape(
                "edge_weights",
                format!("{m} rows do not split into blocks of {n}"),
            ));
        }
        if let Some(&(i, j)) = spec
            .edges
            .iter()
            .find(|&&(i, j)| i >= m || j >= m || i / n != j / n || i == j)
        {
            return Err(PsgrError::invalid(format!("edge ({i}, {j}) is not within one block")));
        }
        let hv = self.value(h).data();
        let mut weights = vec![T::zero(); spec.edges.len()];
        for b in 0..m / n {
            let start = b * n;
            let touched = spec.edges.iter().any(|&(i, _)| i / n == b);
            if !touched {
                continue;
            }
            let s = block_similarity(hv, c, start, n);
            let d = row_degrees(&s, n);
            for (e, &(i, j)) in spec.edges.iter().enumerate() {
                if i / n == b {
                    let (li, lj) = (i - start, j - start);
                    weights[e] = normalized_weight(s[li * n + lj], d[li], d[lj], spec.mode);
                }
            }
        }
        let out = Tensor::checked("edge_weights", vec![spec.edges.len()], weights)?;
        Ok(self.push(
            out,
            EdgeWeights {
                spec: Arc::new(spec.clone()),
            },
            &[h],
        ))
    }

    /// `out_i = Σ_{(j, w) ∈ lists(i)} w · z_j` for `z: [M, c]`. Entries
    /// tagged [`NeighborWeight::Edge`] read from `weights`; without a weight
    /// vector every entry counts with weight one.
    pub fn sparse_aggregate(
        &mut self,
        z: Var,
        lists: &Arc<NeighborLists>,
        weights: Option<Var>,
    ) -> Result<Var> {
        let (m, c) = self.value(z).dims2()?;
        if lists.n_nodes() != m {
            return Err(PsgrError::shape(
                "sparse_aggregate",
                format!("{} neighbor lists for {m} rows", lists.n_nodes()),
            ));
        }
        if let (Some(w), Some(e)) = (weights, lists.max_edge()) {
            if self.value(w).len() <= e {
                return Err(PsgrError::shape("sparse_aggregate", "edge index out of range"));
            }
        }
        let zv = self.value(z).data();
        let wv = weights.map(|w| self.value(w).data());
        let mut out = vec![T::zero(); m * c];
        out.par_chunks_mut(c.max(1)).enumerate().for_each(|(i, row)| {
            for &(j, w) in lists.row(i) {
                let w = edge_weight(w, wv);
                for (o, &v) in row.iter_mut().zip(&zv[j * c..(j + 1) * c]) {
                    *o = *o + w * v;
                }
            }
        });
        let out = Tensor::checked("sparse_aggregate", vec![m, c], out)?;
        let inputs: Vec<Var> = std::iter::once(z).chain(weights).collect();
        Ok(self.push(
            out,
            Aggregate {
                lists: Arc::clone(lists),
            },
            &inputs,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_similarity, NodeFeatureMatrix};
    use crate::rng::Rng;

    #[test]
    fn edge_weights_match_dense_normalization_bitwise() {
        let mut rng = Rng::new(5);
        let h: Tensor<f64> = rng.normal_tensor(&[12, 3]);
        for mode in [NormMode::RandomWalk, NormMode::Symmetric] {
            let g = build_similarity(&NodeFeatureMatrix::new(h.clone()).unwrap())
                .unwrap()
                .normalize(mode);
            let edges: Vec<(usize, usize)> = vec![(0, 3), (0, 7), (5, 1), (11, 2)];
            let spec = EdgeWeightSpec {
                edges: edges.clone(),
                block: 12,
                mode,
            };
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let w = tape.edge_weights(hv, &spec).unwrap();
            let nrm = g.normalized().unwrap();
            for (e, &(i, j)) in edges.iter().enumerate() {
                assert_eq!(tape.value(w).data()[e].to_bits(), nrm.at2(i, j).to_bits());
            }
        }
    }

    #[test]
    fn aggregate_by_hand() {
        let lists = Arc::new(
            NeighborLists::new(vec![
                vec![(1, NeighborWeight::Edge(0))],
                vec![(0, NeighborWeight::One)],
            ])
            .unwrap(),
        );
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let out = tape.sparse_aggregate(z, &lists, Some(w)).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0]);
        let out = tape.sparse_aggregate(z, &lists, None).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 1.0]);
    }

    #[test]
    fn cross_block_edges_rejected() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::ones(&[8, 2]));
        let spec = EdgeWeightSpec {
            edges: vec![(1, 5)],
            block: 4,
            mode: NormMode::RandomWalk,
        };
        assert!(tape.edge_weights(h, &spec).is_err());
    }
}
