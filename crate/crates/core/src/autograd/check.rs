//! Central finite differences and the gradient-check registry.

use rayon::prelude::*;
use serde::Serialize;

use super::{BatchNormMode, DiceClasses, EdgeWeightSpec, NeighborLists, NeighborWeight, Tape, Var};
use crate::error::{PsgrError, Result};
use crate::graph::NormMode;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;
const PROJECTION_SEED: u64 = 0x9e37_79b9;

/// Central difference `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate.
pub fn finite_diff<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64> + Sync,
{
    if !(eps > 0.0) {
        return Err(PsgrError::invalid("finite-difference step must be positive"));
    }
    let grads: Result<Vec<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut data = x.data().to_vec();
            data[i] = x.data()[i] + eps;
            let plus = f(&Tensor::new(x.shape(), data.clone())?)?;
            data[i] = x.data()[i] - eps;
            let minus = f(&Tensor::new(x.shape(), data)?)?;
            Ok((plus - minus) / (2.0 * eps))
        })
        .collect();
    Tensor::new(x.shape(), grads?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub params: Vec<ParamError>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync>;

/// A differentiable computation with its seeded parameters.
pub(crate) struct CheckCase {
    pub params: Vec<(&'static str, Tensor<f64>)>,
    pub forward: Forward,
}

/// Reduces a tensor-valued output to a scalar with a fixed random
/// projection so every output coordinate contributes to the check.
pub(crate) fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(Rng::new(PROJECTION_SEED).normal_tensor(&shape));
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn eval(case: &CheckCase, values: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
    let out = (case.forward)(&mut tape, &vars)?;
    let out = project(&mut tape, out)?;
    Ok(tape.value(out).data()[0])
}

pub(crate) fn check_case(op: &str, case: &CheckCase) -> Result<GradCheckReport> {
    let values: Vec<Tensor<f64>> = case.params.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
    let out = (case.forward)(&mut tape, &vars)?;
    let out = project(&mut tape, out)?;
    let grads = tape.backward(out)?;
    let mut params = Vec::new();
    for (p, (name, value)) in case.params.iter().enumerate() {
        let numeric = finite_diff(
            |x| {
                let mut vals = values.clone();
                vals[p] = x.clone();
                eval(case, &vals)
            },
            value,
            FD_EPS,
        )?;
        let analytic = grads.wrt(vars[p]);
        let (mut abs, mut rel) = (0.0f64, 0.0f64);
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            let d = (a - n).abs();
            abs = abs.max(d);
            rel = rel.max(d / a.abs().max(n.abs()).max(REL_FLOOR));
        }
        params.push(ParamError {
            name: (*name).to_string(),
            max_abs_err: abs,
            max_rel_err: rel,
        });
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_abs_err: params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max),
        max_rel_err: params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max),
        params,
    })
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_in(0.1, 1.5);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn one_hot(rng: &mut Rng, [b, c, h, w]: [usize; 4]) -> Tensor<f64> {
    let mut t = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for p in 0..h * w {
            let cls = rng.below(c);
            t[(bi * c + cls) * h * w + p] = 1.0;
        }
    }
    Tensor::from_parts(vec![b, c, h, w], t)
}

fn case_matmul(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![("a", rng.normal_tensor(&[4, 3])), ("b", rng.normal_tensor(&[3, 2]))],
        forward: Box::new(|t, v| t.matmul(v[0], v[1])),
    })
}

fn case_conv(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![
            ("x", rng.normal_tensor(&[2, 3, 5, 5])),
            ("weight", rng.normal_tensor(&[4, 3, 3, 3])),
            ("bias", rng.normal_tensor(&[4])),
        ],
        forward: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]))),
    })
}

fn case_conv1x1(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![
            ("x", rng.normal_tensor(&[2, 3, 4, 4])),
            ("weight", rng.normal_tensor(&[2, 3, 1, 1])),
        ],
        forward: Box::new(|t, v| t.conv2d(v[0], v[1], None)),
    })
}

fn case_upsample(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![("x", rng.normal_tensor(&[2, 2, 3, 3]))],
        forward: Box::new(|t, v| t.upsample_bilinear(v[0], 2)),
    })
}

fn case_upsample8(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![("x", rng.normal_tensor(&[1, 1, 2, 3]))],
        forward: Box::new(|t, v| t.upsample_bilinear(v[0], 8)),
    })
}

fn case_batch_norm(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![
            ("x", rng.normal_tensor(&[3, 2, 3, 3])),
            ("gamma", rng.uniform_tensor(&[2], 0.5, 1.5)),
            ("beta", rng.normal_tensor(&[2])),
        ],
        forward: Box::new(|t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], &BatchNormMode::Train, 1e-5)?.0)
        }),
    })
}

fn case_batch_norm_eval(rng: &mut Rng) -> Result<CheckCase> {
    let mode = BatchNormMode::Eval {
        mean: vec![rng.normal(), rng.normal()],
        var: vec![rng.uniform_in(0.5, 2.0), rng.uniform_in(0.5, 2.0)],
    };
    Ok(CheckCase {
        params: vec![
            ("x", rng.normal_tensor(&[2, 2, 3, 3])),
            ("gamma", rng.uniform_tensor(&[2], 0.5, 1.5)),
            ("beta", rng.normal_tensor(&[2])),
        ],
        forward: Box::new(move |t, v| Ok(t.batch_norm(v[0], v[1], v[2], &mode, 1e-5)?.0)),
    })
}

fn case_sigmoid(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![("x", rng.normal_tensor(&[3, 4]))],
        forward: Box::new(|t, v| t.sigmoid(v[0])),
    })
}

fn case_relu(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![("x", away_from_zero(rng, &[3, 4]))],
        forward: Box::new(|t, v| t.relu(v[0])),
    })
}

fn case_maxpool(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![("x", rng.normal_tensor(&[2, 2, 4, 4]))],
        forward: Box::new(|t, v| t.maxpool2(v[0])),
    })
}

fn case_softmax(rng: &mut Rng) -> Result<CheckCase> {
    Ok(CheckCase {
        params: vec![("x", rng.normal_tensor(&[2, 3, 2, 2]))],
        forward: Box::new(|t, v| t.softmax_channels(v[0])),
    })
}

fn case_bce(rng: &mut Rng) -> Result<CheckCase> {
    let target = Tensor::from_fn(&[1, 1, 4, 4], |_| (rng.uniform() < 0.4) as u8 as f64)?;
    Ok(CheckCase {
        params: vec![("probs", rng.uniform_tensor(&[1, 1, 4, 4], 0.05, 0.95))],
        forward: Box::new(move |t, v| t.bce(v[0], &target)),
    })
}

fn case_dice(rng: &mut Rng) -> Result<CheckCase> {
    let target = one_hot(rng, [2, 3, 4, 4]);
    Ok(CheckCase {
        params: vec![("logits", rng.normal_tensor(&[2, 3, 4, 4]))],
        forward: Box::new(move |t, v| {
            let p = t.softmax_channels(v[0])?;
            t.dice(p, &target, DiceClasses::Foreground, 1e-5)
        }),
    })
}

fn case_cross_entropy(rng: &mut Rng) -> Result<CheckCase> {
    let target = one_hot(rng, [2, 3, 3, 3]);
    Ok(CheckCase {
        params: vec![("logits", rng.normal_tensor(&[2, 3, 3, 3]))],
        forward: Box::new(move |t, v| {
            let p = t.softmax_channels(v[0])?;
            t.cross_entropy(p, &target)
        }),
    })
}

fn case_edge_weights(rng: &mut Rng, mode: NormMode) -> Result<CheckCase> {
    let (blocks, n) = (2, 6);
    let mut edges = Vec::new();
    for b in 0..blocks {
        for &(i, j) in &[(0, 3), (0, 5), (2, 1), (4, 0)] {
            edges.push((b * n + i, b * n + j));
        }
    }
    let spec = EdgeWeightSpec {
        edges,
        block: n,
        mode,
    };
    Ok(CheckCase {
        params: vec![("h", rng.uniform_tensor(&[blocks * n, 3], -0.3, 1.0))],
        forward: Box::new(move |t, v| t.edge_weights(v[0], &spec)),
    })
}

fn case_aggregate(rng: &mut Rng) -> Result<CheckCase> {
    let lists = std::sync::Arc::new(NeighborLists::new(vec![
        vec![(1, NeighborWeight::One), (3, NeighborWeight::Edge(0))],
        vec![(0, NeighborWeight::One), (2, NeighborWeight::Edge(1))],
        vec![],
        vec![(0, NeighborWeight::Edge(2)), (1, NeighborWeight::One)],
    ])?);
    Ok(CheckCase {
        params: vec![
            ("z", rng.normal_tensor(&[4, 3])),
            ("weights", rng.uniform_tensor(&[3], 0.0, 1.0)),
        ],
        forward: Box::new(move |t, v| t.sparse_aggregate(v[0], &lists, Some(v[1]))),
    })
}

type Builder = fn(&mut Rng) -> Result<CheckCase>;

fn registry() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", case_matmul),
        ("conv2d", case_conv),
        ("conv2d_1x1", case_conv1x1),
        ("upsample_bilinear", case_upsample),
        ("upsample_bilinear_x8", case_upsample8),
        ("batch_norm", case_batch_norm),
        ("batch_norm_eval", case_batch_norm_eval),
        ("sigmoid", case_sigmoid),
        ("relu", case_relu),
        ("maxpool2", case_maxpool),
        ("softmax_channels", case_softmax),
        ("bce", case_bce),
        ("dice", case_dice),
        ("cross_entropy", case_cross_entropy),
        ("edge_weights_random_walk", |r| case_edge_weights(r, NormMode::RandomWalk)),
        ("edge_weights_symmetric", |r| case_edge_weights(r, NormMode::Symmetric)),
        ("sparse_aggregate", case_aggregate),
        ("gnn_layer", crate::reason::gradcheck_gnn_layer),
        ("gnn_layer_relu_unweighted", crate::reason::gradcheck_gnn_layer_relu),
        ("psgr_frozen", crate::reason::gradcheck_psgr_frozen),
        ("psgr_frozen_symmetric", crate::reason::gradcheck_psgr_frozen_symmetric),
        ("total_loss", crate::nn::gradcheck_total_loss),
        ("total_loss_multiclass", crate::nn::gradcheck_total_loss_multiclass),
    ]
}

/// Names accepted by [`gradcheck`].
pub fn registered_ops() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).collect()
}

/// Compares analytic gradients of a registered op against central finite
/// differences on inputs drawn from `seed`.
pub fn gradcheck(op: &str, seed: u64) -> Result<GradCheckReport> {
    let (_, build) = registry()
        .into_iter()
        .find(|(n, _)| *n == op)
        .ok_or_else(|| PsgrError::invalid(format!("no gradient check registered for `{op}`")))?;
    let mut rng = Rng::derived(seed, op);
    check_case(op, &build(&mut rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, FD_EPS).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_sigmoid_at_zero() {
        let x = Tensor::scalar(0.0);
        let g = finite_diff(|t| Ok(crate::tensor::sigmoid(t.data()[0])), &x, FD_EPS).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn unregistered_op_is_an_error() {
        assert!(gradcheck("no_such_op", 1).is_err());
    }

    #[test]
    fn matmul_check_is_tight() {
        let r = gradcheck("matmul", 7).unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }

    #[test]
    fn every_registered_op_passes() {
        for op in registered_ops() {
            let r = gradcheck(op, 2024).unwrap();
            assert!(r.passed(GRADCHECK_TOL), "{r:?}");
        }
    }
}
