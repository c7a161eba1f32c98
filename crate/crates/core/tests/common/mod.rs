#![allow(dead_code)]

use rand::Rng;
use seqtwin::tensor::{det_rng, Graph, NodeId, Tensor};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error; keeps near-zero gradients from
/// inflating the ratio while still requiring absolute error ≤ 1e-8 there.
pub const REL_FLOOR: f64 = 1e-4;

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = det_rng(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed random weights so that
/// invariant directions (softmax rows summing to one) still carry gradient.
fn scalarize(g: &mut Graph<'_>, out: NodeId) -> NodeId {
    let v = g.value(out);
    if v.len() == 1 {
        return out;
    }
    let w = random_tensor(v.rows(), v.cols(), 9_999);
    let wn = g.constant(w);
    let prod = g.mul(out, wn).unwrap();
    g.sum_all(prod)
}

fn evaluate(inputs: &[Tensor], build: &dyn Fn(&mut Graph<'_>, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::detached();
    let ids: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.input(format!("x{i}"), t.clone()))
        .collect();
    let out = build(&mut g, &ids);
    let s = scalarize(&mut g, out);
    g.value(s).data()[0]
}

/// Maximum relative error between autodiff and central finite differences
/// over every element of every input.
pub fn max_gradient_error(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph<'_>, &[NodeId]) -> NodeId,
) -> f64 {
    let mut g = Graph::detached();
    let ids: Vec<NodeId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.input_with_grad(format!("x{i}"), t.clone()))
        .collect();
    let out = build(&mut g, &ids);
    let s = scalarize(&mut g, out);
    let grads = g.backward_scalar(s).unwrap();

    let mut worst: f64 = 0.0;
    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .node(ids[which])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[k] -= FD_STEP;
            let numeric = (evaluate(&plus, build) - evaluate(&minus, build)) / (2.0 * FD_STEP);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Inputs kept away from ReLU's kink so central differences stay valid.
pub fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| {
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}
