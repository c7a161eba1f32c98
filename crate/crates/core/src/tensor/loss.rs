//! Loss building blocks (summed over rows; callers divide by batch size).

use super::graph::{Graph, NodeId};
use super::Tensor;
use crate::error::Result;

/// Σ −log softmax(z)[y] with one-hot targets.
pub fn softmax_cross_entropy(g: &mut Graph<'_>, logits: NodeId, one_hot: Tensor) -> Result<NodeId> {
    let ls = g.log_softmax_rows(logits);
    let y = g.constant(one_hot);
    let picked = g.mul(ls, y)?;
    let s = g.sum_all(picked);
    Ok(g.scale(s, -1.0))
}

/// Σ BCE(σ(z), y) computed stably as softplus(z) − y·z.
pub fn bce_with_logits(g: &mut Graph<'_>, logits: NodeId, targets: Tensor) -> Result<NodeId> {
    let sp = g.softplus(logits);
    let y = g.constant(targets);
    let yz = g.mul(logits, y)?;
    let d = g.sub(sp, yz)?;
    Ok(g.sum_all(d))
}

/// Σ (x − y)² weighted by a 0/1 mask of observed entries.
pub fn masked_squared_error(
    g: &mut Graph<'_>,
    pred: NodeId,
    targets: Tensor,
    mask: Tensor,
) -> Result<NodeId> {
    let y = g.constant(targets);
    let m = g.constant(mask);
    let d = g.sub(pred, y)?;
    let dm = g.mul(d, m)?;
    let sq = g.square(dm);
    Ok(g.sum_all(sq))
}
