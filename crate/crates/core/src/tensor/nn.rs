use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Deterministic RNG used for initialization, shuffling and dropout masks.
pub type DetRng = rand_chacha::ChaCha8Rng;

pub fn det_rng(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream tag so that independent consumers of one
/// seed draw unrelated sequences.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub input_rate: f64,
    pub penultimate_rate: f64,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn new(input_rate: f64, penultimate_rate: f64, seed: u64) -> Result<Self> {
        for (name, r) in [
            ("input_rate", input_rate),
            ("penultimate_rate", penultimate_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} {r} outside [0, 1]")));
            }
        }
        Ok(DropoutSpec {
            input_rate,
            penultimate_rate,
            seed,
        })
    }

    pub fn none() -> Self {
        DropoutSpec {
            input_rate: 0.0,
            penultimate_rate: 0.0,
            seed: 0,
        }
    }
}

/// Source of dropout masks for one pass. `off()` gives deterministic inference.
pub struct Masks<'r> {
    rng: Option<&'r mut DetRng>,
}

impl<'r> Masks<'r> {
    pub fn off() -> Self {
        Masks { rng: None }
    }

    pub fn on(rng: &'r mut DetRng) -> Self {
        Masks { rng: Some(rng) }
    }

    pub fn active(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 − rate)`.
    pub fn apply(&mut self, g: &mut Graph<'_>, x: NodeId, rate: f64) -> NodeId {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 - rate;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                if rate < 1.0 && rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mask = g.constant(Tensor::new(shape, data).expect("mask shape"));
        g.mul(x, mask).expect("mask shape matches")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut DetRng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[1, fan_out]);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, width], 1.0));
        let shift = store.add_zeros(format!("{name}.shift"), &[1, width]);
        LayerNorm { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm_rows(x);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

/// Batch normalization over rows, with running statistics for inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, width], 1.0));
        let shift = store.add_zeros(format!("{name}.shift"), &[1, width]);
        BatchNorm {
            gain,
            shift,
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
        }
    }

    /// Training pass: normalizes with batch statistics and updates the running ones.
    pub fn forward_train(&mut self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let xv = g.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        for j in 0..c {
            let col: Vec<f64> = (0..n).map(|i| xv.data()[i * c + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let unbiased = if n > 1 {
                var * n as f64 / (n - 1) as f64
            } else {
                var
            };
            self.running_mean[j] =
                (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean;
            self.running_var[j] =
                (1.0 - self.momentum) * self.running_var[j] + self.momentum * unbiased;
        }
        let normed = g.batch_norm_cols(x);
        self.affine(g, normed)
    }

    /// Inference pass with frozen running statistics.
    pub fn forward_eval(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let neg_mean: Vec<f64> = self.running_mean.iter().map(|m| -m).collect();
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + super::graph::NORM_EPS).sqrt())
            .collect();
        let shift = g.constant(Tensor::row(&neg_mean));
        let scale = g.constant(Tensor::row(&inv_std));
        let centered = g.add_row(x, shift)?;
        let normed = g.mul_row(centered, scale)?;
        self.affine(g, normed)
    }

    fn affine(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(x, gain)?;
        g.add_row(y, shift)
    }
}

/// Output of [`multi_head_attention`]: the attended values and, per head,
/// the attention-weight node (rows sum to one).
pub struct Attention {
    pub output: NodeId,
    pub weights: Vec<NodeId>,
}

/// Scaled dot-product attention split over `heads` equal column blocks.
///
/// `query` is `n × d`, `keys` and `values` are `m × d`. No projections are
/// applied here; see [`MultiHeadAttention`] for the learned layer.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    query: NodeId,
    keys: NodeId,
    values: NodeId,
    heads: usize,
) -> Result<Attention> {
    let d = g.value(query).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "embedding width {d} is not divisible by {heads} heads"
        )));
    }
    if g.value(keys).cols() != d || g.value(values).rows() != g.value(keys).rows() {
        return Err(Error::Config(format!(
            "attention operands disagree: query {:?}, keys {:?}, values {:?}",
            g.value(query).shape(),
            g.value(keys).shape(),
            g.value(values).shape()
        )));
    }
    let dh = d / heads;
    let dv = g.value(values).cols();
    if dv % heads != 0 {
        return Err(Error::Config(format!(
            "value width {dv} is not divisible by {heads} heads"
        )));
    }
    let dvh = dv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (q, k) = if heads == 1 {
            (query, keys)
        } else {
            (
                g.slice_cols(query, h * dh, (h + 1) * dh)?,
                g.slice_cols(keys, h * dh, (h + 1) * dh)?,
            )
        };
        let v = if heads == 1 {
            values
        } else {
            g.slice_cols(values, h * dvh, (h + 1) * dvh)?
        };
        let scores = g.matmul_t(q, false, k, true)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores);
        outs.push(g.matmul(w, v)?);
        weights.push(w);
    }
    let output = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)?
    };
    Ok(Attention { output, weights })
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            output: Linear::new(store, &format!("{name}.output"), width, width, rng),
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, query: NodeId, memory: NodeId) -> Result<NodeId> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let att = multi_head_attention(g, q, k, v, self.heads)?;
        self.output.forward(g, att.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_masks_reproduce_under_seed() {
        let store = ParamStore::new();
        let draw = |seed| {
            let mut rng = det_rng(seed);
            let mut g = Graph::new(&store);
            let x = g.input("x", Tensor::full(&[4, 8], 1.0));
            let mut masks = Masks::on(&mut rng);
            let y = masks.apply(&mut g, x, 0.3);
            g.value(y).clone()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }

    #[test]
    fn dropout_rate_bounds_validated() {
        assert!(DropoutSpec::new(-0.1, 0.5, 0).is_err());
        assert!(DropoutSpec::new(0.1, 1.5, 0).is_err());
        assert!(DropoutSpec::new(0.1, 0.5, 0).is_ok());
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut g = Graph::detached();
        let q = g.input("q", Tensor::zeros(&[1, 6]));
        let err = multi_head_attention(&mut g, q, q, q, 4).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }
}
