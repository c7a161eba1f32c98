use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DetRng, Graph, Linear, Masks, NodeId, ParamStore, Tensor};

/// Layer widths and dropout rates of a simulator network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub hidden: Vec<usize>,
    pub input_dropout: f64,
    pub penultimate_dropout: f64,
}

impl MlpArch {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "hidden layer widths must be non-empty and positive, got {:?}",
                self.hidden
            )));
        }
        crate::tensor::DropoutSpec::new(self.input_dropout, self.penultimate_dropout, 0)?;
        Ok(())
    }
}

/// ReLU MLP whose treatment decision is appended to the last hidden layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionMlp {
    pub hidden: Vec<Linear>,
    pub head: Linear,
    pub arch: MlpArch,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl DecisionMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        arch: &MlpArch,
        rng: &mut DetRng,
    ) -> Result<Self> {
        arch.validate()?;
        let mut hidden = Vec::new();
        let mut width = input_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            hidden.push(Linear::new(
                store,
                &format!("{name}.hidden{i}"),
                width,
                h,
                rng,
            ));
            width = h;
        }
        let head = Linear::new(store, &format!("{name}.head"), width + 1, output_dim, rng);
        Ok(DecisionMlp {
            hidden,
            head,
            arch: arch.clone(),
            input_dim,
            output_dim,
        })
    }

    /// Logits for inputs `x` (rows × input_dim) and one decision per row.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        decisions: &[f64],
        masks: &mut Masks<'_>,
    ) -> Result<NodeId> {
        let mut h = masks.apply(g, x, self.arch.input_dropout);
        for layer in &self.hidden {
            let z = layer.forward(g, h)?;
            h = g.relu(z);
        }
        // The decision joins after dropout so it is never masked out.
        let h = masks.apply(g, h, self.arch.penultimate_dropout);
        let d = g.constant(Tensor::matrix(decisions.len(), 1, decisions.to_vec())?);
        let h = g.concat_cols(&[h, d])?;
        self.head.forward(g, h)
    }
}

pub fn bool_column(values: impl Iterator<Item = bool>) -> Vec<f64> {
    values.map(|v| v as u8 as f64).collect()
}
