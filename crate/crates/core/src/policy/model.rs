use serde::{Deserialize, Serialize};

use crate::cohort::{FeatureEncoder, PatientFeatures, Stage, StageContext, FULL_LEN};
use crate::error::{Error, Result};
use crate::tensor::{
    det_rng, DetRng, Graph, LayerNorm, Linear, Masks, NodeId, ParamId, ParamStore, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Imitation,
    Optimal,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::Imitation, Strategy::Optimal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Imitation => "imitation",
            Strategy::Optimal => "optimal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "imitation" => Some(Strategy::Imitation),
            "optimal" => Some(Strategy::Optimal),
            _ => None,
        }
    }
}

/// Which side of the cohort attention the stored cohort sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrientation {
    /// Patient queries, cohort memory supplies keys and values.
    #[default]
    Standard,
    /// Cohort memory rows are the queries and the patient is the only
    /// key/value. Softmax over a single key is 1, so every query row receives
    /// the patient's value vector and the cohort does not affect the output.
    MemoryQueries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub head_width: usize,
    pub input_dropout: f64,
    pub final_dropout: f64,
    #[serde(default)]
    pub orientation: AttentionOrientation,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch {
            width: 1000,
            heads: 4,
            ffn_width: 1000,
            head_width: 20,
            input_dropout: 0.1,
            final_dropout: 0.25,
            orientation: AttentionOrientation::Standard,
        }
    }
}

impl PolicyArch {
    pub fn desk() -> Self {
        PolicyArch {
            width: 64,
            ffn_width: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.ffn_width == 0 || self.head_width == 0 {
            return Err(Error::Config("policy layer widths must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        crate::tensor::DropoutSpec::new(self.input_dropout, self.final_dropout, 0)?;
        Ok(())
    }
}

/// Multi-head attention from patients onto a stored cohort.
///
/// Keys and values are projections of the memory; the products are
/// reassociated so the memory is never multiplied by a width × width matrix.
/// The key bias is omitted because it shifts every score in a row equally.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CohortAttention {
    pub query: Linear,
    pub key_weight: ParamId,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl CohortAttention {
    fn new(store: &mut ParamStore, width: usize, heads: usize, rng: &mut DetRng) -> Self {
        let query = Linear::new(store, "policy.attention.query", width, width, rng);
        let key_weight = store.add_xavier("policy.attention.key.weight", width, width, rng);
        let value = Linear::new(store, "policy.attention.value", width, width, rng);
        let output = Linear::new(store, "policy.attention.output", width, width, rng);
        CohortAttention {
            query,
            key_weight,
            value,
            output,
            heads,
            width,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        patients: NodeId,
        memory: NodeId,
        orientation: AttentionOrientation,
    ) -> Result<NodeId> {
        if orientation == AttentionOrientation::MemoryQueries {
            let v = self.value.forward(g, patients)?;
            return self.output.forward(g, v);
        }
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(g, patients)?;
        let wk = g.param(self.key_weight);
        let wv = g.param(self.value.weight);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b)?;
            let wkh = g.slice_cols(wk, a, b)?;
            // (q_h W_k,h^T) M^T = q_h (M W_k,h)^T
            let t = g.matmul_t(qh, false, wkh, true)?;
            let s = g.matmul_t(t, false, memory, true)?;
            let s = g.scale(s, scale);
            let w = g.softmax_rows(s);
            // (A M) W_v,h = A (M W_v,h)
            let c = g.matmul(w, memory)?;
            let wvh = g.slice_cols(wv, a, b)?;
            outs.push(g.matmul(c, wvh)?);
        }
        let cat = g.concat_cols(&outs)?;
        let bv = g.param(self.value.bias);
        let v = g.add_row(cat, bv)?;
        self.output.forward(g, v)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PolicyHead {
    pub hidden: Linear,
    pub out: Linear,
}

/// Encoder output for one head: logits (n × 1) and head-layer embeddings.
pub struct HeadNodes {
    pub logits: NodeId,
    pub embedding: NodeId,
}

/// Shared transformer encoder with imitation and optimal heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyModel {
    pub arch: PolicyArch,
    pub store: ParamStore,
    pub embed: Linear,
    /// One learned row per decision stage.
    pub position: ParamId,
    pub attention: CohortAttention,
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
    pub heads: [PolicyHead; 2],
    /// Encoded training cohort per stage (m × FULL_LEN).
    pub memory: Vec<Tensor>,
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub probability: f64,
    pub stage: Stage,
    pub strategy: Strategy,
    pub embedding: Vec<f64>,
}

impl PolicyModel {
    pub fn new(arch: &PolicyArch, memory: Vec<Tensor>, seed: u64) -> Result<Self> {
        arch.validate()?;
        if memory.len() != 3 || memory.iter().any(|m| m.rows() == 0 || m.cols() != FULL_LEN) {
            return Err(Error::Config(format!(
                "policy memory needs three non-empty {FULL_LEN}-wide stage tables"
            )));
        }
        let mut rng = det_rng(seed);
        let mut store = ParamStore::new();
        let w = arch.width;
        let embed = Linear::new(&mut store, "policy.embed", FULL_LEN, w, &mut rng);
        let position = store.add_xavier("policy.position", 3, w, &mut rng);
        let attention = CohortAttention::new(&mut store, w, arch.heads, &mut rng);
        let norm1 = LayerNorm::new(&mut store, "policy.norm1", w);
        let ffn1 = Linear::new(&mut store, "policy.ffn1", w, arch.ffn_width, &mut rng);
        let ffn2 = Linear::new(&mut store, "policy.ffn2", arch.ffn_width, w, &mut rng);
        let norm2 = LayerNorm::new(&mut store, "policy.norm2", w);
        let heads = Strategy::ALL.map(|s| PolicyHead {
            hidden: Linear::new(
                &mut store,
                &format!("policy.{}.hidden", s.label()),
                w,
                arch.head_width,
                &mut rng,
            ),
            out: Linear::new(
                &mut store,
                &format!("policy.{}.out", s.label()),
                arch.head_width,
                1,
                &mut rng,
            ),
        });
        Ok(PolicyModel {
            arch: arch.clone(),
            store,
            embed,
            position,
            attention,
            norm1,
            ffn1,
            ffn2,
            norm2,
            heads,
            memory,
            trained: false,
        })
    }

    /// Parameters owned by one head.
    pub fn head_params(&self, strategy: Strategy) -> Vec<ParamId> {
        let h = &self.heads[strategy.index()];
        vec![h.hidden.weight, h.hidden.bias, h.out.weight, h.out.bias]
    }

    /// Parameters of the shared encoder.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let heads: Vec<ParamId> = Strategy::ALL
            .iter()
            .flat_map(|&s| self.head_params(s))
            .collect();
        self.store.ids().filter(|p| !heads.contains(p)).collect()
    }

    fn staged_embed(&self, g: &mut Graph<'_>, x: NodeId, stage: Stage) -> Result<NodeId> {
        let e = self.embed.forward(g, x)?;
        let pos = g.param(self.position);
        let row = g.gather_rows(pos, &[stage.index()])?;
        g.add_row(e, row)
    }

    /// Shared encoder output (n × width) for encoded rows at `stage`.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        stage: Stage,
        masks: &mut Masks<'_>,
    ) -> Result<NodeId> {
        let xd = masks.apply(g, x, self.arch.input_dropout);
        let e = self.staged_embed(g, xd, stage)?;
        let mem_x = g.constant(self.memory[stage.index()].clone());
        let mem = self.staged_embed(g, mem_x, stage)?;
        let att = self.attention.forward(g, e, mem, self.arch.orientation)?;
        let r1 = g.add(e, att)?;
        let h1 = self.norm1.forward(g, r1)?;
        let f = self.ffn1.forward(g, h1)?;
        let f = g.relu(f);
        let f = self.ffn2.forward(g, f)?;
        let r2 = g.add(h1, f)?;
        self.norm2.forward(g, r2)
    }

    pub fn head(
        &self,
        g: &mut Graph<'_>,
        encoded: NodeId,
        strategy: Strategy,
        masks: &mut Masks<'_>,
    ) -> Result<HeadNodes> {
        let h = &self.heads[strategy.index()];
        let z = h.hidden.forward(g, encoded)?;
        let embedding = g.relu(z);
        let zd = masks.apply(g, embedding, self.arch.final_dropout);
        let logits = h.out.forward(g, zd)?;
        Ok(HeadNodes { logits, embedding })
    }

    /// Treatment probability node for `x`; used for attribution.
    pub fn probability_node(
        &self,
        g: &mut Graph<'_>,
        x: NodeId,
        stage: Stage,
        strategy: Strategy,
    ) -> Result<NodeId> {
        let mut masks = Masks::off();
        let enc = self.encode(g, x, stage, &mut masks)?;
        let h = self.head(g, enc, strategy, &mut masks)?;
        Ok(g.sigmoid(h.logits))
    }

    fn check_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::Usage("policy model used before training".into()));
        }
        Ok(())
    }

    /// Probabilities and head embeddings for encoded rows.
    pub fn predict_rows(
        &self,
        x: &Tensor,
        stage: Stage,
        strategy: Strategy,
        masks: &mut Masks<'_>,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_trained()?;
        let mut g = Graph::new(&self.store);
        let xn = g.input("x", x.clone());
        let enc = self.encode(&mut g, xn, stage, masks)?;
        let h = self.head(&mut g, enc, strategy, masks)?;
        let probs = g
            .value(h.logits)
            .data()
            .iter()
            .map(|&z| crate::tensor::graph::sigmoid(z))
            .collect();
        Ok((probs, g.value(h.embedding).to_rows()))
    }

    /// Probabilities and embeddings of the stored cohort at `stage`.
    pub fn cohort_outputs(
        &self,
        stage: Stage,
        strategy: Strategy,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.predict_rows(
            &self.memory[stage.index()],
            stage,
            strategy,
            &mut Masks::off(),
        )
    }

    pub fn predict(
        &self,
        encoder: &FeatureEncoder,
        patient: &PatientFeatures,
        context: &StageContext,
        strategy: Strategy,
    ) -> Result<PolicyOutput> {
        check_context(context)?;
        let x = Tensor::row(&encoder.encode(patient, Some(context))?);
        let (p, e) = self.predict_rows(&x, context.stage, strategy, &mut Masks::off())?;
        Ok(PolicyOutput {
            probability: p[0],
            stage: context.stage,
            strategy,
            embedding: e.into_iter().next().unwrap_or_default(),
        })
    }
}

/// A stage context must carry every earlier stage's decision and transition.
pub fn check_context(ctx: &StageContext) -> Result<()> {
    let missing = match ctx.stage {
        Stage::Ic => None,
        Stage::Cc if ctx.after_ic.is_none() => Some("after_ic"),
        Stage::Nd if ctx.after_ic.is_none() => Some("after_ic"),
        Stage::Nd if ctx.after_cc.is_none() => Some("after_cc"),
        _ => None,
    };
    match missing {
        Some(field) => Err(Error::Usage(format!(
            "{} policy prediction is missing stage context field `{field}`",
            ctx.stage.label()
        ))),
        None => Ok(()),
    }
}
