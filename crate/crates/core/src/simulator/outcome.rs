//! Post-treatment outcome models: static toxicity risks and survival mixtures.

use serde::{Deserialize, Serialize};

use super::mixture::MixtureParams;
use super::mlp::{bool_column, DecisionMlp, MlpArch};
use super::transition::all_rows;
use crate::cohort::{CohortRecord, Endpoint, FeatureEncoder, Stage, StageContext, FULL_LEN};
use crate::error::{Error, Result};
use crate::tensor::graph::{sigmoid, softmax_in_place, softplus};
use crate::tensor::loss::bce_with_logits;
use crate::tensor::{
    derive_seed, det_rng, AdamState, Graph, Masks, NodeId, ParamGrads, ParamStore, Tensor,
};
use crate::training::{fit_early_stopping, holdout, FitReport, TrainConfig};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const DEFAULT_COMPONENTS: usize = 6;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Encoded post-treatment state for outcome models.
pub struct OutcomeData {
    pub x: Vec<Vec<f64>>,
    /// ND decision, appended at the penultimate layer.
    pub decisions: Vec<bool>,
    pub records: Vec<CohortRecord>,
}

impl OutcomeData {
    pub fn build(records: &[CohortRecord], encoder: &FeatureEncoder) -> Result<Self> {
        let x = records
            .iter()
            .map(|r| encoder.encode(&r.features, Some(&StageContext::from_record(r, Stage::Nd))))
            .collect::<Result<Vec<_>>>()?;
        Ok(OutcomeData {
            x,
            decisions: records.iter().map(|r| r.sequence.nd).collect(),
            records: records.to_vec(),
        })
    }
}

fn select(x: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
    all_rows(&rows)
}

/// Feeding-tube and post-therapy aspiration risk at six months.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticRisk {
    pub ft: f64,
    pub aspiration_post: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticOutcomeModel {
    pub store: ParamStore,
    pub net: DecisionMlp,
    pub trained: bool,
}

impl StaticOutcomeModel {
    pub fn new(arch: &MlpArch, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = DecisionMlp::new(&mut store, "static", FULL_LEN, 2, arch, &mut det_rng(seed))?;
        Ok(StaticOutcomeModel {
            store,
            net,
            trained: false,
        })
    }

    fn loss(
        &self,
        data: &OutcomeData,
        idx: &[usize],
        masks: &mut Masks<'_>,
    ) -> Result<(f64, Option<ParamGrads>)> {
        let mut g = Graph::new(&self.store);
        let x = g.input("x", select(&data.x, idx)?);
        let d = bool_column(idx.iter().map(|&i| data.decisions[i]));
        let logits = self.net.forward(&mut g, x, &d, masks)?;
        let targets: Vec<f64> = idx
            .iter()
            .flat_map(|&i| {
                let o = &data.records[i].outcome;
                [o.ft as u8 as f64, o.aspiration_post as u8 as f64]
            })
            .collect();
        let s = bce_with_logits(&mut g, logits, Tensor::matrix(idx.len(), 2, targets)?)?;
        let loss = g.scale(s, 1.0 / idx.len() as f64);
        let value = g.value(loss).data()[0];
        let grads = if masks.active() {
            Some(g.backward_scalar(loss)?.into_param_grads())
        } else {
            None
        };
        Ok((value, grads))
    }

    pub fn predict_rows(
        &self,
        x: &Tensor,
        nd: &[bool],
        masks: &mut Masks<'_>,
    ) -> Result<Vec<StaticRisk>> {
        if !self.trained {
            return Err(Error::Usage(
                "static outcome model used before training".into(),
            ));
        }
        let mut g = Graph::new(&self.store);
        let xn = g.input("x", x.clone());
        let logits = self
            .net
            .forward(&mut g, xn, &bool_column(nd.iter().copied()), masks)?;
        let v = g.value(logits);
        Ok((0..nd.len())
            .map(|r| StaticRisk {
                ft: sigmoid(v.get(r, 0)),
                aspiration_post: sigmoid(v.get(r, 1)),
            })
            .collect())
    }
}

/// Survival network: per endpoint, K mixture logits, K locations and K raw scales.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalModel {
    pub store: ParamStore,
    pub net: DecisionMlp,
    pub components: usize,
    pub trained: bool,
}

/// Softplus inverse of 1 − floor, so initial σ is about one.
const RAW_SIGMA_INIT: f64 = 0.541_324_854_612_918_1;

impl SurvivalModel {
    pub fn new(arch: &MlpArch, components: usize, seed: u64) -> Result<Self> {
        if components == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let mut store = ParamStore::new();
        let net = DecisionMlp::new(
            &mut store,
            "survival",
            FULL_LEN,
            3 * Endpoint::ALL.len() * components,
            arch,
            &mut det_rng(seed),
        )?;
        Ok(SurvivalModel {
            store,
            net,
            components,
            trained: false,
        })
    }

    fn block(&self, e: Endpoint) -> usize {
        3 * self.components * e.index()
    }

    /// Start each endpoint's locations around the log of its typical
    /// follow-up time, spread so components are not interchangeable.
    fn init_biases(&mut self, records: &[CohortRecord]) {
        let k = self.components;
        let starts: Vec<(usize, f64)> = Endpoint::ALL
            .iter()
            .map(|&e| {
                let logs: Vec<f64> = records
                    .iter()
                    .map(|r| r.outcome.endpoint(e).months.ln())
                    .collect();
                let centre = logs.iter().sum::<f64>() / logs.len().max(1) as f64;
                (self.block(e), centre)
            })
            .collect();
        let bias = self.store.get_mut(self.net.head.bias).data_mut();
        for (base, centre) in starts {
            for j in 0..k {
                bias[base + k + j] = centre + 0.5 * (j as f64 - (k as f64 - 1.0) / 2.0);
                bias[base + 2 * k + j] = RAW_SIGMA_INIT;
            }
        }
    }

    /// Negative mean censored log-likelihood summed over endpoints.
    fn nll_node(
        &self,
        g: &mut Graph<'_>,
        out: NodeId,
        data: &OutcomeData,
        idx: &[usize],
    ) -> Result<NodeId> {
        let k = self.components;
        let n = idx.len();
        let mut total: Option<NodeId> = None;
        for e in Endpoint::ALL {
            let base = self.block(e);
            let logits = g.slice_cols(out, base, base + k)?;
            let mu = g.slice_cols(out, base + k, base + 2 * k)?;
            let raw = g.slice_cols(out, base + 2 * k, base + 3 * k)?;
            let sp = g.softplus(raw);
            let sigma = g.add_scalar(sp, SIGMA_FLOOR);
            let log_pi = g.log_softmax_rows(logits);
            let mut lt = Vec::with_capacity(n * k);
            let mut ev = Vec::with_capacity(n);
            for &i in idx {
                let et = data.records[i].outcome.endpoint(e);
                lt.extend(std::iter::repeat_n(et.months.ln(), k));
                ev.push(et.event as u8 as f64);
            }
            let ltn = g.constant(Tensor::matrix(n, k, lt)?);
            let centered = g.sub(ltn, mu)?;
            let z = g.div(centered, sigma)?;
            // log f_k = −z²/2 − ln√(2π) − ln σ − ln t
            let z2 = g.square(z);
            let a = g.scale(z2, -0.5);
            let a = g.add_scalar(a, -LN_SQRT_2PI);
            let log_sigma = g.log(sigma);
            let a = g.sub(a, log_sigma)?;
            let log_f = g.sub(a, ltn)?;
            let wf = g.add(log_pi, log_f)?;
            let lf = g.logsumexp_rows(wf);
            let log_s = g.normal_log_sf(z);
            let ws = g.add(log_pi, log_s)?;
            let ls = g.logsumexp_rows(ws);
            let events = g.constant(Tensor::matrix(n, 1, ev.clone())?);
            let censored = g.constant(Tensor::matrix(n, 1, ev.iter().map(|v| 1.0 - v).collect())?);
            let a = g.mul(lf, events)?;
            let b = g.mul(ls, censored)?;
            let ll = g.add(a, b)?;
            let s = g.sum_all(ll);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        Ok(g.scale(total.expect("three endpoints"), -1.0 / n as f64))
    }

    fn loss(
        &self,
        data: &OutcomeData,
        idx: &[usize],
        masks: &mut Masks<'_>,
    ) -> Result<(f64, Option<ParamGrads>)> {
        let mut g = Graph::new(&self.store);
        let x = g.input("x", select(&data.x, idx)?);
        let d = bool_column(idx.iter().map(|&i| data.decisions[i]));
        let out = self.net.forward(&mut g, x, &d, masks)?;
        let loss = self.nll_node(&mut g, out, data, idx)?;
        let value = g.value(loss).data()[0];
        let grads = if masks.active() {
            Some(g.backward_scalar(loss)?.into_param_grads())
        } else {
            None
        };
        Ok((value, grads))
    }

    /// Mean negative log-likelihood with dropout off.
    pub fn negative_log_likelihood(&self, data: &OutcomeData) -> Result<f64> {
        let idx: Vec<usize> = (0..data.x.len()).collect();
        Ok(self.loss(data, &idx, &mut Masks::off())?.0)
    }

    /// Mixture parameters per row, indexed by [`Endpoint::index`].
    pub fn predict_rows(
        &self,
        x: &Tensor,
        nd: &[bool],
        masks: &mut Masks<'_>,
    ) -> Result<Vec<[MixtureParams; 3]>> {
        if !self.trained {
            return Err(Error::Usage("survival model used before training".into()));
        }
        let mut g = Graph::new(&self.store);
        let xn = g.input("x", x.clone());
        let out = self
            .net
            .forward(&mut g, xn, &bool_column(nd.iter().copied()), masks)?;
        let v = g.value(out);
        let k = self.components;
        Ok((0..nd.len())
            .map(|r| {
                let row = v.row_slice(r);
                std::array::from_fn(|e| {
                    let base = 3 * k * e;
                    let mut weights = row[base..base + k].to_vec();
                    softmax_in_place(&mut weights);
                    MixtureParams {
                        weights,
                        mu: row[base + k..base + 2 * k].to_vec(),
                        sigma: row[base + 2 * k..base + 3 * k]
                            .iter()
                            .map(|&s| softplus(s) + SIGMA_FLOOR)
                            .collect(),
                    }
                })
            })
            .collect())
    }
}

pub fn fit_static_model(
    data: &OutcomeData,
    arch: &MlpArch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(StaticOutcomeModel, FitReport)> {
    let mut model = StaticOutcomeModel::new(arch, derive_seed(seed, 1))?;
    let mut rng = det_rng(derive_seed(seed, 2));
    let (tr, val) = holdout(data.x.len(), cfg.validation_fraction, &mut rng);
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let report = fit_early_stopping(
        &mut model,
        &tr,
        cfg,
        &mut rng,
        |m, batch, rng| {
            let (loss, grads) = m.loss(data, batch, &mut Masks::on(rng))?;
            adam.step(&mut m.store, &grads.expect("training pass"))?;
            Ok(loss)
        },
        |m| {
            if val.is_empty() {
                Ok(None)
            } else {
                Ok(Some(m.loss(data, &val, &mut Masks::off())?.0))
            }
        },
    )?;
    model.trained = true;
    Ok((model, report))
}

pub fn fit_survival_model(
    data: &OutcomeData,
    arch: &MlpArch,
    components: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SurvivalModel, FitReport)> {
    for e in Endpoint::ALL {
        if !data.records.iter().any(|r| r.outcome.endpoint(e).event) {
            return Err(Error::AllCensored(e.label().to_string()));
        }
    }
    let mut model = SurvivalModel::new(arch, components, derive_seed(seed, 1))?;
    model.init_biases(&data.records);
    let mut rng = det_rng(derive_seed(seed, 2));
    let (tr, val) = holdout(data.x.len(), cfg.validation_fraction, &mut rng);
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let report = fit_early_stopping(
        &mut model,
        &tr,
        cfg,
        &mut rng,
        |m, batch, rng| {
            let (loss, grads) = m.loss(data, batch, &mut Masks::on(rng))?;
            adam.step(&mut m.store, &grads.expect("training pass"))?;
            Ok(loss)
        },
        |m| {
            if val.is_empty() {
                Ok(None)
            } else {
                Ok(Some(m.loss(data, &val, &mut Masks::off())?.0))
            }
        },
    )?;
    model.trained = true;
    Ok((model, report))
}

/// Both outcome models (static risks and survival mixture).
pub fn fit_outcome_models(
    train: &[CohortRecord],
    encoder: &FeatureEncoder,
    static_arch: &MlpArch,
    survival_arch: &MlpArch,
    components: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(StaticOutcomeModel, SurvivalModel)> {
    let data = OutcomeData::build(train, encoder)?;
    let (survival, _) =
        fit_survival_model(&data, survival_arch, components, cfg, derive_seed(seed, 20))?;
    let (stat, _) = fit_static_model(&data, static_arch, cfg, derive_seed(seed, 10))?;
    Ok((stat, survival))
}
