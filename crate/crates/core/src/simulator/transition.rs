use serde::{Deserialize, Serialize};

use super::mlp::{bool_column, DecisionMlp, MlpArch};
use crate::cohort::{
    CohortRecord, FeatureEncoder, Stage, StageContext, TransitionDist, TransitionState, DLT_KINDS,
    FULL_LEN, RESPONSE_LEVELS,
};
use crate::error::{Error, Result};
use crate::tensor::graph::sigmoid;
use crate::tensor::loss::{bce_with_logits, softmax_cross_entropy};
use crate::tensor::{derive_seed, det_rng, AdamState, DetRng, Graph, Masks, ParamStore, Tensor};
use crate::training::{fit_early_stopping, holdout, FitReport, TrainConfig};

pub const TRANSITION_OUTPUTS: usize = 2 * RESPONSE_LEVELS + DLT_KINDS;

/// Response and toxicity model for the stage after IC or after CC/RT.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionModel {
    /// Stage whose outcome is predicted (`Ic` or `Cc`).
    pub stage: Stage,
    pub store: ParamStore,
    pub net: DecisionMlp,
    pub trained: bool,
}

/// Encoded inputs and targets for one stage.
pub struct TransitionData {
    pub x: Vec<Vec<f64>>,
    pub decisions: Vec<bool>,
    pub targets: Vec<TransitionState>,
}

impl TransitionData {
    pub fn build(records: &[CohortRecord], encoder: &FeatureEncoder, stage: Stage) -> Result<Self> {
        check_stage(stage)?;
        let mut x = Vec::with_capacity(records.len());
        for r in records {
            let ctx = StageContext::from_record(r, stage);
            x.push(encoder.encode(&r.features, Some(&ctx))?);
        }
        Ok(TransitionData {
            x,
            decisions: records.iter().map(|r| r.sequence.decision(stage)).collect(),
            targets: records
                .iter()
                .map(|r| match stage {
                    Stage::Ic => r.after_ic,
                    _ => r.after_cc,
                })
                .collect(),
        })
    }
}

fn check_stage(stage: Stage) -> Result<()> {
    if stage == Stage::Nd {
        return Err(Error::Usage(
            "transition models exist for the IC and CC stages only".into(),
        ));
    }
    Ok(())
}

fn rows_tensor(x: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let cols = x.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(&x[i]);
    }
    Tensor::matrix(idx.len(), cols, data)
}

pub(crate) fn all_rows(x: &[Vec<f64>]) -> Result<Tensor> {
    rows_tensor(x, &(0..x.len()).collect::<Vec<_>>())
}

impl TransitionModel {
    pub fn new(stage: Stage, arch: &MlpArch, seed: u64) -> Result<Self> {
        check_stage(stage)?;
        let mut store = ParamStore::new();
        let mut rng = det_rng(seed);
        let name = format!("transition_{}", stage.label().to_lowercase());
        let net = DecisionMlp::new(
            &mut store,
            &name,
            FULL_LEN,
            TRANSITION_OUTPUTS,
            arch,
            &mut rng,
        )?;
        Ok(TransitionModel {
            stage,
            store,
            net,
            trained: false,
        })
    }

    fn loss(
        &self,
        data: &TransitionData,
        idx: &[usize],
        masks: &mut Masks<'_>,
    ) -> Result<(f64, Option<crate::tensor::ParamGrads>)> {
        let mut g = Graph::new(&self.store);
        let x = g.input("x", rows_tensor(&data.x, idx)?);
        let d: Vec<f64> = bool_column(idx.iter().map(|&i| data.decisions[i]));
        let logits = self.net.forward(&mut g, x, &d, masks)?;
        let n = idx.len();
        let mut primary = vec![0.0; n * RESPONSE_LEVELS];
        let mut nodal = vec![0.0; n * RESPONSE_LEVELS];
        let mut dlt = vec![0.0; n * DLT_KINDS];
        for (row, &i) in idx.iter().enumerate() {
            let t = &data.targets[i];
            primary[row * RESPONSE_LEVELS + t.primary_response as usize] = 1.0;
            nodal[row * RESPONSE_LEVELS + t.nodal_response as usize] = 1.0;
            for k in 0..DLT_KINDS {
                dlt[row * DLT_KINDS + k] = t.dlt[k] as u8 as f64;
            }
        }
        let lp = g.slice_cols(logits, 0, RESPONSE_LEVELS)?;
        let ln = g.slice_cols(logits, RESPONSE_LEVELS, 2 * RESPONSE_LEVELS)?;
        let ld = g.slice_cols(logits, 2 * RESPONSE_LEVELS, TRANSITION_OUTPUTS)?;
        let a = softmax_cross_entropy(&mut g, lp, Tensor::matrix(n, RESPONSE_LEVELS, primary)?)?;
        let b = softmax_cross_entropy(&mut g, ln, Tensor::matrix(n, RESPONSE_LEVELS, nodal)?)?;
        let c = bce_with_logits(&mut g, ld, Tensor::matrix(n, DLT_KINDS, dlt)?)?;
        let ab = g.add(a, b)?;
        let total = g.add(ab, c)?;
        let loss = g.scale(total, 1.0 / n as f64);
        let value = g.value(loss).data()[0];
        if masks.active() {
            let grads = g.backward_scalar(loss)?.into_param_grads();
            Ok((value, Some(grads)))
        } else {
            Ok((value, None))
        }
    }

    /// Mean summed cross-entropy over `data` with dropout off.
    pub fn evaluate_loss(&self, data: &TransitionData) -> Result<f64> {
        let idx: Vec<usize> = (0..data.x.len()).collect();
        Ok(self.loss(data, &idx, &mut Masks::off())?.0)
    }

    /// Distributions for encoded rows; dropout follows `masks`.
    pub fn predict_rows(
        &self,
        x: &Tensor,
        decisions: &[bool],
        masks: &mut Masks<'_>,
    ) -> Result<Vec<TransitionDist>> {
        if !self.trained {
            return Err(Error::Usage(format!(
                "post-{} transition model used before training",
                self.stage.label()
            )));
        }
        let mut g = Graph::new(&self.store);
        let xn = g.input("x", x.clone());
        let logits =
            self.net
                .forward(&mut g, xn, &bool_column(decisions.iter().copied()), masks)?;
        let lv = g.value(logits);
        let mut out = Vec::with_capacity(decisions.len());
        for (row, &decision) in decisions.iter().enumerate() {
            if self.stage == Stage::Ic && !decision {
                // Without IC the response stays stable and no IC toxicity occurs.
                out.push(TransitionDist::stable());
                continue;
            }
            let r = lv.row_slice(row);
            let mut primary = [0.0; RESPONSE_LEVELS];
            primary.copy_from_slice(&r[..RESPONSE_LEVELS]);
            crate::tensor::graph::softmax_in_place(&mut primary);
            let mut nodal = [0.0; RESPONSE_LEVELS];
            nodal.copy_from_slice(&r[RESPONSE_LEVELS..2 * RESPONSE_LEVELS]);
            crate::tensor::graph::softmax_in_place(&mut nodal);
            let dlt = std::array::from_fn(|k| sigmoid(r[2 * RESPONSE_LEVELS + k]));
            out.push(TransitionDist {
                primary,
                nodal,
                dlt,
            });
        }
        Ok(out)
    }

    /// Distribution for one patient state and decision (dropout off).
    pub fn predict(
        &self,
        encoder: &FeatureEncoder,
        patient: &crate::cohort::PatientFeatures,
        context: &StageContext,
        decision: bool,
    ) -> Result<TransitionDist> {
        let x = Tensor::row(&encoder.encode(patient, Some(context))?);
        Ok(self
            .predict_rows(&x, &[decision], &mut Masks::off())?
            .remove(0))
    }
}

/// Sample a concrete state from a distribution.
pub fn sample_state(dist: &TransitionDist, rng: &mut DetRng) -> TransitionState {
    use rand::Rng;
    let draw = |p: &[f64; RESPONSE_LEVELS], rng: &mut DetRng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return k as u8;
            }
        }
        (RESPONSE_LEVELS - 1) as u8
    };
    let primary_response = draw(&dist.primary, rng);
    let nodal_response = draw(&dist.nodal, rng);
    let dlt = dist.dlt.map(|p| rng.random::<f64>() < p);
    TransitionState {
        primary_response,
        nodal_response,
        dlt,
    }
}

/// Train the transition model for `stage` with early stopping.
///
/// The post-IC model only sees patients who received IC; without IC the
/// outcome is fixed at prediction time.
pub fn fit_transition(
    train: &[CohortRecord],
    encoder: &FeatureEncoder,
    stage: Stage,
    arch: &MlpArch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TransitionModel, FitReport)> {
    let treated: Vec<CohortRecord>;
    let train = if stage == Stage::Ic {
        treated = train.iter().filter(|r| r.sequence.ic).cloned().collect();
        if treated.is_empty() {
            return Err(Error::Config("no training patients received IC".into()));
        }
        &treated[..]
    } else {
        train
    };
    let data = TransitionData::build(train, encoder, stage)?;
    for (head, level_of) in [
        (
            "primary response",
            (|t: &TransitionState| t.primary_response) as fn(&TransitionState) -> u8,
        ),
        ("nodal response", |t: &TransitionState| t.nodal_response),
    ] {
        for level in 0..RESPONSE_LEVELS as u8 {
            if !data.targets.iter().any(|t| level_of(t) == level) {
                log::warn!(
                    "post-{} {head}: class {level} has no training examples",
                    stage.label()
                );
            }
        }
    }
    let mut model = TransitionModel::new(stage, arch, derive_seed(seed, 1))?;
    let mut rng = det_rng(derive_seed(seed, 2));
    let (tr, val) = holdout(data.x.len(), cfg.validation_fraction, &mut rng);
    let mut adam = AdamState::new(&model.store, cfg.adam);
    let val_data = (!val.is_empty()).then_some(&val);
    let report = fit_early_stopping(
        &mut model,
        &tr,
        cfg,
        &mut rng,
        |m, batch, rng| {
            let (loss, grads) = m.loss(&data, batch, &mut Masks::on(rng))?;
            adam.step(&mut m.store, &grads.expect("training pass"))?;
            Ok(loss)
        },
        |m| match val_data {
            Some(v) => Ok(Some(m.loss(&data, v, &mut Masks::off())?.0)),
            None => Ok(None),
        },
    )?;
    model.trained = true;
    Ok((model, report))
}
