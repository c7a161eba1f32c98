//! Patient twin: stage transitions, static toxicity risks and survival.

pub mod mixture;
pub mod mlp;
pub mod outcome;
pub mod transition;

use serde::{Deserialize, Serialize};

pub use mixture::{serving_grid, MixtureParams};
pub use mlp::{DecisionMlp, MlpArch};
pub use outcome::{
    fit_outcome_models, fit_static_model, fit_survival_model, OutcomeData, StaticOutcomeModel,
    StaticRisk, SurvivalModel, DEFAULT_COMPONENTS,
};
pub use transition::{fit_transition, sample_state, TransitionData, TransitionModel};

use crate::cohort::{
    CohortRecord, FeatureEncoder, PatientFeatures, Stage, StageContext, StageResult,
    TransitionDist, TransitionState, TreatmentSequence,
};
use crate::error::Result;
use crate::tensor::{derive_seed, DetRng, Masks, Tensor};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub transition: MlpArch,
    pub static_outcome: MlpArch,
    pub survival: MlpArch,
    pub components: usize,
    pub train: TrainConfig,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            transition: MlpArch {
                hidden: vec![500, 500],
                input_dropout: 0.1,
                penultimate_dropout: 0.5,
            },
            static_outcome: MlpArch {
                hidden: vec![500, 500],
                input_dropout: 0.1,
                penultimate_dropout: 0.5,
            },
            survival: MlpArch {
                hidden: vec![100],
                input_dropout: 0.1,
                penultimate_dropout: 0.5,
            },
            components: DEFAULT_COMPONENTS,
            train: TrainConfig::default(),
        }
    }
}

impl SimulatorConfig {
    /// Narrower networks for quick runs; same structure, dropout and stopping rule.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.transition.hidden = vec![64, 64];
        cfg.static_outcome.hidden = vec![64, 64];
        cfg.survival.hidden = vec![32];
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Feed head probabilities forward as the next stage's context.
    #[default]
    Expected,
    /// Sample a concrete state at each stage.
    Sampled,
}

/// Transitions the caller already knows; these replace model predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KnownTransitions {
    pub after_ic: Option<TransitionState>,
    pub after_cc: Option<TransitionState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sequence: TreatmentSequence,
    pub after_ic: TransitionDist,
    pub after_cc: TransitionDist,
    pub static_risk: StaticRisk,
    /// Indexed by [`crate::cohort::Endpoint::index`].
    pub survival: [MixtureParams; 3],
}

/// All patient-twin models plus the encoder they were trained with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Simulator {
    pub encoder: FeatureEncoder,
    pub post_ic: TransitionModel,
    pub post_cc: TransitionModel,
    pub static_outcome: StaticOutcomeModel,
    pub survival: SurvivalModel,
}

pub fn fit_simulator(
    train: &[CohortRecord],
    encoder: &FeatureEncoder,
    cfg: &SimulatorConfig,
    seed: u64,
) -> Result<Simulator> {
    let (post_ic, _) = fit_transition(
        train,
        encoder,
        Stage::Ic,
        &cfg.transition,
        &cfg.train,
        derive_seed(seed, 101),
    )?;
    let (post_cc, _) = fit_transition(
        train,
        encoder,
        Stage::Cc,
        &cfg.transition,
        &cfg.train,
        derive_seed(seed, 102),
    )?;
    let (static_outcome, survival) = fit_outcome_models(
        train,
        encoder,
        &cfg.static_outcome,
        &cfg.survival,
        cfg.components,
        &cfg.train,
        derive_seed(seed, 103),
    )?;
    Ok(Simulator {
        encoder: encoder.clone(),
        post_ic,
        post_cc,
        static_outcome,
        survival,
    })
}

impl Simulator {
    fn encode_all(&self, patients: &[PatientFeatures], ctx: &[StageContext]) -> Result<Tensor> {
        let rows = patients
            .iter()
            .zip(ctx)
            .map(|(p, c)| self.encoder.encode(p, Some(c)))
            .collect::<Result<Vec<_>>>()?;
        transition::all_rows(&rows)
    }

    fn resolve(
        dists: Vec<TransitionDist>,
        known: Option<TransitionState>,
        mode: RolloutMode,
        sampler: &mut Option<&mut DetRng>,
    ) -> Vec<TransitionDist> {
        dists
            .into_iter()
            .map(|d| match (known, mode, sampler.as_deref_mut()) {
                (Some(s), _, _) => (&s).into(),
                (None, RolloutMode::Sampled, Some(rng)) => (&sample_state(&d, rng)).into(),
                _ => d,
            })
            .collect()
    }

    /// Roll `sequence` out for a batch of patients.
    ///
    /// `masks` controls MC dropout in every component model; `sampler` is
    /// required for [`RolloutMode::Sampled`] and ignored otherwise.
    pub fn rollout_batch(
        &self,
        patients: &[PatientFeatures],
        sequence: &TreatmentSequence,
        known: &KnownTransitions,
        mode: RolloutMode,
        masks: &mut Masks<'_>,
        mut sampler: Option<&mut DetRng>,
    ) -> Result<Vec<Trajectory>> {
        if mode == RolloutMode::Sampled && sampler.is_none() {
            return Err(crate::Error::Usage(
                "sampled rollout requires a random number generator".into(),
            ));
        }
        let n = patients.len();
        let at_ic = vec![StageContext::at_ic(); n];
        let x = self.encode_all(patients, &at_ic)?;
        let ic = self
            .post_ic
            .predict_rows(&x, &vec![sequence.ic; n], masks)?;
        let ic = Self::resolve(ic, known.after_ic, mode, &mut sampler);

        let at_cc: Vec<StageContext> = ic
            .iter()
            .map(|d| StageContext {
                stage: Stage::Cc,
                after_ic: Some(StageResult {
                    decision: sequence.ic,
                    transition: *d,
                }),
                after_cc: None,
            })
            .collect();
        let x = self.encode_all(patients, &at_cc)?;
        let cc = self
            .post_cc
            .predict_rows(&x, &vec![sequence.cc; n], masks)?;
        let cc = Self::resolve(cc, known.after_cc, mode, &mut sampler);

        let at_nd: Vec<StageContext> = at_cc
            .iter()
            .zip(&cc)
            .map(|(c, d)| StageContext {
                stage: Stage::Nd,
                after_ic: c.after_ic,
                after_cc: Some(StageResult {
                    decision: sequence.cc,
                    transition: *d,
                }),
            })
            .collect();
        let x = self.encode_all(patients, &at_nd)?;
        let nd = vec![sequence.nd; n];
        let risks = self.static_outcome.predict_rows(&x, &nd, masks)?;
        let survival = self.survival.predict_rows(&x, &nd, masks)?;
        Ok((0..n)
            .zip(survival)
            .map(|(i, s)| Trajectory {
                sequence: *sequence,
                after_ic: ic[i],
                after_cc: cc[i],
                static_risk: risks[i],
                survival: s,
            })
            .collect())
    }

    /// Expected-mode rollout for one patient with dropout off.
    pub fn rollout(
        &self,
        patient: &PatientFeatures,
        sequence: &TreatmentSequence,
    ) -> Result<Trajectory> {
        Ok(self
            .rollout_batch(
                std::slice::from_ref(patient),
                sequence,
                &KnownTransitions::default(),
                RolloutMode::Expected,
                &mut Masks::off(),
                None,
            )?
            .remove(0))
    }

    /// Rollouts of all eight sequences (no < yes, IC most significant).
    pub fn rollout_all(&self, patient: &PatientFeatures) -> Result<Vec<Trajectory>> {
        TreatmentSequence::all()
            .iter()
            .map(|s| self.rollout(patient, s))
            .collect()
    }
}
