use serde::{Deserialize, Serialize};

use crate::cohort::{PatientFeatures, TreatmentSequence, DLT_KINDS};
use crate::error::{Error, Result};
use crate::simulator::{Simulator, Trajectory};

/// Horizon for the "event within four years" binary outcomes.
pub const BINARY_EVENT_HORIZON: f64 = 48.0;

/// Weights of the binary outcomes; each term is the probability of the bad event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryOutcomeWeights {
    pub feeding_tube: f64,
    pub aspiration: f64,
    pub dlt_after_ic: [f64; DLT_KINDS],
    pub dlt_after_cc: [f64; DLT_KINDS],
    /// Death, locoregional failure, distant failure by 48 months.
    pub event_by_48_months: [f64; 3],
}

impl BinaryOutcomeWeights {
    pub fn uniform(w: f64) -> Self {
        BinaryOutcomeWeights {
            feeding_tube: w,
            aspiration: w,
            dlt_after_ic: [w; DLT_KINDS],
            dlt_after_cc: [w; DLT_KINDS],
            event_by_48_months: [w; 3],
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        [self.feeding_tube, self.aspiration]
            .into_iter()
            .chain(self.dlt_after_ic)
            .chain(self.dlt_after_cc)
            .chain(self.event_by_48_months)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalObjectiveWeights {
    pub w_tox: f64,
    pub w_s: f64,
    pub binary: BinaryOutcomeWeights,
    /// Per endpoint (OS, LRC, FDM) weight on 1 / median time.
    pub temporal: [f64; 3],
}

impl Default for OptimalObjectiveWeights {
    fn default() -> Self {
        OptimalObjectiveWeights {
            w_tox: 1.0,
            w_s: 1.0,
            binary: BinaryOutcomeWeights::uniform(1.0),
            temporal: [1.0; 3],
        }
    }
}

impl OptimalObjectiveWeights {
    /// Only the feeding-tube term is active.
    pub fn feeding_tube_only() -> Self {
        let mut binary = BinaryOutcomeWeights::uniform(0.0);
        binary.feeding_tube = 1.0;
        OptimalObjectiveWeights {
            w_tox: 1.0,
            w_s: 0.0,
            binary,
            temporal: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all: Vec<f64> = [self.w_tox, self.w_s]
            .into_iter()
            .chain(self.binary.values())
            .chain(self.temporal)
            .collect();
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "objective weights must be finite and non-negative".into(),
            ));
        }
        let tox = self.w_tox > 0.0 && self.binary.values().any(|w| w > 0.0);
        let surv = self.w_s > 0.0 && self.temporal.iter().any(|&w| w > 0.0);
        if !tox && !surv {
            return Err(Error::Config(
                "objective weights leave every term at zero".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that can roll a patient through a treatment sequence.
pub trait SequenceSimulator {
    fn simulate(
        &self,
        patient: &PatientFeatures,
        sequence: &TreatmentSequence,
    ) -> Result<Trajectory>;

    fn simulate_batch(
        &self,
        patients: &[PatientFeatures],
        sequence: &TreatmentSequence,
    ) -> Result<Vec<Trajectory>> {
        patients
            .iter()
            .map(|p| self.simulate(p, sequence))
            .collect()
    }
}

impl SequenceSimulator for Simulator {
    fn simulate(
        &self,
        patient: &PatientFeatures,
        sequence: &TreatmentSequence,
    ) -> Result<Trajectory> {
        self.rollout(patient, sequence)
    }

    fn simulate_batch(
        &self,
        patients: &[PatientFeatures],
        sequence: &TreatmentSequence,
    ) -> Result<Vec<Trajectory>> {
        self.rollout_batch(
            patients,
            sequence,
            &Default::default(),
            crate::simulator::RolloutMode::Expected,
            &mut crate::tensor::Masks::off(),
            None,
        )
    }
}

/// L = w_tox Σ w_z P(z) + w_s Σ w_o / median(o).
pub fn objective(t: &Trajectory, w: &OptimalObjectiveWeights) -> Result<f64> {
    let b = &w.binary;
    let mut tox = b.feeding_tube * t.static_risk.ft + b.aspiration * t.static_risk.aspiration_post;
    for k in 0..DLT_KINDS {
        tox += b.dlt_after_ic[k] * t.after_ic.dlt[k] + b.dlt_after_cc[k] * t.after_cc.dlt[k];
    }
    let mut surv = 0.0;
    for (e, m) in t.survival.iter().enumerate() {
        if b.event_by_48_months[e] > 0.0 {
            tox += b.event_by_48_months[e] * (1.0 - m.survival(BINARY_EVENT_HORIZON)?);
        }
        if w.temporal[e] > 0.0 {
            surv += w.temporal[e] / m.median();
        }
    }
    Ok(w.w_tox * tox + w.w_s * surv)
}

/// Sequences in tie-break order: fewer treatments first, then no < yes by stage.
pub fn tie_break_order() -> [TreatmentSequence; 8] {
    let mut all = TreatmentSequence::all();
    all.sort_by_key(|s| (s.treatment_count(), s.code()));
    all
}

/// Objective for every sequence and the minimizing one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalChoice {
    pub sequence: TreatmentSequence,
    /// Indexed by [`TreatmentSequence::code`].
    pub objectives: [f64; 8],
}

fn choose(objectives: [f64; 8]) -> Result<TreatmentSequence> {
    for s in TreatmentSequence::all() {
        if !objectives[s.code()].is_finite() {
            return Err(Error::NonFinite(format!(
                "optimal objective for sequence {}",
                s.label()
            )));
        }
    }
    let mut best = tie_break_order()[0];
    for s in tie_break_order() {
        if objectives[s.code()] < objectives[best.code()] {
            best = s;
        }
    }
    Ok(best)
}

/// Optimal sequences for a batch of patients by exhaustive expected rollout.
pub fn optimal_choices(
    sim: &dyn SequenceSimulator,
    patients: &[PatientFeatures],
    weights: &OptimalObjectiveWeights,
) -> Result<Vec<OptimalChoice>> {
    weights.validate()?;
    let mut table = vec![[0.0; 8]; patients.len()];
    for s in TreatmentSequence::all() {
        let ts = sim.simulate_batch(patients, &s)?;
        for (row, t) in table.iter_mut().zip(&ts) {
            row[s.code()] = objective(t, weights)?;
        }
    }
    table
        .into_iter()
        .map(|objectives| {
            Ok(OptimalChoice {
                sequence: choose(objectives)?,
                objectives,
            })
        })
        .collect()
}

pub fn compute_optimal_labels(
    sim: &dyn SequenceSimulator,
    patient: &PatientFeatures,
    weights: &OptimalObjectiveWeights,
) -> Result<TreatmentSequence> {
    Ok(optimal_choices(sim, std::slice::from_ref(patient), weights)?[0].sequence)
}
