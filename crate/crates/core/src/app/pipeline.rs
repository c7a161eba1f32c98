use serde::{Deserialize, Serialize};

use crate::cohort::{
    stratified_split, CohortRecord, FeatureEncoder, Hpv, PatientFeatures, Race, Subsite,
    LYMPH_NODE_REGIONS,
};
use crate::error::{Error, Result};
use crate::explain::BaselinePatient;
use crate::neighbors::{CohortIndex, NeighborConfig};
use crate::policy::{fit_policy, PolicyConfig};
use crate::simulator::{fit_simulator, SimulatorConfig};
use crate::symptoms::{
    fit_symptom_model, generate_symptom_cohort, SymptomCohortRecord, SymptomSyntheticConfig,
    DEFAULT_SYMPTOM_COHORT,
};
use crate::tensor::derive_seed;
use crate::training::TrainConfig;

use super::bundle::{BundleInfo, ModelBundle};

/// Default number of MC-dropout draws per served prediction.
pub const DEFAULT_MC_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub simulator: SimulatorConfig,
    pub policy: PolicyConfig,
    pub symptom_train: TrainConfig,
    pub symptom_cohort_size: usize,
    pub neighbors: NeighborConfig,
    pub mc_samples: usize,
}

impl PipelineConfig {
    /// Narrow networks that train in well under a minute on one core.
    pub fn desk(seed: u64) -> Self {
        PipelineConfig {
            seed,
            simulator: SimulatorConfig::desk(),
            policy: PolicyConfig::desk(),
            symptom_train: TrainConfig::default(),
            symptom_cohort_size: DEFAULT_SYMPTOM_COHORT,
            neighbors: NeighborConfig::default(),
            mc_samples: DEFAULT_MC_SAMPLES,
        }
    }

    /// Full-width architectures.
    pub fn full(seed: u64) -> Self {
        PipelineConfig {
            simulator: SimulatorConfig::default(),
            policy: PolicyConfig::default(),
            ..Self::desk(seed)
        }
    }
}

/// Split, fit every model and assemble a bundle.
///
/// Without a symptom cohort a synthetic one is generated from the seed.
pub fn train_pipeline(
    cohort: &[CohortRecord],
    symptom_cohort: Option<&[SymptomCohortRecord]>,
    cohort_source: &str,
    cfg: &PipelineConfig,
) -> Result<ModelBundle> {
    cfg.neighbors.validate()?;
    if cfg.mc_samples < crate::training::MIN_MC_SAMPLES {
        return Err(Error::Config(format!(
            "mc_samples must be at least {}",
            crate::training::MIN_MC_SAMPLES
        )));
    }
    let seed = cfg.seed;
    let (train, eval) = stratified_split(cohort, seed)?;
    log::info!("training on {} records ({} held out)", train.len(), eval.len());
    let encoder = FeatureEncoder::fit(&train);
    let simulator = fit_simulator(&train, &encoder, &cfg.simulator, derive_seed(seed, 10))?;
    log::info!("simulator fitted");
    let (policy, policy_report) =
        fit_policy(&train, &encoder, &simulator, &cfg.policy, derive_seed(seed, 11))?;
    log::info!(
        "policy fitted in {} epochs",
        policy_report.fit.epochs_run
    );
    let baseline = BaselinePatient::from_cohort(&train)?;
    let index = CohortIndex::build(&policy, &train)?;
    let generated;
    let symptom_cohort = match symptom_cohort {
        Some(s) => s,
        None => {
            generated = generate_symptom_cohort(
                derive_seed(seed, 12),
                cfg.symptom_cohort_size,
                &SymptomSyntheticConfig::default(),
            )?;
            &generated
        }
    };
    let symptoms = fit_symptom_model(symptom_cohort, &cfg.symptom_train, derive_seed(seed, 13))?;
    log::info!("symptom model fitted");
    Ok(ModelBundle {
        info: BundleInfo {
            seed,
            cohort_source: cohort_source.to_string(),
            train_size: train.len(),
            eval_size: eval.len(),
            symptom_cohort_size: symptom_cohort.len(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        config: cfg.clone(),
        simulator,
        policy,
        policy_report,
        baseline,
        cohort: train,
        index,
        symptoms,
    })
}

/// Example patient pre-filled in the input form.
pub fn default_patient() -> PatientFeatures {
    let mut ln = [false; LYMPH_NODE_REGIONS];
    ln[1] = true;
    ln[2] = true;
    PatientFeatures {
        age: 58.0,
        is_male: true,
        race: Race::White,
        hpv: Hpv::Positive,
        smoking_status: 1,
        pack_years: 15.0,
        lymph_node_regions: ln,
        t_stage: 2,
        n_stage: 2,
        ajcc_stage: 3,
        pathological_grade: 2,
        subsite: Subsite::BaseOfTongue,
        bilateral: false,
        total_dose: 70.0,
        dose_fraction: 2.12,
        aspiration_pre: false,
    }
}
