use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cohort::{
    BinaryEndpoint, Endpoint, OutcomeRecord, PatientFeatures, Provenance, Stage, StageContext,
    StageResult, TransitionDist, TreatmentSequence,
};
use crate::error::{Error, Result};
use crate::explain::{
    aggregate_for_waterfall, policy_attributions, AttributionSet, Waterfall,
    DEFAULT_WATERFALL_THRESHOLD,
};
use crate::neighbors::{
    estimate_ate, kaplan_meier, neighbor_treatment_rate, outcome_columns, AteEstimate,
    KaplanMeier, NoveltyRating,
};
use crate::policy::{PolicyOutput, Strategy};
use crate::simulator::{serving_grid, KnownTransitions, RolloutMode};
use crate::symptoms::{predict_trajectories, SymptomFeatures, SymptomPrediction, SymptomTreatment};
use crate::tensor::{det_rng, Masks};
use crate::training::{predict_with_ci, PredictionWithCi, DEFAULT_CI_LEVEL};

use super::bundle::ModelBundle;

pub const RESPONSE_SCHEMA_VERSION: u32 = 1;
/// Path steps for served attributions; keeps the completeness gap near 1e-4.
pub const SERVING_IG_STEPS: usize = 256;

/// Decisions the user pins; unset ones come from the selected policy head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedDecisions {
    #[serde(default)]
    pub ic: Option<bool>,
    #[serde(default)]
    pub cc: Option<bool>,
    #[serde(default)]
    pub nd: Option<bool>,
}

impl FixedDecisions {
    pub fn get(&self, stage: Stage) -> Option<bool> {
        match stage {
            Stage::Ic => self.ic,
            Stage::Cc => self.cc,
            Stage::Nd => self.nd,
        }
    }
}

fn default_strategy() -> Strategy {
    Strategy::Imitation
}

fn default_ci() -> f64 {
    DEFAULT_CI_LEVEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRequest {
    pub patient: PatientFeatures,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub decision: Stage,
    #[serde(default)]
    pub fixed: FixedDecisions,
    /// Known intermediate responses; these replace simulated ones.
    #[serde(default)]
    pub prior: KnownTransitions,
    #[serde(default = "default_ci")]
    pub ci_level: f64,
    /// Seed for MC dropout; the server supplies one when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mc_samples: Option<usize>,
}

impl SimulationRequest {
    pub fn new(patient: PatientFeatures, decision: Stage, strategy: Strategy) -> Self {
        SimulationRequest {
            patient,
            strategy,
            decision,
            fixed: FixedDecisions::default(),
            prior: KnownTransitions::default(),
            ci_level: DEFAULT_CI_LEVEL,
            seed: None,
            mc_samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveWithCi {
    pub point: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCurves {
    /// Indexed by endpoint (OS, LRC, FDM).
    pub treated: Vec<CurveWithCi>,
    pub untreated: Vec<CurveWithCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborCurves {
    /// `None` for an empty matched group.
    pub treated: Vec<Option<KaplanMeier>>,
    pub untreated: Vec<Option<KaplanMeier>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSection {
    pub endpoints: Vec<String>,
    pub grid: Vec<f64>,
    pub twin: BranchCurves,
    pub neighbors: NeighborCurves,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub outcome: String,
    pub twin_treated: PredictionWithCi,
    pub twin_untreated: PredictionWithCi,
    pub neighbor_treated: Option<f64>,
    pub neighbor_untreated: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSummary {
    pub id: usize,
    pub features: PatientFeatures,
    pub sequence: TreatmentSequence,
    pub outcome: OutcomeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborSection {
    /// Share of the nearest neighbors who received the decision under study.
    pub treatment_rate: f64,
    pub nearest: Vec<NeighborSummary>,
    pub ate: AteEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTransitions {
    pub after_ic: TransitionDist,
    pub after_cc: TransitionDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_ms: f64,
    pub sections_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResponse {
    pub schema_version: u32,
    pub decision: Stage,
    pub strategy: Strategy,
    pub policy: PolicyOutput,
    /// Policy probability ≥ 0.5.
    pub recommended: bool,
    /// The user's fixed value for the decision under study, else the recommendation.
    pub selected: bool,
    pub treated_sequence: TreatmentSequence,
    pub untreated_sequence: TreatmentSequence,
    pub attributions: AttributionSet,
    pub waterfall: Waterfall,
    pub novelty: NoveltyRating,
    pub neighbors: NeighborSection,
    pub survival: SurvivalSection,
    pub outcomes: Vec<OutcomeRow>,
    pub transitions: [BranchTransitions; 2],
    pub symptoms: SymptomPrediction,
    pub seed: u64,
    pub mc_samples: usize,
    pub ci_level: f64,
    pub timing: Timing,
}

struct Resolved {
    sequence: TreatmentSequence,
    contexts: [StageContext; 3],
    transitions: [TransitionDist; 2],
}

/// Walk the stages, taking fixed values, then the forced branch value, then
/// the policy head, and carrying the expected transitions forward.
fn resolve(
    bundle: &ModelBundle,
    req: &SimulationRequest,
    forced: bool,
) -> Result<Resolved> {
    let sim = &bundle.simulator;
    let mut ctx = StageContext::at_ic();
    let mut contexts = [ctx; 3];
    let mut decisions = [false; 3];
    let mut provenance = [Provenance::PolicyDecided; 3];
    let mut transitions = [TransitionDist::stable(); 2];
    for stage in Stage::ALL {
        let i = stage.index();
        contexts[i] = ctx;
        let (d, p) = if stage == req.decision {
            (forced, Provenance::UserFixed)
        } else if let Some(v) = req.fixed.get(stage) {
            (v, Provenance::UserFixed)
        } else {
            let out = bundle
                .policy
                .predict(&sim.encoder, &req.patient, &ctx, req.strategy)?;
            (out.probability >= 0.5, Provenance::PolicyDecided)
        };
        decisions[i] = d;
        provenance[i] = p;
        let (known, model) = match stage {
            Stage::Ic => (req.prior.after_ic, &sim.post_ic),
            Stage::Cc => (req.prior.after_cc, &sim.post_cc),
            Stage::Nd => break,
        };
        let dist = match known {
            Some(s) => (&s).into(),
            None => model.predict(&sim.encoder, &req.patient, &ctx, d)?,
        };
        transitions[i] = dist;
        let result = Some(StageResult {
            decision: d,
            transition: dist,
        });
        ctx = match stage {
            Stage::Ic => StageContext {
                stage: Stage::Cc,
                after_ic: result,
                after_cc: None,
            },
            _ => StageContext {
                stage: Stage::Nd,
                after_ic: ctx.after_ic,
                after_cc: result,
            },
        };
    }
    let mut sequence = TreatmentSequence::new(decisions[0], decisions[1], decisions[2]);
    sequence.provenance = provenance;
    Ok(Resolved {
        sequence,
        contexts,
        transitions,
    })
}

const STATIC_OUTCOMES: [&str; 2] = ["feeding_tube", "aspiration_post"];

/// MC-dropout summaries: [ft, aspiration, then 3 survival curves on the grid].
fn twin_with_ci(
    bundle: &ModelBundle,
    req: &SimulationRequest,
    sequence: &TreatmentSequence,
    grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<PredictionWithCi>> {
    let mut rng = det_rng(seed);
    predict_with_ci(samples, req.ci_level, &mut rng, |rng| {
        let mut masks = Masks::on(rng);
        let t = bundle
            .simulator
            .rollout_batch(
                std::slice::from_ref(&req.patient),
                sequence,
                &req.prior,
                RolloutMode::Expected,
                &mut masks,
                None,
            )?
            .remove(0);
        let mut v = vec![t.static_risk.ft, t.static_risk.aspiration_post];
        for m in &t.survival {
            v.extend(m.curve_from_zero(grid)?);
        }
        Ok(v)
    })
}

fn curves(summary: &[PredictionWithCi], grid_len: usize) -> Vec<CurveWithCi> {
    (0..3)
        .map(|e| {
            let s = &summary[2 + e * grid_len..2 + (e + 1) * grid_len];
            CurveWithCi {
                point: s.iter().map(|p| p.point).collect(),
                lower: s.iter().map(|p| p.lower).collect(),
                upper: s.iter().map(|p| p.upper).collect(),
            }
        })
        .collect()
}

fn validate(req: &SimulationRequest) -> Result<()> {
    let errors = req.patient.validate();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    if !(req.ci_level > 0.0 && req.ci_level < 1.0) {
        return Err(Error::Config(format!("ci_level {} outside (0, 1)", req.ci_level)));
    }
    Ok(())
}

/// Everything the decision-support view shows for one patient and decision.
pub fn handle_simulate(
    req: &SimulationRequest,
    bundle: &ModelBundle,
    fallback_seed: u64,
) -> Result<SimulationResponse> {
    let start = Instant::now();
    let mut sections = BTreeMap::new();
    let mut lap = {
        let mut last = Instant::now();
        move |name: &str, sections: &mut BTreeMap<String, f64>| {
            let now = Instant::now();
            sections.insert(name.to_string(), (now - last).as_secs_f64() * 1e3);
            last = now;
        }
    };
    validate(req)?;
    let seed = req.seed.unwrap_or(fallback_seed);
    let samples = req.mc_samples.unwrap_or(bundle.config.mc_samples);
    let stage = req.decision;
    let strategy = req.strategy;

    let treated = resolve(bundle, req, true)?;
    let untreated = resolve(bundle, req, false)?;
    let ctx = treated.contexts[stage.index()];
    let encoder = &bundle.simulator.encoder;
    let policy = bundle.policy.predict(encoder, &req.patient, &ctx, strategy)?;
    let recommended = policy.probability >= 0.5;
    let selected = req.fixed.get(stage).unwrap_or(recommended);
    lap("policy", &mut sections);

    let attributions = policy_attributions(
        &bundle.policy,
        encoder,
        &bundle.baseline,
        &req.patient,
        &ctx,
        strategy,
        SERVING_IG_STEPS,
    )?;
    let waterfall = aggregate_for_waterfall(&attributions, DEFAULT_WATERFALL_THRESHOLD);
    lap("attributions", &mut sections);

    let novelty = bundle.index.novelty[stage.index()][strategy.index()].rate(&policy.embedding)?;
    let si = bundle.index.stage(stage);
    let embeddings = &si.embeddings[strategy.index()];
    let ncfg = &bundle.config.neighbors;
    let (treatment_rate, nearest_ids) =
        neighbor_treatment_rate(&policy.embedding, embeddings, &si.treated, ncfg.n)?;
    let propensity = if strategy == Strategy::Imitation {
        policy.probability
    } else {
        bundle
            .policy
            .predict(encoder, &req.patient, &ctx, Strategy::Imitation)?
            .probability
    };
    let ate_endpoints = [
        BinaryEndpoint::FeedingTube,
        BinaryEndpoint::AspirationPost,
        BinaryEndpoint::Event(Endpoint::Os),
        BinaryEndpoint::Event(Endpoint::Lrc),
        BinaryEndpoint::Event(Endpoint::Fdm),
    ];
    let (names, columns) = outcome_columns(&bundle.cohort, &ate_endpoints);
    // Guard against a propensity saturating to exactly 0 or 1 in floating point.
    let propensity = propensity.clamp(1e-12, 1.0 - 1e-12);
    let ate = estimate_ate(
        &policy.embedding,
        propensity,
        embeddings,
        &si.propensities,
        &si.treated,
        &names,
        &columns,
        ncfg,
    )?;
    let nearest = nearest_ids
        .iter()
        .map(|&id| {
            let r = &bundle.cohort[id];
            NeighborSummary {
                id,
                features: r.features.clone(),
                sequence: r.sequence,
                outcome: r.outcome.clone(),
            }
        })
        .collect();
    lap("neighbors", &mut sections);

    let grid = serving_grid();
    let t_ci = twin_with_ci(bundle, req, &treated.sequence, &grid, samples, seed)?;
    let u_ci = twin_with_ci(bundle, req, &untreated.sequence, &grid, samples, seed ^ 0x9E37_79B9)?;
    let km = |ids: &[usize]| -> Result<Vec<Option<KaplanMeier>>> {
        Endpoint::ALL
            .iter()
            .map(|&e| {
                if ids.is_empty() {
                    return Ok(None);
                }
                let data: Vec<_> = ids.iter().map(|&i| bundle.cohort[i].outcome.endpoint(e)).collect();
                kaplan_meier(&data, &grid, req.ci_level).map(Some)
            })
            .collect()
    };
    let survival = SurvivalSection {
        endpoints: Endpoint::ALL.iter().map(|e| e.label().to_string()).collect(),
        twin: BranchCurves {
            treated: curves(&t_ci, grid.len()),
            untreated: curves(&u_ci, grid.len()),
        },
        neighbors: NeighborCurves {
            treated: km(&ate.treated_ids)?,
            untreated: km(&ate.untreated_ids)?,
        },
        grid,
    };
    let outcomes = STATIC_OUTCOMES
        .iter()
        .enumerate()
        .map(|(k, name)| OutcomeRow {
            outcome: name.to_string(),
            twin_treated: t_ci[k],
            twin_untreated: u_ci[k],
            neighbor_treated: ate.treated_rates[k],
            neighbor_untreated: ate.untreated_rates[k],
        })
        .collect();
    lap("twin", &mut sections);

    let split = if stage == Stage::Ic {
        SymptomTreatment::Ic
    } else {
        SymptomTreatment::Cc
    };
    let symptoms = predict_trajectories(
        &bundle.symptoms,
        &SymptomFeatures::from_patient(&req.patient, treated.sequence.ic, treated.sequence.cc),
        split,
    )?;
    lap("symptoms", &mut sections);

    Ok(SimulationResponse {
        schema_version: RESPONSE_SCHEMA_VERSION,
        decision: stage,
        strategy,
        policy,
        recommended,
        selected,
        treated_sequence: treated.sequence,
        untreated_sequence: untreated.sequence,
        attributions,
        waterfall,
        novelty,
        neighbors: NeighborSection {
            treatment_rate,
            nearest,
            ate,
        },
        survival,
        outcomes,
        transitions: [
            BranchTransitions {
                after_ic: treated.transitions[0],
                after_cc: treated.transitions[1],
            },
            BranchTransitions {
                after_ic: untreated.transitions[0],
                after_cc: untreated.transitions[1],
            },
        ],
        symptoms,
        seed,
        mc_samples: samples,
        ci_level: req.ci_level,
        timing: Timing {
            total_ms: start.elapsed().as_secs_f64() * 1e3,
            sections_ms: sections,
        },
    })
}
