//! Integrated-gradients attribution against a default patient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median};

use crate::cohort::{
    feature_groups, CohortRecord, PatientFeatures, Stage, StageContext, StageResult,
    TransitionDist, AJCC_RANGE, BASE_LEN, FULL_LEN, GRADE_RANGE, LYMPH_NODE_REGIONS, N_STAGE_RANGE, SMOKING_RANGE,
    T_STAGE_RANGE,
};
use crate::error::{Error, Result};
use crate::policy::{PolicyModel, Strategy};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

pub const MIN_IG_STEPS: usize = 32;
pub const DEFAULT_IG_STEPS: usize = 64;
/// Contributions smaller than this (probability units) go to "other".
pub const DEFAULT_WATERFALL_THRESHOLD: f64 = 0.01;
pub const OTHER_LABEL: &str = "other";

/// Reference patient for attribution.
///
/// Ordinals and binary indicators take their lowest value, categoricals the
/// training mode, continuous values the training median; gender is male.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePatient {
    pub features: PatientFeatures,
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    Data::new(values.collect::<Vec<_>>()).median()
}

fn mode<T: Ord + Copy>(values: impl Iterator<Item = T>) -> T {
    let mut counts = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0usize) += 1;
    }
    // Ties resolve to the smallest value for determinism.
    let best = counts.values().copied().max().unwrap_or(0);
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(v, _)| v)
        .expect("non-empty cohort")
}

impl BaselinePatient {
    pub fn from_cohort(train: &[CohortRecord]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config(
                "baseline patient needs a non-empty training cohort".into(),
            ));
        }
        let f = || train.iter().map(|r| &r.features);
        Ok(BaselinePatient {
            features: PatientFeatures {
                age: median(f().map(|p| p.age)),
                is_male: true,
                race: mode(f().map(|p| p.race)),
                hpv: mode(f().map(|p| p.hpv)),
                smoking_status: SMOKING_RANGE.0,
                pack_years: median(f().map(|p| p.pack_years)),
                lymph_node_regions: [false; LYMPH_NODE_REGIONS],
                t_stage: T_STAGE_RANGE.0,
                n_stage: N_STAGE_RANGE.0,
                ajcc_stage: AJCC_RANGE.0,
                pathological_grade: GRADE_RANGE.0,
                subsite: mode(f().map(|p| p.subsite)),
                bilateral: false,
                total_dose: median(f().map(|p| p.total_dose)),
                dose_fraction: median(f().map(|p| p.dose_fraction)),
                aspiration_pre: false,
            },
        })
    }

    /// Context at `stage` with every earlier decision "no" and a stable response.
    pub fn context(stage: Stage) -> StageContext {
        let none = Some(StageResult {
            decision: false,
            transition: TransitionDist::stable(),
        });
        StageContext {
            stage,
            after_ic: (stage != Stage::Ic).then_some(none).flatten(),
            after_cc: (stage == Stage::Nd).then_some(none).flatten(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub feature: String,
    /// Probability units.
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSet {
    pub attributions: Vec<Attribution>,
    pub baseline_probability: f64,
    pub final_probability: f64,
    pub threshold: f64,
    pub steps: usize,
}

impl AttributionSet {
    pub fn total(&self) -> f64 {
        self.attributions.iter().map(|a| a.contribution).sum()
    }

    /// |Σ attributions − (f(x) − f(x'))|
    pub fn completeness_residual(&self) -> f64 {
        (self.total() - (self.final_probability - self.baseline_probability)).abs()
    }

    pub fn get(&self, feature: &str) -> Option<f64> {
        self.attributions
            .iter()
            .find(|a| a.feature == feature)
            .map(|a| a.contribution)
    }
}

/// Per-slot integrated gradients with the midpoint rule.
///
/// `f` maps an `n × d` input node to an `n × 1` output and must act on each
/// row independently. Returns the slot attributions and f(x), f(x').
pub fn integrated_gradients_slots(
    store: &ParamStore,
    f: &dyn Fn(&mut Graph<'_>, NodeId) -> Result<NodeId>,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<(Vec<f64>, f64, f64)> {
    if steps < MIN_IG_STEPS {
        return Err(Error::Config(format!(
            "integrated gradients needs at least {MIN_IG_STEPS} steps, got {steps}"
        )));
    }
    if x.len() != baseline.len() {
        return Err(Error::Config(format!(
            "input has {} slots but baseline has {}",
            x.len(),
            baseline.len()
        )));
    }
    let d = x.len();
    let mut rows = Vec::with_capacity((steps + 2) * d);
    for j in 0..steps {
        let a = (j as f64 + 0.5) / steps as f64;
        rows.extend(baseline.iter().zip(x).map(|(b, xi)| b + a * (xi - b)));
    }
    rows.extend_from_slice(x);
    rows.extend_from_slice(baseline);
    let mut g = Graph::new(store);
    let input = g.input_with_grad("ig_path", Tensor::matrix(steps + 2, d, rows)?);
    let out = f(&mut g, input)?;
    let path_rows: Vec<usize> = (0..steps).collect();
    let path = g.gather_rows(out, &path_rows)?;
    let total = g.sum_all(path);
    let (fx, fb) = {
        let v = g.value(out);
        (v.get(steps, 0), v.get(steps + 1, 0))
    };
    let grads = g.backward_scalar(total)?;
    let gx = grads
        .node(input)
        .ok_or_else(|| Error::Usage("attribution output does not depend on the input".into()))?;
    let mut attr = vec![0.0; d];
    for j in 0..steps {
        for (i, a) in attr.iter_mut().enumerate() {
            *a += gx.get(j, i);
        }
    }
    for (i, a) in attr.iter_mut().enumerate() {
        *a *= (x[i] - baseline[i]) / steps as f64;
    }
    Ok((attr, fx, fb))
}

/// Slot attributions summed into named features (one-hot groups together).
pub fn group_attributions(slots: &[f64]) -> Result<Vec<Attribution>> {
    if slots.len() != BASE_LEN && slots.len() != FULL_LEN {
        return Err(Error::Config(format!(
            "cannot name {} attribution slots; expected {BASE_LEN} or {FULL_LEN}",
            slots.len()
        )));
    }
    Ok(feature_groups(slots.len())
        .into_iter()
        .map(|g| Attribution {
            contribution: slots[g.slots.clone()].iter().sum(),
            feature: g.name,
        })
        .collect())
}

pub fn integrated_gradients(
    store: &ParamStore,
    f: &dyn Fn(&mut Graph<'_>, NodeId) -> Result<NodeId>,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
) -> Result<AttributionSet> {
    let (slots, fx, fb) = integrated_gradients_slots(store, f, x, baseline, steps)?;
    Ok(AttributionSet {
        attributions: group_attributions(&slots)?,
        baseline_probability: fb,
        final_probability: fx,
        threshold: DEFAULT_WATERFALL_THRESHOLD,
        steps,
    })
}

/// Attribution of one policy head's treatment probability.
pub fn policy_attributions(
    model: &PolicyModel,
    encoder: &crate::cohort::FeatureEncoder,
    baseline: &BaselinePatient,
    patient: &PatientFeatures,
    context: &StageContext,
    strategy: Strategy,
    steps: usize,
) -> Result<AttributionSet> {
    crate::policy::check_context(context)?;
    if !model.trained {
        return Err(Error::Usage("policy model used before training".into()));
    }
    let x = encoder.encode(patient, Some(context))?;
    let b = encoder.encode(
        &baseline.features,
        Some(&BaselinePatient::context(context.stage)),
    )?;
    let stage = context.stage;
    let f = |g: &mut Graph<'_>, input: NodeId| model.probability_node(g, input, stage, strategy);
    integrated_gradients(&model.store, &f, &x, &b, steps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterfallRow {
    pub label: String,
    pub value: f64,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waterfall {
    pub baseline: f64,
    pub rows: Vec<WaterfallRow>,
    /// End of the last row: baseline + Σ contributions.
    pub end: f64,
}

/// Rows at or above `threshold` in descending signed order, then "other".
pub fn aggregate_for_waterfall(set: &AttributionSet, threshold: f64) -> Waterfall {
    let mut kept: Vec<(String, f64)> = Vec::new();
    let mut other = 0.0;
    let mut any_other = false;
    for a in &set.attributions {
        if a.contribution.abs() < threshold {
            other += a.contribution;
            any_other = true;
        } else {
            kept.push((a.feature.clone(), a.contribution));
        }
    }
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if any_other {
        kept.push((OTHER_LABEL.to_string(), other));
    }
    let mut pos = set.baseline_probability;
    let rows = kept
        .into_iter()
        .map(|(label, value)| {
            let start = pos;
            pos += value;
            WaterfallRow {
                label,
                value,
                start,
                end: pos,
            }
        })
        .collect();
    Waterfall {
        baseline: set.baseline_probability,
        rows,
        end: pos,
    }
}
