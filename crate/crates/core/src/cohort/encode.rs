//! Fixed-layout numeric encoding of patient state.
//!
//! Layout of the baseline block ([`BASE_LEN`] slots):
//!
//! | slots  | field                                          |
//! |--------|------------------------------------------------|
//! | 0      | age (z-score)                                  |
//! | 1      | male                                           |
//! | 2..5   | race: black, hispanic, other (white = zeros)   |
//! | 5..7   | hpv: positive, unknown (negative = zeros)      |
//! | 7      | smoking status / 2                             |
//! | 8      | pack-years (z-score)                           |
//! | 9..23  | lymph-node regions 1..14                       |
//! | 23..27 | T, N, AJCC, grade scaled to [0, 1]             |
//! | 27..33 | subsite one-hot                                |
//! | 33     | bilateral                                      |
//! | 34, 35 | total dose, dose per fraction (z-scores)       |
//! | 36     | aspiration before therapy                      |
//!
//! The stage context block ([`CONTEXT_LEN`] slots) holds, for IC then CC:
//! decision, primary-response one-hot (4), nodal-response one-hot (4) and
//! the five DLT flags. Unreached stages are all zeros. Probabilities may be
//! used in place of one-hot values when rolling out in expected mode.

use serde::{Deserialize, Serialize};

use super::types::*;
use crate::error::{Error, Result};

pub const BASE_LEN: usize = 37;
pub const STAGE_BLOCK_LEN: usize = 1 + 2 * RESPONSE_LEVELS + DLT_KINDS;
pub const CONTEXT_LEN: usize = 2 * STAGE_BLOCK_LEN;
pub const FULL_LEN: usize = BASE_LEN + CONTEXT_LEN;

pub const SLOT_AGE: usize = 0;
pub const SLOT_MALE: usize = 1;
pub const SLOT_RACE: usize = 2;
pub const SLOT_HPV: usize = 5;
pub const SLOT_SMOKING: usize = 7;
pub const SLOT_PACK_YEARS: usize = 8;
pub const SLOT_LN: usize = 9;
pub const SLOT_T: usize = 23;
pub const SLOT_N: usize = 24;
pub const SLOT_AJCC: usize = 25;
pub const SLOT_GRADE: usize = 26;
pub const SLOT_SUBSITE: usize = 27;
pub const SLOT_BILATERAL: usize = 33;
pub const SLOT_DOSE: usize = 34;
pub const SLOT_FRACTION: usize = 35;
pub const SLOT_ASP_PRE: usize = 36;

/// Per-stage response distribution (one-hot for observed states).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionDist {
    pub primary: [f64; RESPONSE_LEVELS],
    pub nodal: [f64; RESPONSE_LEVELS],
    pub dlt: [f64; DLT_KINDS],
}

impl From<&TransitionState> for TransitionDist {
    fn from(t: &TransitionState) -> Self {
        let mut primary = [0.0; RESPONSE_LEVELS];
        primary[t.primary_response as usize] = 1.0;
        let mut nodal = [0.0; RESPONSE_LEVELS];
        nodal[t.nodal_response as usize] = 1.0;
        TransitionDist {
            primary,
            nodal,
            dlt: t.dlt.map(|d| if d { 1.0 } else { 0.0 }),
        }
    }
}

impl TransitionDist {
    pub fn stable() -> Self {
        (&TransitionState::stable()).into()
    }

    /// Most likely state (argmax per head, DLT at 0.5).
    pub fn mode(&self) -> TransitionState {
        let argmax = |p: &[f64; RESPONSE_LEVELS]| {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0 as u8
        };
        TransitionState {
            primary_response: argmax(&self.primary),
            nodal_response: argmax(&self.nodal),
            dlt: self.dlt.map(|p| p >= 0.5),
        }
    }
}

/// Decision and resulting transition for one completed stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub decision: bool,
    pub transition: TransitionDist,
}

/// Patient state when a decision is being made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageContext {
    pub stage: Stage,
    pub after_ic: Option<StageResult>,
    pub after_cc: Option<StageResult>,
}

impl StageContext {
    pub fn at_ic() -> Self {
        StageContext {
            stage: Stage::Ic,
            after_ic: None,
            after_cc: None,
        }
    }

    /// Context before `stage` from ground-truth record data.
    pub fn from_record(record: &CohortRecord, stage: Stage) -> Self {
        let ic = StageResult {
            decision: record.sequence.ic,
            transition: (&record.after_ic).into(),
        };
        let cc = StageResult {
            decision: record.sequence.cc,
            transition: (&record.after_cc).into(),
        };
        match stage {
            Stage::Ic => Self::at_ic(),
            Stage::Cc => StageContext {
                stage,
                after_ic: Some(ic),
                after_cc: None,
            },
            Stage::Nd => StageContext {
                stage,
                after_ic: Some(ic),
                after_cc: Some(cc),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        MeanStd { mean, std }
    }

    fn z(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Continuous-feature normalization frozen from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub age: MeanStd,
    pub pack_years: MeanStd,
    pub total_dose: MeanStd,
    pub dose_fraction: MeanStd,
}

impl NormalizationStats {
    pub fn fit(records: &[CohortRecord]) -> Self {
        NormalizationStats {
            age: MeanStd::fit(records.iter().map(|r| r.features.age)),
            pack_years: MeanStd::fit(records.iter().map(|r| r.features.pack_years)),
            total_dose: MeanStd::fit(records.iter().map(|r| r.features.total_dose)),
            dose_fraction: MeanStd::fit(records.iter().map(|r| r.features.dose_fraction)),
        }
    }
}

fn scaled(v: u8, (lo, hi): (u8, u8)) -> f64 {
    (v as f64 - lo as f64) / (hi - lo) as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    stats: Option<NormalizationStats>,
}

impl FeatureEncoder {
    pub fn unfitted() -> Self {
        FeatureEncoder { stats: None }
    }

    pub fn fit(train: &[CohortRecord]) -> Self {
        FeatureEncoder {
            stats: Some(NormalizationStats::fit(train)),
        }
    }

    pub fn with_stats(stats: NormalizationStats) -> Self {
        FeatureEncoder { stats: Some(stats) }
    }

    pub fn stats(&self) -> Option<&NormalizationStats> {
        self.stats.as_ref()
    }

    /// Baseline block, plus the context block when `context` is given.
    pub fn encode(&self, p: &PatientFeatures, context: Option<&StageContext>) -> Result<Vec<f64>> {
        let stats = self.stats.as_ref().ok_or_else(|| {
            Error::Usage("feature encoder used before normalization statistics were fitted".into())
        })?;
        let mut v = vec![
            0.0;
            if context.is_some() {
                FULL_LEN
            } else {
                BASE_LEN
            }
        ];
        v[SLOT_AGE] = stats.age.z(p.age);
        v[SLOT_MALE] = p.is_male as u8 as f64;
        match p.race {
            Race::White => {}
            Race::Black => v[SLOT_RACE] = 1.0,
            Race::Hispanic => v[SLOT_RACE + 1] = 1.0,
            Race::Other => v[SLOT_RACE + 2] = 1.0,
        }
        match p.hpv {
            Hpv::Negative => {}
            Hpv::Positive => v[SLOT_HPV] = 1.0,
            Hpv::Unknown => v[SLOT_HPV + 1] = 1.0,
        }
        v[SLOT_SMOKING] = scaled(p.smoking_status, SMOKING_RANGE);
        v[SLOT_PACK_YEARS] = stats.pack_years.z(p.pack_years);
        for (i, &ln) in p.lymph_node_regions.iter().enumerate() {
            v[SLOT_LN + i] = ln as u8 as f64;
        }
        v[SLOT_T] = scaled(p.t_stage, T_STAGE_RANGE);
        v[SLOT_N] = scaled(p.n_stage, N_STAGE_RANGE);
        v[SLOT_AJCC] = scaled(p.ajcc_stage, AJCC_RANGE);
        v[SLOT_GRADE] = scaled(p.pathological_grade, GRADE_RANGE);
        v[SLOT_SUBSITE + p.subsite.index()] = 1.0;
        v[SLOT_BILATERAL] = p.bilateral as u8 as f64;
        v[SLOT_DOSE] = stats.total_dose.z(p.total_dose);
        v[SLOT_FRACTION] = stats.dose_fraction.z(p.dose_fraction);
        v[SLOT_ASP_PRE] = p.aspiration_pre as u8 as f64;
        if let Some(ctx) = context {
            for (block, result) in [ctx.after_ic, ctx.after_cc].iter().enumerate() {
                if let Some(r) = result {
                    write_stage_block(&mut v[BASE_LEN + block * STAGE_BLOCK_LEN..], r);
                }
            }
        }
        Ok(v)
    }
}

fn write_stage_block(out: &mut [f64], r: &StageResult) {
    out[0] = r.decision as u8 as f64;
    out[1..5].copy_from_slice(&r.transition.primary);
    out[5..9].copy_from_slice(&r.transition.nodal);
    out[9..14].copy_from_slice(&r.transition.dlt);
}

/// A named feature and the encoded slots that make it up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub name: String,
    pub slots: std::ops::Range<usize>,
}

/// Named feature groups covering the first `len` slots (`BASE_LEN` or `FULL_LEN`).
pub fn feature_groups(len: usize) -> Vec<FeatureGroup> {
    let mut groups = Vec::new();
    let mut push = |name: String, start: usize, end: usize| {
        groups.push(FeatureGroup {
            name,
            slots: start..end,
        })
    };
    push("age".into(), SLOT_AGE, SLOT_AGE + 1);
    push("gender".into(), SLOT_MALE, SLOT_MALE + 1);
    push("race".into(), SLOT_RACE, SLOT_RACE + 3);
    push("hpv".into(), SLOT_HPV, SLOT_HPV + 2);
    push("smoking".into(), SLOT_SMOKING, SLOT_SMOKING + 1);
    push("pack_years".into(), SLOT_PACK_YEARS, SLOT_PACK_YEARS + 1);
    for i in 0..LYMPH_NODE_REGIONS {
        push(format!("ln_{:02}", i + 1), SLOT_LN + i, SLOT_LN + i + 1);
    }
    push("t_stage".into(), SLOT_T, SLOT_T + 1);
    push("n_stage".into(), SLOT_N, SLOT_N + 1);
    push("ajcc".into(), SLOT_AJCC, SLOT_AJCC + 1);
    push("grade".into(), SLOT_GRADE, SLOT_GRADE + 1);
    push("subsite".into(), SLOT_SUBSITE, SLOT_SUBSITE + 6);
    push("bilateral".into(), SLOT_BILATERAL, SLOT_BILATERAL + 1);
    push("total_dose".into(), SLOT_DOSE, SLOT_DOSE + 1);
    push("dose_fraction".into(), SLOT_FRACTION, SLOT_FRACTION + 1);
    push("aspiration_pre".into(), SLOT_ASP_PRE, SLOT_ASP_PRE + 1);
    if len > BASE_LEN {
        for (block, prefix) in ["ic", "cc"].iter().enumerate() {
            let s = BASE_LEN + block * STAGE_BLOCK_LEN;
            push(format!("{prefix}_decision"), s, s + 1);
            push(format!("{prefix}_primary_response"), s + 1, s + 5);
            push(format!("{prefix}_nodal_response"), s + 5, s + 9);
            for (k, name) in DLT_NAMES.iter().enumerate() {
                push(format!("{prefix}_dlt_{name}"), s + 9 + k, s + 10 + k);
            }
        }
    }
    groups
}
