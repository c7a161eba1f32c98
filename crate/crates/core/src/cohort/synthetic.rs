//! Calibrated synthetic cohort generator.
//!
//! Each patient is assigned a treatment sequence (multinomial over the
//! published sequence counts, with two patients per sequence forced so that
//! every sequence appears). Baseline covariates are then drawn from the
//! marginals of that sequence's column of the demographics table.
//!
//! A latent risk score links covariates to outcomes:
//!
//! ```text
//! r = 0.5 (t - 2.5) + 0.5 (n - 1.5) + 0.4 [hpv != positive] + 0.3 (smoking - 0.8)
//!     + 0.02 (age - 59) + N(0, 0.3²)
//! ```
//!
//! * Responses use an ordered-probit model: P(level <= k | r) = Φ(c_k + β r),
//!   with thresholds c_k set so the level probabilities at r = 0 equal the
//!   table's CR/PR rates (the remainder split 3:1 stable:progressive).
//! * Each DLT kind has probability 1 - (1 - q)^share_k, where q is the
//!   table's any-DLT rate for the stage, tilted by risk on the logit scale.
//! * Event times are log-normal: ln T = μ_{s,e} - γ r_out + σ ε, where
//!   r_out adds the post-CC response to r and μ_{s,e} is solved so that the
//!   event fraction at r_out = 0 under U[48, 96] month administrative
//!   censoring matches the table.
//! * FT and post-therapy aspiration are logistic in r_out around the table
//!   rates.

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Exp, Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::types::*;
use crate::error::{Error, Result};
use crate::tensor::{det_rng, DetRng};

/// One column of the demographics table (rates as fractions).
#[derive(Debug, Clone, Copy)]
pub struct SequenceProfile {
    pub sequence: (bool, bool, bool),
    pub count: u32,
    pub hpv_positive: f64,
    pub hpv_unknown: f64,
    pub age_mean: f64,
    pub pack_years_mean: f64,
    pub male: f64,
    pub current_smoker: f64,
    pub former_smoker: f64,
    pub bilateral: f64,
    pub t: [f64; 4],
    /// N1..N3; N0 takes the remainder.
    pub n: [f64; 3],
    /// AJCC 2..4; AJCC 1 takes the remainder.
    pub ajcc: [f64; 3],
    /// BOT, GPS, soft palate, tonsil; pharyngeal wall and NOS share the remainder.
    pub subsite: [f64; 4],
    pub grade: [f64; 4],
    pub white: f64,
    pub aspiration_pre: f64,
    pub total_dose: f64,
    pub dose_fraction: f64,
    /// Fraction without event for OS, LRC, FDM.
    pub event_free: [f64; 3],
    pub ft: f64,
    pub aspiration_post: f64,
    /// CR primary, PR primary, CR nodal, PR nodal, any DLT after IC.
    pub after_ic: [f64; 5],
    /// Same after CC/RT.
    pub after_cc: [f64; 5],
}

#[allow(clippy::too_many_arguments)]
const fn col(
    sequence: (bool, bool, bool),
    count: u32,
    a: [f64; 8],
    t: [f64; 4],
    n: [f64; 3],
    ajcc: [f64; 3],
    subsite: [f64; 4],
    grade: [f64; 4],
    b: [f64; 4],
    event_free: [f64; 3],
    ft_as: [f64; 2],
    after_ic: [f64; 5],
    after_cc: [f64; 5],
) -> SequenceProfile {
    SequenceProfile {
        sequence,
        count,
        hpv_positive: a[0],
        hpv_unknown: a[1],
        age_mean: a[2],
        pack_years_mean: a[3],
        male: a[4],
        current_smoker: a[5],
        former_smoker: a[6],
        bilateral: a[7],
        t,
        n,
        ajcc,
        subsite,
        grade,
        white: b[0],
        aspiration_pre: b[1],
        total_dose: b[2],
        dose_fraction: b[3],
        event_free,
        ft: ft_as[0],
        aspiration_post: ft_as[1],
        after_ic,
        after_cc,
    }
}

/// Published per-sequence marginals, in the table's column order.
pub const PROFILES: [SequenceProfile; 8] = [
    col(
        (false, true, false),
        223,
        [0.5650, 0.0628, 59.3, 17.6, 0.8834, 0.1928, 0.4215, 0.0448],
        [0.1883, 0.4215, 0.2466, 0.1435],
        [0.5291, 0.3946, 0.0179],
        [0.1525, 0.0942, 0.3677],
        [0.5022, 0.0090, 0.0090, 0.4126],
        [0.0090, 0.2825, 0.5067, 0.0090],
        [0.9327, 0.0224, 68.99, 2.10],
        [0.7534, 0.9103, 0.8969],
        [0.1749, 0.1749],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.8341, 0.1614, 0.5202, 0.4395, 0.2780],
    ),
    col(
        (false, false, false),
        57,
        [0.8070, 0.0175, 61.3, 10.5, 0.8070, 0.1930, 0.4035, 0.0351],
        [0.6316, 0.3333, 0.0351, 0.0],
        [0.8070, 0.1228, 0.0],
        [0.0526, 0.0526, 0.1228],
        [0.3509, 0.0175, 0.0175, 0.5439],
        [0.0, 0.3158, 0.5439, 0.0],
        [0.8947, 0.0, 66.86, 2.16],
        [0.8246, 0.9298, 0.9649],
        [0.0526, 0.0351],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.9123, 0.0702, 0.5263, 0.3509, 0.0],
    ),
    col(
        (false, true, true),
        51,
        [0.5490, 0.0784, 57.7, 18.9, 0.9216, 0.3529, 0.2941, 0.0588],
        [0.0588, 0.5490, 0.2157, 0.1765],
        [0.5294, 0.4314, 0.0],
        [0.1569, 0.1373, 0.3922],
        [0.4706, 0.0196, 0.0392, 0.4118],
        [0.0, 0.2745, 0.5686, 0.0],
        [0.9608, 0.0196, 69.47, 2.08],
        [0.7059, 0.6863, 0.8627],
        [0.2157, 0.2549],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.6863, 0.2549, 0.1765, 0.8039, 0.1569],
    ),
    col(
        (true, true, false),
        100,
        [0.5000, 0.1600, 58.5, 17.6, 0.8700, 0.2200, 0.3400, 0.0400],
        [0.0600, 0.3300, 0.2900, 0.3200],
        [0.2700, 0.6500, 0.0800],
        [0.1600, 0.2200, 0.4900],
        [0.5600, 0.0200, 0.0100, 0.3600],
        [0.0300, 0.2800, 0.4800, 0.0],
        [0.8600, 0.0700, 69.36, 2.11],
        [0.7500, 0.8500, 0.9000],
        [0.2500, 0.2200],
        [0.3400, 0.5200, 0.1000, 0.7500, 0.7500],
        [0.9000, 0.1000, 0.5800, 0.3400, 0.2900],
    ),
    col(
        (true, true, true),
        36,
        [0.6111, 0.1111, 58.3, 21.8, 0.9167, 0.2222, 0.3333, 0.0278],
        [0.1389, 0.2778, 0.2778, 0.3056],
        [0.1667, 0.7500, 0.0833],
        [0.2222, 0.2500, 0.3889],
        [0.5556, 0.0833, 0.0, 0.3333],
        [0.0, 0.3333, 0.5556, 0.0],
        [0.8611, 0.0556, 69.33, 2.08],
        [0.6111, 0.6944, 0.8056],
        [0.3889, 0.4167],
        [0.3889, 0.5556, 0.0278, 0.8889, 0.5000],
        [0.7222, 0.1944, 0.1944, 0.7778, 0.2500],
    ),
    col(
        (true, false, false),
        45,
        [0.4222, 0.0222, 57.6, 15.4, 0.8889, 0.2444, 0.3333, 0.0222],
        [0.2889, 0.4889, 0.1778, 0.0444],
        [0.2222, 0.7333, 0.0444],
        [0.2222, 0.0, 0.5778],
        [0.5778, 0.0, 0.0, 0.4000],
        [0.0, 0.2889, 0.4667, 0.0],
        [0.9333, 0.0222, 67.42, 2.15],
        [0.8667, 0.9111, 0.8889],
        [0.0889, 0.0889],
        [0.6667, 0.2889, 0.1111, 0.8667, 0.6444],
        [0.9111, 0.0444, 0.5778, 0.3778, 0.0],
    ),
    col(
        (false, false, true),
        11,
        [0.5455, 0.1818, 59.6, 16.7, 0.8182, 0.1818, 0.5455, 0.0],
        [0.5455, 0.4545, 0.0, 0.0],
        [0.6364, 0.2727, 0.0],
        [0.0909, 0.1818, 0.1818],
        [0.1818, 0.0, 0.0, 0.8182],
        [0.0909, 0.4545, 0.3636, 0.0],
        [0.9091, 0.0, 68.05, 2.17],
        [0.6364, 0.6364, 0.7273],
        [0.1818, 0.1818],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.8182, 0.1818, 0.0909, 0.9091, 0.0],
    ),
    col(
        (true, false, true),
        13,
        [0.6154, 0.0769, 57.0, 4.8, 0.9231, 0.0, 0.3077, 0.0],
        [0.3077, 0.6154, 0.0769, 0.0],
        [0.6154, 0.3846, 0.0],
        [0.0769, 0.0, 0.3846],
        [0.4615, 0.0769, 0.0, 0.3077],
        [0.0, 0.0769, 0.6154, 0.0769],
        [0.9231, 0.0, 67.23, 2.18],
        [1.0, 0.8462, 1.0],
        [0.0, 0.0769],
        [0.4615, 0.3077, 0.0, 0.8462, 0.8462],
        [0.9231, 0.0769, 0.0769, 0.6923, 0.0],
    ),
];

impl SequenceProfile {
    pub fn treatment_sequence(&self) -> TreatmentSequence {
        let (ic, cc, nd) = self.sequence;
        TreatmentSequence::new(ic, cc, nd)
    }
}

pub fn profile_for(seq: &TreatmentSequence) -> &'static SequenceProfile {
    PROFILES
        .iter()
        .find(|p| p.treatment_sequence().same_decisions(seq))
        .expect("every sequence has a profile")
}

/// Share of the any-DLT rate assigned to each DLT kind.
pub const DLT_SHARES: [f64; DLT_KINDS] = [0.40, 0.10, 0.15, 0.25, 0.10];
/// Share of the non-CR/PR remainder that is "stable" rather than progressive.
pub const STABLE_SHARE: f64 = 0.75;
pub const CENSOR_MIN_MONTHS: f64 = 48.0;
pub const CENSOR_MAX_MONTHS: f64 = 96.0;
pub const MIN_COHORT: usize = 16;
pub const DEFAULT_COHORT: usize = 536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    /// Sequences drawn from the published counts.
    #[default]
    TableMarginals,
    /// Decisions are a steep logistic function of staging, so a policy
    /// model can in principle recover them from the baseline features.
    LogisticStaging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub decision_mode: DecisionMode,
    /// β: effect of latent risk on response levels (ordered probit).
    pub response_effect: f64,
    /// Effect of latent risk on DLT logits.
    pub dlt_effect: f64,
    /// γ: effect of outcome risk on log event time.
    pub time_effect: f64,
    /// σ of log event time.
    pub time_sigma: f64,
    /// Effect of outcome risk on FT and aspiration logits.
    pub static_effect: f64,
    /// Slope of the staging logistic in `LogisticStaging` mode.
    pub staging_slope: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            decision_mode: DecisionMode::TableMarginals,
            response_effect: 0.8,
            dlt_effect: 0.3,
            time_effect: 0.5,
            time_sigma: 1.0,
            static_effect: 0.8,
            staging_slope: 6.0,
        }
    }
}

impl SyntheticConfig {
    pub fn logistic_staging() -> Self {
        SyntheticConfig {
            decision_mode: DecisionMode::LogisticStaging,
            ..Default::default()
        }
    }
}

fn std_normal() -> StdNormal {
    StdNormal::new(0.0, 1.0).unwrap()
}

/// Latent risk from baseline covariates, without the noise term.
pub fn latent_risk(p: &PatientFeatures) -> f64 {
    0.5 * (p.t_stage as f64 - 2.5)
        + 0.5 * (p.n_stage as f64 - 1.5)
        + if p.hpv == Hpv::Positive { 0.0 } else { 0.4 }
        + 0.3 * (p.smoking_status as f64 - 0.8)
        + 0.02 * (p.age - 59.0)
}

/// Outcome risk: baseline risk shifted by the response after CC/RT.
pub fn outcome_risk(r: f64, after_cc: &TransitionState) -> f64 {
    r + 0.25 * (2.8 - after_cc.primary_response as f64)
        + 0.25 * (2.5 - after_cc.nodal_response as f64)
}

/// Ordered-probit thresholds c_0 < c_1 < c_2 from CR and PR rates.
pub fn response_thresholds(cr: f64, pr: f64) -> [f64; 3] {
    let rest = (1.0 - cr - pr).max(0.0);
    let probs = [rest * (1.0 - STABLE_SHARE), rest * STABLE_SHARE, pr, cr];
    let n = std_normal();
    let mut cum = 0.0;
    let mut c = [0.0; 3];
    for k in 0..3 {
        cum += probs[k];
        c[k] = n.inverse_cdf(cum.clamp(1e-4, 1.0 - 1e-4));
    }
    // Keep strictly increasing even when a level has zero mass.
    for k in 1..3 {
        if c[k] <= c[k - 1] {
            c[k] = c[k - 1] + 1e-6;
        }
    }
    c
}

fn sample_response(rng: &mut DetRng, c: &[f64; 3], beta: f64, r: f64) -> u8 {
    // Level is the number of thresholds below the latent z = ε - β r.
    let z: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) - beta * r;
    c.iter().filter(|&&ck| z > ck).count() as u8
}

/// Per-kind DLT probability at risk 0, so that P(any DLT) equals `rate`.
pub fn dlt_kind_probability(rate: f64, k: usize) -> f64 {
    1.0 - (1.0 - rate).powf(DLT_SHARES[k])
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn tilt(p: f64, shift: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if p >= 1.0 {
        1.0
    } else {
        logistic(logit(p) + shift)
    }
}

/// Fraction of events under U[48, 96] censoring for ln T ~ N(mu, sigma²).
pub fn censored_event_fraction(mu: f64, sigma: f64) -> f64 {
    // Simpson's rule over the censoring window.
    let n = 64;
    let h = (CENSOR_MAX_MONTHS - CENSOR_MIN_MONTHS) / n as f64;
    let norm = std_normal();
    let f = |c: f64| norm.cdf((c.ln() - mu) / sigma);
    let mut s = f(CENSOR_MIN_MONTHS) + f(CENSOR_MAX_MONTHS);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(CENSOR_MIN_MONTHS + i as f64 * h);
    }
    s * h / 3.0 / (CENSOR_MAX_MONTHS - CENSOR_MIN_MONTHS)
}

/// Log-time location giving the requested event fraction at risk 0.
pub fn calibrate_mu(event_fraction: f64, sigma: f64) -> f64 {
    let target = event_fraction.clamp(0.01, 0.99);
    let (mut lo, mut hi) = (-10.0, 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        // Event fraction decreases in mu.
        if censored_event_fraction(mid, sigma) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn bern(rng: &mut DetRng, p: f64) -> bool {
    Bernoulli::new(p.clamp(0.0, 1.0)).unwrap().sample(rng)
}

fn categorical(rng: &mut DetRng, weights: &[f64]) -> usize {
    WeightedIndex::new(weights.iter().map(|w| w.max(0.0)))
        .map(|d| d.sample(rng))
        .unwrap_or(0)
}

/// Typical involvement per region on one side, given nodal disease.
const LN_SIDE_BASE: [f64; 7] = [0.10, 0.70, 0.35, 0.15, 0.10, 0.05, 0.05];

fn sample_features(rng: &mut DetRng, prof: &SequenceProfile) -> PatientFeatures {
    let age = Normal::new(prof.age_mean, 9.0)
        .unwrap()
        .sample(rng)
        .clamp(25.0, 95.0);
    let is_male = bern(rng, prof.male);
    let nonwhite = 1.0 - prof.white;
    let race = Race::ALL[categorical(
        rng,
        &[prof.white, 0.5 * nonwhite, 0.3 * nonwhite, 0.2 * nonwhite],
    )];
    let hpv = Hpv::ALL[categorical(
        rng,
        &[
            1.0 - prof.hpv_positive - prof.hpv_unknown,
            prof.hpv_positive,
            prof.hpv_unknown,
        ],
    )];
    let never = (1.0 - prof.current_smoker - prof.former_smoker).max(0.0);
    let smoking_status = categorical(rng, &[never, prof.former_smoker, prof.current_smoker]) as u8;
    let pack_years = if smoking_status == 0 {
        0.0
    } else {
        let mean = prof.pack_years_mean / (1.0 - never).max(0.05);
        Exp::new(1.0 / mean.max(0.5)).unwrap().sample(rng)
    };
    let t_stage = 1 + categorical(rng, &prof.t) as u8;
    let n0 = (1.0 - prof.n.iter().sum::<f64>()).max(0.0);
    let n_stage = categorical(rng, &[n0, prof.n[0], prof.n[1], prof.n[2]]) as u8;
    let a1 = (1.0 - prof.ajcc.iter().sum::<f64>()).max(0.0);
    let ajcc_stage = 1 + categorical(rng, &[a1, prof.ajcc[0], prof.ajcc[1], prof.ajcc[2]]) as u8;
    let pathological_grade = 1 + categorical(rng, &prof.grade) as u8;
    let other_site = (1.0 - prof.subsite.iter().sum::<f64>()).max(0.0);
    // Table order BOT, GPS, soft palate, tonsil -> enum order.
    let subsite = Subsite::ALL[categorical(
        rng,
        &[
            prof.subsite[0],
            prof.subsite[3],
            prof.subsite[1],
            prof.subsite[2],
            0.5 * other_site,
            0.5 * other_site,
        ],
    )];
    let bilateral = bern(rng, prof.bilateral);
    let mut lymph_node_regions = [false; LYMPH_NODE_REGIONS];
    if n_stage > 0 {
        let scale = 0.4 + 0.3 * n_stage as f64;
        let ipsi = if rng.random_bool(0.5) { 0 } else { 7 };
        for (k, &b) in LN_SIDE_BASE.iter().enumerate() {
            lymph_node_regions[ipsi + k] = bern(rng, (b * scale).min(0.95));
            if bilateral {
                lymph_node_regions[7 - ipsi + k] = bern(rng, (b * scale).min(0.95));
            }
        }
    }
    let total_dose = Normal::new(prof.total_dose, 1.5)
        .unwrap()
        .sample(rng)
        .clamp(50.0, 80.0);
    let dose_fraction = Normal::new(prof.dose_fraction, 0.05)
        .unwrap()
        .sample(rng)
        .clamp(1.5, 3.0);
    let aspiration_pre = bern(rng, prof.aspiration_pre);
    PatientFeatures {
        age,
        is_male,
        race,
        hpv,
        smoking_status,
        pack_years,
        lymph_node_regions,
        t_stage,
        n_stage,
        ajcc_stage,
        pathological_grade,
        subsite,
        bilateral,
        total_dose,
        dose_fraction,
        aspiration_pre,
    }
}

/// Decision probabilities used by [`DecisionMode::LogisticStaging`].
pub fn staging_decision_probabilities(p: &PatientFeatures, slope: f64) -> [f64; 3] {
    [
        logistic(slope * (p.t_stage as f64 + p.n_stage as f64 - 4.5)),
        logistic(slope * (p.ajcc_stage as f64 - 2.5)),
        logistic(slope * (p.n_stage as f64 - 1.5)),
    ]
}

fn sample_transition(
    rng: &mut DetRng,
    given: bool,
    rates: &[f64; 5],
    r: f64,
    cfg: &SyntheticConfig,
) -> TransitionState {
    let primary = response_thresholds(rates[0], rates[1]);
    let nodal = response_thresholds(rates[2], rates[3]);
    let primary_response = sample_response(rng, &primary, cfg.response_effect, r);
    let nodal_response = sample_response(rng, &nodal, cfg.response_effect, r);
    let mut dlt = [false; DLT_KINDS];
    if given {
        for (k, d) in dlt.iter_mut().enumerate() {
            *d = bern(
                rng,
                tilt(dlt_kind_probability(rates[4], k), cfg.dlt_effect * r),
            );
        }
    }
    TransitionState {
        primary_response,
        nodal_response,
        dlt,
    }
}

/// Calibrated log-time locations, indexed by sequence code then endpoint.
fn calibrated_mus(sigma: f64) -> [[f64; 3]; 8] {
    let mut mus = [[0.0; 3]; 8];
    for prof in &PROFILES {
        let code = prof.treatment_sequence().code();
        for e in 0..3 {
            mus[code][e] = calibrate_mu(1.0 - prof.event_free[e], sigma);
        }
    }
    mus
}

fn sample_record(
    rng: &mut DetRng,
    prof: &SequenceProfile,
    cfg: &SyntheticConfig,
    mus: &[[f64; 3]; 8],
) -> CohortRecord {
    let features = sample_features(rng, prof);
    let mut outcome_prof = prof;
    let sequence = match cfg.decision_mode {
        DecisionMode::TableMarginals => prof.treatment_sequence(),
        DecisionMode::LogisticStaging => {
            let [pi, pc, pn] = staging_decision_probabilities(&features, cfg.staging_slope);
            let s = TreatmentSequence::new(bern(rng, pi), bern(rng, pc), bern(rng, pn));
            outcome_prof = profile_for(&s);
            s
        }
    };
    let r = latent_risk(&features) + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let after_ic = if sequence.ic {
        sample_transition(rng, true, &outcome_prof.after_ic, r, cfg)
    } else {
        TransitionState::stable()
    };
    let after_cc = sample_transition(rng, sequence.cc, &outcome_prof.after_cc, r, cfg);
    let r_out = outcome_risk(r, &after_cc);
    let censor = Uniform::new(CENSOR_MIN_MONTHS, CENSOR_MAX_MONTHS).unwrap();
    let endpoints = std::array::from_fn(|e| {
        let mu = mus[sequence.code()][e];
        let ln_t = mu - cfg.time_effect * r_out
            + cfg.time_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let t = ln_t.exp().max(0.1);
        let c = censor.sample(rng);
        if t <= c {
            EventTime {
                event: true,
                months: t,
            }
        } else {
            EventTime {
                event: false,
                months: c,
            }
        }
    });
    let ft = bern(
        rng,
        tilt(outcome_prof.ft.clamp(0.01, 0.99), cfg.static_effect * r_out),
    );
    let aspiration_post = bern(
        rng,
        tilt(
            outcome_prof.aspiration_post.clamp(0.01, 0.99),
            cfg.static_effect * r_out,
        ),
    );
    CohortRecord {
        features,
        sequence,
        after_ic,
        after_cc,
        outcome: OutcomeRecord {
            endpoints,
            ft,
            aspiration_post,
        },
    }
}

/// Generate `n` records deterministically from `seed`.
pub fn generate_synthetic_cohort(
    seed: u64,
    n: usize,
    cfg: &SyntheticConfig,
) -> Result<Vec<CohortRecord>> {
    if n < MIN_COHORT {
        return Err(Error::Config(format!(
            "synthetic cohort needs at least {MIN_COHORT} patients (two per treatment sequence), got {n}"
        )));
    }
    let mut rng = det_rng(seed);
    let mus = calibrated_mus(cfg.time_sigma);
    let weights: Vec<f64> = PROFILES.iter().map(|p| p.count as f64).collect();
    let dist = WeightedIndex::new(&weights).unwrap();
    let mut assignment: Vec<usize> = (0..PROFILES.len()).flat_map(|i| [i, i]).collect();
    assignment.extend((MIN_COHORT..n).map(|_| dist.sample(&mut rng)));
    // Interleave the forced entries with the rest.
    for i in (1..assignment.len()).rev() {
        let j = rng.random_range(0..=i);
        assignment.swap(i, j);
    }
    Ok(assignment
        .into_iter()
        .map(|i| sample_record(&mut rng, &PROFILES[i], cfg, &mus))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_counts_total_536() {
        assert_eq!(PROFILES.iter().map(|p| p.count).sum::<u32>(), 536);
        let mut codes: Vec<usize> = PROFILES
            .iter()
            .map(|p| p.treatment_sequence().code())
            .collect();
        codes.sort();
        assert_eq!(codes, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn calibrated_mu_reproduces_event_fraction() {
        for q in [0.05, 0.25, 0.5] {
            let mu = calibrate_mu(q, 1.0);
            assert!((censored_event_fraction(mu, 1.0) - q).abs() < 1e-9);
        }
    }

    #[test]
    fn thresholds_reproduce_rates_at_zero_risk() {
        let c = response_thresholds(0.34, 0.52);
        let n = std_normal();
        let p_cr = 1.0 - n.cdf(c[2]);
        let p_pr = n.cdf(c[2]) - n.cdf(c[1]);
        assert!((p_cr - 0.34).abs() < 1e-6);
        assert!((p_pr - 0.52).abs() < 1e-6);
    }

    #[test]
    fn dlt_shares_recover_any_rate() {
        let q = 0.64;
        let none: f64 = (0..DLT_KINDS)
            .map(|k| 1.0 - dlt_kind_probability(q, k))
            .product();
        assert!((1.0 - none - q).abs() < 1e-12);
    }
}
