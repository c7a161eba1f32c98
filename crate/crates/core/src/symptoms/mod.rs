//! Symptom trajectories from nearest neighbors in a small regression net's
//! embedding space, using a separate patient-reported-outcomes cohort.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::csv_io::{header_index, RowReader};
use crate::cohort::{
    generate_synthetic_cohort, Hpv, PatientFeatures, Race, Subsite, SyntheticConfig,
    TreatmentSequence, N_STAGE_RANGE, T_STAGE_RANGE,
};
use crate::error::{Error, FieldError, Result};
use crate::neighbors::knn;
use crate::tensor::loss::masked_squared_error;
use crate::tensor::nn::BatchNorm;
use crate::tensor::{
    derive_seed, det_rng, AdamState, Graph, Linear, NodeId, ParamStore, Tensor,
};
use crate::training::{fit_early_stopping, holdout, FitReport, TrainConfig};

pub const SYMPTOM_COUNT: usize = 10;
pub const TIMEPOINTS: usize = 4;
pub const TIMEPOINT_WEEKS: [u32; TIMEPOINTS] = [0, 7, 12, 27];
pub const DEFAULT_SYMPTOM_NAMES: [&str; SYMPTOM_COUNT] = [
    "drymouth", "swallow", "taste", "pain", "fatigue", "mucus", "appetite", "voice", "choking",
    "sleep",
];
pub const RATING_MAX: f64 = 10.0;
pub const DEFAULT_SYMPTOM_COHORT: usize = 937;
pub const SYMPTOM_NEIGHBORS: usize = 10;
pub const HIDDEN_WIDTH: usize = 10;
/// Encoded width of [`SymptomFeatures`].
pub const SYMPTOM_INPUT_LEN: usize = 22;

/// `[symptom][timepoint]`, `None` where not reported.
pub type Ratings = [[Option<f64>; TIMEPOINTS]; SYMPTOM_COUNT];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomFeatures {
    pub is_male: bool,
    pub pack_years: f64,
    pub hpv: Hpv,
    pub total_dose: f64,
    pub dose_fraction: f64,
    pub race: Race,
    pub bilateral: bool,
    pub subsite: Subsite,
    pub t_stage: u8,
    pub n_stage: u8,
    pub ic: bool,
    pub cc: bool,
}

impl SymptomFeatures {
    pub fn from_patient(p: &PatientFeatures, ic: bool, cc: bool) -> Self {
        SymptomFeatures {
            is_male: p.is_male,
            pack_years: p.pack_years,
            hpv: p.hpv,
            total_dose: p.total_dose,
            dose_fraction: p.dose_fraction,
            race: p.race,
            bilateral: p.bilateral,
            subsite: p.subsite,
            t_stage: p.t_stage,
            n_stage: p.n_stage,
            ic,
            cc,
        }
    }

    pub fn with_treatment(&self, treatment: SymptomTreatment, on: bool) -> Self {
        let mut f = self.clone();
        match treatment {
            SymptomTreatment::Ic => f.ic = on,
            SymptomTreatment::Cc => f.cc = on,
        }
        f
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        let mut fail = |column: &str, message: String| {
            errors.push(FieldError {
                row: None,
                column: column.into(),
                message,
            })
        };
        for (c, v) in [
            ("pack_years", self.pack_years),
            ("total_dose", self.total_dose),
            ("dose_fraction", self.dose_fraction),
        ] {
            if !v.is_finite() || v < 0.0 {
                fail(c, format!("{v} is not a finite non-negative number"));
            }
        }
        for (c, v, (lo, hi)) in [
            ("t_stage", self.t_stage, T_STAGE_RANGE),
            ("n_stage", self.n_stage, N_STAGE_RANGE),
        ] {
            if v < lo || v > hi {
                fail(c, format!("{v} outside [{lo}, {hi}]"));
            }
        }
        errors
    }
}

/// Which decision splits neighbors into treated and untreated groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymptomTreatment {
    Ic,
    Cc,
}

impl SymptomTreatment {
    pub fn label(self) -> &'static str {
        match self {
            SymptomTreatment::Ic => "ic",
            SymptomTreatment::Cc => "cc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ic" => Some(SymptomTreatment::Ic),
            "cc" => Some(SymptomTreatment::Cc),
            _ => None,
        }
    }

    pub fn of(self, f: &SymptomFeatures) -> bool {
        match self {
            SymptomTreatment::Ic => f.ic,
            SymptomTreatment::Cc => f.cc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomCohortRecord {
    pub features: SymptomFeatures,
    pub ratings: Ratings,
}

impl SymptomCohortRecord {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = self.features.validate();
        for (s, row) in self.ratings.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if !(0.0..=RATING_MAX).contains(v) {
                        errors.push(FieldError {
                            row: None,
                            column: rating_column(s, t),
                            message: format!("rating {v} outside [0, 10]"),
                        });
                    }
                }
            }
        }
        errors
    }
}

/// Standardization constants for the continuous inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomScaler {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl SymptomScaler {
    pub fn fit(records: &[SymptomCohortRecord]) -> Self {
        let cols = |f: &SymptomFeatures| [f.pack_years, f.total_dose, f.dose_fraction];
        let n = records.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for r in records {
            for (m, v) in mean.iter_mut().zip(cols(&r.features)) {
                *m += v / n;
            }
        }
        let mut std = [0.0; 3];
        for r in records {
            for ((s, v), m) in std.iter_mut().zip(cols(&r.features)).zip(mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = std.map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
        SymptomScaler { mean, std }
    }

    pub fn encode(&self, f: &SymptomFeatures) -> Vec<f64> {
        let b = |v: bool| v as u8 as f64;
        let mut x = Vec::with_capacity(SYMPTOM_INPUT_LEN);
        for (i, v) in [f.pack_years, f.total_dose, f.dose_fraction].into_iter().enumerate() {
            x.push((v - self.mean[i]) / self.std[i]);
        }
        x.extend(Race::ALL.iter().map(|&r| b(f.race == r)));
        x.extend(Hpv::ALL.iter().map(|&h| b(f.hpv == h)));
        x.extend(Subsite::ALL.iter().map(|&s| b(f.subsite == s)));
        x.push(f.t_stage.saturating_sub(T_STAGE_RANGE.0) as f64 / (T_STAGE_RANGE.1 - T_STAGE_RANGE.0) as f64);
        x.push(f.n_stage as f64 / N_STAGE_RANGE.1 as f64);
        x.extend([b(f.is_male), b(f.bilateral), b(f.ic), b(f.cc)]);
        x
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymptomNet {
    pub store: ParamStore,
    pub hidden: Linear,
    pub norm: BatchNorm,
    pub out: Linear,
}

impl SymptomNet {
    fn new(seed: u64) -> Self {
        let mut rng = det_rng(seed);
        let mut store = ParamStore::new();
        let hidden = Linear::new(&mut store, "symptom.hidden", SYMPTOM_INPUT_LEN, HIDDEN_WIDTH, &mut rng);
        let norm = BatchNorm::new(&mut store, "symptom.norm", HIDDEN_WIDTH);
        let out = Linear::new(&mut store, "symptom.out", HIDDEN_WIDTH, SYMPTOM_COUNT * TIMEPOINTS, &mut rng);
        SymptomNet {
            store,
            hidden,
            norm,
            out,
        }
    }

    /// (embedding, ratings) nodes. Training mode uses batch statistics.
    fn forward(
        &mut self,
        g: &mut Graph<'_>,
        x: NodeId,
        train: bool,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        let e = if train {
            self.norm.forward_train(g, h)?
        } else {
            self.norm.forward_eval(g, h)?
        };
        let z = self.out.forward(g, e)?;
        let s = g.sigmoid(z);
        Ok((e, g.scale(s, RATING_MAX)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymptomModel {
    pub names: Vec<String>,
    pub scaler: SymptomScaler,
    pub net: SymptomNet,
    pub cohort: Vec<SymptomCohortRecord>,
    /// Batch-normalized hidden activations of every cohort member.
    pub embeddings: Vec<Vec<f64>>,
    pub report: FitReport,
}

pub fn rating_column(symptom: usize, timepoint: usize) -> String {
    format!("{}_w{}", DEFAULT_SYMPTOM_NAMES[symptom], TIMEPOINT_WEEKS[timepoint])
}

fn targets(records: &[SymptomCohortRecord], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let w = SYMPTOM_COUNT * TIMEPOINTS;
    let mut y = Vec::with_capacity(idx.len() * w);
    let mut m = Vec::with_capacity(idx.len() * w);
    for &i in idx {
        for row in &records[i].ratings {
            for v in row {
                y.push(v.unwrap_or(0.0));
                m.push(v.is_some() as u8 as f64);
            }
        }
    }
    Ok((Tensor::matrix(idx.len(), w, y)?, Tensor::matrix(idx.len(), w, m)?))
}

fn masked_mse(
    net: &mut SymptomNet,
    store: &ParamStore,
    x: &[Vec<f64>],
    records: &[SymptomCohortRecord],
    idx: &[usize],
    train: bool,
) -> Result<(f64, Option<crate::tensor::ParamGrads>)> {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
    let (y, mask) = targets(records, idx)?;
    let observed = mask.sum();
    if observed == 0.0 {
        return Ok((0.0, None));
    }
    let mut g = Graph::new(store);
    let input = g.input("symptom_x", Tensor::from_rows(&rows)?);
    let (_, pred) = net.forward(&mut g, input, train)?;
    let sse = masked_squared_error(&mut g, pred, y, mask)?;
    let loss = g.scale(sse, 1.0 / observed);
    let value = g.value(loss).get(0, 0);
    let grads = if train {
        Some(g.backward_scalar(loss)?.into_param_grads())
    } else {
        None
    };
    Ok((value, grads))
}

/// Fit on an 80/20 holdout with masked MSE and early stopping.
pub fn fit_symptom_model(
    cohort: &[SymptomCohortRecord],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SymptomModel> {
    if cohort.is_empty() {
        return Err(Error::Config("symptom cohort is empty".into()));
    }
    for s in 0..SYMPTOM_COUNT {
        for t in 0..TIMEPOINTS {
            if cohort.iter().all(|r| r.ratings[s][t].is_none()) {
                return Err(Error::Config(format!(
                    "symptom column `{}` has no reported values",
                    rating_column(s, t)
                )));
            }
        }
    }
    let scaler = SymptomScaler::fit(cohort);
    let x: Vec<Vec<f64>> = cohort.iter().map(|r| scaler.encode(&r.features)).collect();
    let mut net = SymptomNet::new(derive_seed(seed, 1));
    let mut rng = det_rng(derive_seed(seed, 2));
    let (train_idx, val_idx) = holdout(cohort.len(), cfg.validation_fraction, &mut rng);
    let mut adam = AdamState::new(&net.store, cfg.adam);
    let report = fit_early_stopping(
        &mut net,
        &train_idx,
        cfg,
        &mut rng,
        |net, batch, _| {
            // Batch norm needs at least two rows for a variance.
            if batch.len() < 2 {
                return Ok(0.0);
            }
            let store = net.store.clone();
            let (loss, grads) = masked_mse(net, &store, &x, cohort, batch, true)?;
            if let Some(grads) = grads {
                adam.step(&mut net.store, &grads)?;
            }
            Ok(loss)
        },
        |net| {
            if val_idx.is_empty() {
                return Ok(None);
            }
            let mut net = net.clone();
            let store = net.store.clone();
            Ok(Some(masked_mse(&mut net, &store, &x, cohort, &val_idx, false)?.0))
        },
    )?;
    let mut model = SymptomModel {
        names: DEFAULT_SYMPTOM_NAMES.iter().map(|s| s.to_string()).collect(),
        scaler,
        net,
        cohort: cohort.to_vec(),
        embeddings: Vec::new(),
        report,
    };
    model.embeddings = model.embed_rows(&x)?.0;
    Ok(model)
}

impl SymptomModel {
    fn embed_rows(&self, rows: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut net = self.net.clone();
        let mut g = Graph::new(&self.net.store);
        let input = g.input("symptom_x", Tensor::from_rows(rows)?);
        let (e, p) = net.forward(&mut g, input, false)?;
        Ok((g.value(e).to_rows(), g.value(p).to_rows()))
    }

    pub fn embed(&self, f: &SymptomFeatures) -> Result<Vec<f64>> {
        Ok(self.embed_rows(&[self.scaler.encode(f)])?.0.remove(0))
    }

    /// Network ratings `[symptom][timepoint]`, each in [0, 10].
    pub fn predict(&self, f: &SymptomFeatures) -> Result<[[f64; TIMEPOINTS]; SYMPTOM_COUNT]> {
        let p = self.embed_rows(&[self.scaler.encode(f)])?.1.remove(0);
        Ok(std::array::from_fn(|s| {
            std::array::from_fn(|t| p[s * TIMEPOINTS + t].clamp(0.0, RATING_MAX))
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub ids: Vec<usize>,
    pub trajectories: Vec<Ratings>,
    /// Median over reported values; `None` where no member reported.
    pub median: Ratings,
    /// Fewer than the requested number of members were available.
    pub low_support: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomPrediction {
    pub treatment: SymptomTreatment,
    pub names: Vec<String>,
    pub weeks: [u32; TIMEPOINTS],
    /// Symptom indices by descending final-timepoint median.
    pub order: Vec<usize>,
    pub treated: TrajectoryGroup,
    pub untreated: TrajectoryGroup,
}

pub fn median_of(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

pub fn median_trajectory(trajectories: &[Ratings]) -> Ratings {
    std::array::from_fn(|s| {
        std::array::from_fn(|t| {
            let mut v: Vec<f64> = trajectories.iter().filter_map(|r| r[s][t]).collect();
            median_of(&mut v)
        })
    })
}

/// Symptom indices by descending final-timepoint key; missing keys last.
pub fn symptom_order(final_medians: &[Option<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..final_medians.len()).collect();
    idx.sort_by(|&a, &b| match (final_medians[a], final_medians[b]) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    idx
}

fn group(model: &SymptomModel, query: &[f64], members: &[usize], k: usize) -> Result<TrajectoryGroup> {
    let emb: Vec<Vec<f64>> = members.iter().map(|&i| model.embeddings[i].clone()).collect();
    let take = k.min(members.len());
    let ids: Vec<usize> = knn(query, &emb, take)?.into_iter().map(|j| members[j]).collect();
    let trajectories: Vec<Ratings> = ids.iter().map(|&i| model.cohort[i].ratings).collect();
    Ok(TrajectoryGroup {
        median: median_trajectory(&trajectories),
        low_support: take < k,
        ids,
        trajectories,
    })
}

/// The 10 nearest treated and 10 nearest untreated cohort members.
pub fn predict_trajectories(
    model: &SymptomModel,
    patient: &SymptomFeatures,
    treatment: SymptomTreatment,
) -> Result<SymptomPrediction> {
    let errors = patient.validate();
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let query = model.embed(patient)?;
    let (treated, untreated): (Vec<usize>, Vec<usize>) =
        (0..model.cohort.len()).partition(|&i| treatment.of(&model.cohort[i].features));
    let treated = group(model, &query, &treated, SYMPTOM_NEIGHBORS)?;
    let untreated = group(model, &query, &untreated, SYMPTOM_NEIGHBORS)?;
    // Ordering key: median final rating over both neighbor groups together.
    let finals: Vec<Option<f64>> = (0..SYMPTOM_COUNT)
        .map(|s| {
            let mut v: Vec<f64> = treated
                .trajectories
                .iter()
                .chain(&untreated.trajectories)
                .filter_map(|r| r[s][TIMEPOINTS - 1])
                .collect();
            median_of(&mut v)
        })
        .collect();
    Ok(SymptomPrediction {
        treatment,
        names: model.names.clone(),
        weeks: TIMEPOINT_WEEKS,
        order: symptom_order(&finals),
        treated,
        untreated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomSyntheticConfig {
    pub missing_rate: f64,
    /// Gaussian noise added to each rating before clamping to [0, 10].
    pub noise_sd: f64,
}

impl Default for SymptomSyntheticConfig {
    fn default() -> Self {
        SymptomSyntheticConfig {
            missing_rate: 0.1,
            noise_sd: 0.5,
        }
    }
}

const TRUTH_SEED: u64 = 0x5EED_5E7;

/// Noise-free generating ratings: 10 · sigmoid(linear(features)).
pub fn symptom_ground_truth(f: &SymptomFeatures) -> [[f64; TIMEPOINTS]; SYMPTOM_COUNT] {
    // Fixed reference scaling so the truth does not depend on the sample.
    let scaler = SymptomScaler {
        mean: [20.0, 66.0, 2.1],
        std: [20.0, 4.0, 0.15],
    };
    let x = scaler.encode(f);
    let mut rng = det_rng(TRUTH_SEED);
    let w: Vec<f64> = (0..SYMPTOM_INPUT_LEN * SYMPTOM_COUNT)
        .map(|_| rng.random_range(-0.4..0.4))
        .collect();
    let base: Vec<f64> = (0..SYMPTOM_COUNT).map(|_| rng.random_range(-1.5..0.5)).collect();
    // Symptoms peak mid-treatment and partly recover.
    let time = [-1.5, 0.8, 0.6, 0.0];
    let chemo = [0.0, 0.5, 0.4, 0.3];
    std::array::from_fn(|s| {
        let lin: f64 = (0..SYMPTOM_INPUT_LEN)
            .map(|j| w[s * SYMPTOM_INPUT_LEN + j] * x[j])
            .sum::<f64>()
            + base[s];
        std::array::from_fn(|t| {
            let z = lin + time[t] + chemo[t] * (f.cc as u8 as f64 + 0.5 * f.ic as u8 as f64);
            RATING_MAX / (1.0 + (-z).exp())
        })
    })
}

pub fn generate_symptom_cohort(
    seed: u64,
    n: usize,
    cfg: &SymptomSyntheticConfig,
) -> Result<Vec<SymptomCohortRecord>> {
    if !(0.0..1.0).contains(&cfg.missing_rate) || !(cfg.noise_sd >= 0.0) {
        return Err(Error::Config(
            "missing_rate must be in [0, 1) and noise_sd non-negative".into(),
        ));
    }
    let base = generate_synthetic_cohort(derive_seed(seed, 1), n, &SyntheticConfig::default())?;
    let mut rng = det_rng(derive_seed(seed, 2));
    let noise = Normal::new(0.0, cfg.noise_sd.max(1e-300))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;
    Ok(base
        .iter()
        .map(|r| {
            let features = SymptomFeatures::from_patient(&r.features, r.sequence.ic, r.sequence.cc);
            let truth = symptom_ground_truth(&features);
            let ratings = std::array::from_fn(|s| {
                std::array::from_fn(|t| {
                    let eps = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let v = (truth[s][t] + eps).clamp(0.0, RATING_MAX);
                    (!rng.random_bool(cfg.missing_rate)).then_some(v)
                })
            });
            SymptomCohortRecord { features, ratings }
        })
        .collect())
}

/// Feature columns of the symptom CSV; rating columns follow as `<name>_w<week>`.
pub const SYMPTOM_FEATURE_COLUMNS: [&str; 14] = [
    "male",
    "pack_years",
    "hpv",
    "total_dose",
    "dose_fraction",
    "race_black",
    "race_hispanic",
    "race_other",
    "bilateral",
    "subsite",
    "t_stage",
    "n_stage",
    "ic",
    "cc",
];

pub fn symptom_columns() -> Vec<String> {
    let mut c: Vec<String> = SYMPTOM_FEATURE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for s in 0..SYMPTOM_COUNT {
        for t in 0..TIMEPOINTS {
            c.push(rating_column(s, t));
        }
    }
    c
}

pub fn write_symptom_cohort<W: Write>(out: W, records: &[SymptomCohortRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(symptom_columns())?;
    let b = |v: bool| (v as u8).to_string();
    for r in records {
        let f = &r.features;
        let mut row = vec![
            b(f.is_male),
            f.pack_years.to_string(),
            f.hpv.code().to_string(),
            f.total_dose.to_string(),
            f.dose_fraction.to_string(),
            b(f.race == Race::Black),
            b(f.race == Race::Hispanic),
            b(f.race == Race::Other),
            b(f.bilateral),
            f.subsite.code().to_string(),
            f.t_stage.to_string(),
            f.n_stage.to_string(),
            b(f.ic),
            b(f.cc),
        ];
        for s in &r.ratings {
            row.extend(s.iter().map(|v| v.map_or(String::new(), |v| v.to_string())));
        }
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io("<symptom output>", e))?;
    Ok(())
}

fn parse_symptom_row(rr: &mut RowReader<'_>) -> SymptomCohortRecord {
    let race = match [rr.flag("race_black"), rr.flag("race_hispanic"), rr.flag("race_other")] {
        [false, false, false] => Race::White,
        [true, false, false] => Race::Black,
        [false, true, false] => Race::Hispanic,
        [false, false, true] => Race::Other,
        _ => {
            rr.fail("race_black", "at most one race flag may be set".into());
            Race::White
        }
    };
    let hpv_code = rr.int("hpv");
    let hpv = Hpv::from_code(hpv_code).unwrap_or_else(|| {
        rr.fail("hpv", format!("{hpv_code} is not 0, 1 or 2"));
        Hpv::Unknown
    });
    let subsite = match rr.raw("subsite") {
        Some(s) => Subsite::from_code(&s).unwrap_or_else(|| {
            rr.fail("subsite", format!("unknown subsite `{s}`"));
            Subsite::NotOtherwiseSpecified
        }),
        None => Subsite::NotOtherwiseSpecified,
    };
    let features = SymptomFeatures {
        is_male: rr.flag("male"),
        pack_years: rr.float("pack_years"),
        hpv,
        total_dose: rr.float("total_dose"),
        dose_fraction: rr.float("dose_fraction"),
        race,
        bilateral: rr.flag("bilateral"),
        subsite,
        t_stage: rr.int("t_stage"),
        n_stage: rr.int("n_stage"),
        ic: rr.flag("ic"),
        cc: rr.flag("cc"),
    };
    let ratings = std::array::from_fn(|s| {
        std::array::from_fn(|t| {
            let col = rating_column(s, t);
            match rr.raw(&col).as_deref() {
                None | Some("") => None,
                Some(v) => match v.parse::<f64>() {
                    Ok(x) if x.is_finite() => Some(x),
                    _ => {
                        let v = v.to_string();
                        rr.fail(&col, format!("`{v}` is not a number"));
                        None
                    }
                },
            }
        })
    });
    SymptomCohortRecord { features, ratings }
}

/// Blank rating cells mean "not reported".
pub fn read_symptom_cohort<R: Read>(input: R) -> Result<Vec<SymptomCohortRecord>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let cols = symptom_columns();
    let required: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    let index: HashMap<String, usize> = header_index(reader.headers()?, &required)?;
    let mut errors = Vec::new();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let before = errors.len();
        let mut rr = RowReader {
            row: i + 1,
            record: &row,
            index: &index,
            errors: &mut errors,
        };
        let rec = parse_symptom_row(&mut rr);
        if errors.len() == before {
            errors.extend(rec.validate().into_iter().map(|mut e| {
                e.row = Some(i + 1);
                e
            }));
        }
        records.push(rec);
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(Error::Validation(errors))
    }
}

pub fn save_symptom_csv(path: impl AsRef<Path>, records: &[SymptomCohortRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_symptom_cohort(std::io::BufWriter::new(file), records)
}

pub fn load_symptom_csv(path: impl AsRef<Path>) -> Result<Vec<SymptomCohortRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_symptom_cohort(std::io::BufReader::new(file))
}

impl From<(&PatientFeatures, &TreatmentSequence)> for SymptomFeatures {
    fn from((p, s): (&PatientFeatures, &TreatmentSequence)) -> Self {
        SymptomFeatures::from_patient(p, s.ic, s.cc)
    }
}
