//! Similar-patient retrieval, caliper-matched treatment effects and novelty.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::{BinaryEndpoint, CohortRecord, EventTime, Stage};
use crate::error::{Error, Result};
use crate::policy::{PolicyModel, Strategy};
use crate::tensor::graph::logit;

/// Percentile at or below which a patient counts as well represented.
pub const TRUSTED_PERCENTILE: f64 = 75.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborConfig {
    /// Pool searched for caliper matching.
    pub k: usize,
    /// Nearest neighbors shown and used for the treatment rate.
    pub n: usize,
    pub alpha: f64,
    pub alpha_step: f64,
    pub min_group: usize,
}

impl Default for NeighborConfig {
    fn default() -> Self {
        NeighborConfig {
            k: 100,
            n: 10,
            alpha: 0.1,
            alpha_step: 0.1,
            min_group: 5,
        }
    }
}

impl NeighborConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n >= self.k {
            return Err(Error::Config(format!(
                "neighbor sizes need 0 < n < k, got n = {}, k = {}",
                self.n, self.k
            )));
        }
        if !(self.alpha > 0.0) || !(self.alpha_step > 0.0) {
            return Err(Error::Config("caliper alpha and its step must be positive".into()));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ids of the `k` nearest rows by Euclidean distance; ties by ascending id.
pub fn knn(query: &[f64], cohort: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if k > cohort.len() {
        return Err(Error::Config(format!(
            "asked for {k} neighbors from a cohort of {}",
            cohort.len()
        )));
    }
    if let Some(i) = cohort.iter().position(|r| r.len() != query.len()) {
        return Err(Error::Config(format!(
            "cohort row {i} has width {}, query has {}",
            cohort[i].len(),
            query.len()
        )));
    }
    let mut d: Vec<(f64, usize)> = cohort
        .iter()
        .enumerate()
        .map(|(i, r)| (sq_dist(query, r), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(d.into_iter().take(k).map(|(_, i)| i).collect())
}

fn checked_logits(propensities: &[f64]) -> Result<Vec<f64>> {
    propensities
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 && p < 1.0 {
                Ok(logit(p))
            } else {
                Err(Error::Domain(format!(
                    "propensity {p} at index {i} is outside (0, 1)"
                )))
            }
        })
        .collect()
}

/// alpha times the population standard deviation of logit(p).
pub fn caliper_distance(propensities: &[f64], alpha: f64) -> Result<f64> {
    if propensities.is_empty() {
        return Err(Error::Config("caliper needs at least one propensity".into()));
    }
    let l = checked_logits(propensities)?;
    let n = l.len() as f64;
    let mean = l.iter().sum::<f64>() / n;
    let var = l.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(alpha * var.sqrt())
}

/// Fraction of the `n` nearest neighbors that were treated, and their ids.
pub fn neighbor_treatment_rate(
    query: &[f64],
    embeddings: &[Vec<f64>],
    treated: &[bool],
    n: usize,
) -> Result<(f64, Vec<usize>)> {
    if treated.len() != embeddings.len() {
        return Err(Error::Config("treatment flags do not match the cohort".into()));
    }
    if n == 0 {
        return Err(Error::Config("neighbor subset must be non-empty".into()));
    }
    let ids = knn(query, embeddings, n)?;
    let rate = ids.iter().filter(|&&i| treated[i]).count() as f64 / n as f64;
    Ok((rate, ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub outcomes: Vec<String>,
    /// `None` when the group is empty.
    pub treated_rates: Vec<Option<f64>>,
    pub untreated_rates: Vec<Option<f64>>,
    /// Treated minus untreated.
    pub differences: Vec<Option<f64>>,
    /// Final alpha after escalation.
    pub alpha: f64,
    pub caliper_distance: f64,
    pub treated_ids: Vec<usize>,
    pub untreated_ids: Vec<usize>,
    /// A group stayed below the minimum size with the whole pool included.
    pub low_support: bool,
}

/// Caliper-filtered split of a neighbor pool.
#[derive(Debug, Clone, PartialEq)]
pub struct CaliperMatch {
    pub alpha: f64,
    pub caliper_distance: f64,
    pub treated: Vec<usize>,
    pub untreated: Vec<usize>,
    pub low_support: bool,
}

/// Widen the caliper in `alpha_step` increments until both groups reach
/// `min_group` or every pool member is kept.
pub fn caliper_match(
    pool: &[usize],
    query_propensity: f64,
    cohort_propensities: &[f64],
    treated: &[bool],
    cfg: &NeighborConfig,
) -> Result<CaliperMatch> {
    let logits = checked_logits(cohort_propensities)?;
    let q = checked_logits(&[query_propensity])?[0];
    let spread = caliper_distance(cohort_propensities, 1.0)?;
    let gaps: Vec<f64> = pool.iter().map(|&i| (logits[i] - q).abs()).collect();
    let mut step = 0u32;
    loop {
        let alpha = cfg.alpha + step as f64 * cfg.alpha_step;
        let cd = alpha * spread;
        let (mut t, mut u) = (Vec::new(), Vec::new());
        for (&i, &gap) in pool.iter().zip(&gaps) {
            if gap <= cd {
                if treated[i] {
                    t.push(i)
                } else {
                    u.push(i)
                }
            }
        }
        let enough = t.len() >= cfg.min_group && u.len() >= cfg.min_group;
        let all = t.len() + u.len() == pool.len();
        // With zero spread every gap is compared against 0, so stop once
        // nothing more can be admitted.
        if enough || all || spread == 0.0 {
            return Ok(CaliperMatch {
                alpha,
                caliper_distance: cd,
                low_support: !enough,
                treated: t,
                untreated: u,
            });
        }
        step += 1;
    }
}

fn rate(ids: &[usize], outcome: &[bool]) -> Option<f64> {
    (!ids.is_empty()).then(|| ids.iter().filter(|&&i| outcome[i]).count() as f64 / ids.len() as f64)
}

/// Treated vs untreated outcome rates among caliper-matched neighbors.
///
/// `outcomes[j][i]` is outcome `j` for cohort member `i`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_ate(
    query: &[f64],
    query_propensity: f64,
    embeddings: &[Vec<f64>],
    propensities: &[f64],
    treated: &[bool],
    outcome_names: &[String],
    outcomes: &[Vec<bool>],
    cfg: &NeighborConfig,
) -> Result<AteEstimate> {
    cfg.validate()?;
    let m = embeddings.len();
    if propensities.len() != m || treated.len() != m || outcomes.iter().any(|o| o.len() != m) {
        return Err(Error::Config("neighbor cohort arrays differ in length".into()));
    }
    if outcome_names.len() != outcomes.len() {
        return Err(Error::Config("outcome names do not match outcome columns".into()));
    }
    let pool = knn(query, embeddings, cfg.k.min(m))?;
    let cm = caliper_match(&pool, query_propensity, propensities, treated, cfg)?;
    let treated_rates: Vec<Option<f64>> = outcomes.iter().map(|o| rate(&cm.treated, o)).collect();
    let untreated_rates: Vec<Option<f64>> =
        outcomes.iter().map(|o| rate(&cm.untreated, o)).collect();
    let differences = treated_rates
        .iter()
        .zip(&untreated_rates)
        .map(|(t, u)| Some(t.as_ref()? - u.as_ref()?))
        .collect();
    Ok(AteEstimate {
        outcomes: outcome_names.to_vec(),
        treated_rates,
        untreated_rates,
        differences,
        alpha: cm.alpha,
        caliper_distance: cm.caliper_distance,
        treated_ids: cm.treated,
        untreated_ids: cm.untreated,
        low_support: cm.low_support,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyRating {
    pub distance: f64,
    /// Share of the cohort strictly closer to the mean, times 100.
    pub percentile: f64,
    pub trusted: bool,
}

/// sqrt((x − μ)ᵀ P (x − μ)) for a precision matrix P.
pub fn mahalanobis(x: &[f64], mean: &[f64], precision: &DMatrix<f64>) -> f64 {
    let d = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, b)| a - b));
    (d.transpose() * precision * &d)[(0, 0)].max(0.0).sqrt()
}

/// Cohort mean, shrunk covariance inverse and sorted cohort distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyModel {
    pub mean: Vec<f64>,
    /// Row-major d × d precision matrix.
    pub precision: Vec<f64>,
    pub sorted_distances: Vec<f64>,
}

impl NoveltyModel {
    /// Covariance Σ + λI with λ = 1e-3 · trace(Σ) / d.
    pub fn fit(cohort: &[Vec<f64>]) -> Result<Self> {
        let m = cohort.len();
        if m < 2 {
            return Err(Error::Config("novelty model needs at least two cohort rows".into()));
        }
        let d = cohort[0].len();
        if d == 0 || cohort.iter().any(|r| r.len() != d) {
            return Err(Error::Config("cohort embeddings must share a positive width".into()));
        }
        let x = DMatrix::from_fn(m, d, |i, j| cohort[i][j]);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / m as f64;
        let lambda = 1e-3 * cov.trace() / d as f64;
        for j in 0..d {
            cov[(j, j)] += lambda;
        }
        let chol = cov.cholesky().filter(|_| lambda > 0.0).ok_or_else(|| {
            Error::Singular("embedding covariance even after shrinkage".into())
        })?;
        let precision = chol.inverse();
        let mean: Vec<f64> = mean.iter().copied().collect();
        let mut sorted: Vec<f64> = cohort
            .iter()
            .map(|r| mahalanobis(r, &mean, &precision))
            .collect();
        sorted.sort_by(f64::total_cmp);
        Ok(NoveltyModel {
            mean,
            precision: precision.transpose().as_slice().to_vec(),
            sorted_distances: sorted,
        })
    }

    fn precision_matrix(&self) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_row_slice(d, d, &self.precision)
    }

    pub fn rate(&self, embedding: &[f64]) -> Result<NoveltyRating> {
        if embedding.len() != self.mean.len() {
            return Err(Error::Config(format!(
                "embedding width {} does not match the cohort's {}",
                embedding.len(),
                self.mean.len()
            )));
        }
        let distance = mahalanobis(embedding, &self.mean, &self.precision_matrix());
        Ok(self.rating_for(distance))
    }

    pub fn rating_for(&self, distance: f64) -> NoveltyRating {
        let closer = self.sorted_distances.partition_point(|&v| v < distance);
        let percentile = 100.0 * closer as f64 / self.sorted_distances.len() as f64;
        NoveltyRating {
            distance,
            percentile,
            trusted: percentile <= TRUSTED_PERCENTILE,
        }
    }
}

/// One-shot percentile against a cohort.
pub fn mahalanobis_percentile(embedding: &[f64], cohort: &[Vec<f64>]) -> Result<NoveltyRating> {
    NoveltyModel::fit(cohort)?.rate(embedding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KaplanMeier {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Product-limit estimate evaluated on `grid`, with log-log Greenwood bands.
pub fn kaplan_meier(data: &[EventTime], grid: &[f64], level: f64) -> Result<KaplanMeier> {
    if data.is_empty() {
        return Err(Error::Config("Kaplan-Meier needs at least one record".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    let z = statrs::distribution::ContinuousCDF::inverse_cdf(
        &statrs::distribution::Normal::standard(),
        0.5 + level / 2.0,
    );
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.months.total_cmp(&b.months));
    // (time, S, Greenwood sum) after each distinct event time.
    let mut steps: Vec<(f64, f64, f64)> = Vec::new();
    let (mut s, mut gw) = (1.0, 0.0);
    let mut at_risk = sorted.len();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].months;
        let mut events = 0;
        let mut j = i;
        while j < sorted.len() && sorted[j].months == t {
            events += sorted[j].event as usize;
            j += 1;
        }
        if events > 0 {
            let (n, d) = (at_risk as f64, events as f64);
            s *= 1.0 - d / n;
            if n > d {
                gw += d / (n * (n - d));
            }
            steps.push((t, s, gw));
        }
        at_risk -= j - i;
        i = j;
    }
    let mut out = KaplanMeier {
        times: grid.to_vec(),
        survival: Vec::with_capacity(grid.len()),
        lower: Vec::with_capacity(grid.len()),
        upper: Vec::with_capacity(grid.len()),
    };
    for &t in grid {
        let k = steps.partition_point(|st| st.0 <= t);
        let (sv, g) = if k == 0 { (1.0, 0.0) } else { (steps[k - 1].1, steps[k - 1].2) };
        let (lo, hi) = if sv <= 0.0 {
            (0.0, 0.0)
        } else if sv >= 1.0 || g == 0.0 {
            (sv, sv)
        } else {
            let ln = sv.ln();
            let se = (g / (ln * ln)).sqrt();
            (sv.powf((z * se).exp()), sv.powf((-z * se).exp()))
        };
        out.survival.push(sv);
        out.lower.push(lo);
        out.upper.push(hi);
    }
    Ok(out)
}

/// Imitation propensities and both heads' embeddings for the stored cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageIndex {
    pub stage: Stage,
    /// Indexed by [`Strategy::index`].
    pub embeddings: [Vec<Vec<f64>>; 2],
    pub propensities: Vec<f64>,
    pub treated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortIndex {
    pub stages: Vec<StageIndex>,
    /// Per stage and strategy.
    pub novelty: Vec<[NoveltyModel; 2]>,
}

impl CohortIndex {
    /// `records` must be the cohort stored in the model's memory, in order.
    pub fn build(model: &PolicyModel, records: &[CohortRecord]) -> Result<Self> {
        let mut stages = Vec::new();
        let mut novelty = Vec::new();
        for stage in Stage::ALL {
            if model.memory[stage.index()].rows() != records.len() {
                return Err(Error::Config(
                    "records do not match the policy model's cohort memory".into(),
                ));
            }
            let (p, e_imit) = model.cohort_outputs(stage, Strategy::Imitation)?;
            let (_, e_opt) = model.cohort_outputs(stage, Strategy::Optimal)?;
            novelty.push([NoveltyModel::fit(&e_imit)?, NoveltyModel::fit(&e_opt)?]);
            stages.push(StageIndex {
                stage,
                embeddings: [e_imit, e_opt],
                propensities: p,
                treated: records.iter().map(|r| r.sequence.decision(stage)).collect(),
            });
        }
        Ok(CohortIndex { stages, novelty })
    }

    pub fn stage(&self, stage: Stage) -> &StageIndex {
        &self.stages[stage.index()]
    }
}

/// Binary outcome columns for ATE estimation.
pub fn outcome_columns(records: &[CohortRecord], endpoints: &[BinaryEndpoint]) -> (Vec<String>, Vec<Vec<bool>>) {
    (
        endpoints.iter().map(|e| e.name()).collect(),
        endpoints
            .iter()
            .map(|&e| records.iter().map(|r| r.binary(e)).collect())
            .collect(),
    )
}
