use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{
    binary_metrics, horizon_metrics, multiclass_auc, BinaryMetrics, HorizonMetrics, MulticlassAuc,
};
use crate::cohort::{
    CohortRecord, Endpoint, Stage, StageContext, TransitionState, DLT_KINDS, DLT_NAMES,
};
use crate::error::Result;
use crate::policy::{
    optimal_choices, simulated_inputs, OptimalObjectiveWeights, PolicyModel, Strategy,
};
use crate::simulator::Simulator;
use crate::tensor::{Masks, Tensor};

/// Months at which survival predictions are binarized.
pub const HORIZONS: [f64; 4] = [12.0, 24.0, 36.0, 48.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryRow {
    pub model: String,
    pub output: String,
    pub n: usize,
    pub metrics: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassRow {
    pub model: String,
    pub output: String,
    pub n: usize,
    pub auc: MulticlassAuc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalRow {
    pub endpoint: String,
    pub metrics: HorizonMetrics,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub evaluated_patients: usize,
    pub binary: Vec<BinaryRow>,
    pub multiclass: Vec<MulticlassRow>,
    pub temporal: Vec<TemporalRow>,
    /// Rows that could not be computed, with the reason.
    pub notes: Vec<String>,
}

impl MetricReport {
    fn push_binary(
        &mut self,
        model: &str,
        output: &str,
        scores: &[f64],
        labels: &[bool],
    ) -> Result<()> {
        if labels.is_empty() {
            self.notes
                .push(format!("{model} / {output}: no evaluable records"));
            return Ok(());
        }
        let metrics = binary_metrics(scores, labels)?;
        if metrics.auc.is_none() {
            self.notes.push(format!(
                "{model} / {output}: single class in labels, AUC undefined"
            ));
        }
        self.binary.push(BinaryRow {
            model: model.into(),
            output: output.into(),
            n: labels.len(),
            metrics,
        });
        Ok(())
    }

    fn push_multiclass(
        &mut self,
        model: &str,
        output: &str,
        scores: &[Vec<f64>],
        labels: &[usize],
    ) {
        match multiclass_auc(scores, labels) {
            Ok(auc) => {
                if !auc.excluded_classes.is_empty() {
                    self.notes.push(format!(
                        "{model} / {output}: classes {:?} absent, excluded from weighted AUC",
                        auc.excluded_classes
                    ));
                }
                self.multiclass.push(MulticlassRow {
                    model: model.into(),
                    output: output.into(),
                    n: labels.len(),
                    auc,
                })
            }
            Err(e) => self.notes.push(format!("{model} / {output}: {e}")),
        }
    }

    /// Fixed-width table in the same row order as the JSON.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or("   n/a".to_string(), |v| format!("{v:6.3}"));
        let _ = writeln!(s, "Evaluated patients: {}", self.evaluated_patients);
        let _ = writeln!(
            s,
            "\n{:<22} {:<28} {:>5} {:>6} {:>6} {:>6}",
            "model", "output", "n", "auc", "acc", "f1"
        );
        for r in &self.binary {
            let _ = writeln!(
                s,
                "{:<22} {:<28} {:>5} {} {} {}",
                r.model,
                r.output,
                r.n,
                fmt(r.metrics.auc),
                fmt(Some(r.metrics.accuracy)),
                fmt(Some(r.metrics.f1))
            );
        }
        let _ = writeln!(
            s,
            "\n{:<22} {:<28} {:>5} {:>6} {:>8}",
            "model", "output", "n", "micro", "weighted"
        );
        for r in &self.multiclass {
            let _ = writeln!(
                s,
                "{:<22} {:<28} {:>5} {} {:>8.3}",
                r.model,
                r.output,
                r.n,
                fmt(Some(r.auc.micro)),
                r.auc.weighted
            );
        }
        let _ = writeln!(
            s,
            "\n{:<10} {:>7} {:>5} {:>9} {:>6} {:>6}",
            "endpoint", "horizon", "n", "censored", "auc", "f1"
        );
        for r in &self.temporal {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>5} {:>9} {} {}",
                r.endpoint,
                m.horizon,
                m.evaluated,
                m.excluded_censored,
                fmt(m.auc),
                fmt(Some(m.f1))
            );
        }
        if !self.notes.is_empty() {
            let _ = writeln!(s, "\nNotes:");
            for n in &self.notes {
                let _ = writeln!(s, "- {n}");
            }
        }
        s
    }
}

fn stage_tensor(sim: &Simulator, records: &[CohortRecord], stage: Stage) -> Result<Tensor> {
    let rows = records
        .iter()
        .map(|r| {
            sim.encoder
                .encode(&r.features, Some(&StageContext::from_record(r, stage)))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

fn transition_rows(
    report: &mut MetricReport,
    sim: &Simulator,
    records: &[CohortRecord],
    stage: Stage,
) -> Result<()> {
    // The post-IC model is only defined for patients who received IC.
    let subset: Vec<CohortRecord> = records
        .iter()
        .filter(|r| stage != Stage::Ic || r.sequence.ic)
        .cloned()
        .collect();
    let model_name = format!("transition_after_{}", stage.label());
    if subset.is_empty() {
        report
            .notes
            .push(format!("{model_name}: no evaluable records"));
        return Ok(());
    }
    let model = if stage == Stage::Ic {
        &sim.post_ic
    } else {
        &sim.post_cc
    };
    let x = stage_tensor(sim, &subset, stage)?;
    let decisions: Vec<bool> = subset.iter().map(|r| r.sequence.decision(stage)).collect();
    let dists = model.predict_rows(&x, &decisions, &mut Masks::off())?;
    let truth: Vec<&TransitionState> = subset
        .iter()
        .map(|r| {
            if stage == Stage::Ic {
                &r.after_ic
            } else {
                &r.after_cc
            }
        })
        .collect();
    let primary: Vec<Vec<f64>> = dists.iter().map(|d| d.primary.to_vec()).collect();
    let nodal: Vec<Vec<f64>> = dists.iter().map(|d| d.nodal.to_vec()).collect();
    let pl: Vec<usize> = truth.iter().map(|t| t.primary_response as usize).collect();
    let nl: Vec<usize> = truth.iter().map(|t| t.nodal_response as usize).collect();
    report.push_multiclass(&model_name, "primary_response", &primary, &pl);
    report.push_multiclass(&model_name, "nodal_response", &nodal, &nl);
    for k in 0..DLT_KINDS {
        let scores: Vec<f64> = dists.iter().map(|d| d.dlt[k]).collect();
        let labels: Vec<bool> = truth.iter().map(|t| t.dlt[k]).collect();
        report.push_binary(
            &model_name,
            &format!("dlt_{}", DLT_NAMES[k]),
            &scores,
            &labels,
        )?;
    }
    Ok(())
}

/// Metrics of every model on held-out records.
///
/// The optimal head is scored against optimal labels for the evaluation
/// patients, computed with the same simulator and weights.
pub fn evaluate(
    sim: &Simulator,
    policy: Option<&PolicyModel>,
    weights: &OptimalObjectiveWeights,
    records: &[CohortRecord],
) -> Result<MetricReport> {
    let mut report = MetricReport {
        evaluated_patients: records.len(),
        ..Default::default()
    };
    if records.is_empty() {
        report.notes.push("no evaluation records".into());
        return Ok(report);
    }
    transition_rows(&mut report, sim, records, Stage::Ic)?;
    transition_rows(&mut report, sim, records, Stage::Cc)?;

    let x = stage_tensor(sim, records, Stage::Nd)?;
    let nd: Vec<bool> = records.iter().map(|r| r.sequence.nd).collect();
    let risk = sim
        .static_outcome
        .predict_rows(&x, &nd, &mut Masks::off())?;
    let ft: Vec<f64> = risk.iter().map(|r| r.ft).collect();
    let asp: Vec<f64> = risk.iter().map(|r| r.aspiration_post).collect();
    let ft_l: Vec<bool> = records.iter().map(|r| r.outcome.ft).collect();
    let asp_l: Vec<bool> = records.iter().map(|r| r.outcome.aspiration_post).collect();
    report.push_binary("static_outcome", "feeding_tube", &ft, &ft_l)?;
    report.push_binary("static_outcome", "aspiration_post", &asp, &asp_l)?;

    let curves = sim.survival.predict_rows(&x, &nd, &mut Masks::off())?;
    for e in Endpoint::ALL {
        let c: Vec<_> = curves.iter().map(|c| c[e.index()].clone()).collect();
        let o: Vec<_> = records.iter().map(|r| r.outcome.endpoint(e)).collect();
        for h in HORIZONS {
            match horizon_metrics(&c, &o, h) {
                Ok(metrics) => report.temporal.push(TemporalRow {
                    endpoint: e.label().into(),
                    metrics,
                }),
                Err(err) => report
                    .notes
                    .push(format!("{} at {h} months: {err}", e.label())),
            }
        }
    }

    if let Some(policy) = policy {
        let patients: Vec<_> = records.iter().map(|r| r.features.clone()).collect();
        let optimal: Vec<_> = optimal_choices(sim, &patients, weights)?
            .into_iter()
            .map(|c| c.sequence)
            .collect();
        let opt_x = simulated_inputs(sim, &sim.encoder, &patients, &optimal)?;
        for stage in Stage::ALL {
            for s in Strategy::ALL {
                let (x, labels): (Tensor, Vec<bool>) = match s {
                    Strategy::Imitation => (
                        stage_tensor(sim, records, stage)?,
                        records.iter().map(|r| r.sequence.decision(stage)).collect(),
                    ),
                    Strategy::Optimal => (
                        Tensor::from_rows(&opt_x[stage.index()])?,
                        optimal.iter().map(|q| q.decision(stage)).collect(),
                    ),
                };
                let (p, _) = policy.predict_rows(&x, stage, s, &mut Masks::off())?;
                report.push_binary(
                    &format!("policy_{}", s.label()),
                    &format!("decision_{}", stage.label()),
                    &p,
                    &labels,
                )?;
            }
        }
    }
    Ok(report)
}
