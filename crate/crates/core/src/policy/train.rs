use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{PolicyArch, PolicyModel, Strategy};
use super::objective::{optimal_choices, OptimalObjectiveWeights, SequenceSimulator};
use crate::cohort::{
    CohortRecord, FeatureEncoder, PatientFeatures, Stage, StageContext, StageResult,
    TreatmentSequence, FULL_LEN, LYMPH_NODE_REGIONS,
};
use crate::error::{Error, Result};
use crate::tensor::loss::bce_with_logits;
use crate::tensor::{
    derive_seed, det_rng, AdamState, DetRng, Graph, Masks, NodeId, ParamGrads, Tensor,
};
use crate::training::{fit_early_stopping, holdout, FitReport, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub w1: f64,
    pub w2: f64,
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            w1: 1.0,
            w2: 0.2,
            margin: 1.0,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.w1, self.w2, self.margin]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(
                "triplet weights and margin must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// max(d(a,b) − d(a,c) + margin, 0)
pub fn triplet_term(d_ab: f64, d_ac: f64, margin: f64) -> f64 {
    (d_ab - d_ac + margin).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub arch: PolicyArch,
    pub triplet: TripletConfig,
    /// Per-epoch probability that a pre-treatment column is shuffled for the optimal head.
    pub augment_probability: f64,
    pub objective: OptimalObjectiveWeights,
    pub train: TrainConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            arch: PolicyArch::default(),
            triplet: TripletConfig::default(),
            augment_probability: 0.25,
            objective: OptimalObjectiveWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn desk() -> Self {
        PolicyConfig {
            arch: PolicyArch::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.triplet.validate()?;
        self.objective.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(Error::Config(format!(
                "augmentation probability {} outside [0, 1]",
                self.augment_probability
            )));
        }
        Ok(())
    }
}

/// Number of pre-treatment columns eligible for shuffling.
pub const AUGMENT_COLUMNS: usize = 15 + LYMPH_NODE_REGIONS;

fn copy_column(dst: &mut PatientFeatures, src: &PatientFeatures, col: usize) {
    match col {
        0 => dst.age = src.age,
        1 => dst.is_male = src.is_male,
        2 => dst.race = src.race,
        3 => dst.hpv = src.hpv,
        4 => dst.smoking_status = src.smoking_status,
        5 => dst.pack_years = src.pack_years,
        6 => dst.t_stage = src.t_stage,
        7 => dst.n_stage = src.n_stage,
        8 => dst.ajcc_stage = src.ajcc_stage,
        9 => dst.pathological_grade = src.pathological_grade,
        10 => dst.subsite = src.subsite,
        11 => dst.bilateral = src.bilateral,
        12 => dst.total_dose = src.total_dose,
        13 => dst.dose_fraction = src.dose_fraction,
        14 => dst.aspiration_pre = src.aspiration_pre,
        c => {
            let k = c - 15;
            dst.lymph_node_regions[k] = src.lymph_node_regions[k];
        }
    }
}

/// Shuffle each pre-treatment column across patients with probability `prob`.
pub fn augment_features(
    patients: &[PatientFeatures],
    prob: f64,
    rng: &mut DetRng,
) -> Vec<PatientFeatures> {
    let mut out = patients.to_vec();
    let mut perm: Vec<usize> = (0..patients.len()).collect();
    for col in 0..AUGMENT_COLUMNS {
        if rng.random::<f64>() < prob {
            perm.shuffle(rng);
            for (i, &j) in perm.iter().enumerate() {
                copy_column(&mut out[i], &patients[j], col);
            }
        }
    }
    out
}

/// Records with shuffled pre-treatment columns; decisions, transitions and
/// outcomes are left as they were.
pub fn augment_records(records: &[CohortRecord], prob: f64, rng: &mut DetRng) -> Vec<CohortRecord> {
    let feats: Vec<PatientFeatures> = records.iter().map(|r| r.features.clone()).collect();
    let shuffled = augment_features(&feats, prob, rng);
    records
        .iter()
        .zip(shuffled)
        .map(|(r, f)| CohortRecord {
            features: f,
            ..r.clone()
        })
        .collect()
}

/// Encoded inputs along each patient's sequence with simulated transitions.
pub fn simulated_inputs(
    sim: &dyn SequenceSimulator,
    encoder: &FeatureEncoder,
    patients: &[PatientFeatures],
    sequences: &[TreatmentSequence],
) -> Result<[Vec<Vec<f64>>; 3]> {
    let n = patients.len();
    let mut out: [Vec<Vec<f64>>; 3] = std::array::from_fn(|_| vec![Vec::new(); n]);
    for s in TreatmentSequence::all() {
        let idx: Vec<usize> = (0..n)
            .filter(|&i| sequences[i].code() == s.code())
            .collect();
        if idx.is_empty() {
            continue;
        }
        let ps: Vec<PatientFeatures> = idx.iter().map(|&i| patients[i].clone()).collect();
        let ts = sim.simulate_batch(&ps, &s)?;
        for ((&i, p), t) in idx.iter().zip(&ps).zip(&ts) {
            let ic = StageResult {
                decision: s.ic,
                transition: t.after_ic,
            };
            let cc = StageResult {
                decision: s.cc,
                transition: t.after_cc,
            };
            let ctxs = [
                StageContext::at_ic(),
                StageContext {
                    stage: Stage::Cc,
                    after_ic: Some(ic),
                    after_cc: None,
                },
                StageContext {
                    stage: Stage::Nd,
                    after_ic: Some(ic),
                    after_cc: Some(cc),
                },
            ];
            for (k, c) in ctxs.iter().enumerate() {
                out[k][i] = encoder.encode(p, Some(c))?;
            }
        }
    }
    Ok(out)
}

/// Inputs, labels and sequence classes for one head.
#[derive(Debug, Clone)]
pub struct HeadData {
    /// Per stage, one encoded row per patient.
    pub x: [Vec<Vec<f64>>; 3],
    pub sequences: Vec<TreatmentSequence>,
}

/// Everything the policy trainer needs, computed once.
#[derive(Debug, Clone)]
pub struct PolicyData {
    pub patients: Vec<PatientFeatures>,
    pub imitation: HeadData,
    pub optimal: HeadData,
}

impl PolicyData {
    pub fn build(
        train: &[CohortRecord],
        encoder: &FeatureEncoder,
        sim: &dyn SequenceSimulator,
        weights: &OptimalObjectiveWeights,
    ) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::Config(
                "policy training needs at least two patients".into(),
            ));
        }
        let patients: Vec<PatientFeatures> = train.iter().map(|r| r.features.clone()).collect();
        let mut ix: [Vec<Vec<f64>>; 3] = Default::default();
        for stage in Stage::ALL {
            ix[stage.index()] = train
                .iter()
                .map(|r| encoder.encode(&r.features, Some(&StageContext::from_record(r, stage))))
                .collect::<Result<_>>()?;
        }
        let optimal: Vec<TreatmentSequence> = optimal_choices(sim, &patients, weights)?
            .into_iter()
            .map(|c| c.sequence)
            .collect();
        let ox = simulated_inputs(sim, encoder, &patients, &optimal)?;
        Ok(PolicyData {
            patients,
            imitation: HeadData {
                x: ix,
                sequences: train.iter().map(|r| r.sequence).collect(),
            },
            optimal: HeadData {
                x: ox,
                sequences: optimal,
            },
        })
    }

    /// Stored cohort memory: ground-truth encoded states per stage.
    pub fn memory(&self) -> Result<Vec<Tensor>> {
        self.imitation
            .x
            .iter()
            .map(|rows| Tensor::from_rows(rows))
            .collect()
    }

    fn head(&self, s: Strategy) -> &HeadData {
        match s {
            Strategy::Imitation => &self.imitation,
            Strategy::Optimal => &self.optimal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFitReport {
    pub fit: FitReport,
    /// Training patients per optimal sequence, indexed by sequence code.
    pub optimal_sequence_counts: [usize; 8],
}

/// Anchors with their sampled positive and negative partners for one head.
struct Triplets {
    anchors: Vec<usize>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

fn sample_triplets(
    batch: &[usize],
    pool: &[usize],
    sequences: &[TreatmentSequence],
    rng: &mut DetRng,
) -> Triplets {
    let mut t = Triplets {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (pos, &p) in batch.iter().enumerate() {
        let code = sequences[p].code();
        let same: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&q| q != p && sequences[q].code() == code)
            .collect();
        let other: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&q| sequences[q].code() != code)
            .collect();
        // Without a positive (or a negative) the patient skips the triplet term.
        if let (Some(&b), Some(&c)) = (same.choose(rng), other.choose(rng)) {
            t.anchors.push(pos);
            t.positives.push(b);
            t.negatives.push(c);
        }
    }
    t
}

fn row_distances(g: &mut Graph<'_>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let cols = g.value(sq).cols();
    let ones = g.constant(Tensor::full(&[cols, 1], 1.0));
    let s = g.matmul(sq, ones)?;
    let s = g.add_scalar(s, 1e-12);
    Ok(g.sqrt(s))
}

fn rows_of(x: &[Vec<f64>], idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * FULL_LEN);
    for &i in idx {
        out.extend_from_slice(&x[i]);
    }
    out
}

/// Per-patient-mean loss over `batch` for both heads, with gradients when
/// masks are active.
fn batch_loss(
    model: &PolicyModel,
    data: &PolicyData,
    opt_x: &[Vec<Vec<f64>>; 3],
    batch: &[usize],
    pool: &[usize],
    triplet: &TripletConfig,
    rng: &mut DetRng,
    train: bool,
) -> Result<(f64, Option<ParamGrads>)> {
    let n = batch.len();
    let use_triplet = train && triplet.w2 > 0.0;
    let trips: Vec<Option<Triplets>> = Strategy::ALL
        .iter()
        .map(|&s| use_triplet.then(|| sample_triplets(batch, pool, &data.head(s).sequences, rng)))
        .collect();

    // Row layout per stage: for each head, anchors then positives then negatives.
    let mut segments = Vec::new();
    let mut offset = 0;
    for (h, s) in Strategy::ALL.iter().enumerate() {
        let k = trips[h].as_ref().map_or(0, |t| t.anchors.len());
        segments.push((offset, k));
        offset += n + 2 * k;
        let _ = s;
    }
    let total_rows = offset;

    let mut mask_rng = det_rng(rng.random());
    let mut masks = if train {
        Masks::on(&mut mask_rng)
    } else {
        Masks::off()
    };
    let mut g = Graph::new(&model.store);
    let mut loss_terms = Vec::new();
    for stage in Stage::ALL {
        let si = stage.index();
        let mut rows = Vec::with_capacity(total_rows * FULL_LEN);
        for (h, s) in Strategy::ALL.iter().enumerate() {
            let x = match s {
                Strategy::Imitation => &data.imitation.x[si],
                Strategy::Optimal => &opt_x[si],
            };
            rows.extend(rows_of(x, batch));
            if let Some(t) = &trips[h] {
                rows.extend(rows_of(x, &t.positives));
                rows.extend(rows_of(x, &t.negatives));
            }
        }
        let xin = g.input("x", Tensor::matrix(total_rows, FULL_LEN, rows)?);
        let enc = model.encode(&mut g, xin, stage, &mut masks)?;
        for (h, &s) in Strategy::ALL.iter().enumerate() {
            let (start, k) = segments[h];
            let idx: Vec<usize> = (start..start + n + 2 * k).collect();
            let sub = g.gather_rows(enc, &idx)?;
            let out = model.head(&mut g, sub, s, &mut masks)?;
            let anchor_idx: Vec<usize> = (0..n).collect();
            let logits = g.gather_rows(out.logits, &anchor_idx)?;
            let y: Vec<f64> = batch
                .iter()
                .map(|&p| data.head(s).sequences[p].decision(stage) as u8 as f64)
                .collect();
            let bce = bce_with_logits(&mut g, logits, Tensor::matrix(n, 1, y)?)?;
            loss_terms.push(g.scale(bce, triplet.w1));
            if let Some(t) = &trips[h] {
                if k > 0 {
                    let a = g.gather_rows(out.embedding, &t.anchors)?;
                    let b = g.gather_rows(out.embedding, &(n..n + k).collect::<Vec<_>>())?;
                    let c =
                        g.gather_rows(out.embedding, &(n + k..n + 2 * k).collect::<Vec<_>>())?;
                    let dab = row_distances(&mut g, a, b)?;
                    let dac = row_distances(&mut g, a, c)?;
                    let diff = g.sub(dab, dac)?;
                    let shifted = g.add_scalar(diff, triplet.margin);
                    let hinge = g.relu(shifted);
                    let sum = g.sum_all(hinge);
                    // Triplet distances are averaged over the three stages.
                    loss_terms.push(g.scale(sum, triplet.w2 / 3.0));
                }
            }
        }
    }
    let mut total = loss_terms[0];
    for &t in &loss_terms[1..] {
        total = g.add(total, t)?;
    }
    let loss = g.scale(total, 1.0 / n as f64);
    let value = g.value(loss).data()[0];
    if train {
        Ok((value, Some(g.backward_scalar(loss)?.into_param_grads())))
    } else {
        Ok((value, None))
    }
}

fn train_loop(
    model: &mut PolicyModel,
    data: &PolicyData,
    cfg: &PolicyConfig,
    sim: &dyn SequenceSimulator,
    encoder: &FeatureEncoder,
    adam: &mut AdamState,
    seed: u64,
) -> Result<FitReport> {
    let n = data.patients.len();
    let mut rng = det_rng(derive_seed(seed, 2));
    let (tr, val) = holdout(n, cfg.train.validation_fraction, &mut rng);
    let batches_per_epoch = tr.len().div_ceil(cfg.train.batch_size);
    let mut opt_x = data.optimal.x.clone();
    let mut aug_rng = det_rng(derive_seed(seed, 3));
    let mut step_count = 0usize;
    let mut eval_rng = det_rng(0);
    let report = fit_early_stopping(
        model,
        &tr,
        &cfg.train,
        &mut rng,
        |m, batch, rng| {
            if step_count % batches_per_epoch == 0 && cfg.augment_probability > 0.0 {
                // Fresh column shuffle of the training patients for the optimal head.
                let feats: Vec<PatientFeatures> =
                    tr.iter().map(|&i| data.patients[i].clone()).collect();
                let shuffled = augment_features(&feats, cfg.augment_probability, &mut aug_rng);
                let seqs: Vec<TreatmentSequence> =
                    tr.iter().map(|&i| data.optimal.sequences[i]).collect();
                let x = simulated_inputs(sim, encoder, &shuffled, &seqs)?;
                for (k, &i) in tr.iter().enumerate() {
                    for s in 0..3 {
                        opt_x[s][i] = x[s][k].clone();
                    }
                }
            }
            step_count += 1;
            let (loss, grads) = batch_loss(m, data, &opt_x, batch, &tr, &cfg.triplet, rng, true)?;
            adam.step(&mut m.store, &grads.expect("training pass"))?;
            Ok(loss)
        },
        |m| {
            if val.is_empty() {
                return Ok(None);
            }
            let clean = &data.optimal.x;
            Ok(Some(
                batch_loss(
                    m,
                    data,
                    clean,
                    &val,
                    &tr,
                    &cfg.triplet,
                    &mut eval_rng,
                    false,
                )?
                .0,
            ))
        },
    )?;
    Ok(report)
}

/// Train both heads and the shared encoder jointly.
pub fn fit_policy(
    train: &[CohortRecord],
    encoder: &FeatureEncoder,
    sim: &dyn SequenceSimulator,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<(PolicyModel, PolicyFitReport)> {
    cfg.validate()?;
    let data = PolicyData::build(train, encoder, sim, &cfg.objective)?;
    let (model, fit) = fit_policy_on(&data, encoder, sim, cfg, seed)?;
    let mut counts = [0usize; 8];
    for s in &data.optimal.sequences {
        counts[s.code()] += 1;
    }
    Ok((
        model,
        PolicyFitReport {
            fit,
            optimal_sequence_counts: counts,
        },
    ))
}

/// [`fit_policy`] on prepared data.
pub fn fit_policy_on(
    data: &PolicyData,
    encoder: &FeatureEncoder,
    sim: &dyn SequenceSimulator,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<(PolicyModel, FitReport)> {
    cfg.validate()?;
    let mut model = PolicyModel::new(&cfg.arch, data.memory()?, derive_seed(seed, 1))?;
    let mut adam = AdamState::new(&model.store, cfg.train.adam);
    let report = train_loop(&mut model, data, cfg, sim, encoder, &mut adam, seed)?;
    model.trained = true;
    Ok((model, report))
}

/// Retrain only the two heads with the shared encoder frozen.
pub fn retrain_heads(
    model: &mut PolicyModel,
    data: &PolicyData,
    encoder: &FeatureEncoder,
    sim: &dyn SequenceSimulator,
    cfg: &PolicyConfig,
    seed: u64,
) -> Result<FitReport> {
    cfg.validate()?;
    let params: Vec<_> = Strategy::ALL
        .iter()
        .flat_map(|&s| model.head_params(s))
        .collect();
    let mut adam = AdamState::for_params(&model.store, params, cfg.train.adam);
    let report = train_loop(model, data, cfg, sim, encoder, &mut adam, seed)?;
    model.trained = true;
    Ok(report)
}
