use std::sync::OnceLock;

use proptest::prelude::{prop_assert, prop_assert_eq, prop_oneof, proptest, Just, ProptestConfig};
use seqtwin::cohort::*;
use seqtwin::evaluation::auc;
use seqtwin::policy::*;
use seqtwin::simulator::*;
use seqtwin::tensor::{det_rng, multi_head_attention, Graph, Masks, Tensor};
use seqtwin::training::TrainConfig;
use seqtwin::{Error, Result};

struct Fixture {
    train: Vec<CohortRecord>,
    eval: Vec<CohortRecord>,
    enc: FeatureEncoder,
    sim: Simulator,
    model: PolicyModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cohort =
            generate_synthetic_cohort(1, 536, &SyntheticConfig::logistic_staging()).unwrap();
        let (train, eval) = stratified_split(&cohort, 1).unwrap();
        let enc = FeatureEncoder::fit(&train);
        let sim = fit_simulator(&train, &enc, &SimulatorConfig::desk(), 1).unwrap();
        let (model, _) = fit_policy(&train, &enc, &sim, &PolicyConfig::desk(), 1).unwrap();
        Fixture {
            train,
            eval,
            enc,
            sim,
            model,
        }
    })
}

fn stage_rows(enc: &FeatureEncoder, records: &[CohortRecord], stage: Stage) -> Tensor {
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            enc.encode(&r.features, Some(&StageContext::from_record(r, stage)))
                .unwrap()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

// ---- optimal labels on a hand-built simulator ----

fn trajectory(seq: TreatmentSequence, ft: f64, dlt_ic: f64, os_mu: f64) -> Trajectory {
    let mut after_ic = TransitionDist::stable();
    after_ic.dlt[0] = dlt_ic;
    Trajectory {
        sequence: seq,
        after_ic,
        after_cc: TransitionDist::stable(),
        static_risk: StaticRisk {
            ft,
            aspiration_post: 0.3,
        },
        survival: [
            MixtureParams::single(os_mu, 0.8),
            MixtureParams::single(3.0, 0.8),
            MixtureParams::single(3.0, 0.8),
        ],
    }
}

/// FT 0.4, halved by CC. Patients over 55 lose another 0.15 of FT risk with
/// IC, which carries a 0.1 dysphagia DLT risk. ND doubles the OS median
/// (20 to 40 months) for patients over 65.
struct Stub;

impl SequenceSimulator for Stub {
    fn simulate(&self, p: &PatientFeatures, s: &TreatmentSequence) -> Result<Trajectory> {
        let mut ft = if s.cc { 0.2 } else { 0.4 };
        if s.ic && p.age > 55.0 {
            ft -= 0.15;
        }
        let dlt = if s.ic { 0.1 } else { 0.0 };
        let mu = 20f64.ln() + if s.nd && p.age > 65.0 { 2f64.ln() } else { 0.0 };
        Ok(trajectory(*s, ft, dlt, mu))
    }
}

fn patient(age: f64) -> PatientFeatures {
    let mut p = fixture_free_patient();
    p.age = age;
    p
}

fn fixture_free_patient() -> PatientFeatures {
    generate_synthetic_cohort(3, 16, &SyntheticConfig::default()).unwrap()[0]
        .features
        .clone()
}

fn stub_weights() -> OptimalObjectiveWeights {
    let mut w = OptimalObjectiveWeights::feeding_tube_only();
    w.binary.dlt_after_ic[0] = 1.0;
    w.w_s = 1.0;
    w.temporal = [1.0, 0.0, 0.0];
    w
}

#[test]
fn constant_objective_breaks_ties_toward_no_treatment() {
    struct Flat;
    impl SequenceSimulator for Flat {
        fn simulate(&self, _: &PatientFeatures, s: &TreatmentSequence) -> Result<Trajectory> {
            Ok(trajectory(*s, 0.3, 0.0, 3.0))
        }
    }
    let s = compute_optimal_labels(
        &Flat,
        &patient(50.0),
        &OptimalObjectiveWeights::feeding_tube_only(),
    )
    .unwrap();
    assert_eq!((s.ic, s.cc, s.nd), (false, false, false));
}

#[test]
fn cc_halving_feeding_tube_selects_cc_only() {
    let s = compute_optimal_labels(
        &Stub,
        &patient(40.0),
        &OptimalObjectiveWeights::feeding_tube_only(),
    )
    .unwrap();
    assert_eq!((s.ic, s.cc, s.nd), (false, true, false));
}

#[test]
fn stub_argmin_matches_hand_computation() {
    // Objective per sequence (ic, cc, nd) in code order, by hand:
    //   age 40: FT + DLT + 1/20; IC gives no FT benefit.
    //   age 60: IC lowers FT by 0.15.
    //   age 70: as 60, and ND changes 1/20 to 1/40.
    let hand: [(f64, [f64; 8], (bool, bool, bool)); 3] = [
        (
            40.0,
            [0.45, 0.45, 0.25, 0.25, 0.55, 0.55, 0.35, 0.35],
            (false, true, false),
        ),
        (
            60.0,
            [0.45, 0.45, 0.25, 0.25, 0.40, 0.40, 0.20, 0.20],
            (true, true, false),
        ),
        (
            70.0,
            [0.45, 0.425, 0.25, 0.225, 0.40, 0.375, 0.20, 0.175],
            (true, true, true),
        ),
    ];
    let patients: Vec<PatientFeatures> = hand.iter().map(|h| patient(h.0)).collect();
    let choices = optimal_choices(&Stub, &patients, &stub_weights()).unwrap();
    for (c, (age, objectives, best)) in choices.iter().zip(&hand) {
        for (got, want) in c.objectives.iter().zip(objectives) {
            assert!((got - want).abs() < 1e-9, "age {age}: {got} vs {want}");
        }
        assert_eq!(
            (c.sequence.ic, c.sequence.cc, c.sequence.nd),
            *best,
            "age {age}"
        );
    }
}

#[test]
fn non_finite_objective_names_the_sequence() {
    struct Broken;
    impl SequenceSimulator for Broken {
        fn simulate(&self, _: &PatientFeatures, s: &TreatmentSequence) -> Result<Trajectory> {
            let ft = if s.ic && s.nd { f64::NAN } else { 0.1 };
            Ok(trajectory(*s, ft, 0.0, 3.0))
        }
    }
    let err = compute_optimal_labels(
        &Broken,
        &patient(50.0),
        &OptimalObjectiveWeights::feeding_tube_only(),
    )
    .unwrap_err();
    match err {
        Error::NonFinite(m) => assert!(m.contains("IC + ND"), "{m}"),
        e => panic!("unexpected {e:?}"),
    }
}

#[test]
fn all_zero_weights_are_rejected() {
    let mut w = OptimalObjectiveWeights::feeding_tube_only();
    w.binary.feeding_tube = 0.0;
    assert!(matches!(w.validate(), Err(Error::Config(_))));
    let mut w = OptimalObjectiveWeights::default();
    w.w_s = -1.0;
    assert!(matches!(w.validate(), Err(Error::Config(_))));
}

#[test]
fn tie_break_order_prefers_fewer_treatments_then_earlier_no() {
    let labels: Vec<String> = tie_break_order().iter().map(|s| s.label()).collect();
    assert_eq!(
        labels,
        [
            "None",
            "ND",
            "CC",
            "IC",
            "CC + ND",
            "IC + ND",
            "IC + CC",
            "IC + CC + ND"
        ]
    );
}

/// Looks trajectories up in a table of FT risks indexed by sequence code.
struct Table(Vec<f64>);

impl SequenceSimulator for Table {
    fn simulate(&self, _: &PatientFeatures, s: &TreatmentSequence) -> Result<Trajectory> {
        Ok(trajectory(*s, self.0[s.code()], 0.0, 3.0))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chosen_sequence_minimizes_the_objective(
        ft in proptest::collection::vec(prop_oneof![0.0..1.0, Just(0.5)], 8),
    ) {
        let c = &optimal_choices(
            &Table(ft.clone()),
            &[patient(50.0)],
            &OptimalObjectiveWeights::feeding_tube_only(),
        ).unwrap()[0];
        let best = c.objectives[c.sequence.code()];
        prop_assert!(c.objectives.iter().all(|&o| best <= o));
        // Among equal minima the earliest in tie-break order wins.
        let first = tie_break_order().into_iter().find(|s| c.objectives[s.code()] == best).unwrap();
        prop_assert_eq!(first.code(), c.sequence.code());
    }

    #[test]
    fn triplet_term_is_a_hinge(d_ab in 0.0..5.0f64, d_ac in 0.0..5.0f64, margin in 0.0..3.0f64) {
        let t = triplet_term(d_ab, d_ac, margin);
        prop_assert!(t >= 0.0);
        prop_assert_eq!(t == 0.0, d_ac >= d_ab + margin);
    }
}

#[test]
fn triplet_examples() {
    assert_eq!(triplet_term(0.0, 2.0, 1.0), 0.0);
    assert_eq!(triplet_term(1.3, 1.3, 1.0), 1.0);
    let c = TripletConfig::default();
    assert_eq!((c.w1, c.w2, c.margin), (1.0, 0.2, 1.0));
    assert!(TripletConfig { w2: -0.1, ..c }.validate().is_err());
}

// ---- augmentation ----

#[test]
fn augmentation_only_permutes_pretreatment_columns() {
    let cohort = generate_synthetic_cohort(4, 200, &SyntheticConfig::default()).unwrap();
    let mut rng = det_rng(4);
    let same = augment_records(&cohort, 0.0, &mut rng);
    assert_eq!(same, cohort);
    let shuffled = augment_records(&cohort, 1.0, &mut rng);
    let mut moved = 0;
    for (a, b) in cohort.iter().zip(&shuffled) {
        assert_eq!(a.sequence, b.sequence);
        assert_eq!(a.after_ic, b.after_ic);
        assert_eq!(a.after_cc, b.after_cc);
        assert_eq!(a.outcome, b.outcome);
        moved += (a.features != b.features) as usize;
    }
    assert!(moved > 150);
    // Each column keeps its multiset of values.
    let mut ages_a: Vec<f64> = cohort.iter().map(|r| r.features.age).collect();
    let mut ages_b: Vec<f64> = shuffled.iter().map(|r| r.features.age).collect();
    ages_a.sort_by(f64::total_cmp);
    ages_b.sort_by(f64::total_cmp);
    assert_eq!(ages_a, ages_b);
    for k in 0..LYMPH_NODE_REGIONS {
        let ca = cohort
            .iter()
            .filter(|r| r.features.lymph_node_regions[k])
            .count();
        let cb = shuffled
            .iter()
            .filter(|r| r.features.lymph_node_regions[k])
            .count();
        assert_eq!(ca, cb);
    }
}

// ---- attention ----

#[test]
fn cohort_attention_matches_explicit_projections() {
    let memory: Vec<Tensor> = (0..3)
        .map(|s| {
            Tensor::matrix(
                5,
                FULL_LEN,
                (0..5 * FULL_LEN)
                    .map(|i| ((i * 7 + s) % 11) as f64 / 11.0)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let arch = PolicyArch {
        width: 16,
        ffn_width: 8,
        ..PolicyArch::desk()
    };
    let model = PolicyModel::new(&arch, memory, 9).unwrap();
    let a = model.attention;
    let mut g = Graph::new(&model.store);
    let x = g.input(
        "x",
        Tensor::matrix(3, 16, (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
    );
    let m = g.input(
        "m",
        Tensor::matrix(5, 16, (0..80).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap(),
    );
    let fast = a
        .forward(&mut g, x, m, AttentionOrientation::Standard)
        .unwrap();
    let q = a.query.forward(&mut g, x).unwrap();
    let wk = g.param(a.key_weight);
    let k = g.matmul(m, wk).unwrap();
    let v = a.value.forward(&mut g, m).unwrap();
    let att = multi_head_attention(&mut g, q, k, v, 4).unwrap();
    let slow = a.output.forward(&mut g, att.output).unwrap();
    for (p, q) in g.value(fast).data().iter().zip(g.value(slow).data()) {
        assert!((p - q).abs() < 1e-10, "{p} vs {q}");
    }

    // The alternative orientation ignores the memory entirely.
    let m2 = g.input("m2", Tensor::full(&[7, 16], 0.3));
    let p1 = a
        .forward(&mut g, x, m, AttentionOrientation::MemoryQueries)
        .unwrap();
    let p2 = a
        .forward(&mut g, x, m2, AttentionOrientation::MemoryQueries)
        .unwrap();
    assert_eq!(g.value(p1), g.value(p2));
}

// ---- trained model ----

#[test]
fn imitation_head_recovers_staging_decisions() {
    let f = fixture();
    for stage in Stage::ALL {
        let x = stage_rows(&f.enc, &f.eval, stage);
        let (p, _) = f
            .model
            .predict_rows(&x, stage, Strategy::Imitation, &mut Masks::off())
            .unwrap();
        let labels: Vec<bool> = f.eval.iter().map(|r| r.sequence.decision(stage)).collect();
        let a = auc(&p, &labels).unwrap().unwrap();
        eprintln!("{} held-out imitation AUC {a:.3}", stage.label());
        assert!(a >= 0.85, "{} AUC {a}", stage.label());
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn zeroed_head_gives_one_half() {
    let f = fixture();
    let mut m = f.model.clone();
    for s in Strategy::ALL {
        let h = m.heads[s.index()];
        for id in [h.out.weight, h.out.bias] {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        let r = &f.eval[0];
        let out = m
            .predict(&f.enc, &r.features, &StageContext::at_ic(), s)
            .unwrap();
        assert_eq!(out.probability, 0.5);
        assert_eq!(out.strategy, s);
    }
}

#[test]
fn embeddings_differ_between_stages() {
    let f = fixture();
    let r = &f.eval[1];
    let ic = f
        .model
        .predict(
            &f.enc,
            &r.features,
            &StageContext::at_ic(),
            Strategy::Imitation,
        )
        .unwrap();
    let mut ctx = StageContext::from_record(r, Stage::Cc);
    let cc = f
        .model
        .predict(&f.enc, &r.features, &ctx, Strategy::Imitation)
        .unwrap();
    assert_eq!(ic.embedding.len(), 20);
    assert_ne!(ic.embedding, cc.embedding);

    // Position token alone: the same encoded row at two stages.
    let x = Tensor::row(&f.enc.encode(&r.features, Some(&ctx)).unwrap());
    let (_, e_cc) = f
        .model
        .predict_rows(&x, Stage::Cc, Strategy::Imitation, &mut Masks::off())
        .unwrap();
    let (_, e_nd) = f
        .model
        .predict_rows(&x, Stage::Nd, Strategy::Imitation, &mut Masks::off())
        .unwrap();
    assert_ne!(e_cc, e_nd);

    ctx.after_ic = None;
    match f
        .model
        .predict(&f.enc, &r.features, &ctx, Strategy::Imitation)
    {
        Err(Error::Usage(m)) => assert!(m.contains("after_ic"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
    let ctx = StageContext {
        stage: Stage::Nd,
        after_ic: ctx.after_ic.or(Some(StageResult {
            decision: true,
            transition: TransitionDist::stable(),
        })),
        after_cc: None,
    };
    match f
        .model
        .predict(&f.enc, &r.features, &ctx, Strategy::Optimal)
    {
        Err(Error::Usage(m)) => assert!(m.contains("after_cc"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn t_stage_sweep_moves_ic_probability_monotonically() {
    // IC is given more often as T + N grows, so sweeping T from 1 to 4 should
    // raise the imitation probability.
    let f = fixture();
    for r in f.eval.iter().take(10) {
        let probs: Vec<f64> = (1..=4)
            .map(|t| {
                let mut p = r.features.clone();
                p.t_stage = t;
                f.model
                    .predict(&f.enc, &p, &StageContext::at_ic(), Strategy::Imitation)
                    .unwrap()
                    .probability
            })
            .collect();
        assert!(
            probs.windows(2).all(|w| w[1] >= w[0]),
            "non-monotone sweep {probs:?}"
        );
        assert!(probs[3] - probs[0] > 0.1, "{probs:?}");
    }
}

#[test]
fn untrained_model_is_a_usage_error() {
    let f = fixture();
    let m = PolicyModel::new(&PolicyArch::desk(), f.model.memory.clone(), 0).unwrap();
    let r = &f.eval[0];
    assert!(matches!(
        m.predict(
            &f.enc,
            &r.features,
            &StageContext::at_ic(),
            Strategy::Imitation
        ),
        Err(Error::Usage(_))
    ));
}

#[test]
fn head_retraining_is_reproducible_and_freezes_the_encoder() {
    let f = fixture();
    let cfg = PolicyConfig {
        train: TrainConfig {
            max_epochs: 4,
            ..TrainConfig::default()
        },
        ..PolicyConfig::desk()
    };
    let data = PolicyData::build(&f.train, &f.enc, &f.sim, &cfg.objective).unwrap();
    let run = || {
        let mut m = f.model.clone();
        retrain_heads(&mut m, &data, &f.enc, &f.sim, &cfg, 77).unwrap();
        m
    };
    let (a, b) = (run(), run());
    for p in f.model.encoder_params() {
        assert_eq!(a.store.get(p), f.model.store.get(p), "{}", a.store.name(p));
    }
    let changed = Strategy::ALL
        .iter()
        .flat_map(|&s| a.head_params(s))
        .any(|p| a.store.get(p) != f.model.store.get(p));
    assert!(changed, "head parameters did not move");
    for stage in Stage::ALL {
        let x = stage_rows(&f.enc, &f.eval, stage);
        for s in Strategy::ALL {
            let (pa, _) = a.predict_rows(&x, stage, s, &mut Masks::off()).unwrap();
            let (pb, _) = b.predict_rows(&x, stage, s, &mut Masks::off()).unwrap();
            for (u, v) in pa.iter().zip(&pb) {
                assert!((u - v).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn policy_training_is_deterministic() {
    let f = fixture();
    let cfg = PolicyConfig {
        train: TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        },
        ..PolicyConfig::desk()
    };
    let train = &f.train[..120];
    let (a, ra) = fit_policy(train, &f.enc, &f.sim, &cfg, 5).unwrap();
    let (b, rb) = fit_policy(train, &f.enc, &f.sim, &cfg, 5).unwrap();
    assert_eq!(a.store, b.store);
    assert_eq!(ra, rb);
    assert_eq!(ra.optimal_sequence_counts.iter().sum::<usize>(), 120);
}
