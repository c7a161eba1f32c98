use std::sync::OnceLock;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Uniform};
use seqtwin::cohort::*;
use seqtwin::simulator::*;
use seqtwin::tensor::{det_rng, Masks, Tensor};
use seqtwin::training::{predict_with_ci, TrainConfig};
use seqtwin::Error;
use statrs::distribution::{ContinuousCDF, Normal};

struct Fixture {
    train: Vec<CohortRecord>,
    eval: Vec<CohortRecord>,
    sim: Simulator,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cohort = generate_synthetic_cohort(11, 536, &SyntheticConfig::default()).unwrap();
        let (train, eval) = stratified_split(&cohort, 11).unwrap();
        let enc = FeatureEncoder::fit(&train);
        let sim = fit_simulator(&train, &enc, &SimulatorConfig::desk(), 11).unwrap();
        Fixture { train, eval, sim }
    })
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn separable_response(level: u8, treated: bool) -> u8 {
    // Treated: stage 1 complete down to stage 4 progressive. Untreated: progressive.
    if treated {
        4 - level.max(1)
    } else {
        0
    }
}

/// Cohort whose post-CC transition is a deterministic function of staging
/// and the CC decision. 536 patients are too few for a 65-wide input to
/// generalize reliably, so a larger cohort is used.
fn separable_cc_cohort(seed: u64) -> (Vec<CohortRecord>, Vec<CohortRecord>) {
    let cohort = generate_synthetic_cohort(seed, 3000, &SyntheticConfig::default()).unwrap();
    let (train_idx, eval_idx) = split_indices(&cohort, seed).unwrap();
    let relabel = |i: &usize| {
        let mut r = cohort[*i].clone();
        r.after_cc.primary_response = separable_response(r.features.t_stage, r.sequence.cc);
        r.after_cc.nodal_response = separable_response(r.features.n_stage, r.sequence.cc);
        r.after_cc.dlt = [false; DLT_KINDS];
        r
    };
    (
        train_idx.iter().map(relabel).collect(),
        eval_idx.iter().map(relabel).collect(),
    )
}

#[test]
fn separable_transition_is_learned() {
    let (train, eval) = separable_cc_cohort(21);
    let enc = FeatureEncoder::fit(&train);
    let cfg = SimulatorConfig::desk();
    let (model, _) =
        fit_transition(&train, &enc, Stage::Cc, &cfg.transition, &cfg.train, 5).unwrap();
    let correct = eval
        .iter()
        .filter(|r| {
            let ctx = StageContext::from_record(r, Stage::Cc);
            let d = model
                .predict(&enc, &r.features, &ctx, r.sequence.cc)
                .unwrap();
            d.mode().primary_response == r.after_cc.primary_response
        })
        .count();
    let acc = correct as f64 / eval.len() as f64;
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn no_ic_forces_stable_with_probability_one() {
    let f = fixture();
    for r in f.eval.iter().take(20) {
        let d = f
            .sim
            .post_ic
            .predict(&f.sim.encoder, &r.features, &StageContext::at_ic(), false)
            .unwrap();
        assert_eq!(d.primary[RESPONSE_STABLE as usize], 1.0);
        assert_eq!(d.nodal[RESPONSE_STABLE as usize], 1.0);
    }
}

#[test]
fn response_heads_sum_to_one() {
    let f = fixture();
    for r in f.eval.iter().take(50) {
        for stage in [Stage::Ic, Stage::Cc] {
            let model = if stage == Stage::Ic {
                &f.sim.post_ic
            } else {
                &f.sim.post_cc
            };
            let ctx = StageContext::from_record(r, stage);
            let d = model
                .predict(&f.sim.encoder, &r.features, &ctx, true)
                .unwrap();
            assert!((d.primary.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((d.nodal.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.dlt.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

#[test]
fn transition_training_is_deterministic() {
    let f = fixture();
    let enc = &f.sim.encoder;
    let arch = MlpArch {
        hidden: vec![16, 16],
        input_dropout: 0.1,
        penultimate_dropout: 0.5,
    };
    let cfg = TrainConfig {
        max_epochs: 5,
        ..Default::default()
    };
    let (a, _) = fit_transition(&f.train, enc, Stage::Cc, &arch, &cfg, 3).unwrap();
    let (b, _) = fit_transition(&f.train, enc, Stage::Cc, &arch, &cfg, 3).unwrap();
    assert_eq!(a.store, b.store);
}

#[test]
fn untrained_model_is_a_usage_error() {
    let f = fixture();
    let m = TransitionModel::new(Stage::Ic, &SimulatorConfig::desk().transition, 0).unwrap();
    let err = m
        .predict(
            &f.sim.encoder,
            &f.eval[0].features,
            &StageContext::at_ic(),
            true,
        )
        .unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

fn with_lognormal_times(seed: u64) -> Vec<CohortRecord> {
    let mut cohort = generate_synthetic_cohort(seed, 536, &SyntheticConfig::default()).unwrap();
    let mut rng = det_rng(seed ^ 0xABCD);
    let t = LogNormal::new(36f64.ln(), 0.5).unwrap();
    let c = Uniform::new(48.0, 96.0).unwrap();
    for r in cohort.iter_mut() {
        for e in r.outcome.endpoints.iter_mut() {
            let (tt, cc): (f64, f64) = (t.sample(&mut rng), c.sample(&mut rng));
            *e = EventTime {
                event: tt <= cc,
                months: tt.min(cc),
            };
        }
    }
    cohort
}

/// Median of the cohort-averaged survival curve.
fn marginal_median(params: &[[MixtureParams; 3]], endpoint: usize) -> f64 {
    let avg = |t: f64| {
        params
            .iter()
            .map(|p| p[endpoint].survival(t).unwrap())
            .sum::<f64>()
            / params.len() as f64
    };
    let (mut lo, mut hi) = (0.1f64, 1000.0f64);
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if avg(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn refit_recovers_lognormal_median() {
    let cohort = with_lognormal_times(31);
    let enc = FeatureEncoder::fit(&cohort);
    let cfg = SimulatorConfig::desk();
    let data = OutcomeData::build(&cohort, &enc).unwrap();
    let (model, _) = fit_survival_model(&data, &cfg.survival, 6, &cfg.train, 31).unwrap();
    let x = Tensor::from_rows(&data.x).unwrap();
    let params = model
        .predict_rows(&x, &data.decisions, &mut Masks::off())
        .unwrap();
    for e in 0..3 {
        let m = marginal_median(&params, e);
        assert!((30.0..=43.0).contains(&m), "endpoint {e} median {m}");
    }
}

#[test]
fn nll_decreases_over_early_epochs() {
    let cohort = with_lognormal_times(41);
    let enc = FeatureEncoder::fit(&cohort);
    let data = OutcomeData::build(&cohort, &enc).unwrap();
    let arch = MlpArch {
        hidden: vec![16],
        input_dropout: 0.0,
        penultimate_dropout: 0.0,
    };
    let mut last = f64::INFINITY;
    for epochs in 1..=5 {
        let cfg = TrainConfig {
            max_epochs: epochs,
            patience: 100,
            batch_size: 1024,
            validation_fraction: 0.0,
            ..Default::default()
        };
        let (m, _) = fit_survival_model(&data, &arch, 6, &cfg, 41).unwrap();
        let nll = m.negative_log_likelihood(&data).unwrap();
        assert!(nll <= last + 1e-12, "epoch {epochs}: {nll} > {last}");
        last = nll;
    }
}

#[test]
fn all_censored_endpoint_is_named() {
    let mut cohort = with_lognormal_times(51);
    for r in cohort.iter_mut() {
        r.outcome.endpoints[Endpoint::Lrc.index()].event = false;
    }
    let enc = FeatureEncoder::fit(&cohort);
    let data = OutcomeData::build(&cohort, &enc).unwrap();
    let cfg = SimulatorConfig::desk();
    match fit_survival_model(&data, &cfg.survival, 6, &cfg.train, 1) {
        Err(Error::AllCensored(name)) => assert_eq!(name, "LRC"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn separable_ft_head_has_high_auc() {
    let mut cohort = generate_synthetic_cohort(61, 536, &SyntheticConfig::default()).unwrap();
    for r in cohort.iter_mut() {
        r.outcome.ft = r.features.t_stage >= 3;
    }
    let (train, eval) = stratified_split(&cohort, 61).unwrap();
    let enc = FeatureEncoder::fit(&train);
    let cfg = SimulatorConfig::desk();
    let train_data = OutcomeData::build(&train, &enc).unwrap();
    let (model, _) = fit_static_model(&train_data, &cfg.static_outcome, &cfg.train, 61).unwrap();
    let eval_data = OutcomeData::build(&eval, &enc).unwrap();
    let risks = model
        .predict_rows(
            &Tensor::from_rows(&eval_data.x).unwrap(),
            &eval_data.decisions,
            &mut Masks::off(),
        )
        .unwrap();
    let scores: Vec<f64> = risks.iter().map(|r| r.ft).collect();
    let labels: Vec<bool> = eval.iter().map(|r| r.outcome.ft).collect();
    let auc = pairwise_auc(&scores, &labels);
    assert!(auc >= 0.9, "FT AUC {auc}");
}

#[test]
fn survival_curve_examples() {
    let single = MixtureParams::single(24f64.ln(), 0.7);
    assert!((single.survival(24.0).unwrap() - 0.5).abs() < 1e-12);
    assert!(single.survival(1e-9).unwrap() > 1.0 - 1e-12);
    let two = MixtureParams {
        weights: vec![0.5, 0.5],
        mu: vec![12f64.ln(), 48f64.ln()],
        sigma: vec![1.0, 1.0],
    };
    let n = Normal::new(0.0, 1.0).unwrap();
    let oracle = 0.5 * (1.0 - n.cdf(2f64.ln())) + 0.5 * (1.0 - n.cdf(-(2f64.ln())));
    let s = two.survival(24.0).unwrap();
    assert!((s - oracle).abs() < 1e-12);
    assert!((s - 0.5).abs() < 1e-12);
    assert!(matches!(single.survival(0.0), Err(Error::Domain(_))));
    assert!(matches!(single.curve(&[1.0, 1.0]), Err(Error::Domain(_))));
    assert_eq!(single.curve_from_zero(&serving_grid()).unwrap()[0], 1.0);
}

#[test]
fn trained_mixtures_are_monotone_and_normalized() {
    let f = fixture();
    let grid: Vec<f64> = (1..=60).map(|m| m as f64).collect();
    let mut rng = det_rng(5);
    for _ in 0..100 {
        let r = &f.eval[rng.random_range(0..f.eval.len())];
        let t = f.sim.rollout(&r.features, &r.sequence).unwrap();
        for m in &t.survival {
            assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(m.sigma.iter().all(|&s| s > 0.0));
            let curve = m.curve(&grid).unwrap();
            assert!(curve.windows(2).all(|w| w[1] <= w[0]));
            assert!(m.survival(0.001).unwrap() > 0.999);
        }
    }
}

proptest! {
    #[test]
    fn later_event_below_median_never_lowers_log_time_likelihood(
        mu in 2.0f64..5.0, sigma in 0.2f64..2.0, frac in 0.05f64..1.0, bump in 0.0f64..1.0,
    ) {
        let m = MixtureParams::single(mu, sigma);
        let median = m.median();
        let t = frac * median;
        let later = t + bump * (median - t);
        // Density of ln T: the time-scale likelihood plus ln t.
        let ll = |x: f64| m.log_likelihood(x, true).unwrap() + x.ln();
        prop_assert!(ll(later) >= ll(t) - 1e-12);
    }

    #[test]
    fn later_event_below_mode_never_lowers_likelihood(
        mu in 2.0f64..5.0, sigma in 0.2f64..2.0, frac in 0.05f64..1.0, bump in 0.0f64..1.0,
    ) {
        let m = MixtureParams::single(mu, sigma);
        let mode = (mu - sigma * sigma).exp();
        let t = frac * mode;
        let later = t + bump * (mode - t);
        prop_assert!(m.log_likelihood(later, true).unwrap() >= m.log_likelihood(t, true).unwrap() - 1e-12);
    }
}

#[test]
fn zero_dropout_gives_degenerate_interval() {
    let f = fixture();
    let mut sim = f.sim.clone();
    sim.static_outcome.net.arch.input_dropout = 0.0;
    sim.static_outcome.net.arch.penultimate_dropout = 0.0;
    sim.post_ic.net.arch.input_dropout = 0.0;
    sim.post_ic.net.arch.penultimate_dropout = 0.0;
    sim.post_cc.net.arch.input_dropout = 0.0;
    sim.post_cc.net.arch.penultimate_dropout = 0.0;
    let r = &f.eval[0];
    let ci = predict_with_ci(20, 0.95, &mut det_rng(1), |rng| {
        let t = sim.rollout_batch(
            std::slice::from_ref(&r.features),
            &r.sequence,
            &KnownTransitions::default(),
            RolloutMode::Expected,
            &mut Masks::on(rng),
            None,
        )?;
        Ok(vec![t[0].static_risk.ft])
    })
    .unwrap();
    assert_eq!(ci[0].lower, ci[0].point);
    assert_eq!(ci[0].upper, ci[0].point);
}

fn ft_sampler<'a>(
    f: &'a Fixture,
    r: &'a CohortRecord,
) -> impl FnMut(&mut seqtwin::tensor::DetRng) -> seqtwin::Result<Vec<f64>> + 'a {
    move |rng| {
        let t = f.sim.rollout_batch(
            std::slice::from_ref(&r.features),
            &r.sequence,
            &KnownTransitions::default(),
            RolloutMode::Expected,
            &mut Masks::on(rng),
            None,
        )?;
        Ok(vec![t[0].static_risk.ft, t[0].survival[0].median()])
    }
}

#[test]
fn intervals_bracket_and_reject_few_samples() {
    let f = fixture();
    let r = &f.eval[1];
    let ci = predict_with_ci(20, 0.95, &mut det_rng(2), ft_sampler(f, r)).unwrap();
    for c in &ci {
        assert!(c.lower <= c.point && c.point <= c.upper);
        assert_eq!(c.samples, 20);
    }
    let again = predict_with_ci(20, 0.95, &mut det_rng(2), ft_sampler(f, r)).unwrap();
    assert_eq!(ci, again);
    assert!(matches!(
        predict_with_ci(19, 0.95, &mut det_rng(2), ft_sampler(f, r)),
        Err(Error::Config(_))
    ));
}

#[test]
fn small_sample_intervals_cover_large_sample_mean() {
    let f = fixture();
    let r = &f.eval[2];
    let reference =
        predict_with_ci(1000, 0.95, &mut det_rng(3), ft_sampler(f, r)).unwrap()[0].point;
    let mut rng = det_rng(4);
    let trials = 100;
    let covered = (0..trials)
        .filter(|_| {
            let c = predict_with_ci(20, 0.95, &mut rng, ft_sampler(f, r)).unwrap()[0];
            c.lower <= reference && reference <= c.upper
        })
        .count();
    let rate = covered as f64 / trials as f64;
    assert!((0.85..=1.0).contains(&rate), "coverage {rate}");
}

#[test]
fn rollout_contracts() {
    let f = fixture();
    let p = &f.eval[3].features;
    let none = TreatmentSequence::new(false, false, false);
    let t = f.sim.rollout(p, &none).unwrap();
    assert_eq!(t.after_ic, TransitionDist::stable());
    assert_eq!(t, f.sim.rollout(p, &none).unwrap());
    let all = f.sim.rollout_all(p).unwrap();
    assert_eq!(all.len(), 8);
    for i in 0..8 {
        for j in i + 1..8 {
            assert_ne!(all[i], all[j]);
        }
    }
}

#[test]
fn sampled_rollout_keeps_ic_constraint() {
    let f = fixture();
    let patients: Vec<PatientFeatures> = f.eval.iter().map(|r| r.features.clone()).collect();
    let mut rng = det_rng(9);
    for seq in TreatmentSequence::all().iter().filter(|s| !s.ic) {
        let ts = f
            .sim
            .rollout_batch(
                &patients,
                seq,
                &KnownTransitions::default(),
                RolloutMode::Sampled,
                &mut Masks::off(),
                Some(&mut rng),
            )
            .unwrap();
        for t in ts {
            assert_eq!(t.after_ic.mode(), TransitionState::stable());
            assert!(t.after_cc.primary.iter().any(|&p| p == 1.0));
        }
    }
}
