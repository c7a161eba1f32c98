use nalgebra::DMatrix;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use seqtwin::cohort::EventTime;
use seqtwin::neighbors::*;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[test]
fn knn_small_examples() {
    let c = vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0]];
    assert_eq!(knn(&[0.0], &c, 2).unwrap(), vec![0, 1]);
    let mut all = knn(&[0.0], &c, 4).unwrap();
    all.sort();
    assert_eq!(all, vec![0, 1, 2, 3]);
    assert!(knn(&[0.0], &c, 5).is_err());
    // Equidistant points resolve by id.
    let tie = vec![vec![1.0], vec![-1.0], vec![1.0]];
    assert_eq!(knn(&[0.0], &tie, 3).unwrap(), vec![0, 1, 2]);
}

#[test]
fn knn_matches_exhaustive_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let c = normal_rows(&mut rng, 200, 16);
        let q: Vec<f64> = normal_rows(&mut rng, 1, 16).remove(0);
        let mut oracle: Vec<(f64, usize)> = c
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let d: f64 = r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                (d, i)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = oracle[..25].iter().map(|p| p.1).collect();
        assert_eq!(knn(&q, &c, 25).unwrap(), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn knn_permutation_invariant(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse grid values so ties actually occur.
        let c: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(0..5) as f64, rng.random_range(0..5) as f64]).collect();
        let mut perm: Vec<usize> = (0..40).collect();
        for i in (1..40).rev() { perm.swap(i, rng.random_range(0..=i)); }
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| c[i].clone()).collect();
        let a = knn(&[2.0, 2.0], &c, 10).unwrap();
        let b: Vec<usize> = knn(&[2.0, 2.0], &shuffled, 10).unwrap().into_iter().map(|i| perm[i]).collect();
        let dist = |i: usize| (c[i][0] - 2.0).powi(2) + (c[i][1] - 2.0).powi(2);
        let da: Vec<f64> = a.iter().map(|&i| dist(i)).collect();
        let db: Vec<f64> = b.iter().map(|&i| dist(i)).collect();
        prop_assert_eq!(da, db);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn caliper_groups_monotone_and_terminate(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(10..60);
        let props: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..0.99)).collect();
        let treated: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let pool: Vec<usize> = (0..m).collect();
        let q = rng.random_range(0.01..0.99);
        let base = NeighborConfig { k: m, n: 1, alpha: rng.random_range(0.01..0.5), alpha_step: 0.1, min_group: rng.random_range(1..10) };
        let small = caliper_match(&pool, q, &props, &treated, &base).unwrap();
        let wider = caliper_match(&pool, q, &props, &treated, &NeighborConfig { alpha: base.alpha + 0.3, min_group: usize::MAX, ..base }).unwrap();
        prop_assert!(wider.treated.len() >= small.treated.len());
        prop_assert!(wider.untreated.len() >= small.untreated.len());
        // usize::MAX groups cannot be met, so the loop ends with the whole pool.
        prop_assert_eq!(wider.treated.len() + wider.untreated.len(), m);
        prop_assert!(wider.low_support);
    }
}

proptest! {
    #[test]
    fn trusted_flips_at_75(k in 0usize..=100) {
        let model = NoveltyModel { mean: vec![0.0], precision: vec![1.0], sorted_distances: (0..100).map(|i| i as f64).collect() };
        let r = model.rating_for(k as f64);
        prop_assert_eq!(r.percentile, k as f64);
        prop_assert_eq!(r.trusted, k <= 75);
    }
}

#[test]
fn caliper_examples_and_oracle() {
    assert_eq!(caliper_distance(&[0.5; 7], 0.1).unwrap(), 0.0);
    let cd = caliper_distance(&[sigmoid(1.0), sigmoid(-1.0)], 0.1).unwrap();
    assert!((cd - 0.1).abs() < 1e-12);
    assert!(caliper_distance(&[0.2, 1.0], 0.1).is_err());
    assert!(caliper_distance(&[0.0, 0.5], 0.1).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p: Vec<f64> = (0..500).map(|_| rng.random_range(0.001..0.999)).collect();
    let l: Vec<f64> = p.iter().map(|p| (p / (1.0 - p)).ln()).collect();
    let mean = l.iter().sum::<f64>() / 500.0;
    let sd = (l.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 500.0).sqrt();
    assert!((caliper_distance(&p, 0.3).unwrap() - 0.3 * sd).abs() < 1e-12);
}

fn names() -> Vec<String> {
    vec!["event".into()]
}

#[test]
fn perfect_split_gives_unit_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emb = normal_rows(&mut rng, 40, 3);
    let treated: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
    let props = vec![0.5; 40];
    let cfg = NeighborConfig { k: 30, ..Default::default() };
    let est = estimate_ate(&emb[0], 0.5, &emb, &props, &treated, &names(), &[treated.clone()], &cfg).unwrap();
    assert_eq!(est.differences[0], Some(1.0));
    assert_eq!(est.treated_rates[0], Some(1.0));
    assert_eq!(est.untreated_rates[0], Some(0.0));
    // Zero logit spread keeps the whole pool on the first pass.
    assert_eq!(est.treated_ids.len() + est.untreated_ids.len(), 30);
    assert_eq!(est.alpha, 0.1);
    assert!(!est.low_support);
}

#[test]
fn low_support_reported() {
    let emb: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
    let treated: Vec<bool> = (0..20).map(|i| i < 3).collect();
    let props: Vec<f64> = (0..20).map(|i| 0.1 + 0.04 * i as f64).collect();
    let cfg = NeighborConfig { k: 15, ..Default::default() };
    let est = estimate_ate(&emb[0], 0.3, &emb, &props, &treated, &names(), &[treated.clone()], &cfg).unwrap();
    assert!(est.low_support);
    assert_eq!(est.treated_ids.len(), 3);
    assert_eq!(est.treated_ids.len() + est.untreated_ids.len(), 15);
}

#[test]
fn escalation_stops_once_groups_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let emb = normal_rows(&mut rng, 300, 2);
    let props: Vec<f64> = (0..300).map(|_| rng.random_range(0.05..0.95)).collect();
    let treated: Vec<bool> = (0..300).map(|_| rng.random_bool(0.3)).collect();
    let cfg = NeighborConfig::default();
    let est = estimate_ate(&emb[0], 0.5, &emb, &props, &treated, &names(), &[treated.clone()], &cfg).unwrap();
    assert!(!est.low_support);
    assert!(est.treated_ids.len() >= 5 && est.untreated_ids.len() >= 5);
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let pool = knn(&emb[0], &emb, 100).unwrap();
    if est.alpha > cfg.alpha + 1e-9 {
        // The previous caliper must have left a group short.
        let prev = est.caliper_distance * (est.alpha - cfg.alpha_step) / est.alpha;
        let kept: Vec<usize> = pool.iter().copied().filter(|&i| (logit(props[i]) - logit(0.5)).abs() <= prev).collect();
        let t = kept.iter().filter(|&&i| treated[i]).count();
        assert!(t < 5 || kept.len() - t < 5);
    }
    for &i in est.treated_ids.iter().chain(&est.untreated_ids) {
        assert!(pool.contains(&i));
        let gap = logit(props[i]).abs();
        assert!(gap <= est.caliper_distance + 1e-12);
    }
}

#[test]
fn ate_recovers_additive_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 500;
    let emb = normal_rows(&mut rng, n, 2);
    let props: Vec<f64> = emb.iter().map(|x| sigmoid(0.8 * x[0])).collect();
    let treated: Vec<bool> = props.iter().map(|&p| rng.random_bool(p)).collect();
    let outcome: Vec<bool> = emb
        .iter()
        .zip(&treated)
        .map(|(x, &t)| {
            let base = 0.15 + 0.3 * sigmoid(x[0]) + 0.1 * sigmoid(x[1]);
            rng.random_bool(base + if t { 0.3 } else { 0.0 })
        })
        .collect();
    let cfg = NeighborConfig::default();
    let mut sum = 0.0;
    for q in 0..20 {
        let est = estimate_ate(&emb[q], props[q], &emb, &props, &treated, &names(), &[outcome.clone()], &cfg).unwrap();
        sum += est.differences[0].unwrap();
    }
    let mean = sum / 20.0;
    assert!((mean - 0.3).abs() <= 0.1, "mean estimated effect {mean}");
}

#[test]
fn treatment_rate_examples_and_recount() {
    let emb: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64]).collect();
    let all = vec![true; 30];
    assert_eq!(neighbor_treatment_rate(&[0.0], &emb, &all, 10).unwrap().0, 1.0);
    let seven: Vec<bool> = (0..30).map(|i| i < 7).collect();
    let (r, ids) = neighbor_treatment_rate(&[0.0], &emb, &seven, 10).unwrap();
    assert!((r - 0.7).abs() < 1e-12);
    assert_eq!(ids, (0..10).collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let c = normal_rows(&mut rng, 120, 5);
        let t: Vec<bool> = (0..120).map(|_| rng.random_bool(0.4)).collect();
        let q = normal_rows(&mut rng, 1, 5).remove(0);
        let (r, ids) = neighbor_treatment_rate(&q, &c, &t, 10).unwrap();
        let mut d: Vec<(f64, usize)> = c.iter().enumerate().map(|(i, x)| (x.iter().zip(&q).map(|(a, b)| (a - b).abs().powi(2)).sum(), i)).collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let count = d[..10].iter().filter(|p| t[p.1]).count();
        assert_eq!(r, count as f64 / 10.0);
        assert_eq!(ids.len(), 10);
    }
}

#[test]
fn config_validation() {
    assert!(NeighborConfig::default().validate().is_ok());
    assert!(NeighborConfig { n: 100, ..Default::default() }.validate().is_err());
    assert!(NeighborConfig { n: 0, ..Default::default() }.validate().is_err());
    assert!(NeighborConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn mahalanobis_examples() {
    let id = DMatrix::<f64>::identity(3, 3);
    let d = mahalanobis(&[3.0, 4.0, 0.0], &[0.0, 0.0, 0.0], &id);
    assert!((d - 5.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = normal_rows(&mut rng, 300, 4);
    let model = NoveltyModel::fit(&c).unwrap();
    let at_mean = model.rate(&model.mean.clone()).unwrap();
    assert!(at_mean.distance.abs() < 1e-9);
    assert_eq!(at_mean.percentile, 0.0);
    assert!(at_mean.trusted);
    let far = model.rate(&[50.0, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(far.percentile, 100.0);
    assert!(!far.trusted);

    let flat = vec![vec![1.0, 2.0]; 10];
    assert!(NoveltyModel::fit(&flat).is_err());
}

#[test]
fn percentiles_roughly_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cohort = normal_rows(&mut rng, 2000, 6);
    let model = NoveltyModel::fit(&cohort).unwrap();
    let mut pct: Vec<f64> = normal_rows(&mut rng, 1000, 6)
        .iter()
        .map(|q| model.rate(q).unwrap().percentile / 100.0)
        .collect();
    pct.sort_by(f64::total_cmp);
    let n = pct.len() as f64;
    let ks = pct
        .iter()
        .enumerate()
        .map(|(i, &u)| ((i as f64 + 1.0) / n - u).abs().max((u - i as f64 / n).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.1, "KS statistic {ks}");
}

#[test]
fn kaplan_meier_hand_example() {
    let e = |m: f64, ev: bool| EventTime { months: m, event: ev };
    // 5 at risk: event at 2 (S=0.8), censor at 3, event at 4 with 3 at risk (S=0.8*2/3).
    let data = [e(2.0, true), e(3.0, false), e(4.0, true), e(6.0, false), e(8.0, false)];
    let km = kaplan_meier(&data, &[0.0, 2.0, 3.5, 4.0, 10.0], 0.95).unwrap();
    let want = [1.0, 0.8, 0.8, 0.8 * 2.0 / 3.0, 0.8 * 2.0 / 3.0];
    for (a, b) in km.survival.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    for i in 0..5 {
        assert!(km.lower[i] <= km.survival[i] + 1e-12 && km.survival[i] <= km.upper[i] + 1e-12);
        assert!(km.lower[i] >= 0.0 && km.upper[i] <= 1.0);
    }
    assert!(kaplan_meier(&[], &[1.0], 0.95).is_err());
}
