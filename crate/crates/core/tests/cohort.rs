use proptest::prelude::*;
use seqtwin::cohort::encode::{SLOT_AGE, SLOT_DOSE, SLOT_FRACTION, SLOT_PACK_YEARS};
use seqtwin::cohort::synthetic::PROFILES;
use seqtwin::cohort::*;
use seqtwin::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn default_cohort(seed: u64, n: usize) -> Vec<CohortRecord> {
    generate_synthetic_cohort(seed, n, &SyntheticConfig::default()).unwrap()
}

fn to_csv(records: &[CohortRecord]) -> String {
    let mut buf = Vec::new();
    write_cohort(&mut buf, records).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn three_row_file_loads_three_records() {
    let text = to_csv(&default_cohort(1, 16)[..3]);
    assert_eq!(read_cohort(text.as_bytes()).unwrap().len(), 3);
}

#[test]
fn out_of_range_t_stage_cites_row_and_column() {
    let text = to_csv(&default_cohort(1, 16)[..3]);
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let t_col = COLUMNS.iter().position(|c| *c == "t_stage").unwrap();
    let mut fields: Vec<String> = lines[2].split(',').map(String::from).collect();
    fields[t_col] = "7".into();
    lines[2] = fields.join(",");
    let err = read_cohort(lines.join("\n").as_bytes()).unwrap_err();
    match err {
        Error::Validation(errors) => {
            assert_eq!(errors.len(), 1, "{errors:?}");
            assert_eq!(errors[0].row, Some(2));
            assert_eq!(errors[0].column, "t_stage");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn missing_column_and_negative_time_are_reported() {
    let text = to_csv(&default_cohort(1, 16)[..2]);
    let without: Vec<String> = text
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(COLUMNS.iter().position(|c| *c == "grade").unwrap());
            f.join(",")
        })
        .collect();
    match read_cohort(without.join("\n").as_bytes()).unwrap_err() {
        Error::Validation(e) => assert_eq!(e[0].column, "grade"),
        other => panic!("unexpected error {other}"),
    }

    let col = COLUMNS.iter().position(|c| *c == "os_months").unwrap();
    let negative: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let mut f: Vec<String> = l.split(',').map(String::from).collect();
            if i == 1 {
                f[col] = "-3".into();
            }
            f.join(",")
        })
        .collect();
    match read_cohort(negative.join("\n").as_bytes()).unwrap_err() {
        Error::Validation(e) => {
            assert_eq!(e[0].row, Some(1));
            assert_eq!(e[0].column, "os_months");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn default_cohort_round_trips_through_csv() {
    let cohort = default_cohort(7, 536);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.csv");
    save_cohort_csv(&path, &cohort).unwrap();
    assert_eq!(load_cohort_csv(&path).unwrap(), cohort);
}

#[test]
fn generator_is_deterministic_with_requested_size() {
    let a = default_cohort(42, 536);
    assert_eq!(a.len(), 536);
    assert_eq!(a, default_cohort(42, 536));
    assert_ne!(a, default_cohort(43, 536));
}

#[test]
fn smallest_cohort_covers_every_sequence() {
    for seed in 0..20 {
        let cohort = default_cohort(seed, 16);
        let mut seen = [false; 8];
        for r in &cohort {
            seen[r.sequence.code()] = true;
        }
        assert!(seen.iter().all(|&s| s), "seed {seed}");
    }
}

#[test]
fn too_small_cohort_is_a_config_error() {
    let err = generate_synthetic_cohort(0, 15, &SyntheticConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn sequence_proportions_match_published_counts() {
    let n = 5000;
    let cohort = default_cohort(2024, n);
    let total: f64 = PROFILES.iter().map(|p| p.count as f64).sum();
    let mut observed = [0usize; 8];
    for r in &cohort {
        observed[r.sequence.code()] += 1;
    }
    let chi2: f64 = PROFILES
        .iter()
        .map(|p| {
            let expected = n as f64 * p.count as f64 / total;
            let o = observed[p.treatment_sequence().code()] as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
    assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}");
}

#[test]
fn ten_thousand_generated_records_satisfy_invariants() {
    let cohort = default_cohort(99, 10_000);
    for (i, r) in cohort.iter().enumerate() {
        assert!(r.validate().is_empty(), "record {i}: {:?}", r.validate());
        if !r.sequence.ic {
            assert_eq!(r.after_ic, TransitionState::stable());
        }
    }
    let logistic =
        generate_synthetic_cohort(99, 10_000, &SyntheticConfig::logistic_staging()).unwrap();
    assert!(logistic.iter().all(|r| r.validate().is_empty()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_records_are_valid(seed in any::<u64>(), n in 16usize..200) {
        for r in default_cohort(seed, n) {
            prop_assert!(r.validate().is_empty());
        }
    }

    #[test]
    fn split_is_a_deterministic_partition(seed in 0u64..1000) {
        let cohort = default_cohort(seed % 7, 536);
        let (train, eval) = split_indices(&cohort, seed).unwrap();
        prop_assert_eq!(train.len(), 389);
        prop_assert_eq!(eval.len(), 147);
        let mut all: Vec<usize> = train.iter().chain(&eval).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..536).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(&cohort, seed).unwrap(), (train.clone(), eval));
        for ep in BinaryEndpoint::all() {
            let pos = train.iter().filter(|&&i| cohort[i].binary(ep)).count();
            prop_assert!(pos >= 3, "{} has {} training positives", ep.name(), pos);
        }
    }
}

#[test]
fn split_reports_infeasible_endpoint() {
    let mut cohort = default_cohort(5, 536);
    let mut kept = 0;
    for r in cohort.iter_mut() {
        if r.after_cc.dlt[1] {
            kept += 1;
            if kept > 2 {
                r.after_cc.dlt[1] = false;
            }
        }
    }
    let err = stratified_split(&cohort, 1).unwrap_err();
    match err {
        Error::InfeasibleSplit(msg) => {
            assert!(msg.contains("dlt_after_cc_neurological"), "{msg}")
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn identical_patients_encode_identically_and_mean_patient_is_zero() {
    let cohort = default_cohort(3, 536);
    let (train, _) = stratified_split(&cohort, 3).unwrap();
    let enc = FeatureEncoder::fit(&train);
    let p = train[0].features.clone();
    assert_eq!(
        enc.encode(&p, None).unwrap(),
        enc.encode(&p.clone(), None).unwrap()
    );
    let mean = |f: &dyn Fn(&PatientFeatures) -> f64| {
        train.iter().map(|r| f(&r.features)).sum::<f64>() / train.len() as f64
    };
    let mut m = p.clone();
    m.age = mean(&|f| f.age);
    m.pack_years = mean(&|f| f.pack_years);
    m.total_dose = mean(&|f| f.total_dose);
    m.dose_fraction = mean(&|f| f.dose_fraction);
    let v = enc.encode(&m, None).unwrap();
    for slot in [SLOT_AGE, SLOT_PACK_YEARS, SLOT_DOSE, SLOT_FRACTION] {
        assert!(v[slot].abs() < 1e-12, "slot {slot} = {}", v[slot]);
    }
}

fn discrete_patient() -> impl Strategy<Value = PatientFeatures> {
    (
        0usize..6,
        0usize..4,
        (1u8..=4, 0u8..=3, 1u8..=4, 1u8..=4),
        prop::array::uniform14(any::<bool>()),
    )
        .prop_map(|(s, r, (t, n, a, g), ln)| PatientFeatures {
            age: 60.0,
            is_male: true,
            race: Race::ALL[r],
            hpv: Hpv::Positive,
            smoking_status: 0,
            pack_years: 0.0,
            lymph_node_regions: ln,
            t_stage: t,
            n_stage: n,
            ajcc_stage: a,
            pathological_grade: g,
            subsite: Subsite::ALL[s],
            bilateral: false,
            total_dose: 70.0,
            dose_fraction: 2.0,
            aspiration_pre: false,
        })
}

proptest! {
    #[test]
    fn encoding_is_injective_on_discrete_fields(a in discrete_patient(), b in discrete_patient()) {
        let enc = FeatureEncoder::fit(&default_cohort(0, 16));
        let va = enc.encode(&a, None).unwrap();
        let vb = enc.encode(&b, None).unwrap();
        prop_assert_eq!(a == b, va == vb);
    }
}
