//! Stratified train/evaluation split.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::types::{BinaryEndpoint, CohortRecord};
use crate::error::{Error, Result};
use crate::tensor::det_rng;

/// Published cohort sizes; the training fraction is 389 / 536.
pub const TRAIN_PARTS: usize = 389;
pub const EVAL_PARTS: usize = 147;
/// Minimum positive instances of each binary endpoint on the training side.
pub const MIN_TRAIN_POSITIVES: usize = 3;

pub fn train_size(n: usize) -> usize {
    // Round half up in integer arithmetic.
    (2 * n * TRAIN_PARTS + TRAIN_PARTS + EVAL_PARTS) / (2 * (TRAIN_PARTS + EVAL_PARTS))
}

/// Sorted (train, eval) index lists.
///
/// Positives of every binary endpoint are forced into training until each
/// has [`MIN_TRAIN_POSITIVES`]; the rest of the training side is filled per
/// treatment sequence in proportion to its share of the cohort.
pub fn split_indices(cohort: &[CohortRecord], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = cohort.len();
    let n_train = train_size(n);
    for ep in BinaryEndpoint::all() {
        let positives = cohort.iter().filter(|r| r.binary(ep)).count();
        if positives < MIN_TRAIN_POSITIVES {
            return Err(Error::InfeasibleSplit(format!(
                "endpoint `{}` has {positives} positive record(s); at least {MIN_TRAIN_POSITIVES} are required in the training split",
                ep.name()
            )));
        }
    }
    let mut rng = det_rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut in_train = vec![false; n];
    let mut taken = 0;
    for ep in BinaryEndpoint::all() {
        let mut have = (0..n)
            .filter(|&i| in_train[i] && cohort[i].binary(ep))
            .count();
        for &i in &order {
            if have >= MIN_TRAIN_POSITIVES {
                break;
            }
            if !in_train[i] && cohort[i].binary(ep) {
                in_train[i] = true;
                taken += 1;
                have += 1;
            }
        }
    }
    if taken > n_train {
        return Err(Error::InfeasibleSplit(format!(
            "meeting the per-endpoint minimum needs {taken} training records but the split allows {n_train}"
        )));
    }

    // Proportional fill per stratum using largest remainders.
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        strata.entry(cohort[i].sequence.code()).or_default().push(i);
    }
    let mut quota: BTreeMap<usize, usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut assigned = 0;
    for (&code, members) in &strata {
        let exact = n_train as f64 * members.len() as f64 / n as f64;
        let forced = members.iter().filter(|&&i| in_train[i]).count();
        let q = (exact.floor() as usize).max(forced).min(members.len());
        quota.insert(code, q);
        assigned += q;
        remainders.push((exact - exact.floor(), code));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut k = 0;
    while assigned < n_train {
        let code = remainders[k % remainders.len()].1;
        let q = quota.get_mut(&code).unwrap();
        if *q < strata[&code].len() {
            *q += 1;
            assigned += 1;
        }
        k += 1;
    }
    // Over-assignment from forced minimums comes off the largest strata.
    while assigned > n_train {
        let (&code, _) = strata
            .iter()
            .filter(|(c, m)| quota[c] > m.iter().filter(|&&i| in_train[i]).count())
            .max_by_key(|(c, _)| quota[c])
            .expect("forced records fit within the training size");
        *quota.get_mut(&code).unwrap() -= 1;
        assigned -= 1;
    }
    for (code, members) in &strata {
        let mut have = members.iter().filter(|&&i| in_train[i]).count();
        for &i in members {
            if have >= quota[code] {
                break;
            }
            if !in_train[i] {
                in_train[i] = true;
                have += 1;
            }
        }
    }
    let train = (0..n).filter(|&i| in_train[i]).collect();
    let eval = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((train, eval))
}

pub fn stratified_split(
    cohort: &[CohortRecord],
    seed: u64,
) -> Result<(Vec<CohortRecord>, Vec<CohortRecord>)> {
    let (train, eval) = split_indices(cohort, seed)?;
    Ok((
        train.iter().map(|&i| cohort[i].clone()).collect(),
        eval.iter().map(|&i| cohort[i].clone()).collect(),
    ))
}
