use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Splits whole patients into (train, test).
///
/// The test split receives `floor(test_fraction · N)` patients. Patients are
/// stratified by case label; each stratum contributes `floor(f · n_k)` test
/// patients and the remainder is handed out by largest fractional part, so
/// every stratum stays within one patient of its proportional share. Classes
/// with fewer than two patients are pooled into one unstratified group.
pub fn split_by_patient(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let n = dataset.cases.len();
    let total = floor_share(test_fraction, n);

    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in dataset.cases.iter().enumerate() {
        by_label.entry(c.case_label()).or_default().push(i);
    }
    let mut strata: Vec<Vec<usize>> = Vec::new();
    let mut pooled = Vec::new();
    for (label, members) in by_label {
        if members.len() < 2 {
            log::warn!("class {label} has {} patient(s); not stratified", members.len());
            pooled.extend(members);
        } else {
            strata.push(members);
        }
    }
    if !pooled.is_empty() {
        strata.push(pooled);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &mut strata {
        s.shuffle(&mut rng);
    }
    let exact: Vec<f64> = strata.iter().map(|s| test_fraction * s.len() as f64).collect();
    let mut quota: Vec<usize> = strata.iter().map(|s| floor_share(test_fraction, s.len())).collect();
    let mut remaining = total.saturating_sub(quota.iter().sum());
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - quota[a] as f64;
        let fb = exact[b] - quota[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if quota[k] < strata[k].len() {
            quota[k] += 1;
            remaining -= 1;
        }
    }

    let mut is_test = vec![false; n];
    for (s, q) in strata.iter().zip(&quota) {
        for &i in &s[..*q] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, c) in dataset.cases.iter().enumerate() {
        if is_test[i] {
            test.push(c.clone());
        } else {
            train.push(c.clone());
        }
    }
    Ok((dataset.with_cases(train), dataset.with_cases(test)))
}

/// `floor(fraction · n)` with a small tolerance for binary rounding.
pub(crate) fn floor_share(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}
