use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Label-stratified `k`-fold partition of `0..labels.len()`.
///
/// Each class is shuffled and dealt round-robin, continuing the fold counter
/// across classes, so fold sizes differ by at most one and every fold holds
/// either the floor or the ceiling of its share of each class. If some class
/// has fewer than `k` members, stratification is dropped.
pub fn kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Split>> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidConfig(format!("k = {k} folds exceed {n} bags")));
    }
    let mut r = rng::substream(seed, "folds");
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        classes.entry(c).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = if classes.values().any(|g| g.len() < k) {
        log::warn!("a class has fewer than {k} bags; folds are not stratified");
        vec![(0..n).collect()]
    } else {
        classes.into_values().collect()
    };

    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut group in groups {
        group.shuffle(&mut r);
        for i in group {
            folds[next % k].push(i);
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut validation = folds[f].clone();
            validation.sort_unstable();
            let mut train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            train.sort_unstable();
            Split { train, validation }
        })
        .collect())
}
