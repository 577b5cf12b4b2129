use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::CvError;
use crate::seed;

/// Validation indices per fold; training indices are the complement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    folds: Vec<Vec<usize>>,
    len: usize,
}

impl FoldSplit {
    pub fn from_folds(folds: Vec<Vec<usize>>, len: usize) -> Self {
        Self { folds, len }
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut train: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        train.sort_unstable();
        train
    }
}

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    map
}

/// Stratified k-fold over positions `0..labels.len()`.
///
/// Each class is shuffled under `seed` and dealt round-robin, with the dealing
/// position carried across classes so fold sizes also differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit, CvError> {
    if k < 2 {
        return Err(CvError::BadK(k));
    }
    let classes = by_class(labels);
    if let Some((&class, members)) = classes.iter().find(|(_, m)| m.len() < k) {
        return Err(CvError::TooFewSamples { class, count: members.len(), k });
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (&class, members) in &classes {
        let mut members = members.clone();
        members.shuffle(&mut seed::rng(seed, &[0x6b66_6f6c, class as u64]));
        for idx in members {
            folds[next].push(idx);
            next = (next + 1) % k;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldSplit { folds, len: labels.len() })
}

/// Carves a stratified random test split; returns `(train, test)` positions, sorted.
pub fn stratified_holdout(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class(labels) {
        members.shuffle(&mut seed::rng(seed, &[0x7465_7374, class as u64]));
        let n_test = ((members.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(members.len());
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Sampling weight per class, proportional to `1 / count` and summing to one.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>, CvError> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(CvError::ZeroCount(class));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / total).collect())
}

/// Draws `n_draws` sample indices with replacement. Every member of class `c`
/// is drawn with probability proportional to `weights[c]`, so with
/// inverse-frequency weights each class is drawn equally often.
///
/// Returns an empty stream if no member carries positive weight.
pub fn weighted_sample(weights: &[f64], index_by_class: &[Vec<usize>], n_draws: usize, seed: u64) -> Vec<usize> {
    let (members, member_weights): (Vec<usize>, Vec<f64>) = index_by_class
        .iter()
        .zip(weights)
        .flat_map(|(idx, &w)| idx.iter().map(move |&i| (i, w)))
        .unzip();
    let Ok(dist) = WeightedIndex::new(&member_weights) else {
        return Vec::new();
    };
    let mut rng = seed::rng(seed, &[0x7361_6d70]);
    (0..n_draws).map(|_| members[dist.sample(&mut rng)]).collect()
}

/// Expected share of draws per class under [`weighted_sample`].
pub fn expected_class_shares(weights: &[f64], counts: &[usize]) -> Vec<f64> {
    let mass: Vec<f64> = weights.iter().zip(counts).map(|(w, &c)| w * c as f64).collect();
    let total: f64 = mass.iter().sum();
    mass.into_iter().map(|m| m / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_forty_split_is_exact() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 60)).collect();
        let split = stratified_kfold(&labels, 5, 1).unwrap();
        for f in split.folds() {
            let ones = f.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((f.len() - ones, ones), (12, 8));
        }
    }

    #[test]
    fn single_class_folds_are_even() {
        let split = stratified_kfold(&[3; 23], 5, 0).unwrap();
        let sizes: Vec<usize> = split.folds().iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(sizes.iter().sum::<usize>(), 23);
    }

    #[test]
    fn split_errors() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1];
        assert_eq!(stratified_kfold(&labels, 5, 0), Err(CvError::TooFewSamples { class: 1, count: 3, k: 5 }));
        assert_eq!(stratified_kfold(&labels, 1, 0), Err(CvError::BadK(1)));
    }

    #[test]
    fn split_is_seeded() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        assert_eq!(stratified_kfold(&labels, 5, 9).unwrap(), stratified_kfold(&labels, 5, 9).unwrap());
        assert_ne!(stratified_kfold(&labels, 5, 9).unwrap(), stratified_kfold(&labels, 5, 10).unwrap());
        let split = stratified_kfold(&labels, 5, 9).unwrap();
        let mut all: Vec<usize> = split.validation(2).to_vec();
        all.extend(split.train(2));
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn holdout_takes_a_tenth_per_class() {
        let labels: Vec<usize> = (0..600).map(|i| i % 3).collect();
        let (train, test) = stratified_holdout(&labels, 0.1, 4);
        assert_eq!((train.len(), test.len()), (540, 60));
        for c in 0..3 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 20);
        }
    }

    #[test]
    fn weights_examples() {
        let w = class_weights(&[1098, 1206, 1224]).unwrap();
        let z = 1.0 / 1098.0 + 1.0 / 1206.0 + 1.0 / 1224.0;
        for (got, c) in w.iter().zip([1098.0, 1206.0, 1224.0]) {
            assert!((got - 1.0 / c / z).abs() < 1e-15);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(class_weights(&[5, 5, 5, 5]).unwrap(), vec![0.25; 4]);
        assert_eq!(class_weights(&[3, 0]), Err(CvError::ZeroCount(1)));
    }

    #[test]
    fn sampler_basics() {
        let one = weighted_sample(&[1.0], &[vec![4, 7, 9]], 100, 3);
        assert!(one.iter().all(|i| [4, 7, 9].contains(i)));
        let idx = vec![vec![0, 1], vec![2, 3, 4, 5]];
        let w = class_weights(&[2, 4]).unwrap();
        assert_eq!(weighted_sample(&w, &idx, 50, 8), weighted_sample(&w, &idx, 50, 8));
        assert_ne!(weighted_sample(&w, &idx, 50, 8), weighted_sample(&w, &idx, 50, 9));
        assert!(weighted_sample(&[0.0], &[vec![1]], 5, 0).is_empty());
        let shares = expected_class_shares(&w, &[2, 4]);
        assert!((shares[0] - 0.5).abs() < 1e-15);
    }
}
