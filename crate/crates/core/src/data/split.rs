use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, TimeSeries};
use crate::error::{ensure, Result};

/// Fractions of train, validation and test; pretrain takes the remainder.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.3, 0.1, 0.1);

/// A series with its class index (position of its label in [`SplitBundle::classes`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub series: TimeSeries,
    pub class: usize,
}

/// Held-out test data. Labels are only reachable through [`TestSplit::score`].
#[derive(Clone, Debug)]
pub struct TestSplit {
    series: Vec<TimeSeries>,
    classes: Vec<usize>,
}

impl TestSplit {
    pub fn new(examples: Vec<Example>) -> Self {
        let (series, classes) = examples.into_iter().map(|e| (e.series, e.class)).unzip();
        Self { series, classes }
    }

    pub fn series(&self) -> &[TimeSeries] {
        &self.series
    }

    pub fn series_mut(&mut self) -> &mut [TimeSeries] {
        &mut self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    /// Fraction of `predictions` equal to the hidden labels.
    pub fn score(&self, predictions: &[usize]) -> Result<f64> {
        ensure!(!self.series.is_empty(), Usage, "cannot score an empty test split");
        ensure!(
            predictions.len() == self.classes.len(),
            Usage,
            "{} predictions for {} test series",
            predictions.len(),
            self.classes.len()
        );
        let correct = predictions.iter().zip(&self.classes).filter(|(p, c)| p == c).count();
        Ok(correct as f64 / self.classes.len() as f64)
    }
}

/// Source-dataset indices of every split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub pretrain: Vec<usize>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SplitBundle {
    /// Unlabeled pretraining series.
    pub pretrain: Vec<TimeSeries>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: TestSplit,
    pub classes: Vec<i64>,
    pub indices: SplitIndices,
    pub seed: u64,
    pub source: String,
}

impl SplitBundle {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn channels(&self) -> usize {
        self.train.first().map_or(0, |e| e.series.channels())
    }

    /// Applies `f` to every series of every split.
    pub fn map_series(&mut self, mut f: impl FnMut(&mut TimeSeries)) {
        self.pretrain.iter_mut().for_each(&mut f);
        self.train.iter_mut().for_each(|e| f(&mut e.series));
        self.validation.iter_mut().for_each(|e| f(&mut e.series));
        self.test.series_mut().iter_mut().for_each(f);
    }
}

/// Sizes `(pretrain, train, validation, test)` for `n` samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize, usize) {
    let (tr, va, te) = SPLIT_RATIOS;
    let n_train = (n as f64 * tr).floor() as usize;
    let n_val = (n as f64 * va).floor() as usize;
    let n_test = (n as f64 * te).floor() as usize;
    (n - n_train - n_val - n_test, n_train, n_val, n_test)
}

/// Random 50/30/10/10 partition under `seed`; flooring remainders go to pretrain.
pub fn split(dataset: &Dataset, seed: u64) -> Result<SplitBundle> {
    let n = dataset.len();
    ensure!(n >= 10, Input, "dataset {} has {n} samples; at least 10 are needed", dataset.name);
    let classes = dataset.classes();
    let class_of = |label: i64| classes.binary_search(&label).expect("label from this dataset");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (_, n_train, n_val, n_test) = split_sizes(n);
    let train_idx = order[..n_train].to_vec();
    let val_idx = order[n_train..n_train + n_val].to_vec();
    let test_idx = order[n_train + n_val..n_train + n_val + n_test].to_vec();
    let pre_idx = order[n_train + n_val + n_test..].to_vec();
    let examples = |idx: &[usize]| -> Vec<Example> {
        idx.iter()
            .map(|&i| Example { series: dataset.samples[i].series.clone(), class: class_of(dataset.samples[i].label) })
            .collect()
    };
    Ok(SplitBundle {
        pretrain: pre_idx.iter().map(|&i| dataset.samples[i].series.clone()).collect(),
        train: examples(&train_idx),
        validation: examples(&val_idx),
        test: TestSplit::new(examples(&test_idx)),
        classes,
        indices: SplitIndices { pretrain: pre_idx, train: train_idx, validation: val_idx, test: test_idx },
        seed,
        source: dataset.name.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledSeries;

    fn toy(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| LabeledSeries { series: TimeSeries::univariate(vec![i as f64, 0.0]).unwrap(), label: (i % 3) as i64 })
            .collect();
        Dataset::new("toy", samples)
    }

    #[test]
    fn sizes() {
        assert_eq!(split_sizes(100), (50, 30, 10, 10));
        assert_eq!(split_sizes(103), (53, 30, 10, 10));
        let b = split(&toy(103), 1).unwrap();
        assert_eq!((b.pretrain.len(), b.train.len(), b.validation.len(), b.test.len()), (53, 30, 10, 10));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = split(&toy(50), 9).unwrap();
        let b = split(&toy(50), 9).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_ne!(a.indices, split(&toy(50), 10).unwrap().indices);
    }

    #[test]
    fn too_small() {
        assert!(matches!(split(&toy(9), 0), Err(crate::Error::Input(_))));
    }

    #[test]
    fn score_counts_matches() {
        let b = split(&toy(30), 0).unwrap();
        let n = b.test.len();
        assert!(b.test.score(&vec![0; n + 1]).is_err());
        let acc = b.test.score(&vec![0; n]).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
