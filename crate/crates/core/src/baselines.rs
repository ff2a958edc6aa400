//! 1-nearest-neighbour classifiers under Euclidean and DTW distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, TimeSeries};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistanceKind {
    Euclidean,
    /// `window: None` is unconstrained.
    Dtw { window: Option<usize> },
}

impl DistanceKind {
    pub fn distance(self, a: &TimeSeries, b: &TimeSeries) -> Result<f64> {
        match self {
            DistanceKind::Euclidean => euclidean_distance(a, b),
            DistanceKind::Dtw { window } => dtw_distance(a, b, window),
        }
    }
}

pub fn euclidean_distance(a: &TimeSeries, b: &TimeSeries) -> Result<f64> {
    ensure!(
        a.channels() == b.channels() && a.len() == b.len(),
        Input,
        "euclidean distance needs equal shapes, got {}x{} and {}x{}",
        a.channels(),
        a.len(),
        b.channels(),
        b.len()
    );
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Dependent multichannel DTW with squared per-cell cost and a Sakoe-Chiba band.
///
/// The band is widened to `|len(a) − len(b)|` when narrower, otherwise no path exists.
pub fn dtw_distance(a: &TimeSeries, b: &TimeSeries, window: Option<usize>) -> Result<f64> {
    ensure!(!a.is_empty() && !b.is_empty(), Input, "dtw of an empty series");
    ensure!(a.channels() == b.channels(), Input, "dtw needs equal channel counts");
    let (n, m) = (a.len(), b.len());
    let w = window.unwrap_or(n.max(m)).max(n.abs_diff(m));
    let cost = |i: usize, j: usize| -> f64 { (0..a.channels()).map(|c| (a.channel(c)[i] - b.channel(c)[j]).powi(2)).sum() };
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur.fill(f64::INFINITY);
        let lo = i.saturating_sub(w).max(1);
        let hi = (i + w).min(m);
        for j in lo..=hi {
            let best = prev[j - 1].min(prev[j]).min(cur[j - 1]);
            cur[j] = cost(i - 1, j - 1) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m].sqrt())
}

/// Class of the nearest training example; ties go to the lowest index.
pub fn one_nn_classify(train: &[Example], query: &TimeSeries, kind: DistanceKind) -> Result<usize> {
    ensure!(!train.is_empty(), Usage, "1NN needs a non-empty training set");
    let mut best = (f64::INFINITY, 0);
    for e in train {
        let d = kind.distance(&e.series, query)?;
        if d < best.0 {
            best = (d, e.class);
        }
    }
    Ok(best.1)
}

/// Classifies every query in parallel.
pub fn one_nn_predict(train: &[Example], queries: &[TimeSeries], kind: DistanceKind) -> Result<Vec<usize>> {
    queries.par_iter().map(|q| one_nn_classify(train, q, kind)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(v: &[f64]) -> TimeSeries {
        TimeSeries::univariate(v.to_vec()).unwrap()
    }

    #[test]
    fn euclidean_examples() {
        let a = ts(&[0.0, 0.0]);
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&a, &ts(&[3.0, 4.0])).unwrap(), 5.0);
        assert!(euclidean_distance(&a, &ts(&[1.0])).is_err());
    }

    #[test]
    fn dtw_examples() {
        let a = ts(&[1.0, 2.0, 3.0]);
        assert_eq!(dtw_distance(&a, &a, None).unwrap(), 0.0);
        assert_eq!(dtw_distance(&a, &ts(&[1.0, 2.0, 2.0, 3.0]), None).unwrap(), 0.0);
        let b = ts(&[2.0, 0.5, 3.5]);
        assert!((dtw_distance(&a, &b, Some(0)).unwrap() - euclidean_distance(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn nn_picks_nearest_with_low_index_ties() {
        let train = vec![
            Example { series: ts(&[0.0, 0.0]), class: 0 },
            Example { series: ts(&[5.0, 5.0]), class: 1 },
            Example { series: ts(&[0.0, 0.0]), class: 2 },
        ];
        assert_eq!(one_nn_classify(&train, &ts(&[0.0, 0.0]), DistanceKind::Euclidean).unwrap(), 0);
        assert_eq!(one_nn_classify(&train, &ts(&[4.0, 4.0]), DistanceKind::Dtw { window: None }).unwrap(), 1);
        assert!(one_nn_classify(&[], &ts(&[1.0]), DistanceKind::Euclidean).is_err());
    }
}
