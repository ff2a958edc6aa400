//! Cross-dataset average ranks, top-k tables, size-versus-gain regression and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::pipeline::{ExperimentRecord, Status};

/// Test accuracies of methods (rows) on datasets (columns). Cells may be missing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsMatrix {
    cells: BTreeMap<String, BTreeMap<String, f64>>,
    datasets: BTreeSet<String>,
}

impl ResultsMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, method: &str, dataset: &str, accuracy: f64) -> Result<()> {
        ensure!((0.0..=1.0).contains(&accuracy), Domain, "accuracy {accuracy} of {method} on {dataset} is outside [0, 1]");
        self.cells.entry(method.to_string()).or_default().insert(dataset.to_string(), accuracy);
        self.datasets.insert(dataset.to_string());
        Ok(())
    }

    /// Complete records only; several seeds of one cell are averaged.
    pub fn from_records(records: &[ExperimentRecord]) -> Result<Self> {
        let mut sums: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.is_complete()) {
            if let Some(acc) = r.test_accuracy {
                let e = sums.entry((r.method.as_str(), r.dataset.as_str())).or_default();
                e.0 += acc;
                e.1 += 1;
            }
        }
        let mut m = Self::new();
        for ((method, dataset), (sum, n)) in sums {
            m.insert(method, dataset, sum / n as f64)?;
        }
        Ok(m)
    }

    pub fn methods(&self) -> impl Iterator<Item = &str> {
        self.cells.keys().map(String::as_str)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &str> {
        self.datasets.iter().map(String::as_str)
    }

    pub fn get(&self, method: &str, dataset: &str) -> Option<f64> {
        self.cells.get(method)?.get(dataset).copied()
    }

    /// Datasets on which every method has an entry.
    pub fn complete_datasets(&self) -> Vec<&str> {
        self.datasets().filter(|d| self.cells.values().all(|row| row.contains_key(*d))).collect()
    }

    pub fn missing(&self, method: &str) -> usize {
        self.cells.get(method).map_or(self.datasets.len(), |row| self.datasets.len() - row.len())
    }
}

/// 1-based ranks of `values`, highest first; ties share the mean of their positions.
pub fn rank_descending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = shared;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub method: String,
    pub avg_rank: f64,
    /// Datasets the rank is averaged over.
    pub n_datasets: usize,
    /// Datasets lacking an entry for this method.
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    /// Ordered by average rank, then method name.
    pub entries: Vec<RankEntry>,
    /// Datasets left out because some method had no entry.
    pub excluded_datasets: Vec<String>,
    pub archive: Option<String>,
}

impl RankTable {
    /// Builds a table from precomputed average ranks.
    pub fn from_ranks(ranks: &[(&str, f64)], n_datasets: usize) -> Self {
        let mut entries: Vec<RankEntry> = ranks
            .iter()
            .map(|&(m, r)| RankEntry { method: m.to_string(), avg_rank: r, n_datasets, missing: 0 })
            .collect();
        sort_entries(&mut entries);
        Self { entries, excluded_datasets: Vec::new(), archive: None }
    }

    pub fn get(&self, method: &str) -> Option<&RankEntry> {
        self.entries.iter().find(|e| e.method == method)
    }
}

fn sort_entries(entries: &mut [RankEntry]) {
    entries.sort_by(|a, b| a.avg_rank.total_cmp(&b.avg_rank).then_with(|| a.method.cmp(&b.method)));
}

/// Mean per-dataset rank of every method over the datasets where all methods have entries.
pub fn average_rank(matrix: &ResultsMatrix) -> Result<RankTable> {
    let methods: Vec<&str> = matrix.methods().collect();
    ensure!(methods.len() >= 2, Usage, "ranking needs at least 2 methods, got {}", methods.len());
    let complete = matrix.complete_datasets();
    ensure!(!complete.is_empty(), Usage, "no dataset has results for all {} methods", methods.len());
    let mut totals = vec![0.0; methods.len()];
    for d in &complete {
        let accs: Vec<f64> = methods.iter().map(|m| matrix.get(m, d).expect("complete column")).collect();
        for (t, r) in totals.iter_mut().zip(rank_descending(&accs)) {
            *t += r;
        }
    }
    let mut entries: Vec<RankEntry> = methods
        .iter()
        .zip(totals)
        .map(|(m, t)| RankEntry {
            method: m.to_string(),
            avg_rank: t / complete.len() as f64,
            n_datasets: complete.len(),
            missing: matrix.missing(m),
        })
        .collect();
    sort_entries(&mut entries);
    let excluded = matrix.datasets().filter(|d| !complete.contains(d)).map(str::to_string).collect();
    Ok(RankTable { entries, excluded_datasets: excluded, archive: None })
}

/// The `k` best methods, lowest average rank first and ties by name.
pub fn top_k(table: &RankTable, k: usize) -> Vec<String> {
    let mut entries = table.entries.clone();
    sort_entries(&mut entries);
    entries.into_iter().take(k).map(|e| e.method).collect()
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn ols(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    ensure!(points.len() >= 2, Usage, "a regression needs at least 2 points, got {}", points.len());
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    ensure!(sxx > 0.0, Usage, "all points share the same size; the slope is undefined");
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainPoint {
    pub dataset: String,
    pub pretrain_size: usize,
    /// Accuracy of the first method minus that of the second.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeGain {
    pub method: String,
    pub baseline: String,
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<GainPoint>,
}

fn per_dataset(records: &[ExperimentRecord]) -> BTreeMap<&str, (usize, f64)> {
    let mut acc: BTreeMap<&str, (usize, f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_complete()) {
        if let Some(a) = r.test_accuracy {
            let e = acc.entry(r.dataset.as_str()).or_insert((r.pretrain_size, 0.0, 0));
            e.1 += a;
            e.2 += 1;
        }
    }
    acc.into_iter().map(|(d, (s, sum, n))| (d, (s, sum / n as f64))).collect()
}

/// Accuracy gain of `a` over `b` against pretraining-set size, per shared dataset,
/// with its least-squares line. Seeds of one dataset are averaged.
pub fn size_vs_gain(a: &[ExperimentRecord], b: &[ExperimentRecord]) -> Result<SizeGain> {
    let name = |rs: &[ExperimentRecord]| rs.first().map(|r| r.method.clone()).unwrap_or_default();
    let (pa, pb) = (per_dataset(a), per_dataset(b));
    let points: Vec<GainPoint> = pa
        .iter()
        .filter_map(|(d, (size, acc_a))| {
            pb.get(d).map(|(_, acc_b)| GainPoint { dataset: d.to_string(), pretrain_size: *size, gain: acc_a - acc_b })
        })
        .collect();
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.pretrain_size as f64, p.gain)).collect();
    let (slope, intercept) = ols(&xy)?;
    Ok(SizeGain { method: name(a), baseline: name(b), slope, intercept, points })
}

/// Pairs every generator variant with its no-generator counterpart found in `records`.
pub fn generator_gains(records: &[ExperimentRecord]) -> Vec<SizeGain> {
    let mut by_method: BTreeMap<&str, Vec<ExperimentRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method.as_str()).or_default().push(r.clone());
    }
    let mut out = Vec::new();
    for (method, rs) in &by_method {
        let Some((prefix, _)) = method.rsplit_once('+').filter(|(_, g)| *g != "NG") else {
            continue;
        };
        if let Some(base) = by_method.get(format!("{prefix}+NG").as_str()) {
            if let Ok(sg) = size_vs_gain(rs, base) {
                out.push(sg);
            }
        }
    }
    out
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn rank_csv(table: &RankTable) -> String {
    let mut s = String::from("method,avg_rank,n_datasets\n");
    for e in &table.entries {
        let _ = writeln!(s, "{},{},{}", e.method, e.avg_rank, e.n_datasets);
    }
    s
}

pub fn scatter_csv(gains: &[SizeGain]) -> String {
    let mut s = String::from("method,baseline,dataset,pretrain_size,gain\n");
    for g in gains {
        for p in &g.points {
            let _ = writeln!(s, "{},{},{},{},{}", g.method, g.baseline, p.dataset, p.pretrain_size, p.gain);
        }
    }
    s
}

fn markdown(table: &RankTable, gains: &[SizeGain], records: &[ExperimentRecord]) -> String {
    let mut s = String::new();
    match &table.archive {
        Some(a) => {
            let _ = writeln!(s, "# Average ranks ({a})\n");
        }
        None => s.push_str("# Average ranks\n\n"),
    }
    let failed = records.iter().filter(|r| !r.is_complete()).count();
    let _ = writeln!(s, "{} records, {} failed.\n", records.len(), failed);
    s.push_str("| # | method | avg rank | datasets | missing |\n|---|---|---|---|---|\n");
    for (i, e) in table.entries.iter().enumerate() {
        let _ = writeln!(s, "| {} | {} | {:.3} | {} | {} |", i + 1, e.method, e.avg_rank, e.n_datasets, e.missing);
    }
    if !table.excluded_datasets.is_empty() {
        let _ = writeln!(
            s,
            "\n{} dataset(s) excluded for missing entries: {}",
            table.excluded_datasets.len(),
            table.excluded_datasets.join(", ")
        );
    }
    s.push_str("\n# Records\n\n| method | dataset | seed | test accuracy | status |\n|---|---|---|---|---|\n");
    let mut rows: Vec<&ExperimentRecord> = records.iter().collect();
    rows.sort_by(|a, b| (&a.method, &a.dataset, a.config.seed).cmp(&(&b.method, &b.dataset, b.config.seed)));
    for r in rows {
        let acc = r.test_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        let status = match &r.status {
            Status::Complete => "complete".to_string(),
            Status::Failed { stage, .. } => format!("failed in {stage}"),
        };
        let _ = writeln!(s, "| {} | {} | {} | {} | {} |", r.method, r.dataset, r.config.seed, acc, status);
    }
    if !gains.is_empty() {
        s.push_str("\n# Gain against pretraining-set size\n\n| method | baseline | points | slope | intercept |\n|---|---|---|---|---|\n");
        for g in gains {
            let _ = writeln!(s, "| {} | {} | {} | {:.6e} | {:.6} |", g.method, g.baseline, g.points.len(), g.slope, g.intercept);
        }
    }
    s
}

/// Writes `report.md`, `ranks.csv` and `scatter.csv` into `out`. Output depends
/// only on the inputs.
pub fn emit_report(table: &RankTable, records: &[ExperimentRecord], out: &Path) -> Result<Vec<PathBuf>> {
    ensure!(!table.entries.is_empty(), Usage, "cannot report an empty rank table");
    fs::create_dir_all(out).map_err(io(out))?;
    let gains = generator_gains(records);
    let files = [
        ("report.md", markdown(table, &gains, records)),
        ("ranks.csv", rank_csv(table)),
        ("scatter.csv", scatter_csv(&gains)),
    ];
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = out.join(name);
        fs::write(&p, body).map_err(io(&p))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(methods: &[&str], datasets: &[&str], rows: &[&[f64]]) -> ResultsMatrix {
        let mut m = ResultsMatrix::new();
        for (mi, row) in rows.iter().enumerate() {
            for (di, &a) in row.iter().enumerate() {
                m.insert(methods[mi], datasets[di], a).unwrap();
            }
        }
        m
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_descending(&[0.9, 0.8]), vec![1.0, 2.0]);
        assert_eq!(rank_descending(&[0.8, 0.8]), vec![1.5, 1.5]);
        assert_eq!(rank_descending(&[0.5, 0.7, 0.7, 0.1]), vec![3.0, 1.5, 1.5, 4.0]);
        let m = matrix(&["a", "b", "c"], &["d1", "d2"], &[&[0.9, 0.7], &[0.8, 0.8], &[0.7, 0.9]]);
        let t = average_rank(&m).unwrap();
        assert!(t.entries.iter().all(|e| e.avg_rank == 2.0 && e.n_datasets == 2));
        assert_eq!(top_k(&t, 3), ["a", "b", "c"]);
    }

    #[test]
    fn incomplete_columns_are_excluded() {
        let mut m = matrix(&["a", "b"], &["d1"], &[&[0.9], &[0.8]]);
        m.insert("a", "d2", 0.1).unwrap();
        let t = average_rank(&m).unwrap();
        assert_eq!(t.excluded_datasets, ["d2"]);
        assert_eq!(t.get("b").unwrap().missing, 1);
        assert_eq!(t.get("a").unwrap().missing, 0);
        let mut lonely = ResultsMatrix::new();
        lonely.insert("a", "d1", 0.5).unwrap();
        lonely.insert("b", "d2", 0.5).unwrap();
        assert!(matches!(average_rank(&lonely), Err(Error::Usage(_))));
        assert!(matches!(lonely.insert("a", "d3", 1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn ols_examples() {
        let line: Vec<(f64, f64)> = (0..5).map(|x| (x as f64, 2.0 * x as f64 + 1.0)).collect();
        let (s, i) = ols(&line).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12);
        let (s, i) = ols(&[(1.0, 1.0), (2.0, 3.0), (3.0, 2.0)]).unwrap();
        assert!((s - 0.5).abs() < 1e-12 && (i - 1.0).abs() < 1e-12);
        assert!(matches!(ols(&[(1.0, 1.0)]), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn ranks_ignore_increasing_transforms(accs in prop::collection::vec(0.0f64..1.0, 2..8)) {
            let transformed: Vec<f64> = accs.iter().map(|a| a * a * 0.5 + 0.1).collect();
            prop_assert_eq!(rank_descending(&accs), rank_descending(&transformed));
        }

        #[test]
        fn average_ranks_stay_in_range(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 2..6)) {
            let methods: Vec<String> = (0..rows.len()).map(|i| format!("m{i}")).collect();
            let mut m = ResultsMatrix::new();
            for (mi, row) in rows.iter().enumerate() {
                for (di, &a) in row.iter().enumerate() {
                    m.insert(&methods[mi], &format!("d{di}"), (a * 4.0).round() / 4.0).unwrap();
                }
            }
            let t = average_rank(&m).unwrap();
            let total: f64 = t.entries.iter().map(|e| e.avg_rank).sum();
            let k = rows.len() as f64;
            prop_assert!((total - k * (k + 1.0) / 2.0).abs() < 1e-9);
            prop_assert!(t.entries.iter().all(|e| e.avg_rank >= 1.0 && e.avg_rank <= k));
        }

        #[test]
        fn ols_is_antisymmetric(pts in prop::collection::vec((0.0f64..1000.0, -1.0f64..1.0), 3..20)) {
            prop_assume!(pts.iter().any(|p| (p.0 - pts[0].0).abs() > 1e-6));
            let neg: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, -y)).collect();
            let (s, i) = ols(&pts).unwrap();
            let (sn, inn) = ols(&neg).unwrap();
            prop_assert!((s + sn).abs() < 1e-9 * (1.0 + s.abs()));
            prop_assert!((i + inn).abs() < 1e-9 * (1.0 + i.abs()));
        }
    }
}
