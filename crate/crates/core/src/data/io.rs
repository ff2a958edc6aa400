//! Dataset files.
//!
//! Univariate TSV: one sample per line, integer label then tab-separated values.
//! Multivariate JSON lines: `{"label": <int>, "channels": [[...], ...]}` per line.
//! A dataset directory holds `data.tsv` or `data.jsonl` next to `meta.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledSeries, TimeSeries};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Tsv,
    Jsonl,
}

impl Format {
    pub fn file_name(self) -> &'static str {
        match self {
            Format::Tsv => "data.tsv",
            Format::Jsonl => "data.jsonl",
        }
    }

    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tsv" => Some(Format::Tsv),
            "jsonl" => Some(Format::Jsonl),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub channels: usize,
    /// Median series length.
    pub length: usize,
    pub classes: usize,
}

impl DatasetMeta {
    pub fn describe(ds: &Dataset) -> Self {
        Self { name: ds.name.clone(), channels: ds.channels(), length: ds.median_len(), classes: ds.classes().len() }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_value(field: &str, line: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| parse_err(line, format!("non-numeric value {field:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("missing or non-finite value {field:?}")));
    }
    Ok(v)
}

fn parse_label(field: &str, line: usize) -> Result<i64> {
    field.trim().parse().map_err(|_| parse_err(line, format!("label {field:?} is not an integer")))
}

fn finish(name: &str, samples: Vec<LabeledSeries>) -> Result<Dataset> {
    if samples.is_empty() {
        return Err(parse_err(0, "file contains no samples"));
    }
    Ok(Dataset::new(name, samples))
}

pub fn read_tsv(text: &str, name: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split('\t');
        let label = parse_label(fields.next().unwrap_or(""), line)?;
        let values = fields.map(|f| parse_value(f, line)).collect::<Result<Vec<_>>>()?;
        ensure!(!values.is_empty(), Input, "line {line}: row has a label but no values");
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(line, format!("ragged row: {} values, expected {w}", values.len())))
            }
            _ => {}
        }
        samples.push(LabeledSeries { series: TimeSeries::univariate(values)?, label });
    }
    finish(name, samples)
}

#[derive(Serialize, Deserialize)]
struct JsonSample {
    label: i64,
    channels: Vec<Vec<f64>>,
}

pub fn read_jsonl(text: &str, name: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut n_channels: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: JsonSample = serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
        if rec.channels.is_empty() || rec.channels[0].is_empty() {
            return Err(parse_err(line, "sample has no values"));
        }
        let len = rec.channels[0].len();
        if rec.channels.iter().any(|c| c.len() != len) {
            return Err(parse_err(line, "channels have unequal lengths"));
        }
        if rec.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(parse_err(line, "non-finite value"));
        }
        match n_channels {
            None => n_channels = Some(rec.channels.len()),
            Some(c) if c != rec.channels.len() => {
                return Err(parse_err(line, format!("{} channels, expected {c}", rec.channels.len())))
            }
            _ => {}
        }
        samples.push(LabeledSeries { series: TimeSeries::from_channels(&rec.channels)?, label: rec.label });
    }
    finish(name, samples)
}

/// Canonical TSV text: shortest round-trip float formatting, `\n` line ends.
pub fn write_tsv(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for s in &ds.samples {
        ensure!(s.series.channels() == 1, Input, "TSV holds univariate series only");
        write!(out, "{}", s.label).unwrap();
        for v in s.series.values() {
            write!(out, "\t{v:?}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(ds: &Dataset) -> Result<String> {
    let mut out = String::new();
    for s in &ds.samples {
        let channels = (0..s.series.channels()).map(|c| s.series.channel(c).to_vec()).collect();
        let rec = JsonSample { label: s.label, channels };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    match format {
        Format::Tsv => read_tsv(&text, &name),
        Format::Jsonl => read_jsonl(&text, &name),
    }
}

/// Loads `<dir>/data.tsv` or `<dir>/data.jsonl`, naming it from `meta.json` when present.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let format = [Format::Tsv, Format::Jsonl]
        .into_iter()
        .find(|f| dir.join(f.file_name()).exists())
        .ok_or_else(|| Error::Input(format!("{} holds neither data.tsv nor data.jsonl", dir.display())))?;
    let mut ds = load_dataset(&dir.join(format.file_name()), format)?;
    let meta_path = dir.join("meta.json");
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))?;
        ensure!(
            meta.channels == ds.channels(),
            Input,
            "meta.json declares {} channels, data has {}",
            meta.channels,
            ds.channels()
        );
        ds.name = meta.name;
    }
    Ok(ds)
}

/// Writes `<dir>/<name>/data.{tsv,jsonl}` plus `meta.json`; returns the dataset directory.
pub fn write_dataset_dir(ds: &Dataset, root: &Path) -> Result<std::path::PathBuf> {
    let dir = root.join(&ds.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (format, text) = if ds.channels() == 1 { (Format::Tsv, write_tsv(ds)?) } else { (Format::Jsonl, write_jsonl(ds)?) };
    let data_path = dir.join(format.file_name());
    fs::write(&data_path, text).map_err(|e| Error::io(&data_path, e))?;
    let meta = serde_json::to_string_pretty(&DatasetMeta::describe(ds)).map_err(|e| Error::Serde(e.to_string()))?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_row() {
        let ds = read_tsv("1\t0.5\t0.7\n", "x").unwrap();
        assert_eq!(ds.samples[0].label, 1);
        assert_eq!(ds.samples[0].series.values(), &[0.5, 0.7]);
    }

    #[test]
    fn jsonl_row() {
        let ds = read_jsonl("{\"label\":0,\"channels\":[[1,2],[3,4]]}\n", "x").unwrap();
        let s = &ds.samples[0].series;
        assert_eq!((s.channels(), s.len()), (2, 2));
        assert_eq!(s.channel(1), &[3.0, 4.0]);
    }

    #[test]
    fn empty_file_is_error() {
        assert!(matches!(read_tsv("", "x"), Err(Error::Parse { .. })));
        assert!(matches!(read_jsonl("\n", "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let ragged = "0\t1\t2\n1\t3\n";
        assert!(matches!(read_tsv(ragged, "x"), Err(Error::Parse { line: 2, .. })));
        let bad = "0\t1\t2\n1\t3\tabc\n";
        assert!(matches!(read_tsv(bad, "x"), Err(Error::Parse { line: 2, .. })));
        let missing = "0\t1\tNaN\n";
        assert!(matches!(read_tsv(missing, "x"), Err(Error::Parse { line: 1, .. })));
        let uneven = "{\"label\":0,\"channels\":[[1,2],[3,4]]}\n{\"label\":1,\"channels\":[[1,2],[3]]}\n";
        assert!(matches!(read_jsonl(uneven, "x"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn canonical_round_trip() {
        let text = "-1\t0.1\t2.5\t-3.0\n2\t1e-7\t4.0\t5.25\n";
        let ds = read_tsv(text, "x").unwrap();
        let canon = write_tsv(&ds).unwrap();
        assert_eq!(write_tsv(&read_tsv(&canon, "x").unwrap()).unwrap(), canon);

        let j = "{\"label\":3,\"channels\":[[1.5,2.0],[0.1,-4.0]]}\n";
        let ds = read_jsonl(j, "x").unwrap();
        let canon = write_jsonl(&ds).unwrap();
        assert_eq!(write_jsonl(&read_jsonl(&canon, "x").unwrap()).unwrap(), canon);
    }
}
