use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ExperimentConfig, GeneratorChoice, MethodKind, PtmChoice};
use super::{run_experiment, ExperimentRecord};
use crate::error::{Error, Result};

/// Lists of alternatives; every combination becomes one experiment.
/// Empty lists keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunGrid {
    pub backbones: Vec<MethodKind>,
    pub ptms: Vec<PtmChoice>,
    pub generators: Vec<GeneratorChoice>,
    pub datasets: Vec<DatasetSource>,
    pub seeds: Vec<u64>,
}

/// A run file: one experiment configuration, optionally expanded by a `[grid]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: Option<RunGrid>,
}

impl RunFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

fn or_base<T: Clone>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

/// All experiments of `file`. Methods without a PTM appear once regardless of the
/// generator list, and duplicates are dropped.
pub fn expand_run_file(file: &RunFile) -> Result<Vec<ExperimentConfig>> {
    let base = &file.base;
    let grid = file.grid.clone().unwrap_or_default();
    let mut out: Vec<ExperimentConfig> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for dataset in or_base(&grid.datasets, base.dataset.clone()) {
        for seed in or_base(&grid.seeds, base.seed) {
            for backbone in or_base(&grid.backbones, base.backbone) {
                for PtmChoice(ptm) in or_base(&grid.ptms, PtmChoice(base.ptm)) {
                    for GeneratorChoice(generator) in or_base(&grid.generators, GeneratorChoice(base.generator)) {
                        let mut cfg = base.clone();
                        cfg.dataset = dataset.clone();
                        cfg.seed = seed;
                        cfg.backbone = backbone;
                        let neural = matches!(backbone, MethodKind::Backbone(_));
                        cfg.ptm = if neural { ptm } else { None };
                        cfg.generator = if cfg.ptm.is_some() { generator } else { None };
                        cfg.validate()?;
                        if seen.insert(cfg.hash()) {
                            out.push(cfg);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn record_path(out: &Path, hash: &str) -> PathBuf {
    out.join("records").join(format!("{hash}.json"))
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_record(path: &Path) -> Result<ExperimentRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
}

fn run_one(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentRecord> {
    let hash = cfg.hash();
    let path = record_path(out, &hash);
    if path.exists() {
        if let Ok(rec) = read_record(&path) {
            if rec.is_complete() && rec.config_hash == hash {
                return Ok(rec);
            }
        }
    }
    let start = Instant::now();
    let rec = run_experiment(cfg);
    let timing = Timing { wall_seconds: start.elapsed().as_secs_f64() };
    let json = serde_json::to_string_pretty(&rec).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&path, &json)?;
    let timing = serde_json::to_string(&timing).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&path.with_extension("time.json"), &timing)?;
    Ok(rec)
}

/// Runs `configs` on `workers` threads, writing one record per experiment to
/// `<out>/records/<hash>.json`. Completed records already on disk are reused.
/// Records come back in input order; failed experiments are recorded, not raised.
pub fn run_all(configs: &[ExperimentConfig], out: &Path, workers: usize) -> Result<Vec<ExperimentRecord>> {
    let dir = out.join("records");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| configs.par_iter().map(|cfg| run_one(cfg, out)).collect())
}

/// Every record in `dir`, ordered by file name.
pub fn load_records(dir: &Path) -> Result<Vec<ExperimentRecord>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with(".time.json")
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_record(p)).collect()
}
