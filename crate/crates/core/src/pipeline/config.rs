use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::baselines::DistanceKind;
use crate::data::{NormMode, SynthSpec};
use crate::error::{ensure, Error, Result};
use crate::generators::{GeneratorConfig, GeneratorKind, UCR_THRESHOLD};
use crate::models::{BackboneKind, BackboneSpec, HeadSpec, ModelSpec};
use crate::pretrain::{ContrastConfig, PtmKind};
use crate::train::TrainConfig;

/// A neural backbone or one of the nearest-neighbour baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MethodKind {
    Backbone(BackboneKind),
    OneNnEd,
    OneNnDtw,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Backbone(b) => b.name(),
            MethodKind::OneNnEd => "1NN-ED",
            MethodKind::OneNnDtw => "1NN-DTW",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
            "1nn-ed" => Ok(MethodKind::OneNnEd),
            "1nn-dtw" => Ok(MethodKind::OneNnDtw),
            _ => s.parse().map(MethodKind::Backbone),
        }
    }
}

impl Serialize for MethodKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for MethodKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `"none"` for no pretraining.
mod opt_ptm {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<PtmKind>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(v.map_or("none", PtmKind::name))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<PtmKind>, D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(serde::de::Error::custom)
        }
    }
}

/// `"NG"` for pretraining on the real pretraining split.
mod opt_gen {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<GeneratorKind>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(v.map_or("NG", GeneratorKind::name))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<GeneratorKind>, D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("ng") || s.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(serde::de::Error::custom)
        }
    }
}

/// A PTM or `"none"`, for lists of alternatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PtmChoice(#[serde(with = "opt_ptm")] pub Option<PtmKind>);

/// A generator or `"NG"`, for lists of alternatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeneratorChoice(#[serde(with = "opt_gen")] pub Option<GeneratorKind>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// A built-in synthetic dataset drawn with its own seed.
    Synth {
        #[serde(flatten)]
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
    /// A dataset directory holding `data.tsv` or `data.jsonl` and `meta.json`.
    Dir { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerSize {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn: usize,
}

impl Default for TransformerSize {
    fn default() -> Self {
        Self { layers: 4, heads: 8, width: 64, ffn: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resnet_widths: [usize; 3],
    pub transformer: TransformerSize,
    pub head: HeadSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { resnet_widths: [64, 128, 128], transformer: TransformerSize::default(), head: HeadSpec::default() }
    }
}

impl ModelConfig {
    /// Model for `backbone` on `channels`-channel input, shaped for `ptm`.
    pub fn build(&self, backbone: BackboneKind, channels: usize, ptm: Option<PtmKind>) -> Result<ModelSpec> {
        let per_step = ptm.is_some_and(PtmKind::per_step);
        let mut bb = BackboneSpec::new(backbone, channels, per_step);
        match &mut bb {
            BackboneSpec::Resnet(r) => r.widths = self.resnet_widths,
            BackboneSpec::Transformer(t) => {
                t.layers = self.transformer.layers;
                t.heads = self.transformer.heads;
                t.width = self.transformer.width;
                t.ffn = self.transformer.ffn;
            }
        }
        let mut spec = ModelSpec::single(bb);
        spec.head = self.head;
        if ptm.is_some_and(|p| p.branches() == 2) {
            spec = spec.dual()?;
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub backbone: MethodKind,
    #[serde(with = "opt_ptm")]
    pub ptm: Option<PtmKind>,
    #[serde(with = "opt_gen")]
    pub generator: Option<GeneratorKind>,
    pub dataset: DatasetSource,
    pub seed: u64,
    /// Generation threshold of the archive the dataset belongs to.
    pub threshold: usize,
    pub normalization: NormMode,
    /// Fine-tuning epochs between validation checkpoints.
    pub validate_every: usize,
    /// Sakoe-Chiba window for the DTW baseline; `None` is unconstrained.
    pub dtw_window: Option<usize>,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub contrast: ContrastConfig,
    pub generator_config: GeneratorConfig,
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: MethodKind::Backbone(BackboneKind::Resnet),
            ptm: None,
            generator: None,
            dataset: DatasetSource::Synth {
                spec: SynthSpec { kind: crate::data::SynthKind::ThreeClassWaves, n: 300, length: 64, noise: 0.3 },
                seed: 0,
            },
            seed: 0,
            threshold: UCR_THRESHOLD,
            normalization: NormMode::default(),
            validate_every: 10,
            dtw_window: None,
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            contrast: ContrastConfig::default(),
            generator_config: GeneratorConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.validate_every >= 1, Config, "validate_every must be at least 1");
        ensure!(self.threshold >= 1, Config, "threshold must be positive");
        self.finetune.validate()?;
        if self.ptm.is_some() && matches!(self.backbone, MethodKind::Backbone(_)) {
            self.pretrain.validate()?;
            self.contrast.validate()?;
            if self.generator.is_some() {
                self.generator_config.validate()?;
            }
        }
        Ok(())
    }

    /// Pretraining settings matter only for neural methods with a PTM.
    pub fn pretrains(&self) -> bool {
        self.ptm.is_some() && matches!(self.backbone, MethodKind::Backbone(_))
    }

    /// `Backbone+PTM+Generator`, or the bare method name without pretraining.
    pub fn method_name(&self) -> String {
        match (self.backbone, self.ptm) {
            (MethodKind::Backbone(b), Some(p)) => {
                format!("{}+{}+{}", b.name(), p.name(), self.generator.map_or("NG", GeneratorKind::name))
            }
            (m, _) => m.name().to_string(),
        }
    }

    pub fn dataset_name(&self) -> String {
        match &self.dataset {
            DatasetSource::Synth { spec, .. } => spec.kind.to_string(),
            DatasetSource::Dir { path } => path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
        }
    }

    pub(crate) fn distance(&self) -> Option<DistanceKind> {
        match self.backbone {
            MethodKind::OneNnEd => Some(DistanceKind::Euclidean),
            MethodKind::OneNnDtw => Some(DistanceKind::Dtw { window: self.dtw_window }),
            MethodKind::Backbone(_) => None,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
