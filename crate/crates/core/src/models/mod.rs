//! Backbones, heads, and whole models.
//!
//! A [`Model`] owns its parameters and one or two branches (backbone plus
//! projector). Dual-branch models take the raw series on branch 0 and its
//! magnitude spectrum on branch 1.

mod checkpoint;
mod resnet;
mod transformer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use resnet::{RBlock, ResNet, ResNetSpec, RESNET_KERNELS, RESNET_MIN_LEN};
pub use transformer::{positional_encoding, TBlock, Transformer, TransformerSpec};

use crate::error::{ensure, Error, Result};
use crate::fft::{rfft, HalfSpectrum};
use crate::tensor::{Graph, Linear, ParamStore, Tensor, Var};

/// Whether a backbone pools over time or keeps one vector per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    Pooled,
    PerStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Resnet,
    Transformer,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Resnet => "ResNet",
            BackboneKind::Transformer => "Transformer",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(BackboneKind::Resnet),
            "transformer" => Ok(BackboneKind::Transformer),
            _ => Err(Error::Usage(format!("unknown backbone {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    Resnet(ResNetSpec),
    Transformer(TransformerSpec),
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, in_channels: usize, per_step: bool) -> Self {
        match (kind, per_step) {
            (BackboneKind::Resnet, false) => BackboneSpec::Resnet(ResNetSpec::new(in_channels)),
            (BackboneKind::Resnet, true) => BackboneSpec::Resnet(ResNetSpec::per_step(in_channels)),
            (BackboneKind::Transformer, false) => BackboneSpec::Transformer(TransformerSpec::new(in_channels)),
            (BackboneKind::Transformer, true) => BackboneSpec::Transformer(TransformerSpec::per_step(in_channels)),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            BackboneSpec::Resnet(_) => BackboneKind::Resnet,
            BackboneSpec::Transformer(_) => BackboneKind::Transformer,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            BackboneSpec::Resnet(s) => s.embed_dim(),
            BackboneSpec::Transformer(s) => s.embed_dim(),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            BackboneSpec::Resnet(s) => s.in_channels,
            BackboneSpec::Transformer(s) => s.in_channels,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            BackboneSpec::Resnet(s) => s.num_params(),
            BackboneSpec::Transformer(s) => s.num_params(),
        }
    }

    pub fn min_len(&self) -> usize {
        match self {
            BackboneSpec::Resnet(_) => RESNET_MIN_LEN,
            BackboneSpec::Transformer(_) => 1,
        }
    }

    /// Length step of per-step outputs relative to the input.
    pub fn stride(&self) -> usize {
        let strided = match self {
            BackboneSpec::Resnet(s) => s.strided_input,
            BackboneSpec::Transformer(s) => s.strided_input,
        };
        if strided {
            2
        } else {
            1
        }
    }
}

/// Projector `d → hidden → proj_dim` with a ReLU in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: usize,
    pub proj_dim: usize,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self { hidden: 64, proj_dim: 64 }
    }
}

impl HeadSpec {
    pub fn num_params(&self, embed_dim: usize) -> usize {
        embed_dim * self.hidden + self.hidden + self.hidden * self.proj_dim + self.proj_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub head: HeadSpec,
    /// 1, or 2 for a time branch plus a frequency branch.
    pub branches: usize,
    pub classes: Option<usize>,
}

impl ModelSpec {
    pub fn single(backbone: BackboneSpec) -> Self {
        Self { backbone, head: HeadSpec::default(), branches: 1, classes: None }
    }

    /// Two-branch spec whose total size is as close as possible to `self`.
    ///
    /// Heads are halved so the concatenated projection keeps the single-branch
    /// width; backbone widths are searched.
    pub fn dual(&self) -> Result<Self> {
        ensure!(self.branches == 1, Usage, "dual() expects a single-branch spec");
        let target = self.num_params() as f64;
        let head = HeadSpec { hidden: (self.head.hidden / 2).max(1), proj_dim: (self.head.proj_dim / 2).max(1) };
        let cost = |b: &BackboneSpec| {
            let total = 2 * (b.num_params() + head.num_params(b.embed_dim()));
            (total as f64 - target).abs()
        };
        let candidates: Vec<BackboneSpec> = match &self.backbone {
            BackboneSpec::Resnet(s) => (1..=s.widths[0])
                .map(|b| {
                    let scale = |w: usize| ((b * w) as f64 / s.widths[0] as f64).round().max(1.0) as usize;
                    BackboneSpec::Resnet(ResNetSpec { widths: [b, scale(s.widths[1]), scale(s.widths[2])], ..s.clone() })
                })
                .collect(),
            BackboneSpec::Transformer(s) => (1..=s.width / s.heads)
                .map(|m| m * s.heads)
                .filter(|d| d % 2 == 0)
                .flat_map(|d| (1..=4 * s.ffn).map(move |f| (d, f)))
                .map(|(width, ffn)| BackboneSpec::Transformer(TransformerSpec { width, ffn, ..s.clone() }))
                .collect(),
        };
        let backbone = candidates
            .into_iter()
            .min_by(|a, b| cost(a).total_cmp(&cost(b)))
            .ok_or_else(|| Error::Config("no admissible dual-branch width".into()))?;
        Ok(Self { backbone, head, branches: 2, classes: self.classes })
    }

    /// Width of the classifier input.
    pub fn feature_dim(&self) -> usize {
        self.head.proj_dim * self.branches
    }

    /// Scalar parameters of backbones and projectors.
    pub fn num_params(&self) -> usize {
        self.branches * (self.backbone.num_params() + self.head.num_params(self.backbone.embed_dim()))
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Resnet(ResNet),
    Transformer(Transformer),
}

impl Encoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &BackboneSpec, rng: &mut R) -> Self {
        match spec {
            BackboneSpec::Resnet(s) => Encoder::Resnet(ResNet::new(store, name, s, rng)),
            BackboneSpec::Transformer(s) => Encoder::Transformer(Transformer::new(store, name, s, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, output: Output) -> Result<Var> {
        match self {
            Encoder::Resnet(m) => m.forward(g, x, output),
            Encoder::Transformer(m) => m.forward(g, x, output),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Projector {
    pub l1: Linear,
    pub l2: Linear,
}

impl Projector {
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let z = self.l1.forward(g, h)?;
        let z = g.tape.relu(z);
        self.l2.forward(g, z)
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub encoder: Encoder,
    pub projector: Projector,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    branches: Vec<Branch>,
    classifier: Option<Linear>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        ensure!(spec.branches == 1 || spec.branches == 2, Config, "a model has 1 or 2 branches, not {}", spec.branches);
        if let BackboneSpec::Transformer(t) = &spec.backbone {
            ensure!(t.width % t.heads == 0 && t.width % 2 == 0, Config, "transformer width must be even and divisible by heads");
        }
        let mut store = ParamStore::new();
        let d = spec.backbone.embed_dim();
        let branches = (0..spec.branches)
            .map(|i| {
                let encoder = Encoder::new(&mut store, &format!("branch{i}.backbone"), &spec.backbone, rng);
                let l1 = Linear::new(&mut store, &format!("branch{i}.proj1"), d, spec.head.hidden, rng);
                let l2 = Linear::new(&mut store, &format!("branch{i}.proj2"), spec.head.hidden, spec.head.proj_dim, rng);
                Branch { encoder, projector: Projector { l1, l2 } }
            })
            .collect();
        let classifier = spec.classes.map(|k| Linear::new(&mut store, "classifier", spec.feature_dim(), k, rng));
        Ok(Self { spec, store, branches, classifier })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.spec.classes
    }

    /// Adds a freshly initialized classifier, replacing none.
    pub fn attach_classifier<R: Rng + ?Sized>(&mut self, classes: usize, rng: &mut R) -> Result<()> {
        ensure!(classes >= 2, Config, "a classifier needs at least 2 classes");
        match self.spec.classes {
            Some(k) => ensure!(k == classes, Config, "model has a {k}-class classifier, task has {classes} classes"),
            None => {
                self.classifier = Some(Linear::new(&mut self.store, "classifier", self.spec.feature_dim(), classes, rng));
                self.spec.classes = Some(classes);
            }
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, x: Var, branch: usize, output: Output) -> Result<Var> {
        self.branches[branch].encoder.forward(g, x, output)
    }

    pub fn project(&self, g: &mut Graph, h: Var, branch: usize) -> Result<Var> {
        self.branches[branch].projector.forward(g, h)
    }

    /// Pooled embedding followed by the projector.
    pub fn embed_project(&self, g: &mut Graph, x: Var, branch: usize) -> Result<Var> {
        let h = self.encode(g, x, branch, Output::Pooled)?;
        self.project(g, h, branch)
    }

    /// Classifier input: the projection, or both projections concatenated.
    pub fn features(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        let xt = g.input(x.clone());
        let zt = self.embed_project(g, xt, 0)?;
        if self.spec.branches == 1 {
            return Ok(zt);
        }
        let xf = g.input(frequency_view(x, |s| s)?);
        let zf = self.embed_project(g, xf, 1)?;
        g.tape.concat(&[zt, zf], 1)
    }

    pub fn logits(&self, g: &mut Graph, x: &Tensor) -> Result<Var> {
        let classifier = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Usage("classifier requested before the class count was configured".into()))?;
        let z = self.features(g, x)?;
        classifier.forward(g, z)
    }

    /// Argmax class per series of `x` (`[n, c, L]`), evaluated in chunks.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
        let n = x.shape()[0];
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
            let mut g = Graph::inference(&self.store);
            let logits = self.logits(&mut g, &x.select_leading(&idx))?;
            for row in g.tape.value(logits).rows() {
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { meta: serde_json::json!({ "model": self.spec }), params: self.store.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec =
            serde_json::from_value(ck.meta["model"].clone()).map_err(|e| Error::Serde(e.to_string()))?;
        let mut model = Model::new(spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        model.store.load_from(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Magnitude half-spectrum of every channel, zero-padded or cropped back to
/// the series length. `f` may perturb each spectrum first.
pub fn frequency_view(x: &Tensor, mut f: impl FnMut(HalfSpectrum) -> HalfSpectrum) -> Result<Tensor> {
    ensure!(x.ndim() == 3, Dimension, "frequency view expects [n, c, L], got {:?}", x.shape());
    let l = x.shape()[2];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(l) {
        let mags = f(rfft(row)).magnitudes();
        out.extend((0..l).map(|i| mags.get(i).copied().unwrap_or(0.0)));
    }
    Tensor::new(x.shape(), out)
}
