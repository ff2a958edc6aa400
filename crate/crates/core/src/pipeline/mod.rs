//! The four-stage driver: pretrain, fine-tune, validate, test.

mod config;
mod runner;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{DatasetSource, ExperimentConfig, GeneratorChoice, MethodKind, ModelConfig, PtmChoice, TransformerSize};
pub use runner::{expand_run_file, load_records, record_path, run_all, RunFile, RunGrid};

use crate::baselines::one_nn_predict;
use crate::data::{
    batch_tensor, load_dataset_dir, split, synth_dataset, Dataset, Example, SplitBundle, TestSplit,
    TimeSeries,
};
use crate::error::{ensure, Error, Result};
use crate::generators::{n_gen_policy, GeneratorModel};
use crate::models::{BackboneKind, Model};
use crate::pretrain::pretrain;
use crate::tensor::{functional::cross_entropy, Graph};
use crate::train::{batches, batches_per_epoch, check_finite, Optimizer, TrainConfig};

const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Status {
    Complete,
    Failed { stage: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    /// 1-based fine-tuning epoch after which the model was validated.
    pub epoch: usize,
    pub accuracy: f64,
}

/// Outcome of one experiment. Wall time is kept out so records are reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub method: String,
    pub dataset: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Size of the real pretraining split, used or not.
    pub pretrain_size: usize,
    /// Number of generated series, when a generator was used.
    pub n_gen: Option<usize>,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub selected_epoch: Option<usize>,
    pub test_accuracy: Option<f64>,
    pub status: Status,
}

impl ExperimentRecord {
    fn empty(cfg: &ExperimentConfig) -> Self {
        Self {
            method: cfg.method_name(),
            dataset: cfg.dataset_name(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            pretrain_size: 0,
            n_gen: None,
            pretrain_losses: Vec::new(),
            finetune_losses: Vec::new(),
            validation: Vec::new(),
            selected_epoch: None,
            test_accuracy: None,
            status: Status::Failed { stage: "data".into(), message: "not started".into() },
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == Status::Complete
    }
}

/// Independent random streams per stage so that skipping a stage leaves the others unchanged.
fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

pub fn load_source(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Synth { spec, seed } => synth_dataset(spec, &mut ChaCha8Rng::seed_from_u64(*seed)),
        DatasetSource::Dir { path } => load_dataset_dir(path),
    }
}

/// Splits under `seed`, resamples everything to the median length and normalizes.
pub fn prepare(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<SplitBundle> {
    let mut bundle = split(dataset, cfg.seed)?;
    let len = dataset.median_len();
    let mode = cfg.normalization;
    bundle.map_series(|s| {
        if s.len() != len {
            *s = s.resample(len);
        }
        crate::data::znormalize(s, mode);
    });
    Ok(bundle)
}

/// Runs every stage of `cfg`. Failures are reported in the record status,
/// tagged with the stage that raised them.
pub fn run_experiment(cfg: &ExperimentConfig) -> ExperimentRecord {
    let mut record = ExperimentRecord::empty(cfg);
    match drive(cfg, &mut record) {
        Ok(()) => record.status = Status::Complete,
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.to_string(),
                _ => "setup".to_string(),
            };
            record.status = Status::Failed { stage, message: e.to_string() };
        }
    }
    record
}

fn drive(cfg: &ExperimentConfig, record: &mut ExperimentRecord) -> Result<()> {
    cfg.validate().map_err(|e| e.in_stage("setup"))?;
    let dataset = load_source(&cfg.dataset).map_err(|e| e.in_stage("data"))?;
    let bundle = prepare(&dataset, cfg).map_err(|e| e.in_stage("data"))?;
    record.dataset = dataset.name.clone();
    record.pretrain_size = bundle.pretrain.len();

    if let Some(kind) = cfg.distance() {
        let preds = one_nn_predict(&bundle.train, bundle.test.series(), kind).map_err(|e| e.in_stage("test"))?;
        record.test_accuracy = Some(bundle.test.score(&preds).map_err(|e| e.in_stage("test"))?);
        return Ok(());
    }

    let Pretrained { mut model, losses, n_gen } = pretrain_stage(cfg, &bundle)?;
    record.n_gen = n_gen;
    record.pretrain_losses = losses;

    let mut rng = stage_rng(cfg.seed, 4);
    let outcome = fine_tune(
        &mut model,
        &bundle.train,
        &bundle.validation,
        bundle.num_classes(),
        &cfg.finetune,
        cfg.validate_every,
        &mut rng,
    )
    .map_err(|e| e.in_stage("finetune"))?;
    record.finetune_losses = outcome.losses;
    record.validation = outcome.validation;
    record.selected_epoch = Some(outcome.selected_epoch);
    record.test_accuracy = Some(evaluate_test(&model, &bundle.test).map_err(|e| e.in_stage("test"))?);
    Ok(())
}

/// A freshly initialized model after the optional pretraining stage.
pub struct Pretrained {
    pub model: Model,
    /// Mean loss per pretraining epoch; empty without a PTM.
    pub losses: Vec<f64>,
    pub n_gen: Option<usize>,
}

/// Builds the model of `cfg` and pretrains it on the real pretraining split or on
/// generated data. Errors carry the stage that raised them.
pub fn pretrain_stage(cfg: &ExperimentConfig, bundle: &SplitBundle) -> Result<Pretrained> {
    let MethodKind::Backbone(backbone) = cfg.backbone else {
        return Err(Error::Usage(format!("{} has no trainable model", cfg.backbone)).in_stage("setup"));
    };
    let mut model = build_model(cfg, backbone, bundle.channels()).map_err(|e| e.in_stage("setup"))?;
    let Some(ptm) = cfg.ptm else {
        return Ok(Pretrained { model, losses: Vec::new(), n_gen: None });
    };
    let (series, n_gen) = match cfg.generator {
        None => (bundle.pretrain.clone(), None),
        Some(kind) => {
            let n_gen = n_gen_policy(bundle.pretrain.len(), cfg.threshold);
            let series = generate_pretraining_set(cfg, kind, bundle, n_gen).map_err(|e| e.in_stage("generate"))?;
            (series, Some(n_gen))
        }
    };
    let mut rng = stage_rng(cfg.seed, 3);
    let losses =
        pretrain(&mut model, ptm, &series, &cfg.contrast, &cfg.pretrain, &mut rng).map_err(|e| e.in_stage("pretrain"))?;
    Ok(Pretrained { model, losses, n_gen })
}

fn build_model(cfg: &ExperimentConfig, backbone: BackboneKind, channels: usize) -> Result<Model> {
    let spec = cfg.model.build(backbone, channels, cfg.ptm)?;
    Model::new(spec, &mut stage_rng(cfg.seed, 1))
}

/// Fits `kind` on the pretraining split and draws `n_gen` normalized series of its shape.
pub fn generate_pretraining_set(
    cfg: &ExperimentConfig,
    kind: crate::generators::GeneratorKind,
    bundle: &SplitBundle,
    n_gen: usize,
) -> Result<Vec<TimeSeries>> {
    let mut gcfg = cfg.generator_config.clone();
    gcfg.epochs.get_or_insert(cfg.pretrain.epochs);
    let mut rng = stage_rng(cfg.seed, 2);
    let reference = if bundle.pretrain.is_empty() { train_series(&bundle.train) } else { bundle.pretrain.clone() };
    let generator = GeneratorModel::fit(kind, &reference, &gcfg, &mut rng)?;
    let mut series = generator.sample(n_gen, &mut rng)?;
    ensure!(series.iter().all(TimeSeries::is_finite), NonFinite, "{kind} produced non-finite samples");
    crate::data::znormalize_all(series.iter_mut(), cfg.normalization);
    Ok(series)
}

fn train_series(examples: &[Example]) -> Vec<TimeSeries> {
    examples.iter().map(|e| e.series.clone()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneOutcome {
    /// Mean cross-entropy per epoch.
    pub losses: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub selected_epoch: usize,
}

/// Index of the best accuracy; the earliest wins ties.
pub fn select_checkpoint(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a > accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

fn accuracy(model: &Model, examples: &[Example]) -> Result<f64> {
    let x = batch_tensor(examples.iter().map(|e| &e.series))?;
    let preds = model.predict(&x, PREDICT_CHUNK)?;
    Ok(preds.iter().zip(examples).filter(|(p, e)| **p == e.class).count() as f64 / examples.len() as f64)
}

/// Trains backbone, projector and classifier with cross-entropy, validating every
/// `validate_every` epochs and after the last. `model` is left at the selected checkpoint.
pub fn fine_tune<R: Rng + ?Sized>(
    model: &mut Model,
    train: &[Example],
    validation: &[Example],
    classes: usize,
    cfg: &TrainConfig,
    validate_every: usize,
    rng: &mut R,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    ensure!(validate_every >= 1, Config, "validate_every must be at least 1");
    ensure!(!train.is_empty(), Input, "fine-tuning needs a non-empty train split");
    ensure!(!validation.is_empty(), Input, "fine-tuning needs a non-empty validation split");
    ensure!(classes >= 1, Config, "need at least one class");
    if let Some(c) = train.iter().chain(validation).map(|e| e.class).find(|&c| c >= classes) {
        return Err(Error::Config(format!("class index {c} exceeds the {classes} configured classes")));
    }
    match model.num_classes() {
        None => model.attach_classifier(classes, rng)?,
        Some(k) if k != classes => {
            return Err(Error::Config(format!("classifier has {k} classes but the data has {classes}")))
        }
        Some(_) => {}
    }

    let total = batches_per_epoch(train.len(), cfg.batch_size, 1) * cfg.epochs;
    let mut opt = Optimizer::new(cfg, total);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut points = Vec::new();
    let mut best: Option<(f64, crate::tensor::ParamStore)> = None;
    let mut selected_epoch = 0;
    for epoch in 1..=cfg.epochs {
        let plan = batches(train.len(), cfg.batch_size, 1, rng);
        let mut sum = 0.0;
        for idx in &plan {
            let x = batch_tensor(idx.iter().map(|&i| &train[i].series))?;
            let targets: Vec<usize> = idx.iter().map(|&i| train[i].class).collect();
            let (value, grads) = {
                let mut g = Graph::new(model.store());
                let logits = model.logits(&mut g, &x)?;
                let loss = cross_entropy(&mut g.tape, logits, &targets)?;
                g.backward(loss)?;
                (g.tape.value(loss).item(), g.param_grads())
            };
            check_finite(value, &format!("cross-entropy at epoch {epoch}"))?;
            opt.step(model.store_mut(), &grads)?;
            sum += value;
        }
        losses.push(sum / plan.len() as f64);

        if epoch % validate_every == 0 || epoch == cfg.epochs {
            let acc = accuracy(model, validation)?;
            points.push(ValidationPoint { epoch, accuracy: acc });
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.store().clone()));
                selected_epoch = epoch;
            }
        }
    }
    let accs: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    debug_assert_eq!(select_checkpoint(&accs).map(|i| points[i].epoch), Some(selected_epoch));
    let (_, store) = best.expect("at least one checkpoint");
    *model.store_mut() = store;
    Ok(FineTuneOutcome { losses, validation: points, selected_epoch })
}

/// Test accuracy of `model`; the only place test labels are consulted.
pub fn evaluate_test(model: &Model, test: &TestSplit) -> Result<f64> {
    ensure!(!test.is_empty(), Usage, "cannot evaluate on an empty test split");
    let x = batch_tensor(test.series())?;
    test.score(&model.predict(&x, PREDICT_CHUNK)?)
}
