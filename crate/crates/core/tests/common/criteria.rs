//! One check per acceptance criterion. Each returns a one-line summary on success.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use tspretrain::baselines::dtw_distance;
use tspretrain::data::{split, split_sizes, synth_dataset, SynthKind, SynthSpec, TimeSeries};
use tspretrain::evaluation::{average_rank, size_vs_gain, top_k, ResultsMatrix};
use tspretrain::generators::{n_gen_policy, MgModel};
use tspretrain::pipeline::{run_experiment, DatasetSource, ExperimentConfig, ExperimentRecord, Status};
use tspretrain::pretrain::{self, Denominator, PtmKind};
use tspretrain::generators::GeneratorKind;
use tspretrain::models::HeadSpec;
use tspretrain::tensor::{Tape, Tensor};

use super::*;

pub type Outcome = std::result::Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = grad_cases();
    let mut worst: f64 = 0.0;
    for case in &cases {
        for seed in 0..5 {
            let r = check_case(case, seed).map_err(|e| format!("{}: {e}", case.name))?;
            check!(r.passes(GRAD_TOL), "{} seed {seed}: relative error {:.3e}", case.name, r.max_rel_error);
            worst = worst.max(r.max_rel_error);
        }
    }
    let took = start.elapsed();
    check!(took < Duration::from_secs(120), "took {took:?}");
    Ok(format!("{} cases x 5 seeds, worst relative error {worst:.2e}, {:.2}s", cases.len(), took.as_secs_f64()))
}

fn eval(f: impl FnOnce(&mut Tape) -> tspretrain::Result<tspretrain::tensor::Var>) -> std::result::Result<f64, String> {
    let mut tape = Tape::new();
    let v = f(&mut tape).map_err(|e| e.to_string())?;
    Ok(tape.value(v).item())
}

pub fn loss_oracles() -> Outcome {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=8usize {
        for _ in 0..20 {
            let d = r.random_range(1..6);
            let t = r.random_range(1..10);
            let tau = r.random_range(0.05..2.0);
            let alpha: f64 = r.random_range(0.0..1.0);
            let h0 = Tensor::randn(&[n, d], &mut r);
            let h1 = Tensor::randn(&[n, d], &mut r);
            let h2 = Tensor::randn(&[n, d], &mut r);
            let s0 = Tensor::randn(&[n, t, d], &mut r);
            let s1 = Tensor::randn(&[n, t, d], &mut r);
            let lambda: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            let mut compare = |name: &str, got: f64, want: f64| -> std::result::Result<(), String> {
                let err = (got - want).abs();
                worst = worst.max(err);
                cases += 1;
                check!(err <= 1e-9, "{name} N={n}: {got} vs oracle {want}");
                Ok(())
            };
            if n >= 2 {
                for (den, include) in [(Denominator::ExcludePositive, false), (Denominator::IncludePositive, true)] {
                    let got = eval(|tp| {
                        let (a, b) = (tp.constant(h0.clone()), tp.constant(h1.clone()));
                        pretrain::nt_xent(tp, a, b, tau, den)
                    })?;
                    compare("nt_xent", got, nt_xent_oracle(&to_rows(&h0), &to_rows(&h1), tau, include))?;
                }
            }
            let levels = if r.random_bool(0.5) { None } else { Some(r.random_range(1..4)) };
            let got = eval(|tp| {
                let (a, b) = (tp.constant(s0.clone()), tp.constant(s1.clone()));
                pretrain::ts2vec_loss(tp, a, b, alpha, levels)
            })?;
            compare("ts2vec", got, ts2vec_oracle(&to_seq(&s0), &to_seq(&s1), alpha, levels))?;
            let got = eval(|tp| {
                let (a, b, c) = (tp.constant(h0.clone()), tp.constant(h1.clone()), tp.constant(h2.clone()));
                pretrain::mixingup_loss(tp, a, b, c, &lambda, tau)
            })?;
            compare("mixingup", got, mixingup_oracle(&to_rows(&h0), &to_rows(&h1), &to_rows(&h2), &lambda, tau))?;
        }
    }
    Ok(format!("{cases} comparisons over N = 1..8, worst |error| {worst:.2e}"))
}

pub fn dtw_oracle() -> Outcome {
    let series = |v: &[f64]| TimeSeries::univariate(v.to_vec()).unwrap();
    let zero = dtw_distance(&series(&[1.0, 2.0, 3.0]), &series(&[1.0, 2.0, 2.0, 3.0]), None).map_err(|e| e.to_string())?;
    check!(zero == 0.0, "DTW([1,2,3],[1,2,2,3]) = {zero}");
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (la, lb) = (r.random_range(1..=8), r.random_range(1..=8));
        let a: Vec<f64> = (0..la).map(|_| r.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..lb).map(|_| r.random_range(-2.0..2.0)).collect();
        for window in [None, Some(r.random_range(0..=8))] {
            let dp = dtw_distance(&series(&a), &series(&b), window).map_err(|e| e.to_string())?;
            let brute = dtw_exhaustive(&a, &b, window);
            worst = worst.max((dp - brute).abs());
            check!((dp - brute).abs() <= 1e-12, "case {case} window {window:?}: {dp} vs {brute}");
        }
    }
    Ok(format!("100 pairs (banded and unbanded), worst |error| {worst:.1e}; DTW([1,2,3],[1,2,2,3]) = 0"))
}

pub fn split_protocol() -> Outcome {
    check!(split_sizes(100) == (50, 30, 10, 10), "N=100 gives {:?}", split_sizes(100));
    let mut r = rng(11);
    for _ in 0..100 {
        let n = r.random_range(10..400);
        let seed: u64 = r.random();
        let spec = SynthSpec { kind: SynthKind::GaussianBlobsWalk, n, length: 8, noise: 0.5 };
        let ds = synth_dataset(&spec, &mut rng(seed)).map_err(|e| e.to_string())?;
        let b = split(&ds, seed).map_err(|e| e.to_string())?;
        let (p, tr, va, te) = split_sizes(n);
        check!(
            (b.pretrain.len(), b.train.len(), b.validation.len(), b.test.len()) == (p, tr, va, te),
            "N={n} sizes differ from {:?}",
            (p, tr, va, te)
        );
        let ix = &b.indices;
        let mut all: Vec<usize> = ix.pretrain.iter().chain(&ix.train).chain(&ix.validation).chain(&ix.test).copied().collect();
        all.sort_unstable();
        check!(all == (0..n).collect::<Vec<_>>(), "N={n} seed={seed}: splits overlap or miss samples");
        for (s, &i) in b.pretrain.iter().zip(&ix.pretrain) {
            check!(*s == ds.samples[i].series, "pretrain series {i} differs from its source");
        }
        for (e, &i) in b.train.iter().zip(&ix.train) {
            check!(b.classes[e.class] == ds.samples[i].label, "train label of {i} changed");
        }
    }
    Ok("N=100 -> 50/30/10/10; 100 random (N, seed) pairs disjoint, exhaustive and unlabeled in pretrain".into())
}

pub fn generation_budget() -> Outcome {
    for (s, t, want) in [(500, 1494, 1494), (2000, 1494, 2000), (3000, 3398, 3398)] {
        let got = n_gen_policy(s, t);
        check!(got == want, "n_gen_policy({s}, {t}) = {got}, expected {want}");
    }
    Ok("(500,1494)->1494, (2000,1494)->2000, (3000,3398)->3398".into())
}

pub fn mg_statistics() -> Outcome {
    let spec = SynthSpec { kind: SynthKind::ThreeClassWaves, n: 50, length: 64, noise: 0.3 };
    let ds = synth_dataset(&spec, &mut rng(5)).map_err(|e| e.to_string())?;
    let series: Vec<TimeSeries> = ds.samples.iter().map(|s| s.series.clone()).collect();
    let mg = MgModel::fit(&series).map_err(|e| e.to_string())?;
    let draws = mg.sample(10_000, &mut rng(6));
    let refit = MgModel::fit(&draws).map_err(|e| e.to_string())?;
    let n = draws.len() as f64;
    let (mut within, mut total) = (0, 0);
    for k in 0..mg.mean[0].len() {
        for (m, e, v) in [
            (mg.mean[0][k].re, refit.mean[0][k].re, mg.var[0][k].re),
            (mg.mean[0][k].im, refit.mean[0][k].im, mg.var[0][k].im),
        ] {
            total += 1;
            if (m - e).abs() <= 3.0 * (v / n).sqrt() + 1e-12 {
                within += 1;
            }
        }
    }
    let frac = within as f64 / total as f64;
    check!(frac >= 0.95, "only {within}/{total} components within 3 SE");
    Ok(format!("{within}/{total} spectral components within 3 standard errors ({:.1}%)", 100.0 * frac))
}

/// Desk-scale configuration of the end-to-end run.
pub fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        ptm: Some(PtmKind::TimeClr),
        generator: Some(GeneratorKind::RandomWalk),
        dataset: DatasetSource::Synth {
            spec: SynthSpec { kind: SynthKind::ThreeClassWaves, n: 300, length: 64, noise: 0.3 },
            seed: 0,
        },
        seed: 0,
        ..ExperimentConfig::default()
    };
    cfg.model.resnet_widths = [16, 32, 32];
    cfg.pretrain.epochs = 30;
    cfg.finetune.epochs = 30;
    cfg
}

pub fn end_to_end() -> Outcome {
    let cfg = desk_config();
    let start = Instant::now();
    let rec = run_experiment(&cfg);
    let took = start.elapsed();
    check!(rec.status == Status::Complete, "run failed: {:?}", rec.status);
    let baseline = run_experiment(&ExperimentConfig { ptm: None, ..cfg.clone() });
    check!(baseline.status == Status::Complete, "baseline failed: {:?}", baseline.status);
    let acc = rec.test_accuracy.unwrap_or(0.0);
    let base = baseline.test_accuracy.unwrap_or(0.0);
    let summary = format!(
        "{} test accuracy {acc:.4} in {:.1}s (n_gen {:?}); ResNet without pretraining {base:.4}",
        rec.method,
        took.as_secs_f64(),
        rec.n_gen
    );
    check!(acc >= 0.90, "{summary}");
    check!(took < Duration::from_secs(600), "{summary}");
    Ok(summary)
}

pub fn ranking_math() -> Outcome {
    let cells = [
        ("A", [0.9, 0.6, 0.5, 0.7]),
        ("B", [0.8, 0.8, 0.4, 0.6]),
        ("C", [0.7, 0.8, 0.9, 0.5]),
    ];
    let build = |order: &[usize]| {
        let mut m = ResultsMatrix::new();
        for &i in order {
            let (name, accs) = cells[i];
            for (d, a) in accs.iter().enumerate() {
                m.insert(name, &format!("d{d}"), *a).unwrap();
            }
        }
        m
    };
    let table = average_rank(&build(&[0, 1, 2])).map_err(|e| e.to_string())?;
    // d0: 1 2 3; d1: 3 1.5 1.5; d2: 2 3 1; d3: 1 2 3
    for (name, want) in [("A", 1.75), ("B", 2.125), ("C", 2.125)] {
        let got = table.get(name).map(|e| e.avg_rank);
        check!(got == Some(want), "{name}: {got:?} vs {want}");
    }
    let first = top_k(&table, 3);
    check!(first == ["A", "B", "C"], "top_k gave {first:?}");
    for order in [[2, 1, 0], [1, 2, 0], [2, 0, 1]] {
        let again = top_k(&average_rank(&build(&order)).map_err(|e| e.to_string())?, 3);
        check!(again == first, "ordering changed with insertion order: {again:?}");
    }
    Ok("average ranks A 1.75, B 2.125, C 2.125 (tie 1.5/1.5 on d1); top_k stable".into())
}

fn record(method: &str, dataset: &str, pretrain_size: usize, acc: f64) -> ExperimentRecord {
    ExperimentRecord {
        method: method.into(),
        dataset: dataset.into(),
        config_hash: String::new(),
        config: ExperimentConfig::default(),
        pretrain_size,
        n_gen: None,
        pretrain_losses: vec![],
        finetune_losses: vec![],
        validation: vec![],
        selected_epoch: None,
        test_accuracy: Some(acc),
        status: Status::Complete,
    }
}

pub fn size_gain_regression() -> Outcome {
    let mut r = rng(9);
    let sizes: Vec<usize> = (0..12).map(|i| 50 + 150 * i).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, &s) in sizes.iter().enumerate() {
        let base = r.random_range(0.4..0.6);
        let gain = 0.2 - 1e-4 * s as f64 + r.random_range(-0.01..0.01);
        a.push(record("ResNet+TimeCLR+GAN", &format!("d{i:02}"), s, base + gain));
        b.push(record("ResNet+TimeCLR+NG", &format!("d{i:02}"), s, base));
    }
    a.shuffle(&mut r);
    let fit = size_vs_gain(&a, &b).map_err(|e| e.to_string())?;
    let n = fit.points.len() as f64;
    let (sx, sy) = fit.points.iter().fold((0.0, 0.0), |(x, y), p| (x + p.pretrain_size as f64, y + p.gain));
    let sxx: f64 = fit.points.iter().map(|p| (p.pretrain_size as f64).powi(2)).sum();
    let sxy: f64 = fit.points.iter().map(|p| p.pretrain_size as f64 * p.gain).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    check!(fit.points.len() == sizes.len(), "{} points", fit.points.len());
    check!((fit.slope - slope).abs() <= 1e-12, "slope {} vs closed form {slope}", fit.slope);
    check!((fit.intercept - intercept).abs() <= 1e-12, "intercept {} vs closed form {intercept}", fit.intercept);
    check!(fit.slope < 0.0, "slope {} is not negative", fit.slope);
    let swapped = size_vs_gain(&b, &a).map_err(|e| e.to_string())?;
    check!((swapped.slope + fit.slope).abs() <= 1e-15, "swap does not negate the slope");
    Ok(format!("slope {:.6e}, intercept {:.6} match closed form; negative as injected", fit.slope, fit.intercept))
}

pub fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig {
        ptm: Some(PtmKind::MixingUp),
        generator: Some(GeneratorKind::Gan),
        dataset: DatasetSource::Synth {
            spec: SynthSpec { kind: SynthKind::TwoClassFreq, n: 60, length: 32, noise: 0.2 },
            seed: 3,
        },
        seed: 7,
        validate_every: 2,
        threshold: 64,
        ..ExperimentConfig::default()
    };
    cfg.model.resnet_widths = [6, 8, 8];
    cfg.model.head = HeadSpec { hidden: 8, proj_dim: 8 };
    cfg.pretrain.epochs = 2;
    cfg.finetune.epochs = 4;
    cfg.generator_config.latent = 8;
    cfg.generator_config.width = 4;
    let first = serde_json::to_string(&run_experiment(&cfg)).map_err(|e| e.to_string())?;
    let second = serde_json::to_string(&run_experiment(&cfg)).map_err(|e| e.to_string())?;
    check!(first.contains("\"state\":\"complete\""), "run did not complete: {first}");
    check!(first == second, "records differ");
    Ok(format!("two runs of {} produce identical {}-byte records", cfg.method_name(), first.len()))
}
