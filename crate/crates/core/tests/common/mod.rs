//! Shared oracles and case tables for the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tspretrain::generators;
use tspretrain::pretrain::{self, Denominator};
use tspretrain::tensor::gradcheck::{check_gradients, GradCheck};
use tspretrain::tensor::{functional, Tape, Tensor, Var};
use tspretrain::Result;

pub mod criteria;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: fn(&mut Tape, &[Var]) -> Result<Var>,
}

macro_rules! case {
    ($name:literal, [$($shape:expr),+], |$t:ident, $v:ident| $body:expr) => {
        GradCase {
            name: $name,
            shapes: vec![$($shape.to_vec()),+],
            f: |$t: &mut Tape, $v: &[Var]| -> Result<Var> { $body },
        }
    };
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::randn(&shape, &mut rng(seed + 1000)));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Finite-difference check of `case` on standard normal inputs drawn from `seed`.
pub fn check_case(case: &GradCase, seed: u64) -> Result<GradCheck> {
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = case.shapes.iter().map(|s| Tensor::randn(s, &mut r)).collect();
    check_gradients(&inputs, GRAD_STEP, |t, v| {
        let y = (case.f)(t, v)?;
        weighted(t, y, seed)
    })
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case!("add_broadcast", [[2, 3, 4], [3, 1]], |t, v| t.add(v[0], v[1])),
        case!("sub_suffix", [[2, 3, 4], [4]], |t, v| t.sub(v[0], v[1])),
        case!("mul_broadcast", [[2, 3], [2, 1]], |t, v| t.mul(v[0], v[1])),
        case!("div_positive", [[3, 4], [4]], |t, v| {
            let d = t.square(v[1]);
            let d = t.add_scalar(d, 1.0);
            t.div(v[0], d)
        }),
        case!("unary_chain", [[5, 3]], |t, v| {
            let a = t.tanh(v[0]);
            let b = t.sigmoid(a);
            let c = t.exp(b);
            let d = t.log(c);
            let e = t.add_scalar(d, 2.0);
            let f = t.sqrt(e);
            let g = t.leaky_relu(f, 0.2);
            Ok::<_, tspretrain::Error>(t.neg(g))
        }),
        case!("relu_nonzero", [[4, 4]], |t, v| {
            let s = t.scale(v[0], 3.0);
            Ok::<_, tspretrain::Error>(t.relu(s))
        }),
        case!("sum_axis_mean_axis", [[2, 3, 4]], |t, v| {
            let a = t.sum_axis(v[0], 1)?;
            t.mean_axis(a, 0)
        }),
        case!("matmul_plain", [[3, 4], [4, 2]], |t, v| t.matmul(v[0], v[1])),
        case!("matmul_shared_weight_transposed", [[2, 3, 4], [5, 4]], |t, v| t.matmul_t(v[0], v[1], false, true)),
        case!("matmul_batched_ta", [[2, 4, 3], [2, 4, 5]], |t, v| t.matmul_t(v[0], v[1], true, false)),
        case!("matmul_batched_tb", [[2, 3, 4], [2, 5, 4]], |t, v| t.matmul_t(v[0], v[1], false, true)),
        case!("matmul_batched_both", [[2, 4, 3], [2, 5, 4]], |t, v| t.matmul_t(v[0], v[1], true, true)),
        case!("permute_reshape", [[2, 3, 4]], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            t.reshape(p, &[4, 6])
        }),
        case!("concat_slice_pad", [[2, 3, 4], [2, 2, 4]], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let s = t.slice(c, 1, 1, 3)?;
            t.pad(s, 2, 1, 2)
        }),
        case!("conv1d_stride_pad", [[2, 3, 9], [4, 3, 3], [4]], |t, v| t.conv1d(v[0], v[1], Some(v[2]), 2, 1)),
        case!("conv1d_wide_kernel", [[1, 2, 8], [3, 2, 7]], |t, v| t.conv1d(v[0], v[1], None, 1, 3)),
        case!("layer_norm_last", [[3, 5], [5], [5]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        case!("layer_norm_channels", [[2, 4, 3], [4], [4]], |t, v| t.layer_norm_axis(v[0], v[1], v[2], 1, 1e-5)),
        case!("softmax_rows", [[3, 4]], |t, v| t.softmax(v[0])),
        case!("log_softmax_rows", [[3, 4]], |t, v| t.log_softmax(v[0])),
        case!("logsumexp_masked_rows", [[3, 4]], |t, v| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            t.logsumexp_masked(v[0], &mask)
        }),
        case!("max_pool_time", [[2, 5, 3]], |t, v| t.max_pool2(v[0], 1)),
        case!("upsample_time", [[2, 3, 4]], |t, v| t.upsample2(v[0], 2)),
        case!("l2_normalize", [[4, 3]], |t, v| functional::l2_normalize_rows(t, v[0])),
        case!("cross_entropy_loss", [[4, 3]], |t, v| functional::cross_entropy(t, v[0], &[0, 2, 1, 2])),
        case!("mse_loss", [[3, 4], [3, 4]], |t, v| functional::mse(t, v[0], v[1])),
        case!("linear_layer", [[3, 4], [5, 4], [5]], |t, v| {
            let y = t.matmul_t(v[0], v[1], false, true)?;
            t.add(y, v[2])
        }),
        case!("attention", [[2, 3, 4], [2, 3, 4], [2, 3, 4]], |t, v| functional::multi_head_attention(t, v[0], v[1], v[2], 2)),
        case!("nt_xent_exclude", [[4, 3], [4, 3]], |t, v| pretrain::nt_xent(t, v[0], v[1], 0.5, Denominator::ExcludePositive)),
        case!("nt_xent_include", [[4, 3], [4, 3]], |t, v| pretrain::nt_xent(t, v[0], v[1], 0.5, Denominator::IncludePositive)),
        case!("ts2vec_hierarchy", [[3, 5, 2], [3, 5, 2]], |t, v| pretrain::ts2vec_loss(t, v[0], v[1], 0.5, None)),
        case!("mixingup", [[3, 4], [3, 4], [3, 4]], |t, v| pretrain::mixingup_loss(t, v[0], v[1], v[2], &[0.1, 0.6, 0.95], 0.5)),
        case!("tfc", [[3, 4], [3, 4], [3, 4], [3, 4], [3, 4], [3, 4], [3, 4], [3, 4]], |t, v| {
            let orig = pretrain::TfcView { h_time: v[0], z_time: v[1], h_freq: v[2], z_freq: v[3] };
            let aug = pretrain::TfcView { h_time: v[4], z_time: v[5], h_freq: v[6], z_freq: v[7] };
            pretrain::tfc_loss(t, &orig, &aug, &pretrain::TfcWeights::default(), 0.5, Denominator::default())
        }),
        case!("vae_kl", [[3, 4], [3, 4]], |t, v| generators::kl_divergence(t, v[0], v[1])),
        case!("diffusion_mse", [[2, 2, 6], [2, 2, 6]], |t, v| functional::mse(t, v[0], v[1])),
        case!("diffusion_objective", [[2, 1, 6], [1, 1, 3], [2, 1, 6]], |t, v| {
            let a = t.scale(v[0], 0.8);
            let b = t.scale(v[2], 0.6);
            let xt = t.add(a, b)?;
            let pred = t.conv1d(xt, v[1], None, 1, 1)?;
            functional::mse(t, pred, v[2])
        }),
    ]
}

pub type Rows = Vec<Vec<f64>>;

fn normalized(rows: &[Vec<f64>]) -> Rows {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-anchor contrastive loss over `rows` (first half paired with second half),
/// scored by `score(i, k)`.
fn anchor_mean(m: usize, include_positive: bool, score: impl Fn(usize, usize) -> f64) -> f64 {
    let half = m / 2;
    let mut total = 0.0;
    for i in 0..m {
        let p = if i < half { i + half } else { i - half };
        let lse = log_sum_exp((0..m).filter(|&k| k != i && (include_positive || k != p)).map(|k| score(i, k)));
        total += lse - score(i, p);
    }
    total / m as f64
}

pub fn nt_xent_oracle(h0: &[Vec<f64>], h1: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
    let all: Rows = h0.iter().chain(h1).cloned().collect();
    let z = normalized(&all);
    anchor_mean(z.len(), include_positive, |i, k| dot(&z[i], &z[k]) / tau)
}

/// `z[n][t]` is the feature vector of series `n` at step `t`.
pub type Seq = Vec<Vec<Vec<f64>>>;

fn pool(z: &Seq) -> Seq {
    z.iter()
        .map(|s| {
            (0..s.len() / 2)
                .map(|j| s[2 * j].iter().zip(&s[2 * j + 1]).map(|(a, b)| a.max(*b)).collect())
                .collect()
        })
        .collect()
}

pub fn ts2vec_oracle(z0: &Seq, z1: &Seq, alpha: f64, max_levels: Option<usize>) -> f64 {
    let (mut a, mut b) = (z0.clone(), z1.clone());
    let n = a.len();
    let mut total = 0.0;
    let mut levels = 0;
    loop {
        let t = a[0].len();
        if alpha != 0.0 && n > 1 {
            let mut inst = 0.0;
            for step in 0..t {
                let rows: Rows = a.iter().chain(&b).map(|s| s[step].clone()).collect();
                inst += anchor_mean(2 * n, true, |i, k| dot(&rows[i], &rows[k]));
            }
            total += alpha * inst / t as f64;
        }
        if alpha != 1.0 && t > 1 {
            let mut temp = 0.0;
            for s in 0..n {
                let rows: Rows = a[s].iter().chain(&b[s]).cloned().collect();
                temp += anchor_mean(2 * t, true, |i, k| dot(&rows[i], &rows[k]));
            }
            total += (1.0 - alpha) * temp / n as f64;
        }
        levels += 1;
        if t <= 1 || max_levels.is_some_and(|m| levels >= m) {
            break;
        }
        a = pool(&a);
        b = pool(&b);
    }
    total / levels as f64
}

pub fn mixingup_oracle(zi: &[Vec<f64>], zj: &[Vec<f64>], zk: &[Vec<f64>], lambda: &[f64], tau: f64) -> f64 {
    let (zi, zj, zk) = (normalized(zi), normalized(zj), normalized(zk));
    let n = zi.len();
    let mut total = 0.0;
    for k in 0..n {
        let logits: Vec<f64> = zi.iter().chain(&zj).map(|z| dot(&zk[k], z) / tau).collect();
        let lse = log_sum_exp(logits.iter().copied());
        total -= lambda[k] * (logits[k] - lse) + (1.0 - lambda[k]) * (logits[n + k] - lse);
    }
    total / n as f64
}

/// Minimum squared-cost warping path by enumerating every monotone path, as a distance.
pub fn dtw_exhaustive(a: &[f64], b: &[f64], band: Option<usize>) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, band: usize, acc: f64, best: &mut f64) {
        if i.abs_diff(j) > band {
            return;
        }
        let acc = acc + (a[i] - b[j]).powi(2);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, band, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, band, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, band, acc, best);
        }
    }
    let band = band.unwrap_or(usize::MAX).max(a.len().abs_diff(b.len()));
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, band, 0.0, &mut best);
    best.sqrt()
}

/// Converts `[rows, cols]` data into nested rows.
pub fn to_rows(t: &Tensor) -> Rows {
    t.rows().map(<[f64]>::to_vec).collect()
}

pub fn to_seq(t: &Tensor) -> Seq {
    let s = t.shape();
    let d = t.data();
    (0..s[0]).map(|n| (0..s[1]).map(|i| d[(n * s[1] + i) * s[2]..(n * s[1] + i + 1) * s[2]].to_vec()).collect()).collect()
}
