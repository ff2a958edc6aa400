use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::functional::{l2_normalize_rows, soft_cross_entropy};
use crate::tensor::{Tape, Tensor, Var};

/// Which terms the NT-Xent denominator sums over, besides never the anchor itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Every other feature except the anchor's positive.
    #[default]
    ExcludePositive,
    /// Every other feature, the positive included (the SimCLR form).
    IncludePositive,
}

/// Mean over all `2N` anchors of `S[i, p(i)]` versus a masked log-sum-exp of row `i`.
///
/// `sim` is `[.., 2N, 2N]`; `positive(i)` gives the partner column of row `i`.
fn contrast_rows(tape: &mut Tape, sim: Var, exclude_positive: bool) -> Result<Var> {
    let shape = tape.shape(sim).to_vec();
    let m = shape[shape.len() - 1];
    let half = m / 2;
    let blocks: usize = shape[..shape.len() - 2].iter().product();
    let partner = |i: usize| if i < half { i + half } else { i - half };
    let mut mask = Vec::with_capacity(blocks * m * m);
    let mut pick = Tensor::zeros(&shape);
    for b in 0..blocks {
        for i in 0..m {
            for k in 0..m {
                mask.push(k != i && !(exclude_positive && k == partner(i)));
            }
            pick.data_mut()[b * m * m + i * m + partner(i)] = 1.0;
        }
    }
    let lse = tape.logsumexp_masked(sim, &mask)?;
    let lse = tape.mean(lse);
    let pick = tape.constant(pick);
    let pos = tape.mul(sim, pick)?;
    let pos = tape.sum(pos);
    let pos = tape.scale(pos, 1.0 / (blocks * m) as f64);
    tape.sub(lse, pos)
}

/// NT-Xent over cosine similarities of two `[N, d]` views.
pub fn nt_xent(tape: &mut Tape, h0: Var, h1: Var, tau: f64, denominator: Denominator) -> Result<Var> {
    let s0 = tape.shape(h0).to_vec();
    ensure!(s0.len() == 2 && tape.shape(h1) == s0.as_slice(), Dimension, "nt_xent needs two [N, d] views of equal shape");
    ensure!(s0[0] >= 2, Usage, "nt_xent needs at least 2 pairs, got {}", s0[0]);
    ensure!(tau > 0.0, Usage, "temperature must be positive, got {tau}");
    let h = tape.concat(&[h0, h1], 0)?;
    let h = l2_normalize_rows(tape, h)?;
    let sim = tape.matmul_t(h, h, false, true)?;
    let sim = tape.scale(sim, 1.0 / tau);
    contrast_rows(tape, sim, denominator == Denominator::ExcludePositive)
}

fn instance_term(tape: &mut Tape, z0: Var, z1: Var) -> Result<Var> {
    let z = tape.concat(&[z0, z1], 0)?;
    let z = tape.permute(z, &[1, 0, 2])?;
    let sim = tape.matmul_t(z, z, false, true)?;
    contrast_rows(tape, sim, false)
}

fn temporal_term(tape: &mut Tape, z0: Var, z1: Var) -> Result<Var> {
    let z = tape.concat(&[z0, z1], 1)?;
    let sim = tape.matmul_t(z, z, false, true)?;
    contrast_rows(tape, sim, false)
}

/// Hierarchical contrastive loss on aligned per-step representations `[N, T, d]`.
///
/// At every level the instance term (other series at the same step are
/// negatives) is weighted by `alpha` and the temporal term (other steps of the
/// same series) by `1 − alpha`; the time axis is then max-pooled by 2 until one
/// step remains or `max_levels` is reached. Similarities are raw dot products.
/// The instance term is skipped when `N = 1` and the temporal term when `T = 1`.
pub fn ts2vec_loss(tape: &mut Tape, z0: Var, z1: Var, alpha: f64, max_levels: Option<usize>) -> Result<Var> {
    let s = tape.shape(z0).to_vec();
    ensure!(s.len() == 3 && tape.shape(z1) == s.as_slice(), Dimension, "ts2vec_loss needs two [N, T, d] tensors of equal shape");
    ensure!(s[1] >= 1, Usage, "ts2vec_loss on an empty overlap");
    ensure!((0.0..=1.0).contains(&alpha), Usage, "alpha must lie in [0, 1]");
    let n = s[0];
    let (mut a, mut b) = (z0, z1);
    let mut total: Option<Var> = None;
    let mut levels = 0usize;
    let mut accumulate = |tape: &mut Tape, term: Var, w: f64| -> Result<()> {
        let t = tape.scale(term, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, t)?,
            None => t,
        });
        Ok(())
    };
    loop {
        let t = tape.shape(a)[1];
        if alpha != 0.0 && n > 1 {
            let inst = instance_term(tape, a, b)?;
            accumulate(tape, inst, alpha)?;
        }
        if alpha != 1.0 && t > 1 {
            let temp = temporal_term(tape, a, b)?;
            accumulate(tape, temp, 1.0 - alpha)?;
        }
        levels += 1;
        if t <= 1 || max_levels.is_some_and(|m| levels >= m) {
            break;
        }
        a = tape.max_pool2(a, 1)?;
        b = tape.max_pool2(b, 1)?;
    }
    let zero = tape.constant(Tensor::scalar(0.0));
    let total = match total {
        Some(t) => t,
        None => zero,
    };
    Ok(tape.scale(total, 1.0 / levels as f64))
}

/// Soft-target cross-entropy of the mixed view against both sources.
///
/// Row `k` of the logits is `[ẑ_k · ẑ_iᵀ, ẑ_k · ẑ_jᵀ] / τ` over the batch, with
/// target `λ_k` at column `k` and `1 − λ_k` at column `N + k`.
pub fn mixingup_loss(tape: &mut Tape, zi: Var, zj: Var, zk: Var, lambda: &[f64], tau: f64) -> Result<Var> {
    let s = tape.shape(zi).to_vec();
    ensure!(
        s.len() == 2 && tape.shape(zj) == s.as_slice() && tape.shape(zk) == s.as_slice(),
        Dimension,
        "mixingup_loss needs three [N, d] tensors of equal shape"
    );
    let n = s[0];
    ensure!(lambda.len() == n, Dimension, "{} mixing weights for {n} pairs", lambda.len());
    ensure!(tau > 0.0, Usage, "temperature must be positive, got {tau}");
    let zi = l2_normalize_rows(tape, zi)?;
    let zj = l2_normalize_rows(tape, zj)?;
    let zk = l2_normalize_rows(tape, zk)?;
    let li = tape.matmul_t(zk, zi, false, true)?;
    let lj = tape.matmul_t(zk, zj, false, true)?;
    let logits = tape.concat(&[li, lj], 1)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let mut targets = Tensor::zeros(&[n, 2 * n]);
    for (k, &l) in lambda.iter().enumerate() {
        targets.set(&[k, k], l);
        targets.set(&[k, n + k], 1.0 - l);
    }
    soft_cross_entropy(tape, logits, targets)
}

/// Weights of the three TF-C terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TfcWeights {
    pub time: f64,
    pub frequency: f64,
    pub consistency: f64,
}

impl Default for TfcWeights {
    fn default() -> Self {
        Self { time: 1.0, frequency: 1.0, consistency: 1.0 }
    }
}

/// Backbone outputs `h` and projections `z` of one view in both domains.
#[derive(Clone, Copy, Debug)]
pub struct TfcView {
    pub h_time: Var,
    pub z_time: Var,
    pub h_freq: Var,
    pub z_freq: Var,
}

/// Time and frequency contrast plus the cross-domain consistency margin
/// `Σ (1 + d(z_t, z_f) − d(pair))` over the three mismatched view pairs.
pub fn tfc_loss(
    tape: &mut Tape,
    orig: &TfcView,
    aug: &TfcView,
    weights: &TfcWeights,
    tau: f64,
    denominator: Denominator,
) -> Result<Var> {
    let lt = nt_xent(tape, orig.h_time, aug.h_time, tau, denominator)?;
    let lf = nt_xent(tape, orig.h_freq, aug.h_freq, tau, denominator)?;
    let ltf = nt_xent(tape, orig.z_time, orig.z_freq, tau, denominator)?;
    let mut consistency: Option<Var> = None;
    for (a, b) in [(orig.z_time, aug.z_freq), (aug.z_time, orig.z_freq), (aug.z_time, aug.z_freq)] {
        let l = nt_xent(tape, a, b, tau, denominator)?;
        let d = tape.sub(ltf, l)?;
        let term = tape.add_scalar(d, 1.0);
        consistency = Some(match consistency {
            Some(c) => tape.add(c, term)?,
            None => term,
        });
    }
    let lt = tape.scale(lt, weights.time);
    let lf = tape.scale(lf, weights.frequency);
    let lc = tape.scale(consistency.expect("three terms"), weights.consistency);
    let s = tape.add(lt, lf)?;
    tape.add(s, lc)
}
