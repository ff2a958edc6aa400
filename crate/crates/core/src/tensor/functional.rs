//! Composite differentiable functions built from tape primitives.

use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::error::{ensure, Result};

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure!(a.len() == b.len(), Dimension, "vector lengths {} and {}", a.len(), b.len());
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(na > 0.0 && nb > 0.0, Domain, "cosine similarity of a zero-norm vector");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales every row (last axis) to unit L2 norm.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    let sq = tape.square(x);
    let ss = tape.sum_axis(sq, axis)?;
    let norm = tape.sqrt(ss);
    let mut shape = tape.shape(x).to_vec();
    shape[axis] = 1;
    let norm = tape.reshape(norm, &shape)?;
    tape.div(x, norm)
}

/// Mean cross-entropy of `logits` (`[n, k]`) against class indices.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    ensure!(shape.len() == 2, Dimension, "cross_entropy expects [n, k] logits, got {shape:?}");
    let (n, k) = (shape[0], shape[1]);
    ensure!(targets.len() == n, Dimension, "{} targets for {n} rows", targets.len());
    let mut onehot = Tensor::zeros(&[n, k]);
    for (i, &t) in targets.iter().enumerate() {
        ensure!(t < k, Usage, "target class {t} out of range for {k} logits");
        onehot.set(&[i, t], 1.0);
    }
    soft_cross_entropy(tape, logits, onehot)
}

/// Mean over rows of `-Σ target · log_softmax(logits)`.
pub fn soft_cross_entropy(tape: &mut Tape, logits: Var, targets: Tensor) -> Result<Var> {
    let n = tape.shape(logits)[0].max(1);
    let logp = tape.log_softmax(logits)?;
    let t = tape.constant(targets);
    let prod = tape.mul(logp, t)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Scaled dot-product attention over `heads` heads.
///
/// `q`, `k`, `v` are `[b, t, d]` with `d` divisible by `heads`; returns `[b, t, d]`.
pub fn multi_head_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    ensure!(shape.len() == 3, Dimension, "attention expects [b, t, d], got {shape:?}");
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    ensure!(heads >= 1 && d % heads == 0, Dimension, "width {d} is not divisible by {heads} heads");
    let dh = d / heads;
    let mut split = |x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, t, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, t, dh])
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let scores = tape.matmul_t(q, k, false, true)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = tape.softmax(scores)?;
    let out = tape.matmul(att, v)?;
    let out = tape.reshape(out, &[b, heads, t, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    tape.reshape(out, &[b, t, d])
}

/// Mean squared error between two same-shaped values.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}
