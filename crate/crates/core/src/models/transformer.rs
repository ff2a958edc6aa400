use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Output;
use crate::error::{ensure, Result};
use crate::tensor::functional::multi_head_attention;
use crate::tensor::{Conv1d, Graph, LayerNorm, Linear, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub in_channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn: usize,
    /// Kernel-3 stride-2 input convolution instead of a pointwise one.
    pub strided_input: bool,
    /// Adds the sinusoidal position table to the token embeddings.
    pub positional: bool,
}

impl TransformerSpec {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, layers: 4, heads: 8, width: 64, ffn: 256, strided_input: false, positional: true }
    }

    pub fn per_step(in_channels: usize) -> Self {
        Self { strided_input: true, ..Self::new(in_channels) }
    }

    pub fn embed_dim(&self) -> usize {
        self.width
    }

    pub fn num_params(&self) -> usize {
        let (d, f) = (self.width, self.ffn);
        let k = if self.strided_input { 3 } else { 1 };
        let lin = |i: usize, o: usize| i * o + o;
        let layer = 4 * lin(d, d) + 2 * 2 * d + lin(d, f) + lin(f, d);
        d * self.in_channels * k + d + d + self.layers * layer + lin(d, d)
    }
}

/// Sinusoidal table: `sin(p / 10000^(2i/d))` in column `2i`, `cos` in `2i + 1`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    ensure!(d.is_multiple_of(2), Usage, "positional encoding width must be even, got {d}");
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(&[len, d], data)
}

/// Post-norm encoder layer.
#[derive(Clone, Debug)]
pub struct TBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl TBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            heads,
        }
    }

    /// `x` is `[b, t, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let att = multi_head_attention(&mut g.tape, q, k, v, self.heads)?;
        let att = self.o.forward(g, att)?;
        let h = g.tape.add(x, att)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ff1.forward(g, h)?;
        let f = g.tape.relu(f);
        let f = self.ff2.forward(g, f)?;
        let h2 = g.tape.add(h, f)?;
        self.norm2.forward(g, h2)
    }
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub spec: TransformerSpec,
    pub input: Conv1d,
    pub start: ParamId,
    pub blocks: Vec<TBlock>,
    pub out: Linear,
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &TransformerSpec, rng: &mut R) -> Self {
        let d = spec.width;
        let input = if spec.strided_input {
            Conv1d::new(store, &format!("{name}.input"), spec.in_channels, d, 3, 2, 1, rng)
        } else {
            Conv1d::new(store, &format!("{name}.input"), spec.in_channels, d, 1, 1, 0, rng)
        };
        let start = store.add(format!("{name}.start"), Tensor::randn(&[1, 1, d], rng).map(|v| 0.02 * v));
        let blocks = (0..spec.layers)
            .map(|i| TBlock::new(store, &format!("{name}.layer{i}"), d, spec.heads, spec.ffn, rng))
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), d, d, rng);
        Self { spec: spec.clone(), input, start, blocks, out }
    }

    /// Token sequence `[b, L' + 1, d]` with the start token at position 0.
    pub fn tokens(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        ensure!(shape.len() == 3, Dimension, "Transformer input must be [batch, channels, length], got {shape:?}");
        ensure!(shape[2] >= 1, Input, "empty series");
        ensure!(
            shape[1] == self.spec.in_channels,
            Dimension,
            "Transformer expects {} channels, got {}",
            self.spec.in_channels,
            shape[1]
        );
        let b = shape[0];
        let h = self.input.forward(g, x)?;
        let mut h = g.tape.permute(h, &[0, 2, 1])?;
        let t = g.tape.shape(h)[1];
        if self.spec.positional {
            let pe = g.input(positional_encoding(t, self.spec.width)?);
            h = g.tape.add(h, pe)?;
        }
        let zeros = g.input(Tensor::zeros(&[b, 1, self.spec.width]));
        let start = g.param(self.start);
        let start = g.tape.add(zeros, start)?;
        g.tape.concat(&[start, h], 1)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, output: Output) -> Result<Var> {
        let mut h = self.tokens(g, x)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        let (b, t, d) = {
            let s = g.tape.shape(h);
            (s[0], s[1], s[2])
        };
        match output {
            Output::Pooled => {
                let first = g.tape.slice(h, 1, 0, 1)?;
                let first = g.tape.reshape(first, &[b, d])?;
                self.out.forward(g, first)
            }
            Output::PerStep => {
                let rest = g.tape.slice(h, 1, 1, t - 1)?;
                self.out.forward(g, rest)
            }
        }
    }
}
