use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Output;
use crate::error::{ensure, Result};
use crate::tensor::{Conv1d, Graph, LayerNorm, Linear, ParamStore, Var};

/// Kernel sizes of the three convolutions in every residual block.
pub const RESNET_KERNELS: [usize; 3] = [7, 5, 3];

/// Shortest series the ResNet accepts.
pub const RESNET_MIN_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetSpec {
    pub in_channels: usize,
    /// Output widths of the three blocks; the input convolution maps to `widths[0]`.
    pub widths: [usize; 3],
    /// Stride-2 input convolution, used by per-time-step training.
    pub strided_input: bool,
}

impl ResNetSpec {
    pub fn new(in_channels: usize) -> Self {
        Self { in_channels, widths: [64, 128, 128], strided_input: false }
    }

    pub fn per_step(in_channels: usize) -> Self {
        Self { strided_input: true, ..Self::new(in_channels) }
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[2]
    }

    fn block_dims(&self) -> [(usize, usize); 3] {
        let w = self.widths;
        [(w[0], w[0]), (w[0], w[1]), (w[1], w[2])]
    }

    /// Scalar parameter count, computed without building the model.
    pub fn num_params(&self) -> usize {
        let conv = |ci: usize, co: usize, k: usize| co * ci * k + co;
        let mut n = conv(self.in_channels, self.widths[0], 7);
        for (ci, co) in self.block_dims() {
            n += conv(ci, co, 7) + conv(co, co, 5) + conv(co, co, 3) + 3 * 2 * co;
            if ci != co {
                n += conv(ci, co, 1);
            }
        }
        let d = self.embed_dim();
        n + d * d + d
    }
}

/// Residual block: three conv → layer norm → ReLU stages plus a skip path.
#[derive(Clone, Debug)]
pub struct RBlock {
    pub convs: Vec<Conv1d>,
    pub norms: Vec<LayerNorm>,
    /// Width-1 convolution, present only when the block changes width.
    pub skip: Option<Conv1d>,
    pub c_in: usize,
    pub c_out: usize,
}

impl RBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, &k) in RESNET_KERNELS.iter().enumerate() {
            let ci = if i == 0 { c_in } else { c_out };
            convs.push(Conv1d::same(store, &format!("{name}.conv{i}"), ci, c_out, k, rng));
            norms.push(LayerNorm::new(store, &format!("{name}.norm{i}"), c_out));
        }
        let skip = (c_in != c_out).then(|| Conv1d::same(store, &format!("{name}.skip"), c_in, c_out, 1, rng));
        Self { convs, norms, skip, c_in, c_out }
    }

    /// `x` is `[b, c_in, t]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.tape.shape(x)[1];
        ensure!(c == self.c_in, Dimension, "residual block expects {} channels, got {c}", self.c_in);
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, h)?;
            h = norm.forward_axis(g, h, 1)?;
            h = g.tape.relu(h);
        }
        let skip = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        g.tape.add(h, skip)
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    pub spec: ResNetSpec,
    pub stem: Conv1d,
    pub blocks: Vec<RBlock>,
    pub out: Linear,
}

impl ResNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: &ResNetSpec, rng: &mut R) -> Self {
        let stride = if spec.strided_input { 2 } else { 1 };
        let stem = Conv1d::new(store, &format!("{name}.stem"), spec.in_channels, spec.widths[0], 7, stride, 3, rng);
        let blocks = spec
            .block_dims()
            .iter()
            .enumerate()
            .map(|(i, &(ci, co))| RBlock::new(store, &format!("{name}.block{i}"), ci, co, rng))
            .collect();
        let d = spec.embed_dim();
        let out = Linear::new(store, &format!("{name}.out"), d, d, rng);
        Self { spec: spec.clone(), stem, blocks, out }
    }

    /// `x` is `[b, c, L]`; returns `[b, d]` or `[b, L', d]`.
    pub fn forward(&self, g: &mut Graph, x: Var, output: Output) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        ensure!(shape.len() == 3, Dimension, "ResNet input must be [batch, channels, length], got {shape:?}");
        ensure!(
            shape[2] >= RESNET_MIN_LEN,
            Input,
            "series length {} is below the ResNet minimum of {RESNET_MIN_LEN}",
            shape[2]
        );
        ensure!(
            shape[1] == self.spec.in_channels,
            Dimension,
            "ResNet expects {} channels, got {}",
            self.spec.in_channels,
            shape[1]
        );
        let mut h = self.stem.forward(g, x)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        match output {
            Output::Pooled => {
                let pooled = g.tape.mean_axis(h, 2)?;
                self.out.forward(g, pooled)
            }
            Output::PerStep => {
                let steps = g.tape.permute(h, &[0, 2, 1])?;
                self.out.forward(g, steps)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn skip_only_when_widths_differ() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = RBlock::new(&mut store, "a", 8, 8, &mut rng);
        let wide = RBlock::new(&mut store, "b", 8, 16, &mut rng);
        assert!(same.skip.is_none());
        let skip = wide.skip.as_ref().unwrap();
        assert_eq!(store.get(skip.w).shape(), &[16, 8, 1]);
        assert_eq!(store.iter().filter(|(n, _)| n.starts_with("b.skip.weight")).count(), 1);
    }

    #[test]
    fn zero_main_path_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = RBlock::new(&mut store, "blk", 4, 4, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[2, 4, 10], &mut rng);
        let mut g = Graph::inference(&store);
        let xv = g.input(x.clone());
        let y = block.forward(&mut g, xv).unwrap();
        assert_eq!(g.tape.value(y), &x);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = RBlock::new(&mut store, "blk", 4, 4, &mut rng);
        let mut g = Graph::inference(&store);
        let xv = g.input(Tensor::zeros(&[1, 3, 10]));
        assert!(matches!(block.forward(&mut g, xv), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn counted_params_match_built_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [ResNetSpec::new(3), ResNetSpec { widths: [8, 16, 12], ..ResNetSpec::per_step(1) }] {
            let mut store = ParamStore::new();
            ResNet::new(&mut store, "r", &spec, &mut rng);
            assert_eq!(store.num_scalars(), spec.num_params());
        }
    }
}
