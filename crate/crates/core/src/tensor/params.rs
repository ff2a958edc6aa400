use rand::Rng;

use super::array::Tensor;
use super::tape::{Tape, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors of one model, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Replaces every tensor with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        ensure!(self.names == other.names, Config, "parameter names differ between stores");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            ensure!(dst.shape() == src.shape(), Dimension, "parameter shapes differ");
            *dst = src.clone();
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, name: String, value: Tensor) {
        self.names.push(name);
        self.tensors.push(value);
    }
}

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// A graph whose parameters receive gradients.
    pub fn new(params: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), params, bound: vec![None; params.len()], track: true }
    }

    /// A graph for inference; nothing requires gradients.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self { track: false, ..Self::new(params) }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient per parameter, `None` where the backward pass never reached it.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad(v))).collect()
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` initialisation.
pub(crate) fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), init_uniform(&[outputs, inputs], inputs, rng));
        let b = store.add(format!("{name}.bias"), init_uniform(&[outputs], inputs, rng));
        Self { w, b, inputs, outputs }
    }

    /// `x · Wᵀ + b` over the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.tape.matmul_t(x, w, false, true)?;
        g.tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel;
        let w = store.add(format!("{name}.weight"), init_uniform(&[c_out, c_in, kernel], fan_in, rng));
        let b = store.add(format!("{name}.bias"), init_uniform(&[c_out], fan_in, rng));
        Self { w, b, kernel, stride, padding }
    }

    /// Odd kernel with "same" padding.
    pub fn same<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(store, name, c_in, c_out, kernel, 1, kernel / 2, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.tape.conv1d(x, w, Some(b), self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward_axis(&self, g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm_axis(x, gamma, beta, axis, self.eps)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let axis = g.tape.shape(x).len() - 1;
        self.forward_axis(g, x, axis)
    }
}
