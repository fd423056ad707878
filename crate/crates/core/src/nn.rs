//! Parameter storage, the per-step forward session, and small layers.

use sha2::{Digest, Sha256};

use crate::rng::{Purpose, Rng};
use crate::tensor::{Precision, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Non-trainable state updated during forward passes (BN running stats).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor) {
        self.buffers[id.0].value = value;
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F32 {
            for p in &mut self.params {
                p.value = std::mem::replace(&mut p.value, Tensor::scalar(0.0)).rounded(precision);
            }
        }
    }

    /// SHA-256 over name, shape and little-endian values of every frozen
    /// parameter, in registration order.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            h.update(p.name.as_bytes());
            h.update([0]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which parameters become gradient-tracking leaves on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    Trainable,
    All,
    None,
}

/// A forward pass over one batch: the tape, the bound parameters, and the
/// randomness/mode context every layer needs.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    vars: Vec<Var>,
    pub training: bool,
    seed: u64,
    epoch: u64,
    step: u64,
    buffer_updates: Vec<(BufferId, Tensor)>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, mode: BindMode, training: bool) -> Self {
        let mut tape = Tape::new();
        let vars = store
            .params
            .iter()
            .map(|p| {
                let rg = match mode {
                    BindMode::Trainable => p.trainable,
                    BindMode::All => true,
                    BindMode::None => false,
                };
                tape.leaf(p.value.clone(), rg)
            })
            .collect();
        Session {
            tape,
            store,
            vars,
            training,
            seed: 0,
            epoch: 0,
            step: 0,
            buffer_updates: Vec::new(),
        }
    }

    pub fn with_stream(mut self, seed: u64, epoch: u64, step: u64) -> Self {
        self.seed = seed;
        self.epoch = epoch;
        self.step = step;
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn rng(&self, purpose: Purpose) -> Rng {
        Rng::stream(self.seed, self.epoch, self.step, purpose)
    }

    pub fn queue_buffer(&mut self, id: BufferId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(BufferId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Gradient of every trainable parameter after `tape.backward`, in
    /// parameter order. Frozen parameters yield `None`.
    pub fn param_grads(&mut self) -> Vec<Option<Tensor>> {
        let vars = self.vars.clone();
        vars.into_iter().map(|v| self.tape.take_grad(v)).collect()
    }
}

pub fn init_trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.truncated_normal(std))
}

pub fn init_uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng, trainable: bool) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            init_trunc_normal(&[d_in, d_out], 0.02, rng),
            trainable,
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), trainable);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let last = *s.tape.shape(x).last().unwrap();
        if last != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: s.tape.shape(x).to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.tape.matmul(x, w)?;
        s.tape.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), trainable),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.tape.layernorm(x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        // He initialization for ReLU stacks.
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.normal() * std),
            true,
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// 2D batch normalization. Training mode normalizes with batch statistics
/// and queues a running-stat update (momentum 0.1, unbiased variance);
/// eval mode uses the running statistics, which start at mean 0, var 1.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        if s.training {
            let (mean, var) = crate::tensor::kernels::channel_stats(s.tape.value(x));
            let shape = s.tape.shape(x);
            let count = (shape[0] * shape[2] * shape[3]) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = s.store().buffer(self.running_mean);
            let rv = s.store().buffer(self.running_var);
            let new_mean = Tensor::from_fn(rm.shape(), |i| (1.0 - m) * rm.data()[i] + m * mean[i]);
            let new_var = Tensor::from_fn(rv.shape(), |i| (1.0 - m) * rv.data()[i] + m * var[i] * unbias);
            s.queue_buffer(self.running_mean, new_mean);
            s.queue_buffer(self.running_var, new_var);
            s.tape.batchnorm2d(x, g, b, &mean, &var, self.eps, true)
        } else {
            let mean = s.store().buffer(self.running_mean).data().to_vec();
            let var = s.store().buffer(self.running_var).data().to_vec();
            s.tape.batchnorm2d(x, g, b, &mean, &var, self.eps, false)
        }
    }
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(s: &mut Session, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
    if !s.training || p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let mask = Tensor::from_fn(s.tape.shape(x), |_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 });
    s.tape.mask_mul(x, mask)
}
