//! Parameter storage, initialization and the layer zoo.
//!
//! Parameters live in a [`ParamStore`] outside any graph and are leased into
//! graphs per forward pass. Every parameter is initialized from its own RNG
//! stream derived from `(seed, full_name)`, so a module initializes
//! identically no matter which other modules exist in the model — a model
//! with extra decoders shares bit-identical encoder weights with one without.

mod attention;
mod optim;

pub use attention::{sinusoidal_encoding, TransformerDecoderLayer, TransformerEncoderLayer};
pub use optim::Adam;

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::graph::{BnBuffers, BufferUpdate, Graph, ParamId, TensorId};

pub struct Param {
    pub name: String,
    pub value: Arc<ArrayD<f64>>,
    pub trainable: bool,
    pub is_buffer: bool,
}

/// Flat registry of all parameters and buffers of a model.
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
            frozen: false,
        }
    }

    pub fn get(&self, pid: ParamId) -> &Param {
        &self.params[pid]
    }

    pub fn value(&self, pid: ParamId) -> &ArrayD<f64> {
        &self.params[pid].value
    }

    pub fn set_value(&mut self, pid: ParamId, value: ArrayD<f64>) {
        assert_eq!(
            self.params[pid].value.shape(),
            value.shape(),
            "set_value: shape mismatch for {}",
            self.params[pid].name
        );
        self.params[pid].value = Arc::new(value);
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    /// Total number of scalar parameters (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.is_buffer)
            .map(|p| p.value.len())
            .sum()
    }

    /// Apply batch-norm style buffer updates in their recorded order.
    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate>) {
        for u in updates {
            self.set_value(u.param, u.value);
        }
    }

    /// Content hash over names, shapes and values; used for the determinism
    /// contract on checkpoints.
    pub fn state_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    fn insert(&mut self, name: String, value: ArrayD<f64>, trainable: bool, is_buffer: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let pid = self.params.len();
        self.by_name.insert(name.clone(), pid);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
            is_buffer,
        });
        pid
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// RNG stream derived from the global seed and a parameter's full name.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// U(-limit, limit) with limit = sqrt(6 / fan_in).
    KaimingUniform { fan_in: usize },
    Uniform { limit: f64 },
    Normal { std: f64 },
    Zeros,
    Ones,
    Const(f64),
}

fn init_array(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        Init::KaimingUniform { fan_in } => {
            let limit = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect()
        }
        Init::Uniform { limit } => (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit).collect(),
        Init::Normal { std } => (0..n)
            .map(|_| {
                // Box-Muller; two uniforms per draw keeps the stream simple.
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect(),
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c; n],
    };
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Scoped parameter builder carrying a name prefix and a frozen flag.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    frozen: bool,
}

impl Scope<'_> {
    pub fn child(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
            frozen: self.frozen,
        }
    }

    /// A child scope whose parameters are excluded from optimization.
    pub fn frozen_child(&mut self, name: &str) -> Scope<'_> {
        let mut s = self.child(name);
        s.frozen = true;
        s
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = self.full_name(name);
        let mut rng = named_rng(self.store.seed, &full);
        let value = init_array(shape, init, &mut rng);
        self.store.insert(full, value, !self.frozen, false)
    }

    pub fn buffer(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, value, false, true)
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

/// Fully connected layer; weight is stored (in, out) so `y = x W + b`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(scope: &mut Scope, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let mut s = scope.child(name);
        let w = s.param("weight", &[in_dim, out_dim], Init::KaimingUniform { fan_in: in_dim });
        let b = bias.then(|| s.param("bias", &[out_dim], Init::Zeros));
        Linear { w, b, in_dim, out_dim }
    }

    /// x: (..., in_dim) -> (..., out_dim)
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.in_dim, "linear: input dim mismatch");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = g.reshape(x, &[rows.max(1), self.in_dim]);
        let w = g.lease(store, self.w);
        let mut y = g.matmul(x2, w);
        if let Some(b) = self.b {
            let b = g.lease(store, b);
            y = g.add_bias_row(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

/// MLP with ReLU between layers (none after the last).
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(scope: &mut Scope, name: &str, dims: &[usize], bias: bool) -> Self {
        assert!(dims.len() >= 2);
        let mut s = scope.child(name);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut s, &format!("fc{i}"), w[0], w[1], bias))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let mut s = scope.child(name);
        let fan_in = c_in * kernel * kernel;
        let w = s.param("weight", &[c_out, c_in, kernel, kernel], Init::KaimingUniform { fan_in });
        let b = bias.then(|| s.param("bias", &[c_out], Init::Zeros));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let w = g.lease(store, self.w);
        let mut y = g.conv2d(x, w, self.stride, self.pad);
        if let Some(b) = self.b {
            let b = g.lease(store, b);
            y = g.add_bias_channel(y, b);
        }
        y
    }
}

pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        scope: &mut Scope,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let mut s = scope.child(name);
        let fan_in = c_in * kernel * kernel;
        let w = s.param("weight", &[c_in, c_out, kernel, kernel], Init::KaimingUniform { fan_in });
        let b = bias.then(|| s.param("bias", &[c_out], Init::Zeros));
        ConvTranspose2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let w = g.lease(store, self.w);
        let mut y = g.conv_transpose2d(x, w, self.stride, self.pad);
        if let Some(b) = self.b {
            let b = g.lease(store, b);
            y = g.add_bias_channel(y, b);
        }
        y
    }
}

pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: ParamId,
    pub run_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope, name: &str, channels: usize) -> Self {
        let mut s = scope.child(name);
        BatchNorm2d {
            gamma: s.param("gamma", &[channels], Init::Ones),
            beta: s.param("beta", &[channels], Init::Zeros),
            run_mean: s.buffer("running_mean", ArrayD::zeros(IxDyn(&[channels]))),
            run_var: s.buffer("running_var", ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let gamma = g.lease(store, self.gamma);
        let beta = g.lease(store, self.beta);
        let buffers = BnBuffers {
            mean_pid: self.run_mean,
            var_pid: self.run_var,
            mean: store
                .value(self.run_mean)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
            var: store
                .value(self.run_var)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned(),
        };
        g.batch_norm2d(x, gamma, beta, &buffers, self.momentum, self.eps)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope, name: &str, dim: usize) -> Self {
        let mut s = scope.child(name);
        LayerNorm {
            gamma: s.param("gamma", &[dim], Init::Ones),
            beta: s.param("beta", &[dim], Init::Zeros),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: TensorId) -> TensorId {
        let gamma = g.lease(store, self.gamma);
        let beta = g.lease(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}
