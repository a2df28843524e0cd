//! Parameterized building blocks. Each layer only knows its parameter names
//! and shapes; values live in a [`ParamStore`].

use fra_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Whether batch normalization uses batch statistics (and records running
/// statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self { name: name.into(), fan_in, fan_out, bias }
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    /// Uniform `±1/sqrt(fan_in)` weights and zero bias.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let bound = 1.0 / (self.fan_in as f64).sqrt();
        store.insert(self.weight_name(), Tensor::uniform([self.fan_out, self.fan_in], -bound, bound, rng));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([self.fan_out]));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &self.weight_name());
        let b = self.bias.then(|| g.param(store, &self.bias_name()));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, momentum: 0.1, eps: 1e-5 }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(join(&self.name, "weight"), Tensor::ones([self.dim]));
        store.insert(join(&self.name, "bias"), Tensor::zeros([self.dim]));
        store.insert_buffer(join(&self.name, "running_mean"), Tensor::zeros([self.dim]));
        store.insert_buffer(join(&self.name, "running_var"), Tensor::ones([self.dim]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let gamma = g.param(store, &join(&self.name, "weight"));
        let beta = g.param(store, &join(&self.name, "bias"));
        let (mean_name, var_name) = (join(&self.name, "running_mean"), join(&self.name, "running_var"));
        let rm = store.buffer(&mean_name).expect("running mean");
        let rv = store.buffer(&var_name).expect("running var");
        match mode {
            Mode::Eval => g.batch_norm(x, gamma, beta, Some((rm, rv)), self.eps).0,
            Mode::Train => {
                let count = g.value(x).numel() / self.dim;
                let (y, stats) = g.batch_norm(x, gamma, beta, None, self.eps);
                let (mean, var) = stats.expect("train-mode statistics");
                let m = T::from_f64_lossy(self.momentum);
                let keep = T::one() - m;
                let unbias = if count > 1 {
                    T::from_f64_lossy(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let new_mean = Tensor::from_fn([self.dim], |c| keep * rm.data()[c] + m * mean[c]);
                let new_var = Tensor::from_fn([self.dim], |c| keep * rv.data()[c] + m * var[c] * unbias);
                let tag = store.tag().to_string();
                g.push_buffer_update(&tag, &mean_name, new_mean);
                g.push_buffer_update(&tag, &var_name, new_var);
                y
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert(join(&self.name, "weight"), Tensor::ones([self.dim]));
        store.insert(join(&self.name, "bias"), Tensor::zeros([self.dim]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, &join(&self.name, "weight"));
        let beta = g.param(store, &join(&self.name, "bias"));
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride, pad: kernel / 2 }
    }

    /// Kaiming-normal, fan-out mode.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let fan_out = self.cout * self.kernel * self.kernel;
        let std = (2.0 / fan_out as f64).sqrt();
        store.insert(
            join(&self.name, "weight"),
            Tensor::randn([self.cout, self.cin, self.kernel, self.kernel], std, rng),
        );
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, &join(&self.name, "weight"));
        g.conv2d(x, w, self.stride, self.pad)
    }
}

/// Shape of a projector or predictor MLP.
///
/// With `num_layers = 2`: `Linear -> [BatchNorm] -> ReLU -> Linear`.
/// With `num_layers = 1`: a single `Linear` (no normalization).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub batch_norm: bool,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub name: String,
    pub spec: MlpSpec,
    first: Linear,
    norm: Option<BatchNorm>,
    second: Option<Linear>,
}

impl Mlp {
    pub fn new(name: impl Into<String>, spec: MlpSpec) -> Self {
        let name = name.into();
        assert!(matches!(spec.num_layers, 1 | 2), "MLP depth must be 1 or 2");
        if spec.num_layers == 1 {
            return Self {
                first: Linear::new(join(&name, "0"), spec.input_dim, spec.output_dim, true),
                norm: None,
                second: None,
                name,
                spec,
            };
        }
        Self {
            first: Linear::new(join(&name, "0"), spec.input_dim, spec.hidden_dim, true),
            norm: spec.batch_norm.then(|| BatchNorm::new(join(&name, "1"), spec.hidden_dim)),
            second: Some(Linear::new(join(&name, "3"), spec.hidden_dim, spec.output_dim, true)),
            name,
            spec,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.first.init(store, rng);
        if let Some(bn) = &self.norm {
            bn.init(store);
        }
        if let Some(l) = &self.second {
            l.init(store, rng);
        }
    }

    /// Overwrites a single-layer MLP with the identity map.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        assert!(
            self.second.is_none() && self.spec.input_dim == self.spec.output_dim,
            "only square single-layer MLPs can be the identity"
        );
        let d = self.spec.input_dim;
        *store.get_mut(&self.first.weight_name()).expect("weight") =
            Tensor::from_fn([d, d], |i| if i / d == i % d { T::one() } else { T::zero() });
        *store.get_mut(&self.first.bias_name()).expect("bias") = Tensor::zeros([d]);
    }

    /// Applies the MLP to the last axis of `x` (any leading shape).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let shape = g.shape(x).to_vec();
        let width = *shape.last().expect("mlp input rank");
        let rows = g.value(x).numel() / width;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, width]) };
        let mut h = self.first.forward(g, store, flat);
        if let Some(second) = &self.second {
            if let Some(bn) = &self.norm {
                h = bn.forward(g, store, h, mode);
            }
            h = g.relu(h);
            h = second.forward(g, store, h);
        }
        if shape.len() == 2 {
            h
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.spec.output_dim;
            g.reshape(h, &out_shape)
        }
    }
}
