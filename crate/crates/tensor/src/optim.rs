use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter optimizer state, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub slots: BTreeMap<String, Vec<Tensor<T>>>,
}

impl<T> Default for OptimizerState<T> {
    fn default() -> Self {
        Self { step: 0, slots: BTreeMap::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    /// Heavy-ball SGD with coupled (L2) weight decay.
    Sgd { momentum: f64 },
}

/// Whether a parameter gets weight decay: matrices and filters do, vectors
/// (biases, normalization affine terms) and embeddings named `*.queries` do not.
pub fn decays(name: &str, value_rank: usize) -> bool {
    value_rank >= 2 && !name.ends_with("queries")
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self { kind, weight_decay, state: OptimizerState::default() }
    }

    /// Applies one update. Parameters without an entry in `grads` are treated
    /// as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.state.step += 1;
        let t = self.state.step as f64;
        for (name, p) in params.params_mut() {
            let slots = self.state.slots.entry(name.clone()).or_insert_with(|| match self.kind {
                OptimizerKind::AdamW { .. } => vec![Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())],
                OptimizerKind::Sgd { .. } => vec![Tensor::zeros(p.shape().to_vec())],
            });
            let g = grads.get(name);
            let wd = if decays(name, p.rank()) { self.weight_decay } else { 0.0 };
            let grad_at = |i: usize| g.map_or(0.0, |g| g.data()[i].as_f64());
            match self.kind {
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let (bc1, bc2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    let (m, v) = slots.split_at_mut(1);
                    let (m, v) = (m[0].data_mut(), v[0].data_mut());
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let gi = grad_at(i);
                        let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
                        let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
                        m[i] = T::from_f64_lossy(mi);
                        v[i] = T::from_f64_lossy(vi);
                        let update = (mi / bc1) / ((vi / bc2).sqrt() + eps) + wd * w.as_f64();
                        *w = T::from_f64_lossy(w.as_f64() - lr * update);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let buf = slots[0].data_mut();
                    for (i, w) in p.data_mut().iter_mut().enumerate() {
                        let gi = grad_at(i) + wd * w.as_f64();
                        let bi = momentum * buf[i].as_f64() + gi;
                        buf[i] = T::from_f64_lossy(bi);
                        *w = T::from_f64_lossy(w.as_f64() - lr * bi);
                    }
                }
            }
        }
    }
}
