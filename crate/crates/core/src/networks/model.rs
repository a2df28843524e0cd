use fra_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderKind, EncoderOutput};
use super::layers::{Mlp, MlpSpec, Mode};
use crate::error::{FraError, Result};
use crate::heatmap_head::{assign_pixels, from_tokens, pool_tokens, to_tokens, DecoderHead, HeadSpec};

pub const ONLINE: &str = "online";
pub const MOMENTUM: &str = "momentum";

const PROJ_GLOBAL: &str = "proj_global";
const PROJ_LOCAL: &str = "proj_local";
const PRED_GLOBAL: &str = "pred_global";
const PRED_LOCAL: &str = "pred_local";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Stage widths of the small residual encoder.
    pub widths: [usize; 4],
    /// Blocks per stage of the small residual encoder.
    pub depths: [usize; 4],
    /// Shared embedding dimension `D`.
    pub embed_dim: usize,
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    pub projector_batch_norm: bool,
    /// Number of facial queries `N`.
    pub num_queries: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::ResnetSmall,
            widths: [16, 32, 64, 128],
            depths: [1, 1, 1, 1],
            embed_dim: 256,
            projector_hidden: 512,
            predictor_hidden: 512,
            projector_batch_norm: true,
            num_queries: 8,
            decoder_depth: 1,
            decoder_heads: 4,
            decoder_ffn: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FraError::Config(m));
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!("model.embed_dim must be a positive multiple of 4, got {}", self.embed_dim));
        }
        if self.num_queries == 0 {
            return bad("model.num_queries must be at least 1".into());
        }
        if !(1..=3).contains(&self.decoder_depth) {
            return bad(format!("model.decoder_depth must be in 1..=3, got {}", self.decoder_depth));
        }
        if self.decoder_heads == 0 || self.embed_dim % self.decoder_heads != 0 {
            return bad(format!(
                "model.decoder_heads ({}) must divide model.embed_dim ({})",
                self.decoder_heads, self.embed_dim
            ));
        }
        if self.widths.contains(&0) || self.projector_hidden == 0 || self.predictor_hidden == 0 || self.decoder_ffn == 0 {
            return bad("model widths must all be positive".into());
        }
        Ok(())
    }
}

/// Everything one branch produces for one view.
pub struct BranchOutput {
    /// Encoder feature map `[B, C, H, W]`.
    pub feature_map: Var,
    pub height: usize,
    pub width: usize,
    /// Global embedding `z` `[B, D]`.
    pub global: Var,
    /// Dense projection as tokens `[B, HW, D]`.
    pub dense: Var,
    /// Mask embeddings `Q` `[B, N, D]`.
    pub masks: Var,
    /// Cosine similarities `[B, HW, N]`.
    pub cosine: Var,
    /// Heatmaps (softmax over regions) `[B, HW, N]`.
    pub probs: Var,
    /// Local embeddings `z^m` `[B, N, D]`.
    pub locals: Var,
}

/// Network topology. Parameters live in separate stores so one description
/// serves both the online and the momentum branch.
#[derive(Clone, Debug)]
pub struct FraModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub proj_global: Mlp,
    pub proj_local: Mlp,
    pub pred_global: Mlp,
    pub pred_local: Mlp,
    pub head: DecoderHead,
}

impl FraModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::new(config.encoder, config.widths, config.depths);
        let c = encoder.out_channels;
        let d = config.embed_dim;
        let projector = |input_dim| MlpSpec {
            input_dim,
            hidden_dim: config.projector_hidden,
            output_dim: d,
            num_layers: 2,
            batch_norm: config.projector_batch_norm,
        };
        let predictor = MlpSpec { input_dim: d, hidden_dim: config.predictor_hidden, output_dim: d, num_layers: 2, batch_norm: config.projector_batch_norm };
        let head = DecoderHead::new(HeadSpec {
            in_channels: c,
            num_queries: config.num_queries,
            d_model: d,
            out_dim: d,
            depth: config.decoder_depth,
            heads: config.decoder_heads,
            ffn_dim: config.decoder_ffn,
        });
        Ok(Self {
            config: config.clone(),
            encoder,
            proj_global: Mlp::new(PROJ_GLOBAL, projector(c)),
            proj_local: Mlp::new(PROJ_LOCAL, projector(c)),
            pred_global: Mlp::new(PRED_GLOBAL, predictor),
            pred_local: Mlp::new(PRED_LOCAL, predictor),
            head,
        })
    }

    /// Fresh online parameters (all submodules including predictors).
    pub fn init_online<T: Scalar>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::new(ONLINE);
        self.encoder.init(&mut store, rng);
        self.proj_global.init(&mut store, rng);
        self.proj_local.init(&mut store, rng);
        self.pred_global.init(&mut store, rng);
        self.pred_local.init(&mut store, rng);
        self.head.init(&mut store, rng);
        store
    }

    /// Whether `name` belongs to a predictor (present only online).
    pub fn is_predictor(name: &str) -> bool {
        [PRED_GLOBAL, PRED_LOCAL].iter().any(|p| name.starts_with(&format!("{p}.")))
    }

    pub fn init_pair<T: Scalar>(&self, rng: &mut impl Rng) -> ModelPair<T> {
        ModelPair::from_online(self.init_online(rng))
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, view: Var, mode: Mode) -> Result<EncoderOutput> {
        let s = g.shape(view);
        if s.len() != 4 || s[1] != 3 || s[2] < self.encoder.stride() || s[3] < self.encoder.stride() {
            return Err(FraError::Domain(format!(
                "encoder expects [B, 3, S, S] with S >= {}, got {:?}",
                self.encoder.stride(),
                s
            )));
        }
        Ok(self.encoder.forward(g, st, view, mode))
    }

    pub fn project_global<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, pooled: Var, mode: Mode) -> Result<Var> {
        finite_or_err(g, pooled, "pooled features")?;
        Ok(self.proj_global.forward(g, st, pooled, mode))
    }

    /// Applies the local projector at every pixel: `[B, C, H, W] -> [B, HW, D]`.
    pub fn project_dense_tokens<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, feature_map: Var, mode: Mode) -> Var {
        let tokens = to_tokens(g, feature_map);
        self.proj_local.forward(g, st, tokens, mode)
    }

    /// `[B, C, H, W] -> [B, D, H, W]`.
    pub fn project_dense<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, feature_map: Var, mode: Mode) -> Result<Var> {
        finite_or_err(g, feature_map, "feature map")?;
        let (h, w) = (g.shape(feature_map)[2], g.shape(feature_map)[3]);
        let tokens = self.project_dense_tokens(g, st, feature_map, mode);
        Ok(from_tokens(g, tokens, h, w))
    }

    /// Local projector on arbitrary `[..., C]` inputs.
    pub fn project_local<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        self.proj_local.forward(g, st, x, mode)
    }

    pub fn predict_global<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, z: Var, mode: Mode) -> Var {
        self.pred_global.forward(g, st, z, mode)
    }

    pub fn predict_local<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, z: Var, mode: Mode) -> Var {
        self.pred_local.forward(g, st, z, mode)
    }

    pub fn mask_embeddings<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, feature_map: Var) -> Result<Var> {
        self.head.forward(g, st, feature_map)
    }

    /// Full branch forward for one view: encoder, global and dense
    /// projections, heatmaps from this branch's own head, and local
    /// embeddings pooled from this branch's own feature map.
    pub fn branch<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        st: &ParamStore<T>,
        view: Var,
        mode: Mode,
        temperature: f64,
    ) -> Result<BranchOutput> {
        let enc = self.encode(g, st, view, mode)?;
        let (height, width) = (g.shape(enc.feature_map)[2], g.shape(enc.feature_map)[3]);
        let global = self.proj_global.forward(g, st, enc.pooled, mode);
        let dense = self.project_dense_tokens(g, st, enc.feature_map, mode);
        let masks = self.head.forward(g, st, enc.feature_map)?;
        let a = assign_pixels(g, dense, masks, temperature)?;
        let tokens = to_tokens(g, enc.feature_map);
        let pooled_regions = pool_tokens(g, tokens, a.probs);
        let locals = self.proj_local.forward(g, st, pooled_regions, mode);
        Ok(BranchOutput {
            feature_map: enc.feature_map,
            height,
            width,
            global,
            dense,
            masks,
            cosine: a.cosine,
            probs: a.probs,
            locals,
        })
    }
}

fn finite_or_err<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(FraError::Numeric(format!("{what} contain non-finite values")))
    }
}

/// Online parameters and their momentum (EMA) copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair<T: Scalar> {
    pub online: ParamStore<T>,
    pub momentum: ParamStore<T>,
}

impl<T: Scalar> ModelPair<T> {
    /// Momentum branch starts as an exact copy of the online branch minus predictors.
    pub fn from_online(online: ParamStore<T>) -> Self {
        let mut momentum = ParamStore::new(MOMENTUM);
        for (name, value) in online.params() {
            if !FraModel::is_predictor(name) {
                momentum.insert(name.clone(), value.clone());
            }
        }
        for (name, value) in online.buffers() {
            if !FraModel::is_predictor(name) {
                momentum.insert_buffer(name.clone(), value.clone());
            }
        }
        Self { online, momentum }
    }

    /// `momentum <- tau * momentum + (1 - tau) * online` for every shared
    /// parameter. Normalization running statistics are not learned and are
    /// tracked by each branch's own forward passes.
    pub fn ema_update(&mut self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(FraError::Domain(format!("EMA momentum must lie in [0, 1], got {tau}")));
        }
        self.check_topology()?;
        let keep = T::from_f64_lossy(tau);
        let take = T::from_f64_lossy(1.0 - tau);
        for (name, target) in self.momentum.params_mut() {
            let source = self.online.expect(name);
            if tau == 1.0 {
                continue;
            }
            if tau == 0.0 {
                target.data_mut().copy_from_slice(source.data());
                continue;
            }
            for (t, &s) in target.data_mut().iter_mut().zip(source.data()) {
                *t = keep * *t + take * s;
            }
        }
        Ok(())
    }

    /// Every momentum parameter must exist online with the same shape, and
    /// every non-predictor online parameter must exist in the momentum store.
    pub fn check_topology(&self) -> Result<()> {
        for (name, m) in self.momentum.params() {
            match self.online.get(name) {
                Some(o) if o.shape() == m.shape() => {}
                Some(o) => {
                    return Err(FraError::Topology(format!(
                        "parameter {name}: online shape {:?} vs momentum shape {:?}",
                        o.shape(),
                        m.shape()
                    )))
                }
                None => return Err(FraError::Topology(format!("momentum parameter {name} has no online counterpart"))),
            }
        }
        for name in self.online.param_names() {
            if !FraModel::is_predictor(name) && self.momentum.get(name).is_none() {
                return Err(FraError::Topology(format!("online parameter {name} missing from momentum branch")));
            }
        }
        Ok(())
    }

    /// Checks both stores against the parameter layout `model` would create.
    pub fn check_against(&self, model: &FraModel) -> Result<()> {
        let reference: ParamStore<T> = model.init_online(&mut ChaCha8Rng::seed_from_u64(0));
        let expected = reference.signature();
        let actual = self.online.signature();
        if expected != actual {
            let detail = first_difference(&expected, &actual);
            return Err(FraError::Topology(format!("checkpoint does not match the configured model: {detail}")));
        }
        self.check_topology()
    }
}

fn first_difference(expected: &[(String, Vec<usize>)], actual: &[(String, Vec<usize>)]) -> String {
    for (e, a) in expected.iter().zip(actual) {
        if e != a {
            return format!("expected {} {:?}, found {} {:?}", e.0, e.1, a.0, a.1);
        }
    }
    format!("expected {} parameters, found {}", expected.len(), actual.len())
}

/// Copies a tensor out of a graph-free evaluation of `f`.
pub fn eval_tensor<T: Scalar>(f: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = f(&mut g)?;
    Ok(g.value(v).clone())
}
