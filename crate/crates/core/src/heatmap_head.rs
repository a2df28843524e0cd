//! Facial queries -> mask embeddings -> per-pixel region assignments.
//!
//! A stack of pre-norm Transformer decoder layers lets `N` learnable query
//! embeddings attend over the flattened encoder feature map; an MLP maps the
//! result into the shared embedding space. Cosine similarity between those
//! mask embeddings and the densely projected pixel features gives the
//! assignment logits, and a softmax over the region axis gives the heatmaps.

use fra_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{FraError, Result};
use crate::networks::layers::{join, LayerNorm, Linear};

/// Guard added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    /// Channels of the encoder feature map.
    pub in_channels: usize,
    /// Number of facial queries / regions `N`.
    pub num_queries: usize,
    /// Decoder width.
    pub d_model: usize,
    /// Width of the mask embeddings (the shared embedding dimension `D`).
    pub out_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

#[derive(Clone, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    d_model: usize,
}

impl Attention {
    fn new(name: &str, d_model: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(join(name, "q_proj"), d_model, d_model, true),
            k: Linear::new(join(name, "k_proj"), d_model, d_model, true),
            v: Linear::new(join(name, "v_proj"), d_model, d_model, true),
            out: Linear::new(join(name, "out_proj"), d_model, d_model, true),
            heads,
            d_model,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng);
        }
    }

    /// `[B, L, D] -> [B*heads, L, D/heads]`
    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let dh = self.d_model / self.heads;
        let x = g.reshape(x, &[s[0], s[1], self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[s[0] * self.heads, s[1], dh])
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, query: Var, key: Var, value: Var) -> Var {
        let (b, lq) = (g.shape(query)[0], g.shape(query)[1]);
        let dh = self.d_model / self.heads;
        let q = self.q.forward(g, st, query);
        let k = self.k.forward(g, st, key);
        let v = self.v.forward(g, st, value);
        let (q, k, v) = (self.split_heads(g, q), self.split_heads(g, k), self.split_heads(g, v));
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v, false, false);
        let ctx = g.reshape(ctx, &[b, self.heads, lq, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, lq, self.d_model]);
        self.out.forward(g, st, ctx)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_ffn: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

impl DecoderLayer {
    fn new(name: &str, spec: &HeadSpec) -> Self {
        Self {
            norm_self: LayerNorm::new(join(name, "norm1"), spec.d_model),
            self_attn: Attention::new(&join(name, "self_attn"), spec.d_model, spec.heads),
            norm_cross: LayerNorm::new(join(name, "norm2"), spec.d_model),
            cross_attn: Attention::new(&join(name, "cross_attn"), spec.d_model, spec.heads),
            norm_ffn: LayerNorm::new(join(name, "norm3"), spec.d_model),
            ffn_in: Linear::new(join(name, "ffn.0"), spec.d_model, spec.ffn_dim, true),
            ffn_out: Linear::new(join(name, "ffn.2"), spec.ffn_dim, spec.d_model, true),
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.norm_self.init(store);
        self.self_attn.init(store, rng);
        self.norm_cross.init(store);
        self.cross_attn.init(store, rng);
        self.norm_ffn.init(store);
        self.ffn_in.init(store, rng);
        self.ffn_out.init(store, rng);
    }

    /// `tgt` is `[B, N, d]`, `query_pos` is `[B, N, d]`, `memory`/`memory_pos` are `[B, HW, d]`.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        st: &ParamStore<T>,
        tgt: Var,
        query_pos: Var,
        memory: Var,
        memory_pos: Var,
    ) -> Var {
        let h = self.norm_self.forward(g, st, tgt);
        let qk = g.add(h, query_pos);
        let a = self.self_attn.forward(g, st, qk, qk, h);
        let tgt = g.add(tgt, a);

        let h = self.norm_cross.forward(g, st, tgt);
        let q = g.add(h, query_pos);
        let k = g.add(memory, memory_pos);
        let a = self.cross_attn.forward(g, st, q, k, memory);
        let tgt = g.add(tgt, a);

        let h = self.norm_ffn.forward(g, st, tgt);
        let h = self.ffn_in.forward(g, st, h);
        let h = g.relu(h);
        let h = self.ffn_out.forward(g, st, h);
        g.add(tgt, h)
    }
}

/// Transformer decoder + MLP producing the facial mask embeddings `Q`.
#[derive(Clone, Debug)]
pub struct DecoderHead {
    pub spec: HeadSpec,
    queries: String,
    input_proj: Linear,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    mlp_hidden: Linear,
    mlp_out: Linear,
}

impl DecoderHead {
    pub const NAME: &'static str = "head";

    pub fn new(spec: HeadSpec) -> Self {
        assert!(spec.depth >= 1, "decoder depth must be at least 1");
        assert!(spec.d_model % spec.heads == 0, "decoder width must divide into heads");
        assert!(spec.d_model % 4 == 0, "decoder width must be a multiple of 4 for 2-D positional encodings");
        let root = Self::NAME;
        Self {
            queries: join(root, "queries"),
            input_proj: Linear::new(join(root, "input_proj"), spec.in_channels, spec.d_model, true),
            layers: (0..spec.depth).map(|i| DecoderLayer::new(&format!("{root}.layers.{i}"), &spec)).collect(),
            final_norm: LayerNorm::new(join(root, "norm"), spec.d_model),
            mlp_hidden: Linear::new(join(root, "mask_mlp.0"), spec.d_model, spec.d_model, true),
            mlp_out: Linear::new(join(root, "mask_mlp.2"), spec.d_model, spec.out_dim, true),
            spec,
        }
    }

    pub fn queries_name(&self) -> &str {
        &self.queries
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        store.insert(self.queries.clone(), Tensor::randn([self.spec.num_queries, self.spec.d_model], 1.0, rng));
        self.input_proj.init(store, rng);
        for l in &self.layers {
            l.init(store, rng);
        }
        self.final_norm.init(store);
        self.mlp_hidden.init(store, rng);
        self.mlp_out.init(store, rng);
    }

    /// `feature_map` `[B, C, H, W]` -> mask embeddings `[B, N, D]`.
    ///
    /// Every query attends over all `H*W` feature-map positions, which act as
    /// keys (with fixed sinusoidal position codes) and values.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, st: &ParamStore<T>, feature_map: Var) -> Result<Var> {
        let fs = g.shape(feature_map).to_vec();
        if fs.len() != 4 || fs[1] != self.spec.in_channels {
            return Err(FraError::Domain(format!(
                "decoder head expects [B, {}, H, W], got {:?}",
                self.spec.in_channels, fs
            )));
        }
        let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        if h * w == 0 {
            return Err(FraError::Domain("feature map has no spatial positions".into()));
        }
        let tokens = g.reshape(feature_map, &[b, c, h * w]);
        let tokens = g.permute(tokens, &[0, 2, 1]);
        let memory = self.input_proj.forward(g, st, tokens);
        let pos = g.constant(sine_position_encoding::<T>(h, w, self.spec.d_model));
        let memory_pos = g.expand_axis(pos, 0, b);

        let queries = g.param(st, &self.queries);
        let query_pos = g.expand_axis(queries, 0, b);
        let mut tgt = g.constant(Tensor::zeros([b, self.spec.num_queries, self.spec.d_model]));
        for layer in &self.layers {
            tgt = layer.forward(g, st, tgt, query_pos, memory, memory_pos);
        }
        let out = self.final_norm.forward(g, st, tgt);
        let out = self.mlp_hidden.forward(g, st, out);
        let out = g.relu(out);
        Ok(self.mlp_out.forward(g, st, out))
    }
}

/// Fixed 2-D sine/cosine position codes, `[H*W, d]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sine_position_encoding<T: Scalar>(h: usize, w: usize, d: usize) -> Tensor<T> {
    let half = d / 2;
    let quarter = half / 2;
    let two_pi = std::f64::consts::TAU;
    Tensor::from_fn([h * w, d], |idx| {
        let (p, ch) = (idx / d, idx % d);
        let (y, x) = (p / w, p % w);
        let (coord, local) = if ch < half {
            ((y as f64 + 0.5) / h as f64 * two_pi, ch)
        } else {
            ((x as f64 + 0.5) / w as f64 * two_pi, ch - half)
        };
        let i = local % quarter;
        let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
        let v = if local < quarter { (coord / freq).sin() } else { (coord / freq).cos() };
        T::from_f64_lossy(v)
    })
}

/// Graph-level assignment field in pixel-major layout.
pub struct Assignments {
    /// Cosine similarities `[B, HW, N]`.
    pub cosine: Var,
    /// Softmax over regions of `cosine / temperature`, `[B, HW, N]`.
    pub probs: Var,
}

/// Cosine similarity between every dense pixel feature (`[B, HW, D]`) and
/// every mask embedding (`[B, N, D]`), then a tempered softmax over regions.
pub fn assign_pixels<T: Scalar>(g: &mut Graph<T>, dense_tokens: Var, masks: Var, temperature: f64) -> Result<Assignments> {
    let (ds, qs) = (g.shape(dense_tokens).to_vec(), g.shape(masks).to_vec());
    if ds.len() != 3 || qs.len() != 3 || ds[0] != qs[0] || ds[2] != qs[2] {
        return Err(FraError::Domain(format!(
            "assignment inputs must be [B, HW, D] and [B, N, D], got {:?} and {:?}",
            ds, qs
        )));
    }
    if temperature <= 0.0 {
        return Err(FraError::Domain(format!("assignment temperature must be positive, got {temperature}")));
    }
    let dn = g.l2_normalize(dense_tokens, NORM_EPS);
    let qn = g.l2_normalize(masks, NORM_EPS);
    let cosine = g.bmm(dn, qn, false, true);
    let logits = g.scale(cosine, 1.0 / temperature);
    let probs = g.softmax(logits);
    Ok(Assignments { cosine, probs })
}

/// Heatmap-weighted average pooling of pixel features.
///
/// `tokens` is `[B, HW, C]`, `probs` is `[B, HW, N]`; returns `[B, N, C]` with
/// row `m` equal to `sum_p M[m,p] F[p] / (sum_p M[m,p] + eps)`.
pub fn pool_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, probs: Var) -> Var {
    let weighted = g.bmm(probs, tokens, true, false);
    let mass = g.sum_axis(probs, 1);
    let mass = g.affine(mass, 1.0, NORM_EPS);
    let ones = g.constant(Tensor::ones(g.shape(mass).to_vec()));
    let inv = g.div(ones, mass);
    g.mul_prefix(weighted, inv)
}

/// `[B, C, H, W]` -> `[B, HW, C]`.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, feature_map: Var) -> Var {
    let s = g.shape(feature_map).to_vec();
    let flat = g.reshape(feature_map, &[s[0], s[1], s[2] * s[3]]);
    g.permute(flat, &[0, 2, 1])
}

/// `[B, HW, C]` -> `[B, C, H, W]`.
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, h: usize, w: usize) -> Var {
    let s = g.shape(tokens).to_vec();
    let t = g.permute(tokens, &[0, 2, 1]);
    g.reshape(t, &[s[0], s[2], h, w])
}

/// Materialized assignment field for one batch.
#[derive(Clone, Debug)]
pub struct AssignmentField<T> {
    /// Cosine similarities `[B, N, H, W]`, in `[-1, 1]`.
    pub s: Tensor<T>,
    /// Normalized heatmaps `[B, N, H, W]`; every pixel sums to one over `N`.
    pub m: Tensor<T>,
}

/// Tensor-level assignment computation: `dense` `[B, D, H, W]`, `masks` `[B, N, D]`.
pub fn compute_assignments<T: Scalar>(dense: &Tensor<T>, masks: &Tensor<T>, temperature: f64) -> Result<AssignmentField<T>> {
    let ds = dense.shape();
    if ds.len() != 4 {
        return Err(FraError::Domain(format!("dense map must be [B, D, H, W], got {:?}", ds)));
    }
    let (h, w) = (ds[2], ds[3]);
    let mut g = Graph::inference();
    let d = g.constant(dense.clone());
    let tokens = to_tokens(&mut g, d);
    let q = g.constant(masks.clone());
    let a = assign_pixels(&mut g, tokens, q, temperature)?;
    let s = from_tokens(&mut g, a.cosine, h, w);
    let m = from_tokens(&mut g, a.probs, h, w);
    Ok(AssignmentField { s: g.value(s).clone(), m: g.value(m).clone() })
}

/// Tensor-level weighted average pooling: `feature_map` `[B, C, H, W]`,
/// heatmaps `[B, N, H, W]` -> `[B, N, C]`.
pub fn pool_regions<T: Scalar>(feature_map: &Tensor<T>, heatmaps: &Tensor<T>) -> Result<Tensor<T>> {
    let (fs, ms) = (feature_map.shape(), heatmaps.shape());
    if fs.len() != 4 || ms.len() != 4 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(FraError::Domain(format!(
            "pool_regions needs [B, C, H, W] and [B, N, H, W], got {:?} and {:?}",
            fs, ms
        )));
    }
    let mut g = Graph::inference();
    let f = g.constant(feature_map.clone());
    let tokens = to_tokens(&mut g, f);
    let m = g.constant(heatmaps.clone());
    let probs = to_tokens(&mut g, m);
    let pooled = pool_tokens(&mut g, tokens, probs);
    Ok(g.value(pooled).clone())
}
