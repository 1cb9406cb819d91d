//! Transformer encoder stacks with windowed self-attention and relative
//! positional encoding.
//!
//! Each layer is two pre-normalized sub-layers whose residual branch starts
//! from the *normalized* input:
//!
//! ```text
//! a = LayerNorm(x) + Dropout(Dense(MultiHeadAttention(LayerNorm(x))))
//! y = LayerNorm(a) + Dropout(Dense(Dropout(ReLU(Dense(LayerNorm(a))))))
//! ```
//!
//! Position enters only through the attention scores. For query position
//! `i` and key position `j` on head `h`:
//!
//! ```text
//! score(i, j) = ((q_i + u_h) · k_j + (q_i + v_h) · r_h[clamp(i - j)]) / sqrt(head_dim)
//! ```
//!
//! where `u`, `v` are global content/position biases shared by all layers and
//! `r` is a per-layer table of learned embeddings indexed by the clamped
//! relative offset. Nothing depends on absolute position, so a window of
//! activations produces the same outputs wherever it sits in the sequence.

mod mask;

pub use mask::{build_mask, receptive_field, AttentionMask, Context, ReceptiveField};

use std::cell::Cell;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_linear, init_normal, Bound, ParamId, ParamStore};
use crate::tensor::{Graph, Rng, Tensor, Var};

/// Relative-offset clamp used when a mask side is unbounded.
pub const DEFAULT_UNBOUNDED_RELATIVE_OFFSET: usize = 32;

thread_local! {
    static SCORE_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Attention scores that entered a softmax on this thread since the last
/// reset. Masked-out entries are not counted.
pub fn score_evaluations() -> u64 {
    SCORE_EVALUATIONS.with(Cell::get)
}

pub fn reset_score_evaluations() {
    SCORE_EVALUATIONS.with(|c| c.set(0));
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub num_layers: usize,
    /// Width of the residual stream.
    pub model_dim: usize,
    pub ff_dim1: usize,
    /// Output width of the second feed-forward dense layer; must equal
    /// `model_dim` for the residual sum.
    pub ff_dim2: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub dropout_ratio: f64,
    pub mask: AttentionMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_relative_offset: Option<usize>,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// The large encoder layer: 512-wide inputs, 2048/1024 feed-forward,
    /// 8 heads of 64, dropout 0.1.
    pub fn large(num_layers: usize, mask: AttentionMask) -> Self {
        Self {
            input_dim: 512,
            num_layers,
            model_dim: 1024,
            ff_dim1: 2048,
            ff_dim2: 1024,
            num_heads: 8,
            head_dim: 64,
            dropout_ratio: 0.1,
            mask,
            max_relative_offset: None,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn attention_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn relative_offset_limit(&self) -> usize {
        self.max_relative_offset
            .or_else(|| self.mask.span())
            .unwrap_or(DEFAULT_UNBOUNDED_RELATIVE_OFFSET)
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("model_dim", self.model_dim),
            ("ff_dim1", self.ff_dim1),
            ("ff_dim2", self.ff_dim2),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{key}.{name}"), "must be positive"));
            }
        }
        if self.ff_dim2 != self.model_dim {
            return Err(Error::config(
                format!("{key}.ff_dim2"),
                format!("must equal model_dim ({}) for the residual sum", self.model_dim),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_ratio) {
            return Err(Error::config(format!("{key}.dropout_ratio"), "must lie in [0, 1)"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config(format!("{key}.layer_norm_eps"), "must be positive"));
        }
        Ok(())
    }
}

/// Parameter handles of one encoder layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub output_bias: ParamId,
    /// `[(2R+1) × heads·head_dim]`, row `k` holds offset `k - R`.
    pub relative: ParamId,
    pub ff_norm_gain: ParamId,
    pub ff_norm_bias: ParamId,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
}

/// Parameter handles of a whole encoder stack.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub input: ParamId,
    pub input_bias: ParamId,
    pub layers: Vec<LayerParams>,
    /// `[1 × heads·head_dim]` global biases.
    pub content_bias: ParamId,
    pub position_bias: ParamId,
    pub final_norm_gain: ParamId,
    pub final_norm_bias: ParamId,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.model_dim;
        let a = cfg.attention_dim();
        let width = 2 * cfg.relative_offset_limit() + 1;
        let mut rng = rng.fork(prefix);
        let input = store.add(format!("{prefix}.input.weight"), init_linear(&mut rng, cfg.input_dim, d));
        let input_bias = store.add(format!("{prefix}.input.bias"), Tensor::zeros([d]));
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = format!("{prefix}.layers.{l}");
                LayerParams {
                    attn_norm_gain: store.add(format!("{p}.attn_norm.gain"), Tensor::ones([d])),
                    attn_norm_bias: store.add(format!("{p}.attn_norm.bias"), Tensor::zeros([d])),
                    query: store.add(format!("{p}.attn.query"), init_linear(&mut rng, d, a)),
                    key: store.add(format!("{p}.attn.key"), init_linear(&mut rng, d, a)),
                    value: store.add(format!("{p}.attn.value"), init_linear(&mut rng, d, a)),
                    output: store.add(format!("{p}.attn.output"), init_linear(&mut rng, a, d)),
                    output_bias: store.add(format!("{p}.attn.output_bias"), Tensor::zeros([d])),
                    relative: store.add(
                        format!("{p}.attn.relative"),
                        init_normal(&mut rng, &[width, a], 1.0 / (cfg.head_dim as f64).sqrt()),
                    ),
                    ff_norm_gain: store.add(format!("{p}.ff_norm.gain"), Tensor::ones([d])),
                    ff_norm_bias: store.add(format!("{p}.ff_norm.bias"), Tensor::zeros([d])),
                    ff1: store.add(format!("{p}.ff1.weight"), init_linear(&mut rng, d, cfg.ff_dim1)),
                    ff1_bias: store.add(format!("{p}.ff1.bias"), Tensor::zeros([cfg.ff_dim1])),
                    ff2: store.add(format!("{p}.ff2.weight"), init_linear(&mut rng, cfg.ff_dim1, cfg.ff_dim2)),
                    ff2_bias: store.add(format!("{p}.ff2.bias"), Tensor::zeros([cfg.ff_dim2])),
                }
            })
            .collect();
        Self {
            input,
            input_bias,
            layers,
            content_bias: store.add(format!("{prefix}.content_bias"), Tensor::zeros([1, a])),
            position_bias: store.add(format!("{prefix}.position_bias"), Tensor::zeros([1, a])),
            final_norm_gain: store.add(format!("{prefix}.final_norm.gain"), Tensor::ones([d])),
            final_norm_bias: store.add(format!("{prefix}.final_norm.bias"), Tensor::zeros([d])),
        }
    }
}

/// Scaled relative-position attention scores of one head, `[queries × keys]`.
///
/// `rel` is the head's `[(2·max_offset+1) × head_dim]` offset table; query row
/// `i` sits at key position `i + query_offset`. No mask is applied.
#[allow(clippy::too_many_arguments)]
pub fn attention_scores(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    rel: Var,
    content_bias: Var,
    position_bias: Var,
    query_offset: usize,
    max_offset: usize,
) -> Result<Var> {
    let head_dim = g.value(q).cols();
    let n_keys = g.value(k).rows();
    let qc = g.add_row(q, content_bias)?;
    let kt = g.transpose(k)?;
    let content = g.matmul(qc, kt)?;
    let qp = g.add_row(q, position_bias)?;
    let rt = g.transpose(rel)?;
    let per_offset = g.matmul(qp, rt)?;
    let position = g.relative_gather(per_offset, n_keys, query_offset, max_offset)?;
    let total = g.add(content, position)?;
    g.scale(total, 1.0 / (head_dim as f64).sqrt())
}

/// Per-layer context needed to run one layer: config, handles, bound vars.
pub struct LayerContext<'p> {
    pub cfg: &'p EncoderConfig,
    pub stack: &'p EncoderParams,
    pub layer: &'p LayerParams,
    pub bound: &'p Bound,
}

/// One encoder layer over `x: [L × model_dim]`, producing rows `queries`.
///
/// Keys and values come from every row of `x`; only the requested query rows
/// are computed. With `queries = 0..L` this is the ordinary full layer.
/// `dropout` carries the training stream; `None` means inference.
pub fn encoder_layer(
    g: &mut Graph<'_>,
    x: Var,
    queries: Range<usize>,
    ctx: &LayerContext<'_>,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    let LayerContext { cfg, stack, layer, bound } = *ctx;
    let (n, d) = (g.value(x).rows(), g.value(x).cols());
    if d != cfg.model_dim {
        return Err(Error::Shape {
            op: "encoder_layer",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![n, cfg.model_dim],
        });
    }
    let p = |id: ParamId| bound.var(id);
    let eps = cfg.layer_norm_eps;

    let h = g.layer_norm(x, p(layer.attn_norm_gain), p(layer.attn_norm_bias), eps)?;
    let hq = if queries == (0..n) { h } else { g.slice_rows(h, queries.clone())? };
    let q = g.matmul(hq, p(layer.query))?;
    let k = g.matmul(h, p(layer.key))?;
    let v = g.matmul(h, p(layer.value))?;

    let max_offset = cfg.relative_offset_limit();
    let window = cfg.mask.window(queries.start);
    let evaluated: usize = (0..queries.len()).map(|i| window.keys(i, n).len()).sum();

    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let cols = head * cfg.head_dim..(head + 1) * cfg.head_dim;
        let qh = g.slice_cols(q, cols.clone())?;
        let kh = g.slice_cols(k, cols.clone())?;
        let vh = g.slice_cols(v, cols.clone())?;
        let rh = g.slice_cols(p(layer.relative), cols.clone())?;
        let uh = g.slice_cols(p(stack.content_bias), cols.clone())?;
        let ph = g.slice_cols(p(stack.position_bias), cols)?;
        let scores = attention_scores(g, qh, kh, rh, uh, ph, queries.start, max_offset)?;
        let probs = g.masked_softmax(scores, window)?;
        heads.push(g.matmul(probs, vh)?);
    }
    SCORE_EVALUATIONS.with(|c| c.set(c.get() + (evaluated * cfg.num_heads) as u64));

    let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let o = g.matmul(attn, p(layer.output))?;
    let o = g.add_row(o, p(layer.output_bias))?;
    let o = apply_dropout(g, o, cfg.dropout_ratio, &mut dropout)?;
    let a = g.add(hq, o)?;

    let h2 = g.layer_norm(a, p(layer.ff_norm_gain), p(layer.ff_norm_bias), eps)?;
    let f = g.matmul(h2, p(layer.ff1))?;
    let f = g.add_row(f, p(layer.ff1_bias))?;
    let f = g.relu(f)?;
    let f = apply_dropout(g, f, cfg.dropout_ratio, &mut dropout)?;
    let f = g.matmul(f, p(layer.ff2))?;
    let f = g.add_row(f, p(layer.ff2_bias))?;
    let f = apply_dropout(g, f, cfg.dropout_ratio, &mut dropout)?;
    g.add(h2, f)
}

fn apply_dropout(g: &mut Graph<'_>, x: Var, ratio: f64, rng: &mut Option<&mut Rng>) -> Result<Var> {
    match rng {
        Some(r) => g.dropout(x, ratio, r, true),
        None => Ok(x),
    }
}

/// Input projection applied row by row: `[L × input_dim] → [L × model_dim]`.
pub fn input_projection(g: &mut Graph<'_>, x: Var, cfg: &EncoderConfig, params: &EncoderParams, bound: &Bound) -> Result<Var> {
    if g.value(x).cols() != cfg.input_dim {
        return Err(Error::Shape {
            op: "input_projection",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![g.value(x).rows(), cfg.input_dim],
        });
    }
    let h = g.matmul(x, bound.var(params.input))?;
    g.add_row(h, bound.var(params.input_bias))
}

/// Closing normalization of a non-empty stack.
pub fn final_norm(g: &mut Graph<'_>, x: Var, cfg: &EncoderConfig, params: &EncoderParams, bound: &Bound) -> Result<Var> {
    if cfg.num_layers == 0 {
        return Ok(x);
    }
    g.layer_norm(
        x,
        bound.var(params.final_norm_gain),
        bound.var(params.final_norm_bias),
        cfg.layer_norm_eps,
    )
}

/// Full encoder: input projection, `num_layers` layers sharing one mask,
/// closing layer norm.
pub fn encode(
    g: &mut Graph<'_>,
    x: Var,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    bound: &Bound,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    let mut h = input_projection(g, x, cfg, params, bound)?;
    let n = g.value(h).rows();
    for layer in &params.layers {
        let ctx = LayerContext {
            cfg,
            stack: params,
            layer,
            bound,
        };
        h = encoder_layer(g, h, 0..n, &ctx, dropout.as_deref_mut())?;
    }
    final_norm(g, h, cfg, params, bound)
}

/// Encodes a standalone feature matrix in inference mode.
pub fn encode_tensor(x: &Tensor, cfg: &EncoderConfig, params: &EncoderParams, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, store, false);
    let xv = g.constant_ref(x);
    let out = encode(&mut g, xv, cfg, params, &bound, None)?;
    Ok(g.value(out).clone())
}
