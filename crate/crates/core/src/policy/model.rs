use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::nn::{
    attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward,
    LnCache,
};
use super::PolicyError;
use crate::minilang::{TokenId, Vocabulary};
use crate::scalar::Scalar;

/// Architecture and watermark shape of a policy network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    /// Context window width `c`.
    pub context: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Recorded for completeness; the forward pass applies no dropout.
    pub dropout: f64,
    /// Green-list ratio the policy was trained for.
    pub gamma: f64,
    /// Bias strength the policy was trained for.
    pub delta: f64,
}

impl PolicyConfig {
    /// Small network that trains in minutes on one CPU.
    pub fn desk() -> Self {
        Self {
            vocab_size: Vocabulary::standard().len(),
            context: 4,
            d_model: 64,
            layers: 2,
            heads: 4,
            ff: 256,
            dropout: 0.0,
            gamma: 0.5,
            delta: 2.0,
        }
    }

    /// Full-size configuration (6 layers, 8 heads, width 512).
    pub fn full() -> Self {
        Self { d_model: 512, layers: 6, heads: 8, ff: 2048, dropout: 0.2, ..Self::desk() }
    }

    /// Output width: gate logit followed by one logit per token.
    pub fn output_dim(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let ok = self.vocab_size > 1
            && self.context >= 1
            && self.d_model >= 1
            && self.heads >= 1
            && self.d_model % self.heads == 0
            && self.ff >= 1
            && self.gamma > 0.0
            && self.gamma < 1.0
            && self.delta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(PolicyError::InvalidConfig(format!("{self:?}")))
        }
    }

    pub(crate) fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let (v, c, d, f) = (self.vocab_size, self.context, self.d_model, self.ff);
        let mut shapes = vec![("tok_emb".to_string(), v, d), ("pos_emb".to_string(), c, d)];
        for l in 0..self.layers {
            let p = |s: &str| format!("block{l}.{s}");
            shapes.extend([
                (p("ln1.g"), 1, d),
                (p("ln1.b"), 1, d),
                (p("wq"), d, d),
                (p("bq"), 1, d),
                (p("wk"), d, d),
                (p("bk"), 1, d),
                (p("wv"), d, d),
                (p("bv"), 1, d),
                (p("wo"), d, d),
                (p("bo"), 1, d),
                (p("ln2.g"), 1, d),
                (p("ln2.b"), 1, d),
                (p("w1"), d, f),
                (p("b1"), 1, f),
                (p("w2"), f, d),
                (p("b2"), 1, d),
            ]);
        }
        shapes.extend([
            ("lnf.g".to_string(), 1, d),
            ("lnf.b".to_string(), 1, d),
            ("w_out".to_string(), d, v + 1),
            ("b_out".to_string(), 1, v + 1),
        ]);
        shapes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self { name: name.into(), rows, cols, data: vec![S::zero(); rows * cols] }
    }
}

const BLOCK_TENSORS: usize = 16;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const BQ: usize = 3;
const WK: usize = 4;
const BK: usize = 5;
const WV: usize = 6;
const BV: usize = 7;
const WO: usize = 8;
const BO: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;
const W1: usize = 12;
const B1: usize = 13;
const W2: usize = 14;
const B2: usize = 15;

/// Weights of the watermark policy: a pre-norm transformer encoder over the
/// context window whose last position is projected to `|V| + 1` outputs.
/// The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<S> {
    pub config: PolicyConfig,
    pub tensors: Vec<Tensor<S>>,
}

/// Initial scale of the green-logit head relative to the other projections.
pub const GREEN_HEAD_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Gaussian weights everywhere. The green-logit columns of the output
    /// projection start at [`GREEN_HEAD_SCALE`] of the usual scale so that the
    /// first green lists come from the keyed noise, not from accidental
    /// per-token preferences that would bias detection on unwatermarked text.
    Random,
    /// Like `Random` but with a zero output projection, so `w_φ = 0` and `l_φ = 0`.
    ZeroOutput,
}

impl<S: Scalar> PolicyParams<S> {
    pub fn zeros(config: PolicyConfig) -> Self {
        let tensors = config.tensor_shapes().into_iter().map(|(n, r, c)| Tensor::zeros(n, r, c)).collect();
        Self { config, tensors }
    }

    pub fn init(config: PolicyConfig, init: Init, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_idx = p.tensors.len() - 2;
        for (i, t) in p.tensors.iter_mut().enumerate() {
            let name = t.name.as_str();
            let std = if name.ends_with(".g") {
                for x in t.data.iter_mut() {
                    *x = S::one();
                }
                continue;
            } else if t.rows == 1 {
                continue;
            } else if name.ends_with("_emb") {
                0.5
            } else if i == out_idx && init == Init::ZeroOutput {
                continue;
            } else {
                1.0 / (t.rows as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            for x in t.data.iter_mut() {
                *x = S::of(normal.sample(&mut rng));
            }
        }
        if init == Init::Random {
            let out = &mut p.tensors[out_idx];
            let cols = out.cols;
            for (i, x) in out.data.iter_mut().enumerate() {
                if i % cols != 0 {
                    *x *= S::of(GREEN_HEAD_SCALE);
                }
            }
        }
        Ok(p)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: S) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: S) {
        for t in &mut self.tensors {
            for x in t.data.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> S {
        self.tensors.iter().flat_map(|t| t.data.iter()).map(|&x| x * x).sum::<S>().sqrt()
    }

    /// Hash of config and the f64 widening of every parameter.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            for x in &t.data {
                h.update(x.to_f64_lossless().to_le_bytes());
            }
        }
        h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<T: Scalar>(&self) -> PolicyParams<T> {
        PolicyParams {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                    data: t.data.iter().map(|x| T::of(x.to_f64_lossless())).collect(),
                })
                .collect(),
        }
    }

    fn block(&self, l: usize, which: usize) -> &[S] {
        &self.tensors[2 + l * BLOCK_TENSORS + which].data
    }

    fn tail(&self, offset_from_end: usize) -> usize {
        self.tensors.len() - offset_from_end
    }
}

/// Policy output for one context window.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput<S> {
    /// Gate logit `w_φ`.
    pub w_phi: S,
    /// Green-selection logits `l_φ`, one per token.
    pub l_phi: Vec<S>,
}

#[derive(Clone, Debug)]
struct BlockCache<S> {
    ln1: LnCache<S>,
    a: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    mixed: Vec<S>,
    ln2: LnCache<S>,
    b: Vec<S>,
    pre: Vec<S>,
    act: Vec<S>,
}

/// Activations retained by [`forward_cached`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    ids: Vec<TokenId>,
    blocks: Vec<BlockCache<S>>,
    lnf: LnCache<S>,
    feat: Vec<S>,
}

fn check_window(config: &PolicyConfig, ctx: &[TokenId]) -> Result<(), PolicyError> {
    if ctx.len() != config.context {
        return Err(PolicyError::ShapeMismatch { expected: config.context, found: ctx.len() });
    }
    if let Some(bad) = ctx.iter().find(|t| t.index() >= config.vocab_size) {
        return Err(PolicyError::InvalidToken(*bad));
    }
    Ok(())
}

pub fn forward<S: Scalar>(params: &PolicyParams<S>, ctx: &[TokenId]) -> Result<PolicyOutput<S>, PolicyError> {
    forward_cached(params, ctx).map(|(o, _)| o)
}

pub fn forward_cached<S: Scalar>(
    params: &PolicyParams<S>,
    ctx: &[TokenId],
) -> Result<(PolicyOutput<S>, ForwardCache<S>), PolicyError> {
    let cfg = &params.config;
    check_window(cfg, ctx)?;
    let (n, d, f, heads) = (cfg.context, cfg.d_model, cfg.ff, cfg.heads);
    let tok = &params.tensors[0].data;
    let pos = &params.tensors[1].data;
    let mut x = Vec::with_capacity(n * d);
    for (i, t) in ctx.iter().enumerate() {
        let e = &tok[t.index() * d..(t.index() + 1) * d];
        x.extend(e.iter().zip(&pos[i * d..(i + 1) * d]).map(|(&a, &b)| a + b));
    }
    let mut blocks = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |w| params.block(l, w);
        let (a, ln1) = layer_norm(&x, n, d, p(LN1_G), p(LN1_B));
        let q = linear(&a, n, d, p(WQ), p(BQ), d);
        let k = linear(&a, n, d, p(WK), p(BK), d);
        let v = linear(&a, n, d, p(WV), p(BV), d);
        let (mixed, probs) = attention(&q, &k, &v, n, d, heads);
        let o = linear(&mixed, n, d, p(WO), p(BO), d);
        let x_mid: Vec<S> = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
        let (b, ln2) = layer_norm(&x_mid, n, d, p(LN2_G), p(LN2_B));
        let pre = linear(&b, n, d, p(W1), p(B1), f);
        let act: Vec<S> = pre.iter().map(|&z| gelu(z)).collect();
        let ffn = linear(&act, n, f, p(W2), p(B2), d);
        let x_out: Vec<S> = x_mid.iter().zip(&ffn).map(|(&a, &b)| a + b).collect();
        blocks.push(BlockCache { ln1, a, q, k, v, probs, mixed, ln2, b, pre, act });
        x = x_out;
    }
    let last = x[(n - 1) * d..].to_vec();
    let lnf_g = &params.tensors[params.tail(4)].data;
    let lnf_b = &params.tensors[params.tail(3)].data;
    let (feat, lnf) = layer_norm(&last, 1, d, lnf_g, lnf_b);
    let w_out = &params.tensors[params.tail(2)].data;
    let b_out = &params.tensors[params.tail(1)].data;
    let out = linear(&feat, 1, d, w_out, b_out, cfg.output_dim());
    let output = PolicyOutput { w_phi: out[0], l_phi: out[1..].to_vec() };
    Ok((output, ForwardCache { ids: ctx.to_vec(), blocks, lnf, feat }))
}

/// Accumulates into `grads` the gradient of a scalar whose derivatives with
/// respect to `w_φ` and `l_φ` are `d_w` and `d_l`.
pub fn backward<S: Scalar>(
    params: &PolicyParams<S>,
    cache: &ForwardCache<S>,
    d_w: S,
    d_l: &[S],
    grads: &mut PolicyParams<S>,
) {
    let cfg = &params.config;
    let (n, d, f, heads) = (cfg.context, cfg.d_model, cfg.ff, cfg.heads);
    let mut d_out = Vec::with_capacity(cfg.output_dim());
    d_out.push(d_w);
    d_out.extend_from_slice(d_l);

    let (wo_i, bo_i, g_i, b_i) = (params.tail(2), params.tail(1), params.tail(4), params.tail(3));
    let d_feat = {
        let (head, rest) = grads.tensors.split_at_mut(bo_i);
        linear_backward(
            &cache.feat,
            1,
            d,
            &params.tensors[wo_i].data,
            cfg.output_dim(),
            &d_out,
            &mut head[wo_i].data,
            &mut rest[0].data,
        )
    };
    let d_last = {
        let (head, rest) = grads.tensors.split_at_mut(b_i);
        layer_norm_backward(&cache.lnf, 1, d, &params.tensors[g_i].data, &d_feat, &mut head[g_i].data, &mut rest[0].data)
    };
    let mut dx = vec![S::zero(); n * d];
    dx[(n - 1) * d..].copy_from_slice(&d_last);

    for l in (0..cfg.layers).rev() {
        let c = &cache.blocks[l];
        let base = 2 + l * BLOCK_TENSORS;
        let p = |w: usize| params.tensors[base + w].data.as_slice();
        let g = &mut grads.tensors[base..base + BLOCK_TENSORS];
        // Feed-forward branch.
        let (dw2, db2) = split2(g, W2, B2);
        let d_act = linear_backward(&c.act, n, f, p(W2), d, &dx, dw2, db2);
        let d_pre: Vec<S> = d_act.iter().zip(&c.pre).map(|(&g, &z)| g * gelu_grad(z)).collect();
        let (dw1, db1) = split2(g, W1, B1);
        let d_b = linear_backward(&c.b, n, d, p(W1), f, &d_pre, dw1, db1);
        let (dg2, dbeta2) = split2(g, LN2_G, LN2_B);
        let d_mid_ln = layer_norm_backward(&c.ln2, n, d, p(LN2_G), &d_b, dg2, dbeta2);
        let d_mid: Vec<S> = dx.iter().zip(&d_mid_ln).map(|(&a, &b)| a + b).collect();
        // Attention branch.
        let (dwo, dbo) = split2(g, WO, BO);
        let d_mixed = linear_backward(&c.mixed, n, d, p(WO), d, &d_mid, dwo, dbo);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, &c.probs, &d_mixed, n, d, heads);
        let mut d_a = vec![S::zero(); n * d];
        for (wi, bi, dy) in [(WQ, BQ, &dq), (WK, BK, &dk), (WV, BV, &dv)] {
            let (dw, db) = split2(g, wi, bi);
            let part = linear_backward(&c.a, n, d, p(wi), d, dy, dw, db);
            for (acc, v) in d_a.iter_mut().zip(part) {
                *acc += v;
            }
        }
        let (dg1, dbeta1) = split2(g, LN1_G, LN1_B);
        let d_in_ln = layer_norm_backward(&c.ln1, n, d, p(LN1_G), &d_a, dg1, dbeta1);
        dx = d_mid.iter().zip(&d_in_ln).map(|(&a, &b)| a + b).collect();
    }

    let (tok_g, pos_g) = {
        let (a, b) = grads.tensors.split_at_mut(1);
        (&mut a[0].data, &mut b[0].data)
    };
    for (i, t) in cache.ids.iter().enumerate() {
        for j in 0..d {
            tok_g[t.index() * d + j] += dx[i * d + j];
            pos_g[i * d + j] += dx[i * d + j];
        }
    }
}

/// Disjoint mutable access to two tensors of a block (`a < b`).
fn split2<S>(g: &mut [Tensor<S>], a: usize, b: usize) -> (&mut [S], &mut [S]) {
    debug_assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}
