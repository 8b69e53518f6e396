//! Scale-wise (local) and patch-wise (global) multi-head attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, LayerNorm, Linear, Module};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::scale_token::ScaleTokenMode;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Duo,
    LocalOnly,
    GlobalOnly,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::LocalOnly, AttentionMode::GlobalOnly, AttentionMode::Duo];

    pub fn has_local(self) -> bool {
        self != AttentionMode::GlobalOnly
    }

    pub fn has_global(self) -> bool {
        self != AttentionMode::LocalOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Duo => "duo",
            AttentionMode::LocalOnly => "local_only",
            AttentionMode::GlobalOnly => "global_only",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode '{s}'")))
    }
}

/// Multi-head self-attention over the second-to-last axis with a fused
/// `W_qkv: [D, 3D]` projection and an output projection `W_o: [D, D]`.
pub struct MultiHeadAttention<T: Scalar> {
    pub qkv: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("D={dim} not divisible by n_h={heads}")));
    }
    Ok(())
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(MultiHeadAttention {
            qkv: Linear::new(rng, dim, 3 * dim),
            out: Linear::new(rng, dim, dim),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.out.d_out()
    }

    /// `x: [..., T, D]` → (`[..., T, D]`, weights `[..., n_h, T, T]`).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let d = self.dim();
        let h = self.heads;
        check_heads(d, h)?;
        if x.rank() < 2 || x.dim(x.rank() - 1) != d {
            return Err(Error::shape("attention", x.shape(), self.qkv.weight.shape()));
        }
        let lead = &x.shape()[..x.rank() - 2];
        let t = x.dim(x.rank() - 2);
        let b: usize = lead.iter().product();
        let dk = d / h;
        let qkv = self
            .qkv
            .forward(&x.reshape([b, t, d])?)?
            .reshape([b, t, 3, h, dk])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i: usize| qkv.narrow(0, i, 1)?.reshape([b, h, t, dk]);
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scale = T::one() / T::from_count(dk).sqrt();
        let weights = q.scale(scale).matmul(&k.transpose_last()?)?.softmax_lastdim()?;
        let ctx = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape([b, t, d])?;
        let y = self.out.forward(&ctx)?;
        let mut out_shape = lead.to_vec();
        out_shape.extend([t, d]);
        let mut w_shape = lead.to_vec();
        w_shape.extend([h, t, t]);
        Ok((y.reshape(out_shape)?, weights.reshape(w_shape)?))
    }
}

impl<T: Scalar> Module<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// `[n, N, T, D]`: every (sample, patch) slice is an independent sequence.
pub fn local_msa<T: Scalar>(x: &Tensor<T>, attn: &MultiHeadAttention<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.rank() != 4 {
        return Err(Error::invalid("local_msa", format!("expected [n, N, T, D], got {:?}", x.shape())));
    }
    attn.forward(x)
}

/// `[n, N+1, D]` with the CLS token at index 0. No norm, FFN or residual.
pub fn global_attention_layer<T: Scalar>(
    z: &Tensor<T>,
    attn: &MultiHeadAttention<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if z.rank() != 3 {
        return Err(Error::invalid("global_attention", format!("expected [n, N+1, D], got {:?}", z.shape())));
    }
    attn.forward(z)
}

pub struct FeedForward<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(rng, dim, hidden),
            fc2: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<T: Scalar> Module<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Pre-norm transformer block: `x' = x + LMSA(LN(x))`, `y = x' + FFN(LN(x'))`.
pub struct LocalBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> LocalBlock<T> {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(LocalBlock {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, heads)?,
            norm2: LayerNorm::new(dim),
            ffn: FeedForward::new(rng, dim, ffn_hidden),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a, weights) = local_msa(&self.norm1.forward(x)?, &self.attn)?;
        let x = x.add(&a)?;
        let y = x.add(&self.ffn.forward(&self.norm2.forward(&x)?)?)?;
        Ok((y, weights))
    }
}

impl<T: Scalar> Module<T> for LocalBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// `concat(x_s, tokens) + E_pos`: `[n, N, S, D]` and `[n, N, D]` → `[n, N, S+1, D]`.
pub fn prepend_scale_token<T: Scalar>(tokens: &Tensor<T>, x_s: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, patches, s, d) = (tokens.dim(0), tokens.dim(1), tokens.dim(2), tokens.dim(3));
    if x_s.shape() != [n, patches, d] || pos.shape() != [s + 1, d] {
        return Err(Error::shape("prepend_scale_token", tokens.shape(), x_s.shape()));
    }
    Tensor::concat(&[x_s.reshape([n, patches, 1, d])?, tokens.clone()], 2)?.add(pos)
}

/// Adds rows `1..=S` of the `[S+1, D]` table to tokens that carry no
/// prepended scale token, so each token keeps the same embedding row in
/// every mode.
pub fn embed_without_token<T: Scalar>(tokens: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    let s = tokens.dim(2);
    if pos.rank() != 2 || pos.dim(0) != s + 1 {
        return Err(Error::shape("embed_tokens", tokens.shape(), pos.shape()));
    }
    tokens.add(&pos.narrow(0, 1, s)?)
}

/// Per-patch token handed to global attention: `[n, N, T, D]` → `[n, N, D]`.
///
/// `s` is the multi-scale token length and `last_offset` the offset of the
/// last included stage inside it; a prepended token is detected from
/// `T == s + 1`.
pub fn extract_scale_tokens<T: Scalar>(
    y: &Tensor<T>,
    mode: ScaleTokenMode,
    s: usize,
    last_offset: usize,
) -> Result<Tensor<T>> {
    let (n, patches, t, d) = (y.dim(0), y.dim(1), y.dim(2), y.dim(3));
    let lead = match t {
        _ if t == s + 1 => 1,
        _ if t == s => 0,
        _ => return Err(Error::invalid("extract_scale_tokens", format!("length {t} for S={s}"))),
    };
    let pick = |i: usize| y.narrow(2, i, 1)?.reshape([n, patches, d]);
    match mode {
        ScaleTokenMode::Fused | ScaleTokenMode::Learnable => {
            if lead == 0 {
                return Err(Error::invalid("extract_scale_tokens", "mode expects a prepended token"));
            }
            pick(0)
        }
        ScaleTokenMode::FirstToken => pick(lead + last_offset),
        ScaleTokenMode::Average => y.narrow(2, lead, s)?.mean_axis(2),
    }
}
