//! Multi-head attention with optional zero-centering of queries and keys,
//! and the feed-forward block.
//!
//! Zero-centered attention subtracts, per head, the token-axis mean of the
//! projected queries and of the projected keys before the scaled dot product.
//! Values are not centered and no positional term is added.

use rand::Rng;

use crate::layers::Linear;
use crate::numerics::{Activation, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Centering {
    /// Queries and keys are mean-centered over tokens within each head.
    Zero,
    /// Plain scaled dot-product attention.
    Standard,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), width, width),
            k: Linear::new(store, rng, &format!("{name}.k"), width, width),
            v: Linear::new(store, rng, &format!("{name}.v"), width, width),
            out: Linear::new(store, rng, &format!("{name}.out"), width, width),
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Attention output plus the per-head `q × k` weight matrices.
pub struct AttentionTrace {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn attention_traced(
    t: &Tape,
    s: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams,
    centering: Centering,
) -> Result<AttentionTrace> {
    let (qs, ks, vs) = (t.shape(q), t.shape(k), t.shape(v));
    if qs.len() != 2 || qs[1] != p.width {
        return crate::error::shape_err("attention query", &qs, &[p.width]);
    }
    if ks.len() != 2 || ks[1] != p.width {
        return crate::error::shape_err("attention key", &ks, &[p.width]);
    }
    if vs != ks {
        return crate::error::shape_err("attention key/value", &ks, &vs);
    }
    let dk = p.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let qp = p.q.forward(t, s, q)?;
    let kp = p.k.forward(t, s, k)?;
    let vp = p.v.forward(t, s, v)?;

    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let mut qh = t.slice_cols(qp, h * dk, dk)?;
        let mut kh = t.slice_cols(kp, h * dk, dk)?;
        let vh = t.slice_cols(vp, h * dk, dk)?;
        if centering == Centering::Zero {
            qh = t.center_rows(qh)?;
            kh = t.center_rows(kh)?;
        }
        let kt = t.transpose(kh)?;
        let scores = t.matmul(qh, kt)?;
        let scores = t.scale(scores, scale);
        let w = t.softmax_rows(scores)?;
        heads.push(t.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        t.concat_cols(&heads)?
    };
    Ok(AttentionTrace {
        output: p.out.forward(t, s, cat)?,
        weights,
    })
}

pub fn attention(
    t: &Tape,
    s: &ParamStore,
    q: Var,
    k: Var,
    v: Var,
    p: &AttentionParams,
    centering: Centering,
) -> Result<Var> {
    Ok(attention_traced(t, s, q, k, v, p, centering)?.output)
}

/// Zero-centered cross-attention.
pub fn zca(t: &Tape, s: &ParamStore, q: Var, k: Var, v: Var, p: &AttentionParams) -> Result<Var> {
    attention(t, s, q, k, v, p, Centering::Zero)
}

/// Zero-centered self-attention: `zca(x, x, x)`.
pub fn zsa(t: &Tape, s: &ParamStore, x: Var, p: &AttentionParams) -> Result<Var> {
    zca(t, s, x, x, x, p)
}

/// Standard multi-head self-attention, used inside the backbone layers.
pub fn mhsa(t: &Tape, s: &ParamStore, x: Var, p: &AttentionParams) -> Result<Var> {
    attention(t, s, x, x, x, p, Centering::Standard)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub expand: Linear,
    pub contract: Linear,
    pub ratio: usize,
}

impl FfnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        ratio: usize,
    ) -> Result<Self> {
        if ratio < 1 {
            return Err(Error::Config(format!("{name}: FFN ratio must be >= 1")));
        }
        Ok(Self {
            expand: Linear::new(store, rng, &format!("{name}.expand"), width, width * ratio),
            contract: Linear::new(store, rng, &format!("{name}.contract"), width * ratio, width),
            ratio,
        })
    }
}

/// `contract(act(expand(x)))`; the caller adds the residual.
pub fn ffn(t: &Tape, s: &ParamStore, x: Var, p: &FfnParams, act: Activation) -> Result<Var> {
    let h = p.expand.forward(t, s, x)?;
    let h = t.activation(h, act);
    p.contract.forward(t, s, h)
}
