//! Model predictor: the dense-fusion decoder that turns encoded features into
//! target-model weights, the target model itself, and the regression and
//! classification heads.

use std::rc::Rc;

use rand::Rng;

use crate::attention::{attention, ffn, zca, zsa, AttentionParams, Centering, FfnParams};
use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::layers::{LayerNorm, Linear};
use crate::numerics::{uniform, Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub zsa: AttentionParams,
    pub zca: AttentionParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct PlainDecoderLayer {
    pub cross: AttentionParams,
    pub ln1: LayerNorm,
    pub ffn: FfnParams,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub enum DecoderKind {
    DenseFusion(Vec<DecoderLayer>),
    Plain(Vec<PlainDecoderLayer>),
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Initial learnable query `e⁰_w`, `1 × C`.
    pub query: ParamId,
    pub kind: DecoderKind,
    /// `D·C → C` for the dense-fusion decoder, `C → C` for the plain one.
    pub fusion: Linear,
    pub norm: LayerNorm,
}

impl DecoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        let d = cfg.decoder_layers;
        if d < 1 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let query = store.add("dec.query", uniform(rng, [1, c], 0.5));
        let (kind, fusion_in) = if cfg.plain_decoder {
            let layers = (0..d)
                .map(|i| {
                    Ok(PlainDecoderLayer {
                        cross: AttentionParams::new(store, rng, &format!("dec{i}.cross"), c, cfg.heads)?,
                        ln1: LayerNorm::new(store, &format!("dec{i}.ln1"), c),
                        ffn: FfnParams::new(store, rng, &format!("dec{i}.ffn"), c, cfg.ffn_ratio)?,
                        ln2: LayerNorm::new(store, &format!("dec{i}.ln2"), c),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (DecoderKind::Plain(layers), c)
        } else {
            let layers = (0..d)
                .map(|i| {
                    Ok(DecoderLayer {
                        zsa: AttentionParams::new(store, rng, &format!("dec{i}.zsa"), c, cfg.heads)?,
                        zca: AttentionParams::new(store, rng, &format!("dec{i}.zca"), c, cfg.heads)?,
                        ffn: FfnParams::new(store, rng, &format!("dec{i}.ffn"), c, cfg.ffn_ratio)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (DecoderKind::DenseFusion(layers), d * c)
        };
        Ok(Self {
            query,
            kind,
            fusion: Linear::new(store, rng, "dec.fusion", fusion_in, c),
            norm: LayerNorm::new(store, "dec.norm", c),
        })
    }
}

/// One dense-fusion decoder layer:
/// `F̂ = F + ZSA(F)`, `ê = e + ZCA(e, F̂, F̂)`, `e' = ê + FFN(ê)`.
pub fn df_dec_layer(
    t: &Tape,
    s: &ParamStore,
    features: Var,
    query: Var,
    p: &DecoderLayer,
    act: Activation,
) -> Result<Var> {
    let sa = zsa(t, s, features, &p.zsa)?;
    let f_hat = t.add(features, sa)?;
    let ca = zca(t, s, query, f_hat, f_hat, &p.zca)?;
    let e_hat = t.add(query, ca)?;
    let f = ffn(t, s, e_hat, &p.ffn, act)?;
    t.add(e_hat, f)
}

/// Decodes `T × C` features into the `1 × C` target-model weights.
///
/// Dense fusion: `w = LN(FC([e¹, …, e^D]))`. Plain: post-norm layers with
/// standard cross-attention, `w = LN(FC(e^D))`.
pub fn df_dec(
    t: &Tape,
    s: &ParamStore,
    features: Var,
    params: &DecoderParams,
    act: Activation,
) -> Result<Var> {
    let fs = t.shape(features);
    let c = s.get(params.query).cols();
    if fs.len() != 2 || fs[1] != c {
        return crate::error::shape_err("df_dec", &fs, &[c]);
    }
    let mut e = t.param(s, params.query);
    let fused = match &params.kind {
        DecoderKind::DenseFusion(layers) => {
            let mut outs = Vec::with_capacity(layers.len());
            for layer in layers {
                e = df_dec_layer(t, s, features, e, layer, act)?;
                outs.push(e);
            }
            if outs.len() == 1 {
                outs[0]
            } else {
                t.concat_cols(&outs)?
            }
        }
        DecoderKind::Plain(layers) => {
            for layer in layers {
                let a = attention(t, s, e, features, features, &layer.cross, Centering::Standard)?;
                let x = t.add(e, a)?;
                let x = layer.ln1.forward(t, s, x)?;
                let f = ffn(t, s, x, &layer.ffn, act)?;
                let x = t.add(x, f)?;
                e = layer.ln2.forward(t, s, x)?;
            }
            e
        }
    };
    let w = params.fusion.forward(t, s, fused)?;
    params.norm.forward(t, s, w)
}

/// Per-token inner product of `w` with the features: a 1×1 convolution
/// over the token grid, `T × 1`.
pub fn target_model(t: &Tape, w: Var, features: Var) -> Result<Var> {
    let (ws, fs) = (t.shape(w), t.shape(features));
    if ws.len() != 2 || ws[0] != 1 || fs.len() != 2 || ws[1] != fs[1] {
        return crate::error::shape_err("target_model", &ws, &fs);
    }
    let wt = t.transpose(w)?;
    t.matmul(features, wt)
}

/// 3×3 convolution with zero padding 1 over a `g × g` token grid stored as
/// `(g·g) × C_in` rows.
#[derive(Clone, Copy, Debug)]
pub struct Conv3x3 {
    /// `(9·C_in) × C_out`, rows ordered by kernel row, kernel column, channel.
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3 {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        let fan_in = 9 * c_in;
        let bound = (6.0 / (fan_in + c_out) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, [fan_in, c_out], bound)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([c_out])),
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var, grid: usize) -> Result<Var> {
        let xs = t.shape(x);
        if xs != [grid * grid, self.c_in] {
            return crate::error::shape_err("conv3x3", &xs, &[grid * grid, self.c_in]);
        }
        let cols = t.gather(x, im2col_index(grid, self.c_in), vec![grid * grid, 9 * self.c_in])?;
        let y = t.matmul(cols, t.param(s, self.weight))?;
        t.add_row(y, t.param(s, self.bias))
    }
}

/// Source offsets for a 3×3, padding-1 patch gather; `None` marks padding.
pub fn im2col_index(grid: usize, c_in: usize) -> Rc<Vec<Option<usize>>> {
    let g = grid as isize;
    let mut idx = Vec::with_capacity(grid * grid * 9 * c_in);
    for r in 0..g {
        for c in 0..g {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (sr, sc) = (r + dr, c + dc);
                    let inside = (0..g).contains(&sr) && (0..g).contains(&sc);
                    for ch in 0..c_in {
                        idx.push(inside.then(|| ((sr * g + sc) as usize) * c_in + ch));
                    }
                }
            }
        }
    }
    Rc::new(idx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Regression,
    Classification,
}

impl Branch {
    pub fn out_channels(self) -> usize {
        match self {
            Branch::Regression => 4,
            Branch::Classification => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadBranch {
    pub transform: Linear,
    pub convs: Vec<Conv3x3>,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub regression: HeadBranch,
    pub classification: HeadBranch,
}

/// Channel plan `C → C/2 → C/4 → C/4 → C/4 → out`.
pub fn head_channels(width: usize, out: usize) -> [usize; 6] {
    let (h, q) = ((width / 2).max(1), (width / 4).max(1));
    [width, h, q, q, q, out]
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let mut branch = |name: &str, b: Branch| {
            let ch = head_channels(cfg.width, b.out_channels());
            HeadBranch {
                transform: Linear::new(store, rng, &format!("{name}.fc"), cfg.width, cfg.width),
                convs: (0..5)
                    .map(|i| Conv3x3::new(store, rng, &format!("{name}.conv{i}"), ch[i], ch[i + 1]))
                    .collect(),
            }
        };
        let regression = branch("head.reg", Branch::Regression);
        let classification = branch("head.cls", Branch::Classification);
        let last = regression.convs[4].bias;
        let b = cfg.reg_bias_init.exp_m1().ln();
        store.get_mut(last).data_mut().fill(b);
        Self {
            regression,
            classification,
        }
    }

    pub fn branch(&self, b: Branch) -> &HeadBranch {
        match b {
            Branch::Regression => &self.regression,
            Branch::Classification => &self.classification,
        }
    }
}

/// Branch transform of `w`, token gate `h(w_b, F)`, gated features through
/// the five-layer convolution stack.
///
/// The gate is the target-model response scaled by `1/√C`. Returns
/// `(g·g) × 4` positive LTRB distances (softplus) for regression or a
/// `(g·g) × 1` score map for classification.
pub fn head_forward(
    t: &Tape,
    s: &ParamStore,
    w: Var,
    test_features: Var,
    params: &HeadParams,
    branch: Branch,
    cfg: &ModelConfig,
) -> Result<Var> {
    let g = cfg.grid();
    let fs = t.shape(test_features);
    if fs != [g * g, cfg.width] {
        return crate::error::shape_err("head_forward", &fs, &[g * g, cfg.width]);
    }
    let p = params.branch(branch);
    let wb = p.transform.forward(t, s, w)?;
    let gate = t.scale(target_model(t, wb, test_features)?, 1.0 / (cfg.width as f64).sqrt());
    let mut x = t.scale_rows(test_features, gate)?;
    let act: Activation = cfg.activation.into();
    for (i, conv) in p.convs.iter().enumerate() {
        x = conv.forward(t, s, x, g)?;
        if i + 1 < p.convs.len() {
            x = t.activation(x, act);
        }
    }
    Ok(match branch {
        Branch::Regression => t.softplus(x),
        Branch::Classification => x,
    })
}

/// Argmax of a flat score map, lowest row-major index on ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in scores.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *v > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Box implied by cell `(row, col)` and its LTRB distances (fractions of the
/// frame side), in pixel coordinates of the network input.
pub fn cell_box(row: usize, col: usize, ltrb: &[f64], cfg: &ModelConfig) -> BBox {
    let p = cfg.patch as f64;
    let side = cfg.frame_side as f64;
    let (xc, yc) = ((col as f64 + 0.5) * p, (row as f64 + 0.5) * p);
    BBox::from_corners(
        xc - ltrb[0] * side,
        yc - ltrb[1] * side,
        xc + ltrb[2] * side,
        yc + ltrb[3] * side,
    )
}

/// Picks the highest-scoring cell and rebuilds its box. The returned score is
/// the raw map value and may exceed 1.
pub fn decode_bbox(score_map: &Tensor, ltrb_map: &Tensor, cfg: &ModelConfig) -> Result<(BBox, f64, (usize, usize))> {
    let g = cfg.grid();
    if score_map.numel() != g * g || ltrb_map.numel() != g * g * 4 {
        return crate::error::shape_err("decode_bbox", score_map.shape(), ltrb_map.shape());
    }
    let i = argmax(score_map.data()).ok_or_else(|| Error::Invalid("score map has no finite entry".into()))?;
    let (r, c) = (i / g, i % g);
    let b = cell_box(r, c, &ltrb_map.data()[i * 4..i * 4 + 4], cfg);
    Ok((b, score_map.data()[i], (r, c)))
}
