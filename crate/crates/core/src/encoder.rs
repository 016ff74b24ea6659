//! Adaptive ViT encoder.
//!
//! Frames are patch-embedded, share one learnable position table and are
//! concatenated as `[train_1, …, train_m, test]`. A standard pre-norm ViT
//! ladder runs alongside an adaptive stream: each Adaptor block cross-attends
//! (zero-centered) from the adaptive stream into the state-embedded output of
//! the matching ViT layer.

use rand::Rng;

use crate::attention::{ffn, mhsa, zca, AttentionParams, FfnParams};
use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::layers::{LayerNorm, Linear};
use crate::numerics::{uniform, Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-frame supervision on the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetState {
    /// Gaussian center label, `grid × grid`.
    pub y: Tensor,
    /// Dense LTRB prior, `grid × grid × 4`.
    pub d: Tensor,
    pub is_test: bool,
}

impl TargetState {
    /// Label and prior for a frame whose target box is known.
    pub fn from_box(bbox: &BBox, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            y: gaussian_label(bbox, cfg, cfg.sigma_factor)?,
            d: ltrb_prior(bbox, cfg)?,
            is_test: false,
        })
    }

    /// All-zero state for the frame being searched.
    pub fn test(cfg: &ModelConfig) -> Self {
        Self {
            is_test: true,
            ..Self::empty(cfg)
        }
    }

    /// All-zero training state, used for a template slot with no content yet.
    pub fn empty(cfg: &ModelConfig) -> Self {
        let g = cfg.grid();
        Self {
            y: Tensor::zeros([g, g]),
            d: Tensor::zeros([g, g, 4]),
            is_test: false,
        }
    }
}

fn check_box(bbox: &BBox, cfg: &ModelConfig) -> Result<()> {
    if bbox.is_degenerate() {
        return Err(Error::DegenerateBox(format!("{bbox:?}")));
    }
    let side = cfg.frame_side as f64;
    if bbox.x2() <= 0.0 || bbox.y2() <= 0.0 || bbox.x >= side || bbox.y >= side {
        return Err(Error::Invalid(format!("{bbox:?} does not intersect the frame")));
    }
    Ok(())
}

/// Grid cell holding the box center, clamped to the grid.
pub fn center_cell(bbox: &BBox, cfg: &ModelConfig) -> (usize, usize) {
    let g = cfg.grid() as f64;
    let p = cfg.patch as f64;
    let (cx, cy) = bbox.center();
    let clamp = |v: f64| (v / p).floor().clamp(0.0, g - 1.0) as usize;
    (clamp(cy), clamp(cx))
}

/// `exp(-dist² / 2σ²)` over grid cells, peaking at 1 on the center cell,
/// with `σ = sigma_factor · sqrt(box area in cells)`.
pub fn gaussian_label(bbox: &BBox, cfg: &ModelConfig, sigma_factor: f64) -> Result<Tensor> {
    check_box(bbox, cfg)?;
    let g = cfg.grid();
    let p = cfg.patch as f64;
    let sigma = sigma_factor * (bbox.w * bbox.h).sqrt() / p;
    let (rc, cc) = center_cell(bbox, cfg);
    Ok(Tensor::from_fn([g, g], |i| {
        let (r, c) = ((i / g) as f64, (i % g) as f64);
        let d2 = (r - rc as f64).powi(2) + (c - cc as f64).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    }))
}

/// Signed distances from each cell center to the left, top, right and
/// bottom box edges, divided by the frame side.
pub fn ltrb_prior(bbox: &BBox, cfg: &ModelConfig) -> Result<Tensor> {
    check_box(bbox, cfg)?;
    let g = cfg.grid();
    let p = cfg.patch as f64;
    let side = cfg.frame_side as f64;
    let mut out = Tensor::zeros([g, g, 4]);
    let data = out.data_mut();
    for r in 0..g {
        for c in 0..g {
            let (xc, yc) = ((c as f64 + 0.5) * p, (r as f64 + 0.5) * p);
            let o = (r * g + c) * 4;
            data[o] = (xc - bbox.x) / side;
            data[o + 1] = (yc - bbox.y) / side;
            data[o + 2] = (bbox.x2() - xc) / side;
            data[o + 3] = (bbox.y2() - yc) / side;
        }
    }
    Ok(out)
}

/// Rearranges an `H×W×3` frame into `(h·w) × (p·p·3)` patch rows, row-major
/// over patches and over pixels within a patch.
pub fn patchify(frame: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let side = cfg.frame_side;
    if frame.shape() != [side, side, 3] {
        return crate::error::shape_err("patch_embed", frame.shape(), &[side, side, 3]);
    }
    let (p, g) = (cfg.patch, cfg.grid());
    let row_len = p * p * 3;
    let src = frame.data();
    let mut out = Vec::with_capacity(g * g * row_len);
    for pr in 0..g {
        for pc in 0..g {
            for y in pr * p..(pr + 1) * p {
                let start = (y * side + pc * p) * 3;
                out.extend_from_slice(&src[start..start + p * 3]);
            }
        }
    }
    Tensor::new([g * g, row_len], out)
}

#[derive(Clone, Copy, Debug)]
pub struct JseParams {
    pub fg: ParamId,
    pub prior: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct VitLayer {
    pub ln1: LayerNorm,
    pub attn: AttentionParams,
    pub ln2: LayerNorm,
    pub ffn: FfnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptorLayer {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub patch: Linear,
    pub pos: ParamId,
    pub jse: Option<JseParams>,
    pub vit: Vec<VitLayer>,
    pub adaptors: Vec<AdaptorLayer>,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let patch = Linear::new(store, rng, "enc.patch", cfg.patch * cfg.patch * 3, c);
        let pos = store.add("enc.pos", uniform(rng, [cfg.tokens_per_frame(), c], 0.02));
        let jse = cfg.use_jse.then(|| JseParams {
            fg: store.add("enc.jse.fg", uniform(rng, [1, c], 0.5)),
            prior: Linear::new(store, rng, "enc.jse.prior", 4, c),
        });
        let mut vit = Vec::with_capacity(cfg.layers);
        let mut adaptors = Vec::new();
        for j in 0..cfg.layers {
            vit.push(VitLayer {
                ln1: LayerNorm::new(store, &format!("enc.vit{j}.ln1"), c),
                attn: AttentionParams::new(store, rng, &format!("enc.vit{j}.attn"), c, cfg.heads)?,
                ln2: LayerNorm::new(store, &format!("enc.vit{j}.ln2"), c),
                ffn: FfnParams::new(store, rng, &format!("enc.vit{j}.ffn"), c, cfg.ffn_ratio)?,
            });
            if cfg.use_adaptor {
                adaptors.push(AdaptorLayer {
                    attn: AttentionParams::new(
                        store,
                        rng,
                        &format!("enc.adaptor{j}.zca"),
                        c,
                        cfg.heads,
                    )?,
                    ffn: FfnParams::new(store, rng, &format!("enc.adaptor{j}.ffn"), c, cfg.ffn_ratio)?,
                });
            }
        }
        Ok(Self {
            patch,
            pos,
            jse,
            vit,
            adaptors,
        })
    }
}

/// Linear projection of non-overlapping patches to `(h·w) × C` tokens.
pub fn patch_embed(
    t: &Tape,
    s: &ParamStore,
    frame: &Tensor,
    patch: &Linear,
    cfg: &ModelConfig,
) -> Result<Var> {
    let rows = t.constant(&patchify(frame, cfg)?);
    patch.forward(t, s, rows)
}

/// Adds the same position table to every frame's tokens and concatenates
/// the frames in the given order.
pub fn add_position(t: &Tape, frames: &[Var], pos: Var) -> Result<Var> {
    let ps = t.shape(pos);
    let mut blocks = Vec::with_capacity(frames.len());
    for f in frames {
        let fs = t.shape(*f);
        if fs != ps {
            return crate::error::shape_err("add_position", &fs, &ps);
        }
        blocks.push(t.add(*f, pos)?);
    }
    if blocks.is_empty() {
        return Err(Error::Invalid("add_position needs at least one frame".into()));
    }
    t.concat_rows(&blocks)
}

/// Inverse of the concatenation in [`add_position`].
pub fn split_frames(t: &Tape, seq: Var, frames: usize) -> Result<Vec<Var>> {
    let shape = t.shape(seq);
    if frames == 0 || shape.len() != 2 || shape[0] % frames != 0 {
        return crate::error::shape_err("split_frames", &shape, &[frames]);
    }
    let n = shape[0] / frames;
    (0..frames).map(|i| t.slice_rows(seq, i * n, n)).collect()
}

fn check_states(states: &[TargetState], cfg: &ModelConfig) -> Result<()> {
    if states.len() != cfg.train_frames + 1 {
        return Err(Error::Invalid(format!(
            "expected {} target states, got {}",
            cfg.train_frames + 1,
            states.len()
        )));
    }
    let tests = states.iter().filter(|s| s.is_test).count();
    if tests != 1 || !states.last().is_some_and(|s| s.is_test) {
        return Err(Error::Invalid(format!(
            "exactly one test state, placed last, is required (found {tests})"
        )));
    }
    let g = cfg.grid();
    for st in states {
        if st.y.shape() != [g, g] || st.d.shape() != [g, g, 4] {
            return crate::error::shape_err("target state", st.d.shape(), &[g, g, 4]);
        }
    }
    Ok(())
}

/// The additive state embedding `[ψ…] + [φ…]` for the whole sequence.
///
/// `ψ = y ⊗ e_fg` per cell and `φ = FC(d)`; the test frame contributes a
/// zero label and a zero prior, so its block is the projection bias alone.
pub fn jse_embedding(
    t: &Tape,
    s: &ParamStore,
    states: &[TargetState],
    params: &JseParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    check_states(states, cfg)?;
    let hw = cfg.tokens_per_frame();
    let n = states.len() * hw;
    let mut y = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n * 4);
    for st in states {
        if st.is_test {
            y.extend(std::iter::repeat_n(0.0, hw));
            d.extend(std::iter::repeat_n(0.0, hw * 4));
        } else {
            y.extend_from_slice(st.y.data());
            d.extend_from_slice(st.d.data());
        }
    }
    let y = t.constant(&Tensor::new([n, 1], y)?);
    let d = t.constant(&Tensor::new([n, 4], d)?);
    let psi = t.matmul(y, t.param(s, params.fg))?;
    let phi = params.prior.forward(t, s, d)?;
    t.add(psi, phi)
}

/// `F + [ψ…] + [φ…]`.
pub fn jse(
    t: &Tape,
    s: &ParamStore,
    features: Var,
    states: &[TargetState],
    params: &JseParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    let e = jse_embedding(t, s, states, params, cfg)?;
    let (fs, es) = (t.shape(features), t.shape(e));
    if fs != es {
        return crate::error::shape_err("jse", &fs, &es);
    }
    t.add(features, e)
}

/// Pre-norm ViT layer with standard attention.
pub fn vit_layer(t: &Tape, s: &ParamStore, x: Var, p: &VitLayer, act: Activation) -> Result<Var> {
    let h = p.ln1.forward(t, s, x)?;
    let a = mhsa(t, s, h, &p.attn)?;
    let x = t.add(x, a)?;
    let h = p.ln2.forward(t, s, x)?;
    let f = ffn(t, s, h, &p.ffn, act)?;
    t.add(x, f)
}

/// Residual zero-centered cross-attention from `adaptive` into `vit`,
/// followed by a residual FFN.
pub fn adaptor_layer(
    t: &Tape,
    s: &ParamStore,
    adaptive: Var,
    vit: Var,
    p: &AdaptorLayer,
    act: Activation,
) -> Result<Var> {
    let a = zca(t, s, adaptive, vit, vit, &p.attn)?;
    let x = t.add(adaptive, a)?;
    let f = ffn(t, s, x, &p.ffn, act)?;
    t.add(x, f)
}

/// Intermediate outputs of one encoder pass.
pub struct EncoderOutput {
    /// `F^L`, shape `T × C` with `T = (m+1)·h·w`.
    pub features: Var,
    /// Sequence after patch embedding and position addition.
    pub embedded: Var,
    /// Position table leaf, exposed for structural checks.
    pub pos: Var,
}

/// Runs the encoder on `m` training frames followed by the test frame.
///
/// With the Adaptor enabled the result is the adaptive stream `F^L_avit`.
/// Without it, the state embedding is added in front of every ViT layer and
/// the last ViT output is returned.
pub fn avit_encode(
    t: &Tape,
    s: &ParamStore,
    frames: &[&Tensor],
    states: &[TargetState],
    params: &EncoderParams,
    cfg: &ModelConfig,
) -> Result<EncoderOutput> {
    if frames.len() != cfg.train_frames + 1 {
        return Err(Error::Invalid(format!(
            "expected {} frames, got {}",
            cfg.train_frames + 1,
            frames.len()
        )));
    }
    check_states(states, cfg)?;
    let act: Activation = cfg.activation.into();
    let tokens = frames
        .iter()
        .map(|f| patch_embed(t, s, f, &params.patch, cfg))
        .collect::<Result<Vec<_>>>()?;
    let pos = t.param(s, params.pos);
    let embedded = add_position(t, &tokens, pos)?;
    let emb = match &params.jse {
        Some(j) => Some(jse_embedding(t, s, states, j, cfg)?),
        None => None,
    };
    let with_state = |x: Var| -> Result<Var> {
        match emb {
            Some(e) => t.add(x, e),
            None => Ok(x),
        }
    };

    let features = if params.adaptors.is_empty() {
        let mut x = embedded;
        for layer in &params.vit {
            x = vit_layer(t, s, with_state(x)?, layer, act)?;
        }
        x
    } else {
        let mut vit = embedded;
        let mut adaptive = with_state(embedded)?;
        for (layer, adaptor) in params.vit.iter().zip(&params.adaptors) {
            vit = vit_layer(t, s, vit, layer, act)?;
            let vit_hat = with_state(vit)?;
            adaptive = adaptor_layer(t, s, adaptive, vit_hat, adaptor, act)?;
        }
        adaptive
    };
    Ok(EncoderOutput {
        features,
        embedded,
        pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_cell_clamps() {
        let cfg = ModelConfig::desk();
        let b = BBox::new(70.0, -5.0, 10.0, 8.0);
        assert_eq!(center_cell(&b, &cfg), (0, 8));
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let cfg = ModelConfig::desk();
        assert!(matches!(
            gaussian_label(&BBox::new(1.0, 1.0, 0.0, 3.0), &cfg, 0.25),
            Err(Error::DegenerateBox(_))
        ));
        assert!(ltrb_prior(&BBox::new(1.0, 1.0, 3.0, 0.0), &cfg).is_err());
        assert!(ltrb_prior(&BBox::new(100.0, 1.0, 3.0, 3.0), &cfg).is_err());
    }

    #[test]
    fn states_require_single_trailing_test() {
        let cfg = ModelConfig::toy();
        let train = TargetState::empty(&cfg);
        let test = TargetState::test(&cfg);
        assert!(check_states(&[train.clone(), test.clone()], &cfg).is_ok());
        assert!(check_states(&[test.clone(), test.clone()], &cfg).is_err());
        assert!(check_states(&[test, train.clone()], &cfg).is_err());
        assert!(check_states(&[train], &cfg).is_err());
    }
}
