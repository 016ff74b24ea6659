//! Registry of differentiable blocks checked against central finite
//! differences at toy shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{ffn, zca, zsa, AttentionParams, FfnParams};
use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::encoder::{
    adaptor_layer, avit_encode, gaussian_label, jse, patch_embed, vit_layer, AdaptorLayer, EncoderParams, JseParams,
    TargetState, VitLayer,
};
use crate::layers::{LayerNorm, Linear};
use crate::losses::{giou_loss_var, lbhinge_var, total_loss, LossConfig};
use crate::numerics::{grad_check, uniform, Activation, Fault, GradReport, ParamId, ParamStore, Tape, Tensor, Var};
use crate::predictor::{df_dec, df_dec_layer, head_forward, target_model, Branch, DecoderLayer, DecoderParams, HeadParams};
use crate::Result;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

/// Every registered block, in report order.
pub const BLOCKS: &[&str] = &[
    "zca",
    "zsa",
    "ffn",
    "layer_norm",
    "patch_embed",
    "jse",
    "vit_layer",
    "adaptor",
    "encoder",
    "dfdec_layer",
    "df_dec",
    "target_model",
    "reg_head",
    "cls_head",
    "lbhinge",
    "giou",
    "total_loss",
];

const C: usize = 8;

fn toy() -> ModelConfig {
    ModelConfig {
        layers: 1,
        ..ModelConfig::toy()
    }
}

/// `Σ r ⊙ out + ½ Σ out²` with fixed random `r`; exercises every output
/// entry with a distinct weight.
fn probe(t: &Tape, out: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = t.shape(out);
    let r = t.constant(&uniform(rng, shape, 1.0));
    let lin = t.sum(t.mul(out, r)?);
    let sq = t.scale(t.sum(t.mul(out, out)?), 0.5);
    t.add(lin, sq)
}

fn input(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: [usize; 2]) -> ParamId {
    store.add(name, uniform(rng, shape, 1.0))
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng, bound: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-bound..bound);
        }
    }
}

fn box_state(rng: &mut impl Rng, cfg: &ModelConfig) -> Result<(BBox, TargetState)> {
    let side = cfg.frame_side as f64;
    let b = BBox::new(
        rng.random_range(0.5..side / 2.0),
        rng.random_range(0.5..side / 2.0),
        rng.random_range(1.5..side / 2.0),
        rng.random_range(1.5..side / 2.0),
    );
    Ok((b, TargetState::from_box(&b, cfg)?))
}

fn states(rng: &mut impl Rng, cfg: &ModelConfig) -> Result<Vec<TargetState>> {
    let mut v = (0..cfg.train_frames)
        .map(|_| box_state(rng, cfg).map(|s| s.1))
        .collect::<Result<Vec<_>>>()?;
    v.push(TargetState::test(cfg));
    Ok(v)
}

fn frame(rng: &mut impl Rng, cfg: &ModelConfig) -> Tensor {
    let s = cfg.frame_side;
    uniform(rng, [s, s, 3], 1.0)
}

fn check<F>(store: &ParamStore, fault: Option<Fault>, f: F) -> Result<GradReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    grad_check(
        store,
        |t, s| {
            t.set_fault(fault);
            f(t, s)
        },
        EPS,
        TOL,
    )
}

/// Runs one block at one seed.
pub fn check_block(name: &str, seed: u64, fault: Option<Fault>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let cfg = toy();
    let act = Activation::Gelu;
    let probe_seed: u64 = rng.random();
    let pr = move || ChaCha8Rng::seed_from_u64(probe_seed);
    match name {
        "zca" => {
            let p = AttentionParams::new(&mut s, &mut rng, "a", C, 2)?;
            let (q, k, v) = (
                input(&mut s, &mut rng, "q", [3, C]),
                input(&mut s, &mut rng, "k", [4, C]),
                input(&mut s, &mut rng, "v", [4, C]),
            );
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = zca(t, s, t.param(s, q), t.param(s, k), t.param(s, v), &p)?;
                probe(t, o, &mut pr())
            })
        }
        "zsa" => {
            let p = AttentionParams::new(&mut s, &mut rng, "a", C, 2)?;
            let x = input(&mut s, &mut rng, "x", [4, C]);
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = zsa(t, s, t.param(s, x), &p)?;
                probe(t, o, &mut pr())
            })
        }
        "ffn" => {
            let p = FfnParams::new(&mut s, &mut rng, "f", C, 2)?;
            let x = input(&mut s, &mut rng, "x", [3, C]);
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = ffn(t, s, t.param(s, x), &p, act)?;
                probe(t, o, &mut pr())
            })
        }
        "layer_norm" => {
            let ln = LayerNorm::new(&mut s, "ln", C);
            let x = input(&mut s, &mut rng, "x", [3, C]);
            randomize(&mut s, &mut rng, 0.5);
            check(&s, fault, |t, s| {
                let o = ln.forward(t, s, t.param(s, x))?;
                probe(t, o, &mut pr())
            })
        }
        "patch_embed" => {
            let lin = Linear::new(&mut s, &mut rng, "patch", cfg.patch * cfg.patch * 3, C);
            randomize(&mut s, &mut rng, 0.2);
            let f = frame(&mut rng, &cfg);
            check(&s, fault, |t, s| {
                let o = patch_embed(t, s, &f, &lin, &cfg)?;
                probe(t, o, &mut pr())
            })
        }
        "jse" => {
            let p = JseParams {
                fg: s.add("fg", uniform(&mut rng, [1, C], 0.5)),
                prior: Linear::new(&mut s, &mut rng, "prior", 4, C),
            };
            let f = input(&mut s, &mut rng, "f", [cfg.total_tokens(), C]);
            randomize(&mut s, &mut rng, 0.2);
            let st = states(&mut rng, &cfg)?;
            check(&s, fault, |t, s| {
                let o = jse(t, s, t.param(s, f), &st, &p, &cfg)?;
                probe(t, o, &mut pr())
            })
        }
        "vit_layer" => {
            let p = VitLayer {
                ln1: LayerNorm::new(&mut s, "ln1", C),
                attn: AttentionParams::new(&mut s, &mut rng, "attn", C, 2)?,
                ln2: LayerNorm::new(&mut s, "ln2", C),
                ffn: FfnParams::new(&mut s, &mut rng, "ffn", C, 2)?,
            };
            let x = input(&mut s, &mut rng, "x", [5, C]);
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = vit_layer(t, s, t.param(s, x), &p, act)?;
                probe(t, o, &mut pr())
            })
        }
        "adaptor" => {
            let p = AdaptorLayer {
                attn: AttentionParams::new(&mut s, &mut rng, "zca", C, 2)?,
                ffn: FfnParams::new(&mut s, &mut rng, "ffn", C, 2)?,
            };
            let a = input(&mut s, &mut rng, "adaptive", [5, C]);
            let v = input(&mut s, &mut rng, "vit", [5, C]);
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = adaptor_layer(t, s, t.param(s, a), t.param(s, v), &p, act)?;
                probe(t, o, &mut pr())
            })
        }
        "encoder" => {
            let cfg = ModelConfig {
                layers: 2,
                ..ModelConfig::toy()
            };
            let p = EncoderParams::new(&mut s, &mut rng, &cfg)?;
            randomize(&mut s, &mut rng, 0.1);
            let frames: Vec<Tensor> = (0..=cfg.train_frames).map(|_| frame(&mut rng, &cfg)).collect();
            let st = states(&mut rng, &cfg)?;
            check(&s, fault, |t, s| {
                let refs: Vec<&Tensor> = frames.iter().collect();
                let o = avit_encode(t, s, &refs, &st, &p, &cfg)?;
                probe(t, o.features, &mut pr())
            })
        }
        "dfdec_layer" => {
            let p = DecoderLayer {
                zsa: AttentionParams::new(&mut s, &mut rng, "zsa", C, 2)?,
                zca: AttentionParams::new(&mut s, &mut rng, "zca", C, 2)?,
                ffn: FfnParams::new(&mut s, &mut rng, "ffn", C, 2)?,
            };
            let f = input(&mut s, &mut rng, "f", [5, C]);
            let e = input(&mut s, &mut rng, "e", [1, C]);
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = df_dec_layer(t, s, t.param(s, f), t.param(s, e), &p, act)?;
                probe(t, o, &mut pr())
            })
        }
        "df_dec" => {
            let p = DecoderParams::new(&mut s, &mut rng, &cfg)?;
            let f = input(&mut s, &mut rng, "f", [5, C]);
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = df_dec(t, s, t.param(s, f), &p, act)?;
                probe(t, o, &mut pr())
            })
        }
        "target_model" => {
            let w = input(&mut s, &mut rng, "w", [1, C]);
            let f = input(&mut s, &mut rng, "f", [5, C]);
            check(&s, fault, |t, s| {
                let o = target_model(t, t.param(s, w), t.param(s, f))?;
                probe(t, o, &mut pr())
            })
        }
        "reg_head" | "cls_head" => {
            let branch = if name == "reg_head" {
                Branch::Regression
            } else {
                Branch::Classification
            };
            let p = HeadParams::new(&mut s, &mut rng, &cfg);
            let w = input(&mut s, &mut rng, "w", [1, C]);
            let f = input(&mut s, &mut rng, "f", [cfg.tokens_per_frame(), C]);
            randomize(&mut s, &mut rng, 0.2);
            check(&s, fault, |t, s| {
                let o = head_forward(t, s, t.param(s, w), t.param(s, f), &p, branch, &cfg)?;
                probe(t, o, &mut pr())
            })
        }
        "lbhinge" => {
            let y = Tensor::from_fn([3, 3], |i| if i % 2 == 0 { rng.random_range(0.1..1.0) } else { 0.01 });
            let pred = s.add("pred", away_from_zero(&mut rng, [3, 3]));
            check(&s, fault, |t, s| lbhinge_var(t, t.param(s, pred), &y, 0.05))
        }
        "giou" => {
            let n = 4;
            let centers: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)))
                .collect();
            let ltrb = s.add("ltrb", Tensor::from_fn([n, 4], |_| rng.random_range(0.05..0.4)));
            let gt = BBox::new(
                rng.random_range(0.2..0.4),
                rng.random_range(0.2..0.4),
                rng.random_range(0.2..0.4),
                rng.random_range(0.2..0.4),
            );
            check(&s, fault, |t, s| giou_loss_var(t, t.param(s, ltrb), &centers, &gt))
        }
        "total_loss" => {
            let g = cfg.grid();
            let (b, _) = box_state(&mut rng, &cfg)?;
            let y = gaussian_label(&b, &cfg, 0.5)?;
            let score = s.add("score", away_from_zero(&mut rng, [g * g, 1]));
            let ltrb = s.add("ltrb", Tensor::from_fn([g * g, 4], |_| rng.random_range(0.05..0.5)));
            let lc = LossConfig::default();
            check(&s, fault, |t, s| {
                Ok(total_loss(t, t.param(s, score), &y, t.param(s, ltrb), &b, &cfg, &lc)?.total)
            })
        }
        other => Err(crate::Error::Invalid(format!("unknown block {other:?}"))),
    }
}

fn away_from_zero(rng: &mut impl Rng, shape: [usize; 2]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub tol: f64,
    pub blocks: Vec<BlockSummary>,
    pub pass: bool,
}

/// Checks every registered block over seeds `0..seeds`.
pub fn run_suite(seeds: usize, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut blocks = Vec::with_capacity(BLOCKS.len());
    for name in BLOCKS {
        let mut worst: f64 = 0.0;
        let mut pass = true;
        for seed in 0..seeds as u64 {
            let r = check_block(name, seed, fault)?;
            worst = worst.max(r.max_rel_error());
            pass &= r.pass;
        }
        blocks.push(BlockSummary {
            name: name.to_string(),
            seeds,
            max_rel_error: worst,
            pass,
        });
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(SuiteReport {
        eps: EPS,
        tol: TOL,
        blocks,
        pass,
    })
}
