//! Deterministic synthetic tracking sequences: textured rectangles moving over
//! a smooth background, with look-alike distractors and occluding bars.

mod io;
mod metrics;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_sequence, read_frame, save_sequence, write_frame, FRAME_MAGIC};
pub use metrics::{evaluate, success_thresholds, Metrics, PRECISION_THRESHOLD_PX};

use crate::bbox::BBox;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Frames `[start, end)` during which a vertical bar covers `coverage` of
/// the target's width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEvent {
    pub start: usize,
    pub end: usize,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub frame_side: usize,
    pub length: usize,
    /// Target plus distractors.
    pub objects: usize,
    pub appearance_seed: u64,
    /// Share of the target's texture blended into every distractor.
    pub similarity: f64,
    /// Pixels per frame.
    pub speed: f64,
    /// Uniform per-frame position noise amplitude, pixels.
    pub jitter: f64,
    /// Multiplicative size change per frame.
    pub scale_drift: f64,
    /// Initial target side, pixels.
    pub target_size: f64,
    pub occlusions: Vec<OcclusionEvent>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::easy()
    }
}

/// Smallest rendered object side.
pub const MIN_OBJECT_SIDE: f64 = 4.0;

impl WorldConfig {
    /// One slowly moving target, no distractors or occlusion.
    pub fn easy() -> Self {
        Self {
            frame_side: 128,
            length: 40,
            objects: 1,
            appearance_seed: 7,
            similarity: 0.0,
            speed: 1.5,
            jitter: 0.5,
            scale_drift: 0.0,
            target_size: 24.0,
            occlusions: Vec::new(),
        }
    }

    /// Two look-alike distractors and one occlusion.
    pub fn distractor() -> Self {
        Self {
            objects: 3,
            similarity: 0.7,
            occlusions: vec![OcclusionEvent {
                start: 20,
                end: 24,
                coverage: 0.6,
            }],
            ..Self::easy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.length < 1 || self.objects < 1 {
            return fail("length and objects must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return fail("similarity must lie in [0, 1]");
        }
        if !(self.target_size >= MIN_OBJECT_SIDE && self.target_size * 2.0 <= self.frame_side as f64) {
            return fail("target_size must lie in [4, frame_side / 2]");
        }
        if !(self.speed >= 0.0 && self.jitter >= 0.0 && self.scale_drift > -1.0) {
            return fail("speed and jitter must be >= 0, scale_drift > -1");
        }
        for e in &self.occlusions {
            if e.start >= e.end || !(0.0..=1.0).contains(&e.coverage) {
                return fail("occlusion events need start < end and coverage in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Per-frame record of what was drawn over the target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEvent {
    pub frame: usize,
    /// Share of ground-truth pixels covered by an occluder.
    pub occluded_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub config: WorldConfig,
    pub seed: u64,
    /// `H × W × 3`, values `k / 255`.
    pub frames: Vec<Tensor>,
    pub gt: Vec<BBox>,
    /// Distractor boxes per frame.
    pub distractors: Vec<Vec<BBox>>,
    pub events: Vec<FrameEvent>,
}

/// Smooth color field on the unit square: two octaves of bilinear value
/// noise.
#[derive(Clone, Debug, PartialEq)]
struct Texture {
    coarse: Vec<[f64; 3]>,
    fine: Vec<[f64; 3]>,
}

const COARSE: usize = 4;
const FINE: usize = 8;

impl Texture {
    fn random(rng: &mut impl Rng, lo: f64, hi: f64) -> Self {
        let mut lattice = |n: usize| -> Vec<[f64; 3]> {
            (0..n * n)
                .map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)])
                .collect()
        };
        Self {
            coarse: lattice(COARSE),
            fine: lattice(FINE),
        }
    }

    fn blend(&self, other: &Texture, w: f64) -> Self {
        let mix = |a: &[[f64; 3]], b: &[[f64; 3]]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| std::array::from_fn(|c| w * x[c] + (1.0 - w) * y[c]))
                .collect()
        };
        Self {
            coarse: mix(&self.coarse, &other.coarse),
            fine: mix(&self.fine, &other.fine),
        }
    }

    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let a = bilinear(&self.coarse, COARSE, u, v);
        let b = bilinear(&self.fine, FINE, u, v);
        std::array::from_fn(|c| 0.6 * a[c] + 0.4 * b[c])
    }
}

fn bilinear(lat: &[[f64; 3]], n: usize, u: f64, v: f64) -> [f64; 3] {
    let s = (n - 1) as f64;
    let (x, y) = (u.clamp(0.0, 1.0) * s, v.clamp(0.0, 1.0) * s);
    let (x0, y0) = ((x.floor() as usize).min(n - 2), (y.floor() as usize).min(n - 2));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let at = |i: usize, j: usize| lat[j * n + i];
    std::array::from_fn(|c| {
        let top = at(x0, y0)[c] * (1.0 - tx) + at(x0 + 1, y0)[c] * tx;
        let bot = at(x0, y0 + 1)[c] * (1.0 - tx) + at(x0 + 1, y0 + 1)[c] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn bbox(&self) -> BBox {
        BBox::from_corners(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }

    fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn overlap(&self, o: &Rect) -> usize {
        let w = self.x1.min(o.x1).saturating_sub(self.x0.max(o.x0));
        let h = self.y1.min(o.y1).saturating_sub(self.y0.max(o.y0));
        w * h
    }
}

struct Mover {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w0: f64,
    h0: f64,
    texture: Texture,
}

impl Mover {
    fn spawn(rng: &mut impl Rng, side: f64, size: f64, speed: f64, texture: Texture) -> Self {
        let aspect: f64 = rng.random_range(0.8..1.25);
        let (w0, h0) = (size * aspect, size / aspect);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            x: rng.random_range(0.0..(side - w0).max(1.0)),
            y: rng.random_range(0.0..(side - h0).max(1.0)),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w0,
            h0,
            texture,
        }
    }

    fn size_at(&self, t: usize, drift: f64, side: f64) -> (f64, f64) {
        let f = (1.0 + drift).powi(t as i32);
        let clamp = |v: f64| v.clamp(MIN_OBJECT_SIDE, side / 2.0);
        (clamp(self.w0 * f), clamp(self.h0 * f))
    }

    fn advance(&mut self, w: f64, h: f64, side: f64) {
        let reflect = |p: &mut f64, v: &mut f64, extent: f64| {
            *p += *v;
            let hi = side - extent;
            if *p < 0.0 {
                *p = -*p;
                *v = -*v;
            }
            if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
            *p = p.clamp(0.0, hi.max(0.0));
        };
        reflect(&mut self.x, &mut self.vx, w);
        reflect(&mut self.y, &mut self.vy, h);
    }

    fn rect(&self, w: f64, h: f64, jx: f64, jy: f64, side: usize) -> Rect {
        let (w, h) = (w.round() as usize, h.round() as usize);
        let x = ((self.x + jx).round().max(0.0) as usize).min(side - w);
        let y = ((self.y + jy).round().max(0.0) as usize).min(side - h);
        Rect {
            x0: x,
            y0: y,
            x1: x + w,
            y1: y + h,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn paint(buf: &mut [f64], side: usize, r: &Rect, tex: &Texture) {
    let (w, h) = ((r.x1 - r.x0) as f64, (r.y1 - r.y0) as f64);
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let c = tex.sample((x - r.x0) as f64 / (w - 1.0).max(1.0), (y - r.y0) as f64 / (h - 1.0).max(1.0));
            buf[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&c);
        }
    }
}

/// Occluders are solid black; textures never reach that value.
pub const OCCLUDER_VALUE: f64 = 0.0;

/// Renders a sequence. Identical `(config, seed)` pairs give bit-identical
/// output.
pub fn generate_sequence(cfg: &WorldConfig, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    let side = cfg.frame_side;
    let fs = side as f64;
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(k);
        r
    };
    let mut motion = stream(0);
    let mut jitter_rng = stream(1);
    let mut occ_rng = stream(2);
    let mut look = stream(3);

    let target_tex = Texture::random(&mut ChaCha8Rng::seed_from_u64(cfg.appearance_seed), 0.1, 1.0);
    let background = Texture::random(&mut look, 0.35, 0.65);
    let mut movers = vec![Mover::spawn(&mut motion, fs, cfg.target_size, cfg.speed, target_tex.clone())];
    for _ in 1..cfg.objects {
        let own = Texture::random(&mut look, 0.1, 1.0);
        let size = cfg.target_size * motion.random_range(0.8..1.2);
        movers.push(Mover::spawn(&mut motion, fs, size, cfg.speed, target_tex.blend(&own, cfg.similarity)));
    }

    let mut bg = vec![0.0; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let c = background.sample(x as f64 / (fs - 1.0), y as f64 / (fs - 1.0));
            bg[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&c);
        }
    }

    let mut seq = Sequence {
        config: cfg.clone(),
        seed,
        frames: Vec::with_capacity(cfg.length),
        gt: Vec::with_capacity(cfg.length),
        distractors: Vec::with_capacity(cfg.length),
        events: Vec::with_capacity(cfg.length),
    };
    for t in 0..cfg.length {
        let rects: Vec<Rect> = movers
            .iter()
            .map(|m| {
                let (w, h) = m.size_at(t, cfg.scale_drift, fs);
                let (jx, jy) = if cfg.jitter > 0.0 {
                    (
                        jitter_rng.random_range(-cfg.jitter..=cfg.jitter),
                        jitter_rng.random_range(-cfg.jitter..=cfg.jitter),
                    )
                } else {
                    (0.0, 0.0)
                };
                m.rect(w, h, jx, jy, side)
            })
            .collect();
        let mut buf = bg.clone();
        for (m, r) in movers.iter().zip(&rects).skip(1) {
            paint(&mut buf, side, r, &m.texture);
        }
        paint(&mut buf, side, &rects[0], &movers[0].texture);

        let target = rects[0];
        let mut covered = 0;
        if let Some(e) = cfg.occlusions.iter().find(|e| (e.start..e.end).contains(&t)) {
            let tw = target.x1 - target.x0;
            let bw = ((e.coverage * tw as f64).round() as usize).min(tw);
            if bw > 0 {
                let slack = tw - bw;
                let x0 = target.x0 + occ_rng.random_range(0..=slack);
                let bar = Rect {
                    x0,
                    y0: 0,
                    x1: x0 + bw,
                    y1: side,
                };
                for y in bar.y0..bar.y1 {
                    for x in bar.x0..bar.x1 {
                        buf[(y * side + x) * 3..(y * side + x) * 3 + 3].fill(OCCLUDER_VALUE);
                    }
                }
                covered = bar.overlap(&target);
            }
        }

        for v in buf.iter_mut() {
            *v = quantize(*v);
        }
        seq.frames.push(Tensor::new([side, side, 3], buf)?);
        seq.gt.push(target.bbox());
        seq.distractors.push(rects[1..].iter().map(Rect::bbox).collect());
        seq.events.push(FrameEvent {
            frame: t,
            occluded_fraction: covered as f64 / target.area() as f64,
        });

        for m in movers.iter_mut() {
            let (w, h) = m.size_at(t + 1, cfg.scale_drift, fs);
            m.advance(w, h, fs);
        }
    }
    Ok(seq)
}
