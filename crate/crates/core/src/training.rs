//! Training on synthetic sequences: chronological frame tuples, AdamW with
//! decoupled weight decay and a two-step learning-rate decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::encoder::TargetState;
use crate::inference::{crop_search_region, InferenceConfig};
use crate::losses::{total_loss, LossConfig};
use crate::model::Model;
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::synthworld::{generate_sequence, Sequence, WorldConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frame tuples averaged per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Learning-rate factor applied at each decay point.
    pub decay_factor: f64,
    /// Decay points as fractions of `steps`.
    pub decay_at: Vec<f64>,
    /// Number of generated training sequences.
    pub sequences: usize,
    /// Largest frame distance between the first and last frame of a tuple.
    pub max_gap: usize,
    /// Probability that the last template slot of a tuple is replaced by the
    /// zero frame and empty state a tracker starts from (needs m >= 2).
    pub empty_template_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 2,
            lr: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            decay_factor: 0.2,
            decay_at: vec![0.5, 0.83],
            sequences: 8,
            max_gap: 20,
            empty_template_prob: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 || self.sequences < 1 || self.max_gap < 1 {
            return Err(Error::Config("batch, sequences and max_gap must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_template_prob) {
            return Err(Error::Config("empty_template_prob must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config("lr must be > 0; weight_decay and clip_norm >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self
            .decay_at
            .iter()
            .filter(|f| step as f64 >= (**f * self.steps as f64).round())
            .count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// Seeds of the generated training sequences.
pub fn training_sequence_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| seed.wrapping_mul(1_000_003).wrapping_add(i)).collect()
}

/// Decoupled-weight-decay Adam. Decay applies to rank-2 parameters only.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let decay = if p.rank() == 2 { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                *x -= lr * (update + decay * *x);
            }
        }
    }
}

fn scale_grads(store: &mut ParamStore, factor: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if let Some(g) = p.grad().map(|g| g.iter().map(|v| v * factor).collect::<Vec<_>>()) {
            p.zero_grad();
            p.accumulate_grad(&g);
        }
    }
}

fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// One supervised example: `m` training crops with states, then the test
/// crop and its ground truth in crop pixels.
pub struct Sample {
    pub frames: Vec<Tensor>,
    pub states: Vec<TargetState>,
    pub label: Tensor,
    pub gt: BBox,
}

/// Draws sorted distinct frame indices `i_1 < … < i_m < k` with
/// `k − i_1 ≤ max_gap` (capped by the sequence length).
pub fn sample_indices(rng: &mut impl Rng, len: usize, m: usize, max_gap: usize) -> Result<Vec<usize>> {
    if len < m + 1 {
        return Err(Error::Invalid(format!("sequence of {len} frames cannot hold {} frames", m + 1)));
    }
    let span = max_gap.max(m).min(len - 1);
    let start = rng.random_range(0..len - span);
    let mut pool: Vec<usize> = (start..=start + span).collect();
    let mut picked = Vec::with_capacity(m + 1);
    for _ in 0..m + 1 {
        picked.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Crops training frames around their own boxes and the test frame around
/// the box of the last training frame. With `empty_last` the last training slot
/// holds an empty template instead. `None` when the test target's center falls
/// outside its crop.
pub fn build_sample(
    seq: &Sequence,
    idx: &[usize],
    empty_last: bool,
    model: &ModelConfig,
    icfg: &InferenceConfig,
) -> Result<Option<Sample>> {
    let (k, train) = idx.split_last().ok_or_else(|| Error::Invalid("empty tuple".into()))?;
    let mut frames = Vec::with_capacity(idx.len());
    let mut states = Vec::with_capacity(idx.len());
    for &i in train {
        let (crop, map) = crop_search_region(&seq.frames[i], &seq.gt[i], model.frame_side, icfg.search_factor)?;
        states.push(TargetState::from_box(&map.to_crop(&seq.gt[i]), model)?);
        frames.push(crop);
    }
    if empty_last && train.len() >= 2 {
        let s = model.frame_side;
        *frames.last_mut().expect("two slots") = Tensor::zeros([s, s, 3]);
        *states.last_mut().expect("two slots") = TargetState::empty(model);
    }
    let anchor = &seq.gt[*train.last().ok_or_else(|| Error::Invalid("tuple has no training frame".into()))?];
    let (crop, map) = crop_search_region(&seq.frames[*k], anchor, model.frame_side, icfg.search_factor)?;
    let gt = map.to_crop(&seq.gt[*k]);
    let (cx, cy) = gt.center();
    let side = model.frame_side as f64;
    if !(0.0..side).contains(&cx) || !(0.0..side).contains(&cy) {
        return Ok(None);
    }
    let label = crate::encoder::gaussian_label(&gt, model, model.sigma_factor)?;
    frames.push(crop);
    states.push(TargetState::test(model));
    Ok(Some(Sample {
        frames,
        states,
        label,
        gt,
    }))
}

/// Maximum redraws for a tuple whose test target left the crop.
const MAX_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("step,lr,loss,cls,reg\n");
    for r in log {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.lr, r.loss, r.cls, r.reg));
    }
    out
}

/// Gradient of the mean loss over `samples` accumulated into `model.store`.
pub fn accumulate_batch(model: &mut Model, samples: &[Sample], loss_cfg: &LossConfig) -> Result<LossRecord> {
    let n = samples.len() as f64;
    let mut rec = LossRecord {
        step: 0,
        lr: 0.0,
        loss: 0.0,
        cls: 0.0,
        reg: 0.0,
    };
    for s in samples {
        let t = Tape::new();
        let frames: Vec<&Tensor> = s.frames.iter().collect();
        let out = model.forward(&t, &frames, &s.states)?;
        let terms = total_loss(&t, out.score, &s.label, out.ltrb, &s.gt, &model.cfg, loss_cfg)?;
        rec.cls += t.scalar(terms.cls) / n;
        rec.reg += t.scalar(terms.reg) / n;
        rec.loss += t.backward_into(terms.total, &mut model.store)? / n;
    }
    scale_grads(&mut model.store, 1.0 / n);
    Ok(rec)
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRecord>,
}

/// Trains a freshly initialized model. Everything is derived from `seed`.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    world: &WorldConfig,
    icfg: &InferenceConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let sequences = training_sequence_seeds(seed, train_cfg.sequences)
        .into_iter()
        .map(|s| generate_sequence(world, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut opt = AdamW::new(&model.store);
    let mut log = Vec::with_capacity(train_cfg.steps);
    for step in 0..train_cfg.steps {
        let samples = (0..train_cfg.batch)
            .map(|_| {
                for _ in 0..MAX_REDRAWS {
                    let seq = &sequences[rng.random_range(0..sequences.len())];
                    let idx = sample_indices(&mut rng, seq.frames.len(), model_cfg.train_frames, train_cfg.max_gap)?;
                    let empty = rng.random_bool(train_cfg.empty_template_prob);
                    if let Some(s) = build_sample(seq, &idx, empty, model_cfg, icfg)? {
                        return Ok(s);
                    }
                }
                Err(Error::Invalid(format!("no usable tuple in {MAX_REDRAWS} draws")))
            })
            .collect::<Result<Vec<_>>>()?;
        model.store.zero_grad();
        let mut rec = accumulate_batch(&mut model, &samples, loss_cfg)?;
        if !rec.loss.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss at step {step}")));
        }
        if train_cfg.clip_norm > 0.0 {
            let norm = grad_norm(&model.store);
            if norm > train_cfg.clip_norm {
                scale_grads(&mut model.store, train_cfg.clip_norm / norm);
            }
        }
        rec.step = step;
        rec.lr = train_cfg.lr_at(step);
        opt.step(&mut model.store, rec.lr, train_cfg);
        log.push(rec);
    }
    model.store.zero_grad();
    Ok(TrainOutcome { model, log })
}
