//! Train-and-track comparisons across architecture switches.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::inference::{run_episode, InferenceConfig};
use crate::losses::LossConfig;
use crate::synthworld::{evaluate, generate_sequence, WorldConfig};
use crate::training::{train, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "+jse")]
    Jse,
    #[serde(rename = "+adaptor")]
    Adaptor,
    #[serde(rename = "+both")]
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Jse, Variant::Adaptor, Variant::Both];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Jse => "+jse",
            Variant::Adaptor => "+adaptor",
            Variant::Both => "+both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected base, +jse, +adaptor or +both")))
    }

    /// `base` with the variant's components switched on.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (jse, adaptor) = match self {
            Variant::Base => (false, false),
            Variant::Jse => (true, false),
            Variant::Adaptor => (false, true),
            Variant::Both => (true, true),
        };
        ModelConfig {
            use_jse: jse,
            use_adaptor: adaptor,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Training seeds; one model per seed and variant.
    pub seeds: Vec<u64>,
    /// Held-out sequences tracked by every model.
    pub sequences: usize,
    /// Seed of the first held-out sequence; the rest follow consecutively.
    pub first_sequence_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            sequences: 3,
            first_sequence_seed: 900_000,
        }
    }
}

/// Result of training and tracking one model configuration on every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    /// Mean AUC over the held-out sequences, per seed.
    pub auc: Vec<f64>,
    /// Failure runs summed over the held-out sequences, per seed.
    pub failures: Vec<usize>,
    pub steps_per_sec: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains one model per seed, then tracks the held-out sequences under each
/// inference configuration in `icfgs`.
pub fn score_seeds(
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    loss: &LossConfig,
    world: &WorldConfig,
    icfgs: &[InferenceConfig],
    eval: &EvalConfig,
) -> Result<Vec<SeedScores>> {
    if eval.seeds.is_empty() || eval.sequences == 0 {
        return Err(Error::Config("evaluation needs at least one seed and one sequence".into()));
    }
    let held_out = (0..eval.sequences as u64)
        .map(|i| generate_sequence(world, eval.first_sequence_seed + i))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<SeedScores> = icfgs
        .iter()
        .map(|_| SeedScores {
            auc: Vec::new(),
            failures: Vec::new(),
            steps_per_sec: 0.0,
        })
        .collect();
    let mut train_secs = 0.0;
    for &seed in &eval.seeds {
        let started = Instant::now();
        let trained = train(model, train_cfg, loss, world, &icfgs[0], seed)?;
        train_secs += started.elapsed().as_secs_f64();
        for (icfg, scores) in icfgs.iter().zip(&mut out) {
            let (mut auc, mut failures) = (0.0, 0);
            for seq in &held_out {
                let ep = run_episode(&trained.model, &seq.frames, &seq.gt[0], icfg)?;
                let m = evaluate(&ep.boxes, &seq.gt)?;
                auc += m.auc / held_out.len() as f64;
                failures += m.failures;
            }
            scores.auc.push(auc);
            scores.failures.push(failures);
        }
    }
    let steps_per_sec = (train_cfg.steps * eval.seeds.len()) as f64 / train_secs.max(1e-9);
    for s in &mut out {
        s.steps_per_sec = steps_per_sec;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Median over seeds.
    pub auc: f64,
    /// Total over seeds and sequences.
    pub failures: usize,
    /// Wall-clock training throughput.
    pub steps_per_sec: f64,
    pub per_seed_auc: Vec<f64>,
}

/// One row per requested variant, in request order.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    variants: &[Variant],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    loss: &LossConfig,
    world: &WorldConfig,
    icfg: &InferenceConfig,
    eval: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::Config("no variants requested".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let s = score_seeds(&v.apply(base), train_cfg, loss, world, std::slice::from_ref(icfg), eval)?.remove(0);
        rows.push(AblationRow {
            variant: v,
            auc: median(&s.auc),
            failures: s.failures.iter().sum(),
            steps_per_sec: s.steps_per_sec,
            per_seed_auc: s.auc,
        });
    }
    Ok(rows)
}

/// `variant,auc,failures,steps_per_s`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,auc,failures,steps_per_s\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{},{:.3}\n", r.variant.name(), r.auc, r.failures, r.steps_per_sec));
    }
    out
}

/// Same table without the timing column, for files that must replay
/// byte-identically.
pub fn ablation_csv_deterministic(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,auc,failures,per_seed_auc\n");
    for r in rows {
        let seeds: Vec<String> = r.per_seed_auc.iter().map(|a| format!("{a:.6}")).collect();
        out.push_str(&format!("{},{:.6},{},{}\n", r.variant.name(), r.auc, r.failures, seeds.join(" ")));
    }
    out
}
