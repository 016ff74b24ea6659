//! The full tracker network: encoder, decoder and heads over one parameter
//! store.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::{avit_encode, EncoderParams, TargetState};
use crate::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use crate::bbox::BBox;
use crate::numerics::{uniform, ParamStore, Tape, Tensor, Var};
use crate::predictor::{df_dec, head_forward, Branch, DecoderParams, HeadParams};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub heads: HeadParams,
}

/// Vars produced by one forward pass.
pub struct Forward {
    /// Encoder output for every frame.
    pub features: Var,
    pub weights: Var,
    /// `(g·g) × 1`.
    pub score: Var,
    /// `(g·g) × 4`, fractions of the frame side.
    pub ltrb: Var,
}

/// Dense outputs for the test frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `g × g × 1`.
    pub score: Tensor,
    /// `g × g × 4`.
    pub ltrb: Tensor,
}

impl Model {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderParams::new(&mut store, &mut rng, &cfg)?;
        let decoder = DecoderParams::new(&mut store, &mut rng, &cfg)?;
        let heads = HeadParams::new(&mut store, &mut rng, &cfg);
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn forward(&self, t: &Tape, frames: &[&Tensor], states: &[TargetState]) -> Result<Forward> {
        let enc = avit_encode(t, &self.store, frames, states, &self.encoder, &self.cfg)?;
        let features = enc.features;
        let act = self.cfg.activation.into();
        let weights = df_dec(t, &self.store, features, &self.decoder, act)?;
        let hw = self.cfg.tokens_per_frame();
        let test = t.slice_rows(features, self.cfg.train_frames * hw, hw)?;
        let score = head_forward(t, &self.store, weights, test, &self.heads, Branch::Classification, &self.cfg)?;
        let ltrb = head_forward(t, &self.store, weights, test, &self.heads, Branch::Regression, &self.cfg)?;
        Ok(Forward {
            features,
            weights,
            score,
            ltrb,
        })
    }

    pub fn predict(&self, frames: &[&Tensor], states: &[TargetState]) -> Result<Prediction> {
        let t = Tape::new();
        let out = self.forward(&t, frames, states)?;
        let g = self.cfg.grid();
        Ok(Prediction {
            score: t.value(out.score).reshape([g, g, 1])?,
            ltrb: t.value(out.ltrb).reshape([g, g, 4])?,
        })
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        write_checkpoint(&self.store, w)
    }

    /// Builds the architecture for `cfg` and overwrites every parameter from
    /// the checkpoint; names and shapes must match exactly.
    pub fn load(cfg: ModelConfig, r: &mut impl Read) -> Result<Self> {
        let loaded = read_checkpoint(r)?;
        let mut model = Self::new(cfg, 0)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, architecture expects {}",
                loaded.len(),
                model.store.len()
            )));
        }
        model.store.load_values_from(&loaded)?;
        Ok(model)
    }
}

/// Shapes produced by one forward pass on random inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub encoder_output: Vec<usize>,
    pub decoder_output: Vec<usize>,
    pub score: Vec<usize>,
    pub ltrb: Vec<usize>,
}

/// Runs a randomly initialized model on uniform noise frames.
pub fn shape_check(cfg: &ModelConfig, seed: u64) -> Result<ShapeReport> {
    let model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let s = cfg.frame_side;
    let frames: Vec<Tensor> = (0..=cfg.train_frames).map(|_| uniform(&mut rng, [s, s, 3], 1.0)).collect();
    let refs: Vec<&Tensor> = frames.iter().collect();
    let b = BBox::new(s as f64 / 3.0, s as f64 / 3.0, s as f64 / 3.0, s as f64 / 3.0);
    let mut states = (0..cfg.train_frames)
        .map(|_| TargetState::from_box(&b, cfg))
        .collect::<Result<Vec<_>>>()?;
    states.push(TargetState::test(cfg));
    let t = Tape::new();
    let out = model.forward(&t, &refs, &states)?;
    Ok(ShapeReport {
        encoder_output: t.shape(out.features).to_vec(),
        decoder_output: t.shape(out.weights).to_vec(),
        score: t.shape(out.score).to_vec(),
        ltrb: t.shape(out.ltrb).to_vec(),
    })
}
