//! Single-branch discriminative visual tracker built around an adaptive ViT
//! encoder, a dense-fusion model predictor and a cycle-consistency inference
//! pipeline, together with the synthetic tracking world used to train and
//! evaluate it at desk scale.

pub mod ablation;
pub mod attention;
pub mod bbox;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod predictor;
pub mod synthworld;
pub mod training;

pub use bbox::BBox;
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::Model;
