//! JSON bodies exchanged over HTTP. Binary payloads (checkpoints) travel as
//! standard base64 strings.

use serde::{Deserialize, Serialize};

pub use avitmp_core::ablation::{AblationRow, EvalConfig, Variant};
pub use avitmp_core::gradsuite::SuiteReport;
pub use avitmp_core::inference::InferenceConfig;
pub use avitmp_core::losses::LossConfig;
pub use avitmp_core::model::ShapeReport;
pub use avitmp_core::synthworld::WorldConfig;
pub use avitmp_core::training::TrainConfig;
pub use avitmp_core::{BBox, ModelConfig};

pub const HEALTH: &str = "/health";
pub const TRAIN: &str = "/v1/train";
pub const TRACK: &str = "/v1/track";
pub const ABLATE: &str = "/v1/ablate";
pub const GRADCHECK: &str = "/v1/gradcheck";
pub const GENERATE: &str = "/v1/sequences/generate";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRequest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub world: WorldConfig,
    pub inference: InferenceConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub checkpoint: String,
    /// `step,lr,loss,cls,reg` rows.
    pub loss_log: String,
    pub parameters: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackRequest {
    pub model: ModelConfig,
    pub inference: InferenceConfig,
    /// Base64 checkpoint; ignored when `oracle` is set.
    pub checkpoint: Option<String>,
    /// Replace the network by a predictor that reads the ground truth.
    pub oracle: bool,
    /// Sequence directory on the server's filesystem.
    pub sequence: String,
}

/// Flat summary of one tracked sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    pub frames: usize,
    pub auc: f64,
    pub precision: f64,
    pub failures: usize,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResponse {
    pub metrics: TrackMetrics,
    /// One JSON object per tracked frame.
    pub diagnostics: String,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateRequest {
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub world: WorldConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl Default for AblateRequest {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            world: WorldConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateResponse {
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckRequest {
    pub seeds: usize,
    /// Name of a deliberately broken backward rule.
    pub fault: Option<String>,
    /// Also run one forward pass at paper-scale shapes.
    pub paper_scale: bool,
}

impl Default for GradcheckRequest {
    fn default() -> Self {
        Self {
            seeds: avitmp_core::gradsuite::DEFAULT_SEEDS,
            fault: None,
            paper_scale: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckResponse {
    pub report: SuiteReport,
    pub shapes: Option<ShapeReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateRequest {
    pub world: WorldConfig,
    pub seed: u64,
    /// Directory on the server's filesystem to write the sequence into.
    pub out: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub frames: usize,
    pub gt: Vec<BBox>,
}

/// Body of every non-2xx response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// `config`, `invalid`, `not_found`, `checkpoint` or `internal`.
    pub kind: String,
    pub error: String,
}
