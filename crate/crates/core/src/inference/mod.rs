//! Online tracking: search-region cropping, top-2 candidates, backward
//! verification of low-confidence outputs and the two-template update
//! policy.

mod candidates;
mod crop;
mod scripted;

use serde::{Deserialize, Serialize};

pub use candidates::{suppression_mask, top2_candidates, Candidate};
pub use crop::{crop_search_region, frame_dims, CropMapping};
pub use scripted::{ScriptedObject, ScriptedPredictor};

use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::encoder::TargetState;
use crate::model::{Model, Prediction};
use crate::numerics::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMeasure {
    Area,
    Side,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Confidence below which the output is verified by back-tracking.
    pub tau_c: f64,
    /// Score above which the second template is replaced.
    pub tau_2: f64,
    /// Score above which the first template may be replaced.
    pub tau_1: f64,
    pub scale_trigger: f64,
    pub scale_measure: ScaleMeasure,
    /// Crop side over `√(box area)`.
    pub search_factor: f64,
    pub mask_radius_cells: usize,
    /// Output boxes are widened to at least this side, in frame pixels.
    pub min_box_side: f64,
    pub use_cycletrack: bool,
    pub use_dfu: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau_c: 0.5,
            tau_2: 0.85,
            tau_1: 1.0,
            scale_trigger: 16.0,
            scale_measure: ScaleMeasure::Area,
            search_factor: 3.0,
            mask_radius_cells: 1,
            min_box_side: 2.0,
            use_cycletrack: true,
            use_dfu: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau_c && self.tau_c < self.tau_2 && self.tau_2 <= self.tau_1) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < tau_c < tau_2 <= tau_1, got {} {} {}",
                self.tau_c, self.tau_2, self.tau_1
            )));
        }
        if !(self.scale_trigger > 1.0) {
            return Err(Error::Config("scale_trigger must be > 1".into()));
        }
        if !(self.search_factor > 0.0 && self.min_box_side > 0.0) {
            return Err(Error::Config("search_factor and min_box_side must be > 0".into()));
        }
        Ok(())
    }
}

/// A reference frame: its crop around the target and the matching state.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub crop: Tensor,
    pub state: TargetState,
}

impl Template {
    pub fn from_frame(frame: &Tensor, bbox: &BBox, model: &ModelConfig, icfg: &InferenceConfig) -> Result<Self> {
        let (crop, map) = crop_search_region(frame, bbox, model.frame_side, icfg.search_factor)?;
        let state = TargetState::from_box(&map.to_crop(bbox), model)?;
        Ok(Self { crop, state })
    }

    /// Zero frame with an all-zero state.
    pub fn empty(model: &ModelConfig) -> Self {
        let s = model.frame_side;
        Self {
            crop: Tensor::zeros([s, s, 3]),
            state: TargetState::empty(model),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackState {
    pub template1: Template,
    pub template2: Template,
    pub last_box: BBox,
    pub last_score: f64,
    /// Box area at the last first-template update.
    pub initial_box_area: f64,
    pub previous_frame: Option<Tensor>,
    /// Index of the frame `last_box` belongs to.
    pub frame_index: usize,
}

impl TrackState {
    pub fn init(frame: &Tensor, bbox: &BBox, model: &ModelConfig, icfg: &InferenceConfig) -> Result<Self> {
        Ok(Self {
            template1: Template::from_frame(frame, bbox, model, icfg)?,
            template2: Template::empty(model),
            last_box: *bbox,
            last_score: 1.0,
            initial_box_area: bbox.area(),
            previous_frame: Some(frame.clone()),
            frame_index: 0,
        })
    }
}

/// Everything a predictor may look at for one evaluation.
pub struct PredictRequest<'a> {
    pub frame_index: usize,
    pub crop: &'a Tensor,
    pub mapping: &'a CropMapping,
    pub templates: [&'a Template; 2],
}

pub trait TargetPredictor {
    fn config(&self) -> &ModelConfig;
    fn predict(&self, req: &PredictRequest) -> Result<Prediction>;
}

impl TargetPredictor for Model {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, req: &PredictRequest) -> Result<Prediction> {
        let m = self.cfg.train_frames;
        if !(1..=2).contains(&m) {
            return Err(Error::Config(format!("tracking supports 1 or 2 templates, not {m}")));
        }
        let mut frames: Vec<&Tensor> = req.templates[..m].iter().map(|t| &t.crop).collect();
        frames.push(req.crop);
        let mut states: Vec<TargetState> = req.templates[..m].iter().map(|t| t.state.clone()).collect();
        states.push(TargetState::test(&self.cfg));
        Model::predict(self, &frames, &states)
    }
}

/// Widens a box to `min_side` and moves its center inside the frame.
pub fn sanitize_box(b: &BBox, frame_w: f64, frame_h: f64, min_side: f64) -> BBox {
    let (cx, cy) = if b.is_finite() {
        b.center()
    } else {
        (frame_w / 2.0, frame_h / 2.0)
    };
    let fix = |v: f64, hi: f64| if v.is_finite() { v.clamp(min_side, hi.max(min_side)) } else { min_side };
    BBox::from_center(
        cx.clamp(0.0, frame_w),
        cy.clamp(0.0, frame_h),
        fix(b.w, frame_w),
        fix(b.h, frame_h),
    )
}

/// Candidate in frame coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameCandidate {
    pub bbox: BBox,
    pub score: f64,
}

/// Crops `frame` around `center`, evaluates the predictor and returns the
/// top-2 candidates mapped back to frame pixels.
pub fn locate(
    pred: &dyn TargetPredictor,
    frame: &Tensor,
    frame_index: usize,
    center: &BBox,
    templates: [&Template; 2],
    icfg: &InferenceConfig,
) -> Result<(FrameCandidate, Option<FrameCandidate>)> {
    let cfg = pred.config();
    let (fh, fw) = frame_dims(frame)?;
    let (crop, mapping) = crop_search_region(frame, center, cfg.frame_side, icfg.search_factor)?;
    let out = pred.predict(&PredictRequest {
        frame_index,
        crop: &crop,
        mapping: &mapping,
        templates,
    })?;
    let (c1, c2) = top2_candidates(&out.score, &out.ltrb, cfg, icfg.mask_radius_cells)?;
    let lift = |c: Candidate| FrameCandidate {
        bbox: sanitize_box(&mapping.to_frame(&c.bbox), fw as f64, fh as f64, icfg.min_box_side),
        score: c.score,
    };
    Ok((lift(c1), c2.map(lift)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleOutcome {
    pub backtrack_fired: bool,
    pub corrected: bool,
}

/// Back-tracking fires iff `s1 < τ_c`; the runner-up replaces the first
/// candidate iff its back-track overlaps the previous output strictly more
/// than the first one's does and its back-track score exceeds `τ_c`.
pub fn cycle_decision(s1: f64, iou_hat1: f64, iou_hat2: f64, s_hat2: f64, tau_c: f64) -> CycleOutcome {
    let backtrack_fired = s1 < tau_c;
    CycleOutcome {
        backtrack_fired,
        corrected: backtrack_fired && iou_hat2 > iou_hat1 && s_hat2 > tau_c,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub bbox: BBox,
    pub score: f64,
    pub outcome: CycleOutcome,
}

/// Forward tracking on `frame` followed, for low scores, by back-tracking
/// both candidates on the previous frame with the templates held fixed.
pub fn cycletrack_step(
    pred: &dyn TargetPredictor,
    state: &TrackState,
    frame: &Tensor,
    frame_index: usize,
    icfg: &InferenceConfig,
) -> Result<StepOutput> {
    let templates = [&state.template1, &state.template2];
    let (first, second) = locate(pred, frame, frame_index, &state.last_box, templates, icfg)?;
    let keep_first = |fired| StepOutput {
        bbox: first.bbox,
        score: first.score,
        outcome: CycleOutcome {
            backtrack_fired: fired,
            corrected: false,
        },
    };
    if !icfg.use_cycletrack || first.score >= icfg.tau_c {
        return Ok(keep_first(false));
    }
    let prev = state
        .previous_frame
        .as_ref()
        .ok_or_else(|| Error::Invalid("back-tracking needs the previous frame".into()))?;
    let Some(second) = second else {
        return Ok(keep_first(true));
    };
    let back = |c: &FrameCandidate| locate(pred, prev, state.frame_index, &c.bbox, templates, icfg).map(|r| r.0);
    let hat1 = back(&first)?;
    let hat2 = back(&second)?;
    let outcome = cycle_decision(
        first.score,
        hat1.bbox.iou(&state.last_box),
        hat2.bbox.iou(&state.last_box),
        hat2.score,
        icfg.tau_c,
    );
    let chosen = if outcome.corrected { second } else { first };
    Ok(StepOutput {
        bbox: chosen.bbox,
        score: chosen.score,
        outcome,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateFlags {
    pub template2: bool,
    pub template1: bool,
}

/// Scale-change test against the area recorded at the last first-template
/// update.
pub fn scale_triggered(area: f64, initial_area: f64, icfg: &InferenceConfig) -> bool {
    let ratio = area / initial_area;
    let ratio = match icfg.scale_measure {
        ScaleMeasure::Area => ratio,
        ScaleMeasure::Side => ratio.sqrt(),
    };
    ratio > icfg.scale_trigger || ratio < 1.0 / icfg.scale_trigger
}

/// Pure form of the update rules.
pub fn update_decision(score: f64, area: f64, initial_area: f64, icfg: &InferenceConfig) -> UpdateFlags {
    UpdateFlags {
        template2: score > icfg.tau_2,
        template1: score > icfg.tau_1 && scale_triggered(area, initial_area, icfg),
    }
}

pub fn dual_frame_update(
    state: &mut TrackState,
    frame: &Tensor,
    bbox: &BBox,
    score: f64,
    model: &ModelConfig,
    icfg: &InferenceConfig,
) -> Result<UpdateFlags> {
    let flags = update_decision(score, bbox.area(), state.initial_box_area, icfg);
    if flags.template1 || flags.template2 {
        let t = Template::from_frame(frame, bbox, model, icfg)?;
        if flags.template1 {
            state.template1 = t.clone();
            state.initial_box_area = bbox.area();
        }
        if flags.template2 {
            state.template2 = t;
        }
    }
    Ok(flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub score: f64,
    pub backtrack_fired: bool,
    pub corrected: bool,
    pub template2_updated: bool,
    pub template1_updated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub boxes: Vec<BBox>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

/// Tracks from the annotated first frame to the end of `frames`.
pub fn run_episode(
    pred: &dyn TargetPredictor,
    frames: &[Tensor],
    init: &BBox,
    icfg: &InferenceConfig,
) -> Result<Episode> {
    icfg.validate()?;
    let first = frames.first().ok_or_else(|| Error::Invalid("empty sequence".into()))?;
    let model = pred.config();
    let mut state = TrackState::init(first, init, model, icfg)?;
    let mut boxes = vec![*init];
    let mut diagnostics = Vec::with_capacity(frames.len().saturating_sub(1));
    for (i, frame) in frames.iter().enumerate().skip(1) {
        let step = cycletrack_step(pred, &state, frame, i, icfg)?;
        let flags = if icfg.use_dfu {
            dual_frame_update(&mut state, frame, &step.bbox, step.score, model, icfg)?
        } else {
            UpdateFlags::default()
        };
        diagnostics.push(FrameDiagnostics {
            frame: i,
            score: step.score,
            backtrack_fired: step.outcome.backtrack_fired,
            corrected: step.outcome.corrected,
            template2_updated: flags.template2,
            template1_updated: flags.template1,
        });
        state.last_box = step.bbox;
        state.last_score = step.score;
        state.previous_frame = Some(frame.clone());
        state.frame_index = i;
        boxes.push(step.bbox);
    }
    Ok(Episode { boxes, diagnostics })
}

/// One JSON object per line.
pub fn diagnostics_jsonl(diags: &[FrameDiagnostics]) -> String {
    let mut out = String::new();
    for d in diags {
        out.push_str(&serde_json::to_string(d).expect("diagnostics serialize"));
        out.push('\n');
    }
    out
}
