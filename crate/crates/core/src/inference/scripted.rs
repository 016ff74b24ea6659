use std::collections::BTreeMap;

use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::encoder::center_cell;
use crate::model::Prediction;
use crate::numerics::Tensor;
use crate::Result;

use super::{PredictRequest, TargetPredictor};

/// An object the scripted predictor can see: its box per frame (`None` when
/// absent) and the score it reports when selected.
#[derive(Clone, Debug)]
pub struct ScriptedObject {
    pub boxes: Vec<Option<BBox>>,
    pub score: f64,
}

/// Predictor driven by known boxes instead of a network.
///
/// Every visible object (center inside the crop) becomes a single-cell peak
/// with exact LTRB distances. The object nearest the crop center reports its
/// own score; the others report half of theirs. On frames listed in
/// `overrides` the given per-object scores are used instead.
#[derive(Clone, Debug)]
pub struct ScriptedPredictor {
    pub cfg: ModelConfig,
    pub objects: Vec<ScriptedObject>,
    pub overrides: BTreeMap<usize, Vec<f64>>,
}

impl ScriptedPredictor {
    /// Perfect single-object model reporting score 1 on the ground truth.
    pub fn oracle(cfg: ModelConfig, gt: &[BBox]) -> Self {
        Self {
            cfg,
            objects: vec![ScriptedObject {
                boxes: gt.iter().copied().map(Some).collect(),
                score: 1.0,
            }],
            overrides: BTreeMap::new(),
        }
    }
}

impl TargetPredictor for ScriptedPredictor {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, req: &PredictRequest) -> Result<Prediction> {
        let cfg = &self.cfg;
        let g = cfg.grid();
        let side = cfg.frame_side as f64;
        let p = cfg.patch as f64;
        let mut score = Tensor::zeros([g, g, 1]);
        let mut ltrb = Tensor::zeros([g, g, 4]);
        let centre = side / 2.0;

        let visible: Vec<(usize, BBox)> = self
            .objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| {
                let b = req.mapping.to_crop(o.boxes.get(req.frame_index).copied().flatten().as_ref()?);
                let (cx, cy) = b.center();
                ((0.0..side).contains(&cx) && (0.0..side).contains(&cy)).then_some((i, b))
            })
            .collect();
        let dist = |b: &BBox| {
            let (x, y) = b.center();
            (x - centre).hypot(y - centre)
        };
        let nearest = visible
            .iter()
            .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
            .map(|v| v.0);
        let overrides = self.overrides.get(&req.frame_index);
        let mut filled = vec![false; g * g];

        for (i, b) in &visible {
            let s = match overrides {
                Some(o) => o[*i],
                None if Some(*i) == nearest => self.objects[*i].score,
                None => self.objects[*i].score / 2.0,
            };
            let (r, c) = center_cell(b, cfg);
            if filled[r * g + c] && s <= score.at(&[r, c, 0]) {
                continue;
            }
            filled[r * g + c] = true;
            score.set(&[r, c, 0], s);
            let (xc, yc) = ((c as f64 + 0.5) * p, (r as f64 + 0.5) * p);
            let d = [xc - b.x, yc - b.y, b.x2() - xc, b.y2() - yc];
            for (k, v) in d.iter().enumerate() {
                ltrb.set(&[r, c, k], v / side);
            }
        }
        Ok(Prediction { score, ltrb })
    }
}
