//! Training objective: a hinged squared-error classification loss on the
//! score map plus a GIoU loss on the boxes decoded at foreground cells.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::numerics::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_cls: f64,
    /// Label value separating background from foreground cells.
    pub hinge_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 200.0,
            hinge_threshold: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cls > 0.0) {
            return Err(Error::Config("lambda_cls must be > 0".into()));
        }
        if !(self.hinge_threshold > 0.0 && self.hinge_threshold < 1.0) {
            return Err(Error::Config("hinge_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn mask(y: &Tensor, keep: impl Fn(f64) -> bool) -> Tensor {
    Tensor::from_fn([y.numel(), 1], |i| if keep(y.data()[i]) { 1.0 } else { 0.0 })
}

/// Mean over cells of `(pred − y)²` on foreground cells and
/// `(max(0, pred) − y)²` on background cells (`y < t_h`).
///
/// `pred` may be any shape with as many entries as `y`; it is read as a
/// column.
pub fn lbhinge_var(t: &Tape, pred: Var, y: &Tensor, t_h: f64) -> Result<Var> {
    let ps = t.shape(pred);
    let n = y.numel();
    if ps.iter().product::<usize>() != n {
        return crate::error::shape_err("lbhinge", &ps, y.shape());
    }
    let pred = t.reshape(pred, vec![n, 1])?;
    let fg = t.constant(&mask(y, |v| v >= t_h));
    let bg = t.constant(&mask(y, |v| v < t_h));
    let target = t.constant(&y.reshape([n, 1])?);
    let hinged = t.relu(pred);
    let eff = t.add(t.mul(fg, pred)?, t.mul(bg, hinged)?)?;
    let d = t.sub(eff, target)?;
    Ok(t.mean(t.mul(d, d)?))
}

pub fn lbhinge(pred: &Tensor, y: &Tensor, t_h: f64) -> Result<f64> {
    if pred.shape() != y.shape() {
        return crate::error::shape_err("lbhinge", pred.shape(), y.shape());
    }
    let t = Tape::new();
    let p = t.constant(pred);
    let l = lbhinge_var(&t, p, y, t_h)?;
    Ok(t.scalar(l))
}

/// `1 − GIoU(pred, gt)`, in `[0, 2]`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    if gt.is_degenerate() {
        return Err(Error::DegenerateBox(format!("ground truth {gt:?}")));
    }
    if pred.is_degenerate() {
        return Err(Error::DegenerateBox(format!("prediction {pred:?}")));
    }
    Ok(1.0 - pred.giou(gt))
}

/// Mean GIoU loss of the boxes `cell center ± ltrb` against `gt`.
///
/// `ltrb` is `n × 4`, `centers` holds `n` cell centers; everything is in
/// units of the frame side. Predicted boxes may collapse to a point.
pub fn giou_loss_var(t: &Tape, ltrb: Var, centers: &[(f64, f64)], gt: &BBox) -> Result<Var> {
    let shape = t.shape(ltrb);
    let n = centers.len();
    if shape != [n, 4] || n == 0 {
        return crate::error::shape_err("giou_loss", &shape, &[n, 4]);
    }
    if gt.is_degenerate() {
        return Err(Error::DegenerateBox(format!("ground truth {gt:?}")));
    }
    let col = |v: Vec<f64>| t.constant(&Tensor::new([n, 1], v).expect("column"));
    let fill = |v: f64| col(vec![v; n]);
    let xc = col(centers.iter().map(|c| c.0).collect());
    let yc = col(centers.iter().map(|c| c.1).collect());
    let (l, tp, r, b) = (
        t.slice_cols(ltrb, 0, 1)?,
        t.slice_cols(ltrb, 1, 1)?,
        t.slice_cols(ltrb, 2, 1)?,
        t.slice_cols(ltrb, 3, 1)?,
    );
    let x1 = t.sub(xc, l)?;
    let y1 = t.sub(yc, tp)?;
    let x2 = t.add(xc, r)?;
    let y2 = t.add(yc, b)?;
    let (gx1, gy1, gx2, gy2) = (fill(gt.x), fill(gt.y), fill(gt.x2()), fill(gt.y2()));

    let iw = t.relu(t.sub(t.minimum(x2, gx2)?, t.maximum(x1, gx1)?)?);
    let ih = t.relu(t.sub(t.minimum(y2, gy2)?, t.maximum(y1, gy1)?)?);
    let inter = t.mul(iw, ih)?;
    let area = t.mul(t.add(l, r)?, t.add(tp, b)?)?;
    let union = t.sub(t.add_scalar(area, gt.area()), inter)?;
    let ew = t.sub(t.maximum(x2, gx2)?, t.minimum(x1, gx1)?)?;
    let eh = t.sub(t.maximum(y2, gy2)?, t.minimum(y1, gy1)?)?;
    let enclose = t.mul(ew, eh)?;
    let iou = t.div(inter, union)?;
    let slack = t.div(t.sub(enclose, union)?, enclose)?;
    let giou = t.sub(iou, slack)?;
    let loss = t.add_scalar(t.scale(giou, -1.0), 1.0);
    Ok(t.mean(loss))
}

pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// `λ · lbhinge(score, y) + mean GIoU over cells with y ≥ t_h`.
///
/// `gt` is in network-input pixels; `score` is `(g·g) × 1` and `ltrb` is
/// `(g·g) × 4` in fractions of the frame side.
pub fn total_loss(
    t: &Tape,
    score: Var,
    y: &Tensor,
    ltrb: Var,
    gt: &BBox,
    model: &ModelConfig,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let g = model.grid();
    if y.numel() != g * g {
        return crate::error::shape_err("total_loss label", y.shape(), &[g, g]);
    }
    let cls = lbhinge_var(t, score, y, cfg.hinge_threshold)?;
    let side = model.frame_side as f64;
    let p = model.patch as f64;
    let cells: Vec<usize> = (0..g * g).filter(|&i| y.data()[i] >= cfg.hinge_threshold).collect();
    let reg = if cells.is_empty() {
        t.constant(&Tensor::scalar(0.0))
    } else {
        let idx = cells
            .iter()
            .flat_map(|&i| (0..4).map(move |k| Some(i * 4 + k)))
            .collect::<Vec<_>>();
        let picked = t.gather(ltrb, std::rc::Rc::new(idx), vec![cells.len(), 4])?;
        let centers: Vec<(f64, f64)> = cells
            .iter()
            .map(|&i| (((i % g) as f64 + 0.5) * p / side, ((i / g) as f64 + 0.5) * p / side))
            .collect();
        let gt_n = BBox::new(gt.x / side, gt.y / side, gt.w / side, gt.h / side);
        giou_loss_var(t, picked, &centers, &gt_n)?
    };
    let total = t.add(t.scale(cls, cfg.lambda_cls), reg)?;
    Ok(LossTerms { total, cls, reg })
}
