use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Affine map between crop pixels and frame pixels:
/// `frame = origin + crop · scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropMapping {
    pub x0: f64,
    pub y0: f64,
    /// Frame pixels per crop pixel.
    pub scale: f64,
}

impl CropMapping {
    pub fn identity() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            scale: 1.0,
        }
    }

    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.x * self.scale,
            self.y0 + b.y * self.scale,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.x0) / self.scale,
            (b.y - self.y0) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }
}

/// Frame dimensions `(height, width)` of an `H × W × 3` tensor.
pub fn frame_dims(frame: &Tensor) -> Result<(usize, usize)> {
    match frame.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => crate::error::shape_err("frame", s, &[0, 0, 3]),
    }
}

/// Square window of side `search_factor · √area` centered on `center_box`,
/// bilinearly resampled to `out_side × out_side`. Samples outside the frame
/// take the nearest edge pixel.
pub fn crop_search_region(
    frame: &Tensor,
    center_box: &BBox,
    out_side: usize,
    search_factor: f64,
) -> Result<(Tensor, CropMapping)> {
    if center_box.is_degenerate() {
        return Err(Error::DegenerateBox(format!("{center_box:?}")));
    }
    if !(search_factor > 0.0) || out_side == 0 {
        return Err(Error::Config("search_factor and output side must be positive".into()));
    }
    let (fh, fw) = frame_dims(frame)?;
    let side = search_factor * center_box.area().sqrt();
    let (cx, cy) = center_box.center();
    let map = CropMapping {
        x0: cx - side / 2.0,
        y0: cy - side / 2.0,
        scale: side / out_side as f64,
    };
    let src = frame.data();
    let px = |x: usize, y: usize, c: usize| src[(y * fw + x) * 3 + c];
    let axis = |v: f64, n: usize| -> (usize, usize, f64) {
        let v = v.clamp(0.0, (n - 1) as f64);
        let i = v.floor() as usize;
        let j = (i + 1).min(n - 1);
        (i, j, v - i as f64)
    };
    let mut out = Vec::with_capacity(out_side * out_side * 3);
    for r in 0..out_side {
        let fy = map.y0 + (r as f64 + 0.5) * map.scale - 0.5;
        let (y0, y1, ty) = axis(fy, fh);
        for c in 0..out_side {
            let fx = map.x0 + (c as f64 + 0.5) * map.scale - 0.5;
            let (x0, x1, tx) = axis(fx, fw);
            for ch in 0..3 {
                let top = px(x0, y0, ch) * (1.0 - tx) + px(x1, y0, ch) * tx;
                let bot = px(x0, y1, ch) * (1.0 - tx) + px(x1, y1, ch) * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    Ok((Tensor::new([out_side, out_side, 3], out)?, map))
}
