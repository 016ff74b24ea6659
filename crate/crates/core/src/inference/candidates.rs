use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::config::ModelConfig;
use crate::numerics::Tensor;
use crate::predictor::{argmax, cell_box, decode_bbox};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    pub score: f64,
    pub cell: (usize, usize),
}

/// Inclusive range of grid indices whose footprint `[i·p, (i+1)·p)` meets
/// `[lo, hi]`, widened by `radius` and clamped to the grid.
fn footprint(lo: f64, hi: f64, p: f64, g: usize, radius: usize) -> (usize, usize) {
    let last = g as f64 - 1.0;
    let a = (lo / p).floor().clamp(0.0, last) as usize;
    let b = ((hi / p).ceil() - 1.0).clamp(0.0, last) as usize;
    let (a, b) = (a.min(b), a.max(b));
    (a.saturating_sub(radius), (b + radius).min(g - 1))
}

/// Cells suppressed when looking for the runner-up: the footprint of the
/// first candidate's box plus `radius` cells, always including its own cell.
pub fn suppression_mask(first: &Candidate, cfg: &ModelConfig, radius: usize) -> Vec<bool> {
    let g = cfg.grid();
    let p = cfg.patch as f64;
    let b = &first.bbox;
    let (r0, r1) = footprint(b.y, b.y2(), p, g, radius);
    let (c0, c1) = footprint(b.x, b.x2(), p, g, radius);
    let mut mask = vec![false; g * g];
    for r in r0..=r1 {
        for c in c0..=c1 {
            mask[r * g + c] = true;
        }
    }
    mask[first.cell.0 * g + first.cell.1] = true;
    mask
}

/// Best candidate and, unless every cell is suppressed, the best candidate
/// outside the first one's dilated footprint. Boxes are in network-input
/// pixels.
pub fn top2_candidates(
    score: &Tensor,
    ltrb: &Tensor,
    cfg: &ModelConfig,
    mask_radius_cells: usize,
) -> Result<(Candidate, Option<Candidate>)> {
    let (bbox, s, cell) = decode_bbox(score, ltrb, cfg)?;
    let first = Candidate {
        bbox,
        score: s,
        cell,
    };
    let mask = suppression_mask(&first, cfg, mask_radius_cells);
    let masked: Vec<f64> = score
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, m)| if *m { f64::NEG_INFINITY } else { *v })
        .collect();
    let g = cfg.grid();
    let second = argmax(&masked).filter(|&i| !mask[i]).map(|i| {
        let (r, c) = (i / g, i % g);
        Candidate {
            bbox: cell_box(r, c, &ltrb.data()[i * 4..i * 4 + 4], cfg),
            score: score.data()[i],
            cell: (r, c),
        }
    });
    Ok((first, second))
}
