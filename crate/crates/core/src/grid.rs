//! N x N x 7 grid targets: one grasp per cell plus a heat channel.
//!
//! Channel layout per cell (row-major over `row, col, channel`):
//! `heat, x_offset, y_offset, sin 2θ, cos 2θ, h / size, w / size`, where the
//! offsets are the grasp center's position inside its cell in `[0, 1)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{decode_angle, encode_angle, AngleCode, GraspRect};

pub const CHANNELS: usize = 7;
/// Channel order tag stored in checkpoint headers.
pub const CHANNEL_ORDER: &str = "heat,x_off,y_off,sin2t,cos2t,h_norm,w_norm";
pub const MAX_TARGET_GRASPS: usize = 5;
/// Replacement draws allowed when a sampled grasp lands in an occupied cell.
pub const COLLISION_RETRIES: usize = 16;
/// Decoded extents are floored at this many pixels.
pub const MIN_DECODED_EXTENT: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("center ({0}, {1}) outside a {2} px image")]
    OutsideImage(f64, f64, f64),
    #[error("no grasps to encode")]
    NoGrasps,
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTarget {
    pub n: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl GridTarget {
    pub fn index(n: usize, row: usize, col: usize, ch: usize) -> usize {
        (row * n + col) * CHANNELS + ch
    }

    pub fn heat(&self, row: usize, col: usize) -> f64 {
        self.values[Self::index(self.n, row, col, 0)]
    }

    pub fn heat_cells(&self) -> Vec<(usize, usize)> {
        let n = self.n;
        (0..n * n).map(|i| (i / n, i % n)).filter(|&(r, c)| self.heat(r, c) == 1.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedGrasp {
    pub grasp: GraspRect,
    pub confidence: f64,
    pub cell: (usize, usize),
}

pub fn cell_of(x: f64, y: f64, n: usize, image_size: f64) -> Result<(usize, usize), GridError> {
    if !(x >= 0.0 && y >= 0.0 && x < image_size && y < image_size) {
        return Err(GridError::OutsideImage(x, y, image_size));
    }
    let col = ((x * n as f64 / image_size).floor() as usize).min(n - 1);
    let row = ((y * n as f64 / image_size).floor() as usize).min(n - 1);
    Ok((row, col))
}

/// The six regression coordinates of `g` relative to cell `(row, col)`.
fn cell_coords(g: &GraspRect, row: usize, col: usize, n: usize, size: f64) -> [f64; 6] {
    let cell = size / n as f64;
    let a = encode_angle(g.theta);
    [g.x / cell - col as f64, g.y / cell - row as f64, a.s, a.c, g.h / size, g.w / size]
}

/// Builds a training target from up to five randomly chosen grasps, at most
/// one per cell. A pick that collides with an occupied cell is redrawn from
/// the unused grasps a bounded number of times, then dropped.
pub fn encode_targets<R: Rng + ?Sized>(
    grasps: &[GraspRect],
    n: usize,
    image_size: f64,
    rng: &mut R,
) -> Result<GridTarget, GridError> {
    if grasps.is_empty() {
        return Err(GridError::NoGrasps);
    }
    let cells: Vec<(usize, usize)> = grasps.iter().map(|g| cell_of(g.x, g.y, n, image_size)).collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..grasps.len()).collect();
    order.shuffle(rng);
    let wanted = MAX_TARGET_GRASPS.min(grasps.len());
    let mut picked: Vec<usize> = Vec::with_capacity(wanted);
    let mut next = 0;
    let mut retries = 0;
    while picked.len() < wanted && next < order.len() {
        let cand = order[next];
        next += 1;
        if picked.iter().any(|&p| cells[p] == cells[cand]) {
            retries += 1;
            if retries > COLLISION_RETRIES {
                break;
            }
            continue;
        }
        picked.push(cand);
    }

    let mut values = vec![0.0; n * n * CHANNELS];
    let mut mask = vec![false; n * n * CHANNELS];
    for i in 0..n * n {
        mask[i * CHANNELS] = true;
    }
    for &p in &picked {
        let (r, c) = cells[p];
        let base = GridTarget::index(n, r, c, 0);
        values[base] = 1.0;
        let coords = cell_coords(&grasps[p], r, c, n, image_size);
        values[base + 1..base + CHANNELS].copy_from_slice(&coords);
        mask[base + 1..base + CHANNELS].iter_mut().for_each(|m| *m = true);
    }
    Ok(GridTarget { n, values, mask })
}

fn decode_cell(v: &[f64], row: usize, col: usize, n: usize, size: f64) -> GraspRect {
    let cell = size / n as f64;
    GraspRect {
        x: (col as f64 + v[0]) * cell,
        y: (row as f64 + v[1]) * cell,
        theta: decode_angle(AngleCode { s: v[2], c: v[3] }),
        h: (v[4] * size).max(MIN_DECODED_EXTENT),
        w: (v[5] * size).max(MIN_DECODED_EXTENT),
    }
}

/// One grasp per cell, sorted by heat (descending), ties by `(row, col)`.
pub fn decode_predictions(tensor: &[f64], n: usize, image_size: f64) -> Result<Vec<RankedGrasp>, GridError> {
    if tensor.len() != n * n * CHANNELS {
        return Err(GridError::Shape { expected: n * n * CHANNELS, got: tensor.len() });
    }
    let mut out: Vec<RankedGrasp> = (0..n * n)
        .map(|i| {
            let (row, col) = (i / n, i % n);
            let v = &tensor[i * CHANNELS..(i + 1) * CHANNELS];
            RankedGrasp { grasp: decode_cell(&v[1..], row, col, n, image_size), confidence: v[0], cell: (row, col) }
        })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.cell.cmp(&b.cell)));
    Ok(out)
}

/// Squared error over masked-in entries, and its gradient (zero elsewhere).
pub fn multigrasp_loss(prediction: &[f64], target: &GridTarget) -> Result<(f64, Vec<f64>), GridError> {
    if prediction.len() != target.values.len() {
        return Err(GridError::Shape { expected: target.values.len(), got: prediction.len() });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; prediction.len()];
    for i in 0..prediction.len() {
        if target.mask[i] {
            let d = prediction[i] - target.values[i];
            loss += d * d;
            grad[i] = 2.0 * d;
        }
    }
    Ok((loss, grad))
}
