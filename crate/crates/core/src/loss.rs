//! Balance loss: class-balanced binary cross-entropy over the response grid.
//!
//! The cell nearest the ground truth (or an `R x R` block around it) is
//! positive and every other cell negative. Positives share weight `1/N_pos`,
//! negatives share `w_neg/N_neg`, and the weights are normalized to sum to
//! one, so the positive to negative mass ratio is `1 : w_neg`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::HeatGeometry;
use crate::tensor::{Element, Tensor, TensorError};

/// Lower clamp on log arguments.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("ground truth ({x}, {y}) outside a {side} px map")]
    OutsideMap { x: f64, y: f64, side: f64 },
    #[error("positive region R must be at least 1")]
    ZeroRegion,
    #[error("label has no {0} cells")]
    Degenerate(&'static str),
    #[error("map shape {map:?} does not match a {h}x{w} label")]
    Shape { map: Vec<usize>, h: usize, w: usize },
    #[error("negative weight must be finite and >= 0, got {0}")]
    NegWeight(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How `N_pos` is counted when the positive block is clipped by the border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositiveCount {
    /// `N_pos = R^2` regardless of clipping.
    #[default]
    Nominal,
    /// `N_pos` = positives that survive clipping.
    Actual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_neg: f64,
    pub r: usize,
    #[serde(default)]
    pub positive_count: PositiveCount,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_neg: 15.0,
            r: 1,
            positive_count: PositiveCount::Nominal,
        }
    }
}

/// Binary target grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub h: usize,
    pub w: usize,
    pub t: Vec<u8>,
    /// Nearest cell to the ground truth, `(row, col)`.
    pub gt_cell: (usize, usize),
    pub r: usize,
}

impl LabelGrid {
    pub fn positives(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1).count()
    }
}

/// Label for a `grid x grid` token map whose cell centers sit at
/// `(i + 0.5) * side / grid`.
pub fn build_label(gt_xy: (f64, f64), side_px: f64, grid: usize, r: usize) -> Result<LabelGrid, LossError> {
    build_label_in(&HeatGeometry::cells(side_px, grid), gt_xy, r)
}

/// Label on an arbitrary response geometry.
///
/// Odd `R` centers an `R x R` block on the nearest cell. Even `R` takes the
/// block whose cell centers surround the ground truth (for `R = 2`, the
/// four cells around it). Blocks are clipped at the border.
pub fn build_label_in(geom: &HeatGeometry, gt_xy: (f64, f64), r: usize) -> Result<LabelGrid, LossError> {
    let (x, y) = gt_xy;
    let side = geom.side_px;
    if !(x >= 0.0 && y >= 0.0 && x < side && y < side) {
        return Err(LossError::OutsideMap { x, y, side });
    }
    if r == 0 {
        return Err(LossError::ZeroRegion);
    }
    let g = geom.grid as i64;
    let near = (geom.nearest(y), geom.nearest(x));
    let start = |px: f64, nearest: usize| -> i64 {
        if r % 2 == 1 {
            nearest as i64 - (r as i64 - 1) / 2
        } else {
            geom.to_cell(px).floor() as i64 - (r as i64 / 2 - 1)
        }
    };
    let (r0, c0) = (start(y, near.0), start(x, near.1));
    let mut t = vec![0u8; geom.grid * geom.grid];
    for row in r0..r0 + r as i64 {
        for col in c0..c0 + r as i64 {
            if (0..g).contains(&row) && (0..g).contains(&col) {
                t[(row * g + col) as usize] = 1;
            }
        }
    }
    Ok(LabelGrid {
        h: geom.grid,
        w: geom.grid,
        t,
        gt_cell: near,
        r,
    })
}

/// Per-cell weights after normalization.
pub fn balance_weights(label: &LabelGrid, w_neg: f64, count: PositiveCount) -> Result<Vec<f64>, LossError> {
    if !(w_neg >= 0.0 && w_neg.is_finite()) {
        return Err(LossError::NegWeight(w_neg));
    }
    let cells = label.h * label.w;
    let actual = label.positives();
    if actual == 0 {
        return Err(LossError::Degenerate("positive"));
    }
    let n_pos = match count {
        PositiveCount::Nominal => label.r * label.r,
        PositiveCount::Actual => actual,
    };
    if actual == cells || n_pos >= cells {
        return Err(LossError::Degenerate("negative"));
    }
    let n_neg = cells - n_pos;
    let w_pos = 1.0 / n_pos as f64;
    let w_negc = w_neg / n_neg as f64;
    let raw: Vec<f64> = label.t.iter().map(|&t| if t == 1 { w_pos } else { w_negc }).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(LossError::Degenerate("weighted"));
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// `-sum(t * w * ln p + (1 - t) * w * ln(1 - p))` with `p = sigmoid(map)`.
///
/// `map` may be `H x W` or `1 x H x W`. `1 - p` is evaluated as
/// `sigmoid(-map)`, which is the same quantity without cancellation.
pub fn balance_loss<T: Element>(map: &Tensor<T>, label: &LabelGrid, cfg: &LossConfig) -> Result<Tensor<T>, LossError> {
    let cells: usize = map.shape().iter().product();
    let shape_ok = matches!(map.shape(), [h, w] | [1, h, w] if *h == label.h && *w == label.w);
    if !shape_ok || cells != label.t.len() {
        return Err(LossError::Shape {
            map: map.shape().to_vec(),
            h: label.h,
            w: label.w,
        });
    }
    let weights = balance_weights(label, cfg.w_neg, cfg.positive_count)?;
    let shape = map.shape().to_vec();
    let pos_w: Vec<T> = weights.iter().zip(&label.t).map(|(&w, &t)| T::cast(w * t as f64)).collect();
    let neg_w: Vec<T> = weights
        .iter()
        .zip(&label.t)
        .map(|(&w, &t)| T::cast(w * (1 - t) as f64))
        .collect();
    let pos_w = Tensor::new(&shape, pos_w)?;
    let neg_w = Tensor::new(&shape, neg_w)?;
    let log_p = map.sigmoid().ln_clamped(LOG_EPS);
    let log_q = map.neg().sigmoid().ln_clamped(LOG_EPS);
    let total = log_p.mul(&pos_w)?.sum().add(&log_q.mul(&neg_w)?.sum())?;
    Ok(total.neg())
}
