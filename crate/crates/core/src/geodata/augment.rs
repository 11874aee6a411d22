use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::raster::RgbImage;
use crate::rng::Rng;

/// Random crop parameters, in source-imagery pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Side of the central square, as a fraction of the crop side, inside
    /// which the ground truth may land.
    pub coverage: f64,
    pub scale_min: u32,
    pub scale_max: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            coverage: 0.75,
            scale_min: 512,
            scale_max: 1000,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(format!("coverage must be in (0, 1], got {}", self.coverage));
        }
        if self.scale_min == 0 || self.scale_min > self.scale_max {
            return Err(format!("bad scale range [{}, {}]", self.scale_min, self.scale_max));
        }
        Ok(())
    }
}

/// A crop relative to the ground truth, in source pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub side: f64,
    /// Ground truth minus crop center.
    pub offset: (f64, f64),
}

impl CropWindow {
    /// Ground truth as a fraction of the crop side, each axis in `[0, 1)`.
    pub fn gt_fraction(&self) -> (f64, f64) {
        (0.5 + self.offset.0 / self.side, 0.5 + self.offset.1 / self.side)
    }
}

/// Crop side uniform over the integer range, then the crop center placed so
/// the ground truth is uniform over the central `coverage` square.
pub fn sample_crop_window(cfg: &AugmentConfig, rng: &mut Rng) -> CropWindow {
    let side = rng.random_range(cfg.scale_min..=cfg.scale_max) as f64;
    let half = cfg.coverage * side / 2.0;
    let mut draw = || if half > 0.0 { rng.random_range(-half..half) } else { 0.0 };
    let offset = (draw(), draw());
    CropWindow { side, offset }
}

/// Crops `satellite` (whose `source_side` source pixels are stored at its
/// actual width) around `gt_px`, resampled to `out_side`. Returns the crop,
/// the ground truth in crop pixels, and whether mean fill was used.
pub fn random_crop_augment(
    satellite: &RgbImage,
    gt_px: (f64, f64),
    source_side: f64,
    cfg: &AugmentConfig,
    out_side: usize,
    rng: &mut Rng,
) -> (RgbImage, (f64, f64), bool) {
    let win = sample_crop_window(cfg, rng);
    let ratio = satellite.width as f64 / source_side;
    let side = win.side * ratio;
    let x0 = gt_px.0 - (win.side / 2.0 + win.offset.0) * ratio;
    let y0 = gt_px.1 - (win.side / 2.0 + win.offset.1) * ratio;
    let (crop, filled) = satellite.crop_resample(x0, y0, side, out_side);
    let (fx, fy) = win.gt_fraction();
    (crop, (fx * out_side as f64, fy * out_side as f64), filled)
}
