//! Inference on stored pairs, dataset evaluation and heatmap export.

use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::fusion::{Heatmap, Prediction};
use crate::geodata::{DataError, Dataset, RgbImage};
use crate::metrics::{rds, EvalRecord};
use crate::model::FpiModel;
use crate::params::ParamStore;
use crate::tensor::TensorError;
use crate::train::{augmented_crop, Normalization, Prepared};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite heatmap for {0}")]
    Numeric(String),
}

/// A trained model ready for inference.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: RunConfig,
    pub model: FpiModel,
    pub store: ParamStore<f32>,
    pub norm: Normalization,
}

impl Predictor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        Ok(Predictor {
            config: ck.header.config.clone(),
            model: ck.model()?,
            store: ck.store.clone(),
            norm: ck.header.normalization.clone(),
        })
    }

    /// Whether inputs of these sizes will be resized to the model's sides.
    pub fn needs_resize(&self, query: &RgbImage, search: &RgbImage) -> bool {
        let m = &self.config.model;
        query.width != m.query_side || query.height != m.query_side || search.width != m.search_side || search.height != m.search_side
    }

    /// Heatmap and prediction for model-sized inputs (model pixel space).
    pub fn run(&self, query: &RgbImage, search: &RgbImage) -> Result<(Heatmap, Prediction), TensorError> {
        let n = &self.norm;
        let q = query.to_tensor::<f32>(&n.query_mean, &n.query_std);
        let s = search.to_tensor::<f32>(&n.search_mean, &n.search_std);
        self.model.predict(&self.store.bind(false), &q, &s)
    }

    /// Resizes both images to the model sides as needed and maps the
    /// prediction back to `search` pixels.
    pub fn predict(&self, query: &RgbImage, search: &RgbImage) -> Result<(Heatmap, Prediction), TensorError> {
        let m = &self.config.model;
        let q = query.resize(m.query_side, m.query_side);
        let s = search.resize(m.search_side, m.search_side);
        let (heat, pred) = self.run(&q, &s)?;
        let (sx, sy) = (search.width as f64 / m.search_side as f64, search.height as f64 / m.search_side as f64);
        let pixel_xy = (pred.pixel_xy.0 * sx, pred.pixel_xy.1 * sy);
        Ok((heat, Prediction { pixel_xy, ..pred }))
    }
}

/// Scores every pair of `data`, in dataset order.
pub fn evaluate(pred: &Predictor, data: &Dataset, k: f64) -> Result<Vec<EvalRecord>, EvalError> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let pair = data.load(i)?;
            let (heat, p) = pred.predict(&pair.query, &pair.search)?;
            if !heat.grid.all_finite() {
                return Err(EvalError::Numeric(pair.id));
            }
            let side = pair.search.width as f64;
            Ok(EvalRecord::score(
                pair.id,
                p.pixel_xy,
                pair.meta.gt(),
                side,
                pair.meta.meters_per_pixel,
                pair.meta.scale_bucket,
                pair.meta.altitude_m,
                k,
            ))
        })
        .collect()
}

/// Score of one fixed-seed training crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropScore {
    pub rds: f64,
    /// Euclidean error in response-grid cells.
    pub cell_error: f64,
}

/// Evaluates `crops_per_pair` augmented crops of every training pair, with
/// crop seeds derived from `seed` (disjoint from the ones training uses).
pub fn score_training_crops(pred: &Predictor, pairs: &[Prepared], crops_per_pair: usize, seed: u64) -> Result<Vec<CropScore>, EvalError> {
    let side = pred.config.model.search_side as f64;
    let cell = side / pred.config.model.search_grid() as f64;
    let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|i| (0..crops_per_pair).map(move |j| (i, j))).collect();
    jobs.par_iter()
        .map(|&(i, j)| {
            let s = crate::rng::derive(seed, &[0xc0, i as u64, j as u64]);
            let (crop, gt) = augmented_crop(&pred.config, &pairs[i], s);
            let (_, p) = pred.run(&pairs[i].query, &crop)?;
            let err = (p.pixel_xy.0 - gt.0).hypot(p.pixel_xy.1 - gt.1);
            Ok(CropScore {
                rds: rds(p.pixel_xy, gt, side, side, 10.0),
                cell_error: err / cell,
            })
        })
        .collect()
}

/// Heatmap as an 8-bit grayscale image of the given size, min-max scaled.
pub fn heatmap_image(heat: &Heatmap, width: usize, height: usize) -> Result<image::GrayImage, TensorError> {
    let up = heat.upsampled()?;
    let vals = up.to_f64_vec();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let s = heat.search_side_px;
    let img = RgbImage::from_fn(s, s, |x, y| [((vals[y * s + x] - lo) / span) as f32; 3]).resize(width, height);
    Ok(image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([(img.get(0, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}
