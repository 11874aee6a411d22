//! Training loop: random crop, forward, balance loss, backward, AdamW.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::geodata::{random_crop_augment, DataError, Dataset, RgbImage, SamplePair};
use crate::loss::{balance_loss, build_label_in, LossError};
use crate::metrics::rds;
use crate::model::FpiModel;
use crate::optim::{AdamW, OptimError};
use crate::params::ParamStore;
use crate::rng::{derive, rng};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}")]
    Numeric { step: usize, loss: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("training log: {0}")]
    Log(#[from] csv::Error),
}

/// Per-channel input standardization, fitted on the training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub query_mean: [f64; 3],
    pub query_std: [f64; 3],
    pub search_mean: [f64; 3],
    pub search_std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            query_mean: [0.0; 3],
            query_std: [1.0; 3],
            search_mean: [0.0; 3],
            search_std: [1.0; 3],
        }
    }

    pub fn fit(pairs: &[SamplePair]) -> Self {
        let stats = |imgs: &mut dyn Iterator<Item = &RgbImage>| {
            let (mut sum, mut sq, mut n) = ([0.0f64; 3], [0.0f64; 3], 0usize);
            for img in imgs {
                let plane = img.width * img.height;
                for c in 0..3 {
                    for &v in &img.data[c * plane..(c + 1) * plane] {
                        sum[c] += v as f64;
                        sq[c] += (v as f64).powi(2);
                    }
                }
                n += plane;
            }
            let n = n.max(1) as f64;
            let mean = sum.map(|s| s / n);
            let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c].powi(2)).max(0.0).sqrt().max(1e-3));
            (mean, std)
        };
        let (query_mean, query_std) = stats(&mut pairs.iter().map(|p| &p.query));
        let (search_mean, search_std) = stats(&mut pairs.iter().map(|p| &p.search));
        Normalization { query_mean, query_std, search_mean, search_std }
    }
}

/// A training pair held in memory with its query already at model size.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub query: RgbImage,
    pub satellite: RgbImage,
    pub gt: (f64, f64),
    /// Source pixels spanned by `satellite`.
    pub source_side: f64,
}

impl Prepared {
    pub fn new(pair: &SamplePair, query_side: usize) -> Self {
        Prepared {
            id: pair.id.clone(),
            query: pair.query.resize(query_side, query_side),
            satellite: pair.search.clone(),
            gt: pair.meta.gt(),
            source_side: pair.meta.scale_bucket as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_rds: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

struct SampleResult {
    loss: f64,
    grads: Vec<Vec<f32>>,
    rds: f64,
}

/// Loss, gradients and training-crop RDS of one augmented sample.
fn run_sample(
    model: &FpiModel,
    store: &ParamStore<f32>,
    norm: &Normalization,
    cfg: &RunConfig,
    pair: &Prepared,
    seed: u64,
) -> Result<SampleResult, TrainError> {
    let side = cfg.model.search_side;
    let (crop, gt) = augmented_crop(cfg, pair, seed);
    let q = pair.query.to_tensor::<f32>(&norm.query_mean, &norm.query_std);
    let s = crop.to_tensor::<f32>(&norm.search_mean, &norm.search_std);
    let p = store.bind(true);
    let heat = model.forward_pair(&p, &q, &s)?;
    let label = build_label_in(&heat.geometry, gt, cfg.loss.r)?;
    let loss = balance_loss(&heat.grid, &label, &cfg.loss)?;
    let value = loss.item()? as f64;
    loss.backward()?;
    let pred = heat.decode()?;
    Ok(SampleResult {
        loss: value,
        grads: p.take_grads(),
        rds: rds(pred.pixel_xy, gt, side as f64, side as f64, 10.0),
    })
}

/// The crop `train` would draw for `pair` under `seed`.
pub fn augmented_crop(cfg: &RunConfig, pair: &Prepared, seed: u64) -> (RgbImage, (f64, f64)) {
    let (crop, gt, _) = random_crop_augment(
        &pair.satellite,
        pair.gt,
        pair.source_side,
        &cfg.augment,
        cfg.model.search_side,
        &mut rng(seed),
    );
    (crop, gt)
}

pub fn load_training_set(data: &Dataset, query_side: usize) -> Result<(Vec<Prepared>, Normalization), DataError> {
    let pairs = data.load_all()?;
    let norm = Normalization::fit(&pairs);
    Ok((pairs.iter().map(|p| Prepared::new(p, query_side)).collect(), norm))
}

/// Trains from scratch. A checkpoint is written to `ckpt_out` after every
/// epoch (and after the final step); one log row per epoch goes to
/// `log_out` if given.
pub fn train(cfg: &RunConfig, data: &Dataset, ckpt_out: &Path, log_out: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let (pairs, norm) = load_training_set(data, cfg.model.query_side)?;
    let (model, mut store) = FpiModel::init::<f32>(cfg.model.clone(), &mut rng(derive(cfg.seed, &[0])))
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut opt = AdamW::<f32>::new(cfg.optimizer, &store.sizes());
    let sched = &cfg.schedule;
    let steps_per_epoch = pairs.len().div_ceil(sched.batch_size);
    let total = sched.total_steps(steps_per_epoch);
    let mut log_writer = match log_out {
        Some(p) => Some(csv::Writer::from_path(p)?),
        None => None,
    };
    let mut log = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    let start = Instant::now();
    let mut checkpoint = Checkpoint::new(cfg.clone(), norm.clone(), 0, 0, store.clone());
    while step < total {
        let (mut loss_sum, mut rds_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut lr = cfg.optimizer.lr;
        for batch in data.batches(sched.batch_size, derive(cfg.seed, &[1, epoch as u64])) {
            if step >= total {
                break;
            }
            let results: Vec<SampleResult> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let seed = derive(cfg.seed, &[2, step as u64, slot as u64]);
                    run_sample(&model, &store, &norm, cfg, &pairs[i], seed)
                })
                .collect::<Result<_, _>>()?;
            let n = results.len() as f32;
            let mut grads: Vec<Vec<f32>> = store.sizes().iter().map(|&k| vec![0.0; k]).collect();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                rds_sum += r.rds;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b / n);
                }
            }
            if !batch_loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(TrainError::Numeric { step, loss: batch_loss / n as f64 });
            }
            loss_sum += batch_loss;
            seen += results.len();
            lr = cfg.optimizer.lr * sched.lr_factor(step, steps_per_epoch);
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut store.all_values_mut(), &grad_refs, lr)?;
            step += 1;
            log::debug!("step {step}/{total} loss {:.5}", batch_loss / n as f64);
        }
        epoch += 1;
        let row = EpochLog {
            epoch,
            step,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            train_rds: rds_sum / seen.max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} step {} lr {:.2e} loss {:.5} train-RDS {:.4}",
            row.epoch,
            row.step,
            row.lr,
            row.loss,
            row.train_rds
        );
        if let Some(w) = log_writer.as_mut() {
            w.serialize(&row)?;
            w.flush().map_err(|e| TrainError::Log(e.into()))?;
        }
        log.push(row);
        checkpoint = Checkpoint::new(cfg.clone(), norm.clone(), step, epoch, store.clone());
        checkpoint.save(ckpt_out)?;
    }
    if log.is_empty() {
        checkpoint.save(ckpt_out)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
