//! Tile-retrieval baseline: cut the search map into a 5x5 gallery, embed
//! every tile and the query, and answer with the center of the most similar
//! tile.
//!
//! Tiles are satellite imagery, so they go through the search-branch
//! encoder at its full input size; the query goes through the query
//! branch. Embeddings are mean-pooled tokens, L2-normalized.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::eval::Predictor;
use crate::geodata::{DataError, Dataset, RgbImage};
use crate::metrics::rds;
use crate::tensor::TensorError;

pub const GRID: usize = 5;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("empty gallery")]
    EmptyGallery,
    #[error("cannot tile a {w}x{h} image into {n}x{n}")]
    Tiling { w: usize, h: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub image: RgbImage,
    pub center: (f64, f64),
}

/// Non-overlapping `n x n` tiles in row-major order. When the side is not a
/// multiple of `n`, tile edges fall at `floor(i * side / n)`.
pub fn tile(img: &RgbImage, n: usize) -> Result<Vec<Tile>, RetrievalError> {
    if n == 0 || img.width != img.height || img.width < n {
        return Err(RetrievalError::Tiling { w: img.width, h: img.height, n });
    }
    let edge = |i: usize| i * img.width / n;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let (x0, x1, y0, y1) = (edge(j), edge(j + 1), edge(i), edge(i + 1));
            let image = RgbImage::from_fn(x1 - x0, y1 - y0, |x, y| img.pixel(x0 + x, y0 + y));
            let center = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
            out.push(Tile { image, center });
        }
    }
    Ok(out)
}

pub fn l2_normalize(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn mean_tokens(values: &[f32], channels: usize) -> Vec<f32> {
    let per = values.len() / channels;
    values.chunks(per).map(|c| c.iter().sum::<f32>() / per as f32).collect()
}

/// Query embedding: query encoder at its input side.
pub fn embed_query(pred: &Predictor, query: &RgbImage) -> Result<Vec<f32>, TensorError> {
    let m = &pred.config.model;
    let q = query.resize(m.query_side, m.query_side).to_tensor::<f32>(&pred.norm.query_mean, &pred.norm.query_std);
    let fm = pred.model.encoders.query.encode(&pred.store.bind(false), &q)?;
    Ok(l2_normalize(mean_tokens(fm.values.data(), fm.channels)))
}

/// Tile embedding: search encoder at its input side.
pub fn embed_tile(pred: &Predictor, tile: &RgbImage) -> Result<Vec<f32>, TensorError> {
    let m = &pred.config.model;
    let s = tile.resize(m.search_side, m.search_side).to_tensor::<f32>(&pred.norm.search_mean, &pred.norm.search_std);
    let fm = pred.model.encoders.search.encode(&pred.store.bind(false), &s)?;
    Ok(l2_normalize(mean_tokens(fm.values.data(), fm.channels)))
}

#[derive(Debug, Clone, Default)]
pub struct Gallery {
    pub embeddings: Vec<Vec<f32>>,
    /// Tile centers in the pixels of the image the gallery was cut from.
    pub centers: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub cosine: f32,
    pub center: (f64, f64),
}

impl Gallery {
    pub fn build(pred: &Predictor, search: &RgbImage) -> Result<Self, RetrievalError> {
        let mut g = Gallery::default();
        for t in tile(search, GRID)? {
            g.embeddings.push(embed_tile(pred, &t.image)?);
            g.centers.push(t.center);
        }
        Ok(g)
    }

    /// Most similar tile; ties go to the lowest index.
    pub fn retrieve(&self, query: &[f32]) -> Result<Hit, RetrievalError> {
        let mut best: Option<Hit> = None;
        for (i, e) in self.embeddings.iter().enumerate() {
            let c = cosine(query, e);
            if best.is_none_or(|b| c > b.cosine) {
                best = Some(Hit { index: i, cosine: c, center: self.centers[i] });
            }
        }
        best.ok_or(RetrievalError::EmptyGallery)
    }
}

/// Distance from `gt` to the nearest tile center: no tile-level answer can
/// be closer.
pub fn quantization_floor(gt: (f64, f64), centers: &[(f64, f64)]) -> f64 {
    centers.iter().map(|c| (c.0 - gt.0).hypot(c.1 - gt.1)).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub pair_id: String,
    pub rds_fpi: f64,
    pub rds_retrieval: f64,
    pub time_fpi_ms: f64,
    pub time_retrieval_ms: f64,
    pub err_retrieval_px: f64,
    pub floor_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareSummary {
    pub pairs: usize,
    pub rds_fpi_mean: f64,
    pub rds_retrieval_mean: f64,
    pub time_fpi_ms_mean: f64,
    pub time_retrieval_ms_mean: f64,
    /// `time_retrieval / time_fpi`.
    pub time_ratio: f64,
}

/// Runs both pipelines on every pair, one after the other, timing each from
/// the stored images to a pixel answer.
pub fn compare(pred: &Predictor, data: &Dataset, k: f64) -> Result<Vec<CompareRow>, RetrievalError> {
    let m = &pred.config.model;
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let pair = data.load(i)?;
        let gt = pair.meta.gt();
        let (w, h) = (pair.search.width as f64, pair.search.height as f64);

        let t0 = Instant::now();
        let (_, p) = pred.predict(&pair.query, &pair.search)?;
        let time_fpi = t0.elapsed();

        let t0 = Instant::now();
        let search = pair.search.resize(m.search_side, m.search_side);
        let gallery = Gallery::build(pred, &search)?;
        let hit = gallery.retrieve(&embed_query(pred, &pair.query)?)?;
        let time_ret = t0.elapsed();

        let scale = (w / m.search_side as f64, h / m.search_side as f64);
        let ret_px = (hit.center.0 * scale.0, hit.center.1 * scale.1);
        let centers: Vec<(f64, f64)> = gallery.centers.iter().map(|c| (c.0 * scale.0, c.1 * scale.1)).collect();
        rows.push(CompareRow {
            pair_id: pair.id,
            rds_fpi: rds(p.pixel_xy, gt, w, h, k),
            rds_retrieval: rds(ret_px, gt, w, h, k),
            time_fpi_ms: time_fpi.as_secs_f64() * 1e3,
            time_retrieval_ms: time_ret.as_secs_f64() * 1e3,
            err_retrieval_px: (ret_px.0 - gt.0).hypot(ret_px.1 - gt.1),
            floor_px: quantization_floor(gt, &centers),
        });
    }
    Ok(rows)
}

pub fn summarize(rows: &[CompareRow]) -> CompareSummary {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&CompareRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (tf, tr) = (mean(|r| r.time_fpi_ms), mean(|r| r.time_retrieval_ms));
    CompareSummary {
        pairs: rows.len(),
        rds_fpi_mean: mean(|r| r.rds_fpi),
        rds_retrieval_mean: mean(|r| r.rds_retrieval),
        time_fpi_ms_mean: tf,
        time_retrieval_ms_mean: tr,
        time_ratio: tr / tf,
    }
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<(), RetrievalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| RetrievalError::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_of_a_400_map() {
        let img = RgbImage::from_fn(400, 400, |x, y| [x as f32 / 400.0, y as f32 / 400.0, 0.0]);
        let tiles = tile(&img, 5).unwrap();
        assert_eq!(tiles.len(), 25);
        assert!(tiles.iter().all(|t| t.image.width == 80 && t.image.height == 80));
        assert_eq!(tiles[0].center, (40.0, 40.0));
        assert_eq!(tiles[24].center, (360.0, 360.0));
        // reassembly is exact
        let back = RgbImage::from_fn(400, 400, |x, y| tiles[(y / 80) * 5 + x / 80].image.pixel(x % 80, y % 80));
        assert_eq!(back, img);
        assert!(tile(&RgbImage::from_fn(4, 4, |_, _| [0.0; 3]), 5).is_err());
        assert!(tile(&RgbImage::from_fn(40, 41, |_, _| [0.0; 3]), 5).is_err());
    }

    #[test]
    fn uneven_tiles_cover_the_image() {
        let tiles = tile(&RgbImage::from_fn(96, 96, |_, _| [0.0; 3]), 5).unwrap();
        let widths: Vec<usize> = tiles[..5].iter().map(|t| t.image.width).collect();
        assert_eq!(widths, vec![19, 19, 19, 19, 20]);
        assert_eq!(widths.iter().sum::<usize>(), 96);
        assert_eq!(tiles[4].center, (86.0, 9.5));
    }

    #[test]
    fn identical_embedding_wins_with_cosine_one() {
        let g = Gallery {
            embeddings: vec![l2_normalize(vec![1.0, 0.0]), l2_normalize(vec![0.3, 0.7]), l2_normalize(vec![0.3, 0.7])],
            centers: vec![(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)],
        };
        let hit = g.retrieve(&l2_normalize(vec![0.3, 0.7])).unwrap();
        assert_eq!(hit.index, 1);
        assert!((hit.cosine - 1.0).abs() < 1e-6);
        assert!(matches!(Gallery::default().retrieve(&[1.0]), Err(RetrievalError::EmptyGallery)));
    }

    #[test]
    fn corner_floor() {
        let centers: Vec<(f64, f64)> = tile(&RgbImage::from_fn(400, 400, |_, _| [0.0; 3]), 5).unwrap().iter().map(|t| t.center).collect();
        let floor = quantization_floor((80.0, 80.0), &centers);
        assert!((floor - 40.0 * 2f64.sqrt()).abs() < 1e-12);
        // best possible answer at a tile corner: dx = dy = 40 on a 400 px map
        let best = rds((40.0, 40.0), (80.0, 80.0), 400.0, 400.0, 10.0);
        assert!((best - (-10.0f64 * 0.1).exp()).abs() < 1e-12);
    }
}
