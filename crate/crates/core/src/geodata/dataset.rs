//! On-disk layout: `<root>/<split>/<pair_id>/{query.png, search_<scale>.png,
//! meta.json}`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::meters_per_pixel;
use super::raster::RgbImage;
use crate::rng::{rng, Rng};

/// Test sweep of source crop sides: 700 to 1800 px in steps of 100.
pub const TEST_SCALES: [u32; 12] = [700, 800, 900, 1000, 1100, 1200, 1300, 1400, 1500, 1600, 1700, 1800];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: malformed metadata: {detail}")]
    Meta { path: PathBuf, detail: String },
    #[error("no samples under {0}")]
    NoSamples(PathBuf),
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }

    fn meta(path: &Path, detail: impl Into<String>) -> Self {
        DataError::Meta { path: path.to_path_buf(), detail: detail.into() }
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub lat: f64,
    pub lon: f64,
    pub altitude_m: f64,
    /// Ground truth in the stored search image, pixels.
    pub gt_pixel_xy: [f64; 2],
    /// Of the stored search image.
    pub meters_per_pixel: f64,
    /// Source crop side in pixels.
    pub scale_bucket: u32,
    /// `"synthetic"` or `"ul14"`.
    pub source: String,
    /// Shared by every scale of one test query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default)]
    pub mean_filled: bool,
}

impl PairMeta {
    fn validate(&self, path: &Path) -> Result<(), DataError> {
        if !(self.lat.abs() <= 90.0 && self.lon.abs() <= 180.0) {
            return Err(DataError::meta(path, format!("lat/lon out of range: {}, {}", self.lat, self.lon)));
        }
        if !(self.meters_per_pixel > 0.0 && self.meters_per_pixel.is_finite()) {
            return Err(DataError::meta(path, "meters_per_pixel must be positive"));
        }
        if self.scale_bucket == 0 {
            return Err(DataError::meta(path, "scale_bucket must be positive"));
        }
        if !self.gt_pixel_xy.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(DataError::meta(path, "gt_pixel_xy must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn gt(&self) -> (f64, f64) {
        (self.gt_pixel_xy[0], self.gt_pixel_xy[1])
    }
}

#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    pub query: RgbImage,
    pub search: RgbImage,
    pub meta: PairMeta,
}

pub fn write_pair(dir: &Path, query: &RgbImage, search: &RgbImage, meta: &PairMeta) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let save = |img: &RgbImage, name: String| {
        let p = dir.join(name);
        img.save_png(&p).map_err(|source| DataError::Image { path: p, source })
    };
    save(query, "query.png".into())?;
    save(search, format!("search_{}.png", meta.scale_bucket))?;
    let p = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    fs::write(&p, text + "\n").map_err(|e| DataError::io(&p, e))
}

fn read_meta(dir: &Path) -> Result<PairMeta, DataError> {
    let p = dir.join("meta.json");
    let text = fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))?;
    let meta: PairMeta = serde_json::from_str(&text).map_err(|e| DataError::meta(&p, e.to_string()))?;
    meta.validate(&p)?;
    Ok(meta)
}

fn load_png(path: PathBuf) -> Result<RgbImage, DataError> {
    if !path.is_file() {
        return Err(DataError::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing file")));
    }
    RgbImage::load_png(&path).map_err(|source| DataError::Image { path, source })
}

pub fn load_pair(dir: &Path) -> Result<SamplePair, DataError> {
    let meta = read_meta(dir)?;
    let query = load_png(dir.join("query.png"))?;
    let search = load_png(dir.join(format!("search_{}.png", meta.scale_bucket)))?;
    let (x, y) = meta.gt();
    if x >= search.width as f64 || y >= search.height as f64 {
        return Err(DataError::meta(
            &dir.join("meta.json"),
            format!("ground truth ({x}, {y}) outside {}x{} search image", search.width, search.height),
        ));
    }
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(SamplePair { id, query, search, meta })
}

/// A validated split directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub metas: Vec<PairMeta>,
}

impl Dataset {
    /// Indexes every pair directory under `root` (sorted by name) and
    /// validates its metadata. Images are read lazily by [`Dataset::load`].
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let entries = fs::read_dir(root).map_err(|e| DataError::io(root, e))?;
        let mut dirs = Vec::new();
        for e in entries {
            let e = e.map_err(|e| DataError::io(root, e))?;
            if e.path().is_dir() {
                dirs.push(e.path());
            }
        }
        dirs.sort();
        if dirs.is_empty() {
            return Err(DataError::NoSamples(root.to_path_buf()));
        }
        let mut ids = Vec::with_capacity(dirs.len());
        let mut metas = Vec::with_capacity(dirs.len());
        for d in &dirs {
            metas.push(read_meta(d)?);
            ids.push(d.file_name().expect("dir entry has a name").to_string_lossy().into_owned());
        }
        Ok(Dataset { root: root.to_path_buf(), ids, metas })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<SamplePair, DataError> {
        load_pair(&self.root.join(&self.ids[i]))
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>, DataError> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    /// Index batches covering every pair once, in an order fixed by `seed`.
    /// The last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng(seed));
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Something that can render a square window around a point, in source
/// pixel coordinates.
pub trait Source {
    /// Window of `side` source pixels centered at `center`, at `out_side`
    /// px. The flag reports whether part of it had to be mean-filled.
    fn window(&self, center: (f64, f64), side: f64, out_side: usize) -> (RgbImage, bool);
}

/// A raster whose pixels each span `source_px` source pixels.
impl Source for (&RgbImage, f64) {
    fn window(&self, center: (f64, f64), side: f64, out_side: usize) -> (RgbImage, bool) {
        let (img, k) = *self;
        let s = side / k;
        img.crop_resample(center.0 / k - s / 2.0, center.1 / k - s / 2.0, s, out_side)
    }
}

#[derive(Debug, Clone)]
pub struct ScaledCrop {
    pub scale: u32,
    pub image: RgbImage,
    pub gt_px: (f64, f64),
    pub meters_per_pixel: f64,
    pub mean_filled: bool,
}

/// One crop per scale with the ground truth uniform inside the central
/// `coverage` square, each resized to `out_side`.
pub fn build_test_scales(
    source: &impl Source,
    gt: (f64, f64),
    scales: &[u32],
    coverage: f64,
    out_side: usize,
    rng: &mut Rng,
) -> Vec<ScaledCrop> {
    let lo = (1.0 - coverage) / 2.0;
    scales
        .iter()
        .map(|&scale| {
            let side = scale as f64;
            let mut frac = || if coverage > 0.0 { rng.random_range(lo..lo + coverage) } else { 0.5 };
            let f = (frac(), frac());
            let center = (gt.0 + (0.5 - f.0) * side, gt.1 + (0.5 - f.1) * side);
            let (image, mean_filled) = source.window(center, side, out_side);
            ScaledCrop {
                scale,
                image,
                gt_px: (f.0 * out_side as f64, f.1 * out_side as f64),
                meters_per_pixel: meters_per_pixel(side, out_side as f64),
                mean_filled,
            }
        })
        .collect()
}
