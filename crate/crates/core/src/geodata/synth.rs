//! Procedural aerial scenes. A scene is a continuous function of ground
//! position (meters, x east, y south, origin at the ground truth), so any
//! window can be rendered at any resolution, and a "drone" view is the same
//! ground re-rendered with a different palette, rotation and exposure.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{build_test_scales, write_pair, DataError, PairMeta, Source};
use super::raster::RgbImage;
use super::{meters_per_pixel, GeoFrame, SOURCE_METERS_PER_PIXEL};
use crate::rng::{derive, rng, splitmix, Rng};

type Rgb = [f32; 3];

/// Colors per land-cover class.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub water: Rgb,
    pub fields: [Rgb; 3],
    pub forest: Rgb,
    pub soil: Rgb,
    pub road: Rgb,
    pub roofs: [Rgb; 4],
    /// Amplitude of the fine brightness texture.
    pub texture: f32,
}

impl Palette {
    pub fn satellite() -> Self {
        Palette {
            water: [0.16, 0.24, 0.30],
            fields: [[0.45, 0.50, 0.30], [0.60, 0.58, 0.40], [0.36, 0.44, 0.26]],
            forest: [0.17, 0.27, 0.16],
            soil: [0.52, 0.45, 0.36],
            road: [0.55, 0.55, 0.53],
            roofs: [[0.70, 0.68, 0.66], [0.55, 0.30, 0.25], [0.35, 0.40, 0.48], [0.85, 0.82, 0.75]],
            texture: 0.18,
        }
    }

    /// Brighter, more saturated, slightly warmer: a different sensor.
    pub fn drone() -> Self {
        Palette {
            water: [0.10, 0.32, 0.42],
            fields: [[0.42, 0.62, 0.22], [0.74, 0.70, 0.38], [0.30, 0.55, 0.18]],
            forest: [0.12, 0.36, 0.12],
            soil: [0.66, 0.52, 0.36],
            road: [0.48, 0.47, 0.50],
            roofs: [[0.82, 0.80, 0.78], [0.72, 0.30, 0.22], [0.30, 0.42, 0.60], [0.95, 0.92, 0.85]],
            texture: 0.12,
        }
    }
}

#[derive(Debug, Clone)]
struct Road {
    point: (f64, f64),
    dir: (f64, f64),
    half_width: f64,
}

#[derive(Debug, Clone)]
struct Building {
    center: (f64, f64),
    half: (f64, f64),
    cos: f64,
    sin: f64,
    roof: usize,
}

const BUCKET_M: f64 = 40.0;

#[derive(Debug, Clone)]
pub struct Scene {
    seed: u64,
    parcel_angle: (f64, f64),
    parcel_size: f64,
    roads: Vec<Road>,
    buildings: Vec<Building>,
    /// Building indices per `BUCKET_M` grid cell, keyed by cell coords.
    index: std::collections::HashMap<(i64, i64), Vec<usize>>,
}

/// Half extent in meters of the region populated with roads and buildings.
const EXTENT_M: f64 = 700.0;

impl Scene {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(derive(seed, &[0]));
        let a: f64 = r.random_range(0.0..std::f64::consts::PI);
        let n_roads = r.random_range(3..=6);
        let roads = (0..n_roads)
            .map(|_| {
                let t: f64 = r.random_range(0.0..std::f64::consts::PI);
                Road {
                    point: (r.random_range(-300.0..300.0), r.random_range(-300.0..300.0)),
                    dir: (t.cos(), t.sin()),
                    half_width: r.random_range(2.0..5.0),
                }
            })
            .collect();
        let n_buildings = r.random_range(250..500);
        let buildings: Vec<Building> = (0..n_buildings)
            .map(|_| {
                let t: f64 = r.random_range(0.0..std::f64::consts::PI);
                Building {
                    center: (r.random_range(-EXTENT_M..EXTENT_M), r.random_range(-EXTENT_M..EXTENT_M)),
                    half: (r.random_range(4.0..16.0), r.random_range(4.0..12.0)),
                    cos: t.cos(),
                    sin: t.sin(),
                    roof: r.random_range(0..4),
                }
            })
            .collect();
        let mut index: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
        for (i, b) in buildings.iter().enumerate() {
            let reach = b.half.0.hypot(b.half.1);
            let lo = bucket((b.center.0 - reach, b.center.1 - reach));
            let hi = bucket((b.center.0 + reach, b.center.1 + reach));
            for bx in lo.0..=hi.0 {
                for by in lo.1..=hi.1 {
                    index.entry((bx, by)).or_default().push(i);
                }
            }
        }
        Scene {
            seed,
            parcel_angle: (a.cos(), a.sin()),
            parcel_size: r.random_range(25.0..50.0),
            roads,
            buildings,
            index,
        }
    }

    /// Color of the ground at `(x, y)` meters.
    pub fn color(&self, x: f64, y: f64, pal: &Palette) -> Rgb {
        let tex = fbm(self.seed ^ 0x7e, x / 5.0, y / 5.0, 2) as f32 - 0.5;
        let shade = |c: Rgb| -> Rgb { c.map(|v| (v * (1.0 + pal.texture * tex)).clamp(0.0, 1.0)) };
        for &i in self.index.get(&bucket((x, y))).map(Vec::as_slice).unwrap_or(&[]) {
            let b = &self.buildings[i];
            let (dx, dy) = (x - b.center.0, y - b.center.1);
            let (u, v) = (dx * b.cos + dy * b.sin, -dx * b.sin + dy * b.cos);
            if u.abs() <= b.half.0 && v.abs() <= b.half.1 {
                // a ridge line splits the roof into two tones
                let side = if v > 0.0 { 0.9 } else { 1.0 };
                return pal.roofs[b.roof].map(|c| c * side);
            }
        }
        for road in &self.roads {
            let (dx, dy) = (x - road.point.0, y - road.point.1);
            if (dx * road.dir.1 - dy * road.dir.0).abs() <= road.half_width {
                return shade(pal.road);
            }
        }
        let land = fbm(self.seed ^ 0x1a, x / 150.0, y / 150.0, 4);
        let base = if land < 0.30 {
            pal.water
        } else if land < 0.40 {
            pal.soil
        } else if land < 0.68 {
            let (c, s) = self.parcel_angle;
            let (u, v) = (x * c + y * s, -x * s + y * c);
            let cell = ((u / self.parcel_size).floor() as i64, (v / (0.6 * self.parcel_size)).floor() as i64);
            pal.fields[(hash2(self.seed ^ 0x3c, cell.0, cell.1) % 3) as usize]
        } else {
            pal.forest
        };
        shade(base)
    }

    /// Square view centered at `center` meters, `span` meters wide, rotated
    /// by `angle` radians, rendered at `out_side` px with `ss x ss`
    /// supersampling.
    pub fn render(&self, center: (f64, f64), span: f64, angle: f64, out_side: usize, ss: usize, pal: &Palette) -> RgbImage {
        let (c, s) = (angle.cos(), angle.sin());
        let step = span / out_side as f64;
        let rows: Vec<Vec<Rgb>> = (0..out_side)
            .into_par_iter()
            .map(|py| {
                (0..out_side)
                    .map(|px| {
                        let mut acc = [0.0f32; 3];
                        for sy in 0..ss {
                            for sx in 0..ss {
                                let u = (px as f64 + (sx as f64 + 0.5) / ss as f64) * step - span / 2.0;
                                let v = (py as f64 + (sy as f64 + 0.5) / ss as f64) * step - span / 2.0;
                                let col = self.color(center.0 + u * c - v * s, center.1 + u * s + v * c, pal);
                                for k in 0..3 {
                                    acc[k] += col[k];
                                }
                            }
                        }
                        acc.map(|v| v / (ss * ss) as f32)
                    })
                    .collect()
            })
            .collect();
        RgbImage::from_fn(out_side, out_side, |x, y| rows[y][x])
    }
}

fn bucket(p: (f64, f64)) -> (i64, i64) {
    ((p.0 / BUCKET_M).floor() as i64, (p.1 / BUCKET_M).floor() as i64)
}

fn hash2(seed: u64, x: i64, y: i64) -> u64 {
    splitmix(seed ^ splitmix(x as u64 ^ splitmix(y as u64)))
}

fn lattice(seed: u64, x: i64, y: i64) -> f64 {
    (hash2(seed, x, y) >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy) + (lattice(seed, ix + 1, iy) - lattice(seed, ix, iy)) * tx;
    let b = lattice(seed, ix, iy + 1) + (lattice(seed, ix + 1, iy + 1) - lattice(seed, ix, iy + 1)) * tx;
    a + (b - a) * ty
}

/// Fractal value noise in `[0, 1]`.
fn fbm(seed: u64, x: f64, y: f64, octaves: u32) -> f64 {
    let (mut sum, mut amp, mut norm, mut f) = (0.0, 1.0, 0.0, 1.0);
    for o in 0..octaves {
        sum += amp * value_noise(seed.wrapping_add(o as u64), x * f, y * f);
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    sum / norm
}

impl Source for (&Scene, &Palette) {
    fn window(&self, center: (f64, f64), side: f64, out_side: usize) -> (RgbImage, bool) {
        let m = SOURCE_METERS_PER_PIXEL;
        let img = self.0.render((center.0 * m, center.1 * m), side * m, 0.0, out_side, 2, self.1);
        (img, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Stored query side in pixels.
    pub query_side: usize,
    /// Training satellite extent in source pixels and its stored side.
    pub train_source_side: u32,
    pub train_stored_side: usize,
    /// Stored side of every test search map.
    pub test_stored_side: usize,
    pub test_scales: Vec<u32>,
    pub test_coverage: f64,
    pub altitudes_m: Vec<f64>,
    /// Query ground footprint side per meter of altitude.
    pub footprint_per_altitude: f64,
    pub max_rotation_deg: f64,
    /// Scenes are redrawn until the query footprint's luminance std reaches
    /// this value (0 accepts anything).
    pub min_structure: f64,
    /// Brightness/contrast jitter on the query.
    pub jitter: bool,
    /// Render queries with the drone palette (otherwise the satellite one).
    pub drone_palette: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            query_side: 128,
            train_source_side: 1280,
            train_stored_side: 320,
            test_stored_side: 400,
            test_scales: super::TEST_SCALES.to_vec(),
            test_coverage: 0.95,
            altitudes_m: vec![80.0, 90.0, 100.0],
            footprint_per_altitude: 0.6,
            max_rotation_deg: 10.0,
            min_structure: 0.045,
            jitter: true,
            drone_palette: true,
        }
    }
}

const MAX_SCENE_DRAWS: u64 = 32;

/// Luminance standard deviation of a coarse satellite render of the query
/// footprint. Near zero for open water or a single uniform field, which no
/// method can localize.
fn structure(scene: &Scene, span: f64) -> f64 {
    let img = scene.render((0.0, 0.0), span, 0.0, 32, 1, &Palette::satellite());
    let n = img.width * img.height;
    let lum: Vec<f64> = (0..n)
        .map(|i| (0..3).map(|c| img.data[c * n + i] as f64).sum::<f64>() / 3.0)
        .collect();
    let mean = lum.iter().sum::<f64>() / n as f64;
    (lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

struct PairDraw {
    scene: Scene,
    frame: GeoFrame,
    altitude: f64,
    query: RgbImage,
}

fn draw_pair(seed: u64, index: usize, params: &SynthParams) -> PairDraw {
    let pair_seed = derive(seed, &[index as u64]);
    let mut r: Rng = rng(derive(pair_seed, &[1]));
    let frame = GeoFrame {
        ref_lat: r.random_range(22.0..45.0),
        ref_lon: r.random_range(100.0..125.0),
        meters_per_pixel: SOURCE_METERS_PER_PIXEL,
    };
    let altitude = params.altitudes_m[r.random_range(0..params.altitudes_m.len())];
    let angle = r.random_range(-params.max_rotation_deg..=params.max_rotation_deg).to_radians();
    let (contrast, brightness) = if params.jitter {
        (r.random_range(0.85..1.15f32), r.random_range(-0.08..0.08f32))
    } else {
        (1.0, 0.0)
    };
    let span = altitude * params.footprint_per_altitude;
    let scene = (0..MAX_SCENE_DRAWS)
        .map(|k| Scene::new(derive(pair_seed, &[2, k])))
        .find(|sc| structure(sc, span) >= params.min_structure)
        .unwrap_or_else(|| Scene::new(derive(pair_seed, &[2, MAX_SCENE_DRAWS])));
    let pal = if params.drone_palette { Palette::drone() } else { Palette::satellite() };
    let mut query = scene.render((0.0, 0.0), span, angle, params.query_side, 3, &pal);
    for v in &mut query.data {
        *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
    PairDraw { scene, frame, altitude, query }
}

/// Writes `n_pairs` pairs under `out/<split>/`. Training pairs hold one
/// satellite view centered on the ground truth; test pairs expand into one
/// directory per scale bucket (`<pair>_<scale>`).
pub fn generate(out: &Path, split: &str, n_pairs: usize, seed: u64, params: &SynthParams) -> Result<usize, DataError> {
    if n_pairs == 0 {
        return Err(DataError::Invalid("pair count must be at least 1".into()));
    }
    let root = out.join(split);
    std::fs::create_dir_all(&root).map_err(|e| DataError::io(&root, e))?;
    let test = match split {
        "train" => false,
        "test" => true,
        other => return Err(DataError::Invalid(format!("unknown split {other:?}"))),
    };
    let written: Vec<usize> = (0..n_pairs)
        .into_par_iter()
        .map(|i| -> Result<usize, DataError> {
            let d = draw_pair(seed, i, params);
            let (lat, lon) = d.frame.to_geo((0.0, 0.0));
            let sat = Palette::satellite();
            let qid = format!("{i:04}");
            let meta = |gt: (f64, f64), mpp: f64, bucket: u32, filled: bool| PairMeta {
                lat,
                lon,
                altitude_m: d.altitude,
                gt_pixel_xy: [gt.0, gt.1],
                meters_per_pixel: mpp,
                scale_bucket: bucket,
                source: "synthetic".into(),
                query_id: Some(qid.clone()),
                mean_filled: filled,
            };
            if !test {
                let side = params.train_source_side as f64;
                let (img, _) = (&d.scene, &sat).window((0.0, 0.0), side, params.train_stored_side);
                let half = params.train_stored_side as f64 / 2.0;
                let mpp = meters_per_pixel(side, params.train_stored_side as f64);
                write_pair(&root.join(&qid), &d.query, &img, &meta((half, half), mpp, params.train_source_side, false))?;
                return Ok(1);
            }
            let mut r = rng(derive(seed, &[i as u64, 2]));
            let crops = build_test_scales(
                &(&d.scene, &sat),
                (0.0, 0.0),
                &params.test_scales,
                params.test_coverage,
                params.test_stored_side,
                &mut r,
            );
            for c in &crops {
                let dir = root.join(format!("{qid}_{}", c.scale));
                write_pair(&dir, &d.query, &c.image, &meta(c.gt_px, c.meters_per_pixel, c.scale, c.mean_filled))?;
            }
            Ok(crops.len())
        })
        .collect::<Result<_, _>>()?;
    Ok(written.iter().sum())
}
