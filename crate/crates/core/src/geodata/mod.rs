//! Geo/pixel geometry, raster handling, crop augmentation, the on-disk
//! dataset layout and the procedural scene generator.

mod augment;
mod dataset;
mod raster;
mod synth;

pub use augment::{random_crop_augment, sample_crop_window, AugmentConfig, CropWindow};
pub use dataset::{
    build_test_scales, load_pair, write_pair, DataError, Dataset, PairMeta, SamplePair, ScaledCrop, Source, TEST_SCALES,
};
pub use raster::RgbImage;
pub use synth::{generate, Palette, Scene, SynthParams};

use serde::{Deserialize, Serialize};

/// Ground resolution of the source satellite imagery: 700 px span 180 m.
pub const SOURCE_METERS_PER_PIXEL: f64 = 180.0 / 700.0;

/// Equatorial radius used by the local conversions.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Meters per pixel of a `crop_side` source-pixel crop stored at
/// `resized_side` pixels.
pub fn meters_per_pixel(crop_side: f64, resized_side: f64) -> f64 {
    SOURCE_METERS_PER_PIXEL * crop_side / resized_side
}

/// Ground span in meters of a crop of `crop_side` source pixels.
pub fn crop_span_m(crop_side: f64) -> f64 {
    crop_side * SOURCE_METERS_PER_PIXEL
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPose {
    pub lat: f64,
    pub lon: f64,
    pub altitude_m: f64,
}

/// Local equirectangular frame: pixel `(0, 0)` sits at `(ref_lat, ref_lon)`,
/// x grows east and y grows south, `meters_per_pixel` on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFrame {
    pub ref_lat: f64,
    pub ref_lon: f64,
    pub meters_per_pixel: f64,
}

impl GeoFrame {
    pub fn to_geo(&self, px: (f64, f64)) -> (f64, f64) {
        let east = px.0 * self.meters_per_pixel;
        let north = -px.1 * self.meters_per_pixel;
        let lat = self.ref_lat + (north / EARTH_RADIUS_M).to_degrees();
        let lon = self.ref_lon + (east / (EARTH_RADIUS_M * self.ref_lat.to_radians().cos())).to_degrees();
        (lat, lon)
    }

    pub fn to_pixel(&self, geo: (f64, f64)) -> (f64, f64) {
        let north = (geo.0 - self.ref_lat).to_radians() * EARTH_RADIUS_M;
        let east = (geo.1 - self.ref_lon).to_radians() * EARTH_RADIUS_M * self.ref_lat.to_radians().cos();
        (east / self.meters_per_pixel, -north / self.meters_per_pixel)
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la1, lo1) = (a.0.to_radians(), a.1.to_radians());
    let (la2, lo2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2) + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().asin()
}
