use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};

use crate::tensor::{Element, Tensor};

/// Planar RGB image with values in `[0, 1]`. Pixel `(x, y)` covers
/// `[x, x + 1) x [y, y + 1)`, so its center is at `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `3 x height x width`, row-major per channel.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                for c in 0..3 {
                    data[c * plane + y * width + x] = px[c];
                }
            }
        }
        RgbImage { width, height, data }
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.width * self.height;
        let mut out = [0.0; 3];
        for (c, m) in out.iter_mut().enumerate() {
            *m = self.data[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        }
        out
    }

    /// Bilinear sample at continuous position `(x, y)`; outside the image
    /// the sample is `fill`.
    fn sample(&self, x: f64, y: f64, fill: &[f32; 3]) -> [f32; 3] {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = ((fx - x0) as f32, (fy - y0) as f32);
        let mut out = [0.0; 3];
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (xi, yi) = (x0 as i64 + dx, y0 as i64 + dy);
                let inside = xi >= 0 && yi >= 0 && (xi as usize) < self.width && (yi as usize) < self.height;
                for c in 0..3 {
                    let v = if inside { self.get(c, xi as usize, yi as usize) } else { fill[c] };
                    out[c] += w * v;
                }
            }
        }
        out
    }

    /// Square window with top-left `(x0, y0)` and side `side` (in this
    /// image's pixels), resampled to `out_side` pixels. Area outside the
    /// image takes the per-channel image mean. Returns the crop and whether
    /// any fill was needed.
    pub fn crop_resample(&self, x0: f64, y0: f64, side: f64, out_side: usize) -> (RgbImage, bool) {
        let means = self.channel_means();
        let fill = [means[0] as f32, means[1] as f32, means[2] as f32];
        let step = side / out_side as f64;
        let filled = x0 < 0.0 || y0 < 0.0 || x0 + side > self.width as f64 || y0 + side > self.height as f64;
        let img = RgbImage::from_fn(out_side, out_side, |u, v| {
            self.sample(x0 + (u as f64 + 0.5) * step, y0 + (v as f64 + 0.5) * step, &fill)
        });
        (img, filled)
    }

    /// Resize with a triangle (bilinear, antialiased on downscale) filter.
    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| Rgb(self.pixel(x as usize, y as usize)));
        let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        RgbImage::from_fn(width, height, |x, y| out.get_pixel(x as u32, y as u32).0)
    }

    /// 8-bit quantization, as stored on disk.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        RgbImage::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32).0.map(|v| v as f32 / 255.0)
        })
    }

    /// Round-trips through 8 bits so in-memory values equal what a reload
    /// from disk would give.
    pub fn quantized(&self) -> RgbImage {
        RgbImage::from_rgb8(&self.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)
    }

    pub fn load_png(path: &Path) -> image::ImageResult<Self> {
        Ok(RgbImage::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    /// `3 x H x W` tensor of `(v - mean[c]) / std[c]`.
    pub fn to_tensor<T: Element>(&self, mean: &[f64; 3], std: &[f64; 3]) -> Tensor<T> {
        let plane = self.width * self.height;
        let vals = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                T::cast((v as f64 - mean[c]) / std[c])
            })
            .collect();
        Tensor::new(&[3, self.height, self.width], vals).expect("image has positive size")
    }
}
