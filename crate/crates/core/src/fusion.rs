//! Correlation head and heatmap decoding.
//!
//! The query feature map acts as a convolution kernel that is slid over the
//! search feature map; the response at each displacement is the sum over
//! channels of elementwise products. With padding the response keeps the
//! search grid size, so positions at the border of the search map remain
//! representable.
//!
//! Decoding upsamples the response to the search image size with aligned
//! corners, smooths it with a separable 3x3 Hann kernel and takes the
//! argmax. The argmax is mapped back to pixels through [`HeatGeometry`],
//! which knows where each response cell sits in the search image.

use crate::encoder::FeatureMap;
use crate::tensor::{Element, Padding, Result, Tensor, TensorError};

/// Interior taps of a 5-point Hann window, normalized.
pub const HANN3: [f64; 3] = [0.25, 0.5, 0.25];

/// Zero padding that keeps the response on the search grid. Odd kernels are
/// padded symmetrically; even kernels get the extra row/column at the
/// bottom/right.
pub fn same_padding(k: usize) -> Padding {
    let lo = (k - 1) / 2;
    let hi = k - 1 - lo;
    Padding {
        top: lo,
        bottom: hi,
        left: lo,
        right: hi,
    }
}

/// Raw correlation response `1 x G' x G'` of one query over one search map.
pub fn correlate<T: Element>(search: &FeatureMap<T>, query: &FeatureMap<T>, padded: bool) -> Result<Tensor<T>> {
    check_pair(search, query)?;
    let kernel = query
        .values
        .reshape(&[1, query.channels, query.grid_h, query.grid_w])?;
    let pad = if padded {
        same_padding(query.grid_h)
    } else {
        Padding::default()
    };
    search.values.conv2d_padded(&kernel, 1, pad, 1)
}

/// Correlates `B` pairs in one grouped convolution: the search maps are
/// stacked along channels and each query only sees its own group.
pub fn correlate_batched<T: Element>(
    searches: &[FeatureMap<T>],
    queries: &[FeatureMap<T>],
    padded: bool,
) -> Result<Vec<Tensor<T>>> {
    if searches.is_empty() || searches.len() != queries.len() {
        return Err(TensorError::Invalid(format!(
            "{} search maps for {} queries",
            searches.len(),
            queries.len()
        )));
    }
    for (s, q) in searches.iter().zip(queries) {
        check_pair(s, q)?;
        if (s.grid_h, s.channels, q.grid_h) != (searches[0].grid_h, searches[0].channels, queries[0].grid_h) {
            return Err(TensorError::Invalid("batched maps must share shapes".into()));
        }
    }
    let b = searches.len();
    let (c, g, k) = (searches[0].channels, searches[0].grid_h, queries[0].grid_h);
    let stacked = concat_channels(searches.iter().map(|s| &s.values))?.reshape(&[b * c, g, g])?;
    let kernels = concat_channels(queries.iter().map(|q| &q.values))?.reshape(&[b, c, k, k])?;
    let pad = if padded { same_padding(k) } else { Padding::default() };
    let out = stacked.conv2d_padded(&kernels, 1, pad, b)?;
    let side = out.shape()[1];
    let flat = out.reshape(&[b, side * side])?;
    // split the B output channels back into per-pair maps
    let t = flat.transpose()?;
    (0..b)
        .map(|i| t.narrow_last(i, 1)?.reshape(&[1, side, side]))
        .collect()
}

fn concat_channels<'a, T: Element>(maps: impl Iterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let rows: Vec<Tensor<T>> = maps
        .map(|m| m.reshape(&[1, m.numel()]))
        .collect::<Result<_>>()?;
    // [1 x n] pieces joined along the last axis keep channel-major order
    Tensor::concat_last(&rows)
}

fn check_pair<T: Element>(search: &FeatureMap<T>, query: &FeatureMap<T>) -> Result<()> {
    if search.channels != query.channels {
        return Err(TensorError::Shape {
            op: "correlate",
            detail: format!("{} search channels vs {} query channels", search.channels, query.channels),
        });
    }
    if query.grid_h > search.grid_h || query.grid_w > search.grid_w {
        return Err(TensorError::Shape {
            op: "correlate",
            detail: format!(
                "query grid {}x{} larger than search grid {}x{}",
                query.grid_h, query.grid_w, search.grid_h, search.grid_w
            ),
        });
    }
    Ok(())
}

/// Where response cells sit in search-image pixels: cell `i` is centered at
/// `(i + origin) * cell_px` along each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatGeometry {
    pub side_px: f64,
    pub grid: usize,
    pub cell_px: f64,
    pub origin: f64,
}

impl HeatGeometry {
    /// Plain token grid: cell centers at `(i + 0.5) * side / grid`.
    pub fn cells(side_px: f64, grid: usize) -> Self {
        HeatGeometry {
            side_px,
            grid,
            cell_px: side_px / grid as f64,
            origin: 0.5,
        }
    }

    /// Response grid of a `k x k` query correlated over a `g x g` search grid.
    ///
    /// The response at `i` aligns the query's center with search token
    /// coordinate `i - pad_left + k/2`. For odd `k` with padding this is the
    /// token center; for even `k` it lands half a cell further on.
    pub fn correlation(side_px: f64, search_grid: usize, k: usize, padded: bool) -> Self {
        let (grid, pad_left) = if padded {
            (search_grid, same_padding(k).left)
        } else {
            (search_grid + 1 - k, 0)
        };
        HeatGeometry {
            side_px,
            grid,
            cell_px: side_px / search_grid as f64,
            origin: k as f64 / 2.0 - pad_left as f64,
        }
    }

    pub fn center(&self, i: f64) -> f64 {
        (i + self.origin) * self.cell_px
    }

    /// Continuous cell coordinate of a pixel position.
    pub fn to_cell(&self, px: f64) -> f64 {
        px / self.cell_px - self.origin
    }

    /// Nearest response cell to a pixel position, clamped to the grid.
    pub fn nearest(&self, px: f64) -> usize {
        let c = (self.to_cell(px) + 0.5).floor();
        c.clamp(0.0, (self.grid - 1) as f64) as usize
    }
}

/// Response grid plus the geometry needed to read it back as pixels.
#[derive(Debug, Clone)]
pub struct Heatmap<T: Element = f32> {
    /// Raw pre-sigmoid scores, `1 x G x G`.
    pub grid: Tensor<T>,
    pub geometry: HeatGeometry,
    pub search_side_px: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Search-image pixel coordinates; pixel `(i, j)` spans `[j, j+1) x [i, i+1)`.
    pub pixel_xy: (f64, f64),
    pub score: f64,
}

/// Upsampled and smoothed map, `side x side`, row-major.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub side: usize,
    pub smoothed: Vec<f64>,
    pub argmax: (usize, usize),
    pub prediction: Prediction,
}

impl<T: Element> Heatmap<T> {
    pub fn scores(&self) -> Vec<f64> {
        self.grid.to_f64_vec()
    }

    /// Bilinear upsample to the search size (aligned corners).
    pub fn upsampled(&self) -> Result<Tensor<T>> {
        let s = self.search_side_px;
        self.grid.detach().bilinear_resize(s, s)
    }

    /// Full decode: upsample, Hann smoothing, argmax, pixel mapping.
    pub fn decode_full(&self) -> Result<Decoded> {
        let s = self.search_side_px;
        let g = self.geometry.grid;
        let up = self.upsampled()?.to_f64_vec();
        let smoothed = hann_smooth(&up, s, s);
        let (row, col) = argmax(&smoothed, s);
        // upsampled pixel u samples response coordinate u * (g - 1) / (s - 1)
        let to_grid = |u: usize| if s > 1 { u as f64 * (g - 1) as f64 / (s - 1) as f64 } else { 0.0 };
        let hi = s as f64 - 1e-6;
        let x = self.geometry.center(to_grid(col)).clamp(0.0, hi);
        let y = self.geometry.center(to_grid(row)).clamp(0.0, hi);
        Ok(Decoded {
            side: s,
            prediction: Prediction {
                pixel_xy: (x, y),
                score: smoothed[row * s + col],
            },
            argmax: (row, col),
            smoothed,
        })
    }

    pub fn decode(&self) -> Result<Prediction> {
        Ok(self.decode_full()?.prediction)
    }
}

/// Same-size 3x3 smoothing with the separable Hann taps. At the border the
/// taps that fall outside are dropped and the rest renormalized.
pub fn hann_smooth(map: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let center = map[y * w + x];
            let (mut acc, mut norm) = (0.0, 0.0);
            for (dy, wy) in HANN3.iter().enumerate() {
                let Some(sy) = (y + dy).checked_sub(1).filter(|&v| v < h) else { continue };
                for (dx, wx) in HANN3.iter().enumerate() {
                    let Some(sx) = (x + dx).checked_sub(1).filter(|&v| v < w) else { continue };
                    acc += wy * wx * (map[sy * w + sx] - center);
                    norm += wy * wx;
                }
            }
            out[y * w + x] = center + acc / norm;
        }
    }
    out
}

/// First maximum in row-major order, so ties go to the smallest row, then
/// the smallest column.
pub fn argmax(map: &[f64], w: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(c: usize, g: usize, vals: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap {
            grid_h: g,
            grid_w: g,
            channels: c,
            values: Tensor::new(&[c, g, g], vals).unwrap(),
        }
    }

    #[test]
    fn paper_shape_chain() {
        let s = fm(4, 25, vec![0.1; 4 * 625]);
        let q = fm(4, 7, vec![0.2; 4 * 49]);
        assert_eq!(correlate(&s, &q, true).unwrap().shape(), &[1, 25, 25]);
        assert_eq!(correlate(&s, &q, false).unwrap().shape(), &[1, 19, 19]);
    }

    #[test]
    fn zero_query_gives_zero_map() {
        let s = fm(3, 10, (0..300).map(|v| v as f64).collect());
        let q = fm(3, 4, vec![0.0; 48]);
        assert!(correlate(&s, &q, true).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_and_oversized_query() {
        let s = fm(3, 5, vec![0.0; 75]);
        assert!(correlate(&s, &fm(2, 3, vec![0.0; 18]), true).is_err());
        assert!(correlate(&s, &fm(3, 6, vec![0.0; 108]), true).is_err());
    }

    #[test]
    fn even_kernel_padding_and_origin() {
        assert_eq!(same_padding(8), Padding { top: 3, bottom: 4, left: 3, right: 4 });
        assert_eq!(same_padding(7), Padding::uniform(3));
        let odd = HeatGeometry::correlation(400.0, 25, 7, true);
        assert_eq!((odd.grid, odd.origin, odd.cell_px), (25, 0.5, 16.0));
        let even = HeatGeometry::correlation(160.0, 20, 8, true);
        assert_eq!((even.grid, even.origin), (20, 1.0));
        let valid = HeatGeometry::correlation(160.0, 20, 8, false);
        assert_eq!((valid.grid, valid.origin), (13, 4.0));
    }

    #[test]
    fn batched_matches_single() {
        let mk = |seed: u64, c: usize, g: usize| {
            let vals = (0..c * g * g).map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 97.0 - 0.5).collect();
            fm(c, g, vals)
        };
        let searches = vec![mk(1, 3, 9), mk(2, 3, 9), mk(3, 3, 9)];
        let queries = vec![mk(4, 3, 4), mk(5, 3, 4), mk(6, 3, 4)];
        let batched = correlate_batched(&searches, &queries, true).unwrap();
        for ((s, q), b) in searches.iter().zip(&queries).zip(&batched) {
            let single = correlate(s, q, true).unwrap();
            assert_eq!(single.shape(), b.shape());
            for (x, y) in single.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn heat(vals: Vec<f64>, g: usize, side: usize) -> Heatmap<f64> {
        Heatmap {
            grid: Tensor::new(&[1, g, g], vals).unwrap(),
            geometry: HeatGeometry::cells(side as f64, g),
            search_side_px: side,
        }
    }

    #[test]
    fn hot_center_decodes_to_center() {
        let mut v = vec![0.0; 25 * 25];
        v[12 * 25 + 12] = 1.0;
        let p = heat(v, 25, 400).decode().unwrap();
        assert!((p.pixel_xy.0 - 200.0).abs() <= 1.0, "{:?}", p);
        assert!((p.pixel_xy.1 - 200.0).abs() <= 1.0, "{:?}", p);
    }

    #[test]
    fn uniform_map_breaks_ties_at_origin() {
        let d = heat(vec![0.3; 25], 5, 40).decode_full().unwrap();
        assert_eq!(d.argmax, (0, 0));
        assert_eq!(d.prediction.pixel_xy, (HeatGeometry::cells(40.0, 5).center(0.0), HeatGeometry::cells(40.0, 5).center(0.0)));
    }

    #[test]
    fn larger_of_two_peaks_wins() {
        let mut v = vec![0.0; 20 * 20];
        v[3 * 20 + 4] = 0.9;
        v[15 * 20 + 12] = 1.0;
        let p = heat(v, 20, 160).decode().unwrap();
        let g = HeatGeometry::cells(160.0, 20);
        assert!((p.pixel_xy.0 - g.center(12.0)).abs() <= 1.0);
        assert!((p.pixel_xy.1 - g.center(15.0)).abs() <= 1.0);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let out = hann_smooth(&[2.5; 12], 3, 4);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
