use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use fpi_core::geodata::{
    crop_span_m, generate, haversine_m, load_pair, meters_per_pixel, random_crop_augment, sample_crop_window,
    AugmentConfig, DataError, Dataset, GeoFrame, RgbImage, SynthParams,
};
use fpi_core::rng::rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small() -> SynthParams {
    SynthParams {
        query_side: 48,
        train_stored_side: 96,
        test_stored_side: 80,
        test_scales: vec![700, 1800],
        ..Default::default()
    }
}

#[test]
fn generation_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(generate(d.path(), "train", 3, 42, &small()).unwrap(), 3);
        assert_eq!(generate(d.path(), "test", 2, 42, &small()).unwrap(), 4);
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 3 * 3 + 4 * 3);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    generate(c.path(), "train", 3, 43, &small()).unwrap();
    assert_ne!(tree(c.path()).get("train/0000/query.png"), ta.get("train/0000/query.png"));
}

#[test]
fn every_gt_is_inside_its_search_image() {
    let d = tempfile::tempdir().unwrap();
    generate(d.path(), "test", 3, 1, &small()).unwrap();
    generate(d.path(), "train", 3, 1, &small()).unwrap();
    for split in ["train", "test"] {
        let ds = Dataset::open(&d.path().join(split)).unwrap();
        for i in 0..ds.len() {
            let p = ds.load(i).unwrap();
            let (x, y) = p.meta.gt();
            assert!(x >= 0.0 && y >= 0.0 && x < p.search.width as f64 && y < p.search.height as f64);
            assert_eq!(p.meta.source, "synthetic");
        }
    }
}

#[test]
fn test_split_has_one_dir_per_scale() {
    let d = tempfile::tempdir().unwrap();
    let params = SynthParams { test_stored_side: 40, query_side: 16, ..Default::default() };
    assert_eq!(generate(d.path(), "test", 1, 3, &params).unwrap(), 12);
    let ds = Dataset::open(&d.path().join("test")).unwrap();
    let scales: Vec<u32> = ds.metas.iter().map(|m| m.scale_bucket).collect();
    let mut sorted = scales.clone();
    sorted.sort();
    assert_eq!(sorted, (7..=18).map(|k| k * 100).collect::<Vec<_>>());
    for m in &ds.metas {
        assert!((m.meters_per_pixel - meters_per_pixel(m.scale_bucket as f64, 40.0)).abs() < 1e-12);
    }
}

#[test]
fn loader_errors() {
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::open(d.path()), Err(DataError::NoSamples(_))));

    generate(d.path(), "train", 2, 5, &small()).unwrap();
    let root = d.path().join("train");
    let meta = root.join("0001/meta.json");
    fs::write(&meta, "{ not json").unwrap();
    assert!(matches!(Dataset::open(&root), Err(DataError::Meta { .. })));

    let text = r#"{"lat":1,"lon":2,"altitude_m":80,"gt_pixel_xy":[500,10],"meters_per_pixel":1.0,"scale_bucket":1280,"source":"synthetic"}"#;
    fs::write(&meta, text).unwrap();
    assert!(matches!(load_pair(&root.join("0001")), Err(DataError::Meta { .. })));

    fs::remove_file(root.join("0000/query.png")).unwrap();
    assert!(matches!(load_pair(&root.join("0000")), Err(DataError::Io { .. })));
}

#[test]
fn batches_are_a_seeded_permutation() {
    let d = tempfile::tempdir().unwrap();
    generate(d.path(), "train", 5, 5, &small()).unwrap();
    let ds = Dataset::open(&d.path().join("train")).unwrap();
    let b = ds.batches(2, 9);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    let mut flat: Vec<usize> = b.concat();
    assert_eq!(b, ds.batches(2, 9));
    flat.sort();
    assert_eq!(flat, (0..5).collect::<Vec<_>>());
}

#[test]
fn crop_positions_are_uniform_over_the_central_square() {
    let cfg = AugmentConfig::default();
    let mut r = rng(2024);
    let bins = 10;
    let mut counts = vec![0usize; bins * bins];
    let n = 10_000;
    for _ in 0..n {
        let w = sample_crop_window(&cfg, &mut r);
        let (fx, fy) = w.gt_fraction();
        assert!((0.0..1.0).contains(&fx) && (0.0..1.0).contains(&fy));
        // position within the central square, in [0, 1)
        let u = ((fx - 0.5) / cfg.coverage + 0.5) * bins as f64;
        let v = ((fy - 0.5) / cfg.coverage + 0.5) * bins as f64;
        assert!(u >= 0.0 && v >= 0.0 && u < bins as f64 && v < bins as f64);
        counts[v as usize * bins + u as usize] += 1;
    }
    let expect = n as f64 / (bins * bins) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let critical = ChiSquared::new((bins * bins - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn augmented_gt_stays_inside_the_crop() {
    let img = RgbImage::from_fn(64, 64, |x, y| [x as f32 / 64.0, y as f32 / 64.0, 0.0]);
    let cfg = AugmentConfig { coverage: 1.0, ..Default::default() };
    let mut r = rng(8);
    for _ in 0..500 {
        let (crop, gt, _) = random_crop_augment(&img, (32.0, 32.0), 1280.0, &cfg, 50, &mut r);
        assert!(gt.0 >= 0.0 && gt.1 >= 0.0 && gt.0 < crop.width as f64 && gt.1 < crop.height as f64);
    }
}

#[test]
fn geometry_anchors() {
    assert!((meters_per_pixel(700.0, 700.0) - 180.0 / 700.0).abs() < 1e-9);
    assert!((crop_span_m(1800.0) - 462.9).abs() < 0.1);
    let f = GeoFrame { ref_lat: 30.3, ref_lon: 120.2, meters_per_pixel: 180.0 / 700.0 };
    for px in [(0.0, 0.0), (1800.0, 1800.0), (-900.0, 400.0)] {
        let g = f.to_geo(px);
        let back = f.to_geo(f.to_pixel(g));
        assert!((back.0 - g.0).abs() < 1e-9 && (back.1 - g.1).abs() < 1e-9);
    }
}

#[test]
fn pixel_distance_agrees_with_geodesic_distance() {
    let f = GeoFrame { ref_lat: 38.0, ref_lon: 115.0, meters_per_pixel: 180.0 / 700.0 };
    let mut r = rng(3);
    use rand::Rng as _;
    for _ in 0..200 {
        let a = (r.random_range(0.0..3000.0), r.random_range(0.0..3000.0));
        let b = (r.random_range(0.0..3000.0), r.random_range(0.0..3000.0));
        let px_m = ((a.0 - b.0 as f64).powi(2) + (a.1 - b.1 as f64).powi(2)).sqrt() * f.meters_per_pixel;
        let geo_m = haversine_m(f.to_geo(a), f.to_geo(b));
        if px_m > 1.0 {
            assert!((px_m - geo_m).abs() / px_m < 1e-3, "{px_m} vs {geo_m}");
        }
    }
}

/// Normalized cross-correlation of `t` against every placement fully inside `s`
/// (first channel luminance); returns the best top-left.
fn ncc_match(s: &RgbImage, t: &RgbImage) -> (usize, usize) {
    let lum = |img: &RgbImage, x: usize, y: usize| {
        let p = img.pixel(x, y);
        (p[0] + p[1] + p[2]) as f64 / 3.0
    };
    let tw = t.width;
    let tv: Vec<f64> = (0..tw * tw).map(|i| lum(t, i % tw, i / tw)).collect();
    let tm = tv.iter().sum::<f64>() / tv.len() as f64;
    let tz: Vec<f64> = tv.iter().map(|v| v - tm).collect();
    let tn = tz.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sv: Vec<f64> = (0..s.width * s.height).map(|i| lum(s, i % s.width, i / s.width)).collect();
    let mut best = (f64::MIN, (0, 0));
    for y0 in 0..=s.height - tw {
        for x0 in 0..=s.width - tw {
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut dot = 0.0;
            for j in 0..tw {
                let row = &sv[(y0 + j) * s.width + x0..(y0 + j) * s.width + x0 + tw];
                for (i, &v) in row.iter().enumerate() {
                    sum += v;
                    sq += v * v;
                    dot += v * tz[j * tw + i];
                }
            }
            let n = (tw * tw) as f64;
            let var = (sq - sum * sum / n).max(1e-12);
            let score = dot / (var.sqrt() * tn);
            if score > best.0 {
                best = (score, (x0, y0));
            }
        }
    }
    best.1
}

#[test]
fn template_matching_recovers_gt_without_jitter() {
    let d = tempfile::tempdir().unwrap();
    let params = SynthParams {
        jitter: false,
        drone_palette: false,
        max_rotation_deg: 0.0,
        test_scales: vec![1000],
        test_coverage: 0.5,
        test_stored_side: 160,
        ..Default::default()
    };
    let n = 20;
    generate(d.path(), "test", n, 77, &params).unwrap();
    let ds = Dataset::open(&d.path().join("test")).unwrap();
    let mut hits = 0;
    for i in 0..ds.len() {
        let p = ds.load(i).unwrap();
        let footprint = p.meta.altitude_m * params.footprint_per_altitude;
        let side = (footprint / p.meta.meters_per_pixel).round() as usize;
        let template = p.query.resize(side, side);
        let (x0, y0) = ncc_match(&p.search, &template);
        let c = (x0 as f64 + side as f64 / 2.0, y0 as f64 + side as f64 / 2.0);
        let (gx, gy) = p.meta.gt();
        if (c.0 - gx).hypot(c.1 - gy) <= 2.0 {
            hits += 1;
        }
    }
    assert!(hits * 100 >= n * 95, "{hits}/{n}");
}
