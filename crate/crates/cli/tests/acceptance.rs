//! Acceptance criteria, one test each. Every test writes a single
//! `acceptance N name: PASS|FAIL (...)` line to stderr, bypassing the test
//! harness's output capture, then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use fpi_core::checkpoint::Checkpoint;
use fpi_core::encoder::FeatureMap;
use fpi_core::eval::{score_training_crops, Predictor};
use fpi_core::fusion::{correlate, HeatGeometry, Heatmap};
use fpi_core::geodata::{crop_span_m, meters_per_pixel, random_crop_augment, sample_crop_window, AugmentConfig, Dataset, GeoFrame, RgbImage};
use fpi_core::gradcheck::{model_check, op_suite, CheckConfig};
use fpi_core::loss::{balance_loss, balance_weights, build_label, LossConfig, PositiveCount};
use fpi_core::metrics::{ma, rds, rds_from_rd};
use fpi_core::model::{FpiModel, ModelConfig};
use fpi_core::rng::rng;
use fpi_core::tensor::Tensor;
use fpi_core::train::load_training_set;

fn verdict(n: u32, name: &str, ok: bool, detail: String) {
    let line = format!("acceptance {n:>2} {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

fn fpi(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_fpi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "fpi {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn c01_gradient_suite() {
    let start = Instant::now();
    let mut worst = (String::new(), 0.0f64);
    for (name, r) in op_suite(&CheckConfig::default()).unwrap() {
        if r.max_rel_err() >= worst.1 {
            worst = (name.to_string(), r.max_rel_err());
        }
    }
    let model = model_check(ModelConfig::desk(), &CheckConfig { per_input: Some(2), seed: 11, ..Default::default() }).unwrap();
    if model.max_rel_err() >= worst.1 {
        worst = ("desk forward_pair to loss".into(), model.max_rel_err());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "gradient suite",
        worst.1 < 1e-3 && secs < 120.0,
        format!("worst rel err {:.2e} in {}, {secs:.1} s", worst.1, worst.0),
    );
}

#[test]
fn c02_paper_shape_chain() {
    let cfg = ModelConfig::paper();
    let (model, store) = FpiModel::init::<f32>(cfg.clone(), &mut rng(0)).unwrap();
    let p = store.bind(false);
    let q = Tensor::<f32>::full(&[3, 112, 112], 0.1).unwrap();
    let sch = Tensor::<f32>::full(&[3, 400, 400], -0.1).unwrap();
    let qt = model.encoders.query.encode(&p, &q).unwrap().flatten().unwrap();
    let st = model.encoders.search.encode(&p, &sch).unwrap().flatten().unwrap();
    let heat = model.forward_pair(&p, &q, &sch).unwrap();
    let up = heat.upsampled().unwrap();
    let shapes = (qt.shape().to_vec(), st.shape().to_vec(), heat.grid.shape().to_vec(), up.shape().to_vec());
    let ok = shapes.0 == [49, 384] && shapes.1 == [625, 384] && shapes.2 == [1, 25, 25] && up.numel() == 400 * 400;
    verdict(2, "paper shape chain", ok, format!("query {:?}, search {:?}, response {:?}, upsampled {:?}", shapes.0, shapes.1, shapes.2, shapes.3));
}

#[test]
fn c03_balance_loss_exactness() {
    let mut ok = true;
    let mut notes = Vec::new();

    let l = build_label((50.0, 50.0), 100.0, 5, 1).unwrap();
    let w = balance_weights(&l, 1.0, PositiveCount::Nominal).unwrap();
    let fixture = w.iter().zip(&l.t).all(|(&v, &t)| (v - if t == 1 { 0.5 } else { 0.5 / 24.0 }).abs() < 1e-15);
    ok &= fixture;
    notes.push(format!("5x5 fixture {fixture}"));

    let mut r = rng(3);
    let (mut worst_sum, mut worst_ln2, mut worst_ratio) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..500 {
        let grid = r.random_range(3..=30usize);
        let side = grid as f64 * 16.0;
        let radius = r.random_range(1..=3usize.min(grid - 1));
        let w_neg = r.random_range(0.0..50.0);
        let gt = (r.random_range(0.0..side), r.random_range(0.0..side));
        let l = build_label(gt, side, grid, radius).unwrap();
        let w = balance_weights(&l, w_neg, PositiveCount::Actual).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let pos: f64 = w.iter().zip(&l.t).filter(|(_, &t)| t == 1).map(|(v, _)| v).sum();
        let neg: f64 = w.iter().zip(&l.t).filter(|(_, &t)| t == 0).map(|(v, _)| v).sum();
        if w_neg > 0.0 {
            worst_ratio = worst_ratio.max((neg / pos - w_neg).abs() / w_neg);
        }
        let map = Tensor::<f64>::zeros(&[grid, grid]).unwrap();
        let cfg = LossConfig { w_neg, r: radius, positive_count: PositiveCount::Actual };
        let loss = balance_loss(&map, &l, &cfg).unwrap().item().unwrap();
        worst_ln2 = worst_ln2.max((loss - std::f64::consts::LN_2).abs());
    }
    ok &= worst_sum < 1e-9 && worst_ln2 < 1e-6 && worst_ratio < 1e-9;
    notes.push(format!("max |sum-1| {worst_sum:.1e}, max |loss-ln2| {worst_ln2:.1e}, max mass-ratio rel err {worst_ratio:.1e}"));
    verdict(3, "balance loss exactness", ok, notes.join("; "));
}

#[test]
fn c04_metric_exactness() {
    let rds0 = rds((10.0, 20.0), (10.0, 20.0), 400.0, 400.0, 10.0);
    let e1 = rds_from_rd(0.1, 10.0);
    let fixture = ma(&[1.0, 9.0, 21.0], 10.0).unwrap();
    let edge = ma(&[10.0], 10.0).unwrap();
    let mut ok = rds0 == 1.0 && (e1 - (-1.0f64).exp()).abs() < 1e-9 && (fixture - 2.0 / 3.0).abs() < 1e-12 && edge == 0.0;

    let mut r = rng(4);
    let sd: Vec<f64> = (0..1000).map(|_| r.random_range(0.0..200.0)).collect();
    let mut prev = 0.0;
    let mut monotone_ma = true;
    for k in 0..=250 {
        let v = ma(&sd, k as f64).unwrap();
        monotone_ma &= v >= prev;
        prev = v;
    }
    let mut monotone_rds = true;
    for _ in 0..10_000 {
        let (a, b) = (r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        let k = r.random_range(0.5..50.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        monotone_rds &= rds_from_rd(lo, k) >= rds_from_rd(hi, k);
    }
    ok &= monotone_ma && monotone_rds;
    verdict(
        4,
        "metric exactness",
        ok,
        format!("RDS(0) {rds0}, RDS(RD 0.1) {e1:.12}, MA fixture {fixture:.6}, MA monotone {monotone_ma}, RDS monotone over 1e4 {monotone_rds}"),
    );
}

fn feature_map(c: usize, g: usize, v: Vec<f64>) -> FeatureMap<f64> {
    FeatureMap { grid_h: g, grid_w: g, channels: c, values: Tensor::new(&[c, g, g], v).unwrap() }
}

fn brute_correlation(s: &[f64], q: &[f64], c: usize, g: usize, k: usize, padded: bool) -> (usize, Vec<f64>) {
    let (lo, out) = if padded { ((k - 1) / 2, g) } else { (0, g - k + 1) };
    let mut r = vec![0.0; out * out];
    for i in 0..out {
        for j in 0..out {
            let mut acc = 0.0;
            for ch in 0..c {
                for a in 0..k {
                    for b in 0..k {
                        let (y, x) = (i as i64 + a as i64 - lo as i64, j as i64 + b as i64 - lo as i64);
                        if y >= 0 && x >= 0 && (y as usize) < g && (x as usize) < g {
                            acc += s[ch * g * g + y as usize * g + x as usize] * q[ch * k * k + a * k + b];
                        }
                    }
                }
            }
            r[i * out + j] = acc;
        }
    }
    (out, r)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

#[test]
fn c05_correlation_oracle() {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for g in 1..=10 {
        for k in 1..=5.min(g) {
            for padded in [true, false] {
                let c = 3;
                let sv: Vec<f64> = (0..c * g * g).map(|_| r.random_range(-1.0..1.0)).collect();
                let qv: Vec<f64> = (0..c * k * k).map(|_| r.random_range(-1.0..1.0)).collect();
                let got = correlate(&feature_map(c, g, sv.clone()), &feature_map(c, k, qv.clone()), padded).unwrap();
                let (out, want) = brute_correlation(&sv, &qv, c, g, k, padded);
                assert_eq!(got.shape(), &[1, out, out]);
                for (a, b) in got.to_vec().iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
                cases += 1;
            }
        }
    }

    // planted query: one-hot features make the true offset the unique maximum
    let (g, k) = (10, 5);
    let c = g * g;
    let mut sv = vec![0.0; c * g * g];
    for cell in 0..g * g {
        sv[cell * g * g + cell] = 1.0;
    }
    let lo = (k - 1) / 2;
    let (mut padded_hits, mut unpadded_hits, mut decoded_hits) = (0, 0, 0);
    let side = 16.0 * g as f64;
    for i in 0..g {
        for j in 0..g {
            let mut qv = vec![0.0; c * k * k];
            for a in 0..k {
                for b in 0..k {
                    let (y, x) = (i as i64 + a as i64 - lo as i64, j as i64 + b as i64 - lo as i64);
                    if y >= 0 && x >= 0 && (y as usize) < g && (x as usize) < g {
                        let cell = y as usize * g + x as usize;
                        qv[cell * k * k + a * k + b] = 1.0;
                    }
                }
            }
            let (smap, qmap) = (feature_map(c, g, sv.clone()), feature_map(c, k, qv));
            let resp = correlate(&smap, &qmap, true).unwrap();
            padded_hits += usize::from(argmax(&resp.to_vec()) == i * g + j);
            let heat = Heatmap { grid: resp, geometry: HeatGeometry::correlation(side, g, k, true), search_side_px: side as usize };
            let p = heat.decode().unwrap();
            decoded_hits += usize::from((heat.geometry.nearest(p.pixel_xy.1), heat.geometry.nearest(p.pixel_xy.0)) == (i, j));
            let un = correlate(&smap, &qmap, false).unwrap();
            let out = g - k + 1;
            let m = argmax(&un.to_vec());
            unpadded_hits += usize::from((m / out + lo, m % out + lo) == (i, j));
        }
    }
    let corners_unreachable = (g - k + 1) + lo < g && lo > 0;
    let ok = worst < 1e-12 && padded_hits == g * g && decoded_hits == g * g && unpadded_hits == (g - k + 1).pow(2) && corners_unreachable;
    verdict(
        5,
        "correlation oracle",
        ok,
        format!(
            "{cases} (G,K) cases, max abs err {worst:.1e}; planted G={g} K={k}: padded {padded_hits}/{}, decoded {decoded_hits}/{}, unpadded {unpadded_hits}/{} (corners lost)",
            g * g,
            g * g,
            g * g
        ),
    );
}

#[test]
fn c06_augmentation_statistics() {
    let cfg = AugmentConfig::default();
    let mut r = rng(2024);
    let bins = 10;
    let n = 10_000;
    let mut counts = vec![0usize; bins * bins];
    for _ in 0..n {
        let (fx, fy) = sample_crop_window(&cfg, &mut r).gt_fraction();
        let u = (((fx - 0.5) / cfg.coverage + 0.5) * bins as f64) as usize;
        let v = (((fy - 0.5) / cfg.coverage + 0.5) * bins as f64) as usize;
        counts[v.min(bins - 1) * bins + u.min(bins - 1)] += 1;
    }
    let expect = n as f64 / (bins * bins) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let critical = ChiSquared::new((bins * bins - 1) as f64).unwrap().inverse_cdf(0.99);

    let img = RgbImage::from_fn(96, 96, |x, y| [x as f32 / 96.0, y as f32 / 96.0, 0.5]);
    let mut outside = 0;
    for i in 0..n {
        let gt = ((i % 96) as f64 + 0.5, (i / 96 % 96) as f64 + 0.25);
        let (crop, g, _) = random_crop_augment(&img, gt, 1280.0, &cfg, 40, &mut r);
        if !(g.0 >= 0.0 && g.1 >= 0.0 && g.0 < crop.width as f64 && g.1 < crop.height as f64) {
            outside += 1;
        }
    }
    verdict(
        6,
        "augmentation statistics",
        chi2 < critical && outside == 0,
        format!("chi2 {chi2:.1} < {critical:.1} over {n} draws; {outside} gt outside crop"),
    );
}

#[test]
fn c07_desk_overfit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("desk.ckpt");
    let start = Instant::now();
    fpi(&["gen-synth", "--out", s(&data), "--pairs", "32", "--seed", "7"]);
    fpi(&["train", "--data", s(&data), "--out", s(&ckpt)]);
    let pred = Predictor::from_checkpoint(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    let ds = Dataset::open(&data.join("train")).unwrap();
    let (pairs, _) = load_training_set(&ds, pred.config.model.query_side).unwrap();
    let scores = score_training_crops(&pred, &pairs, 4, 99).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let n = scores.len() as f64;
    let mean_rds = scores.iter().map(|c| c.rds).sum::<f64>() / n;
    let within2 = scores.iter().filter(|c| c.cell_error <= 2.0).count() as f64 / n;
    let steps = Checkpoint::load(&ckpt).unwrap().header.step;
    verdict(
        7,
        "desk overfit",
        steps <= 300 && mean_rds >= 0.85 && within2 >= 0.9 && minutes <= 30.0,
        format!("{steps} steps, train RDS {mean_rds:.4} (need 0.85), within 2 cells {within2:.3} (need 0.90), {minutes:.1} min"),
    );
}

#[test]
fn c08_geometry() {
    let mpp = meters_per_pixel(700.0, 700.0);
    let span = crop_span_m(1800.0);
    let frame = GeoFrame { ref_lat: 30.25, ref_lon: 120.1, meters_per_pixel: mpp };
    let mut worst = 0.0f64;
    let mut r = rng(8);
    for _ in 0..1000 {
        let geo = (30.25 - r.random_range(0.0..0.01), 120.1 + r.random_range(0.0..0.01));
        let back = frame.to_geo(frame.to_pixel(geo));
        worst = worst.max((back.0 - geo.0).abs()).max((back.1 - geo.1).abs());
    }
    let ok = (mpp - 180.0 / 700.0).abs() < 1e-9 && (span - 462.9).abs() < 0.1 && worst < 1e-9;
    verdict(8, "geometry", ok, format!("m/px at 700 {mpp:.12}, 1800 px span {span:.3} m, round trip {worst:.1e} deg"));
}

#[test]
fn c09_retrieval_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("init.ckpt");
    fpi(&["gen-synth", "--out", s(&data), "--pairs", "2", "--seed", "9"]);
    fpi(&["gen-synth", "--out", s(&data), "--pairs", "3", "--seed", "9", "--split", "test"]);
    fpi(&["train", "--data", s(&data), "--out", s(&ckpt), "--steps", "0"]);
    let csv = dir.path().join("compare.csv");
    fpi(&["compare-retrieval", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&csv)]);

    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let rows: Vec<BTreeMap<String, String>> = reader.deserialize().map(Result::unwrap).collect();
    let col = |name: &str| -> Vec<f64> { rows.iter().map(|r| r[name].parse().unwrap()).collect() };
    let (tf, tr) = (col("time_fpi_ms"), col("time_retrieval_ms"));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ratio = mean(&tf) / mean(&tr);
    let beaten = col("err_retrieval_px").iter().zip(col("floor_px")).filter(|(e, f)| **e + 1e-9 < *f).count();
    verdict(
        9,
        "retrieval comparison",
        !rows.is_empty() && ratio <= 0.5 && beaten == 0,
        format!(
            "{} queries, FPI {:.1} ms vs retrieval {:.1} ms (ratio {ratio:.3}), floor beaten {beaten} times",
            rows.len(),
            mean(&tf),
            mean(&tr)
        ),
    );
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let base = dir.path().join(tag);
        let data = base.join("data");
        let ckpt = base.join("desk.ckpt");
        let report = base.join("report");
        fpi(&["gen-synth", "--out", s(&data), "--pairs", "8", "--seed", "7"]);
        fpi(&["gen-synth", "--out", s(&data), "--pairs", "2", "--seed", "7", "--split", "test"]);
        fpi(&["train", "--data", s(&data), "--out", s(&ckpt), "--seed", "7", "--steps", "20"]);
        fpi(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
        (files(&data), std::fs::read(&ckpt).unwrap(), files(&report))
    };
    let a = run("a");
    let b = run("b");
    let ok = !a.0.is_empty() && a.0 == b.0 && a.1 == b.1 && a.2 == b.2;
    verdict(
        10,
        "determinism",
        ok,
        format!(
            "{} dataset files identical {}, checkpoint ({} bytes) identical {}, report identical {}",
            a.0.len(),
            a.0 == b.0,
            a.1.len(),
            a.1 == b.1,
            a.2 == b.2
        ),
    );
}
