//! Localization metrics: spatial distance (SD), meter-level accuracy (MA),
//! relative distance (RD) and its exponential score (RDS), plus the
//! per-scale / per-ring / per-altitude breakdowns.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to aggregate")]
    Empty,
    #[error("k must be positive, got {0}")]
    BadK(f64),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Euclidean error in meters.
pub fn spatial_distance(pred_px: (f64, f64), gt_px: (f64, f64), meters_per_pixel: f64) -> f64 {
    let dx = (pred_px.0 - gt_px.0) * meters_per_pixel;
    let dy = (pred_px.1 - gt_px.1) * meters_per_pixel;
    dx.hypot(dy)
}

/// `sqrt(((dx/w)^2 + (dy/h)^2) / 2)`.
pub fn rd(pred_px: (f64, f64), gt_px: (f64, f64), w: f64, h: f64) -> f64 {
    let dx = (pred_px.0 - gt_px.0).abs() / w;
    let dy = (pred_px.1 - gt_px.1).abs() / h;
    ((dx * dx + dy * dy) / 2.0).sqrt()
}

pub fn rds_from_rd(rd: f64, k: f64) -> f64 {
    (-k * rd).exp()
}

pub fn rds(pred_px: (f64, f64), gt_px: (f64, f64), w: f64, h: f64, k: f64) -> f64 {
    rds_from_rd(rd(pred_px, gt_px, w, h), k)
}

/// Fraction of errors strictly below `k_m` meters.
pub fn ma(sd_m: &[f64], k_m: f64) -> Result<f64, MetricsError> {
    if sd_m.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(sd_m.iter().filter(|&&d| d < k_m).count() as f64 / sd_m.len() as f64)
}

/// Distance band of the ground truth from the map center, in units of half
/// the map side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ring {
    R0,
    R1,
    R2,
    R3,
    R4,
    Outside,
}

impl Ring {
    pub const ALL: [Ring; 6] = [Ring::R0, Ring::R1, Ring::R2, Ring::R3, Ring::R4, Ring::Outside];

    pub fn label(self) -> &'static str {
        match self {
            Ring::R0 => "0-0.2",
            Ring::R1 => "0.2-0.4",
            Ring::R2 => "0.4-0.6",
            Ring::R3 => "0.6-0.8",
            Ring::R4 => "0.8-1.0",
            Ring::Outside => ">1.0",
        }
    }
}

impl fmt::Display for Ring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Bands are closed on the right: an edge midpoint (distance exactly 1) is
/// in `0.8-1.0`.
pub fn ring_bucket(gt_px: (f64, f64), side: f64) -> Ring {
    let c = side / 2.0;
    let d = 2.0 * (gt_px.0 - c).hypot(gt_px.1 - c) / side;
    let bounds = [0.2, 0.4, 0.6, 0.8, 1.0];
    match bounds.iter().position(|&b| d <= b) {
        Some(i) => Ring::ALL[i],
        None => Ring::Outside,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub pair_id: String,
    pub scale_bucket: u32,
    pub altitude_m: f64,
    pub ring_bucket: Ring,
    pub sd_m: f64,
    pub rd: f64,
    pub rds: f64,
}

impl EvalRecord {
    /// Scores one prediction on a square `side` px search map.
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        pair_id: impl Into<String>,
        pred_px: (f64, f64),
        gt_px: (f64, f64),
        side: f64,
        meters_per_pixel: f64,
        scale_bucket: u32,
        altitude_m: f64,
        k: f64,
    ) -> Self {
        let rd = rd(pred_px, gt_px, side, side);
        EvalRecord {
            pair_id: pair_id.into(),
            scale_bucket,
            altitude_m,
            ring_bucket: ring_bucket(gt_px, side),
            sd_m: spatial_distance(pred_px, gt_px, meters_per_pixel),
            rd,
            rds: rds_from_rd(rd, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub k: f64,
    pub ma_thresholds_m: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            k: 10.0,
            ma_thresholds_m: vec![3.0, 5.0, 10.0, 20.0, 30.0, 50.0],
        }
    }
}

/// Aggregate over a group of records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub rds_mean: f64,
    pub sd_mean_m: f64,
    /// Keyed by threshold as written (`"5"`, `"2.5"`).
    pub ma: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    #[serde(flatten)]
    pub overall: Summary,
    pub by_scale: BTreeMap<u32, Summary>,
    pub by_ring: BTreeMap<String, Summary>,
    pub by_altitude: BTreeMap<String, Summary>,
}

fn threshold_key(k: f64) -> String {
    format!("{k}")
}

fn summarize(records: &[&EvalRecord], thresholds: &[f64]) -> Result<Summary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = records.len() as f64;
    let sds: Vec<f64> = records.iter().map(|r| r.sd_m).collect();
    let ma_map = thresholds
        .iter()
        .map(|&t| Ok((threshold_key(t), ma(&sds, t)?)))
        .collect::<Result<_, MetricsError>>()?;
    Ok(Summary {
        count: records.len(),
        rds_mean: records.iter().map(|r| r.rds).sum::<f64>() / n,
        sd_mean_m: sds.iter().sum::<f64>() / n,
        ma: ma_map,
    })
}

fn group_by<K: Ord>(
    records: &[EvalRecord],
    key: impl Fn(&EvalRecord) -> K,
    thresholds: &[f64],
) -> Result<BTreeMap<K, Summary>, MetricsError> {
    let mut groups: BTreeMap<K, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key(r)).or_default().push(r);
    }
    groups.into_iter().map(|(k, v)| Ok((k, summarize(&v, thresholds)?))).collect()
}

pub fn report(records: &[EvalRecord], cfg: &ReportConfig) -> Result<Report, MetricsError> {
    if !(cfg.k > 0.0) {
        return Err(MetricsError::BadK(cfg.k));
    }
    let t = &cfg.ma_thresholds_m;
    let all: Vec<&EvalRecord> = records.iter().collect();
    let by_ring = group_by(records, |r| r.ring_bucket, t)?
        .into_iter()
        .map(|(k, v)| (k.label().to_string(), v))
        .collect();
    Ok(Report {
        overall: summarize(&all, t)?,
        by_scale: group_by(records, |r| r.scale_bucket, t)?,
        by_ring,
        by_altitude: group_by(records, |r| format!("{}", r.altitude_m), t)?,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    pair_id: &'a str,
    scale_bucket: u32,
    altitude_m: f64,
    ring_bucket: &'static str,
    sd_m: f64,
    rd: f64,
    rds: f64,
}

pub fn write_records_csv(records: &[EvalRecord], w: impl Write) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(CsvRow {
            pair_id: &r.pair_id,
            scale_bucket: r.scale_bucket,
            altitude_m: r.altitude_m,
            ring_bucket: r.ring_bucket.label(),
            sd_m: r.sd_m,
            rd: r.rd,
            rds: r.rds,
        })?;
    }
    out.flush().map_err(|e| MetricsError::Csv(e.into()))?;
    Ok(())
}

/// Writes `records.csv` and `summary.json` into `dir`.
pub fn write_report(dir: &Path, records: &[EvalRecord], cfg: &ReportConfig) -> Result<Report, MetricsError> {
    let io = |path: &Path, source| MetricsError::Io { path: path.to_path_buf(), source };
    let rep = report(records, cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let csv_path = dir.join("records.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| io(&csv_path, e))?;
    write_records_csv(records, file)?;
    let json_path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&rep).expect("report serializes");
    std::fs::write(&json_path, text + "\n").map_err(|e| io(&json_path, e))?;
    Ok(rep)
}
