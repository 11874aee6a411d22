use fpi_core::checkpoint::Checkpoint;
use fpi_core::config::RunConfig;
use fpi_core::eval::Predictor;
use fpi_core::geodata::{generate, Dataset, SynthParams};
use fpi_core::model::FpiModel;
use fpi_core::retrieval::{compare, summarize, write_compare_csv};
use fpi_core::rng::rng;
use fpi_core::train::Normalization;

fn fresh_predictor() -> Predictor {
    let cfg = RunConfig::from_json(r#"{"preset":"desk","model":{"embed_dim":16,"depth":1,"heads":2}}"#).unwrap();
    let (_, store) = FpiModel::init::<f32>(cfg.model.clone(), &mut rng(2)).unwrap();
    Predictor::from_checkpoint(&Checkpoint::new(cfg, Normalization::identity(), 0, 0, store)).unwrap()
}

#[test]
fn retrieval_never_beats_its_floor() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthParams { test_scales: vec![700, 1800], ..Default::default() };
    generate(dir.path(), "test", 3, 8, &params).unwrap();
    let data = Dataset::open(&dir.path().join("test")).unwrap();
    let pred = fresh_predictor();

    let rows = compare(&pred, &data, 10.0).unwrap();
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(r.err_retrieval_px + 1e-9 >= r.floor_px, "{r:?}");
        assert!((0.0..=1.0).contains(&r.rds_retrieval) && (0.0..=1.0).contains(&r.rds_fpi));
        assert!(r.time_fpi_ms > 0.0 && r.time_retrieval_ms > 0.0);
    }
    let s = summarize(&rows);
    assert_eq!(s.pairs, 6);
    assert!((s.time_ratio - s.time_retrieval_ms_mean / s.time_fpi_ms_mean).abs() < 1e-9);

    let csv = dir.path().join("cmp.csv");
    write_compare_csv(&rows, &csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("pair_id,rds_fpi,rds_retrieval,time_fpi_ms,time_retrieval_ms,err_retrieval_px,floor_px"));
    assert_eq!(text.lines().count(), 7);
}
