//! Central finite-difference checks of the analytic gradients, in f64.

use rand::seq::index::sample;

use crate::encoder::FeatureMap;
use crate::fusion::correlate;
use crate::loss::{balance_loss, build_label_in, LossConfig};
use crate::model::{FpiModel, ModelConfig};
use crate::params::Bound;
use crate::rng::{derive, rng};
use crate::tensor::{Padding, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// `None` checks every coordinate; `Some(n)` checks `n` random
    /// coordinates per input.
    pub per_input: Option<usize>,
    pub seed: u64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            h: 1e-4,
            floor: 1e-6,
            per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checked: usize,
    /// Coordinates whose gradient magnitude exceeded the floor.
    pub above_floor: usize,
    /// Worst coordinate seen.
    pub worst: Option<Mismatch>,
}

impl CheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |m| m.rel_err)
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward pass of `f` (which must return a scalar) with
/// central differences on every input.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], cfg: &CheckConfig) -> Result<CheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tracked: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad_()).collect();
    f(&tracked)?.backward()?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut report = CheckReport::default();
    let mut current: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match cfg.per_input {
            Some(k) if k < n => {
                let mut picked = sample(&mut rng(derive(cfg.seed, &[i as u64])), n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut v = input.to_vec();
                v[j] += delta;
                current[i] = Tensor::new(input.shape(), v)?;
                f(&current)?.item()
            };
            let numeric = (eval_at(cfg.h)? - eval_at(-cfg.h)?) / (2.0 * cfg.h);
            current[i] = input.detach();
            let a = analytic[i][j];
            let e = rel_err(a, numeric, cfg.floor);
            report.checked += 1;
            if a.abs().max(numeric.abs()) > cfg.floor {
                report.above_floor += 1;
            }
            if report.worst.as_ref().is_none_or(|w| e > w.rel_err) {
                report.worst = Some(Mismatch {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    Ok(report)
}

/// A fixed pseudo-random weighting, used to turn a tensor-valued op into a
/// scalar whose gradient exercises every output element differently.
pub fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng as _;
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("probe shape")
}

/// `sum(out * probe)`.
pub fn project(out: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    Ok(out.mul(&probe(out.shape(), seed))?.sum())
}

/// Every differentiable op on small inputs, all coordinates checked.
pub fn op_suite(cfg: &CheckConfig) -> Result<Vec<(&'static str, CheckReport)>> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>| -> Result<()> {
        out.push((name, check(f, &inputs, cfg)?));
        Ok(())
    };
    run("matmul", vec![probe(&[3, 4], 1), probe(&[4, 5], 2)], &|t| project(&t[0].matmul(&t[1])?, 3))?;
    run("conv2d", vec![probe(&[2, 5, 5], 4), probe(&[3, 2, 3, 3], 5)], &|t| {
        project(&t[0].conv2d(&t[1], 1, 1, 1)?, 6)
    })?;
    run("conv2d_groups_stride", vec![probe(&[4, 6, 6], 7), probe(&[4, 2, 2, 2], 8)], &|t| {
        project(&t[0].conv2d(&t[1], 2, 0, 2)?, 9)
    })?;
    let asym = Padding { top: 1, bottom: 2, left: 0, right: 1 };
    run("conv2d_asymmetric_padding", vec![probe(&[2, 4, 4], 10), probe(&[2, 1, 2, 2], 11)], &move |t| {
        project(&t[0].conv2d_padded(&t[1], 1, asym, 2)?, 12)
    })?;
    run("layernorm", vec![probe(&[3, 6], 13), probe(&[6], 14), probe(&[6], 15)], &|t| {
        project(&t[0].layernorm(&t[1], &t[2], 1e-6)?, 16)
    })?;
    run("softmax", vec![probe(&[3, 5], 17).scale(3.0)], &|t| project(&t[0].softmax_last(), 18))?;
    run("gelu", vec![probe(&[12], 19).scale(3.0)], &|t| project(&t[0].gelu(), 20))?;
    run("sigmoid", vec![probe(&[12], 21).scale(5.0)], &|t| project(&t[0].sigmoid(), 22))?;
    run("bilinear_resize", vec![probe(&[2, 3, 4], 23)], &|t| project(&t[0].bilinear_resize(7, 5)?, 24))?;
    run("bias_transpose_slices", vec![probe(&[3, 4], 25), probe(&[4], 26)], &|t| {
        let x = t[0].add_bias(&t[1])?.transpose()?;
        let parts = [x.narrow_last(1, 2)?, x.narrow_last(0, 1)?];
        project(&Tensor::concat_last(&parts)?, 27)
    })?;
    run("ln_clamped", vec![probe(&[8], 28).add_scalar(2.0)], &|t| project(&t[0].ln_clamped(1e-12), 29))?;
    run("correlate_even_kernel", vec![probe(&[3, 6, 6], 30), probe(&[3, 2, 2], 31)], &|t| {
        let s = FeatureMap { grid_h: 6, grid_w: 6, channels: 3, values: t[0].clone() };
        let q = FeatureMap { grid_h: 2, grid_w: 2, channels: 3, values: t[1].clone() };
        project(&correlate(&s, &q, true)?, 32)
    })?;
    let cfg_model = ModelConfig::desk();
    let geom = cfg_model.heat_geometry();
    let label = build_label_in(&geom, (37.0, 101.0), 3).map_err(|e| TensorError::Invalid(e.to_string()))?;
    let map = probe(&[1, geom.grid, geom.grid], 33).scale(4.0);
    run("balance_loss", vec![map], &move |t| {
        balance_loss(&t[0], &label, &LossConfig::default()).map_err(|e| TensorError::Invalid(e.to_string()))
    })?;
    Ok(out)
}

/// Query/search images through both encoders, correlation and balance loss,
/// at the given model configuration. Checks `per_input` sampled coordinates
/// of every parameter and both images.
pub fn model_check(config: ModelConfig, cfg: &CheckConfig) -> Result<CheckReport> {
    let (model, store) = FpiModel::init::<f64>(config.clone(), &mut rng(derive(cfg.seed, &[1])))
        .map_err(|e| TensorError::Invalid(e.to_string()))?;
    let n_params = store.len();
    let mut inputs: Vec<Tensor<f64>> = store.bind(false).tensors().to_vec();
    // move off the symmetric init so no gradient vanishes by construction
    for (i, t) in inputs.iter_mut().enumerate() {
        let jitter = probe(t.shape(), derive(cfg.seed, &[2, i as u64])).scale(0.02);
        *t = t.add(&jitter)?;
    }
    inputs.push(probe(&[3, config.query_side, config.query_side], derive(cfg.seed, &[3])));
    inputs.push(probe(&[3, config.search_side, config.search_side], derive(cfg.seed, &[4])));
    let gt = (config.search_side as f64 * 0.3, config.search_side as f64 * 0.6);
    let label = build_label_in(&config.heat_geometry(), gt, 1).map_err(|e| TensorError::Invalid(e.to_string()))?;
    check(
        |t| {
            let p = Bound::from_tensors(t[..n_params].to_vec());
            let heat = model.forward_pair(&p, &t[n_params], &t[n_params + 1])?;
            balance_loss(&heat.grid, &label, &LossConfig::default()).map_err(|e| TensorError::Invalid(e.to_string()))
        },
        &inputs,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // detach hides the x^2 dependence from backward
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = check(
            |t| {
                let wrong = t[0].mul(&t[0].detach())?;
                Ok(wrong.sum())
            },
            &[x],
            &CheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_err() > 0.4);
    }

    #[test]
    fn square_passes() {
        let x = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let r = check(|t| Ok(t[0].mul(&t[0])?.sum()), &[x], &CheckConfig::default()).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_err() < 1e-8);
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = probe(&[10, 10], 1);
        let cfg = CheckConfig { per_input: Some(7), ..Default::default() };
        let r = check(|t| project(&t[0].sigmoid(), 2), &[x], &cfg).unwrap();
        assert_eq!(r.checked, 7);
    }
}
