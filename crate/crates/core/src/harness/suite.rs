use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{ecfm_forward, EcfmParams, EnergyConfig};
use crate::losses::{
    energy_score_closed_form_1d, energy_score_rows, sample_gaussian, total_loss, Estimator,
    GaussianPrediction, LossConfig,
};
use crate::model::{build_model, BackboneConfig, ModelConfig};
use crate::tensor::gradcheck::{registered_op_checks, weighted_sum};
use crate::tensor::{grad_check, GradCheckOptions, Mode, RngState, Tape, Tensor, Var};

/// Relative-error limit for single ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Relative-error limit for composed graphs.
pub const GRAPH_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteItem {
    pub name: String,
    pub kind: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

fn item(name: impl Into<String>, kind: &'static str, report: crate::tensor::GradCheckReport, tolerance: f64) -> SuiteItem {
    SuiteItem {
        name: name.into(),
        kind,
        max_rel_error: report.max_rel_error,
        tolerance,
        checked: report.checked,
        passed: report.passed(tolerance),
    }
}

fn loss_prediction(tape: &mut Tape, mu: Var, log_var: Var) -> Result<GaussianPrediction> {
    GaussianPrediction::from_heads(tape, mu, log_var)
}

/// Central-difference checks of every registered op, the ECFM block, both
/// loss estimators, ECFM followed by the loss, and the whole network.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<SuiteItem>> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut items = Vec::new();
    for check in registered_op_checks(seed) {
        let report = check.run(&opts)?;
        items.push(item(check.name, "op", report, OP_TOLERANCE));
    }

    let mut rng = RngState::derive(seed, 0x9c);
    let maps = |rng: &mut RngState| Tensor::randn([2, 3, 4, 4], rng).with_requires_grad(true);
    let ecfm_inputs = vec![
        maps(&mut rng),
        maps(&mut rng),
        Tensor::randn([3, 6, 1, 1], &mut rng).with_requires_grad(true),
        Tensor::randn([3], &mut rng).with_requires_grad(true),
    ];
    let cfg = EnergyConfig::default();
    let ecfm = |tape: &mut Tape, v: &[Var]| -> Result<crate::fusion::EcfmOutput> {
        let params = EcfmParams {
            weight: v[2],
            bias: v[3],
        };
        ecfm_forward(tape, v[0], v[1], &params, &cfg)
    };
    let report = grad_check(
        |tape, v| {
            let y = ecfm(tape, v)?.fused;
            weighted_sum(tape, y, seed)
        },
        &ecfm_inputs,
        &opts,
    )?;
    items.push(item("ecfm_forward", "graph", report, GRAPH_TOLERANCE));

    let heads = vec![
        Tensor::new([3, 1], vec![0.2, -0.4, 0.9])?.with_requires_grad(true),
        Tensor::new([3, 1], vec![-1.0, 0.3, -2.5])?.with_requires_grad(true),
    ];
    let target = Tensor::new([3, 1], vec![0.1, 0.5, -0.3])?;
    for estimator in [Estimator::Fast, Estimator::Full] {
        let loss_cfg = LossConfig {
            samples: 64,
            estimator,
            ..LossConfig::default()
        };
        let report = grad_check(
            |tape, v| {
                let pred = loss_prediction(tape, v[0], v[1])?;
                let z = tape.constant(target.clone());
                total_loss(tape, &pred, z, &loss_cfg, &mut RngState::derive(seed, 0x10))
            },
            &heads,
            &opts,
        )?;
        let name = format!("total_loss_{}", estimator.name());
        items.push(item(name, "graph", report, GRAPH_TOLERANCE));
    }

    // ECFM output pooled into two heads and scored by the loss.
    let mut composed_inputs = ecfm_inputs.clone();
    composed_inputs.push(Tensor::randn([2, 3], &mut rng).with_requires_grad(true));
    let loss_cfg = LossConfig {
        samples: 64,
        ..LossConfig::default()
    };
    let target2 = Tensor::new([2, 1], vec![0.4, -0.6])?;
    let report = grad_check(
        |tape, v| {
            let fused = ecfm(tape, v)?.fused;
            let pooled = tape.mean_pool2d(fused, (1, 1))?;
            let flat = tape.flatten(pooled)?;
            let heads = tape.linear(flat, v[4], None)?;
            let mu = tape.narrow(heads, 1, 0, 1)?;
            let lv = tape.narrow(heads, 1, 1, 1)?;
            let pred = loss_prediction(tape, mu, lv)?;
            let z = tape.constant(target2.clone());
            total_loss(tape, &pred, z, &loss_cfg, &mut RngState::derive(seed, 0x11))
        },
        &composed_inputs,
        &opts,
    )?;
    items.push(item("ecfm_then_total_loss", "graph", report, GRAPH_TOLERANCE));

    items.push(end_to_end_check(seed)?);
    Ok(items)
}

/// Whole network plus loss on a 16×16 toy geometry, checked on a random
/// subset of coordinates.
pub fn end_to_end_check(seed: u64) -> Result<SuiteItem> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            height: 16,
            width: 16,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = build_model(&cfg, seed)?;
    let mut rng = RngState::derive(seed, 0x12);
    let mut inputs: Vec<Tensor> = model.params.tensors().iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let np = inputs.len();
    inputs.push(Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng).with_requires_grad(true));
    inputs.push(Tensor::uniform([2, 2, 16, 16], 0.0, 2.0, &mut rng).with_requires_grad(true));
    let target = Tensor::new([2, 1], vec![0.3, -0.2])?;
    let loss_cfg = LossConfig {
        samples: 64,
        ..LossConfig::default()
    };
    let report = grad_check(
        |tape, v| {
            let mut m = model.clone();
            let mut rng = RngState::derive(seed, 0x13);
            let out = m.forward_with(tape, &v[..np], v[np], v[np + 1], Mode::Train, &mut rng)?;
            let z = tape.constant(target.clone());
            total_loss(tape, &out.pred, z, &loss_cfg, &mut rng)
        },
        &inputs,
        &GradCheckOptions {
            seed,
            max_coords: Some(600),
            ..GradCheckOptions::default()
        },
    )?;
    Ok(item("end_to_end", "graph", report, GRAPH_TOLERANCE))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorStats {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub mu: f64,
    pub sigma: f64,
    pub z: f64,
    pub samples: usize,
    pub trials: usize,
    pub closed_form: f64,
    pub full: EstimatorStats,
    pub fast: EstimatorStats,
}

impl ScoreReport {
    /// Standard error of the difference of the two estimator means.
    pub fn difference_stderr(&self) -> f64 {
        self.full.stderr.hypot(self.fast.stderr)
    }
}

fn stats(values: &[f64]) -> EstimatorStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::NAN
    };
    EstimatorStats { mean, stderr }
}

/// One score per trial, each from its own `m` draws of N(mu, sigma²).
pub fn estimator_trials(mu: f64, sigma: f64, z: f64, m: usize, trials: usize, estimator: Estimator, rng: &mut RngState) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mu_v = tape.constant(Tensor::full([trials, 1], mu));
    let lv = tape.constant(Tensor::full([trials, 1], 2.0 * sigma.ln()));
    let pred = GaussianPrediction { mu: mu_v, log_var: lv };
    let samples = sample_gaussian(&mut tape, &pred, m, rng)?;
    let zv = tape.constant(Tensor::full([trials, 1], z));
    let rows = energy_score_rows(&mut tape, samples, zv, estimator)?;
    Ok(tape.value(rows).to_vec())
}

/// Closed form against the mean ± standard error of both estimators over
/// `trials` independent evaluations with `m` samples each.
pub fn score_report(mu: f64, sigma: f64, z: f64, m: usize, trials: usize, seed: u64) -> Result<ScoreReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("score needs at least one trial".into()));
    }
    let closed_form = energy_score_closed_form_1d(mu, sigma, z)?;
    let full = estimator_trials(mu, sigma, z, m, trials, Estimator::Full, &mut RngState::derive(seed, 1))?;
    let fast = estimator_trials(mu, sigma, z, m, trials, Estimator::Fast, &mut RngState::derive(seed, 2))?;
    Ok(ScoreReport {
        mu,
        sigma,
        z,
        samples: m,
        trials,
        closed_form,
        full: stats(&full),
        fast: stats(&fast),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        let r = score_report(0.0, 1.0, 0.0, 1000, 200, 1).unwrap();
        assert!((r.closed_form - 0.233695).abs() < 5e-7);
        for est in [&r.full, &r.fast] {
            assert!((est.mean / r.closed_form - 1.0).abs() < 0.01, "{r:?}");
        }
        let small = score_report(0.3, 0.01, 0.3, 1000, 50, 2).unwrap();
        assert!((small.closed_form - 0.00233695).abs() < 5e-9);
        let tiny = score_report(0.0, 1.0, 0.0, 2, 1, 3).unwrap();
        assert!(tiny.fast.mean.is_finite() && tiny.fast.stderr.is_nan());
        assert!(score_report(0.0, 0.0, 0.0, 10, 10, 0).is_err());
        assert!(score_report(0.0, 1.0, 0.0, 1, 10, 0).is_err());
    }

    #[test]
    fn trials_are_independent_rows() {
        let v = estimator_trials(0.0, 1.0, 0.0, 100, 3, Estimator::Fast, &mut RngState::new(4)).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v[0] != v[1] && v[1] != v[2]);
    }

    #[test]
    fn stderr_formula() {
        let s = stats(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        // sample variance 5/3 over n = 4
        assert!((s.stderr - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
