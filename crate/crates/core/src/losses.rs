//! Training objectives: smooth-L1 on the predicted mean plus the energy score
//! of the predicted Gaussian, estimated from reparameterized samples.
//!
//! For samples `z_1..z_M` and target `z` the energy score is
//! `(1/M) Σ |z_i − z| − ½ · spread`, where the spread is either the full
//! pairwise mean `(1/M²) Σ_i Σ_j |z_i − z_j|` or the consecutive-pair mean
//! `(1/(M−1)) Σ_i |z_i − z_{i+1}|`.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tape, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 4.0;

/// Per-sample Gaussian over the normalized steering value, both `(N, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPrediction {
    pub mu: Var,
    /// Already clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Var,
}

impl GaussianPrediction {
    /// Wraps raw head outputs, clamping the log-variance.
    pub fn from_heads(tape: &mut Tape, mu: Var, raw_log_var: Var) -> Result<Self> {
        let (ms, ls) = (tape.shape(mu), tape.shape(raw_log_var));
        if ms.len() != 2 || ms[1] != 1 || ms != ls {
            return Err(Error::ShapeMismatch {
                op: "gaussian prediction",
                lhs: ms.to_vec(),
                rhs: ls.to_vec(),
            });
        }
        let log_var = tape.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(GaussianPrediction { mu, log_var })
    }

    pub fn len(&self, tape: &Tape) -> usize {
        tape.shape(self.mu)[0]
    }

    pub fn sigma(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.log_var).iter().map(|v| (0.5 * v).exp()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Full,
    #[default]
    Fast,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Full => "full",
            Estimator::Fast => "fast",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Estimator::Full),
            "fast" => Ok(Estimator::Fast),
            _ => Err(Error::InvalidArgument(format!("unknown estimator {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub samples: usize,
    pub smooth_l1_beta: f64,
    pub energy_weight: f64,
    pub estimator: Estimator,
    /// Let the energy term train only the variance head.
    pub stop_mean_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            samples: 1000,
            smooth_l1_beta: 1.0,
            energy_weight: 1.0,
            estimator: Estimator::Fast,
            stop_mean_grad: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "energy score needs at least 2 samples, got {}",
                self.samples
            )));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smooth L1 beta must be > 0, got {}",
                self.smooth_l1_beta
            )));
        }
        if !(self.energy_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "energy weight must be >= 0, got {}",
                self.energy_weight
            )));
        }
        Ok(())
    }
}

/// `(N, M)` samples `μ + exp(½·log_var)·ε` with the `ε` recorded as constants.
pub fn sample_gaussian(
    tape: &mut Tape,
    pred: &GaussianPrediction,
    m: usize,
    rng: &mut RngState,
) -> Result<Var> {
    if m == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let n = pred.len(tape);
    let eps = tape.constant(Tensor::randn([n, m], rng));
    let half = tape.scale(pred.log_var, 0.5);
    let sigma = tape.exp(half);
    let spread = tape.mul(eps, sigma)?;
    tape.add(spread, pred.mu)
}

fn row_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let k = tape.shape(x)[1];
    let w = tape.constant(Tensor::full([1, k], 1.0 / k as f64));
    tape.linear(x, w, None)
}

fn check_samples(tape: &Tape, samples: Var, z: Var) -> Result<(usize, usize)> {
    let (ss, zs) = (tape.shape(samples), tape.shape(z));
    if ss.len() != 2 || zs != [ss[0], 1] {
        return Err(Error::ShapeMismatch {
            op: "energy score",
            lhs: ss.to_vec(),
            rhs: zs.to_vec(),
        });
    }
    if ss[1] < 2 {
        return Err(Error::InvalidArgument(format!(
            "energy score needs at least 2 samples, got {}",
            ss[1]
        )));
    }
    Ok((ss[0], ss[1]))
}

fn accuracy_term(tape: &mut Tape, samples: Var, z: Var) -> Result<Var> {
    let d = tape.sub(samples, z)?;
    let d = tape.abs(d);
    row_mean(tape, d)
}

/// Per-row energy score `(N, 1)` of samples `(N, M)` against targets `(N, 1)`.
pub fn energy_score_rows(tape: &mut Tape, samples: Var, z: Var, estimator: Estimator) -> Result<Var> {
    let (_, m) = check_samples(tape, samples, z)?;
    let accuracy = accuracy_term(tape, samples, z)?;
    let spread = match estimator {
        Estimator::Full => tape.pairwise_abs_mean(samples)?,
        Estimator::Fast => {
            let head = tape.narrow(samples, 1, 0, m - 1)?;
            let tail = tape.narrow(samples, 1, 1, m - 1)?;
            let d = tape.sub(head, tail)?;
            let d = tape.abs(d);
            row_mean(tape, d)?
        }
    };
    let half = tape.scale(spread, -0.5);
    tape.add(accuracy, half)
}

/// Batch mean of the exact double-sum estimator.
pub fn energy_score_full(tape: &mut Tape, samples: Var, z: Var) -> Result<Var> {
    let rows = energy_score_rows(tape, samples, z, Estimator::Full)?;
    Ok(tape.mean(rows))
}

/// Batch mean of the consecutive-pair estimator.
pub fn energy_score_fast(tape: &mut Tape, samples: Var, z: Var) -> Result<Var> {
    let rows = energy_score_rows(tape, samples, z, Estimator::Fast)?;
    Ok(tape.mean(rows))
}

/// Expected energy score of `N(μ, σ²)` at `z`:
/// `σ·[d(2Φ(d) − 1) + 2φ(d) − 1/√π]` with `d = (z − μ)/σ`.
pub fn energy_score_closed_form_1d(mu: f64, sigma: f64, z: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let d = (z - mu) / sigma;
    let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
    Ok(sigma * (d * (2.0 * std.cdf(d) - 1.0) + 2.0 * std.pdf(d) - inv_sqrt_pi))
}

/// Mean elementwise smooth-L1 of `pred − target`.
pub fn smooth_l1(tape: &mut Tape, pred: Var, target: Var, beta: f64) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let l = tape.smooth_l1_elementwise(d, beta)?;
    Ok(tape.mean(l))
}

/// `smooth_l1(μ, z) + w · ES(samples, z)` with fresh `ε` draws from `rng`.
pub fn total_loss(
    tape: &mut Tape,
    pred: &GaussianPrediction,
    z: Var,
    cfg: &LossConfig,
    rng: &mut RngState,
) -> Result<Var> {
    cfg.validate()?;
    let regression = smooth_l1(tape, pred.mu, z, cfg.smooth_l1_beta)?;
    if cfg.energy_weight == 0.0 {
        return Ok(regression);
    }
    let sampled = if cfg.stop_mean_grad {
        GaussianPrediction {
            mu: tape.detach(pred.mu),
            log_var: pred.log_var,
        }
    } else {
        *pred
    };
    let samples = sample_gaussian(tape, &sampled, cfg.samples, rng)?;
    let rows = energy_score_rows(tape, samples, z, cfg.estimator)?;
    let es = tape.mean(rows);
    let es = tape.scale(es, cfg.energy_weight);
    tape.add(regression, es)
}
