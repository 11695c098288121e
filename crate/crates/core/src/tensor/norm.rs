use serde::{Deserialize, Serialize};

use super::tape::{GradSink, Node, Op, Tape, Var};
use super::RngState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub const DEFAULT_BN_EPS: f64 = 1e-5;

impl Tape {
    /// Per-channel batch normalization of `(N, C, H, W)` input.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch mean and unbiased variance into `stats` with its momentum; eval
    /// mode normalizes with `stats` unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "batchnorm2d",
                detail: format!("expected (N, C, H, W), got {xs:?}"),
            });
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("batchnorm2d: eps must be > 0, got {eps}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if n * hw == 0 {
            return Err(Error::InvalidArgument("batchnorm2d: empty batch".into()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape.as_slice() != [c] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gamma" { "batchnorm2d gamma" } else { "batchnorm2d beta" },
                    lhs: vec![c],
                    rhs: self.nodes[v.0].shape.clone(),
                });
            }
        }
        if stats.channels() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d running stats",
                lhs: vec![c],
                rhs: vec![stats.channels()],
            });
        }
        let data = &self.nodes[x.0].data;
        let count = (n * hw) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += data[(b * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                    let mu = s / count;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += data[(b * c + ch) * hw..][..hw]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / count;
                }
                let unbias = if n * hw > 1 { count / (count - 1.0) } else { 1.0 };
                let m = stats.momentum;
                for ch in 0..c {
                    stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean[ch];
                    stats.var[ch] = (1.0 - m) * stats.var[ch] + m * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (&self.nodes[gamma.0].data, &self.nodes[beta.0].data);
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for k in base..base + hw {
                    xhat[k] = (data[k] - mean[ch]) * inv_std[ch];
                    out[k] = g[ch] * xhat[k] + bt[ch];
                }
            }
        }
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
                dims: (n, c, hw),
            },
        ))
    }

    /// Inverted dropout: in train mode each entry survives with probability
    /// `1 − p` and survivors are scaled by `1 / (1 − p)`. Eval mode and
    /// `p = 0` are the identity.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        self.mul_const(x, mask)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward(
    nodes: &[Node],
    (x, gamma, beta): (usize, usize, usize),
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    (n, c, hw): (usize, usize, usize),
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for k in base..base + hw {
                sum_g[ch] += g[k];
                sum_gx[ch] += g[k] * xhat[k];
            }
        }
    }
    if let Some(gb) = sink.buf(beta) {
        gb.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v);
    }
    if let Some(gg) = sink.buf(gamma) {
        gg.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v);
    }
    let gam = &nodes[gamma].data;
    if let Some(gx) = sink.buf(x) {
        let count = (n * hw) as f64;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                let s = gam[ch] * inv_std[ch];
                for k in base..base + hw {
                    gx[k] += if batch_stats {
                        s * (g[k] - sum_g[ch] / count - xhat[k] * sum_gx[ch] / count)
                    } else {
                        s * g[k]
                    };
                }
            }
        }
    }
}
