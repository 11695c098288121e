//! Energy-weighted cross-modality fusion of frame and event feature maps,
//! plus the two baselines it is compared against.
//!
//! Every pixel gets an energy `e = 4(σ² + λ) / ((x − μ)² + 2σ² + 2λ)` from
//! the mean and (biased) variance of its own channel. Distinctive pixels have
//! low energy, so `A = sigmoid(1/e)` up-weights them. The two modalities'
//! activations are summed and spatially softmaxed into a shared map that
//! re-weights both inputs before a 1×1 convolution merges them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::{Mode, RunningStats, Tape, Tensor, Var, DEFAULT_BN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub lambda: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig { lambda: 1e-4 }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda > 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "energy lambda must be > 0, got {}",
                self.lambda
            )))
        }
    }
}

fn check_maps(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 4 {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected (N, C, H, W), got {sa:?}"),
        });
    }
    if sa != sb {
        return Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// Per-pixel energy of an `(N, C, H, W)` map, channel statistics taken over
/// all `H·W` pixels of each (sample, channel) slice.
pub fn energy_weights(tape: &mut Tape, f: Var, cfg: &EnergyConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(f).to_vec();
    let (mean, var) = tape.reduce_moments(f)?;
    let d = tape.sub(f, mean)?;
    let d2 = tape.mul(d, d)?;
    let v = tape.add_scalar(var, cfg.lambda);
    let two_v = tape.scale(v, 2.0);
    let denom = tape.add(d2, two_v)?;
    let four_v = tape.scale(v, 4.0);
    let numer = tape.expand(four_v, &shape)?;
    tape.div(numer, denom)
}

/// `sigmoid(1/e)`; energies must be positive.
pub fn activate(tape: &mut Tape, e: Var) -> Result<Var> {
    if let Some((index, &value)) = tape.value(e).iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::Domain {
            op: "activate",
            index,
            value,
        });
    }
    let w = tape.reciprocal(e)?;
    Ok(tape.sigmoid(w))
}

/// The 1×1 convolution merging the two re-weighted maps; its input channels
/// are the frame block followed by the event block.
#[derive(Clone, Copy, Debug)]
pub struct EcfmParams {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct EcfmOutput {
    pub fused: Var,
    pub a_f: Var,
    pub a_e: Var,
    pub a_cross: Var,
}

pub fn ecfm_forward(
    tape: &mut Tape,
    f_f: Var,
    f_e: Var,
    params: &EcfmParams,
    cfg: &EnergyConfig,
) -> Result<EcfmOutput> {
    check_maps("ecfm", tape, f_f, f_e)?;
    let e_f = energy_weights(tape, f_f, cfg)?;
    let a_f = activate(tape, e_f)?;
    let e_e = energy_weights(tape, f_e, cfg)?;
    let a_e = activate(tape, e_e)?;
    let enhanced_f = tape.mul(a_f, f_f)?;
    let enhanced_e = tape.mul(a_e, f_e)?;
    let joint = tape.add(a_f, a_e)?;
    let a_cross = tape.softmax(joint, &[2, 3])?;
    let cross_f = tape.mul(a_cross, f_f)?;
    let cross_e = tape.mul(a_cross, f_e)?;
    let fused_f = tape.add(cross_f, enhanced_f)?;
    let fused_e = tape.add(cross_e, enhanced_e)?;
    let stacked = tape.concat(&[fused_f, fused_e], 1)?;
    let fused = tape.conv2d(stacked, params.weight, Some(params.bias), 1, 0)?;
    Ok(EcfmOutput {
        fused,
        a_f,
        a_e,
        a_cross,
    })
}

/// Plain elementwise sum.
pub fn fuse_add(tape: &mut Tape, f_f: Var, f_e: Var) -> Result<Var> {
    check_maps("fuse_add", tape, f_f, f_e)?;
    tape.add(f_f, f_e)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBn {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Branch projections for the frame and event maps and the gate that mixes
/// them, each a 1×1 convolution followed by batch normalization.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub frame: ConvBn,
    pub event: ConvBn,
    pub gate: ConvBn,
}

fn conv_bn(tape: &mut Tape, x: Var, p: &ConvBn, stats: &mut RunningStats, mode: Mode) -> Result<Var> {
    let y = tape.conv2d(x, p.weight, Some(p.bias), 1, 0)?;
    tape.batchnorm2d(y, p.gamma, p.beta, stats, mode, DEFAULT_BN_EPS)
}

/// `F_e ⊗ sigmoid(BN(conv(relu(BN(conv F_f) + BN(conv F_e)))))`.
///
/// `stats` holds the running statistics of the frame, event and gate
/// normalizations in that order.
pub fn fuse_additive_attention(
    tape: &mut Tape,
    f_f: Var,
    f_e: Var,
    params: &AttentionParams,
    stats: &mut [RunningStats; 3],
    mode: Mode,
) -> Result<Var> {
    check_maps("fuse_additive_attention", tape, f_f, f_e)?;
    let [sf, se, sg] = stats;
    let w_f = conv_bn(tape, f_f, &params.frame, sf, mode)?;
    let w_e = conv_bn(tape, f_e, &params.event, se, mode)?;
    let s = tape.add(w_f, w_e)?;
    let s = tape.relu(s);
    let g = conv_bn(tape, s, &params.gate, sg, mode)?;
    let alpha = tape.sigmoid(g);
    tape.mul(f_e, alpha)
}

/// Values of the activation maps of one ECFM evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBundle {
    pub a_f: Tensor,
    pub a_e: Tensor,
    pub a_cross: Tensor,
}

impl ActivationBundle {
    pub fn from_output(tape: &Tape, out: &EcfmOutput) -> Self {
        ActivationBundle {
            a_f: tape.tensor(out.a_f),
            a_e: tape.tensor(out.a_e),
            a_cross: tape.tensor(out.a_cross),
        }
    }
}

/// Min-max scaling to 8-bit levels; a constant map becomes all zeros.
pub fn min_max_levels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    values
        .iter()
        .map(|&v| {
            if range > 0.0 {
                pgm::quantize((v - lo) / range)
            } else {
                0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub file: String,
    pub stage: usize,
    pub modality: String,
    pub channel: usize,
}

/// Writes one PGM per (stage, map, channel) for the first sample of each
/// bundle, plus `index.json` listing them. Stages are numbered from 1 in
/// slice order. The cross map is multiplied by `H·W` first so that a uniform
/// softmax reads as 1.
pub fn dump_activations(bundles: &[ActivationBundle], dir: &Path) -> Result<Vec<DumpEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (s, bundle) in bundles.iter().enumerate() {
        for (modality, t) in [
            ("frame", &bundle.a_f),
            ("event", &bundle.a_e),
            ("cross", &bundle.a_cross),
        ] {
            let shape = t.shape();
            if shape.len() != 4 {
                return Err(Error::InvalidShape {
                    op: "dump_activations",
                    detail: format!("expected (N, C, H, W), got {shape:?}"),
                });
            }
            let (c, h, w) = (shape[1], shape[2], shape[3]);
            let gain = if modality == "cross" { (h * w) as f64 } else { 1.0 };
            for ch in 0..c {
                let map: Vec<f64> = t.data()[ch * h * w..][..h * w].iter().map(|v| v * gain).collect();
                let file = format!("stage{}_{modality}_c{ch:03}.pgm", s + 1);
                let path: PathBuf = dir.join(&file);
                pgm::write_bytes(&path, h, w, &min_max_levels(&map))?;
                entries.push(DumpEntry {
                    file,
                    stage: s + 1,
                    modality: modality.to_string(),
                    channel: ch,
                });
            }
        }
    }
    let index = dir.join("index.json");
    fs::write(&index, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&index, e))?;
    Ok(entries)
}
