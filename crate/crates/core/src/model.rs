//! Dual-stream convolutional encoder with a fusion tap after every stage and
//! a convolutional decoder that predicts a Gaussian over the steering value.
//!
//! Each stream is a stack of stride-2 `3×3 conv → batchnorm → relu` stages.
//! After stage `s` the two stream outputs are fused into a tap `F_o^(s)`; the
//! streams themselves continue on their own features. Taps are pooled to the
//! last stage's resolution, projected to its width and summed, then decoded
//! by three halving conv blocks, a 512-wide hidden layer and two linear heads
//! (mean and log-variance).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    ecfm_forward, fuse_add, fuse_additive_attention, AttentionParams, ConvBn, EcfmOutput,
    EcfmParams, EnergyConfig,
};
use crate::losses::GaussianPrediction;
use crate::tensor::{io, Mode, RngState, RunningStats, Tape, Tensor, Var, DEFAULT_BN_EPS};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stages: usize,
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub frame_channels: usize,
    pub event_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stages: 3,
            channels: vec![8, 16, 32],
            height: 32,
            width: 32,
            frame_channels: 1,
            event_channels: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::InvalidArgument(format!("backbone: {d}")));
        if self.stages < 2 {
            return bad(format!("need at least 2 stages, got {}", self.stages));
        }
        if self.channels.len() != self.stages {
            return bad(format!("{} stages but {} channel widths", self.stages, self.channels.len()));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("channels must be positive and increasing, got {:?}", self.channels));
        }
        let step = 1 << self.stages;
        if self.height == 0 || self.width == 0 || self.height % step != 0 || self.width % step != 0 {
            return bad(format!(
                "geometry {}x{} must be divisible by {step}",
                self.height, self.width
            ));
        }
        if self.frame_channels == 0 || self.event_channels == 0 {
            return bad("input channel counts must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents of the stage-`s` map (`s` from 1).
    pub fn stage_hw(&self, s: usize) -> (usize, usize) {
        (self.height >> s, self.width >> s)
    }

    pub fn last_channels(&self) -> usize {
        self.channels[self.stages - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub dropout: f64,
    pub hidden: usize,
    pub kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            dropout: 0.5,
            hidden: 512,
            kernel: 3,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "decoder dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.hidden == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(
                "decoder needs a positive hidden width and an odd kernel".into(),
            ));
        }
        Ok(())
    }

    /// Output widths of the three conv blocks for a given input width.
    pub fn block_channels(&self, input: usize) -> Result<[usize; 3]> {
        if input == 0 || input % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder input width {input} must be a positive multiple of 8"
            )));
        }
        Ok([input / 2, input / 4, input / 8])
    }
}

/// One row of the decoder's layer table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub layer: &'static str,
    pub input: usize,
    pub output: usize,
}

/// Layer-by-layer dimensions of the decoder for an `(input, h, w)` feature
/// map, the mean head last. The log-variance head mirrors the mean head.
pub fn decoder_layout(cfg: &DecoderConfig, input: usize, h: usize, w: usize) -> Result<Vec<LayerRow>> {
    let blocks = cfg.block_channels(input)?;
    let row = |layer, input, output| LayerRow { layer, input, output };
    let mut rows = Vec::new();
    let mut c = input;
    for (b, &out) in blocks.iter().enumerate() {
        rows.push(row("conv2d", c, out));
        rows.push(row("batchnorm", out, out));
        if b > 0 {
            rows.push(row("dropout", out, out));
        }
        rows.push(row("relu", out, out));
        c = out;
    }
    rows.push(row("linear", c * h * w, cfg.hidden));
    rows.push(row("relu", cfg.hidden, cfg.hidden));
    rows.push(row("linear", cfg.hidden, 1));
    Ok(rows)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    #[default]
    Ecfm,
    Add,
    AdditiveAttention,
    FramesOnly,
    EventsOnly,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::Ecfm,
        FusionVariant::AdditiveAttention,
        FusionVariant::Add,
        FusionVariant::FramesOnly,
        FusionVariant::EventsOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Ecfm => "ecfm",
            FusionVariant::Add => "add",
            FusionVariant::AdditiveAttention => "additive_attention",
            FusionVariant::FramesOnly => "frames_only",
            FusionVariant::EventsOnly => "events_only",
        }
    }

    pub fn uses_frames(self) -> bool {
        self != FusionVariant::EventsOnly
    }

    pub fn uses_events(self) -> bool {
        self != FusionVariant::FramesOnly
    }
}

impl std::str::FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fusion variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub fusion: FusionVariant,
    /// Sum projected taps from every stage; otherwise decode the last tap only.
    pub integrate: bool,
    pub energy: EnergyConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            fusion: FusionVariant::Ecfm,
            integrate: true,
            energy: EnergyConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.energy.validate()?;
        self.decoder.block_channels(self.backbone.last_channels())?;
        Ok(())
    }
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Records every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }
}

/// FNV-1a, used to give every parameter name its own random stream.
fn name_stream(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Builder {
    params: ParamStore,
    stats: BTreeMap<String, RunningStats>,
    seed: u64,
}

impl Builder {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut rng = RngState::derive(self.seed, name_stream(&name));
        let t = Tensor::uniform(shape.to_vec(), -bound, bound, &mut rng);
        self.params.insert(name, t).map(|_| ())
    }

    fn conv(&mut self, name: &str, out: usize, input: usize, k: usize, bias: bool) -> Result<()> {
        let fan_in = input * k * k;
        self.uniform(format!("{name}.weight"), &[out, input, k, k], fan_in)?;
        if bias {
            self.uniform(format!("{name}.bias"), &[out], fan_in)?;
        }
        Ok(())
    }

    fn linear(&mut self, name: &str, out: usize, input: usize) -> Result<()> {
        self.uniform(format!("{name}.weight"), &[out, input], input)?;
        self.uniform(format!("{name}.bias"), &[out], input)
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.insert(format!("{name}.gamma"), Tensor::ones([c]))?;
        self.params.insert(format!("{name}.beta"), Tensor::zeros([c]))?;
        self.stats.insert(name.to_string(), RunningStats::new(c));
        Ok(())
    }

    fn conv_bn(&mut self, name: &str, out: usize, input: usize, k: usize, bias: bool) -> Result<()> {
        self.conv(&format!("{name}.conv"), out, input, k, bias)?;
        self.bn(&format!("{name}.bn"), out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stats: BTreeMap<String, RunningStats>,
}

/// Everything a forward pass leaves on the tape.
pub struct ForwardOutput {
    pub pred: GaussianPrediction,
    /// Fusion tap after each stage.
    pub taps: Vec<Var>,
    /// ECFM internals per stage (empty for other variants).
    pub ecfm: Vec<EcfmOutput>,
}

/// Parameters bound to one tape, looked up by name.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: &'a [Var],
}

impl Bound<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    fn conv_bn(&self, name: &str, bias: bool) -> Result<ConvBn> {
        let weight = self.get(&format!("{name}.conv.weight"))?;
        let bias = if bias { self.get(&format!("{name}.conv.bias"))? } else { weight };
        Ok(ConvBn {
            weight,
            bias,
            gamma: self.get(&format!("{name}.bn.gamma"))?,
            beta: self.get(&format!("{name}.bn.beta"))?,
        })
    }
}

/// Builds a model with fan-in-scaled uniform weights, unit batchnorm scales
/// and zero shifts. Each weight is drawn from a stream keyed by `seed` and its
/// name, so models of different variants agree on the parameters they share.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let bb = &config.backbone;
    let mut b = Builder {
        params: ParamStore::default(),
        stats: BTreeMap::new(),
        seed,
    };
    let fusion = config.fusion;
    for s in 1..=bb.stages {
        let c = bb.channels[s - 1];
        let prev = |first: usize| if s == 1 { first } else { bb.channels[s - 2] };
        if fusion.uses_frames() {
            b.conv_bn(&format!("frame.s{s}"), c, prev(bb.frame_channels), 3, false)?;
        }
        if fusion.uses_events() {
            b.conv_bn(&format!("event.s{s}"), c, prev(bb.event_channels), 3, false)?;
        }
        match fusion {
            FusionVariant::Ecfm => b.conv(&format!("fuse.s{s}"), c, 2 * c, 1, true)?,
            FusionVariant::AdditiveAttention => {
                for part in ["frame", "event", "gate"] {
                    b.conv_bn(&format!("fuse.s{s}.{part}"), c, c, 1, true)?;
                }
            }
            _ => {}
        }
    }
    let last = bb.last_channels();
    if config.integrate {
        for s in 1..=bb.stages {
            b.conv(&format!("integrate.s{s}"), last, bb.channels[s - 1], 1, true)?;
        }
    }
    let dec = &config.decoder;
    let mut c = last;
    for (i, out) in dec.block_channels(last)?.into_iter().enumerate() {
        b.conv_bn(&format!("decoder.b{}", i + 1), out, c, dec.kernel, false)?;
        c = out;
    }
    let (h, w) = bb.stage_hw(bb.stages);
    b.linear("decoder.hidden", dec.hidden, c * h * w)?;
    b.linear("decoder.mu", 1, dec.hidden)?;
    b.linear("decoder.log_var", 1, dec.hidden)?;
    Ok(Model {
        config: config.clone(),
        params: b.params,
        stats: b.stats,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn stats_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing running statistics {name}")))
    }

    fn conv_bn_act(
        &mut self,
        tape: &mut Tape,
        p: &Bound<'_>,
        x: Var,
        name: &str,
        stride: usize,
        mode: Mode,
    ) -> Result<Var> {
        let w = p.get(&format!("{name}.conv.weight"))?;
        let k = tape.shape(w)[2];
        let y = tape.conv2d(x, w, None, stride, k / 2)?;
        let (g, b) = (p.get(&format!("{name}.bn.gamma"))?, p.get(&format!("{name}.bn.beta"))?);
        let stats = self.stats_mut(&format!("{name}.bn"))?;
        tape.batchnorm2d(y, g, b, stats, mode, DEFAULT_BN_EPS)
    }

    fn check_input(&self, tape: &Tape, x: Var, channels: usize, what: &'static str) -> Result<usize> {
        let bb = &self.config.backbone;
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != channels || s[2] != bb.height || s[3] != bb.width {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: vec![0, channels, bb.height, bb.width],
                rhs: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// Runs the network on already-bound parameters `vars` (see
    /// [`ParamStore::bind`]). Train mode uses batch statistics, updates the
    /// running statistics and applies dropout drawn from `rng`.
    pub fn forward_with(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        frame: Var,
        event: Var,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<ForwardOutput> {
        let params = self.params.clone();
        let p = Bound {
            store: &params,
            vars,
        };
        let cfg = self.config.clone();
        let bb = &cfg.backbone;
        let fusion = cfg.fusion;
        let n_f = self.check_input(tape, frame, bb.frame_channels, "frame input")?;
        let n_e = self.check_input(tape, event, bb.event_channels, "event input")?;
        if n_f != n_e {
            return Err(Error::ShapeMismatch {
                op: "forward batch",
                lhs: tape.shape(frame).to_vec(),
                rhs: tape.shape(event).to_vec(),
            });
        }

        let (mut f, mut e) = (frame, event);
        let mut taps = Vec::with_capacity(bb.stages);
        let mut ecfm = Vec::new();
        for s in 1..=bb.stages {
            if fusion.uses_frames() {
                let y = self.conv_bn_act(tape, &p, f, &format!("frame.s{s}"), 2, mode)?;
                f = tape.relu(y);
            }
            if fusion.uses_events() {
                let y = self.conv_bn_act(tape, &p, e, &format!("event.s{s}"), 2, mode)?;
                e = tape.relu(y);
            }
            let tap = match fusion {
                FusionVariant::Ecfm => {
                    let params = EcfmParams {
                        weight: p.get(&format!("fuse.s{s}.weight"))?,
                        bias: p.get(&format!("fuse.s{s}.bias"))?,
                    };
                    let out = ecfm_forward(tape, f, e, &params, &cfg.energy)?;
                    ecfm.push(out);
                    out.fused
                }
                FusionVariant::Add => fuse_add(tape, f, e)?,
                FusionVariant::AdditiveAttention => {
                    let params = AttentionParams {
                        frame: p.conv_bn(&format!("fuse.s{s}.frame"), true)?,
                        event: p.conv_bn(&format!("fuse.s{s}.event"), true)?,
                        gate: p.conv_bn(&format!("fuse.s{s}.gate"), true)?,
                    };
                    let mut stats = ["frame", "event", "gate"].map(|part| {
                        self.stats
                            .get(&format!("fuse.s{s}.{part}.bn"))
                            .cloned()
                            .unwrap_or_else(|| RunningStats::new(0))
                    });
                    let out = fuse_additive_attention(tape, f, e, &params, &mut stats, mode)?;
                    for (part, st) in ["frame", "event", "gate"].into_iter().zip(stats) {
                        *self.stats_mut(&format!("fuse.s{s}.{part}.bn"))? = st;
                    }
                    out
                }
                FusionVariant::FramesOnly => f,
                FusionVariant::EventsOnly => e,
            };
            taps.push(tap);
        }

        let x = if cfg.integrate {
            integrate_with(tape, &p, &taps, bb.stage_hw(bb.stages))?
        } else {
            *taps.last().expect("at least two stages")
        };
        let pred = self.decode(tape, &p, x, mode, rng)?;
        Ok(ForwardOutput { pred, taps, ecfm })
    }

    /// Binds the stored parameters and runs [`Model::forward_with`].
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        frame: Var,
        event: Var,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<(Vec<Var>, ForwardOutput)> {
        let vars = self.params.bind(tape);
        let out = self.forward_with(tape, &vars, frame, event, mode, rng)?;
        Ok((vars, out))
    }

    fn decode(
        &mut self,
        tape: &mut Tape,
        p: &Bound<'_>,
        x: Var,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<GaussianPrediction> {
        let dropout = self.config.decoder.dropout;
        let mut h = x;
        for b in 1..=3 {
            h = self.conv_bn_act(tape, p, h, &format!("decoder.b{b}"), 1, mode)?;
            if b > 1 {
                h = tape.dropout(h, dropout, mode, rng)?;
            }
            h = tape.relu(h);
        }
        let flat = tape.flatten(h)?;
        let hidden = tape.linear(flat, p.get("decoder.hidden.weight")?, Some(p.get("decoder.hidden.bias")?))?;
        let hidden = tape.relu(hidden);
        let mu = tape.linear(hidden, p.get("decoder.mu.weight")?, Some(p.get("decoder.mu.bias")?))?;
        let lv = tape.linear(
            hidden,
            p.get("decoder.log_var.weight")?,
            Some(p.get("decoder.log_var.bias")?),
        )?;
        GaussianPrediction::from_heads(tape, mu, lv)
    }

    /// Eval-mode means and standard deviations for a batch.
    pub fn predict(&mut self, frame: &Tensor, event: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let (f, e) = (tape.constant(frame.clone()), tape.constant(event.clone()));
        let mut rng = RngState::new(0);
        let (_, out) = self.forward(&mut tape, f, e, Mode::Eval, &mut rng)?;
        Ok((tape.value(out.pred.mu).to_vec(), out.pred.sigma(&tape)))
    }
}

fn integrate_with(tape: &mut Tape, p: &Bound<'_>, taps: &[Var], hw: (usize, usize)) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &tap) in taps.iter().enumerate() {
        let s = i + 1;
        let pooled = tape.mean_pool2d(tap, hw)?;
        let w = p.get(&format!("integrate.s{s}.weight"))?;
        let b = p.get(&format!("integrate.s{s}.bias"))?;
        let proj = tape.conv2d(pooled, w, Some(b), 1, 0)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, proj)?,
            None => proj,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("no stage features to integrate".into()))
}

/// Pools every stage map to `hw`, applies the matching `(weight, bias)` 1×1
/// projection and sums the results.
pub fn integrate_stage_features(
    tape: &mut Tape,
    features: &[Var],
    projections: &[(Var, Var)],
    hw: (usize, usize),
) -> Result<Var> {
    if features.is_empty() || features.len() != projections.len() {
        return Err(Error::InvalidArgument(format!(
            "{} stage maps but {} projections",
            features.len(),
            projections.len()
        )));
    }
    let mut store = ParamStore::default();
    let mut vars = Vec::new();
    for (i, &(w, b)) in projections.iter().enumerate() {
        store.insert(format!("integrate.s{}.weight", i + 1), Tensor::scalar(0.0))?;
        store.insert(format!("integrate.s{}.bias", i + 1), Tensor::scalar(0.0))?;
        vars.extend([w, b]);
    }
    integrate_with(tape, &Bound { store: &store, vars: &vars }, features, hw)
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    epoch: usize,
    params: Vec<TensorEntry>,
    running_stats: Vec<TensorEntry>,
}

/// Where a checkpoint came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

fn file_name(name: &str, suffix: &str) -> String {
    format!("{name}{suffix}.ect")
}

/// Writes every parameter and running statistic as an ECT1 file plus
/// `manifest.json` into `dir`.
pub fn save_checkpoint(model: &Model, meta: CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        let file = file_name(name, "");
        io::save(t, &dir.join(&file))?;
        params.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let mut running_stats = Vec::new();
    for (name, st) in &model.stats {
        let t = Tensor::new([2, st.channels()], [st.mean.clone(), st.var.clone()].concat())?;
        let file = file_name(name, ".running");
        io::save(&t, &dir.join(&file))?;
        running_stats.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        seed: meta.seed,
        epoch: meta.epoch,
        params,
        running_stats,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

/// Reads a checkpoint, rejecting it unless the version matches and every
/// tensor has exactly the shape its recorded config implies.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &path,
            format!(
                "checkpoint format {} is not the supported version {CHECKPOINT_VERSION}",
                manifest.format_version
            ),
        ));
    }
    let mut model = build_model(&manifest.config, 0)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let names: Vec<&String> = manifest.params.iter().map(|p| &p.name).collect();
    if names.len() != model.params.len() || names.iter().zip(model.params.names()).any(|(a, b)| *a != b) {
        return Err(Error::format(&path, "parameter list does not match the recorded config"));
    }
    let mut missing: Vec<PathBuf> = Vec::new();
    for entry in manifest.params.iter().chain(&manifest.running_stats) {
        let p = dir.join(&entry.file);
        if !p.is_file() {
            missing.push(p);
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    for (entry, slot) in manifest.params.iter().zip(model.params.tensors_mut()) {
        let t = io::load(&dir.join(&entry.file))?;
        if t.shape() != slot.shape() || entry.shape != slot.shape() {
            return Err(Error::format(
                dir.join(&entry.file),
                format!(
                    "{} has shape {:?}, config implies {:?}",
                    entry.name,
                    t.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = t;
    }
    if manifest.running_stats.len() != model.stats.len() {
        return Err(Error::format(&path, "running statistics do not match the recorded config"));
    }
    for entry in &manifest.running_stats {
        let file = dir.join(&entry.file);
        let st = model
            .stats
            .get_mut(&entry.name)
            .ok_or_else(|| Error::format(&path, format!("unexpected statistics {}", entry.name)))?;
        let t = io::load(&file)?;
        let c = st.channels();
        if t.shape() != [2, c] {
            return Err(Error::format(
                &file,
                format!("{} has shape {:?}, expected [2, {c}]", entry.name, t.shape()),
            ));
        }
        st.mean = t.data()[..c].to_vec();
        st.var = t.data()[c..].to_vec();
    }
    let meta = CheckpointMeta {
        seed: manifest.seed,
        epoch: manifest.epoch,
    };
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{total_loss, LossConfig};
    use crate::tensor::{grad_check, GradCheckOptions};

    fn toy_config(h: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                height: h,
                width: h,
                ..BackboneConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    fn inputs(n: usize, h: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = RngState::new(seed);
        (
            Tensor::uniform([n, 1, h, h], 0.0, 1.0, &mut rng),
            Tensor::uniform([n, 2, h, h], 0.0, 2.0, &mut rng),
        )
    }

    // Independent count: per-layer formulas summed by hand.
    fn counted_params(cfg: &ModelConfig) -> usize {
        let bb = &cfg.backbone;
        let conv = |o: usize, i: usize, k: usize, bias: bool| o * i * k * k + if bias { o } else { 0 };
        let bn = |c: usize| 2 * c;
        let mut total = 0;
        let mut prev_f = bb.frame_channels;
        let mut prev_e = bb.event_channels;
        for &c in &bb.channels {
            if cfg.fusion.uses_frames() {
                total += conv(c, prev_f, 3, false) + bn(c);
            }
            if cfg.fusion.uses_events() {
                total += conv(c, prev_e, 3, false) + bn(c);
            }
            total += match cfg.fusion {
                FusionVariant::Ecfm => conv(c, 2 * c, 1, true),
                FusionVariant::AdditiveAttention => 3 * (conv(c, c, 1, true) + bn(c)),
                _ => 0,
            };
            prev_f = c;
            prev_e = c;
        }
        let last = bb.last_channels();
        if cfg.integrate {
            total += bb.channels.iter().map(|&c| conv(last, c, 1, true)).sum::<usize>();
        }
        let (a, b, c) = (last / 2, last / 4, last / 8);
        total += conv(a, last, 3, false) + bn(a) + conv(b, a, 3, false) + bn(b) + conv(c, b, 3, false) + bn(c);
        let spatial = (bb.height >> bb.stages) * (bb.width >> bb.stages);
        total += c * spatial * 512 + 512 + 2 * (512 + 1);
        total
    }

    #[test]
    fn default_parameter_count() {
        let model = build_model(&ModelConfig::default(), 1).unwrap();
        assert_eq!(model.param_count(), counted_params(&model.config));
        // frame 5944 + event 6016 + fuse 2744 + integrate 1888 + decoder convs 6104 + dense 34306
        assert_eq!(model.param_count(), 57_002);
    }

    #[test]
    fn variant_parameter_counts_follow_the_formula() {
        for fusion in FusionVariant::ALL {
            for integrate in [true, false] {
                let cfg = ModelConfig {
                    fusion,
                    integrate,
                    ..ModelConfig::default()
                };
                let model = build_model(&cfg, 2).unwrap();
                assert_eq!(model.param_count(), counted_params(&cfg), "{fusion:?} {integrate}");
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = build_model(&ModelConfig::default(), 3).unwrap();
        let b = build_model(&ModelConfig::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = build_model(&ModelConfig::default(), 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn variants_share_initial_values_by_name() {
        let ecfm = build_model(&ModelConfig::default(), 30).unwrap();
        for fusion in FusionVariant::ALL {
            for integrate in [true, false] {
                let cfg = ModelConfig {
                    fusion,
                    integrate,
                    ..ModelConfig::default()
                };
                let other = build_model(&cfg, 30).unwrap();
                let mut shared = 0;
                for (name, t) in other.params.names().iter().zip(other.params.tensors()) {
                    if let Some(same) = ecfm.params.get(name) {
                        assert_eq!(same, t, "{name}");
                        shared += 1;
                    }
                }
                assert!(shared >= 20);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.backbone.channels = vec![8, 8, 32];
        assert!(build_model(&cfg, 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.backbone.height = 20;
        assert!(build_model(&cfg, 0).is_err());
        let mut cfg = ModelConfig::default();
        cfg.backbone.stages = 1;
        cfg.backbone.channels = vec![8];
        assert!(build_model(&cfg, 0).is_err());
    }

    #[test]
    fn stage_shapes_halve() {
        let mut model = build_model(&ModelConfig::default(), 5).unwrap();
        let (f, e) = inputs(3, 32, 6);
        let mut tape = Tape::new();
        let (fv, ev) = (tape.leaf(&f), tape.leaf(&e));
        let (_, out) = model.forward(&mut tape, fv, ev, Mode::Train, &mut RngState::new(7)).unwrap();
        for (s, tap) in out.taps.iter().enumerate() {
            let c = [8, 16, 32][s];
            assert_eq!(tape.shape(*tap), &[3, c, 32 >> (s + 1), 32 >> (s + 1)]);
        }
        assert_eq!(tape.shape(out.pred.mu), &[3, 1]);
        assert_eq!(tape.shape(out.pred.log_var), &[3, 1]);
        assert_eq!(out.ecfm.len(), 3);
    }

    #[test]
    fn every_variant_runs() {
        for fusion in FusionVariant::ALL {
            for integrate in [true, false] {
                let cfg = ModelConfig {
                    fusion,
                    integrate,
                    ..toy_config(16)
                };
                let mut model = build_model(&cfg, 8).unwrap();
                let (f, e) = inputs(2, 16, 9);
                let (mu, sigma) = model.predict(&f, &e).unwrap();
                assert_eq!((mu.len(), sigma.len()), (2, 2));
                assert!(mu.iter().chain(&sigma).all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn eval_mode_is_repeatable() {
        let mut model = build_model(&toy_config(16), 10).unwrap();
        let (f, e) = inputs(2, 16, 11);
        let a = model.predict(&f, &e).unwrap();
        let b = model.predict(&f, &e).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let mut model = build_model(&toy_config(16), 12).unwrap();
        let (f, e) = inputs(2, 32, 13);
        assert!(model.predict(&f, &e).is_err());
        let (f, _) = inputs(2, 16, 13);
        let (_, e) = inputs(3, 16, 13);
        assert!(model.predict(&f, &e).is_err());
    }

    #[test]
    fn table_layout_reference_shape() {
        let rows = decoder_layout(&DecoderConfig::default(), 2048, 7, 7).unwrap();
        let expected = [
            ("conv2d", 2048, 1024),
            ("batchnorm", 1024, 1024),
            ("relu", 1024, 1024),
            ("conv2d", 1024, 512),
            ("batchnorm", 512, 512),
            ("dropout", 512, 512),
            ("relu", 512, 512),
            ("conv2d", 512, 256),
            ("batchnorm", 256, 256),
            ("dropout", 256, 256),
            ("relu", 256, 256),
            ("linear", 256 * 7 * 7, 512),
            ("relu", 512, 512),
            ("linear", 512, 1),
        ];
        let got: Vec<_> = rows.iter().map(|r| (r.layer, r.input, r.output)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn built_decoder_follows_the_layout() {
        let model = build_model(&ModelConfig::default(), 14).unwrap();
        let rows = decoder_layout(&model.config.decoder, 32, 4, 4).unwrap();
        let convs: Vec<_> = rows.iter().filter(|r| r.layer == "conv2d").collect();
        for (b, row) in convs.iter().enumerate() {
            let w = model.params.get(&format!("decoder.b{}.conv.weight", b + 1)).unwrap();
            assert_eq!(&w.shape()[..2], &[row.output, row.input]);
        }
        let hidden = model.params.get("decoder.hidden.weight").unwrap();
        assert_eq!(hidden.shape(), &[512, 4 * 4 * 4]);
    }

    #[test]
    fn zero_input_with_zero_heads_returns_the_biases() {
        let mut model = build_model(&toy_config(16), 15).unwrap();
        for head in ["mu", "log_var"] {
            let w = model.params.get_mut(&format!("decoder.{head}.weight")).unwrap();
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model.params.get_mut("decoder.mu.bias").unwrap().data_mut()[0] = 0.25;
        model.params.get_mut("decoder.log_var.bias").unwrap().data_mut()[0] = -1.5;
        let (f, e) = (Tensor::zeros([2, 1, 16, 16]), Tensor::zeros([2, 2, 16, 16]));
        let (mu, sigma) = model.predict(&f, &e).unwrap();
        assert_eq!(mu, vec![0.25, 0.25]);
        for s in sigma {
            assert!((s - (-0.75f64).exp()).abs() < 1e-15);
        }
    }

    // Loop-based reference layers on (C, H, W) maps of one sample.
    type Map = Vec<Vec<Vec<f64>>>;

    fn ref_conv(x: &Map, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Map {
        let (o, i, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let (h, wd) = (x[0].len(), x[0][0].len());
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let wt = w.data();
        let mut out = vec![vec![vec![0.0; ow]; oh]; o];
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..i {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += wt[((oc * i + ic) * k + ky) * k + kx] * x[ic][iy as usize][ix as usize];
                                }
                            }
                        }
                    }
                    out[oc][y][xx] = acc;
                }
            }
        }
        out
    }

    fn ref_bn_eval(x: &Map, st: &RunningStats, g: &Tensor, b: &Tensor) -> Map {
        x.iter()
            .enumerate()
            .map(|(c, m)| {
                let s = (st.var[c] + DEFAULT_BN_EPS).sqrt();
                m.iter()
                    .map(|row| row.iter().map(|v| g.data()[c] * (v - st.mean[c]) / s + b.data()[c]).collect())
                    .collect()
            })
            .collect()
    }

    fn relu_map(x: Map) -> Map {
        x.into_iter()
            .map(|m| m.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect())
            .collect()
    }

    fn ref_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let i = w.shape()[1];
        (0..w.shape()[0])
            .map(|o| b.data()[o] + (0..i).map(|k| w.data()[o * i + k] * x[k]).sum::<f64>())
            .collect()
    }

    fn sample_map(t: &Tensor, n: usize) -> Map {
        let s = t.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        (0..c)
            .map(|ch| {
                (0..h)
                    .map(|y| (0..w).map(|x| t.data()[((n * c + ch) * h + y) * w + x]).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn decoder_matches_loop_reference() {
        let mut model = build_model(&toy_config(32), 16).unwrap();
        let mut rng = RngState::new(17);
        for st in model.stats.values_mut() {
            st.mean.iter_mut().for_each(|m| *m = 0.3 * rng.normal());
            st.var.iter_mut().for_each(|v| *v = 0.5 + rng.uniform());
        }
        for name in model.params.names().to_vec() {
            if name.ends_with("gamma") || name.ends_with("beta") {
                let t = model.params.get_mut(&name).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.normal());
            }
        }
        let x = Tensor::randn([2, 32, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let vars = model.params.bind(&mut tape);
        let params = model.params.clone();
        let bound = Bound { store: &params, vars: &vars };
        let pred = model.decode(&mut tape, &bound, xv, Mode::Eval, &mut rng).unwrap();

        let p = |n: &str| model.params.get(n).unwrap();
        for n in 0..2 {
            let mut h = sample_map(&x, n);
            for b in 1..=3 {
                let pre = format!("decoder.b{b}");
                h = ref_conv(&h, p(&format!("{pre}.conv.weight")), None, 1, 1);
                h = ref_bn_eval(&h, &model.stats[&format!("{pre}.bn")], p(&format!("{pre}.bn.gamma")), p(&format!("{pre}.bn.beta")));
                h = relu_map(h);
            }
            assert_eq!(h.len(), 4);
            let flat: Vec<f64> = h.into_iter().flatten().flatten().collect();
            let hidden: Vec<f64> = ref_linear(&flat, p("decoder.hidden.weight"), p("decoder.hidden.bias"))
                .into_iter()
                .map(|v| v.max(0.0))
                .collect();
            let mu = ref_linear(&hidden, p("decoder.mu.weight"), p("decoder.mu.bias"))[0];
            let lv = ref_linear(&hidden, p("decoder.log_var.weight"), p("decoder.log_var.bias"))[0].clamp(-10.0, 4.0);
            assert!((tape.value(pred.mu)[n] - mu).abs() < 1e-10);
            assert!((tape.value(pred.log_var)[n] - lv).abs() < 1e-10);
        }
    }

    #[test]
    fn integration_matches_loop_reference() {
        let mut rng = RngState::new(18);
        let a = Tensor::randn([1, 2, 4, 4], &mut rng);
        let b = Tensor::randn([1, 3, 2, 2], &mut rng);
        let (wa, ba) = (Tensor::randn([3, 2, 1, 1], &mut rng), Tensor::randn([3], &mut rng));
        let (wb, bb) = (Tensor::randn([3, 3, 1, 1], &mut rng), Tensor::randn([3], &mut rng));
        let mut tape = Tape::new();
        let vars: Vec<Var> = [&a, &b, &wa, &ba, &wb, &bb].iter().map(|t| tape.leaf(t)).collect();
        let out = integrate_stage_features(&mut tape, &vars[..2], &[(vars[2], vars[3]), (vars[4], vars[5])], (2, 2)).unwrap();

        let am = sample_map(&a, 0);
        let pooled: Map = am
            .iter()
            .map(|m| {
                (0..2)
                    .map(|y| (0..2).map(|x| (m[2 * y][2 * x] + m[2 * y][2 * x + 1] + m[2 * y + 1][2 * x] + m[2 * y + 1][2 * x + 1]) / 4.0).collect())
                    .collect()
            })
            .collect();
        let pa = ref_conv(&pooled, &wa, Some(&ba), 1, 0);
        let pb = ref_conv(&sample_map(&b, 0), &wb, Some(&bb), 1, 0);
        let expected: Vec<f64> = pa.iter().flatten().flatten().zip(pb.iter().flatten().flatten()).map(|(x, y)| x + y).collect();
        for (g, e) in tape.value(out).iter().zip(&expected) {
            assert!((g - e).abs() < 1e-10);
        }
    }

    #[test]
    fn single_stage_with_identity_projection_is_identity() {
        let mut rng = RngState::new(19);
        let a = Tensor::randn([2, 3, 2, 2], &mut rng);
        let mut eye = Tensor::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            eye.data_mut()[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let (w, b) = (tape.leaf(&eye), tape.leaf(&Tensor::zeros([3])));
        let out = integrate_stage_features(&mut tape, &[av], &[(w, b)], (2, 2)).unwrap();
        assert_eq!(tape.value(out), a.data());
        let z = tape.leaf(&Tensor::zeros([2, 3, 4, 4]));
        let w2 = tape.leaf(&Tensor::randn([3, 3, 1, 1], &mut rng));
        let out = integrate_stage_features(&mut tape, &[z], &[(w2, b)], (2, 2)).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = toy_config(16);
        let model = build_model(&cfg, 20).unwrap();
        let (f, e) = inputs(2, 16, 21);
        let target = Tensor::new([2, 1], vec![0.3, -0.2]).unwrap();
        let mut all: Vec<Tensor> = model.params.tensors().iter().map(|t| t.clone().with_requires_grad(true)).collect();
        let np = all.len();
        all.push(f.with_requires_grad(true));
        all.push(e.with_requires_grad(true));
        let report = grad_check(
            |tape, v| {
                let mut m = model.clone();
                let mut rng = RngState::new(22);
                let out = m.forward_with(tape, &v[..np], v[np], v[np + 1], Mode::Train, &mut rng)?;
                let z = tape.constant(target.clone());
                total_loss(tape, &out.pred, z, &LossConfig::default(), &mut rng)
            },
            &all,
            &GradCheckOptions {
                max_coords: Some(400),
                seed: 23,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut model = build_model(&toy_config(16), 24).unwrap();
        let (f, e) = inputs(4, 16, 25);
        let mut tape = Tape::new();
        let (fv, ev) = (tape.leaf(&f), tape.leaf(&e));
        model.forward(&mut tape, fv, ev, Mode::Train, &mut RngState::new(26)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta { seed: 24, epoch: 3 };
        save_checkpoint(&model, meta, dir.path()).unwrap();
        let (mut back, back_meta) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back, model);
        assert_eq!(back.predict(&f, &e).unwrap(), model.predict(&f, &e).unwrap());
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let model = build_model(&toy_config(16), 27).unwrap();
        let meta = CheckpointMeta { seed: 27, epoch: 0 };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, meta, dir.path()).unwrap();
        let target = dir.path().join("decoder.hidden.weight.ect");
        let bytes = fs::read(&target).unwrap();
        fs::write(&target, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
        fs::write(&target, &bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_ok());

        let manifest = dir.path().join("manifest.json");
        let text = fs::read_to_string(&manifest).unwrap();
        let mut edited: serde_json::Value = serde_json::from_str(&text).unwrap();
        edited["config"]["backbone"]["channels"] = serde_json::json!([8, 16, 40]);
        fs::write(&manifest, edited.to_string()).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());

        let mut edited: serde_json::Value = serde_json::from_str(&text).unwrap();
        edited["format_version"] = serde_json::json!(99);
        fs::write(&manifest, edited.to_string()).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());

        fs::write(&manifest, &text).unwrap();
        fs::remove_file(&target).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::MissingFiles(_))));
    }

    #[test]
    fn fusion_variant_names_roundtrip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.name().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("concat".parse::<FusionVariant>().is_err());
    }
}
