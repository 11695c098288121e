//! Synthetic driving data: a road renderer driven by random curvature and
//! speed profiles, simulated events between consecutive frames, the
//! dataset-balancing filters and seeded train/test splits.
//!
//! The camera looks down a road whose centerline bends with the curvature a
//! short distance ahead, so distant rows preview upcoming turns. Centre dashes
//! scroll toward the camera with speed and the sky texture pans sideways with
//! the integrated yaw `∫ κ·v dt`, so the event stream carries the current
//! turning rate.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    background_noise, bin_events, normalize_event_tensor, read_stream, simulate_events,
    write_stream, Geometry, NormalizeMode, DEFAULT_THRESHOLD, DEFAULT_WINDOW_US,
};
use crate::pgm::{self, Image};
use crate::tensor::{RngState, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

/// Steering angle in degrees represented by one normalized unit.
pub const DEFAULT_DEGREE_SCALE: f64 = 45.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub height: usize,
    pub width: usize,
    /// Drive time between consecutive samples.
    pub sample_interval_us: u64,
    /// Time between the two frames of a sample; also the event window.
    pub frame_gap_us: u64,
    /// Range of curvature segment durations, seconds.
    pub segment_s: (f64, f64),
    /// Probability that a segment is straight.
    pub straight_fraction: f64,
    /// Multiplies every curvature target; 0 gives a straight road.
    pub curvature_scale: f64,
    pub speed_kmh: (f64, f64),
    /// Label gain: steering = clamp(g·κ, −1, 1).
    pub steering_gain: f64,
    /// Lateral centreline shift at the horizon for unit curvature, in widths.
    pub bend: f64,
    /// How far ahead the horizon row looks, seconds.
    pub lookahead_s: f64,
    /// Sky pan rate for unit curvature at 50 km/h, widths per second.
    pub yaw_rate: f64,
    /// Road distance per dash cycle, metres.
    pub dash_period_m: f64,
    /// Range of the per-sample exposure gain in ordinary light.
    pub gain: (f64, f64),
    /// Share of samples shot in adverse light, split evenly between low
    /// light and overexposure. Only the frame camera is affected; events are
    /// simulated from scene radiance.
    pub adverse_fraction: f64,
    pub low_light_gain: (f64, f64),
    pub overexposed_gain: (f64, f64),
    pub pixel_noise: f64,
    pub event_threshold: f64,
    /// Background events per pixel per second.
    pub noise_rate_hz: f64,
    pub degree_scale: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            height: 32,
            width: 32,
            sample_interval_us: 250_000,
            frame_gap_us: DEFAULT_WINDOW_US,
            segment_s: (2.0, 8.0),
            straight_fraction: 0.45,
            curvature_scale: 1.0,
            speed_kmh: (5.0, 70.0),
            steering_gain: 1.0,
            bend: 0.3,
            lookahead_s: 1.5,
            yaw_rate: 3.0,
            dash_period_m: 4.5,
            gain: (0.5, 1.5),
            adverse_fraction: 0.3,
            low_light_gain: (0.03, 0.1),
            overexposed_gain: (3.0, 6.0),
            pixel_noise: 0.01,
            event_threshold: DEFAULT_THRESHOLD,
            noise_rate_hz: 0.5,
            degree_scale: DEFAULT_DEGREE_SCALE,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::InvalidArgument(format!("scenario: {d}")));
        if self.height < 8 || self.width < 8 {
            return bad("geometry must be at least 8x8");
        }
        if self.sample_interval_us == 0 || self.frame_gap_us == 0 {
            return bad("sample interval and frame gap must be positive");
        }
        if !(self.segment_s.0 > 0.0 && self.segment_s.1 >= self.segment_s.0) {
            return bad("segment duration range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.straight_fraction) {
            return bad("straight fraction must be in [0, 1]");
        }
        if !(self.speed_kmh.0 > 0.0 && self.speed_kmh.1 >= self.speed_kmh.0) {
            return bad("speed range must be positive and ordered");
        }
        for g in [self.gain, self.low_light_gain, self.overexposed_gain] {
            if !(g.0 > 0.0 && g.1 >= g.0) {
                return bad("gain ranges must be positive and ordered");
            }
        }
        if !(0.0..=1.0).contains(&self.adverse_fraction) {
            return bad("adverse fraction must be in [0, 1]");
        }
        if !(self.event_threshold > 0.0) || !(self.degree_scale > 0.0) {
            return bad("event threshold and degree scale must be positive");
        }
        if self.pixel_noise < 0.0 || self.noise_rate_hz < 0.0 || !(self.dash_period_m > 0.0) {
            return bad("noise levels must be non-negative and the dash period positive");
        }
        Ok(())
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            height: self.height,
            width: self.width,
        }
    }
}

/// One smooth piece of a profile: holds `value` after easing in from the
/// previous segment's value over the first second.
#[derive(Clone, Copy, Debug)]
struct Segment {
    start: f64,
    value: f64,
}

/// Piecewise-constant targets joined by cosine ramps.
#[derive(Clone, Debug)]
struct Profile {
    segments: Vec<Segment>,
}

const RAMP_S: f64 = 1.0;

impl Profile {
    fn generate(
        duration: f64,
        range: (f64, f64),
        rng: &mut RngState,
        mut draw: impl FnMut(&mut RngState) -> f64,
    ) -> Profile {
        let mut segments = Vec::new();
        let mut t = 0.0;
        while t <= duration {
            segments.push(Segment {
                start: t,
                value: draw(rng),
            });
            t += range.0 + (range.1 - range.0) * rng.uniform();
        }
        Profile { segments }
    }

    fn at(&self, t: f64) -> f64 {
        let i = self.segments.partition_point(|s| s.start <= t).saturating_sub(1);
        let seg = self.segments[i];
        if i == 0 {
            return seg.value;
        }
        let prev = self.segments[i - 1].value;
        let u = ((t - seg.start) / RAMP_S).clamp(0.0, 1.0);
        let w = 0.5 - 0.5 * (std::f64::consts::PI * u).cos();
        prev + (seg.value - prev) * w
    }
}

/// Curvature and speed along one drive, plus the integrated phases that the
/// renderer needs.
pub struct Scenario {
    params: ScenarioParams,
    curvature: Profile,
    speed: Profile,
}

/// Renderer inputs at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub t_s: f64,
    /// Normalized curvature at the camera.
    pub kappa: f64,
    pub speed_kmh: f64,
    /// Dash scroll phase in cycles.
    pub dash_phase: f64,
    /// Sky pan in widths.
    pub yaw: f64,
}

const INTEGRATION_STEP_S: f64 = 1e-3;

impl Scenario {
    pub fn generate(params: &ScenarioParams, duration_s: f64, rng: &mut RngState) -> Scenario {
        let (straight, scale) = (params.straight_fraction, params.curvature_scale);
        let curvature = Profile::generate(duration_s + params.lookahead_s + 1.0, params.segment_s, rng, |r| {
            if r.bernoulli(straight) {
                0.0
            } else {
                let sign = if r.bernoulli(0.5) { 1.0 } else { -1.0 };
                sign * scale * r.uniform().powf(1.5)
            }
        });
        let (lo, hi) = params.speed_kmh;
        let speed = Profile::generate(duration_s + 1.0, params.segment_s, rng, |r| lo + (hi - lo) * r.uniform());
        Scenario {
            params: params.clone(),
            curvature,
            speed,
        }
    }

    pub fn kappa(&self, t: f64) -> f64 {
        self.curvature.at(t)
    }

    pub fn speed_kmh(&self, t: f64) -> f64 {
        self.speed.at(t)
    }

    fn rates(&self, t: f64) -> (f64, f64) {
        let v = self.speed_kmh(t);
        let dash = v / 3.6 / self.params.dash_period_m;
        let yaw = self.params.yaw_rate * self.kappa(t) * v / 50.0;
        (dash, yaw)
    }

    /// Poses at increasing times `ts`, integrating the phases with the
    /// trapezoid rule on a fixed step.
    pub fn poses(&self, ts: &[f64]) -> Vec<Pose> {
        let (mut t, mut dash, mut yaw) = (0.0, 0.0, 0.0);
        let mut out = Vec::with_capacity(ts.len());
        for &target in ts {
            while t < target {
                let h = INTEGRATION_STEP_S.min(target - t);
                let (d0, y0) = self.rates(t);
                let (d1, y1) = self.rates(t + h);
                dash += 0.5 * h * (d0 + d1);
                yaw += 0.5 * h * (y0 + y1);
                t += h;
            }
            out.push(Pose {
                t_s: target,
                kappa: self.kappa(target),
                speed_kmh: self.speed_kmh(target),
                dash_phase: dash,
                yaw,
            });
        }
        out
    }

    /// Noise-free intensities in `[0, 1]`.
    pub fn render(&self, pose: &Pose) -> Image {
        let p = &self.params;
        let (h, w) = (p.height, p.width);
        let wf = w as f64;
        let horizon = h / 4;
        let tau = std::f64::consts::TAU;
        let mut pixels = vec![0.0; h * w];
        for y in 0..h {
            let row = &mut pixels[y * w..(y + 1) * w];
            if y < horizon {
                let lift = 0.05 * y as f64 / horizon as f64;
                for (x, px) in row.iter_mut().enumerate() {
                    let u = (x as f64 + 0.5) / wf + pose.yaw;
                    *px = 0.6 + lift + 0.25 * (tau * 2.0 * u).sin() + 0.08 * (tau * 5.0 * u + 1.0).sin();
                }
                continue;
            }
            let d = (y as f64 + 0.5 - horizon as f64) / (h - horizon) as f64;
            let far = 1.0 - d;
            let ahead = self.kappa(pose.t_s + p.lookahead_s * far);
            let centre = 0.5 * wf + p.bend * wf * far * far * ahead;
            let half = wf * (0.05 + 0.4 * d);
            let line_w = 0.6 + 0.8 * d;
            let along = 0.6 / d.max(0.05) - pose.dash_phase;
            let dash_on = (0.5 + 2.0 * (tau * along).sin()).clamp(0.0, 1.0);
            for (x, px) in row.iter_mut().enumerate() {
                let xc = x as f64 + 0.5;
                let off = (xc - centre).abs();
                let mut v = if off <= half { 0.4 } else { 0.22 };
                let edge = (1.0 - (off - half).abs() / line_w).max(0.0);
                let dash = dash_on * (1.0 - off / (0.8 * line_w)).max(0.0);
                v += (0.95 - v) * edge.max(dash);
                *px = v;
            }
        }
        Image::new(h, w, pixels).expect("renderer geometry")
    }
}

/// Per-sample exposure gain of the frame camera.
fn draw_gain(p: &ScenarioParams, rng: &mut RngState) -> f64 {
    let u = rng.uniform();
    let (lo, hi) = if u < 0.5 * p.adverse_fraction {
        p.low_light_gain
    } else if u < p.adverse_fraction {
        p.overexposed_gain
    } else {
        p.gain
    };
    lo + (hi - lo) * rng.uniform()
}

/// Applies exposure gain and pixel noise, then rounds to 8-bit levels.
fn expose(img: &Image, gain: f64, noise: f64, rng: &mut RngState) -> Image {
    let pixels = img
        .pixels
        .iter()
        .map(|v| pgm::quantize(gain * v + noise * rng.normal()) as f64 / 255.0)
        .collect();
    Image::new(img.height, img.width, pixels).expect("same geometry")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub frame_a: String,
    pub frame_b: String,
    pub events: String,
    pub steering: f64,
    pub speed_kmh: f64,
    pub t_us: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    All,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRules {
    pub min_speed_kmh: f64,
    /// Half-width of the near-straight band, degrees.
    pub band_degrees: f64,
    /// Fraction of in-band samples removed.
    pub band_drop: f64,
    pub outlier_sigmas: f64,
    pub seed: u64,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules {
            min_speed_kmh: 15.0,
            band_degrees: 5.0,
            band_drop: 0.7,
            outlier_sigmas: 3.0,
            seed: 0,
        }
    }
}

/// What one application of [`filter_dataset`] removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub rules: FilterRules,
    pub input: usize,
    pub dropped_speed: usize,
    pub dropped_band: usize,
    pub dropped_outlier: usize,
    /// Normalized half-width of the band.
    pub band_limit: f64,
    /// Mean and standard deviation of the labels the outlier rule saw.
    pub label_mean: f64,
    pub label_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub params: ScenarioParams,
    pub split: Split,
    pub samples: Vec<SampleRecord>,
    pub filters: Vec<FilterReport>,
    /// Directory the sample paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.steering).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; sample paths resolve against its directory.
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.format_version)));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }
}

/// Renders `n` samples into `out_dir` and writes the labels and manifest.
pub fn gen_dataset(n: usize, seed: u64, params: &ScenarioParams, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    params.validate()?;
    for sub in ["frames", "events"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let interval = params.sample_interval_us as f64 * 1e-6;
    let gap = params.frame_gap_us as f64 * 1e-6;
    let duration = n as f64 * interval + gap;
    let scenario = Scenario::generate(params, duration, &mut RngState::derive(seed, 0));
    let times: Vec<f64> = (0..n).flat_map(|i| [i as f64 * interval, i as f64 * interval + gap]).collect();
    let poses = scenario.poses(&times);

    let mut labels = csv::Writer::from_writer(Vec::new());
    labels
        .write_record(["id", "steering", "speed_kmh", "t_us"])
        .expect("in-memory csv");
    let mut samples = Vec::with_capacity(n);
    for (i, pair) in poses.chunks_exact(2).enumerate() {
        let record = write_sample(i, seed, &scenario, pair, out_dir)?;
        labels
            .serialize((record.id, record.steering, record.speed_kmh, record.t_us))
            .expect("in-memory csv");
        samples.push(record);
    }
    let labels_path = out_dir.join("labels.csv");
    let bytes = labels.into_inner().expect("in-memory csv");
    fs::write(&labels_path, bytes).map_err(|e| Error::io(&labels_path, e))?;

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed,
        params: params.clone(),
        split: Split::All,
        samples,
        filters: Vec::new(),
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn write_sample(i: usize, seed: u64, scenario: &Scenario, pair: &[Pose], out_dir: &Path) -> Result<SampleRecord> {
    let p = &scenario.params;
    let mut rng = RngState::derive(seed, 1 + i as u64);
    let gain = draw_gain(p, &mut rng);
    let (scene_a, scene_b) = (scenario.render(&pair[0]), scenario.render(&pair[1]));
    let a = expose(&scene_a, gain, p.pixel_noise, &mut rng);
    let b = expose(&scene_b, gain, p.pixel_noise, &mut rng);
    let events = simulate_events(&scene_a, &scene_b, p.event_threshold, 0, p.frame_gap_us)?;
    let noise = background_noise(p.geometry(), p.frame_gap_us, p.noise_rate_hz, &mut rng)?;
    let events = events.merge(&noise)?;

    let record = SampleRecord {
        id: i,
        frame_a: format!("frames/{i:06}_a.pgm"),
        frame_b: format!("frames/{i:06}_b.pgm"),
        events: format!("events/{i:06}.csv"),
        steering: (p.steering_gain * pair[0].kappa).clamp(-1.0, 1.0),
        speed_kmh: pair[0].speed_kmh,
        t_us: (pair[0].t_s * 1e6).round() as u64,
    };
    pgm::save(&a, &out_dir.join(&record.frame_a))?;
    pgm::save(&b, &out_dir.join(&record.frame_b))?;
    write_stream(&events, &out_dir.join(&record.events))?;
    Ok(record)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Whether the band rule removes sample `id`. Each sample gets its own
/// stream, so the decision does not depend on which other samples survive.
pub fn band_drop_draw(rules: &FilterRules, id: usize) -> bool {
    RngState::derive(rules.seed, id as u64).bernoulli(rules.band_drop)
}

/// Applies, in order: the minimum-speed rule, seeded removal of
/// `band_drop` of the samples inside the near-straight band, and removal of
/// labels further than `outlier_sigmas` standard deviations from the mean
/// of what is left.
pub fn filter_dataset(manifest: &DatasetManifest, rules: &FilterRules) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&rules.band_drop) || !(rules.outlier_sigmas > 0.0) || rules.band_degrees < 0.0 {
        return Err(Error::InvalidArgument(format!("invalid filter rules {rules:?}")));
    }
    let input = manifest.len();
    let band_limit = rules.band_degrees / manifest.params.degree_scale;

    let kept: Vec<&SampleRecord> = manifest
        .samples
        .iter()
        .filter(|s| s.speed_kmh >= rules.min_speed_kmh)
        .collect();
    let dropped_speed = input - kept.len();

    let before = kept.len();
    let kept: Vec<&SampleRecord> = kept
        .into_iter()
        .filter(|s| !(s.steering.abs() < band_limit && band_drop_draw(rules, s.id)))
        .collect();
    let dropped_band = before - kept.len();

    let labels: Vec<f64> = kept.iter().map(|s| s.steering).collect();
    let (label_mean, label_std) = mean_std(&labels);
    let before = kept.len();
    let kept: Vec<SampleRecord> = kept
        .into_iter()
        .filter(|s| (s.steering - label_mean).abs() <= rules.outlier_sigmas * label_std)
        .cloned()
        .collect();
    let dropped_outlier = before - kept.len();

    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "filters removed all {input} samples (speed {dropped_speed}, band {dropped_band}, outlier {dropped_outlier})"
        )));
    }
    let mut out = manifest.clone();
    out.samples = kept;
    out.filters.push(FilterReport {
        rules: rules.clone(),
        input,
        dropped_speed,
        dropped_band,
        dropped_outlier,
        band_limit,
        label_mean,
        label_std,
    });
    Ok(out)
}

/// Seeded shuffle split into disjoint train and test manifests; each keeps
/// the original sample order.
pub fn split_dataset(manifest: &DatasetManifest, test_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let n = manifest.len();
    if n < 2 {
        return Err(Error::EmptyDataset(format!("cannot split {n} samples")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let mut is_test = vec![false; n];
    order[..n_test].iter().for_each(|&i| is_test[i] = true);
    let pick = |test: bool, split: Split| {
        let mut m = manifest.clone();
        m.split = split;
        m.samples = manifest
            .samples
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == test)
            .map(|(s, _)| s.clone())
            .collect();
        m
    };
    Ok((pick(false, Split::Train), pick(true, Split::Test)))
}

/// Model inputs for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Later frame of each pair, (B, 1, H, W) in `[0, 1]`.
    pub frames: Tensor,
    /// Normalized event counts, (B, 2, H, W).
    pub events: Tensor,
    /// Steering labels, (B,).
    pub steering: Tensor,
    pub ids: Vec<usize>,
}

/// Reads the samples at `indices` (positions in `manifest.samples`).
pub fn load_batch(manifest: &DatasetManifest, indices: &[usize], mode: NormalizeMode) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let records = indices
        .iter()
        .map(|&i| {
            manifest.samples.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("sample index {i} outside manifest of {}", manifest.len()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let missing: Vec<PathBuf> = records
        .iter()
        .flat_map(|r| [&r.frame_b, &r.events])
        .map(|p| manifest.root.join(p))
        .filter(|p| !p.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let (h, w) = (manifest.params.height, manifest.params.width);
    let window = manifest.params.frame_gap_us;
    let mut frames = Vec::with_capacity(records.len() * h * w);
    let mut events = Vec::with_capacity(records.len() * 2 * h * w);
    for r in &records {
        let path = manifest.root.join(&r.frame_b);
        let img = pgm::load(&path)?;
        if (img.height, img.width) != (h, w) {
            return Err(Error::format(&path, format!("{}x{} frame in a {h}x{w} dataset", img.height, img.width)));
        }
        frames.extend_from_slice(&img.pixels);
        let path = manifest.root.join(&r.events);
        let stream = read_stream(&path)?;
        if stream.geometry() != manifest.params.geometry() {
            return Err(Error::format(&path, "event geometry differs from the dataset"));
        }
        let bins = bin_events(&stream, window)?;
        let first = bins
            .first()
            .ok_or_else(|| Error::format(&path, "event stream has zero duration"))?;
        events.extend_from_slice(normalize_event_tensor(first, mode).data());
    }
    let b = records.len();
    Ok(Batch {
        frames: Tensor::new([b, 1, h, w], frames)?,
        events: Tensor::new([b, 2, h, w], events)?,
        steering: Tensor::new([b], records.iter().map(|r| r.steering).collect())?,
        ids: records.iter().map(|r| r.id).collect(),
    })
}

/// A whole split held in memory, for repeated minibatch gathers.
#[derive(Clone, Debug)]
pub struct Preloaded {
    all: Batch,
}

impl Preloaded {
    pub fn load(manifest: &DatasetManifest, mode: NormalizeMode) -> Result<Preloaded> {
        let idx: Vec<usize> = (0..manifest.len()).collect();
        Ok(Preloaded {
            all: load_batch(manifest, &idx, mode)?,
        })
    }

    pub fn len(&self) -> usize {
        self.all.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all.ids.is_empty()
    }

    pub fn all(&self) -> &Batch {
        &self.all
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("sample index {bad} outside {n} loaded samples")));
        }
        let take = |t: &Tensor| -> Result<Tensor> {
            let per = t.numel() / n;
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            let data = indices.iter().flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied()).collect();
            Tensor::new(shape, data)
        };
        Ok(Batch {
            frames: take(&self.all.frames)?,
            events: take(&self.all.events)?,
            steering: take(&self.all.steering)?,
            ids: indices.iter().map(|&i| self.all.ids[i]).collect(),
        })
    }
}
