//! Event-camera simulation from frame pairs and binning of event streams into
//! two-channel count grids.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pgm::Image;
use crate::tensor::{RngState, Tensor};

/// Offset added to intensities before taking logs, so black pixels are defined.
pub const LOG_EPS: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_WINDOW_US: u64 = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub t_us: u64,
    pub x: usize,
    pub y: usize,
    /// +1 for a brightness increase, −1 for a decrease.
    #[serde(rename = "p")]
    pub polarity: i8,
}

/// Time-sorted events on a fixed sensor geometry, all inside `[0, duration_us)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    geometry: Geometry,
    events: Vec<Event>,
    duration_us: u64,
}

impl EventStream {
    pub fn new(geometry: Geometry, events: Vec<Event>, duration_us: u64) -> Result<Self> {
        let bad = |d: String| Err(Error::InvalidArgument(format!("event stream: {d}")));
        if geometry.height == 0 || geometry.width == 0 {
            return bad(format!("empty geometry {geometry:?}"));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= geometry.width || e.y >= geometry.height {
                return bad(format!("event {i} at ({}, {}) is off the sensor", e.x, e.y));
            }
            if e.polarity != 1 && e.polarity != -1 {
                return bad(format!("event {i} has polarity {}", e.polarity));
            }
            if e.t_us >= duration_us {
                return bad(format!("event {i} at {} us is past {duration_us} us", e.t_us));
            }
            if i > 0 && events[i - 1].t_us > e.t_us {
                return bad(format!("event {i} is out of time order"));
            }
        }
        Ok(EventStream {
            geometry,
            events,
            duration_us,
        })
    }

    pub fn empty(geometry: Geometry, duration_us: u64) -> Result<Self> {
        EventStream::new(geometry, Vec::new(), duration_us)
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration_us(&self) -> u64 {
        self.duration_us
    }

    /// Merges another stream on the same geometry and duration.
    pub fn merge(&self, other: &EventStream) -> Result<EventStream> {
        if self.geometry != other.geometry || self.duration_us != other.duration_us {
            return Err(Error::InvalidArgument(
                "merged streams must share geometry and duration".into(),
            ));
        }
        let mut events = Vec::with_capacity(self.len() + other.len());
        events.extend_from_slice(&self.events);
        events.extend_from_slice(&other.events);
        events.sort_by_key(|e| e.t_us);
        EventStream::new(self.geometry, events, self.duration_us)
    }
}

/// ON/OFF counts of one time window, shape (2, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor {
    pub data: Tensor,
    /// 1-based.
    pub window_index: usize,
    pub window_us: u64,
}

impl EventTensor {
    pub fn total(&self) -> f64 {
        self.data.data().iter().sum()
    }
}

/// Emits `floor(|Δ| / C)` events per pixel, where
/// `Δ = log(next + ε) − log(prev + ε)`, with polarity `sign(Δ)`.
///
/// The i-th event of a pixel is stamped where the linearly interpolated log
/// change crosses `i·C`, i.e. at `t0 + ⌊(t1 − t0)·i·C/|Δ|⌋`, capped at
/// `t1 − 1` so the stream stays inside `[0, t1)`.
pub fn simulate_events(
    prev: &Image,
    next: &Image,
    threshold: f64,
    t0_us: u64,
    t1_us: u64,
) -> Result<EventStream> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "contrast threshold must be > 0, got {threshold}"
        )));
    }
    if prev.height != next.height || prev.width != next.width {
        return Err(Error::ShapeMismatch {
            op: "simulate_events",
            lhs: vec![prev.height, prev.width],
            rhs: vec![next.height, next.width],
        });
    }
    if t1_us <= t0_us {
        return Err(Error::InvalidArgument(format!(
            "simulate_events: need t1 > t0, got [{t0_us}, {t1_us}]"
        )));
    }
    let span = (t1_us - t0_us) as f64;
    let mut events = Vec::new();
    for y in 0..prev.height {
        for x in 0..prev.width {
            let delta = (next.at(y, x) + LOG_EPS).ln() - (prev.at(y, x) + LOG_EPS).ln();
            let k = (delta.abs() / threshold).floor() as u64;
            let polarity = if delta > 0.0 { 1 } else { -1 };
            for i in 1..=k {
                let offset = (span * i as f64 * threshold / delta.abs()).floor() as u64;
                let t_us = (t0_us + offset).min(t1_us - 1);
                events.push(Event {
                    t_us,
                    x,
                    y,
                    polarity,
                });
            }
        }
    }
    events.sort_by_key(|e| e.t_us);
    EventStream::new(
        Geometry {
            height: prev.height,
            width: prev.width,
        },
        events,
        t1_us,
    )
}

/// Sensor background activity: a Poisson number of events with mean
/// `rate_hz · H · W · duration`, uniform over pixels, time and polarity.
pub fn background_noise(
    geometry: Geometry,
    duration_us: u64,
    rate_hz: f64,
    rng: &mut RngState,
) -> Result<EventStream> {
    let pixels = (geometry.height * geometry.width) as f64;
    let count = rng.poisson(rate_hz * pixels * duration_us as f64 * 1e-6);
    let mut events: Vec<Event> = (0..count)
        .map(|_| Event {
            t_us: (rng.uniform() * duration_us as f64) as u64,
            x: rng.below(geometry.width),
            y: rng.below(geometry.height),
            polarity: if rng.bernoulli(0.5) { 1 } else { -1 },
        })
        .collect();
    events.sort_by_key(|e| e.t_us);
    EventStream::new(geometry, events, duration_us)
}

/// Splits the stream into `ceil(duration / T)` half-open windows
/// `[T·(j−1), T·j)` and counts ON events into channel 0 and OFF events into
/// channel 1 of each window.
pub fn bin_events(stream: &EventStream, window_us: u64) -> Result<Vec<EventTensor>> {
    if window_us == 0 {
        return Err(Error::InvalidArgument("window length must be > 0".into()));
    }
    let Geometry { height, width } = stream.geometry;
    let n_windows = stream.duration_us.div_ceil(window_us) as usize;
    let plane = height * width;
    let mut counts = vec![vec![0.0; 2 * plane]; n_windows];
    for e in &stream.events {
        let j = (e.t_us / window_us) as usize;
        let ch = if e.polarity > 0 { 0 } else { 1 };
        counts[j][ch * plane + e.y * width + e.x] += 1.0;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(j, data)| {
            Ok(EventTensor {
                data: Tensor::new([2, height, width], data)?,
                window_index: j + 1,
                window_us,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    None,
    UnitMax,
    #[default]
    Log1p,
}

impl std::str::FromStr for NormalizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormalizeMode::None),
            "unit_max" => Ok(NormalizeMode::UnitMax),
            "log1p" => Ok(NormalizeMode::Log1p),
            _ => Err(Error::InvalidArgument(format!("unknown normalize mode {s:?}"))),
        }
    }
}

pub fn normalize_event_tensor(e: &EventTensor, mode: NormalizeMode) -> Tensor {
    let mut out = e.data.clone();
    match mode {
        NormalizeMode::None => {}
        NormalizeMode::UnitMax => {
            let max = out.data().iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                out.data_mut().iter_mut().for_each(|v| *v /= max);
            }
        }
        NormalizeMode::Log1p => out.data_mut().iter_mut().for_each(|v| *v = v.ln_1p()),
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    height: usize,
    width: usize,
    duration_us: u64,
}

/// Path of the JSON file holding geometry and duration next to an event CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes `t_us,x,y,p` rows plus the geometry sidecar.
pub fn write_stream(stream: &EventStream, csv_path: &Path) -> Result<()> {
    let file = File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::format(csv_path, e.to_string());
    if stream.is_empty() {
        w.write_record(["t_us", "x", "y", "p"]).map_err(csv_err)?;
    }
    for e in &stream.events {
        w.serialize(e).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let side = sidecar_path(csv_path);
    let meta = Sidecar {
        height: stream.geometry.height,
        width: stream.geometry.width,
        duration_us: stream.duration_us,
    };
    fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn read_stream(csv_path: &Path) -> Result<EventStream> {
    let side = sidecar_path(csv_path);
    let meta: Sidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)
        .map_err(|e| Error::format(&side, e.to_string()))?;
    let mut r = csv::Reader::from_path(csv_path).map_err(|e| Error::format(csv_path, e.to_string()))?;
    let events = r
        .deserialize()
        .collect::<std::result::Result<Vec<Event>, _>>()
        .map_err(|e| Error::format(csv_path, e.to_string()))?;
    let geometry = Geometry {
        height: meta.height,
        width: meta.width,
    };
    EventStream::new(geometry, events, meta.duration_us)
        .map_err(|e| Error::format(csv_path, e.to_string()))
}
