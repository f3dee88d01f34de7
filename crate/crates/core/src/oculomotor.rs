//! Fixation/saccade detection and the ambient-focal coefficient K.
//!
//! For fixation `i` with duration `d_i` followed by a saccade of amplitude
//! `a_{i+1}`:
//!
//! ```text
//! K_i = (d_i - mu_d) / sigma_d - (a_{i+1} - mu_a) / sigma_a
//! ```
//!
//! with population statistics over the analysis window. Positive K marks
//! focal viewing (long dwells, short saccades), negative K ambient viewing.
//! A zero standard deviation zeroes its term.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::{CameraIntrinsics, GazeSample, Nanos};

pub const DEFAULT_VELOCITY_DEG_PER_S: f64 = 30.0;
pub const DEFAULT_VELOCITY_PX_PER_INTERVAL: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OculomotorError {
    #[error("need at least 2 valid pixel gaze samples, found {0}")]
    InsufficientSamples(usize),
    #[error("gaze timestamps must strictly increase (at {0} ns)")]
    NonMonotonicTimestamp(Nanos),
    #[error("coefficient K needs at least 2 fixations, found {0}")]
    TooFewEvents(usize),
    #[error("{fixations} fixations need {} saccades, found {saccades}", fixations.saturating_sub(1))]
    EventCountMismatch { fixations: usize, saccades: usize },
    #[error("saccade amplitudes mix degrees and pixels")]
    MixedUnits,
    #[error("empty K series")]
    EmptySeries,
    #[error("write failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeUnit {
    Degrees,
    Pixels,
}

impl AmplitudeUnit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Degrees => "deg",
            Self::Pixels => "px",
        }
    }
}

/// I-VT parameters. The velocity threshold is in deg/s when intrinsics are
/// available, otherwise in pixels per nominal sample interval (the median
/// spacing of the stream).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub velocity_threshold: Option<f64>,
    pub min_fixation_ms: f64,
    pub max_gap_ms: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self { velocity_threshold: None, min_fixation_ms: 60.0, max_gap_ms: 75.0 }
    }
}

impl DetectorParams {
    pub fn threshold_for(&self, unit: AmplitudeUnit) -> f64 {
        self.velocity_threshold.unwrap_or(match unit {
            AmplitudeUnit::Degrees => DEFAULT_VELOCITY_DEG_PER_S,
            AmplitudeUnit::Pixels => DEFAULT_VELOCITY_PX_PER_INTERVAL,
        })
    }

    /// Same parameters with the unit default filled in.
    pub fn resolved(&self, unit: AmplitudeUnit) -> Self {
        Self { velocity_threshold: Some(self.threshold_for(unit)), ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixationEvent {
    pub start: Nanos,
    pub end: Nanos,
    pub duration_ms: f64,
    pub centroid: (f64, f64),
}

/// Saccade `i` joins fixation `i` to fixation `i + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaccadeEvent {
    pub start: Nanos,
    pub end: Nanos,
    pub amplitude: f64,
    pub unit: AmplitudeUnit,
    pub from_fixation: usize,
    pub to_fixation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub fixations: Vec<FixationEvent>,
    pub saccades: Vec<SaccadeEvent>,
    pub unit: AmplitudeUnit,
}

fn amplitude(a: (f64, f64), b: (f64, f64), intrinsics: Option<&CameraIntrinsics>) -> f64 {
    match intrinsics {
        Some(intr) => intr.angle_deg(a, b),
        None => (a.0 - b.0).hypot(a.1 - b.1),
    }
}

/// Velocity-threshold identification. Consecutive sample transitions
/// slower than the threshold (and not spanning a gap longer than
/// `max_gap_ms`) form fixations; fixations shorter than `min_fixation_ms`
/// are dropped; each remaining neighbour pair is joined by a saccade whose
/// amplitude is the distance between centroids.
pub fn detect_events(
    gaze: &[GazeSample],
    params: &DetectorParams,
    intrinsics: Option<&CameraIntrinsics>,
) -> Result<EventStream, OculomotorError> {
    let points: Vec<(Nanos, (f64, f64))> =
        gaze.iter().filter(|s| s.is_valid()).filter_map(|s| s.pixel_xy().map(|p| (s.timestamp, p))).collect();
    if points.len() < 2 {
        return Err(OculomotorError::InsufficientSamples(points.len()));
    }
    if let Some(w) = points.windows(2).find(|w| w[1].0 <= w[0].0) {
        return Err(OculomotorError::NonMonotonicTimestamp(w[1].0));
    }

    let unit = if intrinsics.is_some() { AmplitudeUnit::Degrees } else { AmplitudeUnit::Pixels };
    let threshold = params.threshold_for(unit);
    let max_gap_ns = params.max_gap_ms * 1e6;
    let nominal_ns = {
        let mut gaps: Vec<Nanos> = points.windows(2).map(|w| w[1].0 - w[0].0).collect();
        gaps.sort_unstable();
        gaps[gaps.len() / 2] as f64
    };

    let slow: Vec<bool> = points
        .windows(2)
        .map(|w| {
            let dt = (w[1].0 - w[0].0) as f64;
            if dt > max_gap_ns {
                return false;
            }
            let dist = amplitude(w[0].1, w[1].1, intrinsics);
            let velocity = match unit {
                AmplitudeUnit::Degrees => dist / (dt / 1e9),
                AmplitudeUnit::Pixels => dist / dt * nominal_ns,
            };
            velocity < threshold
        })
        .collect();

    let mut fixations = Vec::new();
    let mut i = 0;
    while i < slow.len() {
        if !slow[i] {
            i += 1;
            continue;
        }
        let first = i;
        while i < slow.len() && slow[i] {
            i += 1;
        }
        // Transitions first..i cover samples first..=i.
        let run = &points[first..=i];
        let (start, end) = (run[0].0, run[run.len() - 1].0);
        let duration_ms = (end - start) as f64 / 1e6;
        if duration_ms < params.min_fixation_ms {
            continue;
        }
        let n = run.len() as f64;
        let centroid = (run.iter().map(|p| p.1 .0).sum::<f64>() / n, run.iter().map(|p| p.1 .1).sum::<f64>() / n);
        fixations.push(FixationEvent { start, end, duration_ms, centroid });
    }

    let saccades = fixations
        .windows(2)
        .enumerate()
        .map(|(k, f)| SaccadeEvent {
            start: f[0].end,
            end: f[1].start,
            amplitude: amplitude(f[0].centroid, f[1].centroid, intrinsics),
            unit,
            from_fixation: k,
            to_fixation: k + 1,
        })
        .collect();
    Ok(EventStream { fixations, saccades, unit })
}

/// Mean and population standard deviation of durations and amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mu_d: f64,
    pub sigma_d: f64,
    pub mu_a: f64,
    pub sigma_a: f64,
    /// Fixation count.
    pub n: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl WindowStats {
    pub fn from_values(durations_ms: &[f64], amplitudes: &[f64]) -> Self {
        let (mu_d, sigma_d) = mean_std(durations_ms);
        let (mu_a, sigma_a) = mean_std(amplitudes);
        Self { mu_d, sigma_d, mu_a, sigma_a, n: durations_ms.len() }
    }

    fn z(value: f64, mean: f64, sigma: f64) -> f64 {
        // Rounding noise in the mean of identical values counts as zero spread.
        if sigma <= 1e-12 * mean.abs().max(1.0) {
            0.0
        } else {
            (value - mean) / sigma
        }
    }

    pub fn k(&self, duration_ms: f64, next_amplitude: f64) -> f64 {
        Self::z(duration_ms, self.mu_d, self.sigma_d) - Self::z(next_amplitude, self.mu_a, self.sigma_a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KSample {
    /// Index into the fixation list the series was computed from.
    pub fixation_index: usize,
    pub k: f64,
    /// Start of the fixation.
    pub timestamp: Nanos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSeries {
    pub samples: Vec<KSample>,
    pub stats: WindowStats,
}

impl KSeries {
    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.k).collect()
    }
}

fn check_units(saccades: &[SaccadeEvent]) -> Result<(), OculomotorError> {
    match saccades.first() {
        Some(first) if saccades.iter().any(|s| s.unit != first.unit) => Err(OculomotorError::MixedUnits),
        _ => Ok(()),
    }
}

/// K for every fixation that has a following saccade, with statistics over
/// exactly the given events.
pub fn coefficient_k(fixations: &[FixationEvent], saccades: &[SaccadeEvent]) -> Result<KSeries, OculomotorError> {
    let n = fixations.len();
    if n < 2 {
        return Err(OculomotorError::TooFewEvents(n));
    }
    if saccades.len() != n - 1 {
        return Err(OculomotorError::EventCountMismatch { fixations: n, saccades: saccades.len() });
    }
    check_units(saccades)?;
    let durations: Vec<f64> = fixations.iter().map(|f| f.duration_ms).collect();
    let amplitudes: Vec<f64> = saccades.iter().map(|s| s.amplitude).collect();
    let stats = WindowStats::from_values(&durations, &amplitudes);
    let samples = (0..n - 1)
        .map(|i| KSample { fixation_index: i, k: stats.k(durations[i], amplitudes[i]), timestamp: fixations[i].start })
        .collect();
    Ok(KSeries { samples, stats })
}

pub fn mean_k(series: &KSeries) -> Result<f64, OculomotorError> {
    if series.samples.is_empty() {
        return Err(OculomotorError::EmptySeries);
    }
    Ok(series.samples.iter().map(|s| s.k).sum::<f64>() / series.samples.len() as f64)
}

/// A subset of a stream's fixations. A saccade belongs to the window when
/// both of its fixations do, and only fixations followed by such a saccade
/// get a K value. For a contiguous run this is exactly [`coefficient_k`]
/// over that run.
#[derive(Debug, Clone)]
pub struct EventWindow<'a> {
    stream: &'a EventStream,
    selected: Vec<bool>,
}

impl<'a> EventWindow<'a> {
    pub fn new(stream: &'a EventStream, mut keep: impl FnMut(&FixationEvent) -> bool) -> Self {
        let selected = stream.fixations.iter().map(&mut keep).collect();
        Self { stream, selected }
    }

    pub fn unit(&self) -> AmplitudeUnit {
        self.stream.unit
    }

    pub fn fixation_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    fn linked(&self, i: usize) -> bool {
        self.selected[i] && self.selected.get(i + 1).copied().unwrap_or(false)
    }

    pub fn durations(&self) -> impl Iterator<Item = f64> + '_ {
        self.stream.fixations.iter().zip(&self.selected).filter(|(_, &s)| s).map(|(f, _)| f.duration_ms)
    }

    pub fn amplitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.stream.saccades.iter().enumerate().filter(|(i, _)| self.linked(*i)).map(|(_, s)| s.amplitude)
    }

    pub fn stats(&self) -> WindowStats {
        let d: Vec<f64> = self.durations().collect();
        let a: Vec<f64> = self.amplitudes().collect();
        WindowStats::from_values(&d, &a)
    }

    /// K samples using externally supplied statistics.
    pub fn k_series(&self, stats: &WindowStats) -> KSeries {
        let samples = self
            .stream
            .saccades
            .iter()
            .enumerate()
            .filter(|(i, _)| self.linked(*i))
            .map(|(i, s)| {
                let f = &self.stream.fixations[i];
                KSample { fixation_index: i, k: stats.k(f.duration_ms, s.amplitude), timestamp: f.start }
            })
            .collect();
        KSeries { samples, stats: *stats }
    }
}

/// Statistics pooled over several windows (e.g. both participants).
pub fn pooled_stats(windows: &[&EventWindow<'_>]) -> Result<WindowStats, OculomotorError> {
    if let Some(first) = windows.first() {
        if windows.iter().any(|w| w.unit() != first.unit()) {
            return Err(OculomotorError::MixedUnits);
        }
    }
    let d: Vec<f64> = windows.iter().flat_map(|w| w.durations()).collect();
    let a: Vec<f64> = windows.iter().flat_map(|w| w.amplitudes()).collect();
    Ok(WindowStats::from_values(&d, &a))
}

/// Event dump: `kind,start_ns,end_ns,duration_ms,amplitude,unit,centroid_x,centroid_y`.
pub fn write_events_csv<W: Write>(mut out: W, stream: &EventStream) -> Result<(), OculomotorError> {
    let io = |e: std::io::Error| OculomotorError::Io(e.to_string());
    writeln!(out, "kind,start_ns,end_ns,duration_ms,amplitude,unit,centroid_x,centroid_y").map_err(io)?;
    for (i, f) in stream.fixations.iter().enumerate() {
        writeln!(out, "fixation,{},{},{},,,{},{}", f.start, f.end, f.duration_ms, f.centroid.0, f.centroid.1)
            .map_err(io)?;
        if let Some(s) = stream.saccades.get(i) {
            let ms = (s.end - s.start) as f64 / 1e6;
            writeln!(out, "saccade,{},{},{},{},{},,", s.start, s.end, ms, s.amplitude, s.unit.as_str()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// K trace: `fixation_index,timestamp_ns,k`.
pub fn write_k_trace_csv<W: Write>(mut out: W, samples: &[KSample]) -> Result<(), OculomotorError> {
    let io = |e: std::io::Error| OculomotorError::Io(e.to_string());
    writeln!(out, "fixation_index,timestamp_ns,k").map_err(io)?;
    for s in samples {
        writeln!(out, "{},{},{}", s.fixation_index, s.timestamp, s.k).map_err(io)?;
    }
    out.flush().map_err(io)
}
