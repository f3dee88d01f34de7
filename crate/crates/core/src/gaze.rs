//! Gaze stream ingestion, pinhole projection and two-stream time alignment.
//!
//! Timestamps are integer nanoseconds since session start everywhere in the
//! crate. Gaze files follow a fixed CSV layout:
//!
//! ```text
//! timestamp_ns,participant,dx,dy,dz,px,py
//! 0,A,0.1,0.0,1.0,,
//! 33333333,A,,,,512.0,498.5
//! ```
//!
//! Each row carries either a camera-frame direction (`dx,dy,dz`) or an
//! already projected pixel (`px,py`), never both.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Nanos = u64;

#[derive(Debug, Error, PartialEq)]
pub enum GazeError {
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: timestamp {timestamp} does not increase for participant {participant}")]
    NonMonotonicTimestamp { line: u64, timestamp: Nanos, participant: Participant },
    #[error("unknown gaze format `{0}`")]
    UnknownFormat(String),
    #[error("gaze direction ({dx}, {dy}, {dz}) points behind the camera")]
    BehindCamera { dx: f64, dy: f64, dz: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Participant {
    A,
    B,
}

impl Participant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
        }
    }

    pub fn other(&self) -> Self {
        match self {
            Self::A => Self::B,
            Self::B => Self::A,
        }
    }
}

impl fmt::Display for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Participant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            other => Err(format!("unknown participant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GazePayload {
    /// Camera-frame direction; `dz` is the optical-axis component.
    Direction3 {
        dx: f64,
        dy: f64,
        dz: f64,
    },
    Pixel2 {
        px: f64,
        py: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Validity {
    Valid,
    Missing,
    OutOfFrame,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub timestamp: Nanos,
    pub participant: Participant,
    pub payload: GazePayload,
    pub validity: Validity,
}

impl GazeSample {
    pub fn pixel(timestamp: Nanos, participant: Participant, px: f64, py: f64) -> Self {
        Self { timestamp, participant, payload: GazePayload::Pixel2 { px, py }, validity: Validity::Valid }
    }

    pub fn direction(timestamp: Nanos, participant: Participant, dx: f64, dy: f64, dz: f64) -> Self {
        Self { timestamp, participant, payload: GazePayload::Direction3 { dx, dy, dz }, validity: Validity::Valid }
    }

    pub fn is_valid(&self) -> bool {
        self.validity == Validity::Valid
    }

    /// Pixel coordinates when the payload is already projected.
    pub fn pixel_xy(&self) -> Option<(f64, f64)> {
        match self.payload {
            GazePayload::Pixel2 { px, py } => Some((px, py)),
            GazePayload::Direction3 { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GazeError> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GazeError> {
        let bad = |msg: String| Err(GazeError::InvalidIntrinsics(msg));
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return bad(format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("frame size must be positive, got {}x{}", self.width, self.height));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!(
                "principal point ({}, {}) outside {}x{} frame",
                self.cx, self.cy, self.width, self.height
            ));
        }
        Ok(())
    }

    /// Parses the flat `key = value` text format (`:` or whitespace also
    /// accepted as separators, `#` starts a comment).
    pub fn parse(text: &str) -> Result<Self, GazeError> {
        let mut values: HashMap<&str, &str> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .or_else(|| line.split_once(char::is_whitespace))
                .ok_or_else(|| GazeError::InvalidIntrinsics(format!("line {}: expected `key = value`", idx + 1)))?;
            values.insert(key.trim(), value.trim());
        }
        let float = |key: &str| -> Result<f64, GazeError> {
            let v = values.get(key).ok_or_else(|| GazeError::InvalidIntrinsics(format!("missing key `{key}`")))?;
            v.parse().map_err(|_| GazeError::InvalidIntrinsics(format!("`{key}` is not a number: {v}")))
        };
        let int = |key: &str| -> Result<u32, GazeError> {
            let v = values.get(key).ok_or_else(|| GazeError::InvalidIntrinsics(format!("missing key `{key}`")))?;
            v.parse().map_err(|_| GazeError::InvalidIntrinsics(format!("`{key}` is not a positive integer: {v}")))
        };
        Self::new(float("fx")?, float("fy")?, float("cx")?, float("cy")?, int("width")?, int("height")?)
    }

    pub fn to_text(&self) -> String {
        format!(
            "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= 0.0 && py >= 0.0 && px < self.width as f64 && py < self.height as f64
    }

    /// Unit ray through a pixel.
    pub fn back_project(&self, px: f64, py: f64) -> [f64; 3] {
        let x = (px - self.cx) / self.fx;
        let y = (py - self.cy) / self.fy;
        let n = (x * x + y * y + 1.0).sqrt();
        [x / n, y / n, 1.0 / n]
    }

    /// Visual angle between two pixels, in degrees.
    pub fn angle_deg(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        let ra = self.back_project(a.0, a.1);
        let rb = self.back_project(b.0, b.1);
        // atan2 of |cross| and dot stays accurate for small angles.
        let cross = [ra[1] * rb[2] - ra[2] * rb[1], ra[2] * rb[0] - ra[0] * rb[2], ra[0] * rb[1] - ra[1] * rb[0]];
        let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let cos = ra[0] * rb[0] + ra[1] * rb[1] + ra[2] * rb[2];
        sin.atan2(cos).to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GazeFormat {
    Csv,
}

impl FromStr for GazeFormat {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            other => Err(GazeError::UnknownFormat(other.to_string())),
        }
    }
}

pub const GAZE_CSV_HEADER: [&str; 7] = ["timestamp_ns", "participant", "dx", "dy", "dz", "px", "py"];

/// Reads a gaze stream. Rows must be strictly increasing in time per
/// participant; the result is ordered by timestamp (A before B on ties).
pub fn parse_gaze_stream<R: Read>(source: R, format: GazeFormat) -> Result<Vec<GazeSample>, GazeError> {
    match format {
        GazeFormat::Csv => parse_csv(source),
    }
}

fn parse_csv<R: Read>(source: R) -> Result<Vec<GazeSample>, GazeError> {
    let mut reader =
        csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| GazeError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != GAZE_CSV_HEADER {
        return Err(GazeError::MalformedRow {
            line: 1,
            reason: format!("expected header `{}`", GAZE_CSV_HEADER.join(",")),
        });
    }

    let mut samples = Vec::new();
    let mut last: HashMap<Participant, Nanos> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| GazeError::Csv(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: String| GazeError::MalformedRow { line, reason };
        if record.len() != GAZE_CSV_HEADER.len() {
            return Err(malformed(format!("expected 7 fields, found {}", record.len())));
        }
        let timestamp: Nanos = record[0].parse().map_err(|_| malformed(format!("bad timestamp `{}`", &record[0])))?;
        let participant: Participant = record[1].parse().map_err(malformed)?;

        let field = |i: usize| -> Result<Option<f64>, GazeError> {
            let s = &record[i];
            if s.is_empty() {
                return Ok(None);
            }
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(GazeError::MalformedRow {
                    line,
                    reason: format!("column `{}` is not a finite number: `{s}`", GAZE_CSV_HEADER[i]),
                }),
            }
        };
        let dir = (field(2)?, field(3)?, field(4)?);
        let pix = (field(5)?, field(6)?);
        let payload = match (dir, pix) {
            ((Some(dx), Some(dy), Some(dz)), (None, None)) => GazePayload::Direction3 { dx, dy, dz },
            ((None, None, None), (Some(px), Some(py))) => GazePayload::Pixel2 { px, py },
            _ => return Err(malformed("exactly one of (dx,dy,dz) or (px,py) must be fully populated".to_string())),
        };

        if let Some(&prev) = last.get(&participant) {
            if timestamp <= prev {
                return Err(GazeError::NonMonotonicTimestamp { line, timestamp, participant });
            }
        }
        last.insert(participant, timestamp);
        samples.push(GazeSample { timestamp, participant, payload, validity: Validity::Valid });
    }
    samples.sort_by_key(|s| (s.timestamp, s.participant));
    Ok(samples)
}

/// Serializes samples back to the CSV layout. Floats use the shortest
/// representation that round-trips.
pub fn write_gaze_csv<W: std::io::Write>(out: W, samples: &[GazeSample]) -> Result<(), GazeError> {
    let mut writer = csv::Writer::from_writer(out);
    let err = |e: csv::Error| GazeError::Csv(e.to_string());
    writer.write_record(GAZE_CSV_HEADER).map_err(err)?;
    for s in samples {
        let ts = s.timestamp.to_string();
        let row = match s.payload {
            GazePayload::Direction3 { dx, dy, dz } => [
                ts,
                s.participant.to_string(),
                dx.to_string(),
                dy.to_string(),
                dz.to_string(),
                String::new(),
                String::new(),
            ],
            GazePayload::Pixel2 { px, py } => [
                ts,
                s.participant.to_string(),
                String::new(),
                String::new(),
                String::new(),
                px.to_string(),
                py.to_string(),
            ],
        };
        writer.write_record(&row).map_err(err)?;
    }
    writer.flush().map_err(|e| GazeError::Csv(e.to_string()))
}

/// Pinhole projection of a direction sample. Pixel samples pass through.
pub fn try_project(sample: &GazeSample, intrinsics: &CameraIntrinsics) -> Result<GazeSample, GazeError> {
    match sample.payload {
        GazePayload::Pixel2 { .. } => Ok(*sample),
        GazePayload::Direction3 { dx, dy, dz } => {
            if dz <= 0.0 {
                return Err(GazeError::BehindCamera { dx, dy, dz });
            }
            let px = intrinsics.fx * (dx / dz) + intrinsics.cx;
            let py = intrinsics.fy * (dy / dz) + intrinsics.cy;
            let validity = match sample.validity {
                Validity::Valid if !intrinsics.contains(px, py) => Validity::OutOfFrame,
                v => v,
            };
            Ok(GazeSample { payload: GazePayload::Pixel2 { px, py }, validity, ..*sample })
        }
    }
}

/// Like [`try_project`], but a behind-camera direction yields the original
/// sample marked missing instead of an error.
pub fn project_gaze(sample: &GazeSample, intrinsics: &CameraIntrinsics) -> GazeSample {
    match try_project(sample, intrinsics) {
        Ok(s) => s,
        Err(_) => GazeSample { validity: Validity::Missing, ..*sample },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedPair {
    pub ts_a: Nanos,
    pub ts_b: Nanos,
    pub skew: Nanos,
    pub index_a: usize,
    pub index_b: usize,
}

/// Greedy mutual-nearest-neighbour matching of two sorted streams.
///
/// Candidate pairs within `tolerance` are accepted in order of increasing
/// skew, ties broken by `ts_a + ts_b`. Two candidates sharing an endpoint
/// can never tie on both keys, so the matching does not depend on which
/// stream is called A. Invalid samples are ignored; indices refer to the
/// input slices.
pub fn align_streams(a: &[GazeSample], b: &[GazeSample], tolerance: Nanos) -> Vec<AlignedPair> {
    let va: Vec<(usize, Nanos)> =
        a.iter().enumerate().filter(|(_, s)| s.is_valid()).map(|(i, s)| (i, s.timestamp)).collect();
    let vb: Vec<(usize, Nanos)> =
        b.iter().enumerate().filter(|(_, s)| s.is_valid()).map(|(i, s)| (i, s.timestamp)).collect();

    // Both streams are sorted, so each A sample's candidates form a window of B.
    let mut candidates: Vec<(Nanos, u128, usize, usize)> = Vec::new();
    let mut lo = 0usize;
    for (ia, &(_, ta)) in va.iter().enumerate() {
        while lo < vb.len() && vb[lo].1 < ta.saturating_sub(tolerance) {
            lo += 1;
        }
        let mut j = lo;
        while j < vb.len() && vb[j].1 <= ta.saturating_add(tolerance) {
            let tb = vb[j].1;
            candidates.push((ta.abs_diff(tb), ta as u128 + tb as u128, ia, j));
            j += 1;
        }
    }
    candidates.sort_unstable();

    let mut used_a = vec![false; va.len()];
    let mut used_b = vec![false; vb.len()];
    let mut pairs = Vec::new();
    for (skew, _, ia, ib) in candidates {
        if used_a[ia] || used_b[ib] {
            continue;
        }
        used_a[ia] = true;
        used_b[ib] = true;
        pairs.push(AlignedPair { ts_a: va[ia].1, ts_b: vb[ib].1, skew, index_a: va[ia].0, index_b: vb[ib].0 });
    }
    pairs.sort_by_key(|p| (p.ts_a, p.ts_b));
    pairs
}

/// Median spacing between consecutive timestamps, if there are at least two.
pub fn median_interval(samples: &[GazeSample]) -> Option<Nanos> {
    let mut gaps: Vec<Nanos> = samples.windows(2).map(|w| w[1].timestamp - w[0].timestamp).collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable();
    Some(gaps[gaps.len() / 2])
}
