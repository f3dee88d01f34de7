//! Synthetic dyadic sessions with ground-truth shared attention.
//!
//! A scene is a flat-shaded 2D canvas of moving rectangles and discs. Each
//! participant sees it through a fixed viewpoint (translation plus a small
//! scale about the frame centre). A script says, for every time span, which
//! object each participant attends to, or that they look around freely.
//! Gaze follows a fixation/saccade schedule on the attended target with
//! per-sample jitter.
//!
//! Scenario files are TOML:
//!
//! ```toml
//! schema_version = 1
//! duration_s = 10.0
//! frame_rate_hz = 30.0
//! frame_size = [1408, 1408]
//! rng_seed = 7
//! gaze_jitter_px = 1.5
//!
//! [background]
//! color = [96, 96, 96]
//!
//! [viewpoints.b]
//! offset = [40.0, -30.0]
//! scale = 1.04
//!
//! [[objects]]
//! name = "board"
//! shape = "rect"
//! size = [640.0, 560.0]
//! color = [210, 50, 40]
//! texture = { noise = { seed = 3 } }
//! waypoints = [[0.0, 700.0, 700.0], [10.0, 760.0, 690.0]]
//!
//! [[script]]
//! start_s = 0.0
//! end_s = 10.0
//! participant = "both"
//! target = "board"
//! ```
//!
//! Script entries name either `target = "<object>"` or
//! `independent = <seed>` (free viewing), and may set `dwell_ms` and
//! `saccade_px` to shape the fixation schedule.

mod scene;

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaze::{write_gaze_csv, CameraIntrinsics, GazeSample, Nanos, Participant};
use crate::tube::{Frame, FrameSource, TubeError};

pub use scene::Scene;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("frame encoding: {0}")]
    Encode(#[from] TubeError),
    #[error("{0}")]
    Gaze(#[from] crate::gaze::GazeError),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Disc,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    #[default]
    Solid,
    /// Blocky value noise darkening the base colour by up to `contrast`.
    Noise {
        seed: u64,
        #[serde(default = "default_block")]
        block: u32,
        #[serde(default = "default_contrast")]
        contrast: f64,
    },
}

fn default_block() -> u32 {
    6
}

fn default_contrast() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: Shape,
    /// Width and height; a disc uses the first value as its diameter.
    pub size: [f64; 2],
    pub color: [u8; 3],
    #[serde(default)]
    pub texture: Texture,
    /// `[t_s, x, y]` centre positions, linearly interpolated and held
    /// constant outside the listed times.
    pub waypoints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Background {
    #[serde(default = "default_background")]
    pub color: [u8; 3],
    #[serde(default)]
    pub texture: Texture,
}

fn default_background() -> [u8; 3] {
    [96, 96, 96]
}

impl Default for Background {
    fn default() -> Self {
        Self { color: default_background(), texture: Texture::Solid }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Viewpoint {
    #[serde(default)]
    pub offset: [f64; 2],
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Viewpoint {
    fn default() -> Self {
        Self { offset: [0.0, 0.0], scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Viewpoints {
    #[serde(default)]
    pub a: Viewpoint,
    #[serde(default)]
    pub b: Viewpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Who {
    A,
    B,
    #[serde(rename = "both")]
    Both,
}

impl Who {
    pub fn includes(&self, p: Participant) -> bool {
        matches!((self, p), (Who::Both, _) | (Who::A, Participant::A) | (Who::B, Participant::B))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub start_s: f64,
    pub end_s: f64,
    pub participant: Who,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub independent: Option<u64>,
    #[serde(default = "default_dwell")]
    pub dwell_ms: f64,
    #[serde(default = "default_saccade")]
    pub saccade_px: f64,
}

fn default_dwell() -> f64 {
    300.0
}

fn default_saccade() -> f64 {
    80.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GazeOutput {
    /// Pixel coordinates.
    #[default]
    Pixel,
    /// Unit-depth camera directions, to be projected with the intrinsics.
    Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    Png,
    Ppm,
}

impl ImageFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Ppm => "ppm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema_version: u32,
    pub duration_s: f64,
    pub frame_rate_hz: f64,
    pub frame_size: [u32; 2],
    pub rng_seed: u64,
    #[serde(default)]
    pub gaze_jitter_px: f64,
    #[serde(default = "default_focal")]
    pub focal_px: f64,
    #[serde(default)]
    pub gaze_output: GazeOutput,
    #[serde(default)]
    pub image_format: ImageFormat,
    #[serde(default)]
    pub background: Background,
    #[serde(default)]
    pub viewpoints: Viewpoints,
    pub objects: Vec<ObjectSpec>,
    pub script: Vec<ScriptEntry>,
}

fn default_focal() -> f64 {
    600.0
}

const TIME_EPS: f64 = 1e-9;

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        let spec: Self = toml::from_str(text).map_err(|e| invalid(e.to_string().trim().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.frame_rate_hz + TIME_EPS).floor() as usize
    }

    pub fn frame_timestamps(&self) -> Vec<Nanos> {
        (0..self.frame_count()).map(|k| (k as f64 * 1e9 / self.frame_rate_hz).round() as Nanos).collect()
    }

    pub fn viewpoint(&self, p: Participant) -> Viewpoint {
        match p {
            Participant::A => self.viewpoints.a,
            Participant::B => self.viewpoints.b,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let [w, h] = self.frame_size;
        CameraIntrinsics {
            fx: self.focal_px,
            fy: self.focal_px,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
        }
    }

    /// Script entry governing participant `p` at time `t_s`.
    pub fn entry_at(&self, p: Participant, t_s: f64) -> Option<(usize, &ScriptEntry)> {
        let last = self.script.iter().filter(|e| e.participant.includes(p)).map(|e| e.end_s).fold(f64::MIN, f64::max);
        self.script.iter().enumerate().find(|(_, e)| {
            e.participant.includes(p) && t_s >= e.start_s && (t_s < e.end_s || (e.end_s == last && t_s <= last))
        })
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(invalid("duration_s must be positive"));
        }
        if !(self.frame_rate_hz > 0.0) || !self.frame_rate_hz.is_finite() {
            return Err(invalid("frame_rate_hz must be positive"));
        }
        if self.frame_count() < 2 {
            return Err(invalid("scenario must contain at least 2 frames"));
        }
        let [w, h] = self.frame_size;
        if w < 16 || h < 16 {
            return Err(invalid("frame_size must be at least 16x16"));
        }
        if !(self.gaze_jitter_px >= 0.0) {
            return Err(invalid("gaze_jitter_px must be >= 0"));
        }
        if !(self.focal_px > 0.0) {
            return Err(invalid("focal_px must be positive"));
        }
        for (name, v) in [("a", self.viewpoints.a), ("b", self.viewpoints.b)] {
            if !(v.scale > 0.0) || !v.offset.iter().all(|x| x.is_finite()) {
                return Err(invalid(format!("viewpoints.{name}: scale must be positive and offset finite")));
            }
        }
        self.validate_texture("background", &self.background.texture)?;

        let mut names = HashSet::new();
        for obj in &self.objects {
            let what = format!("object `{}`", obj.name);
            if !names.insert(obj.name.as_str()) {
                return Err(invalid(format!("{what} is defined twice")));
            }
            if !(obj.size[0] > 0.0 && obj.size[1] > 0.0) {
                return Err(invalid(format!("{what}: size must be positive")));
            }
            self.validate_texture(&what, &obj.texture)?;
            if obj.waypoints.is_empty() {
                return Err(invalid(format!("{what}: needs at least one waypoint")));
            }
            if obj.waypoints.windows(2).any(|p| p[1][0] <= p[0][0]) {
                return Err(invalid(format!("{what}: waypoint times must strictly increase")));
            }
            let (hw, hh) = match obj.shape {
                Shape::Rect => (obj.size[0] / 2.0, obj.size[1] / 2.0),
                Shape::Disc => (obj.size[0] / 2.0, obj.size[0] / 2.0),
            };
            for &[t, x, y] in &obj.waypoints {
                if x - hw < 0.0 || y - hh < 0.0 || x + hw > w as f64 || y + hh > h as f64 {
                    return Err(invalid(format!("{what}: leaves the {w}x{h} frame at t = {t} s")));
                }
            }
        }

        for (i, e) in self.script.iter().enumerate() {
            let what = format!("script entry {}", i + 1);
            if !(e.start_s < e.end_s) {
                return Err(invalid(format!("{what}: start_s must be before end_s")));
            }
            match (&e.target, e.independent) {
                (Some(t), None) if !names.contains(t.as_str()) => {
                    return Err(invalid(format!("{what}: unknown target `{t}`")));
                }
                (Some(_), None) | (None, Some(_)) => {}
                _ => return Err(invalid(format!("{what}: give exactly one of `target` or `independent`"))),
            }
            if !(e.dwell_ms > 0.0) || !(e.saccade_px >= 0.0) {
                return Err(invalid(format!("{what}: dwell_ms must be positive and saccade_px >= 0")));
            }
        }
        for p in [Participant::A, Participant::B] {
            let mut spans: Vec<(f64, f64)> =
                self.script.iter().filter(|e| e.participant.includes(p)).map(|e| (e.start_s, e.end_s)).collect();
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut covered = 0.0;
            for (s, e) in spans {
                if (s - covered).abs() > TIME_EPS {
                    return Err(invalid(format!(
                        "script for participant {p} must cover [0, {}] without gaps or overlaps (problem at {s} s)",
                        self.duration_s
                    )));
                }
                covered = e;
            }
            if covered + TIME_EPS < self.duration_s {
                return Err(invalid(format!(
                    "script for participant {p} ends at {covered} s, before duration_s = {}",
                    self.duration_s
                )));
            }
        }
        Ok(())
    }

    fn validate_texture(&self, what: &str, texture: &Texture) -> Result<(), SynthError> {
        if let Texture::Noise { block, contrast, .. } = *texture {
            if block == 0 || !(0.0..=1.0).contains(&contrast) {
                return Err(invalid(format!("{what}: noise block must be >= 1 and contrast within [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Per-frame shared-attention labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub frames: Vec<(Nanos, bool)>,
}

impl GroundTruth {
    pub fn from_spec(spec: &ScenarioSpec) -> Self {
        let frames = spec
            .frame_timestamps()
            .into_iter()
            .map(|ts| {
                let t = ts as f64 / 1e9;
                let target = |p| spec.entry_at(p, t).and_then(|(_, e)| e.target.clone());
                let shared = matches!((target(Participant::A), target(Participant::B)), (Some(a), Some(b)) if a == b);
                (ts, shared)
            })
            .collect();
        Self { frames }
    }

    pub fn shared_fraction(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().filter(|f| f.1).count() as f64 / self.frames.len() as f64
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "timestamp_ns,shared_flag")?;
        for &(ts, shared) in &self.frames {
            writeln!(out, "{ts},{}", u8::from(shared))?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self, String> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = reader.headers().map_err(|e| e.to_string())?;
        if headers.iter().collect::<Vec<_>>() != ["timestamp_ns", "shared_flag"] {
            return Err("ground truth header must be `timestamp_ns,shared_flag`".into());
        }
        let mut frames = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| e.to_string())?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let ts = record.get(0).and_then(|s| s.parse().ok()).ok_or(format!("line {line}: bad timestamp"))?;
            let flag = match record.get(1) {
                Some("1") | Some("true") => true,
                Some("0") | Some("false") => false,
                _ => return Err(format!("line {line}: shared_flag must be 0 or 1")),
            };
            frames.push((ts, flag));
        }
        Ok(Self { frames })
    }
}

/// Both gaze streams, ground truth and lazily rendered frames of a scenario.
pub struct SynthSession {
    pub spec: ScenarioSpec,
    pub scene: Scene,
    pub gaze_a: Vec<GazeSample>,
    pub gaze_b: Vec<GazeSample>,
    pub truth: GroundTruth,
    timestamps: Vec<Nanos>,
}

impl SynthSession {
    pub fn new(spec: ScenarioSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let scene = Scene::new(&spec);
        let gaze_a = scene::generate_gaze(&spec, &scene, Participant::A);
        let gaze_b = scene::generate_gaze(&spec, &scene, Participant::B);
        let truth = GroundTruth::from_spec(&spec);
        let timestamps = spec.frame_timestamps();
        Ok(Self { spec, scene, gaze_a, gaze_b, truth, timestamps })
    }

    pub fn gaze(&self, p: Participant) -> &[GazeSample] {
        match p {
            Participant::A => &self.gaze_a,
            Participant::B => &self.gaze_b,
        }
    }

    pub fn frames(&self, participant: Participant) -> SceneFrames<'_> {
        SceneFrames { session: self, participant }
    }

    pub fn render(&self, participant: Participant, timestamp: Nanos) -> Frame {
        self.scene.render(&self.spec, participant, timestamp)
    }

    /// Gaze samples as written to disk, in the configured payload.
    fn exported_gaze(&self, p: Participant) -> Vec<GazeSample> {
        let samples = self.gaze(p);
        match self.spec.gaze_output {
            GazeOutput::Pixel => samples.to_vec(),
            GazeOutput::Direction => {
                let k = self.spec.intrinsics();
                samples
                    .iter()
                    .map(|s| {
                        let (px, py) = s.pixel_xy().expect("synthetic gaze is pixel");
                        GazeSample::direction(s.timestamp, p, (px - k.cx) / k.fx, (py - k.cy) / k.fy, 1.0)
                    })
                    .collect()
            }
        }
    }
}

/// Frame source rendering a participant's view on demand.
pub struct SceneFrames<'a> {
    session: &'a SynthSession,
    participant: Participant,
}

impl FrameSource for SceneFrames<'_> {
    fn timestamps(&self) -> &[Nanos] {
        &self.session.timestamps
    }

    fn load(&self, timestamp: Nanos) -> Result<Frame, TubeError> {
        if self.session.timestamps.binary_search(&timestamp).is_err() {
            return Err(TubeError::NoFramesFound(format!("{} @ {timestamp}", self.describe())));
        }
        Ok(self.session.render(self.participant, timestamp))
    }

    fn describe(&self) -> String {
        format!("synthetic view {}", self.participant)
    }
}

/// Files written by [`generate`], relative to the output directory.
pub const SESSION_FILE: &str = "session.toml";
pub const TRUTH_FILE: &str = "truth.csv";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const SCENARIO_FILE: &str = "scenario.toml";

pub fn frame_file_name(ts: Nanos, format: ImageFormat) -> String {
    format!("{ts:016}.{}", format.extension())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    std::fs::write(path, bytes).map_err(|source| SynthError::Io { path: path.into(), source })
}

/// Renders the scenario into `out_dir`:
///
/// ```text
/// frames_a/<ts>.png  frames_b/<ts>.png  gaze_a.csv  gaze_b.csv
/// intrinsics.txt  truth.csv  scenario.toml  session.toml
/// ```
///
/// `session.toml` is an analysis configuration for the generated files.
pub fn generate(spec: &ScenarioSpec, out_dir: &Path) -> Result<GroundTruth, SynthError> {
    let session = SynthSession::new(spec.clone())?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    for (p, dir) in [(Participant::A, "frames_a"), (Participant::B, "frames_b")] {
        let dir = out_dir.join(dir);
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        for &ts in &session.timestamps {
            let frame = session.render(p, ts);
            let bytes = match spec.image_format {
                ImageFormat::Png => frame.to_png()?,
                ImageFormat::Ppm => frame.to_ppm(),
            };
            write_file(&dir.join(frame_file_name(ts, spec.image_format)), &bytes)?;
        }
    }
    for (p, name) in [(Participant::A, "gaze_a.csv"), (Participant::B, "gaze_b.csv")] {
        let mut buf = Vec::new();
        write_gaze_csv(&mut buf, &session.exported_gaze(p))?;
        write_file(&out_dir.join(name), &buf)?;
    }
    write_file(&out_dir.join(INTRINSICS_FILE), spec.intrinsics().to_text().as_bytes())?;
    let mut truth = Vec::new();
    session.truth.write_csv(&mut truth).map_err(io(&out_dir.join(TRUTH_FILE)))?;
    write_file(&out_dir.join(TRUTH_FILE), &truth)?;
    write_file(&out_dir.join(SCENARIO_FILE), spec.to_toml().as_bytes())?;
    let session_cfg = format!(
        "session_id = \"synth-{seed}\"\n\
         frames_a = \"frames_a\"\nframes_b = \"frames_b\"\n\
         gaze_a = \"gaze_a.csv\"\ngaze_b = \"gaze_b.csv\"\n\
         intrinsics = \"{INTRINSICS_FILE}\"\n",
        seed = spec.rng_seed
    );
    write_file(&out_dir.join(SESSION_FILE), session_cfg.as_bytes())?;
    Ok(session.truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when there were no positive detections (precision reported as 0).
    pub precision_undefined: bool,
    /// Set when the truth has no shared frames (recall reported as 0).
    pub recall_undefined: bool,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    /// Truth frames with no detection; counted as negative detections.
    pub unpaired_truth: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("detection at {0} ns has no ground-truth frame")]
    SpanMismatch(Nanos),
}

/// Scores per-pair detections, keyed by participant A's timestamp, as a
/// binary classifier of the shared flag.
pub fn score_against_truth(detections: &[(Nanos, bool)], truth: &GroundTruth) -> Result<Score, ScoreError> {
    let truth_map: BTreeMap<Nanos, bool> = truth.frames.iter().copied().collect();
    let mut detected: BTreeMap<Nanos, bool> = BTreeMap::new();
    for &(ts, flag) in detections {
        if !truth_map.contains_key(&ts) || detected.insert(ts, flag).is_some() {
            return Err(ScoreError::SpanMismatch(ts));
        }
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (ts, &shared) in &truth_map {
        let flagged = detected.get(ts).copied().unwrap_or(false);
        match (flagged, shared) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Score {
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        unpaired_truth: truth_map.len() - detected.len(),
    })
}
