//! End-to-end session analysis.

use std::collections::BTreeMap;
use std::fmt;

use log::info;
use thiserror::Error;

use crate::analytics::{
    apply_annotations, detect_jva, epoch_analysis, jva_percentage, parse_annotations, smooth_scores,
};
use crate::config::{BackendKind, RunConfig};
use crate::embed::{
    similarity_timeline, BuiltinBackend, EmbeddingBackend, EmbeddingTable, ExternalBackend, ImportBackend,
};
use crate::gaze::{
    align_streams, median_interval, parse_gaze_stream, project_gaze, CameraIntrinsics, GazeFormat, GazeSample,
};
use crate::oculomotor::{detect_events, AmplitudeUnit, EventStream, OculomotorError};
use crate::report::{Diagnostics, SessionReport, SkipCounts, TimelineRow};
use crate::tube::{build_tube, FrameDir, FrameSource, SkipReason, Tube};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    GazeIo,
    Tube,
    EmbedSim,
    Oculomotor,
    JvaAnalytics,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::GazeIo => "gaze-io",
            Self::Tube => "tube",
            Self::EmbedSim => "embed-sim",
            Self::Oculomotor => "oculomotor",
            Self::JvaAnalytics => "jva-analytics",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self { stage, message: message.to_string() }
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e)
}

/// Everything a run reads, already loaded.
pub struct SessionInputs<'a> {
    pub gaze_a: Vec<GazeSample>,
    pub gaze_b: Vec<GazeSample>,
    pub frames_a: Box<dyn FrameSource + 'a>,
    pub frames_b: Box<dyn FrameSource + 'a>,
    pub intrinsics: Option<CameraIntrinsics>,
    pub annotations: BTreeMap<usize, String>,
    pub tables: Option<(EmbeddingTable, EmbeddingTable)>,
}

fn read_gaze(path: &std::path::Path) -> Result<Vec<GazeSample>, PipelineError> {
    let file =
        std::fs::File::open(path).map_err(|e| PipelineError::new(Stage::GazeIo, format!("{}: {e}", path.display())))?;
    parse_gaze_stream(std::io::BufReader::new(file), GazeFormat::Csv)
        .map_err(|e| PipelineError::new(Stage::GazeIo, format!("{}: {e}", path.display())))
}

/// Reads the files named by a validated configuration.
pub fn load_inputs(config: &RunConfig) -> Result<SessionInputs<'static>, PipelineError> {
    let need = |p: &Option<std::path::PathBuf>, name: &str| {
        p.clone().ok_or_else(|| PipelineError::new(Stage::Config, format!("missing required setting `{name}`")))
    };
    let gaze_a = read_gaze(&need(&config.gaze_a, "gaze_a")?)?;
    let gaze_b = read_gaze(&need(&config.gaze_b, "gaze_b")?)?;
    let intrinsics = match &config.intrinsics {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| PipelineError::new(Stage::GazeIo, format!("{}: {e}", p.display())))?;
            Some(
                CameraIntrinsics::parse(&text)
                    .map_err(|e| PipelineError::new(Stage::GazeIo, format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let frames_a = FrameDir::open(&need(&config.frames_a, "frames_a")?).map_err(at(Stage::Tube))?;
    let frames_b = FrameDir::open(&need(&config.frames_b, "frames_b")?).map_err(at(Stage::Tube))?;
    let annotations = match &config.annotations {
        Some(p) => {
            let file = std::fs::File::open(p)
                .map_err(|e| PipelineError::new(Stage::JvaAnalytics, format!("{}: {e}", p.display())))?;
            parse_annotations(file)
                .map_err(|e| PipelineError::new(Stage::JvaAnalytics, format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    let tables = match (config.backend, &config.embeddings_a, &config.embeddings_b) {
        (BackendKind::Import, Some(a), Some(b)) => Some((
            EmbeddingTable::load(a).map_err(at(Stage::EmbedSim))?,
            EmbeddingTable::load(b).map_err(at(Stage::EmbedSim))?,
        )),
        _ => None,
    };
    Ok(SessionInputs {
        gaze_a,
        gaze_b,
        frames_a: Box::new(frames_a),
        frames_b: Box::new(frames_b),
        intrinsics,
        annotations,
        tables,
    })
}

fn count_skips(tubes: [&Tube; 2]) -> SkipCounts {
    let mut c = SkipCounts::default();
    for d in tubes.iter().flat_map(|t| &t.skips) {
        match d.reason {
            SkipReason::Missing => c.missing += 1,
            SkipReason::OutOfFrame => c.out_of_frame += 1,
            SkipReason::Unprojected => c.unprojected += 1,
            SkipReason::NoMatchingFrame => c.no_matching_frame += 1,
        }
    }
    c
}

fn events_or_note(
    gaze: &[GazeSample],
    config: &RunConfig,
    intrinsics: Option<&CameraIntrinsics>,
    label: &str,
    notes: &mut Vec<String>,
) -> Result<EventStream, PipelineError> {
    match detect_events(gaze, &config.detector, intrinsics) {
        Ok(events) => Ok(events),
        Err(OculomotorError::InsufficientSamples(n)) => {
            notes.push(format!("participant {label}: no oculomotor events ({n} valid pixel samples)"));
            let unit = if intrinsics.is_some() { AmplitudeUnit::Degrees } else { AmplitudeUnit::Pixels };
            Ok(EventStream { fixations: vec![], saccades: vec![], unit })
        }
        Err(e) => Err(PipelineError::new(Stage::Oculomotor, format!("participant {label}: {e}"))),
    }
}

/// Runs every stage on loaded inputs. `config` should already be
/// validated; its echo in the report has the tolerance and detector
/// threshold filled in.
pub fn analyze(config: &RunConfig, inputs: SessionInputs<'_>) -> Result<SessionReport, PipelineError> {
    let intrinsics = inputs.intrinsics.as_ref();
    let project = |samples: &[GazeSample]| -> Vec<GazeSample> {
        match intrinsics {
            Some(k) => samples.iter().map(|s| project_gaze(s, k)).collect(),
            None => samples.to_vec(),
        }
    };
    let gaze_a = project(&inputs.gaze_a);
    let gaze_b = project(&inputs.gaze_b);

    let tolerance = config
        .tolerance_ns
        .or_else(|| median_interval(&gaze_a).or_else(|| median_interval(&gaze_b)).map(|m| m / 2))
        .unwrap_or(0);

    let tube_a = build_tube(inputs.frames_a.as_ref(), &gaze_a, config.window, tolerance).map_err(at(Stage::Tube))?;
    let tube_b = build_tube(inputs.frames_b.as_ref(), &gaze_b, config.window, tolerance).map_err(at(Stage::Tube))?;
    info!("tubes: {} slices for A, {} for B", tube_a.slices.len(), tube_b.slices.len());

    let sliced = |gaze: &[GazeSample], tube: &Tube| -> Vec<GazeSample> {
        gaze.iter().filter(|g| tube.get(g.timestamp).is_some()).copied().collect()
    };
    let pairs = align_streams(&sliced(&gaze_a, &tube_a), &sliced(&gaze_b, &tube_b), tolerance);
    info!("aligned {} pairs at tolerance {tolerance} ns", pairs.len());

    let backend: Box<dyn EmbeddingBackend> = match config.backend {
        BackendKind::Builtin => Box::new(BuiltinBackend),
        BackendKind::Import => {
            let (table_a, table_b) = inputs
                .tables
                .ok_or_else(|| PipelineError::new(Stage::EmbedSim, "import backend needs embedding tables"))?;
            Box::new(ImportBackend { table_a, table_b })
        }
        BackendKind::External => Box::new(ExternalBackend::new(&config.external_command).map_err(at(Stage::EmbedSim))?),
    };
    let timeline = similarity_timeline(&tube_a.slices, &tube_b.slices, &pairs, backend.as_ref(), config.on_embed_error)
        .map_err(at(Stage::EmbedSim))?;
    let timeline = smooth_scores(&timeline, config.smoothing);
    let segments = detect_jva(&timeline, config.threshold);
    let total_pairs = timeline.pair_count();

    let mut notes = Vec::new();
    let events_a = events_or_note(&gaze_a, config, intrinsics, "A", &mut notes)?;
    let events_b = events_or_note(&gaze_b, config, intrinsics, "B", &mut notes)?;

    let all_ts = inputs.gaze_a.iter().chain(&inputs.gaze_b).map(|g| g.timestamp);
    let span = match (all_ts.clone().min(), all_ts.max()) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => (0, 0),
    };
    let mut epochs = epoch_analysis(span, config.epochs, &events_a, &events_b, config.k_options(), &segments)
        .map_err(at(Stage::Oculomotor))?;
    apply_annotations(&mut epochs, &inputs.annotations);

    let slices = tube_a.slices.len() + tube_b.slices.len();
    let diagnostics = Diagnostics {
        gaze_samples_a: inputs.gaze_a.len(),
        gaze_samples_b: inputs.gaze_b.len(),
        skipped_frames: tube_a.skips.len() + tube_b.skips.len(),
        skip_reasons: count_skips([&tube_a, &tube_b]),
        unmatched_frames: slices - 2 * pairs.len(),
        skipped_pairs: timeline.skipped.len(),
        notes,
    };

    let mut echo = config.clone();
    echo.tolerance_ns = Some(tolerance);
    echo.detector = config.detector.resolved(events_a.unit);

    Ok(SessionReport {
        session_id: config.session_id.clone(),
        activity_label: config.activity_label.clone(),
        total_pairs,
        jva_pairs: segments.jva_pairs(),
        jva_percentage: jva_percentage(&segments, total_pairs),
        threshold: config.threshold,
        segments: segments.segments.clone(),
        epochs,
        diagnostics,
        config_echo: echo.to_json_value(),
        backend_id: timeline.backend_id.clone(),
        amplitude_unit: Some(events_a.unit.as_str().to_string()),
        timeline: timeline
            .entries
            .iter()
            .zip(&segments.flags)
            .map(|(e, &jva)| TimelineRow { ts_a: e.ts_a, ts_b: e.ts_b, score: e.score, jva })
            .collect(),
    })
}

/// Validates `config`, loads its files and analyzes the session.
pub fn run(config: &RunConfig) -> Result<SessionReport, PipelineError> {
    let config = config.validated().map_err(at(Stage::Config))?;
    let inputs = load_inputs(&config)?;
    analyze(&config, inputs)
}
