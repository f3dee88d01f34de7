//! `jva`: joint visual attention analysis from the command line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use jva_core::config::{ConfigError, RunConfig};
use jva_core::embed::external::{serve_builtin, WINDOW_ENV};
use jva_core::gaze::{parse_gaze_stream, project_gaze, CameraIntrinsics, GazeFormat, GazeSample, Participant};
use jva_core::oculomotor::{
    coefficient_k, detect_events, mean_k, write_events_csv, write_k_trace_csv, DetectorParams, OculomotorError,
};
use jva_core::report::{config_echo_from_json, detections_from_json, ReportFormat};
use jva_core::synth::{generate, score_against_truth, GroundTruth, ScenarioSpec, SESSION_FILE};
use jva_core::PipelineError;

#[derive(Parser)]
#[command(name = "jva", version, about = "Joint visual attention analysis for dyadic egocentric recordings")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on one session and write its report.
    Analyze(Box<AnalyzeArgs>),
    /// Render a synthetic session from a scenario file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixations, saccades and coefficient K from a gaze file alone.
    Metrics(MetricsArgs),
    /// Compare a report's per-pair detections with synthetic ground truth.
    Score {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Serve the built-in descriptor over the external-model protocol.
    #[command(hide = true)]
    EmbedStdio {
        #[arg(long)]
        window: Option<u32>,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Configuration file (TOML, or JSON with a .json extension).
    #[arg(long, conflicts_with_all = ["session", "replay"])]
    config: Option<PathBuf>,
    /// Session directory containing session.toml, as written by `synth`.
    #[arg(long, conflicts_with = "replay")]
    session: Option<PathBuf>,
    /// Re-run with the configuration echoed in an earlier JSON report.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,

    #[arg(long)]
    session_id: Option<String>,
    #[arg(long)]
    activity_label: Option<String>,
    #[arg(long)]
    frames_a: Option<PathBuf>,
    #[arg(long)]
    frames_b: Option<PathBuf>,
    #[arg(long)]
    gaze_a: Option<PathBuf>,
    #[arg(long)]
    gaze_b: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    #[arg(long)]
    embeddings_a: Option<PathBuf>,
    #[arg(long)]
    embeddings_b: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// ROI side in pixels.
    #[arg(long)]
    roi: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_parser = ["builtin", "import", "external"])]
    backend: Option<String>,
    /// External model command line, split on whitespace.
    #[arg(long)]
    external_command: Option<String>,
    #[arg(long, value_parser = ["jva", "epoch"])]
    k_scope: Option<String>,
    #[arg(long, value_parser = ["epoch", "session"])]
    k_stats: Option<String>,
    #[arg(long, value_parser = ["participant", "dyad"])]
    k_pool: Option<String>,
    #[arg(long)]
    velocity_threshold: Option<f64>,
    #[arg(long)]
    min_fixation_ms: Option<f64>,
    #[arg(long)]
    max_gap_ms: Option<f64>,
    #[arg(long)]
    tolerance_ns: Option<u64>,
    /// Moving-average window over similarity scores, in pairs.
    #[arg(long)]
    smoothing: Option<usize>,
    #[arg(long, value_parser = ["abort", "skip"])]
    on_embed_error: Option<String>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    gaze: PathBuf,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Participant to analyze when the file holds both.
    #[arg(long)]
    participant: Option<String>,
    #[arg(long)]
    velocity_threshold: Option<f64>,
    #[arg(long, default_value_t = 60.0)]
    min_fixation_ms: f64,
    #[arg(long, default_value_t = 75.0)]
    max_gap_ms: f64,
    /// Directory for events.csv and k_trace.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// A failure reported as one JSON line on stderr.
#[derive(Debug)]
struct Failure {
    stage: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn new(stage: &'static str, message: impl std::fmt::Display) -> Self {
        Self { stage, message: message.to_string(), code: 1 }
    }

    fn config(message: impl std::fmt::Display) -> Self {
        Self { stage: "config", message: message.to_string(), code: 2 }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::config(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = if e.stage == jva_core::Stage::Config { 2 } else { 1 };
        Self { stage: e.stage.as_str(), message: e.message, code }
    }
}

fn io_failure<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> Failure + 'a {
    move |e| Failure::new(stage, format!("{}: {e}", path.display()))
}

fn parse_enum<T: DeserializeOwned>(field: &str, value: &str) -> Result<T, Failure> {
    serde_json::from_value(Value::String(value.to_string()))
        .map_err(|_| Failure::config(format!("`{field}`: unknown value `{value}`")))
}

/// Writes through a temporary sibling so a partial file never appears
/// under the final name.
fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(io_failure("report", &tmp))?;
    std::fs::rename(&tmp, path).map_err(io_failure("report", path))
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), Failure> {
    match out {
        Some(path) => write_atomically(path, bytes),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(|e| Failure::new("report", e))
        }
    }
}

fn base_config(args: &AnalyzeArgs) -> Result<RunConfig, Failure> {
    if let Some(path) = &args.config {
        return Ok(RunConfig::load(path)?);
    }
    if let Some(dir) = &args.session {
        return Ok(RunConfig::load(&dir.join(SESSION_FILE))?);
    }
    if let Some(path) = &args.replay {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let report: Value =
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let echo = config_echo_from_json(&report).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        return Ok(RunConfig::from_json_value(echo)?);
    }
    Ok(RunConfig::default())
}

fn apply_overrides(config: &mut RunConfig, a: &AnalyzeArgs) -> Result<(), Failure> {
    let set_path = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    if let Some(v) = &a.session_id {
        config.session_id.clone_from(v);
    }
    if a.activity_label.is_some() {
        config.activity_label.clone_from(&a.activity_label);
    }
    set_path(&mut config.frames_a, &a.frames_a);
    set_path(&mut config.frames_b, &a.frames_b);
    set_path(&mut config.gaze_a, &a.gaze_a);
    set_path(&mut config.gaze_b, &a.gaze_b);
    set_path(&mut config.intrinsics, &a.intrinsics);
    set_path(&mut config.embeddings_a, &a.embeddings_a);
    set_path(&mut config.embeddings_b, &a.embeddings_b);
    set_path(&mut config.annotations, &a.annotations);
    if let Some(v) = a.roi {
        config.window = v;
    }
    if let Some(v) = a.threshold {
        config.threshold = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = &a.backend {
        config.backend = parse_enum("backend", v)?;
    }
    if let Some(v) = &a.external_command {
        config.external_command = v.split_whitespace().map(str::to_string).collect();
    }
    if let Some(v) = &a.k_scope {
        config.k_scope = parse_enum("k_scope", v)?;
    }
    if let Some(v) = &a.k_stats {
        config.k_stats = parse_enum("k_stats", v)?;
    }
    if let Some(v) = &a.k_pool {
        config.k_pool = parse_enum("k_pool", v)?;
    }
    if a.velocity_threshold.is_some() {
        config.detector.velocity_threshold = a.velocity_threshold;
    }
    if let Some(v) = a.min_fixation_ms {
        config.detector.min_fixation_ms = v;
    }
    if let Some(v) = a.max_gap_ms {
        config.detector.max_gap_ms = v;
    }
    if a.tolerance_ns.is_some() {
        config.tolerance_ns = a.tolerance_ns;
    }
    if let Some(v) = a.smoothing {
        config.smoothing = v;
    }
    if let Some(v) = &a.on_embed_error {
        config.on_embed_error = parse_enum("on_embed_error", v)?;
    }
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let format: ReportFormat = args.format.parse().map_err(Failure::config)?;
    let mut config = base_config(args)?;
    apply_overrides(&mut config, args)?;
    let report = jva_core::run(&config)?;
    log::info!(
        "{}: {} of {} pairs above {} ({:.2}%)",
        report.session_id,
        report.jva_pairs,
        report.total_pairs,
        report.threshold,
        report.jva_percentage
    );
    let text = report.render(format).map_err(|e| Failure::new("report", e))?;
    emit(args.out.as_deref(), text.as_bytes())
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<(), Failure> {
    let spec = ScenarioSpec::load(spec).map_err(|e| Failure::new("synth", e))?;
    std::fs::create_dir_all(out).map_err(io_failure("synth", out))?;
    let truth = generate(&spec, out).map_err(|e| Failure::new("synth", e))?;
    let summary = json!({
        "out": out.display().to_string(),
        "frames_per_participant": truth.frames.len(),
        "shared_fraction": truth.shared_fraction(),
    });
    emit(None, format!("{summary}\n").as_bytes())
}

fn select_participant(samples: Vec<GazeSample>, wanted: Option<&str>) -> Result<Vec<GazeSample>, Failure> {
    let wanted: Option<Participant> = wanted.map(|p| p.parse().map_err(Failure::config)).transpose()?;
    let present: std::collections::BTreeSet<Participant> = samples.iter().map(|s| s.participant).collect();
    let p = match (wanted, present.len()) {
        (Some(p), _) => p,
        (None, 0 | 1) => return Ok(samples),
        (None, _) => return Err(Failure::config("gaze file holds both participants; pick one with --participant")),
    };
    Ok(samples.into_iter().filter(|s| s.participant == p).collect())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<(), Failure> {
    let file = std::fs::File::open(&a.gaze).map_err(io_failure("gaze-io", &a.gaze))?;
    let samples = parse_gaze_stream(std::io::BufReader::new(file), GazeFormat::Csv)
        .map_err(|e| Failure::new("gaze-io", format!("{}: {e}", a.gaze.display())))?;
    let samples = select_participant(samples, a.participant.as_deref())?;
    let intrinsics = match &a.intrinsics {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_failure("gaze-io", p))?;
            Some(CameraIntrinsics::parse(&text).map_err(|e| Failure::new("gaze-io", format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let samples: Vec<GazeSample> = match &intrinsics {
        Some(k) => samples.iter().map(|s| project_gaze(s, k)).collect(),
        None => samples,
    };
    let params = DetectorParams {
        velocity_threshold: a.velocity_threshold,
        min_fixation_ms: a.min_fixation_ms,
        max_gap_ms: a.max_gap_ms,
    };
    let events = detect_events(&samples, &params, intrinsics.as_ref()).map_err(|e| Failure::new("oculomotor", e))?;

    let mut notes = Vec::new();
    let series = match coefficient_k(&events.fixations, &events.saccades) {
        Ok(s) => Some(s),
        Err(e @ OculomotorError::TooFewEvents(_)) => {
            log::warn!("{e}");
            notes.push(e.to_string());
            None
        }
        Err(e) => return Err(Failure::new("oculomotor", e)),
    };

    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(io_failure("oculomotor", dir))?;
        let mut buf = Vec::new();
        write_events_csv(&mut buf, &events).map_err(|e| Failure::new("oculomotor", e))?;
        write_atomically(&dir.join("events.csv"), &buf)?;
        let mut buf = Vec::new();
        let samples = series.as_ref().map(|s| s.samples.as_slice()).unwrap_or_default();
        write_k_trace_csv(&mut buf, samples).map_err(|e| Failure::new("oculomotor", e))?;
        write_atomically(&dir.join("k_trace.csv"), &buf)?;
    }

    let k: Vec<f64> = series.as_ref().map(|s| s.values()).unwrap_or_default();
    let summary = json!({
        "fixations": events.fixations.len(),
        "saccades": events.saccades.len(),
        "unit": events.unit.as_str(),
        "k": k,
        "mean_k": series.as_ref().and_then(|s| mean_k(s).ok()),
        "notes": notes,
    });
    emit(None, format!("{summary}\n").as_bytes())
}

fn cmd_score(report: &Path, truth: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(report).map_err(io_failure("score", report))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::new("score", format!("{}: {e}", report.display())))?;
    let detections =
        detections_from_json(&value).map_err(|e| Failure::new("score", format!("{}: {e}", report.display())))?;
    let file = std::fs::File::open(truth).map_err(io_failure("score", truth))?;
    let truth = GroundTruth::read_csv(file).map_err(|e| Failure::new("score", format!("{}: {e}", truth.display())))?;
    let score = score_against_truth(&detections, &truth).map_err(|e| Failure::new("score", e))?;
    let text = serde_json::to_string(&score).expect("score serializes");
    emit(None, format!("{text}\n").as_bytes())
}

fn cmd_embed_stdio(window: Option<u32>) -> Result<(), Failure> {
    let window = match window {
        Some(w) => w,
        None => std::env::var(WINDOW_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Failure::config(format!("window size missing: pass --window or set {WINDOW_ENV}")))?,
    };
    serve_builtin(std::io::stdin().lock(), std::io::stdout().lock(), window)
        .map_err(|e| Failure::new("embed-sim", e))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (name, result) = match &cli.command {
        Command::Analyze(a) => ("analyze", cmd_analyze(a)),
        Command::Synth { spec, out } => ("synth", cmd_synth(spec, out)),
        Command::Metrics(a) => ("metrics", cmd_metrics(a)),
        Command::Score { report, truth } => ("score", cmd_score(report, truth)),
        Command::EmbedStdio { window } => ("embed-stdio", cmd_embed_stdio(*window)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let record = json!({"error": {"command": name, "stage": f.stage, "message": f.message}});
            eprintln!("{record}");
            ExitCode::from(f.code)
        }
    }
}
