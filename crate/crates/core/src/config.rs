//! Analysis run configuration.
//!
//! Read from TOML (or JSON when the file ends in `.json`). Relative paths
//! are resolved against the configuration file's directory. Example:
//!
//! ```toml
//! session_id = "kitchen-01"
//! activity_label = "Cooking together"
//! frames_a = "frames_a"
//! frames_b = "frames_b"
//! gaze_a = "gaze_a.csv"
//! gaze_b = "gaze_b.csv"
//! intrinsics = "intrinsics.txt"
//! annotations = "epochs.csv"
//! window = 400
//! threshold = 0.7
//! epochs = 4
//! backend = "builtin"
//! k_scope = "epoch"
//!
//! [detector]
//! min_fixation_ms = 60.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analytics::{KOptions, KPool, KScope, KStatsWindow, DEFAULT_EPOCHS, DEFAULT_THRESHOLD};
use crate::embed::ErrorPolicy;
use crate::gaze::Nanos;
use crate::oculomotor::DetectorParams;
use crate::tube::DEFAULT_WINDOW;

pub const MIN_WINDOW: u32 = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("`{field}`: path does not exist: {path}")]
    PathNotFound { field: &'static str, path: PathBuf },
    #[error("`{field}` out of range: {reason}")]
    OutOfRange { field: &'static str, reason: String },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Builtin,
    Import,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub session_id: String,
    pub activity_label: Option<String>,
    pub frames_a: Option<PathBuf>,
    pub frames_b: Option<PathBuf>,
    pub gaze_a: Option<PathBuf>,
    pub gaze_b: Option<PathBuf>,
    pub intrinsics: Option<PathBuf>,
    pub embeddings_a: Option<PathBuf>,
    pub embeddings_b: Option<PathBuf>,
    /// CSV `epoch,annotation`.
    pub annotations: Option<PathBuf>,
    pub window: u32,
    pub threshold: f64,
    pub epochs: usize,
    pub backend: BackendKind,
    /// Program and arguments of the external embedding model.
    pub external_command: Vec<String>,
    pub k_scope: KScope,
    pub k_stats: KStatsWindow,
    pub k_pool: KPool,
    pub detector: DetectorParams,
    /// Alignment and frame-matching tolerance; half the median gaze
    /// interval when unset.
    pub tolerance_ns: Option<Nanos>,
    /// Moving-average window over similarity scores, in pairs; 0 or 1
    /// disables smoothing.
    pub smoothing: usize,
    pub on_embed_error: ErrorPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            session_id: "session".to_string(),
            activity_label: None,
            frames_a: None,
            frames_b: None,
            gaze_a: None,
            gaze_b: None,
            intrinsics: None,
            embeddings_a: None,
            embeddings_b: None,
            annotations: None,
            window: DEFAULT_WINDOW,
            threshold: DEFAULT_THRESHOLD,
            epochs: DEFAULT_EPOCHS,
            backend: BackendKind::Builtin,
            external_command: Vec::new(),
            k_scope: KScope::default(),
            k_stats: KStatsWindow::default(),
            k_pool: KPool::default(),
            detector: DetectorParams::default(),
            tolerance_ns: None,
            smoothing: 0,
            on_embed_error: ErrorPolicy::Abort,
        }
    }
}

fn range(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange { field, reason: reason.into() }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let parse_err = |reason: String| ConfigError::Parse { path: path.to_path_buf(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| parse_err(e.to_string()))?;
        let mut config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| parse_err(e.to_string().trim().to_string()))?
        };
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    pub fn from_json_value(value: &Value) -> Result<Self, ConfigError> {
        Self::deserialize(value)
            .map_err(|e| ConfigError::Parse { path: PathBuf::from("config_echo"), reason: e.to_string() })
    }

    fn paths_mut(&mut self) -> [&mut Option<PathBuf>; 8] {
        [
            &mut self.frames_a,
            &mut self.frames_b,
            &mut self.gaze_a,
            &mut self.gaze_b,
            &mut self.intrinsics,
            &mut self.embeddings_a,
            &mut self.embeddings_b,
            &mut self.annotations,
        ]
    }

    /// Makes relative paths relative to `base`.
    pub fn rebase(&mut self, base: &Path) {
        for p in self.paths_mut().into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn k_options(&self) -> KOptions {
        KOptions { scope: self.k_scope, stats_window: self.k_stats, pool: self.k_pool }
    }

    /// Checks ranges and paths and returns the configuration with every
    /// path made absolute.
    pub fn validated(&self) -> Result<Self, ConfigError> {
        if !(self.threshold > -1.0 && self.threshold <= 1.0) {
            return Err(range("threshold", format!("{} is not in (-1, 1]", self.threshold)));
        }
        if self.window < MIN_WINDOW {
            return Err(range("window", format!("{} is below the minimum of {MIN_WINDOW}", self.window)));
        }
        if self.epochs < 1 {
            return Err(range("epochs", "must be at least 1"));
        }
        let d = &self.detector;
        if d.velocity_threshold.is_some_and(|v| !(v > 0.0)) {
            return Err(range("detector.velocity_threshold", "must be positive"));
        }
        if !(d.min_fixation_ms >= 0.0) || !(d.max_gap_ms > 0.0) {
            return Err(range("detector", "min_fixation_ms must be >= 0 and max_gap_ms > 0"));
        }
        if self.session_id.is_empty() {
            return Err(range("session_id", "must not be empty"));
        }

        let mut out = self.clone();
        let required: [(&'static str, &Option<PathBuf>); 4] = [
            ("frames_a", &self.frames_a),
            ("frames_b", &self.frames_b),
            ("gaze_a", &self.gaze_a),
            ("gaze_b", &self.gaze_b),
        ];
        for (field, value) in required {
            if value.is_none() {
                return Err(ConfigError::Missing(field));
            }
        }
        match self.backend {
            BackendKind::Import => {
                if self.embeddings_a.is_none() {
                    return Err(ConfigError::Missing("embeddings_a"));
                }
                if self.embeddings_b.is_none() {
                    return Err(ConfigError::Missing("embeddings_b"));
                }
            }
            BackendKind::External if self.external_command.is_empty() => {
                return Err(ConfigError::Missing("external_command"));
            }
            _ => {}
        }
        const NAMES: [&str; 8] =
            ["frames_a", "frames_b", "gaze_a", "gaze_b", "intrinsics", "embeddings_a", "embeddings_b", "annotations"];
        for (field, slot) in NAMES.into_iter().zip(out.paths_mut()) {
            if let Some(p) = slot {
                *p = std::fs::canonicalize(&*p).map_err(|_| ConfigError::PathNotFound { field, path: p.clone() })?;
            }
        }
        Ok(out)
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}
