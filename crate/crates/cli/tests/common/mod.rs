#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub const JVA: &str = env!("CARGO_BIN_EXE_jva");

pub const SCENE: &str = r#"
schema_version = 1
duration_s = 2.0
frame_rate_hz = 15.0
frame_size = [320, 240]
rng_seed = 5
gaze_jitter_px = 1.0
focal_px = 300.0

[viewpoints.b]
offset = [5.0, -3.0]
scale = 1.03

[[objects]]
name = "red"
shape = "rect"
size = [130.0, 130.0]
color = [220, 40, 30]
texture = { noise = { seed = 4 } }
waypoints = [[0.0, 85.0, 120.0], [2.0, 95.0, 118.0]]

[[objects]]
name = "blue"
shape = "disc"
size = [130.0, 130.0]
color = [30, 60, 210]
texture = { noise = { seed = 77, block = 3 } }
waypoints = [[0.0, 235.0, 120.0]]

[[script]]
start_s = 0.0
end_s = 1.0
participant = "both"
target = "red"

[[script]]
start_s = 1.0
end_s = 2.0
participant = "A"
target = "red"

[[script]]
start_s = 1.0
end_s = 2.0
participant = "B"
target = "blue"
"#;

pub fn jva(args: &[&str]) -> Output {
    Command::new(JVA).args(args).output().expect("jva runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Renders `scene` into `<dir>/session` and returns that directory.
pub fn synth(dir: &Path, scene: &str) -> PathBuf {
    let spec = dir.join("scene.toml");
    std::fs::write(&spec, scene).unwrap();
    let out = dir.join("session");
    let o = jva(&["synth", "--spec", path_str(&spec), "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

/// The JSON error record a failed command writes to stderr.
pub fn error_record(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no JSON error in {text}"));
    serde_json::from_str::<Value>(line).unwrap()["error"].clone()
}
