//! Session report and its canonical JSON and CSV renderings.
//!
//! JSON top-level keys, in order: `session_id`, `activity_label`,
//! `total_pairs`, `jva_pairs`, `jva_percentage`, `threshold`, `segments`,
//! `epochs`, `diagnostics`, `config_echo`, `backend_id`, `amplitude_unit`,
//! `timeline`. Reals are written with 6 significant digits except inside
//! `config_echo`, which keeps exact values so a run can be replayed. Output
//! uses LF line endings and is byte-identical for identical reports.

use std::fmt::Write as _;
use std::io::Write;

use serde_json::Value;
use thiserror::Error;

use crate::analytics::{EpochReport, Segment};
use crate::gaze::Nanos;
use crate::oculomotor::KSample;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkipCounts {
    pub missing: usize,
    pub out_of_frame: usize,
    pub unprojected: usize,
    pub no_matching_frame: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub gaze_samples_a: usize,
    pub gaze_samples_b: usize,
    /// Gaze samples of either participant that produced no tube slice.
    pub skipped_frames: usize,
    pub skip_reasons: SkipCounts,
    /// Tube slices left without a partner after alignment.
    pub unmatched_frames: usize,
    /// Aligned pairs dropped by the embedding error policy.
    pub skipped_pairs: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineRow {
    pub ts_a: Nanos,
    pub ts_b: Nanos,
    pub score: f64,
    pub jva: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub session_id: String,
    pub activity_label: Option<String>,
    pub total_pairs: usize,
    pub jva_pairs: usize,
    pub jva_percentage: f64,
    pub threshold: f64,
    pub segments: Vec<Segment>,
    pub epochs: Vec<EpochReport>,
    pub diagnostics: Diagnostics,
    pub config_echo: Value,
    pub backend_id: String,
    pub amplitude_unit: Option<String>,
    pub timeline: Vec<TimelineRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format `{other}` (json|csv)")),
        }
    }
}

/// Renders `x` with 6 significant digits, in fixed notation when the
/// magnitude is within [1e-5, 1e6) and scientific otherwise.
pub fn fmt_real(x: f64) -> String {
    if !x.is_finite() {
        return "null".to_string();
    }
    if x == 0.0 {
        return "0.00000".to_string();
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if !(-5..6).contains(&exp) {
        return sci;
    }
    let decimals = (5 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_else(|| "null".to_string())
}

fn fmt_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn fmt_opt_str(s: Option<&str>) -> String {
    s.map(fmt_str).unwrap_or_else(|| "null".to_string())
}

fn fmt_trace(trace: &[KSample]) -> String {
    let items: Vec<String> = trace.iter().map(|s| format!("[{}, {}]", s.timestamp, fmt_real(s.k))).collect();
    format!("[{}]", items.join(", "))
}

/// Writes `items` as a JSON array, one element per line.
fn push_array(out: &mut String, indent: &str, items: &[String]) {
    if items.is_empty() {
        out.push_str("[]");
        return;
    }
    out.push_str("[\n");
    for (i, item) in items.iter().enumerate() {
        let sep = if i + 1 < items.len() { "," } else { "" };
        let _ = writeln!(out, "{indent}  {item}{sep}");
    }
    out.push_str(indent);
    out.push(']');
}

fn epoch_json(e: &EpochReport) -> String {
    let fields = [
        ("epoch", e.index.to_string()),
        ("start_ns", e.span.start.to_string()),
        ("end_ns", e.span.end.to_string()),
        ("annotation", fmt_opt_str(e.annotation.as_deref())),
        ("fixations_a", e.fixations_a.to_string()),
        ("fixations_b", e.fixations_b.to_string()),
        ("mean_k_a", fmt_opt(e.mean_k_a)),
        ("mean_k_b", fmt_opt(e.mean_k_b)),
        ("convergence", fmt_opt(e.convergence)),
        ("k_trace_a", fmt_trace(&e.k_trace_a)),
        ("k_trace_b", fmt_trace(&e.k_trace_b)),
    ];
    let body: Vec<String> = fields.iter().map(|(k, v)| format!("      \"{k}\": {v}")).collect();
    format!("{{\n{}\n    }}", body.join(",\n"))
}

fn diagnostics_json(d: &Diagnostics) -> String {
    let r = &d.skip_reasons;
    let notes: Vec<String> = d.notes.iter().map(|n| fmt_str(n)).collect();
    format!(
        "{{\n    \"skipped_frames\": {},\n    \"unmatched_frames\": {},\n    \"skipped_pairs\": {},\n    \
         \"gaze_samples_a\": {},\n    \"gaze_samples_b\": {},\n    \
         \"skip_reasons\": {{\"missing\": {}, \"out_of_frame\": {}, \"unprojected\": {}, \"no_matching_frame\": {}}},\n    \
         \"notes\": [{}]\n  }}",
        d.skipped_frames,
        d.unmatched_frames,
        d.skipped_pairs,
        d.gaze_samples_a,
        d.gaze_samples_b,
        r.missing,
        r.out_of_frame,
        r.unprojected,
        r.no_matching_frame,
        notes.join(", ")
    )
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  \"session_id\": {},", fmt_str(&self.session_id));
        let _ = writeln!(out, "  \"activity_label\": {},", fmt_opt_str(self.activity_label.as_deref()));
        let _ = writeln!(out, "  \"total_pairs\": {},", self.total_pairs);
        let _ = writeln!(out, "  \"jva_pairs\": {},", self.jva_pairs);
        let _ = writeln!(out, "  \"jva_percentage\": {},", fmt_real(self.jva_percentage));
        let _ = writeln!(out, "  \"threshold\": {},", fmt_real(self.threshold));

        out.push_str("  \"segments\": ");
        let segments: Vec<String> = self
            .segments
            .iter()
            .map(|s| {
                format!("{{\"start_ns\": {}, \"end_ns\": {}, \"pair_count\": {}}}", s.start_ts, s.end_ts, s.pair_count)
            })
            .collect();
        push_array(&mut out, "  ", &segments);
        out.push_str(",\n");

        out.push_str("  \"epochs\": ");
        let epochs: Vec<String> = self.epochs.iter().map(epoch_json).collect();
        push_array(&mut out, "  ", &epochs);
        out.push_str(",\n");

        let _ = writeln!(out, "  \"diagnostics\": {},", diagnostics_json(&self.diagnostics));

        let echo = serde_json::to_string_pretty(&self.config_echo).expect("values always serialize");
        let _ = writeln!(out, "  \"config_echo\": {},", echo.replace('\n', "\n  "));
        let _ = writeln!(out, "  \"backend_id\": {},", fmt_str(&self.backend_id));
        let _ = writeln!(out, "  \"amplitude_unit\": {},", fmt_opt_str(self.amplitude_unit.as_deref()));

        out.push_str("  \"timeline\": ");
        let rows: Vec<String> = self
            .timeline
            .iter()
            .map(|r| format!("[{}, {}, {}, {}]", r.ts_a, r.ts_b, fmt_real(r.score), r.jva))
            .collect();
        push_array(&mut out, "  ", &rows);
        out.push_str("\n}\n");
        out
    }

    /// One summary row followed by one row per epoch.
    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record([
            "row",
            "session_id",
            "activity_label",
            "epoch",
            "start_ns",
            "end_ns",
            "total_pairs",
            "jva_pairs",
            "jva_percentage",
            "threshold",
            "fixations_a",
            "fixations_b",
            "mean_k_a",
            "mean_k_b",
            "convergence",
            "annotation",
        ])?;
        let blank = String::new;
        let opt = |x: Option<f64>| x.map(fmt_real).unwrap_or_default();
        w.write_record([
            "summary".to_string(),
            self.session_id.clone(),
            self.activity_label.clone().unwrap_or_default(),
            blank(),
            blank(),
            blank(),
            self.total_pairs.to_string(),
            self.jva_pairs.to_string(),
            fmt_real(self.jva_percentage),
            fmt_real(self.threshold),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
            blank(),
        ])?;
        for e in &self.epochs {
            w.write_record([
                "epoch".to_string(),
                self.session_id.clone(),
                self.activity_label.clone().unwrap_or_default(),
                e.index.to_string(),
                e.span.start.to_string(),
                e.span.end.to_string(),
                blank(),
                blank(),
                blank(),
                blank(),
                e.fixations_a.to_string(),
                e.fixations_b.to_string(),
                opt(e.mean_k_a),
                opt(e.mean_k_b),
                opt(e.convergence),
                e.annotation.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String, ReportError> {
        match format {
            ReportFormat::Json => Ok(self.to_json()),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    pub fn emit<W: Write>(&self, format: ReportFormat, mut out: W) -> Result<(), ReportError> {
        out.write_all(self.render(format)?.as_bytes())?;
        out.flush()?;
        Ok(())
    }
}

/// Per-pair detections `(ts_a, flagged)` read back from a JSON report.
pub fn detections_from_json(report: &Value) -> Result<Vec<(Nanos, bool)>, ReportError> {
    let rows = report
        .get("timeline")
        .and_then(Value::as_array)
        .ok_or_else(|| ReportError::Malformed("missing `timeline` array".into()))?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let bad = || ReportError::Malformed(format!("timeline row {i}"));
            let row = row.as_array().ok_or_else(bad)?;
            let ts = row.first().and_then(Value::as_u64).ok_or_else(bad)?;
            let flag = row.get(3).and_then(Value::as_bool).ok_or_else(bad)?;
            Ok((ts, flag))
        })
        .collect()
}

/// The `config_echo` object of a JSON report.
pub fn config_echo_from_json(report: &Value) -> Result<&Value, ReportError> {
    report
        .get("config_echo")
        .filter(|v| v.is_object())
        .ok_or_else(|| ReportError::Malformed("missing `config_echo` object".into()))
}
