//! Thresholded JVA moments, JVA percentage and the per-epoch K analysis.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::embed::{SimilarityEntry, SimilarityTimeline};
use crate::gaze::Nanos;
use crate::oculomotor::{pooled_stats, EventStream, EventWindow, FixationEvent, KSample, OculomotorError, WindowStats};

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_EPOCHS: usize = 4;

/// A maximal run of consecutive pairs above threshold. Timestamps are
/// participant A's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start_ts: Nanos,
    pub end_ts: Nanos,
    pub first_pair: usize,
    pub pair_count: usize,
}

impl Segment {
    pub fn overlaps(&self, start: Nanos, end: Nanos) -> bool {
        start <= self.end_ts && end >= self.start_ts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JvaSegments {
    /// One flag per timeline entry.
    pub flags: Vec<bool>,
    pub segments: Vec<Segment>,
    pub threshold: f64,
}

impl JvaSegments {
    pub fn jva_pairs(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn overlaps(&self, start: Nanos, end: Nanos) -> bool {
        self.segments.iter().any(|s| s.overlaps(start, end))
    }
}

/// Flags every pair whose score is strictly above `threshold` and merges
/// consecutive flagged pairs into segments.
pub fn detect_jva(timeline: &SimilarityTimeline, threshold: f64) -> JvaSegments {
    let flags: Vec<bool> = timeline.entries.iter().map(|e| e.score > threshold).collect();
    let mut segments: Vec<Segment> = Vec::new();
    for (i, (&flag, entry)) in flags.iter().zip(&timeline.entries).enumerate() {
        if !flag {
            continue;
        }
        match segments.last_mut() {
            Some(seg) if seg.first_pair + seg.pair_count == i => {
                seg.pair_count += 1;
                seg.end_ts = entry.ts_a;
            }
            _ => segments.push(Segment { start_ts: entry.ts_a, end_ts: entry.ts_a, first_pair: i, pair_count: 1 }),
        }
    }
    JvaSegments { flags, segments, threshold }
}

/// Share of pairs flagged as JVA, in percent; 0 for an empty session.
pub fn jva_percentage(segments: &JvaSegments, total_pairs: usize) -> f64 {
    if total_pairs == 0 {
        return 0.0;
    }
    100.0 * segments.jva_pairs() as f64 / total_pairs as f64
}

/// Centred moving average over `window` pairs (truncated at the ends).
/// A window of 0 or 1 returns the timeline unchanged.
pub fn smooth_scores(timeline: &SimilarityTimeline, window: usize) -> SimilarityTimeline {
    if window <= 1 {
        return timeline.clone();
    }
    let scores = timeline.scores();
    let n = scores.len();
    let before = window / 2;
    let after = window - 1 - before;
    let entries = timeline
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            let mean = scores[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            SimilarityEntry { score: mean, ..*e }
        })
        .collect();
    SimilarityTimeline { entries, ..timeline.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochSpan {
    pub start: Nanos,
    pub end: Nanos,
    /// The last epoch includes its end point.
    pub closed: bool,
}

impl EpochSpan {
    pub fn contains(&self, t: Nanos) -> bool {
        t >= self.start && (t < self.end || (self.closed && t == self.end))
    }
}

/// Splits `[start, end]` into `count` intervals whose lengths differ by at
/// most one nanosecond.
pub fn partition_epochs(start: Nanos, end: Nanos, count: usize) -> Vec<EpochSpan> {
    assert!(count >= 1, "at least one epoch");
    assert!(end >= start);
    let span = (end - start) as u128;
    let bound = |k: usize| start + (span * k as u128 / count as u128) as Nanos;
    (0..count).map(|k| EpochSpan { start: bound(k), end: bound(k + 1), closed: k + 1 == count }).collect()
}

/// Which fixations feed K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KScope {
    /// Only fixations overlapping a JVA segment.
    Jva,
    /// Every fixation in the epoch.
    #[default]
    Epoch,
}

/// Window over which the z-score statistics are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KStatsWindow {
    #[default]
    Epoch,
    Session,
}

/// Whose events the statistics are pooled over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KPool {
    Participant,
    #[default]
    Dyad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct KOptions {
    pub scope: KScope,
    pub stats_window: KStatsWindow,
    pub pool: KPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub index: usize,
    pub span: EpochSpan,
    pub fixations_a: usize,
    pub fixations_b: usize,
    pub mean_k_a: Option<f64>,
    pub mean_k_b: Option<f64>,
    pub convergence: Option<f64>,
    pub annotation: Option<String>,
    pub k_trace_a: Vec<KSample>,
    pub k_trace_b: Vec<KSample>,
}

/// Fewer fixations than this in an epoch leaves its mean K absent.
pub const MIN_FIXATIONS_PER_EPOCH: usize = 2;

fn epoch_mean(window: &EventWindow<'_>, stats: &WindowStats) -> (Option<f64>, Vec<KSample>) {
    let series = window.k_series(stats);
    if window.fixation_count() < MIN_FIXATIONS_PER_EPOCH || series.samples.is_empty() {
        return (None, series.samples);
    }
    let mean = series.samples.iter().map(|s| s.k).sum::<f64>() / series.samples.len() as f64;
    (Some(mean), series.samples)
}

/// Per-epoch mean K of both participants and their absolute difference.
///
/// Fixations are assigned to the epoch containing their start. Epochs with
/// too few events report absent means rather than zeros.
pub fn epoch_analysis(
    session: (Nanos, Nanos),
    epochs: usize,
    events_a: &EventStream,
    events_b: &EventStream,
    options: KOptions,
    segments: &JvaSegments,
) -> Result<Vec<EpochReport>, OculomotorError> {
    if events_a.unit != events_b.unit {
        return Err(OculomotorError::MixedUnits);
    }
    let in_scope = |f: &FixationEvent| match options.scope {
        KScope::Epoch => true,
        KScope::Jva => segments.overlaps(f.start, f.end),
    };

    let session_a = EventWindow::new(events_a, in_scope);
    let session_b = EventWindow::new(events_b, in_scope);
    let session_stats = match options.pool {
        KPool::Dyad => {
            let pooled = pooled_stats(&[&session_a, &session_b])?;
            (pooled, pooled)
        }
        KPool::Participant => (session_a.stats(), session_b.stats()),
    };

    let mut reports = Vec::with_capacity(epochs);
    for (k, span) in partition_epochs(session.0, session.1, epochs).into_iter().enumerate() {
        let wa = EventWindow::new(events_a, |f| span.contains(f.start) && in_scope(f));
        let wb = EventWindow::new(events_b, |f| span.contains(f.start) && in_scope(f));
        let (stats_a, stats_b) = match (options.stats_window, options.pool) {
            (KStatsWindow::Session, _) => session_stats,
            (KStatsWindow::Epoch, KPool::Participant) => (wa.stats(), wb.stats()),
            (KStatsWindow::Epoch, KPool::Dyad) => {
                let pooled = pooled_stats(&[&wa, &wb])?;
                (pooled, pooled)
            }
        };
        let (mean_k_a, k_trace_a) = epoch_mean(&wa, &stats_a);
        let (mean_k_b, k_trace_b) = epoch_mean(&wb, &stats_b);
        let convergence = match (mean_k_a, mean_k_b) {
            (Some(a), Some(b)) => Some((a - b).abs()),
            _ => None,
        };
        reports.push(EpochReport {
            index: k + 1,
            span,
            fixations_a: wa.fixation_count(),
            fixations_b: wb.fixation_count(),
            mean_k_a,
            mean_k_b,
            convergence,
            annotation: None,
            k_trace_a,
            k_trace_b,
        });
    }
    Ok(reports)
}

/// Reads an epoch annotation file: CSV `epoch,annotation`, epochs 1-based.
pub fn parse_annotations<R: Read>(source: R) -> Result<BTreeMap<usize, String>, String> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| e.to_string())?;
    if headers.iter().collect::<Vec<_>>() != ["epoch", "annotation"] {
        return Err("annotation header must be `epoch,annotation`".to_string());
    }
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| e.to_string())?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let epoch: usize = record
            .get(0)
            .and_then(|s| s.parse().ok())
            .filter(|&e| e >= 1)
            .ok_or_else(|| format!("line {line}: epoch must be a positive integer"))?;
        out.insert(epoch, record.get(1).unwrap_or("").to_string());
    }
    Ok(out)
}

pub fn apply_annotations(epochs: &mut [EpochReport], annotations: &BTreeMap<usize, String>) {
    for e in epochs {
        e.annotation = annotations.get(&e.index).cloned();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oculomotor::{AmplitudeUnit, SaccadeEvent};
    use proptest::prelude::*;

    fn timeline(scores: &[f64]) -> SimilarityTimeline {
        SimilarityTimeline {
            entries: scores
                .iter()
                .enumerate()
                .map(|(i, &score)| SimilarityEntry { ts_a: i as Nanos * 10, ts_b: i as Nanos * 10, score })
                .collect(),
            backend_id: "test".into(),
            skipped: vec![],
        }
    }

    #[test]
    fn threshold_examples() {
        let j = detect_jva(&timeline(&[0.9, 0.5, 0.8, 0.6]), 0.7);
        assert_eq!(j.flags, vec![true, false, true, false]);
        assert_eq!(j.segments.len(), 2);
        assert!(j.segments.iter().all(|s| s.pair_count == 1));

        assert_eq!(detect_jva(&timeline(&[0.7; 5]), 0.7).jva_pairs(), 0);

        let j = detect_jva(&timeline(&[0.8, 0.9, 0.75]), 0.7);
        assert_eq!(j.segments, vec![Segment { start_ts: 0, end_ts: 20, first_pair: 0, pair_count: 3 }]);
    }

    #[test]
    fn percentage_examples() {
        let j = detect_jva(&timeline(&[0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]), 0.7);
        assert_eq!(jva_percentage(&j, 10), 40.0);
        let empty = detect_jva(&timeline(&[]), 0.7);
        assert_eq!(jva_percentage(&empty, 0), 0.0);
    }

    #[test]
    fn smoothing() {
        let t = timeline(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(smooth_scores(&t, 1), t);
        let s = smooth_scores(&t, 3).scores();
        assert_eq!(s, vec![0.5, 2.0 / 3.0, 1.0 / 3.0, 0.5]);
    }

    #[test]
    fn hundred_second_session_in_four_epochs() {
        let s = 1_000_000_000;
        let spans = partition_epochs(0, 100 * s, 4);
        let bounds: Vec<_> = spans.iter().map(|e| (e.start / s, e.end / s)).collect();
        assert_eq!(bounds, vec![(0, 25), (25, 50), (50, 75), (75, 100)]);
        assert!(spans[3].contains(100 * s));
        assert!(!spans[0].contains(25 * s));
    }

    fn fixations(starts_ms: &[u64], durations: &[f64], amplitudes: &[f64]) -> EventStream {
        let fixations: Vec<FixationEvent> = starts_ms
            .iter()
            .zip(durations)
            .map(|(&s, &d)| FixationEvent {
                start: s * 1_000_000,
                end: s * 1_000_000 + (d * 1e6) as Nanos,
                duration_ms: d,
                centroid: (0.0, 0.0),
            })
            .collect();
        let saccades = amplitudes
            .iter()
            .enumerate()
            .map(|(i, &a)| SaccadeEvent {
                start: fixations[i].end,
                end: fixations[i + 1].start,
                amplitude: a,
                unit: AmplitudeUnit::Degrees,
                from_fixation: i,
                to_fixation: i + 1,
            })
            .collect();
        EventStream { fixations, saccades, unit: AmplitudeUnit::Degrees }
    }

    fn no_jva() -> JvaSegments {
        detect_jva(&timeline(&[]), 0.7)
    }

    #[test]
    fn convergence_of_two_hand_built_streams() {
        // A: the K worked example, mean -0.61235.
        let a = fixations(&[0, 150, 400], &[100.0, 200.0, 300.0], &[3.0, 6.0]);
        // B: three fixations, so mean K = -z(d_3) / 2. Durations with
        // z = [(-0.8 - sqrt(4.08)) / 2, (-0.8 + sqrt(4.08)) / 2, 0.8] give -0.40.
        let root = 4.08f64.sqrt();
        let z = [(-0.8 - root) / 2.0, (-0.8 + root) / 2.0, 0.8];
        let d: Vec<f64> = z.iter().map(|z| 200.0 + 100.0 * z).collect();
        let b = fixations(&[0, 300, 600], &d, &[2.0, 4.0]);
        let opts = KOptions { scope: KScope::Epoch, stats_window: KStatsWindow::Epoch, pool: KPool::Participant };
        let r = epoch_analysis((0, 1_000_000_000), 1, &a, &b, opts, &no_jva()).unwrap();
        let mean_a = r[0].mean_k_a.unwrap();
        let mean_b = r[0].mean_k_b.unwrap();
        assert!((mean_a - -0.612372).abs() < 1e-6);
        assert!((mean_b - -0.40).abs() < 1e-9);
        assert!((r[0].convergence.unwrap() - 0.21235).abs() < 1e-4);
    }

    #[test]
    fn sparse_epoch_reports_absent_mean() {
        let a = fixations(&[0, 150, 400, 600], &[100.0, 200.0, 300.0, 100.0], &[3.0, 6.0, 2.0]);
        // B has a single fixation in the first half and none in the second.
        let b = fixations(&[10], &[120.0], &[]);
        let opts = KOptions { scope: KScope::Epoch, stats_window: KStatsWindow::Epoch, pool: KPool::Participant };
        let r = epoch_analysis((0, 1_000_000_000), 2, &a, &b, opts, &no_jva()).unwrap();
        assert_eq!(r[0].fixations_b, 1);
        assert!(r[0].mean_k_a.is_some());
        assert_eq!((r[0].mean_k_b, r[0].convergence), (None, None));
        assert_eq!(r[1].mean_k_a, None);
    }

    #[test]
    fn jva_scope_keeps_only_overlapping_fixations() {
        let a = fixations(&[0, 150, 400, 800], &[100.0, 200.0, 300.0, 100.0], &[3.0, 6.0, 2.0]);
        let jva = JvaSegments {
            flags: vec![],
            segments: vec![Segment { start_ts: 0, end_ts: 450_000_000, first_pair: 0, pair_count: 1 }],
            threshold: 0.7,
        };
        let opts = KOptions { scope: KScope::Jva, stats_window: KStatsWindow::Epoch, pool: KPool::Participant };
        let r = epoch_analysis((0, 1_000_000_000), 1, &a, &a, opts, &jva).unwrap();
        assert_eq!(r[0].fixations_a, 3);
        assert!((r[0].mean_k_a.unwrap() - -0.612372).abs() < 1e-6);
        assert_eq!(r[0].convergence, Some(0.0));
    }

    #[test]
    fn dyad_pooling_shares_statistics() {
        let a = fixations(&[0, 1000, 2000], &[800.0, 900.0, 850.0], &[1.0, 1.2]);
        let b = fixations(&[0, 300, 600], &[150.0, 180.0, 160.0], &[9.0, 11.0]);
        let opts = KOptions { scope: KScope::Epoch, stats_window: KStatsWindow::Epoch, pool: KPool::Dyad };
        let r = epoch_analysis((0, 3_000_000_000), 1, &a, &b, opts, &no_jva()).unwrap();
        assert!(r[0].mean_k_a.unwrap() > 0.0);
        assert!(r[0].mean_k_b.unwrap() < 0.0);
    }

    #[test]
    fn mixed_units_between_participants() {
        let a = fixations(&[0, 150], &[100.0, 200.0], &[3.0]);
        let mut b = a.clone();
        b.unit = AmplitudeUnit::Pixels;
        assert_eq!(epoch_analysis((0, 1), 1, &a, &b, KOptions::default(), &no_jva()), Err(OculomotorError::MixedUnits));
    }

    #[test]
    fn annotations_file() {
        let text = "epoch,annotation\n1,Preparing\n3,\"Conversation, Watching\"\n";
        let ann = parse_annotations(text.as_bytes()).unwrap();
        assert_eq!(ann[&3], "Conversation, Watching");
        assert!(parse_annotations("e,a\n1,x\n".as_bytes()).is_err());
        assert!(parse_annotations("epoch,annotation\n0,x\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn threshold_monotonic_and_segments_reconstruct(
            scores in proptest::collection::vec(-1.0f64..=1.0, 0..200),
            t1 in -0.99f64..1.0, t2 in -0.99f64..1.0,
        ) {
            let tl = timeline(&scores);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let j_lo = detect_jva(&tl, lo);
            let j_hi = detect_jva(&tl, hi);
            prop_assert!(j_hi.jva_pairs() <= j_lo.jva_pairs());
            let mut rebuilt = vec![false; scores.len()];
            for s in &j_lo.segments {
                for flag in &mut rebuilt[s.first_pair..s.first_pair + s.pair_count] {
                    prop_assert!(!*flag);
                    *flag = true;
                }
            }
            prop_assert_eq!(rebuilt, j_lo.flags.clone());
            let pct = jva_percentage(&j_lo, scores.len());
            prop_assert!((0.0..=100.0).contains(&pct));
            prop_assert_eq!(pct == 100.0, !scores.is_empty() && scores.iter().all(|&s| s > lo));
        }

        #[test]
        fn epochs_partition_exactly(start in 0u64..1_000_000, len in 0u64..10_000_000_000, count in 1usize..12) {
            let spans = partition_epochs(start, start + len, count);
            prop_assert_eq!(spans[0].start, start);
            prop_assert_eq!(spans[count - 1].end, start + len);
            for w in spans.windows(2) {
                prop_assert_eq!(w[0].end, w[1].start);
            }
            let lens: Vec<u64> = spans.iter().map(|s| s.end - s.start).collect();
            prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }
    }
}
