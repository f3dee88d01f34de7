//! Scene rendering and scripted gaze.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Background, ObjectSpec, ScenarioSpec, ScriptEntry, Shape, Texture, Viewpoint};
use crate::gaze::{GazeSample, Nanos, Participant};
use crate::tube::Frame;

/// SplitMix64 over a sequence of words.
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
fn shade(color: [u8; 3], texture: &Texture, lx: f64, ly: f64) -> [u8; 3] {
    match *texture {
        Texture::Solid => color,
        Texture::Noise { seed, block, contrast } => {
            let b = block as f64;
            noise_colour(color, seed, contrast, (lx / b).floor() as i64, (ly / b).floor() as i64)
        }
    }
}

fn noise_colour(color: [u8; 3], seed: u64, contrast: f64, bx: i64, by: i64) -> [u8; 3] {
    let n = mix(&[seed, bx as u64, by as u64]) >> 11;
    let factor = 1.0 - contrast * (n as f64 / (1u64 << 53) as f64);
    color.map(|c| (c as f64 * factor).round() as u8)
}

/// Shades a run of pixels whose local x coordinates are `lx`, reusing the
/// colour while consecutive pixels stay in one noise block.
fn shade_run(out: &mut [u8], color: [u8; 3], texture: &Texture, lx: impl Iterator<Item = f64>, ly: f64) {
    match *texture {
        Texture::Solid => {
            for px in out.chunks_exact_mut(3) {
                px.copy_from_slice(&color);
            }
        }
        Texture::Noise { seed, block, contrast } => {
            let b = block as f64;
            let by = (ly / b).floor() as i64;
            let mut last = (i64::MIN, color);
            for (px, x) in out.chunks_exact_mut(3).zip(lx) {
                let bx = (x / b).floor() as i64;
                if bx != last.0 {
                    last = (bx, noise_colour(color, seed, contrast, bx, by));
                }
                px.copy_from_slice(&last.1);
            }
        }
    }
}

impl Viewpoint {
    /// Canvas coordinate seen at frame coordinate `u` along an axis of
    /// length `len`.
    pub(crate) fn to_canvas(self, u: f64, len: u32, axis: usize) -> f64 {
        let half = len as f64 / 2.0;
        (u - half) / self.scale + half + self.offset[axis]
    }

    pub(crate) fn to_frame(self, x: f64, len: u32, axis: usize) -> f64 {
        let half = len as f64 / 2.0;
        (x - half - self.offset[axis]) * self.scale + half
    }
}

fn half_extent(obj: &ObjectSpec) -> (f64, f64) {
    match obj.shape {
        Shape::Rect => (obj.size[0] / 2.0, obj.size[1] / 2.0),
        Shape::Disc => (obj.size[0] / 2.0, obj.size[0] / 2.0),
    }
}

fn centre_at(obj: &ObjectSpec, t: f64) -> (f64, f64) {
    let w = &obj.waypoints;
    if t <= w[0][0] {
        return (w[0][1], w[0][2]);
    }
    for p in w.windows(2) {
        if t <= p[1][0] {
            let f = (t - p[0][0]) / (p[1][0] - p[0][0]);
            return (p[0][1] + f * (p[1][1] - p[0][1]), p[0][2] + f * (p[1][2] - p[0][2]));
        }
    }
    let last = w[w.len() - 1];
    (last[1], last[2])
}

#[derive(Debug, Clone)]
pub struct Scene {
    objects: Vec<ObjectSpec>,
    background: Background,
}

impl Scene {
    pub fn new(spec: &ScenarioSpec) -> Self {
        Self { objects: spec.objects.clone(), background: spec.background }
    }

    pub fn object_centre(&self, name: &str, t: f64) -> Option<(f64, f64)> {
        self.objects.iter().find(|o| o.name == name).map(|o| centre_at(o, t))
    }

    /// Canvas-space extent `(x0, y0, x1, y1)` of an object at time `t`.
    pub fn object_bounds(&self, name: &str, t: f64) -> Option<(f64, f64, f64, f64)> {
        let obj = self.objects.iter().find(|o| o.name == name)?;
        let (cx, cy) = centre_at(obj, t);
        let (hw, hh) = half_extent(obj);
        Some((cx - hw, cy - hh, cx + hw, cy + hh))
    }

    pub fn render(&self, spec: &ScenarioSpec, participant: Participant, timestamp: Nanos) -> Frame {
        let [w, h] = spec.frame_size;
        let view = spec.viewpoint(participant);
        let t = timestamp as f64 / 1e9;
        let placed: Vec<_> = self.objects.iter().map(|o| (o, centre_at(o, t), half_extent(o))).collect();
        let xs: Vec<f64> = (0..w).map(|u| view.to_canvas(u as f64, w, 0)).collect();

        let mut pixels = vec![0u8; w as usize * h as usize * 3];
        for (v, row) in pixels.chunks_exact_mut(w as usize * 3).enumerate() {
            let y = view.to_canvas(v as f64, h, 1);
            let bg = self.background;
            shade_run(row, bg.color, &bg.texture, xs.iter().copied(), y);
            for &(obj, (cx, cy), (hw, hh)) in &placed {
                let dy = y - cy;
                let half = match obj.shape {
                    Shape::Rect if dy.abs() <= hh => hw,
                    Shape::Disc if dy.abs() <= hw => (hw * hw - dy * dy).sqrt(),
                    _ => continue,
                };
                let lo = view.to_frame(cx - half, w, 0).ceil().max(0.0);
                let hi = view.to_frame(cx + half, w, 0).floor().min(w as f64 - 1.0);
                if lo > hi {
                    continue;
                }
                let (x0, y0) = (cx - hw, cy - hh);
                let (lo, hi) = (lo as usize, hi as usize);
                let lx = xs[lo..=hi].iter().map(|x| x - x0);
                shade_run(&mut row[lo * 3..(hi + 1) * 3], obj.color, &obj.texture, lx, y - y0);
            }
        }
        Frame::new(timestamp, w, h, pixels)
    }
}

/// Fixation targets of one script entry: `(start_s, point)`. Points are
/// offsets from the target's centre, or canvas positions when viewing
/// freely.
type Schedule = Vec<(f64, (f64, f64))>;

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let x = if x < lo {
        2.0 * lo - x
    } else if x > hi {
        2.0 * hi - x
    } else {
        x
    };
    x.clamp(lo, hi)
}

fn schedule(spec: &ScenarioSpec, index: usize, entry: &ScriptEntry) -> Schedule {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[spec.rng_seed, index as u64, entry.independent.unwrap_or(u64::MAX)]));
    let (lo, hi) = match &entry.target {
        Some(name) => {
            let obj = spec.objects.iter().find(|o| &o.name == name).expect("validated target");
            let (hw, hh) = half_extent(obj);
            let (rx, ry) = match obj.shape {
                Shape::Rect => (0.5 * hw, 0.5 * hh),
                Shape::Disc => (0.35 * hw, 0.35 * hw),
            };
            ((-rx, -ry), (rx, ry))
        }
        None => {
            let view = if entry.participant == super::Who::B { spec.viewpoints.b } else { spec.viewpoints.a };
            let [w, h] = spec.frame_size;
            let (mx, my) = (0.15 * w as f64, 0.15 * h as f64);
            (
                (view.to_canvas(mx, w, 0), view.to_canvas(my, h, 1)),
                (view.to_canvas(w as f64 - mx, w, 0), view.to_canvas(h as f64 - my, h, 1)),
            )
        }
    };
    let dwell = Normal::new(entry.dwell_ms, 0.3 * entry.dwell_ms).expect("positive dwell");
    let amplitude = Normal::new(entry.saccade_px, 0.3 * entry.saccade_px).expect("non-negative amplitude");

    let mut point = (rng.random_range(lo.0..=hi.0), rng.random_range(lo.1..=hi.1));
    let mut t = entry.start_s;
    let mut out = Vec::new();
    while t < entry.end_s {
        out.push((t, point));
        t += dwell.sample(&mut rng).max(0.3 * entry.dwell_ms) / 1e3;
        let a: f64 = amplitude.sample(&mut rng).abs();
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        point = (reflect(point.0 + a * theta.cos(), lo.0, hi.0), reflect(point.1 + a * theta.sin(), lo.1, hi.1));
    }
    out
}

pub(crate) fn generate_gaze(spec: &ScenarioSpec, scene: &Scene, participant: Participant) -> Vec<GazeSample> {
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(mix(&[spec.rng_seed, 0x6a17, participant as u64]));
    let jitter = Normal::new(0.0, spec.gaze_jitter_px).expect("validated jitter");
    let view = spec.viewpoint(participant);
    let [w, h] = spec.frame_size;
    let mut schedules: HashMap<usize, Schedule> = HashMap::new();

    spec.frame_timestamps()
        .into_iter()
        .map(|ts| {
            let t = ts as f64 / 1e9;
            let (index, entry) = spec.entry_at(participant, t).expect("validated script coverage");
            let sched = schedules.entry(index).or_insert_with(|| schedule(spec, index, entry));
            let k = sched.partition_point(|f| f.0 <= t).saturating_sub(1);
            let point = sched[k].1;
            let (x, y) = match &entry.target {
                Some(name) => {
                    let (cx, cy) = scene.object_centre(name, t).expect("validated target");
                    (cx + point.0, cy + point.1)
                }
                None => point,
            };
            let (jx, jy): (f64, f64) = (jitter.sample(&mut jitter_rng), jitter.sample(&mut jitter_rng));
            GazeSample::pixel(ts, participant, view.to_frame(x, w, 0) + jx, view.to_frame(y, h, 1) + jy)
        })
        .collect()
}
