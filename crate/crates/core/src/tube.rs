//! Frames and gaze-centred spatiotemporal tubes.
//!
//! A frame directory holds one image per frame, named by its zero-padded
//! nanosecond timestamp (`0000001600000000.png`, `.ppm` also accepted).

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::ImageReader;
use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::gaze::{GazePayload, GazeSample, Nanos, Participant, Validity};

/// Default ROI side in pixels.
///
/// Chosen to span more than a quarter of a 1408-pixel egocentric frame in
/// each direction. Not enforced for other frame sizes.
pub const DEFAULT_WINDOW: u32 = 400;

#[derive(Debug, Error)]
pub enum TubeError {
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("file name `{0}` does not encode a timestamp")]
    MissingTimestampInName(String),
    #[error("gaze ({px}, {py}) lies outside the {width}x{height} frame")]
    GazeOutOfFrame { px: f64, py: f64, width: u32, height: u32 },
    #[error("window {window} does not fit a {width}x{height} frame")]
    WindowTooLarge { window: u32, width: u32, height: u32 },
    #[error("no frames found in {0}")]
    NoFramesFound(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major RGB8 raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub timestamp: Nanos,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("timestamp", &self.timestamp)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Frame {
    pub fn new(timestamp: Nanos, width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize * 3, "RGB8 buffer size");
        Self { timestamp, width, height, pixels }
    }

    pub fn filled(timestamp: Nanos, width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { timestamp, width, height, pixels }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>, TubeError> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| TubeError::Decode {
            path: format!("<png encode {}>", self.timestamp),
            reason: e.to_string(),
        })?;
        Ok(out.into_inner())
    }
}

/// Parses the timestamp from a frame file name such as `0000001600000000.png`.
pub fn timestamp_from_name(path: &Path) -> Result<Nanos, TubeError> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return Err(TubeError::MissingTimestampInName(path.display().to_string()));
    }
    stem.parse().map_err(|_| TubeError::MissingTimestampInName(path.display().to_string()))
}

/// Decodes PNG or PPM bytes into an RGB8 frame; grayscale expands to R=G=B.
pub fn decode_frame(bytes: &[u8], timestamp: Nanos, origin: &str) -> Result<Frame, TubeError> {
    let decode_err = |reason: String| TubeError::Decode { path: origin.to_string(), reason };
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (width, height) = rgb.dimensions();
    Ok(Frame { timestamp, width, height, pixels: rgb.into_raw() })
}

pub fn load_frame(path: &Path) -> Result<Frame, TubeError> {
    let timestamp = timestamp_from_name(path)?;
    let bytes = std::fs::read(path).map_err(|source| TubeError::Io { path: path.display().to_string(), source })?;
    decode_frame(&bytes, timestamp, &path.display().to_string())
}

/// Anything that can hand out frames by timestamp.
pub trait FrameSource: Sync {
    /// Available frame timestamps, ascending.
    fn timestamps(&self) -> &[Nanos];
    fn load(&self, timestamp: Nanos) -> Result<Frame, TubeError>;
    fn describe(&self) -> String;

    /// Nearest frame timestamp within `tolerance` of `t`.
    fn nearest(&self, t: Nanos, tolerance: Nanos) -> Option<Nanos> {
        let ts = self.timestamps();
        let i = ts.partition_point(|&x| x < t);
        let before = i.checked_sub(1).map(|j| ts[j]);
        let after = ts.get(i).copied();
        let best = match (before, after) {
            (Some(b), Some(a)) => {
                if t - b <= a - t {
                    b
                } else {
                    a
                }
            }
            (Some(b), None) => b,
            (None, Some(a)) => a,
            (None, None) => return None,
        };
        (best.abs_diff(t) <= tolerance).then_some(best)
    }
}

/// Frames stored as individual image files in one directory.
#[derive(Debug, Clone)]
pub struct FrameDir {
    dir: PathBuf,
    timestamps: Vec<Nanos>,
    paths: Vec<PathBuf>,
}

impl FrameDir {
    pub fn open(dir: &Path) -> Result<Self, TubeError> {
        let io = |source| TubeError::Io { path: dir.display().to_string(), source };
        let mut entries = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("png") | Some("ppm")) {
                continue;
            }
            entries.push((timestamp_from_name(&path)?, path));
        }
        if entries.is_empty() {
            return Err(TubeError::NoFramesFound(dir.display().to_string()));
        }
        entries.sort();
        let (timestamps, paths) = entries.into_iter().unzip();
        Ok(Self { dir: dir.to_path_buf(), timestamps, paths })
    }
}

impl FrameSource for FrameDir {
    fn timestamps(&self) -> &[Nanos] {
        &self.timestamps
    }

    fn load(&self, timestamp: Nanos) -> Result<Frame, TubeError> {
        let i = self
            .timestamps
            .binary_search(&timestamp)
            .map_err(|_| TubeError::NoFramesFound(format!("{} @ {timestamp}", self.dir.display())))?;
        load_frame(&self.paths[i])
    }

    fn describe(&self) -> String {
        self.dir.display().to_string()
    }
}

/// Frames already held in memory, e.g. in tests.
#[derive(Debug, Clone)]
pub struct MemoryFrames {
    timestamps: Vec<Nanos>,
    frames: Vec<Frame>,
}

impl MemoryFrames {
    pub fn new(mut frames: Vec<Frame>) -> Self {
        frames.sort_by_key(|f| f.timestamp);
        Self { timestamps: frames.iter().map(|f| f.timestamp).collect(), frames }
    }
}

impl FrameSource for MemoryFrames {
    fn timestamps(&self) -> &[Nanos] {
        &self.timestamps
    }

    fn load(&self, timestamp: Nanos) -> Result<Frame, TubeError> {
        self.timestamps
            .binary_search(&timestamp)
            .map(|i| self.frames[i].clone())
            .map_err(|_| TubeError::NoFramesFound(format!("memory @ {timestamp}")))
    }

    fn describe(&self) -> String {
        format!("{} in-memory frames", self.frames.len())
    }
}

#[derive(Clone, PartialEq)]
pub struct TubeSlice {
    pub timestamp: Nanos,
    pub window: u32,
    /// Top-left corner of the crop in frame coordinates.
    pub origin: (u32, u32),
    pub gaze: (f64, f64),
    /// `window * window` RGB8 pixels, row-major.
    pub pixels: Vec<u8>,
}

impl fmt::Debug for TubeSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TubeSlice")
            .field("timestamp", &self.timestamp)
            .field("window", &self.window)
            .field("origin", &self.origin)
            .field("gaze", &self.gaze)
            .finish_non_exhaustive()
    }
}

impl TubeSlice {
    pub fn from_pixels(timestamp: Nanos, window: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), window as usize * window as usize * 3);
        let c = window as f64 / 2.0;
        Self { timestamp, window, origin: (0, 0), gaze: (c, c), pixels }
    }

    pub fn contains_gaze(&self) -> bool {
        let (x0, y0) = (self.origin.0 as f64, self.origin.1 as f64);
        let w = self.window as f64;
        self.gaze.0 >= x0 && self.gaze.0 < x0 + w && self.gaze.1 >= y0 && self.gaze.1 < y0 + w
    }
}

/// Top-left corner of a `window`-sized crop centred on `gaze`, shifted to
/// stay inside the frame.
pub fn roi_origin(gaze: (f64, f64), window: u32, width: u32, height: u32) -> Result<(u32, u32), TubeError> {
    if window == 0 || window > width || window > height {
        return Err(TubeError::WindowTooLarge { window, width, height });
    }
    let (px, py) = gaze;
    let inside = px >= 0.0 && py >= 0.0 && px < width as f64 && py < height as f64;
    if !inside {
        return Err(TubeError::GazeOutOfFrame { px, py, width, height });
    }
    let half = window as f64 / 2.0;
    let clamp = |v: f64, limit: u32| -> u32 { v.round().clamp(0.0, (limit - window) as f64) as u32 };
    Ok((clamp(px - half, width), clamp(py - half, height)))
}

pub fn extract_roi(frame: &Frame, gaze: (f64, f64), window: u32) -> Result<TubeSlice, TubeError> {
    let (x0, y0) = roi_origin(gaze, window, frame.width, frame.height)?;
    let w = window as usize;
    let stride = frame.width as usize * 3;
    let mut pixels = Vec::with_capacity(w * w * 3);
    for row in y0 as usize..y0 as usize + w {
        let start = row * stride + x0 as usize * 3;
        pixels.extend_from_slice(&frame.pixels[start..start + w * 3]);
    }
    Ok(TubeSlice { timestamp: frame.timestamp, window, origin: (x0, y0), gaze, pixels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipReason {
    Missing,
    OutOfFrame,
    /// Direction payload that was never projected to pixels.
    Unprojected,
    NoMatchingFrame,
}

impl SkipReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Missing => "missing",
            Self::OutOfFrame => "out_of_frame",
            Self::Unprojected => "unprojected",
            Self::NoMatchingFrame => "no_matching_frame",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkipDiagnostic {
    pub timestamp: Nanos,
    pub reason: SkipReason,
}

#[derive(Debug, Clone)]
pub struct Tube {
    pub participant: Participant,
    pub window: u32,
    /// Ordered by timestamp.
    pub slices: Vec<TubeSlice>,
    pub skips: Vec<SkipDiagnostic>,
}

impl Tube {
    pub fn get(&self, timestamp: Nanos) -> Option<&TubeSlice> {
        self.slices.binary_search_by_key(&timestamp, |s| s.timestamp).ok().map(|i| &self.slices[i])
    }
}

/// Crops one slice per gaze sample from the nearest frame within
/// `tolerance`. Every input sample yields either a slice or a skip
/// diagnostic. Slices carry the gaze timestamp.
pub fn build_tube(
    frames: &dyn FrameSource,
    gaze: &[GazeSample],
    window: u32,
    tolerance: Nanos,
) -> Result<Tube, TubeError> {
    if frames.timestamps().is_empty() {
        return Err(TubeError::NoFramesFound(frames.describe()));
    }
    let participant = gaze.first().map(|g| g.participant).unwrap_or(Participant::A);

    enum Outcome {
        Slice(TubeSlice),
        Skip(SkipDiagnostic),
    }
    let outcomes: Vec<Result<Outcome, TubeError>> = gaze
        .par_iter()
        .map(|g| {
            let skip = |reason| Ok(Outcome::Skip(SkipDiagnostic { timestamp: g.timestamp, reason }));
            match g.validity {
                Validity::Missing => return skip(SkipReason::Missing),
                Validity::OutOfFrame => return skip(SkipReason::OutOfFrame),
                Validity::Valid => {}
            }
            let (px, py) = match g.payload {
                GazePayload::Pixel2 { px, py } => (px, py),
                GazePayload::Direction3 { .. } => return skip(SkipReason::Unprojected),
            };
            let Some(ft) = frames.nearest(g.timestamp, tolerance) else {
                return skip(SkipReason::NoMatchingFrame);
            };
            let frame = frames.load(ft)?;
            match extract_roi(&frame, (px, py), window) {
                Ok(mut slice) => {
                    slice.timestamp = g.timestamp;
                    Ok(Outcome::Slice(slice))
                }
                Err(TubeError::GazeOutOfFrame { .. }) => skip(SkipReason::OutOfFrame),
                Err(e) => Err(e),
            }
        })
        .collect();

    let mut slices = Vec::new();
    let mut skips = Vec::new();
    for outcome in outcomes {
        match outcome? {
            Outcome::Slice(s) => slices.push(s),
            Outcome::Skip(d) => {
                info!("tube {participant}: skipped gaze at {} ns ({})", d.timestamp, d.reason.as_str());
                skips.push(d);
            }
        }
    }
    slices.sort_by_key(|s| s.timestamp);
    Ok(Tube { participant, window, slices, skips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_frame(ts: Nanos, w: u32, h: u32) -> Frame {
        let mut px = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        Frame::new(ts, w, h, px)
    }

    #[test]
    fn timestamp_from_file_name() {
        assert_eq!(timestamp_from_name(Path::new("/x/0000001600000000.png")).unwrap(), 1_600_000_000);
        assert!(matches!(timestamp_from_name(Path::new("frame_12.png")), Err(TubeError::MissingTimestampInName(_))));
    }

    #[test]
    fn load_png_frame_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let frame = gradient_frame(1_600_000_000, 64, 48);
        let path = dir.path().join("0000001600000000.png");
        std::fs::write(&path, frame.to_png().unwrap()).unwrap();
        let loaded = load_frame(&path).unwrap();
        assert_eq!(loaded.timestamp, 1_600_000_000);
        assert_eq!(loaded, frame);
    }

    #[test]
    fn truncated_file_fails_to_decode() {
        let frame = gradient_frame(0, 32, 32);
        let png = frame.to_png().unwrap();
        assert!(matches!(decode_frame(&png[..png.len() / 2], 0, "t"), Err(TubeError::Decode { .. })));
        let ppm = frame.to_ppm();
        assert!(matches!(decode_frame(&ppm[..ppm.len() - 10], 0, "t"), Err(TubeError::Decode { .. })));
    }

    #[test]
    fn grayscale_expands_to_rgb() {
        let gray = image::GrayImage::from_fn(8, 4, |x, y| image::Luma([(x * 30 + y) as u8]));
        let mut buf = Cursor::new(Vec::new());
        gray.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let frame = decode_frame(buf.get_ref(), 5, "gray").unwrap();
        assert_eq!((frame.width, frame.height), (8, 4));
        for y in 0..4 {
            for x in 0..8 {
                let v = (x * 30 + y) as u8;
                assert_eq!(frame.pixel(x, y), [v, v, v]);
            }
        }
    }

    #[test]
    fn ppm_round_trip() {
        let frame = gradient_frame(3, 17, 9);
        assert_eq!(decode_frame(&frame.to_ppm(), 3, "ppm").unwrap(), frame);
    }

    #[test]
    fn centred_crop() {
        let frame = gradient_frame(0, 1408, 1408);
        let s = extract_roi(&frame, (704.0, 704.0), 400).unwrap();
        assert_eq!(s.origin, (504, 504));
        assert_eq!(s.pixels.len(), 400 * 400 * 3);
        assert_eq!(&s.pixels[..3], &frame.pixel(504, 504));
        let last = s.pixels.len() - 3;
        assert_eq!(&s.pixels[last..], &frame.pixel(903, 903));
    }

    #[test]
    fn corner_gaze_is_shift_clamped() {
        let frame = gradient_frame(0, 1408, 1408);
        assert_eq!(extract_roi(&frame, (0.0, 0.0), 400).unwrap().origin, (0, 0));
        assert_eq!(extract_roi(&frame, (1407.9, 1407.9), 400).unwrap().origin, (1008, 1008));
    }

    #[test]
    fn gaze_outside_and_oversized_window() {
        assert!(matches!(roi_origin((2000.0, 700.0), 400, 1408, 1408), Err(TubeError::GazeOutOfFrame { .. })));
        assert!(matches!(roi_origin((10.0, 10.0), 400, 300, 1408), Err(TubeError::WindowTooLarge { .. })));
    }

    fn frames(n: u64) -> MemoryFrames {
        MemoryFrames::new((0..n).map(|i| gradient_frame(i * 100, 64, 64)).collect())
    }

    #[test]
    fn one_slice_per_valid_sample() {
        let gaze: Vec<_> = (0..10).map(|i| GazeSample::pixel(i * 100, Participant::A, 32.0, 32.0)).collect();
        let tube = build_tube(&frames(10), &gaze, 16, 50).unwrap();
        assert_eq!(tube.slices.len(), 10);
        assert!(tube.skips.is_empty());
        assert!(tube.slices.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn out_of_frame_samples_become_skips() {
        let mut gaze: Vec<_> = (0..10).map(|i| GazeSample::pixel(i * 100, Participant::A, 32.0, 32.0)).collect();
        gaze[3].validity = Validity::OutOfFrame;
        gaze[7].payload = GazePayload::Pixel2 { px: 90.0, py: 10.0 };
        let tube = build_tube(&frames(10), &gaze, 16, 50).unwrap();
        assert_eq!(tube.slices.len(), 8);
        assert_eq!(tube.skips.len(), 2);
        assert!(tube.skips.iter().all(|s| s.reason == SkipReason::OutOfFrame));
    }

    #[test]
    fn empty_frame_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(FrameDir::open(dir.path()), Err(TubeError::NoFramesFound(_))));
    }

    #[test]
    fn frame_dir_matches_nearest_frame() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3u64 {
            let f = gradient_frame(i * 1000, 32, 32);
            std::fs::write(dir.path().join(format!("{:016}.ppm", f.timestamp)), f.to_ppm()).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let src = FrameDir::open(dir.path()).unwrap();
        assert_eq!(src.timestamps(), &[0, 1000, 2000]);
        assert_eq!(src.nearest(1400, 500), Some(1000));
        assert_eq!(src.nearest(1500, 500), Some(1000));
        assert_eq!(src.nearest(2600, 500), None);
        let gaze =
            vec![GazeSample::pixel(990, Participant::B, 5.0, 5.0), GazeSample::pixel(5000, Participant::B, 5.0, 5.0)];
        let tube = build_tube(&src, &gaze, 16, 100).unwrap();
        assert_eq!(tube.slices.len(), 1);
        assert_eq!(tube.slices[0].timestamp, 990);
        assert_eq!(tube.skips, vec![SkipDiagnostic { timestamp: 5000, reason: SkipReason::NoMatchingFrame }]);
    }

    proptest! {
        #[test]
        fn slice_contains_gaze(px in 0.0f64..1408.0, py in 0.0f64..1408.0, edge in 0usize..5) {
            let (px, py) = match edge {
                0 => (0.0, py),
                1 => (1407.999, py),
                2 => (px, 0.0),
                3 => (px, 1407.999),
                _ => (px, py),
            };
            let (x0, y0) = roi_origin((px, py), 400, 1408, 1408).unwrap();
            prop_assert!(x0 + 400 <= 1408 && y0 + 400 <= 1408);
            prop_assert!(px >= x0 as f64 && px < (x0 + 400) as f64);
            prop_assert!(py >= y0 as f64 && py < (y0 + 400) as f64);
        }

        #[test]
        fn extraction_is_deterministic(px in 0.0f64..64.0, py in 0.0f64..64.0) {
            let frame = gradient_frame(0, 64, 64);
            let a = extract_roi(&frame, (px, py), 20).unwrap();
            let b = extract_roi(&frame.clone(), (px, py), 20).unwrap();
            prop_assert!(a.contains_gaze());
            prop_assert_eq!(a.pixels, b.pixels);
        }
    }
}
