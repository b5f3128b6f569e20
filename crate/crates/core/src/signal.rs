//! Recording ingestion and segment preprocessing.
//!
//! Recordings are resampled to 125 Hz, cut into consecutive 48 s windows
//! (trailing remainder dropped), flat windows are discarded, and each
//! remaining window is min-max scaled and framed by 72 zeros on both sides to
//! give 6144-sample network inputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{MeaeError, Result};
use crate::nn::Tensor;

pub const TARGET_FS: f64 = 125.0;
pub const SEGMENT_SECONDS: f64 = 48.0;
pub const CORE_LEN: usize = 6000;
pub const PAD: usize = 72;
pub const SEGMENT_LEN: usize = CORE_LEN + 2 * PAD;

/// Taps per polyphase branch of the resampling filter.
pub const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub channel: String,
    pub id: String,
}

impl Recording {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(MeaeError::Config(format!("sampling rate must be positive, got {fs}")));
        }
        if samples.is_empty() {
            return Err(MeaeError::InsufficientData("recording has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(MeaeError::NonFinite(format!("recording sample {i}")));
        }
        Ok(Self {
            samples,
            fs,
            channel: String::new(),
            id: String::new(),
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_channel(mut self, channel: impl Into<String>) -> Self {
        self.channel = channel.into();
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentOrigin {
    pub recording_id: String,
    pub index: usize,
    /// First sample of the window in the 125 Hz recording.
    pub start: usize,
}

/// A scaled, zero-framed network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub data: Vec<f64>,
    pub origin: SegmentOrigin,
    /// `(min, max)` of the raw window.
    pub scale: (f64, f64),
}

impl Segment {
    pub fn core(&self) -> &[f64] {
        &self.data[PAD..PAD + CORE_LEN]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::signal(&self.data)
    }

    /// Checks length, zero framing and the `[0, 1]` core range with both extrema attained.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != SEGMENT_LEN {
            return Err(MeaeError::Shape {
                op: "Segment",
                lhs: vec![self.data.len()],
                rhs: vec![SEGMENT_LEN],
            });
        }
        if self.data[..PAD].iter().chain(&self.data[PAD + CORE_LEN..]).any(|&v| v != 0.0) {
            return Err(MeaeError::Config("segment padding is not zero".into()));
        }
        let (lo, hi) = min_max(self.core());
        if lo != 0.0 || hi != 1.0 {
            return Err(MeaeError::Config(format!("segment core spans [{lo}, {hi}], not [0, 1]")));
        }
        Ok(())
    }
}

pub fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Best rational approximation `num/den` of `x` with `den <= max_den`.
pub fn limit_denominator(x: f64, max_den: u64) -> (u64, u64) {
    let (mut p0, mut q0, mut p1, mut q1) = (0u64, 1u64, 1u64, 0u64);
    let mut frac = x;
    loop {
        let a = frac.floor();
        let a_int = a as u64;
        let q2 = q0 + a_int * q1;
        if q2 > max_den {
            break;
        }
        let p2 = p0 + a_int * p1;
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
        let rem = frac - a;
        if rem.abs() < 1e-12 || (p1 as f64 / q1 as f64 - x).abs() < 1e-12 * x.abs().max(1.0) {
            break;
        }
        frac = 1.0 / rem;
    }
    if q1 == 0 {
        (x.round() as u64, 1)
    } else {
        (p1, q1)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc low-pass prototype for an `up/down` polyphase resampler.
fn resampling_filter(up: usize, down: usize) -> Vec<f64> {
    let len = TAPS_PER_PHASE * up + 1;
    let center = (len - 1) as f64 / 2.0;
    let cutoff = 0.5 / up.max(down) as f64;
    let norm = bessel_i0(KAISER_BETA);
    (0..len)
        .map(|n| {
            let t = n as f64 - center;
            let sinc = if t == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * 2.0 * cutoff * t;
                a.sin() / a
            };
            let r = t / center;
            let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
            up as f64 * 2.0 * cutoff * sinc * window
        })
        .collect()
}

/// Rational-ratio polyphase resampling with a Kaiser-windowed anti-aliasing filter.
///
/// Output length is `round(len · target_fs / fs)`; an equal rate returns the input unchanged.
pub fn resample(rec: &Recording, target_fs: f64) -> Result<Recording> {
    if !(target_fs.is_finite() && target_fs > 0.0) {
        return Err(MeaeError::Config(format!("target rate must be positive, got {target_fs}")));
    }
    if target_fs == rec.fs {
        return Ok(rec.clone());
    }
    let (up, down) = limit_denominator(target_fs / rec.fs, 4096);
    let (up, down) = (up as usize, down as usize);
    if up == 0 {
        return Err(MeaeError::Config(format!(
            "resampling ratio {target_fs}/{} is too small",
            rec.fs
        )));
    }
    let h = resampling_filter(up, down);
    let delay = (h.len() - 1) / 2;
    let n_in = rec.samples.len();
    let n_out = ((n_in as f64) * target_fs / rec.fs).round() as usize;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        // position in the zero-stuffed stream, including the filter delay
        let pos = j * down + delay;
        // contributing inputs satisfy 0 <= pos - i·up < h.len()
        let i_max = (pos / up).min(n_in.saturating_sub(1));
        let i_min = (pos + up).saturating_sub(h.len()).div_ceil(up);
        let mut acc = 0.0;
        if i_min <= i_max {
            for i in i_min..=i_max {
                acc += rec.samples[i] * h[pos - i * up];
            }
        }
        out.push(acc);
    }
    Ok(Recording {
        samples: out,
        fs: target_fs,
        channel: rec.channel.clone(),
        id: rec.id.clone(),
    })
}

/// A raw window cut from a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub index: usize,
    pub start: usize,
    pub samples: Vec<f64>,
}

/// Consecutive non-overlapping windows of `seconds`; the trailing remainder is discarded.
pub fn segment(rec: &Recording, seconds: f64) -> Vec<Window> {
    let width = (seconds * rec.fs).round() as usize;
    if width == 0 {
        return Vec::new();
    }
    rec.samples
        .chunks_exact(width)
        .enumerate()
        .map(|(index, chunk)| Window {
            index,
            start: index * width,
            samples: chunk.to_vec(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlatVerdict {
    Keep,
    Drop,
}

/// Drops a window iff its maximum equals its minimum exactly.
pub fn reject_flat(window: &[f64]) -> FlatVerdict {
    let (lo, hi) = min_max(window);
    if window.is_empty() || hi - lo == 0.0 {
        FlatVerdict::Drop
    } else {
        FlatVerdict::Keep
    }
}

/// Min-max scales a window to `[0, 1]` and frames it with `PAD` zeros on each side.
pub fn scale_and_pad(window: &[f64], origin: SegmentOrigin) -> Result<Segment> {
    let (lo, hi) = min_max(window);
    let range = hi - lo;
    if window.is_empty() || range == 0.0 || !range.is_finite() {
        return Err(MeaeError::Config(format!(
            "cannot scale window {} with zero range",
            origin.index
        )));
    }
    let mut data = Vec::with_capacity(window.len() + 2 * PAD);
    data.extend(std::iter::repeat_n(0.0, PAD));
    data.extend(window.iter().map(|&v| {
        if v == hi {
            1.0
        } else {
            (v - lo) / range
        }
    }));
    data.extend(std::iter::repeat_n(0.0, PAD));
    Ok(Segment {
        data,
        origin,
        scale: (lo, hi),
    })
}

/// Result of running the full preprocessing chain on one recording.
#[derive(Clone, Debug, Default)]
pub struct Preprocessed {
    pub segments: Vec<Segment>,
    /// Indices of windows dropped as flat.
    pub dropped: Vec<usize>,
    pub windows: usize,
}

pub fn preprocess(rec: &Recording) -> Result<Preprocessed> {
    let rec = resample(rec, TARGET_FS)?;
    let mut out = Preprocessed::default();
    for w in segment(&rec, SEGMENT_SECONDS) {
        out.windows += 1;
        match reject_flat(&w.samples) {
            FlatVerdict::Drop => out.dropped.push(w.index),
            FlatVerdict::Keep => out.segments.push(scale_and_pad(
                &w.samples,
                SegmentOrigin {
                    recording_id: rec.id.clone(),
                    index: w.index,
                    start: w.start,
                },
            )?),
        }
    }
    Ok(out)
}

fn parse_fs(line: &str) -> Option<f64> {
    let body = line.trim().trim_start_matches('#').trim();
    let value = body.strip_prefix("fs")?.trim_start().strip_prefix('=')?;
    value.trim().parse().ok()
}

/// Parses the CSV recording format: a `# fs=<Hz>` header, then one decimal sample per line.
pub fn parse_csv(text: &str, source: &str) -> Result<Recording> {
    let parse_err = |line: usize, msg: String| MeaeError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let fs = loop {
        match lines.next() {
            None => return Err(parse_err(1, "empty file".into())),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => {
                break parse_fs(l)
                    .ok_or_else(|| parse_err(i + 1, format!("expected '# fs=<Hz>' header, found {l:?}")))?
            }
        }
    };
    let mut samples = Vec::new();
    for (i, l) in lines {
        let t = l.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t
            .parse()
            .map_err(|_| parse_err(i + 1, format!("not a number: {t:?}")))?;
        if !v.is_finite() {
            return Err(parse_err(i + 1, format!("non-finite sample {t:?}")));
        }
        samples.push(v);
    }
    if samples.is_empty() {
        return Err(parse_err(1, "no samples after header".into()));
    }
    Recording::new(samples, fs)
}

pub fn load_csv(path: &Path) -> Result<Recording> {
    let text = fs::read_to_string(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(parse_csv(&text, &path.display().to_string())?.with_id(id))
}

pub fn format_csv(samples: &[f64], fs: f64) -> String {
    let mut out = String::with_capacity(samples.len() * 20 + 16);
    out.push_str(&format!("# fs={fs}\n"));
    for v in samples {
        out.push_str(&format!("{v}\n"));
    }
    out
}

pub const BINARY_MAGIC: &[u8; 4] = b"SIG1";

pub fn encode_binary(rec: &Recording) -> Vec<u8> {
    let (num, den) = if rec.fs.fract() == 0.0 {
        (rec.fs as u64, 1)
    } else {
        limit_denominator(rec.fs, 1_000_000)
    };
    let mut out = Vec::with_capacity(20 + 4 * rec.samples.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(num as u32).to_le_bytes());
    out.extend_from_slice(&(den as u32).to_le_bytes());
    out.extend_from_slice(&(rec.samples.len() as u64).to_le_bytes());
    for &v in &rec.samples {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8], source: &str) -> Result<Recording> {
    let err = |msg: &str| MeaeError::Parse {
        path: source.to_string(),
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 20 || &bytes[..4] != BINARY_MAGIC {
        return Err(err("missing SIG1 header"));
    }
    let num = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let den = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if den == 0 {
        return Err(err("zero sampling-rate denominator"));
    }
    let body = &bytes[20..];
    if body.len() != count * 4 {
        return Err(err(&format!("expected {count} samples, found {} bytes", body.len())));
    }
    let samples = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Recording::new(samples, num as f64 / den as f64)
}

/// Loads `.sig` binary recordings or CSV recordings (any other extension).
pub fn load_recording(path: &Path) -> Result<Recording> {
    if path.extension().is_some_and(|e| e == "sig") {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(decode_binary(&fs::read(path)?, &path.display().to_string())?.with_id(id))
    } else {
        load_csv(path)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
