//! Heart-rate evaluation anchored to ECG R-peaks.
//!
//! Every test signal is reduced to at most one beat per R-R interval, so heart
//! rates from different signals pair up by interval index without any
//! nearest-neighbour matching.

use std::f64::consts::PI;

use crate::error::{MeaeError, Result};

/// Two-moving-average QRS detector settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QrsDetector {
    pub low_hz: f64,
    pub high_hz: f64,
    pub qrs_window_s: f64,
    pub beat_window_s: f64,
    pub refractory_s: f64,
    /// The beat-window threshold is raised by this fraction of the mean energy,
    /// so filtered noise between widely spaced beats does not form blocks.
    pub offset_fraction: f64,
}

impl Default for QrsDetector {
    fn default() -> Self {
        Self {
            low_hz: 8.0,
            high_hz: 20.0,
            qrs_window_s: 0.12,
            beat_window_s: 0.6,
            refractory_s: 0.3,
            offset_fraction: 0.08,
        }
    }
}

/// A recursive section `y[n] = Σ b[k]x[n-k] - Σ a[k]y[n-k]` with `a[0] = 1`.
#[derive(Clone, Debug)]
struct Section {
    b: Vec<f64>,
    a: Vec<f64>,
}

impl Section {
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        for n in 0..x.len() {
            let mut acc = 0.0;
            for (k, &bk) in self.b.iter().enumerate() {
                if n >= k {
                    acc += bk * x[n - k];
                }
            }
            for (k, &ak) in self.a.iter().enumerate().skip(1) {
                if n >= k {
                    acc -= ak * y[n - k];
                }
            }
            y[n] = acc;
        }
        y
    }
}

/// Third-order Butterworth via the bilinear transform, split into a
/// first-order section and a biquad.
fn butterworth3(cutoff_hz: f64, fs: f64, highpass: bool) -> [Section; 2] {
    let k = 2.0 * fs;
    let wc = k * (PI * cutoff_hz / fs).tan();
    let d1 = k + wc;
    let d2 = k * k + wc * k + wc * wc;
    let a1 = vec![1.0, (wc - k) / d1];
    let a2 = vec![1.0, 2.0 * (wc * wc - k * k) / d2, (k * k - wc * k + wc * wc) / d2];
    if highpass {
        [
            Section { b: vec![k / d1, -k / d1], a: a1 },
            Section {
                b: vec![k * k / d2, -2.0 * k * k / d2, k * k / d2],
                a: a2,
            },
        ]
    } else {
        [
            Section { b: vec![wc / d1, wc / d1], a: a1 },
            Section {
                b: vec![wc * wc / d2, 2.0 * wc * wc / d2, wc * wc / d2],
                a: a2,
            },
        ]
    }
}

/// Zero-phase filtering: forward then reverse pass over an odd-reflected extension.
fn filtfilt(sections: &[Section], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (n - 1).min(60);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let mut y = ext;
    for s in sections {
        y = s.run(&y);
    }
    y.reverse();
    for s in sections {
        y = s.run(&y);
    }
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Centered moving average with the window truncated at the signal edges.
fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + x[i];
    }
    let left = width / 2;
    let right = width - 1 - left;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(left);
            let hi = (i + right).min(n - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect()
}

impl QrsDetector {
    /// Detects R-peak sample indices in an ECG sampled at `fs`.
    pub fn detect(&self, ecg: &[f64], fs: f64) -> Vec<usize> {
        let w1 = (self.qrs_window_s * fs).round().max(1.0) as usize;
        let w2 = (self.beat_window_s * fs).round().max(1.0) as usize;
        if ecg.len() < 2 * w2 {
            return Vec::new();
        }
        let mut sections = Vec::with_capacity(4);
        sections.extend(butterworth3(self.low_hz, fs, true));
        sections.extend(butterworth3(self.high_hz, fs, false));
        let filtered = filtfilt(&sections, ecg);
        let energy: Vec<f64> = filtered.iter().map(|v| v * v).collect();
        let ma_qrs = moving_average(&energy, w1);
        let offset = self.offset_fraction * energy.iter().sum::<f64>() / energy.len() as f64;
        let ma_beat: Vec<f64> = moving_average(&energy, w2).into_iter().map(|v| v + offset).collect();

        let mut peaks: Vec<usize> = Vec::new();
        let mut i = 0;
        while i < energy.len() {
            if ma_qrs[i] > ma_beat[i] {
                let start = i;
                while i < energy.len() && ma_qrs[i] > ma_beat[i] {
                    i += 1;
                }
                if i - start >= w1 {
                    peaks.push(argmax(&energy[start..i]) + start);
                }
            } else {
                i += 1;
            }
        }

        let refractory = (self.refractory_s * fs).round() as usize;
        let mut merged: Vec<usize> = Vec::with_capacity(peaks.len());
        for p in peaks {
            match merged.last_mut() {
                Some(last) if p - *last < refractory => {
                    if energy[p] > energy[*last] {
                        *last = p;
                    }
                }
                _ => merged.push(p),
            }
        }
        merged
    }
}

/// R-peaks with the default two-moving-average settings.
pub fn detect_r_peaks(ecg: &[f64], fs: f64) -> Vec<usize> {
    QrsDetector::default().detect(ecg, fs)
}

/// Index of the first maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// One detected beat per R-R interval; `interval` indexes the starting R-peak.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Beat {
    pub sample: usize,
    pub interval: usize,
}

fn per_interval(
    signal: &[f64],
    r_peaks: &[usize],
    pick: impl Fn(&[f64]) -> Option<usize>,
) -> Vec<Beat> {
    r_peaks
        .windows(2)
        .enumerate()
        .filter_map(|(interval, w)| {
            let (lo, hi) = (w[0], w[1]);
            if hi < lo + 2 || hi > signal.len() {
                return None;
            }
            pick(&signal[lo..hi]).map(|off| Beat {
                sample: lo + off,
                interval,
            })
        })
        .collect()
}

/// Maximum forward difference within each R-R interval (earliest on ties).
pub fn detect_ppg_beats(ppg: &[f64], r_peaks: &[usize]) -> Vec<Beat> {
    per_interval(ppg, r_peaks, |seg| {
        let diffs: Vec<f64> = seg.windows(2).map(|p| p[1] - p[0]).collect();
        Some(argmax(&diffs))
    })
}

/// Maximum value within each R-R interval (earliest on ties).
pub fn detect_source_beats(source: &[f64], r_peaks: &[usize]) -> Vec<Beat> {
    per_interval(source, r_peaks, |seg| Some(argmax(seg)))
}

/// The reference beats: each R-peak except the last starts its own interval.
pub fn reference_beats(r_peaks: &[usize]) -> Vec<Beat> {
    r_peaks
        .iter()
        .enumerate()
        .map(|(interval, &sample)| Beat { sample, interval })
        .collect()
}

pub const HR_MIN_BPM: f64 = 20.0;
pub const HR_MAX_BPM: f64 = 300.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BeatSeries {
    pub beats: Vec<Beat>,
    pub fs: f64,
    /// `hr[i]` is the rate between `beats[i]` and `beats[i + 1]`.
    pub hr: Vec<f64>,
}

impl BeatSeries {
    pub fn new(beats: Vec<Beat>, fs: f64) -> Result<Self> {
        if beats.windows(2).any(|w| w[1].sample <= w[0].sample || w[1].interval <= w[0].interval) {
            return Err(MeaeError::Config("beat times must be strictly increasing".into()));
        }
        let hr = beats
            .windows(2)
            .map(|w| 60.0 * fs / (w[1].sample - w[0].sample) as f64)
            .collect();
        Ok(Self { beats, fs, hr })
    }

    pub fn beat_times(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.sample).collect()
    }

    /// Heart rates keyed by starting interval, restricted to beats in adjacent intervals.
    pub fn paired_rates(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.beats
            .windows(2)
            .zip(&self.hr)
            .filter(|(w, _)| w[1].interval == w[0].interval + 1)
            .map(|(w, &hr)| (w[0].interval, hr))
    }

    /// Replaces `hr` with its running median.
    pub fn smoothed(mut self, window: usize) -> Self {
        self.hr = median_smooth(&self.hr, window);
        self
    }

    /// Number of rates outside the physiological range `(20, 300)` BPM.
    pub fn flagged(&self) -> usize {
        self.hr.iter().filter(|&&h| !(h > HR_MIN_BPM && h < HR_MAX_BPM)).count()
    }
}

/// Centered running median.
///
/// Near the edges the window shrinks symmetrically; the outermost samples use
/// a two-element window with their inner neighbour and take its mean.
pub fn median_smooth(hr: &[f64], window: usize) -> Vec<f64> {
    let n = hr.len();
    let half = window / 2;
    let mut buf = Vec::with_capacity(window.max(2));
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            buf.clear();
            if h == 0 && half > 0 && n >= 2 {
                let inner = if i == 0 { 1 } else { i - 1 };
                return 0.5 * (hr[i] + hr[inner]);
            }
            buf.extend_from_slice(&hr[i - h..=i + h]);
            buf.sort_by(f64::total_cmp);
            buf[h]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HrMetrics {
    pub rmse: f64,
    pub pearson_r: f64,
    pub n_beats: usize,
}

/// Pearson correlation; `NaN` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64).sqrt()
}

/// Paired `(reference, test)` heart rates over shared intervals.
pub fn paired_rates(reference: &BeatSeries, test: &BeatSeries) -> (Vec<f64>, Vec<f64>) {
    let test_rates: std::collections::HashMap<usize, f64> = test.paired_rates().collect();
    reference
        .paired_rates()
        .filter_map(|(k, r)| test_rates.get(&k).map(|&t| (r, t)))
        .unzip()
}

pub fn align_and_score(reference: &BeatSeries, test: &BeatSeries) -> Result<HrMetrics> {
    let (r, t) = paired_rates(reference, test);
    if r.len() < 3 {
        return Err(MeaeError::InsufficientData(format!(
            "{} paired beats, need at least 3",
            r.len()
        )));
    }
    Ok(HrMetrics {
        rmse: rmse(&r, &t),
        pearson_r: pearson(&r, &t),
        n_beats: r.len(),
    })
}

/// Scores test beats against the R-peak reference after median smoothing both rate series.
pub fn score_beats(r_peaks: &[usize], test: Vec<Beat>, fs: f64, smooth_window: usize) -> Result<HrMetrics> {
    let reference = BeatSeries::new(reference_beats(r_peaks), fs)?.smoothed(smooth_window);
    let test = BeatSeries::new(test, fs)?.smoothed(smooth_window);
    align_and_score(&reference, &test)
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub recording_id: String,
    pub method: String,
    /// Encoder or component index, `-1` for the raw signal.
    pub encoder: i64,
    pub metrics: HrMetrics,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("recording_id,method,encoder,rmse_bpm,pearson_r,n_beats\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.recording_id, r.method, r.encoder, r.metrics.rmse, r.metrics.pearson_r, r.metrics.n_beats
        ));
    }
    out
}

/// Per-beat `(mean, test - reference)` pairs.
pub fn bland_altman(reference: &BeatSeries, test: &BeatSeries) -> Vec<(f64, f64)> {
    let (r, t) = paired_rates(reference, test);
    r.iter().zip(&t).map(|(&a, &b)| (0.5 * (a + b), b - a)).collect()
}

pub fn bland_altman_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("mean_hr,hr_difference\n");
    for (m, d) in pairs {
        out.push_str(&format!("{m},{d}\n"));
    }
    out
}
