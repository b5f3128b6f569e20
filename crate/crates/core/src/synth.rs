//! Synthetic single-channel mixtures with known sources.
//!
//! A scene sums an asymmetric pulse train, a slow respiratory-band wander and
//! bursty random-walk motion artifacts, adds white noise and min-max scales the
//! result. Pulse peak positions are recorded as ground truth and shifted back by
//! a fixed transit delay to act as ECG R-peak anchors.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{MeaeError, Result};
use crate::hr::{detect_ppg_beats, detect_source_beats, pearson, score_beats, Beat, HrMetrics};
use crate::signal::min_max;

pub const FS: f64 = 125.0;
pub const PULSE_RISE_S: f64 = 0.08;
pub const PULSE_DECAY_S: f64 = 0.30;
pub const HR_FLOOR_BPM: f64 = 30.0;
pub const HR_CEIL_BPM: f64 = 200.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub seed: u64,
    pub duration_s: f64,
    /// Piecewise-linear BPM breakpoints spread evenly over the scene; empty draws one at random.
    pub hr_profile: Vec<f64>,
    /// Bounds for randomly drawn heart-rate profiles.
    pub hr_range: [f64; 2],
    /// Gains for pulse, wander and artifact.
    pub gains: [f64; 3],
    pub noise_sd: f64,
    pub wander_hz: [f64; 2],
    pub burst_rate_per_min: f64,
    pub burst_len_s: f64,
    pub transit_s: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 48.0,
            hr_profile: Vec::new(),
            hr_range: [55.0, 110.0],
            gains: [1.0, 0.6, 0.8],
            noise_sd: 0.05,
            wander_hz: [0.15, 0.4],
            burst_rate_per_min: 4.0,
            burst_len_s: 3.0,
            transit_s: 0.2,
        }
    }
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MeaeError::Config(format!("scene config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MeaeError::Config(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        let [lo, hi] = self.hr_range;
        if !(HR_FLOOR_BPM..=HR_CEIL_BPM).contains(&lo) || !(lo..=HR_CEIL_BPM).contains(&hi) {
            return bad(format!("hr_range must lie within [30, 200] BPM, got [{lo}, {hi}]"));
        }
        if let Some(&v) = self.hr_profile.iter().find(|v| !(HR_FLOOR_BPM..=HR_CEIL_BPM).contains(*v)) {
            return bad(format!("hr_profile value {v} is outside [30, 200] BPM"));
        }
        if self.noise_sd < 0.0 || self.gains.iter().any(|g| !g.is_finite()) {
            return bad("noise_sd must be non-negative and gains finite".into());
        }
        let [wl, wh] = self.wander_hz;
        if !(wl > 0.0 && wh >= wl) {
            return bad(format!("wander_hz must be an increasing positive range, got [{wl}, {wh}]"));
        }
        if self.burst_rate_per_min < 0.0 || self.burst_len_s < 0.0 || self.transit_s < 0.0 {
            return bad("burst and transit settings must be non-negative".into());
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * FS).round() as usize
    }
}

/// Heart rate over time as evenly spaced linear breakpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct HrProfile(pub Vec<f64>);

impl HrProfile {
    pub fn constant(bpm: f64) -> Self {
        Self(vec![bpm])
    }

    pub fn ramp(from: f64, to: f64) -> Self {
        Self(vec![from, to])
    }

    /// Rate at fraction `u ∈ [0, 1]` of the scene.
    pub fn at(&self, u: f64) -> f64 {
        match self.0.len() {
            0 => 60.0,
            1 => self.0[0],
            n => {
                let pos = u.clamp(0.0, 1.0) * (n - 1) as f64;
                let i = (pos.floor() as usize).min(n - 2);
                let f = pos - i as f64;
                self.0[i] * (1.0 - f) + self.0[i + 1] * f
            }
        }
    }
}

/// Unit-height pulse: half-cosine rise then half-cosine decay, peaking at `t = 0`.
pub fn pulse_kernel(t: f64) -> f64 {
    if t <= -PULSE_RISE_S || t >= PULSE_DECAY_S {
        0.0
    } else if t <= 0.0 {
        0.5 * (1.0 + (PI * t / PULSE_RISE_S).cos())
    } else {
        0.5 * (1.0 + (PI * t / PULSE_DECAY_S).cos())
    }
}

/// Places one pulse each time the integrated rate completes a cycle.
///
/// `phase` in `[0, 1)` is the cycle fraction already elapsed at `t = 0`.
pub fn gen_pulse_train(profile: &HrProfile, fs: f64, duration_s: f64, phase: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    if let Some(&v) = profile.0.iter().find(|v| !(HR_FLOOR_BPM..=HR_CEIL_BPM).contains(*v)) {
        return Err(MeaeError::Config(format!("heart rate {v} BPM outside [30, 200]")));
    }
    let n = (duration_s * fs).round() as usize;
    let mut beats = Vec::new();
    let mut cycles = phase;
    for i in 0..n {
        let rate = profile.at(i as f64 / n.max(2).saturating_sub(1) as f64) / 60.0;
        cycles += rate / fs;
        if cycles >= 1.0 {
            cycles -= 1.0;
            beats.push(i);
        }
    }
    let mut source = vec![0.0; n];
    let lo = (PULSE_RISE_S * fs).ceil() as usize;
    let hi = (PULSE_DECAY_S * fs).ceil() as usize;
    for &b in &beats {
        for j in b.saturating_sub(lo)..(b + hi).min(n) {
            source[j] += pulse_kernel((j as f64 - b as f64) / fs);
        }
    }
    Ok((source, beats))
}

/// Sinusoid at `freq` with a slow random walk on its phase.
pub fn gen_wander(freq: f64, amplitude: f64, fs: f64, duration_s: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = (duration_s * fs).round() as usize;
    if amplitude == 0.0 {
        return vec![0.0; n];
    }
    let jitter = Normal::new(0.0, 0.002).expect("valid sd");
    let mut phase = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|_| {
            let v = amplitude * phase.sin();
            phase += 2.0 * PI * freq / fs + jitter.sample(rng);
            v
        })
        .collect()
}

/// Random-walk bursts starting at Poisson-distributed times, Hann tapered, zero elsewhere.
pub fn gen_artifact(
    burst_rate_per_min: f64,
    burst_len_s: f64,
    amplitude: f64,
    fs: f64,
    duration_s: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let n = (duration_s * fs).round() as usize;
    let mut out = vec![0.0; n];
    let width = (burst_len_s * fs).round() as usize;
    let expected = burst_rate_per_min * duration_s / 60.0;
    if amplitude == 0.0 || expected <= 0.0 || width < 3 {
        return out;
    }
    let count = Poisson::new(expected).expect("positive rate").sample(rng) as usize;
    for _ in 0..count {
        // bursts may start before the scene so edges are covered as often as the middle
        let start = rng.random_range(-(width as f64)..n as f64).floor() as i64;
        let mut level = 0.0;
        let walk: Vec<f64> = (0..width)
            .map(|_| {
                level += rng.sample::<f64, _>(rand_distr::StandardNormal);
                level
            })
            .collect();
        let mean = walk.iter().sum::<f64>() / width as f64;
        let shaped: Vec<f64> = walk
            .iter()
            .enumerate()
            .map(|(k, v)| (v - mean) * 0.5 * (1.0 - (2.0 * PI * k as f64 / (width - 1) as f64).cos()))
            .collect();
        let peak = shaped.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            continue;
        }
        for (k, v) in shaped.iter().enumerate() {
            let idx = start + k as i64;
            if (0..n as i64).contains(&idx) {
                out[idx as usize] += amplitude * v / peak;
            }
        }
    }
    out
}

/// Simple ECG stand-in: narrow Gaussian QRS complexes with a broader T wave.
pub fn gen_ecg(r_peaks: &[usize], len: usize, fs: f64, noise_sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let reach = (0.5 * fs) as usize;
    for &r in r_peaks {
        for j in r.saturating_sub(reach)..(r + reach).min(len) {
            let t = (j as f64 - r as f64) / fs;
            let q = t / 0.012;
            let tw = (t - 0.25) / 0.05;
            out[j] += (-0.5 * q * q).exp() + 0.25 * (-0.5 * tw * tw).exp();
        }
    }
    if noise_sd > 0.0 {
        let noise = Normal::new(0.0, noise_sd).expect("valid sd");
        for v in &mut out {
            *v += noise.sample(rng);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub seed: u64,
    pub fs: f64,
    pub pulse: Vec<f64>,
    pub wander: Vec<f64>,
    pub artifact: Vec<f64>,
    pub mixture: Vec<f64>,
    /// Sample indices of pulse peaks.
    pub beats: Vec<usize>,
    /// Pulse peaks shifted back by the transit delay; beats too early to shift are left out.
    pub r_peaks: Vec<usize>,
}

impl SyntheticScene {
    pub fn sources(&self) -> [(&'static str, &[f64]); 3] {
        [
            ("pulse", &self.pulse),
            ("wander", &self.wander),
            ("artifact", &self.artifact),
        ]
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

fn random_profile(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> HrProfile {
    let [lo, hi] = cfg.hr_range;
    let mut bpm = rng.random_range(lo..=hi);
    let points = (0..3)
        .map(|_| {
            let v = bpm;
            bpm = (bpm + rng.random_range(-8.0..=8.0)).clamp(lo, hi);
            v
        })
        .collect();
    HrProfile(points)
}

/// Sum of gained sources plus white noise, min-max scaled to `[0, 1]`.
///
/// A constant sum stays unscaled so the flat-window filter downstream can reject it.
pub fn mix(sources: [&[f64]; 3], gains: [f64; 3], noise_sd: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = sources[0].len();
    let noise = (noise_sd > 0.0).then(|| Normal::new(0.0, noise_sd).expect("valid sd"));
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let clean: f64 = sources.iter().zip(gains).map(|(s, g)| g * s[i]).sum();
            clean + noise.map_or(0.0, |d| d.sample(rng))
        })
        .collect();
    let (lo, hi) = min_max(&out);
    if hi > lo {
        for v in &mut out {
            *v = (*v - lo) / (hi - lo);
        }
    }
    out
}

/// Generates one scene; `seed` overrides the config seed so datasets can enumerate scenes.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = if cfg.hr_profile.is_empty() {
        random_profile(cfg, &mut rng)
    } else {
        HrProfile(cfg.hr_profile.clone())
    };
    let phase = rng.random_range(0.0..1.0);
    let (pulse, beats) = gen_pulse_train(&profile, FS, cfg.duration_s, phase)?;
    let freq = rng.random_range(cfg.wander_hz[0]..=cfg.wander_hz[1]);
    let wander = gen_wander(freq, 1.0, FS, cfg.duration_s, &mut rng);
    let artifact = gen_artifact(cfg.burst_rate_per_min, cfg.burst_len_s, 1.0, FS, cfg.duration_s, &mut rng);
    let mixture = mix([&pulse, &wander, &artifact], cfg.gains, cfg.noise_sd, &mut rng);
    let transit = (cfg.transit_s * FS).round() as usize;
    let r_peaks = beats.iter().filter(|&&b| b >= transit).map(|&b| b - transit).collect();
    Ok(SyntheticScene {
        config: cfg.clone(),
        seed,
        fs: FS,
        pulse,
        wander,
        artifact,
        mixture,
        beats,
        r_peaks,
    })
}

/// `count` scenes with seeds `base_seed, base_seed + 1, …`.
pub fn generate_scenes(cfg: &SceneConfig, base_seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count as u64).map(|i| generate_scene(cfg, base_seed.wrapping_add(i))).collect()
}

/// How beats are picked from a signal within each anchor interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BeatRule {
    /// Maximum value, used for separated sources.
    Peak,
    /// Maximum upslope, used for raw PPG.
    Upslope,
}

pub fn beats_for(signal: &[f64], r_peaks: &[usize], rule: BeatRule) -> Vec<Beat> {
    match rule {
        BeatRule::Peak => detect_source_beats(signal, r_peaks),
        BeatRule::Upslope => detect_ppg_beats(signal, r_peaks),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationScore {
    /// Absolute Pearson correlation with pulse, wander and artifact (0 against a constant source).
    pub correlations: [f64; 3],
    pub hr: HrMetrics,
}

impl SeparationScore {
    pub fn pulse_correlation(&self) -> f64 {
        self.correlations[0]
    }
}

pub const SMOOTH_WINDOW: usize = 5;

/// Heart-rate agreement of a signal with the scene's ground-truth anchors.
pub fn score_hr(signal: &[f64], scene: &SyntheticScene, rule: BeatRule) -> Result<HrMetrics> {
    if signal.len() != scene.len() {
        return Err(MeaeError::Shape {
            op: "score_hr",
            lhs: vec![signal.len()],
            rhs: vec![scene.len()],
        });
    }
    score_beats(&scene.r_peaks, beats_for(signal, &scene.r_peaks, rule), scene.fs, SMOOTH_WINDOW)
}

pub fn score_separation(estimate: &[f64], scene: &SyntheticScene) -> Result<SeparationScore> {
    let hr = score_hr(estimate, scene, BeatRule::Peak)?;
    let corr = |s: &[f64]| {
        let r = pearson(estimate, s).abs();
        if r.is_nan() {
            0.0
        } else {
            r
        }
    };
    Ok(SeparationScore {
        correlations: [corr(&scene.pulse), corr(&scene.wander), corr(&scene.artifact)],
        hr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rates_space_beats_evenly() {
        let (_, beats) = gen_pulse_train(&HrProfile::constant(60.0), FS, 60.0, 0.0).unwrap();
        assert!(beats.windows(2).all(|w| (124..=126).contains(&(w[1] - w[0]))));
        let (_, beats) = gen_pulse_train(&HrProfile::constant(120.0), FS, 60.0, 0.3).unwrap();
        assert!(beats.windows(2).all(|w| (62..=63).contains(&(w[1] - w[0]))));
    }

    #[test]
    fn ramp_beat_count_matches_integrated_rate() {
        // 48 s at a mean of 75 BPM
        let (_, beats) = gen_pulse_train(&HrProfile::ramp(60.0, 90.0), FS, 48.0, 0.0).unwrap();
        assert!((59..=61).contains(&beats.len()), "{} beats", beats.len());
    }

    #[test]
    fn rates_outside_bounds_are_rejected() {
        assert!(gen_pulse_train(&HrProfile::constant(25.0), FS, 10.0, 0.0).is_err());
        assert!(gen_pulse_train(&HrProfile::ramp(60.0, 220.0), FS, 10.0, 0.0).is_err());
    }

    #[test]
    fn beats_sit_on_pulse_maxima() {
        let (pulse, beats) = gen_pulse_train(&HrProfile::ramp(50.0, 150.0), FS, 30.0, 0.5).unwrap();
        for &b in &beats {
            let lo = b.saturating_sub(2);
            let hi = (b + 3).min(pulse.len());
            let local = pulse[lo..hi].iter().cloned().fold(f64::MIN, f64::max);
            assert!(pulse[b] >= local - 1e-12);
        }
    }

    #[test]
    fn zero_amplitude_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(gen_wander(0.25, 0.0, FS, 10.0, &mut rng).iter().all(|&v| v == 0.0));
        assert!(gen_artifact(0.0, 3.0, 1.0, FS, 10.0, &mut rng).iter().all(|&v| v == 0.0));
        assert!(gen_artifact(6.0, 3.0, 0.0, FS, 10.0, &mut rng).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_pulse_mix_is_scaled_pulse() {
        let (pulse, _) = gen_pulse_train(&HrProfile::constant(70.0), FS, 10.0, 0.2).unwrap();
        let zeros = vec![0.0; pulse.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mix([&pulse, &zeros, &zeros], [1.0, 0.0, 0.0], 0.0, &mut rng);
        let (lo, hi) = min_max(&pulse);
        for (a, b) in m.iter().zip(&pulse) {
            assert!((a - (b - lo) / (hi - lo)).abs() < 1e-12);
        }
        let flat = mix([&pulse, &zeros, &zeros], [0.0; 3], 0.0, &mut rng);
        assert_eq!(crate::signal::reject_flat(&flat), crate::signal::FlatVerdict::Drop);
    }

    #[test]
    fn scenes_are_reproducible() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 9).unwrap();
        let b = generate_scene(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mixture, generate_scene(&cfg, 10).unwrap().mixture);
        assert_eq!(a.len(), 6000);
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = SceneConfig {
            hr_profile: vec![60.0, 80.0],
            ..SceneConfig::default()
        };
        assert_eq!(SceneConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(SceneConfig::from_toml("noise_sd = 0.1").unwrap().noise_sd, 0.1);
        assert!(SceneConfig::from_toml("bogus = 1").is_err());
        assert!(SceneConfig::from_toml("hr_profile = [250.0]").is_err());
    }

    #[test]
    fn pulse_itself_scores_perfectly() {
        let scene = generate_scene(&SceneConfig::default(), 3).unwrap();
        let s = score_separation(&scene.pulse, &scene).unwrap();
        assert!((s.correlations[0] - 1.0).abs() < 1e-12);
        assert_eq!(s.hr.rmse, 0.0);
    }
}
