//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The page can generate a synthetic scene, score any trace's heart rate
//! against the scene's anchors, and train a deliberately small model on a
//! downsampled excerpt while plotting what each encoder decodes.

use meae_core::losses::LossConfig;
use meae_core::model::{MeaeConfig, MeaeParams};
use meae_core::nn::{stack_batch, Tensor};
use meae_core::signal::min_max;
use meae_core::synth::{beats_for, generate_scene, BeatRule, SceneConfig, SyntheticScene, SMOOTH_WINDOW};
use meae_core::train::{TrainConfig, Trainer};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Scene {
    inner: SyntheticScene,
}

#[wasm_bindgen]
impl Scene {
    /// A 48 s scene; `noise_sd` and the three gains override the defaults.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise_sd: f64, pulse_gain: f64, wander_gain: f64, artifact_gain: f64) -> Result<Scene, JsError> {
        let cfg = SceneConfig {
            noise_sd,
            gains: [pulse_gain, wander_gain, artifact_gain],
            ..SceneConfig::default()
        };
        let inner = generate_scene(&cfg, seed as u64).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Scene { inner })
    }

    pub fn mixture(&self) -> Vec<f64> {
        self.inner.mixture.clone()
    }

    pub fn pulse(&self) -> Vec<f64> {
        self.inner.pulse.clone()
    }

    pub fn wander(&self) -> Vec<f64> {
        self.inner.wander.clone()
    }

    pub fn artifact(&self) -> Vec<f64> {
        self.inner.artifact.clone()
    }

    pub fn r_peaks(&self) -> Vec<u32> {
        self.inner.r_peaks.iter().map(|&r| r as u32).collect()
    }

    /// `[rmse_bpm, pearson_r, n_beats]` of `signal` against this scene's anchors.
    ///
    /// `upslope` picks beats by maximum slope (raw PPG), otherwise by maximum value.
    pub fn score(&self, signal: &[f64], upslope: bool) -> Result<Vec<f64>, JsError> {
        if signal.len() != self.inner.len() {
            return Err(JsError::new("signal length does not match the scene"));
        }
        let rule = if upslope { BeatRule::Upslope } else { BeatRule::Peak };
        let beats = beats_for(signal, &self.inner.r_peaks, rule);
        let m = meae_core::hr::score_beats(&self.inner.r_peaks, beats, self.inner.fs, SMOOTH_WINDOW)
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(vec![m.rmse, m.pearson_r, m.n_beats as f64])
    }
}

/// Samples per training excerpt after 4x decimation (about 24.6 s at 31.25 Hz).
const TOY_LEN: usize = 768;

/// Block-averages by 4 and min-max scales into a `[1, 1, TOY_LEN]` tensor.
fn excerpt(signal: &[f64], start: usize) -> Tensor {
    let mut x: Vec<f64> = (0..TOY_LEN)
        .map(|i| signal[start + 4 * i..start + 4 * i + 4].iter().sum::<f64>() / 4.0)
        .collect();
    let (lo, hi) = min_max(&x);
    let range = if hi > lo { hi - lo } else { 1.0 };
    for v in &mut x {
        *v = (*v - lo) / range;
    }
    Tensor::signal(&x)
}

#[wasm_bindgen]
pub struct ToyModel {
    trainer: Trainer,
    batch: Tensor,
    preview: Tensor,
}

#[wasm_bindgen]
impl ToyModel {
    /// A small model trained on excerpts of `count` fresh scenes; the first excerpt is the preview.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, encoders: u32, count: u32) -> Result<ToyModel, JsError> {
        let err = |e: meae_core::MeaeError| JsError::new(&e.to_string());
        let config = MeaeConfig {
            num_encoders: encoders.max(1) as usize,
            input_length: TOY_LEN,
            encoder_channels: vec![8, 8],
            encoding_channels: 2,
            decoder_group_width: 4,
            seed: seed as u64,
            ..MeaeConfig::default()
        };
        let mut items = Vec::new();
        for i in 0..count.max(1) {
            let scene = generate_scene(&SceneConfig::default(), seed as u64 * 1000 + i as u64).map_err(err)?;
            items.push(excerpt(&scene.mixture, 0));
            items.push(excerpt(&scene.mixture, scene.len() - 4 * TOY_LEN));
        }
        let refs: Vec<&Tensor> = items.iter().collect();
        let batch = stack_batch(&refs).map_err(err)?;
        let params = MeaeParams::init(&config).map_err(err)?;
        let train = TrainConfig {
            learning_rate: 3e-3,
            seed: seed as u64,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(params, train, LossConfig::default()).map_err(err)?;
        Ok(ToyModel {
            trainer,
            preview: items[0].clone(),
            batch,
        })
    }

    /// One full-batch update; returns `[recon, z_reg, mixing, zero_recon, total]`.
    pub fn step(&mut self) -> Result<Vec<f64>, JsError> {
        let l = self.trainer.step(&self.batch).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(vec![l.recon, l.z_reg, l.mixing, l.zero_recon, l.total])
    }

    pub fn steps_taken(&self) -> u32 {
        self.trainer.optimizer.step as u32
    }

    pub fn input(&self) -> Vec<f64> {
        self.preview.data().to_vec()
    }

    /// What encoder `k` alone decodes for the preview excerpt.
    pub fn source(&self, k: u32) -> Result<Vec<f64>, JsError> {
        self.trainer
            .params
            .infer_source(&self.preview, k as usize)
            .map(|t| t.into_data())
            .map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn reconstruction(&self) -> Result<Vec<f64>, JsError> {
        self.trainer
            .params
            .reconstruct(&self.preview)
            .map(|(t, _)| t.into_data())
            .map_err(|e| JsError::new(&e.to_string()))
    }
}
