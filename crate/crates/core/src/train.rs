//! Training loop, optimizer state and epoch bookkeeping.

use std::fs::OpenOptions;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{layout, named, params_from, save_checkpoint, Precision, Reader, Writer};
use crate::error::{MeaeError, Result};
use crate::hr::{detect_source_beats, score_beats};
use crate::losses::{record_objective, LossBreakdown, LossConfig};
use crate::model::MeaeParams;
use crate::nn::{stack_batch, Tape, Tensor};
use crate::signal::{preprocess, write_atomic, Recording, CORE_LEN, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    /// Where checkpoints and the epoch log go; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            eval_every: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(MeaeError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MeaeError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(MeaeError::Config("optimizer moments must lie in [0, 1) and epsilon be positive".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &MeaeParams, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// A held-out segment with R-peak anchors expressed in core coordinates.
#[derive(Clone, Debug)]
pub struct ValidationItem {
    pub input: Tensor,
    pub r_peaks: Vec<usize>,
    /// The unpadded part of the input that `r_peaks` index into.
    pub core: Range<usize>,
}

impl ValidationItem {
    /// Preprocesses `rec` and keeps, for each retained segment, the R-peaks (125 Hz
    /// sample indices) that fall inside it, shifted to segment coordinates.
    pub fn from_recording(rec: &Recording, r_peaks: &[usize]) -> Result<Vec<Self>> {
        let pre = preprocess(rec)?;
        Ok(pre
            .segments
            .iter()
            .map(|seg| {
                let start = seg.origin.start;
                let local = r_peaks
                    .iter()
                    .filter(|&&r| r >= start && r < start + CORE_LEN)
                    .map(|&r| r - start)
                    .collect();
                Self {
                    input: seg.to_tensor(),
                    r_peaks: local,
                    core: PAD..PAD + CORE_LEN,
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Mean HR RMSE per encoder; `NaN` where no item could be scored.
    pub val_rmse: Option<Vec<f64>>,
    pub checkpoint: Option<PathBuf>,
}

impl EpochReport {
    /// `epoch,recon,z_reg,mixing,zero_recon,total` then one RMSE column per encoder.
    pub fn log_line(&self, num_encoders: usize) -> String {
        let l = &self.loss;
        let mut line = format!(
            "{},{},{},{},{},{}",
            self.epoch, l.recon, l.z_reg, l.mixing, l.zero_recon, l.total
        );
        for n in 0..num_encoders {
            line.push(',');
            if let Some(r) = &self.val_rmse {
                line.push_str(&r[n].to_string());
            }
        }
        line
    }
}

pub const LOG_FILE: &str = "epochs.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.meae")
}

pub fn resume_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.state")
}

/// Mean per-encoder HR RMSE of the decoded sources over the validation items.
pub fn validate_sources(params: &MeaeParams, items: &[ValidationItem], fs: f64, smooth_window: usize) -> Result<Vec<f64>> {
    let n = params.config.num_encoders;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for item in items {
        for (enc, (sum, count)) in sums.iter_mut().zip(&mut counts).enumerate() {
            let source = params.infer_source(&item.input, enc)?;
            let core = &source.data()[item.core.clone()];
            let beats = detect_source_beats(core, &item.r_peaks);
            if let Ok(m) = score_beats(&item.r_peaks, beats, fs, smooth_window) {
                *sum += m.rmse;
                *count += 1;
            }
        }
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect())
}

pub struct Trainer {
    pub params: MeaeParams,
    pub optimizer: Adam,
    pub train_cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub epochs_done: usize,
    /// Sampling rate and smoothing window for validation scoring.
    pub fs: f64,
    pub smooth_window: usize,
}

impl Trainer {
    pub fn new(params: MeaeParams, train_cfg: TrainConfig, loss_cfg: LossConfig) -> Result<Self> {
        train_cfg.validate()?;
        loss_cfg.validate()?;
        let optimizer = Adam::new(&params, &train_cfg);
        Ok(Self {
            params,
            optimizer,
            train_cfg,
            loss_cfg,
            epochs_done: 0,
            fs: crate::signal::TARGET_FS,
            smooth_window: 5,
        })
    }

    /// Continues from a saved state; the optimizer settings in the state win over `train_cfg`.
    pub fn resume(state: ResumeState, train_cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(state.params, train_cfg, state.loss_cfg)?;
        t.optimizer = state.optimizer;
        t.epochs_done = state.epochs_done;
        Ok(t)
    }

    pub fn state(&self) -> ResumeState {
        ResumeState {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            loss_cfg: self.loss_cfg.clone(),
            epochs_done: self.epochs_done,
        }
    }

    /// One forward/backward pass and parameter update on `batch`.
    pub fn step(&mut self, batch: &Tensor) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let vars = record_objective(&self.params, &mut tape, &bound, batch, &self.loss_cfg)?;
        let loss = vars.breakdown(&tape);
        for (name, v) in [
            ("recon", loss.recon),
            ("z_reg", loss.z_reg),
            ("mixing", loss.mixing),
            ("zero_recon", loss.zero_recon),
            ("total", loss.total),
        ] {
            if !v.is_finite() {
                return Err(MeaeError::NonFinite(format!("{name} loss at step {}", self.optimizer.step + 1)));
            }
        }
        let mut grads = tape.backward(vars.total)?;
        let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
        for (g, name) in grads.iter().zip(self.params.names()) {
            g.check_finite(&format!("gradient of {name}"))?;
        }
        self.optimizer.update(self.params.tensors_mut(), &grads);
        Ok(loss)
    }

    pub fn run_epoch(&mut self, data: &[Tensor], validation: &[ValidationItem]) -> Result<EpochReport> {
        if data.is_empty() {
            return Err(MeaeError::InsufficientData("training set is empty".into()));
        }
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.train_cfg.seed.wrapping_add(epoch as u64)));

        let mut acc = LossBreakdown::default();
        for chunk in order.chunks(self.train_cfg.batch_size) {
            let items: Vec<&Tensor> = chunk.iter().map(|&i| &data[i]).collect();
            let l = self.step(&stack_batch(&items)?)?;
            let w = chunk.len() as f64 / data.len() as f64;
            acc.recon += w * l.recon;
            acc.z_reg += w * l.z_reg;
            acc.mixing += w * l.mixing;
            acc.zero_recon += w * l.zero_recon;
            acc.total += w * l.total;
        }
        self.epochs_done = epoch;

        let every = self.train_cfg.eval_every;
        let val_rmse = if every > 0 && epoch % every == 0 && !validation.is_empty() {
            Some(validate_sources(&self.params, validation, self.fs, self.smooth_window)?)
        } else {
            None
        };

        let checkpoint = match &self.train_cfg.checkpoint_dir {
            Some(dir) => Some(self.write_epoch(dir, epoch)?),
            None => None,
        };
        let report = EpochReport {
            epoch,
            loss: acc,
            val_rmse,
            checkpoint,
        };
        if let Some(dir) = &self.train_cfg.checkpoint_dir {
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
            writeln!(f, "{}", report.log_line(self.params.config.num_encoders))?;
        }
        log::info!(
            "epoch {epoch}: total {:.6} recon {:.6} val {:?}",
            report.loss.total,
            report.loss.recon,
            report.val_rmse
        );
        Ok(report)
    }

    fn write_epoch(&self, dir: &Path, epoch: usize) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(checkpoint_name(epoch));
        save_checkpoint(&self.params, &path)?;
        write_atomic(&dir.join(resume_name(epoch)), &self.state().encode())?;
        Ok(path)
    }

    /// Runs the remaining epochs of the budget.
    pub fn train(&mut self, data: &[Tensor], validation: &[ValidationItem]) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while self.epochs_done < self.train_cfg.epochs {
            reports.push(self.run_epoch(data, validation)?);
        }
        Ok(reports)
    }
}

/// `(epoch, encoder)` with the lowest validation RMSE; ties go to the earlier epoch, then the lower encoder.
pub fn select_best_epoch(reports: &[EpochReport]) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for r in reports {
        for (enc, &v) in r.val_rmse.iter().flatten().enumerate() {
            if v.is_finite() && best.is_none_or(|(_, _, b)| v < b) {
                best = Some((r.epoch, enc, v));
            }
        }
    }
    best.map(|(e, n, _)| (e, n))
        .ok_or_else(|| MeaeError::InsufficientData("no epoch has validation metrics".into()))
}

pub const STATE_MAGIC: &[u8; 4] = b"MEAS";
pub const STATE_VERSION: u32 = 1;

/// Full-precision training state for bit-exact resumption.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub params: MeaeParams,
    pub optimizer: Adam,
    pub loss_cfg: LossConfig,
    pub epochs_done: usize,
}

impl ResumeState {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(STATE_MAGIC, STATE_VERSION);
        w.config(&self.params.config);
        w.u64(self.epochs_done as u64);
        w.u64(self.optimizer.step);
        let o = &self.optimizer;
        let l = &self.loss_cfg;
        for v in [o.learning_rate, o.beta1, o.beta2, o.epsilon, l.alpha, l.lambda_mixing, l.lambda_zero_recon, l.lambda_z] {
            w.f64(v);
        }
        w.records(named(&self.params), Precision::F64);
        let names = self.params.names();
        w.records(names.iter().map(|n| format!("m.{n}")).zip(&o.first), Precision::F64);
        w.records(names.iter().map(|n| format!("v.{n}")).zip(&o.second), Precision::F64);
        w.buf
    }

    pub fn decode(bytes: &[u8], source: &Path) -> Result<Self> {
        let mut r = Reader::open(bytes, source, STATE_MAGIC, STATE_VERSION)?;
        let config = r.config()?;
        let epochs_done = r.u64()? as usize;
        let step = r.u64()?;
        let mut f = [0.0; 8];
        for v in &mut f {
            *v = r.f64()?;
        }
        let expected = layout(&MeaeParams::init(&config)?);
        let prefixed = |p: &str| -> Vec<(String, Vec<usize>)> {
            expected.iter().map(|(n, s)| (format!("{p}.{n}"), s.clone())).collect()
        };
        let tensors = r.records(&expected, Precision::F64)?;
        let first = r.records(&prefixed("m"), Precision::F64)?;
        let second = r.records(&prefixed("v"), Precision::F64)?;
        r.finish()?;
        Ok(Self {
            params: params_from(config, tensors)?,
            optimizer: Adam {
                learning_rate: f[0],
                beta1: f[1],
                beta2: f[2],
                epsilon: f[3],
                step,
                first,
                second,
            },
            loss_cfg: LossConfig {
                alpha: f[4],
                lambda_mixing: f[5],
                lambda_zero_recon: f[6],
                lambda_z: f[7],
            },
            epochs_done,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(epoch: usize, rmse: Option<Vec<f64>>) -> EpochReport {
        EpochReport {
            epoch,
            loss: LossBreakdown::default(),
            val_rmse: rmse,
            checkpoint: None,
        }
    }

    #[test]
    fn best_epoch_examples() {
        assert_eq!(select_best_epoch(&[report(1, Some(vec![7.0, 3.0]))]).unwrap(), (1, 1));
        let r = [report(1, Some(vec![5.0, 9.0])), report(2, Some(vec![4.0, 8.0]))];
        assert_eq!(select_best_epoch(&r).unwrap(), (2, 0));
        let r: Vec<_> = (1..=8)
            .map(|e| report(e, Some(vec![if e == 3 || e == 7 { 2.0 } else { 6.0 }, 9.0])))
            .collect();
        assert_eq!(select_best_epoch(&r).unwrap(), (3, 0));
        assert!(select_best_epoch(&[report(1, None)]).is_err());
        assert_eq!(select_best_epoch(&[report(1, None), report(2, Some(vec![f64::NAN, 4.0]))]).unwrap(), (2, 1));
    }

    #[test]
    fn log_lines_leave_unevaluated_columns_empty() {
        let mut r = report(3, None);
        r.loss.total = 1.5;
        assert_eq!(r.log_line(2), "3,0,0,0,0,1.5,,");
        r.val_rmse = Some(vec![4.25, 7.0]);
        assert_eq!(r.log_line(2), "3,0,0,0,0,1.5,4.25,7");
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let params = MeaeParams::init(&crate::model::MeaeConfig {
            num_encoders: 1,
            input_length: 96,
            encoder_channels: vec![2],
            encoding_channels: 1,
            decoder_group_width: 2,
            ..Default::default()
        })
        .unwrap();
        let mut p = params.clone();
        let mut adam = Adam::new(&params, &TrainConfig::default());
        let grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::filled(t.shape(), -3.0)).collect();
        adam.update(p.tensors_mut(), &grads);
        for (a, b) in params.tensors().iter().zip(p.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }
}
