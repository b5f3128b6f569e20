//! Classical separation baselines over shifted pseudo-copies of one channel.

mod ica;
mod nmf;

pub use ica::{fastica, skewness, IcaResult, IcaSettings};
pub use nmf::{nmf, NmfResult, NmfSettings};

use nalgebra::DMatrix;

use crate::error::{MeaeError, Result};
use crate::hr::{align_and_score, detect_source_beats, BeatSeries, HrMetrics};

pub const DEFAULT_COPIES: usize = 8;

/// `n` copies of a signal, row `k` delayed by `k` samples, all truncated to a common length.
pub fn pseudo_copies(signal: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if n == 0 || signal.len() <= n {
        return Err(MeaeError::InsufficientData(format!(
            "{} samples cannot produce {n} shifted copies",
            signal.len()
        )));
    }
    let len = signal.len() - n + 1;
    Ok(DMatrix::from_fn(n, len, |k, j| signal[k + j]))
}

/// Index of the first minimum of the finite entries.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Scores every component against the reference and returns the lowest-RMSE one.
pub fn best_component(
    components: &[Vec<f64>],
    r_peaks: &[usize],
    reference: &BeatSeries,
    smooth_window: usize,
) -> Result<(usize, HrMetrics)> {
    if components.is_empty() {
        return Err(MeaeError::InsufficientData("no components to score".into()));
    }
    let scored: Vec<Option<HrMetrics>> = components
        .iter()
        .map(|c| {
            let beats = detect_source_beats(c, r_peaks);
            BeatSeries::new(beats, reference.fs)
                .map(|s| s.smoothed(smooth_window))
                .and_then(|s| align_and_score(reference, &s))
                .ok()
        })
        .collect();
    let rmses: Vec<f64> = scored.iter().map(|m| m.map_or(f64::NAN, |m| m.rmse)).collect();
    let idx = argmin_first(&rmses)
        .ok_or_else(|| MeaeError::InsufficientData("no component produced heart-rate metrics".into()))?;
    Ok((idx, scored[idx].expect("argmin skips missing metrics")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    Ica,
    Nmf,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Ica => "ica",
            BaselineMethod::Nmf => "nmf",
        }
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = MeaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ica" => Ok(Self::Ica),
            "nmf" => Ok(Self::Nmf),
            other => Err(MeaeError::Config(format!("unknown baseline method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub method: BaselineMethod,
    /// Separated components aligned with the start of the input signal.
    pub components: Vec<Vec<f64>>,
    pub best: usize,
    pub metrics: HrMetrics,
    pub converged: bool,
}

/// Runs one baseline on a whole recording and picks its best component.
pub fn run_baseline(
    method: BaselineMethod,
    signal: &[f64],
    r_peaks: &[usize],
    reference: &BeatSeries,
    copies: usize,
    smooth_window: usize,
    seed: u64,
) -> Result<BaselineOutcome> {
    let x = pseudo_copies(signal, copies)?;
    let (components, converged): (Vec<Vec<f64>>, bool) = match method {
        BaselineMethod::Ica => {
            let out = fastica(&x, copies, &IcaSettings { seed, ..IcaSettings::default() })?;
            let rows = out
                .components
                .row_iter()
                .map(|r| {
                    let row: Vec<f64> = r.iter().copied().collect();
                    if skewness(&row) < 0.0 {
                        row.iter().map(|v| -v).collect()
                    } else {
                        row
                    }
                })
                .collect();
            (rows, out.converged)
        }
        BaselineMethod::Nmf => {
            let lo = x.min();
            let shifted = x.map(|v| v - lo.min(0.0));
            let out = nmf(&shifted, copies, &NmfSettings { seed, ..NmfSettings::default() })?;
            let rows = out.h.row_iter().map(|r| r.iter().copied().collect()).collect();
            (rows, out.iterations < NmfSettings::default().max_iter)
        }
    };
    let (best, metrics) = best_component(&components, r_peaks, reference, smooth_window)?;
    Ok(BaselineOutcome {
        method,
        components,
        best,
        metrics,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hr::reference_beats;

    #[test]
    fn pseudo_copy_shapes() {
        let s: Vec<f64> = (0..1000).map(f64::from).collect();
        let m = pseudo_copies(&s, 8).unwrap();
        assert_eq!(m.shape(), (8, 993));
        assert_eq!(m[(3, 0)], 3.0);
        let one = pseudo_copies(&s, 1).unwrap();
        assert_eq!(one.row(0).iter().copied().collect::<Vec<_>>(), s);
        let c = pseudo_copies(&[2.0; 20], 8).unwrap();
        assert_eq!(c.row(0), c.row(1));
        assert!(pseudo_copies(&[1.0; 8], 8).is_err());
    }

    #[test]
    fn ties_pick_the_lower_index() {
        assert_eq!(argmin_first(&[9.1, 4.2, 4.2]), Some(1));
        assert_eq!(argmin_first(&[f64::NAN, 3.0]), Some(1));
        assert_eq!(argmin_first(&[f64::NAN]), None);
    }

    #[test]
    fn single_and_true_components() {
        let r: Vec<usize> = (0..12).map(|k| 10 + k * 100 + (k % 3) * 7).collect();
        let reference = BeatSeries::new(reference_beats(&r), 125.0).unwrap();
        let mut truth = vec![0.0; 1300];
        for &p in &r[..r.len() - 1] {
            truth[p + 20] = 1.0;
        }
        let noise: Vec<f64> = (0..1300).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
        let (idx, m) = best_component(&[noise.clone()], &r, &reference, 1).unwrap();
        assert_eq!(idx, 0);
        assert!(m.rmse > 0.0);
        let (idx, m) = best_component(&[noise, truth], &r, &reference, 1).unwrap();
        assert_eq!(idx, 1);
        assert!(m.rmse < 1e-9);
    }
}
