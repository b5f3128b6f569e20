use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MeaeError, Result};

#[derive(Clone, Debug)]
pub struct NmfSettings {
    pub max_iter: usize,
    /// Stop once the relative change of the Frobenius error drops below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for NmfSettings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NmfResult {
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// Frobenius error `‖X − WH‖` at initialisation and after every half update.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Final `‖X − WH‖ / ‖X‖`, or 0 for an all-zero input.
    pub relative_error: f64,
}

const DENOM_FLOOR: f64 = 1e-300;

/// Lee-Seung multiplicative updates for `X ≈ W H` under the Frobenius norm.
pub fn nmf(x: &DMatrix<f64>, rank: usize, settings: &NmfSettings) -> Result<NmfResult> {
    if let Some(&v) = x.iter().find(|&&v| v < 0.0) {
        return Err(MeaeError::NegativeInput(v));
    }
    if rank == 0 {
        return Err(MeaeError::Config("NMF rank must be positive".into()));
    }
    let (n, t) = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let scale = (x.mean() / rank as f64).sqrt();
    let mut w = DMatrix::from_fn(n, rank, |_, _| scale * rng.random::<f64>());
    let mut h = DMatrix::from_fn(rank, t, |_, _| scale * rng.random::<f64>());
    let error = |w: &DMatrix<f64>, h: &DMatrix<f64>| (x - w * h).norm();

    let mut trace = vec![error(&w, &h)];
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let prev = *trace.last().expect("trace starts non-empty");

        let wt = w.transpose();
        let num = &wt * x;
        let den = &wt * &w * &h;
        h.zip_zip_apply(&num, &den, |hv, a, b| *hv *= a / b.max(DENOM_FLOOR));
        trace.push(error(&w, &h));

        let ht = h.transpose();
        let num = x * &ht;
        let den = &w * (&h * &ht);
        w.zip_zip_apply(&num, &den, |wv, a, b| *wv *= a / b.max(DENOM_FLOOR));
        let current = error(&w, &h);
        trace.push(current);

        if prev == 0.0 || (prev - current).abs() / prev < settings.tol {
            break;
        }
    }
    let norm = x.norm();
    let relative_error = if norm == 0.0 {
        0.0
    } else {
        trace.last().copied().unwrap_or(0.0) / norm
    };
    Ok(NmfResult {
        w,
        h,
        trace,
        iterations,
        relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(n: usize, r: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(n, r, |_, _| rng.random::<f64>());
        let h = DMatrix::from_fn(r, t, |_, _| rng.random::<f64>());
        w * h
    }

    /// Identifiable plant: `W` contains the identity rows and `H` is half zeros.
    fn separable(n: usize, r: usize, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(n, r, |i, j| match i < r {
            true => f64::from(u8::from(i == j)),
            false => rng.random::<f64>(),
        });
        let h = DMatrix::from_fn(r, t, |_, _| {
            if rng.random::<f64>() < 0.5 {
                0.0
            } else {
                rng.random::<f64>()
            }
        });
        w * h
    }

    #[test]
    fn recovers_planted_factorization() {
        let x = separable(8, 3, 400, 11);
        let settings = NmfSettings { max_iter: 2000, ..NmfSettings::default() };
        let out = nmf(&x, 3, &settings).unwrap();
        assert!(out.relative_error < 1e-3, "relative error {}", out.relative_error);
        assert!(out.w.iter().chain(out.h.iter()).all(|&v| v >= 0.0));
    }

    #[test]
    fn objective_never_increases() {
        let x = planted(4, 4, 200, 5).map(|v| v + 0.1);
        let out = nmf(&x, 4, &NmfSettings::default()).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
        assert!(out.trace.last().unwrap() <= &out.trace[0]);
    }

    #[test]
    fn zero_input_and_negative_input() {
        let out = nmf(&DMatrix::zeros(3, 10), 2, &NmfSettings::default()).unwrap();
        assert_eq!(out.relative_error, 0.0);
        assert!(out.w.iter().chain(out.h.iter()).all(|&v| v == 0.0));
        let mut x = DMatrix::from_element(2, 5, 1.0);
        x[(1, 3)] = -0.5;
        assert!(matches!(nmf(&x, 1, &NmfSettings::default()), Err(MeaeError::NegativeInput(_))));
    }
}
