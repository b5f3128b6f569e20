use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MeaeError, Result};

#[derive(Clone, Debug)]
pub struct IcaSettings {
    pub max_iter: usize,
    pub tol: f64,
    /// Eigenvalues below `rank_tol · λ_max` are treated as zero.
    pub rank_tol: f64,
    pub seed: u64,
}

impl Default for IcaSettings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            rank_tol: 1e-10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IcaResult {
    /// Unit-variance components, one row each.
    pub components: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the covariance rank forced fewer components than requested.
    pub rank_reduced: bool,
}

/// `(W Wᵀ)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(1e-300).sqrt()));
    &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w
}

/// Symmetric FastICA with the `tanh` contrast on the rows of `x` (`n × T`).
pub fn fastica(x: &DMatrix<f64>, n_components: usize, settings: &IcaSettings) -> Result<IcaResult> {
    let (n, t) = x.shape();
    if t <= n || n == 0 {
        return Err(MeaeError::InsufficientData(format!(
            "ICA needs more samples than rows, got {n}x{t}"
        )));
    }
    if n_components == 0 {
        return Err(MeaeError::Config("ICA needs at least one component".into()));
    }
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let cov = &centered * centered.transpose() / t as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let rank = order
        .iter()
        .filter(|&&i| top > 0.0 && eig.eigenvalues[i] > settings.rank_tol * top)
        .count();
    if rank == 0 {
        return Err(MeaeError::InsufficientData("ICA input has zero variance".into()));
    }
    let m = n_components.min(rank);
    let rank_reduced = m < n_components;
    if rank_reduced {
        log::warn!("covariance rank {rank} limits ICA to {m} of {n_components} components");
    }

    // whitening rows: D^{-1/2} Eᵀ for the leading eigenpairs
    let mut whitener = DMatrix::zeros(m, n);
    for (r, &i) in order.iter().take(m).enumerate() {
        let scale = 1.0 / eig.eigenvalues[i].sqrt();
        for c in 0..n {
            whitener[(r, c)] = eig.eigenvectors[(c, i)] * scale;
        }
    }
    let z = &whitener * &centered;

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let init = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let wz = &w * &z;
        let g = wz.map(f64::tanh);
        let g_prime_mean: Vec<f64> = g
            .row_iter()
            .map(|row| row.iter().map(|v| 1.0 - v * v).sum::<f64>() / t as f64)
            .collect();
        let mut next = &g * z.transpose() / t as f64;
        for r in 0..m {
            for c in 0..m {
                next[(r, c)] -= g_prime_mean[r] * w[(r, c)];
            }
        }
        let next = symmetric_decorrelation(&next);
        let change = (&next * w.transpose())
            .diagonal()
            .iter()
            .map(|d| (d.abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < settings.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA stopped after {iterations} iterations without converging");
    }
    Ok(IcaResult {
        components: &w * &z,
        converged,
        iterations,
        rank_reduced,
    })
}

pub fn skewness(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (m2, m3) = xs.iter().fold((0.0, 0.0), |(a, b), &v| {
        let d = v - mean;
        (a + d * d, b + d * d * d)
    });
    let (m2, m3) = (m2 / n, m3 / n);
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}
