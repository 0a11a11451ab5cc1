//! Hand-rolled CMA-ES for low-dimensional continuous minimization.
//!
//! Standard (μ/μ_w, λ) covariance matrix adaptation with rank-1 and rank-μ
//! updates, cumulative step-size control, and an optional diagonal-only
//! covariance mode for speed. Selection is rank-based, so objectives may
//! return `f64::INFINITY` to reject a candidate.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strategy parameters. `population` is the per-generation sample count λ.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CmaConfig {
    /// Samples per generation (λ).
    pub population: usize,
    /// Initial step size σ₀ in coordinate units.
    pub sigma0: f64,
    pub max_generations: usize,
    /// Keep the covariance diagonal (cheaper, no rotation adaptation).
    pub diagonal: bool,
    /// Step size below which the search is declared degenerate.
    pub sigma_floor: f64,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self {
            population: 20,
            sigma0: 0.3,
            max_generations: 30,
            diagonal: false,
            sigma_floor: 1e-14,
        }
    }
}

impl CmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(Error::Config(format!(
                "CMA-ES population {} too small (need at least 4)",
                self.population
            )));
        }
        if !(self.sigma0 > 0.0) || !(self.sigma_floor > 0.0) {
            return Err(Error::Config("CMA-ES step sizes must be positive".into()));
        }
        if self.max_generations == 0 {
            return Err(Error::Config("CMA-ES needs at least one generation".into()));
        }
        Ok(())
    }
}

/// Outcome of a minimization run.
#[derive(Clone, Debug)]
pub struct CmaResult {
    /// Best sample ever evaluated.
    pub best_x: DVector<f64>,
    pub best_f: f64,
    pub generations: usize,
    /// True when the run stopped on step-size underflow or a non-finite
    /// search distribution rather than the generation budget.
    pub degenerate: bool,
}

/// Fixed weights and learning rates derived from (dimension, population).
struct Strategy {
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_cov_path: f64,
    c_rank1: f64,
    c_rank_mu: f64,
    chi_n: f64,
}

impl Strategy {
    fn new(dim: usize, population: usize) -> Self {
        let n = dim as f64;
        let mu = population / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| ((population as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_cov_path = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_rank1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_rank_mu = (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff))
            .min(1.0 - c_rank1);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        Self { weights, mu_eff, c_sigma, d_sigma, c_cov_path, c_rank1, c_rank_mu, chi_n }
    }
}

/// Eigendecomposition of the covariance: `basis * scales` maps whitened
/// draws to correlated steps, `inv_sqrt` whitens steps back.
struct Factorization {
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    inv_sqrt: DMatrix<f64>,
}

fn factorize(cov: &DMatrix<f64>, diagonal: bool) -> Option<Factorization> {
    let dim = cov.nrows();
    if cov.iter().any(|c| !c.is_finite()) {
        return None;
    }
    if diagonal {
        let scales = DVector::from_iterator(dim, (0..dim).map(|i| cov[(i, i)].max(1e-30).sqrt()));
        let inv_sqrt = DMatrix::from_diagonal(&scales.map(|s| 1.0 / s));
        return Some(Factorization { basis: DMatrix::identity(dim, dim), scales, inv_sqrt });
    }
    let symmetric = (cov + cov.transpose()) * 0.5;
    let eigen = symmetric.symmetric_eigen();
    let scales = eigen.eigenvalues.map(|v| v.max(1e-30).sqrt());
    let basis = eigen.eigenvectors;
    let inv_diag = DMatrix::from_diagonal(&scales.map(|s| 1.0 / s));
    let inv_sqrt = &basis * inv_diag * basis.transpose();
    Some(Factorization { basis, scales, inv_sqrt })
}

/// Minimize `objective` starting from `mean0`. Candidate evaluation is
/// parallel; sampling and adaptation are sequential, so a fixed RNG gives a
/// reproducible run. Step-size underflow stops the search early and returns
/// the best sample seen with `degenerate` set.
pub fn cma_minimize(
    objective: &(impl Fn(&DVector<f64>) -> f64 + Sync),
    mean0: &DVector<f64>,
    cfg: &CmaConfig,
    rng: &mut ChaCha20Rng,
) -> Result<CmaResult> {
    cfg.validate()?;
    let dim = mean0.len();
    if dim == 0 {
        return Err(Error::Config("CMA-ES needs at least one coordinate".into()));
    }
    let strat = Strategy::new(dim, cfg.population);

    let mut mean = mean0.clone();
    let mut sigma = cfg.sigma0;
    let mut cov = DMatrix::<f64>::identity(dim, dim);
    let mut path_sigma = DVector::<f64>::zeros(dim);
    let mut path_cov = DVector::<f64>::zeros(dim);

    let mut best_x = mean0.clone();
    let mut best_f = objective(mean0);
    let mut degenerate = false;
    let mut generations = 0usize;

    for gen in 0..cfg.max_generations {
        if !sigma.is_finite() || sigma < cfg.sigma_floor {
            log::warn!("CMA-ES step size underflow (sigma = {sigma:.3e}) at generation {gen}");
            degenerate = true;
            break;
        }
        let Some(fac) = factorize(&cov, cfg.diagonal) else {
            log::warn!("CMA-ES covariance became non-finite at generation {gen}");
            degenerate = true;
            break;
        };
        generations = gen + 1;

        // Sample λ candidates serially (cheap), evaluate them in parallel.
        let steps: Vec<DVector<f64>> = (0..cfg.population)
            .map(|_| {
                let white = DVector::from_iterator(
                    dim,
                    (0..dim).map(|_| {
                        let draw: f64 = StandardNormal.sample(rng);
                        draw
                    }),
                );
                &fac.basis * white.component_mul(&fac.scales)
            })
            .collect();
        let candidates: Vec<DVector<f64>> = steps.iter().map(|y| &mean + y * sigma).collect();
        let fitness: Vec<f64> = candidates.par_iter().map(|x| objective(x)).collect();

        let mut order: Vec<usize> = (0..cfg.population).collect();
        order.sort_by(|&a, &b| fitness[a].total_cmp(&fitness[b]));
        let leader = order[0];
        if fitness[leader] < best_f {
            best_f = fitness[leader];
            best_x = candidates[leader].clone();
        }

        // Recombination and cumulative path updates.
        let mut step_mean = DVector::<f64>::zeros(dim);
        for (rank, &w) in strat.weights.iter().enumerate() {
            step_mean += &steps[order[rank]] * w;
        }
        mean += &step_mean * sigma;

        path_sigma = &path_sigma * (1.0 - strat.c_sigma)
            + &fac.inv_sqrt
                * &step_mean
                * (strat.c_sigma * (2.0 - strat.c_sigma) * strat.mu_eff).sqrt();
        let normalizer = (1.0 - (1.0 - strat.c_sigma).powi(2 * (gen as i32 + 1))).sqrt();
        let stalled = path_sigma.norm() / normalizer
            < (1.4 + 2.0 / (dim as f64 + 1.0)) * strat.chi_n;
        let h_sigma = if stalled { 1.0 } else { 0.0 };
        path_cov = &path_cov * (1.0 - strat.c_cov_path)
            + &step_mean
                * (h_sigma * (strat.c_cov_path * (2.0 - strat.c_cov_path) * strat.mu_eff).sqrt());

        // Covariance: decay, rank-1 from the path, rank-μ from the elite.
        let keep = 1.0 - strat.c_rank1 - strat.c_rank_mu;
        let path_correction =
            (1.0 - h_sigma) * strat.c_cov_path * (2.0 - strat.c_cov_path) * strat.c_rank1;
        cov = &cov * (keep + path_correction) + &path_cov * path_cov.transpose() * strat.c_rank1;
        for (rank, &w) in strat.weights.iter().enumerate() {
            let y = &steps[order[rank]];
            cov += y * y.transpose() * (strat.c_rank_mu * w);
        }
        if cfg.diagonal {
            for r in 0..dim {
                for c in 0..dim {
                    if r != c {
                        cov[(r, c)] = 0.0;
                    }
                }
            }
        }

        sigma *= ((strat.c_sigma / strat.d_sigma)
            * (path_sigma.norm() / strat.chi_n - 1.0))
            .exp();
    }

    Ok(CmaResult { best_x, best_f, generations, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn sphere(x: &DVector<f64>) -> f64 {
        x.iter().map(|c| c * c).sum()
    }

    #[test]
    fn sphere_5d_converges_below_1e8() {
        let mean0 = DVector::from_vec(vec![2.0, -1.5, 1.0, 0.5, -2.0]);
        let cfg = CmaConfig { sigma0: 1.0, max_generations: 200, ..CmaConfig::default() };
        let mut rng = stream_rng(11, "cma-sphere", 0);
        let out = cma_minimize(&sphere, &mean0, &cfg, &mut rng).unwrap();
        assert!(out.best_f < 1e-8, "best fitness {} after {} generations", out.best_f, out.generations);
        assert!(out.generations <= 200);
    }

    #[test]
    fn diagonal_mode_solves_the_sphere() {
        let mean0 = DVector::from_vec(vec![2.0, -1.5, 1.0, 0.5, -2.0]);
        let cfg = CmaConfig {
            sigma0: 1.0,
            max_generations: 200,
            diagonal: true,
            ..CmaConfig::default()
        };
        let mut rng = stream_rng(12, "cma-sphere-diag", 0);
        let out = cma_minimize(&sphere, &mean0, &cfg, &mut rng).unwrap();
        assert!(out.best_f < 1e-8, "best fitness {}", out.best_f);
    }

    #[test]
    fn rotated_ellipsoid_converges() {
        // Non-separable quadratic: full covariance must adapt a rotation.
        let f = |x: &DVector<f64>| {
            let a = x[0] + 0.8 * x[1];
            let b = x[1] - 0.8 * x[0];
            25.0 * a * a + b * b + x[2] * x[2]
        };
        let mean0 = DVector::from_vec(vec![1.5, 1.0, -1.0]);
        let cfg = CmaConfig { sigma0: 0.5, max_generations: 150, ..CmaConfig::default() };
        let mut rng = stream_rng(13, "cma-ellipsoid", 0);
        let out = cma_minimize(&f, &mean0, &cfg, &mut rng).unwrap();
        assert!(out.best_f < 1e-6, "best fitness {}", out.best_f);
    }

    #[test]
    fn runs_are_deterministic() {
        let mean0 = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let cfg = CmaConfig { max_generations: 40, ..CmaConfig::default() };
        let a = cma_minimize(&sphere, &mean0, &cfg, &mut stream_rng(7, "cma-det", 0)).unwrap();
        let b = cma_minimize(&sphere, &mean0, &cfg, &mut stream_rng(7, "cma-det", 0)).unwrap();
        assert_eq!(a.best_x, b.best_x);
        assert_eq!(a.best_f, b.best_f);
    }

    #[test]
    fn infinite_fitness_candidates_are_outranked() {
        // Reject the right half-space; the optimum on the allowed side is
        // still found because ranking pushes rejected samples last.
        let f = |x: &DVector<f64>| {
            if x[0] > 0.0 {
                f64::INFINITY
            } else {
                (x[0] + 1.0).powi(2) + x[1] * x[1]
            }
        };
        let mean0 = DVector::from_vec(vec![-2.0, 1.0]);
        let cfg = CmaConfig { sigma0: 0.5, max_generations: 120, ..CmaConfig::default() };
        let mut rng = stream_rng(21, "cma-reject", 0);
        let out = cma_minimize(&f, &mean0, &cfg, &mut rng).unwrap();
        assert!(out.best_f < 1e-6, "best fitness {}", out.best_f);
        assert!(out.best_x[0] <= 0.0);
    }

    #[test]
    fn sigma_underflow_reports_degenerate() {
        let mean0 = DVector::from_vec(vec![0.3, -0.2]);
        let cfg = CmaConfig {
            sigma0: 1e-13,
            sigma_floor: 1e-10,
            max_generations: 50,
            ..CmaConfig::default()
        };
        let mut rng = stream_rng(5, "cma-underflow", 0);
        let out = cma_minimize(&sphere, &mean0, &cfg, &mut rng).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.generations, 0);
        assert_eq!(out.best_x, mean0);
    }

    #[test]
    fn tiny_population_is_rejected() {
        let mean0 = DVector::from_vec(vec![0.0]);
        let cfg = CmaConfig { population: 2, ..CmaConfig::default() };
        let mut rng = stream_rng(5, "cma-pop", 0);
        assert!(cma_minimize(&sphere, &mean0, &cfg, &mut rng).is_err());
    }
}
