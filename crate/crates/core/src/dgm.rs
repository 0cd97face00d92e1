//! Simulated randomized trials with a logistic outcome model.
//!
//! Covariates are multivariate normal with compound-symmetric correlation,
//! treatment is a fair coin, and outcomes follow a logistic model with
//! treatment, main effects and optional treatment interactions. The intercept
//! is solved numerically so the control arm hits a target prevalence: with
//! `x ~ N(0, S)` the control-arm linear predictor is `b0 + sigma * Z`, so the
//! prevalence is a one-dimensional Gaussian integral evaluated by
//! Gauss-Hermite quadrature.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::eval::nagelkerke_r2;
use crate::math::{bernoulli_ll_from_eta, expit};
use crate::tabular::Dataset;

/// Seed of the fixed interaction perturbations shared by every setting and run.
pub const DEFAULT_PERTURBATION_SEED: u64 = 1729;
pub const QUADRATURE_NODES: usize = 64;
/// Number of covariates with a perturbation-only interaction.
pub const N_PERTURBED: usize = 9;
/// Interactions of the last three covariates in heterogeneous settings.
pub const STRONG_INTERACTIONS: [f64; 3] = [-0.5, -0.25, -0.125];
const ROOT_BRACKET: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgmConfig {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub beta_t: f64,
    pub heterogeneous: bool,
    pub target_control_prevalence: f64,
    pub treatment_probability: f64,
    pub perturbation_seed: u64,
    pub run_seed: u64,
    /// Multiplies the main-effect magnitudes; +1 gives all-positive effects.
    pub main_effect_sign: f64,
}

impl Default for DgmConfig {
    fn default() -> Self {
        DgmConfig {
            n: 1200,
            p: 12,
            rho: 0.1,
            beta_t: 0.6f64.ln(),
            heterogeneous: false,
            target_control_prevalence: 0.25,
            treatment_probability: 0.5,
            perturbation_seed: DEFAULT_PERTURBATION_SEED,
            run_seed: 0,
            main_effect_sign: 1.0,
        }
    }
}

impl DgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < STRONG_INTERACTIONS.len() + N_PERTURBED && self.heterogeneous {
            return Err(Error::InvalidConfig(format!(
                "heterogeneous settings need p = {}, got {}",
                N_PERTURBED + STRONG_INTERACTIONS.len(),
                self.p
            )));
        }
        check_rho(self.p, self.rho)?;
        check_probability("target_control_prevalence", self.target_control_prevalence)?;
        check_probability("treatment_probability", self.treatment_probability)?;
        if !self.beta_t.is_finite() || !self.main_effect_sign.is_finite() {
            return Err(Error::InvalidConfig("coefficients must be finite".into()));
        }
        Ok(())
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {p}")))
    }
}

fn check_rho(p: usize, rho: f64) -> Result<()> {
    let lower = if p > 1 { -1.0 / (p as f64 - 1.0) } else { f64::NEG_INFINITY };
    if rho > lower && rho < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("rho = {rho} does not give a positive definite correlation for p = {p}")))
    }
}

/// `(1 - rho) I + rho 11'`.
pub fn compound_symmetry(p: usize, rho: f64) -> Result<DMatrix<f64>> {
    check_rho(p, rho)?;
    Ok(DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho }))
}

/// Main effects `sign * 2^(-k/2)` for `k = 0..p`.
pub fn main_effect_schedule(p: usize, sign: f64) -> Vec<f64> {
    (0..p).map(|k| sign * 2f64.powf(-(k as f64) / 2.0)).collect()
}

/// Nine i.i.d. Uniform(-0.05, 0.05) draws from a dedicated seed.
pub fn make_perturbations(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..N_PERTURBED).map(|_| rng.random_range(-0.05..0.05)).collect()
}

/// Nodes and weights for `integral f(x) exp(-x^2) dx` via the Golub-Welsch
/// eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(QUADRATURE_NODES))
}

/// `E[expit(beta0 + sigma Z)]` for standard normal `Z`.
pub fn marginal_prevalence(beta0: f64, sigma: f64) -> f64 {
    let (nodes, weights) = rule();
    let scale = std::f64::consts::SQRT_2 * sigma;
    nodes
        .iter()
        .zip(weights)
        .map(|(x, w)| w * expit(beta0 + scale * x))
        .sum::<f64>()
        / std::f64::consts::PI.sqrt()
}

/// Intercept giving `marginal_prevalence(b0, sigma) = target`.
pub fn solve_intercept_sigma(sigma: f64, target: f64) -> Result<f64> {
    check_probability("target", target)?;
    let f = |b: f64| marginal_prevalence(b, sigma) - target;
    let (mut lo, mut hi) = (-ROOT_BRACKET, ROOT_BRACKET);
    let (mut flo, mut fhi) = (f(lo), f(hi));
    if !(flo < 0.0 && fhi > 0.0) {
        return Err(Error::NoRoot);
    }
    // secant steps inside the bracket, falling back to bisection when a
    // step lands outside or fails to halve the bracket
    let mut width = hi - lo;
    for _ in 0..200 {
        let secant = hi - fhi * (hi - lo) / (fhi - flo);
        let mid = 0.5 * (lo + hi);
        let x = if secant > lo && secant < hi && (hi - lo) <= 0.5 * width { secant } else { mid };
        width = hi - lo;
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
            flo = fx;
        } else {
            hi = x;
            fhi = fx;
        }
        if hi - lo <= 4.0 * f64::EPSILON * (1.0 + x.abs()) {
            break;
        }
    }
    Ok(if flo.abs() < fhi.abs() { lo } else { hi })
}

/// Intercept for linear-predictor coefficients `beta` under covariance `cov`.
pub fn solve_intercept(beta: &[f64], cov: &DMatrix<f64>, target: f64) -> Result<f64> {
    solve_intercept_sigma(linear_predictor_sd(beta, cov)?, target)
}

/// `sqrt(beta' S beta)`.
pub fn linear_predictor_sd(beta: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != beta.len() || cov.ncols() != beta.len() {
        return Err(Error::LengthMismatch {
            expected: cov.nrows(),
            actual: beta.len(),
        });
    }
    if cov.clone().cholesky().is_none() && !beta.is_empty() {
        return Err(Error::InvalidConfig("covariance is not positive definite".into()));
    }
    let b = DVector::from_column_slice(beta);
    Ok(b.dot(&(cov * &b)).max(0.0).sqrt())
}

/// `n` rows i.i.d. `N(0, S)` with compound-symmetric `S`.
pub fn gen_covariates<R: Rng>(n: usize, p: usize, rho: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let cov = compound_symmetry(p, rho)?;
    let l = cov.cholesky().ok_or(Error::Singular)?.l();
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    // rows of Z L' have covariance L L' = S
    Ok(z * l.transpose())
}

/// Generative model of one simulation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    pub beta0: f64,
    pub beta_t: f64,
    pub beta_m: Vec<f64>,
    pub beta_z: Vec<f64>,
    /// Linear-predictor standard deviation in the control and treated arms.
    pub sigma_arm: [f64; 2],
    pub rho: f64,
    pub treatment_probability: f64,
}

/// A generated trial with its potential-outcome risks.
#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub dataset: Dataset,
    pub true_risk_control: Vec<f64>,
    pub true_risk_treated: Vec<f64>,
    pub true_delta: Vec<f64>,
}

impl TrueModel {
    pub fn from_config(config: &DgmConfig) -> Result<Self> {
        config.validate()?;
        let beta_m = main_effect_schedule(config.p, config.main_effect_sign);
        let beta_z = if config.heterogeneous {
            let mut z = make_perturbations(config.perturbation_seed);
            z.extend(STRONG_INTERACTIONS);
            z
        } else {
            vec![0.0; config.p]
        };
        Self::with_coefficients(
            config.beta_t,
            beta_m,
            beta_z,
            config.rho,
            config.target_control_prevalence,
            config.treatment_probability,
        )
    }

    /// Builds a model from explicit coefficients, solving the intercept from
    /// the control-arm coefficients.
    pub fn with_coefficients(
        beta_t: f64,
        beta_m: Vec<f64>,
        beta_z: Vec<f64>,
        rho: f64,
        target_control_prevalence: f64,
        treatment_probability: f64,
    ) -> Result<Self> {
        if beta_z.len() != beta_m.len() {
            return Err(Error::LengthMismatch {
                expected: beta_m.len(),
                actual: beta_z.len(),
            });
        }
        check_probability("treatment_probability", treatment_probability)?;
        let cov = compound_symmetry(beta_m.len(), rho)?;
        let sigma0 = linear_predictor_sd(&beta_m, &cov)?;
        let treated: Vec<f64> = beta_m.iter().zip(&beta_z).map(|(m, z)| m + z).collect();
        let sigma1 = linear_predictor_sd(&treated, &cov)?;
        let beta0 = solve_intercept_sigma(sigma0, target_control_prevalence)?;
        Ok(TrueModel {
            beta0,
            beta_t,
            beta_m,
            beta_z,
            sigma_arm: [sigma0, sigma1],
            rho,
            treatment_probability,
        })
    }

    pub fn p(&self) -> usize {
        self.beta_m.len()
    }

    /// True log-odds for covariate row `x` under arm `a`.
    pub fn linear_predictor(&self, x: &[f64], a: u8) -> f64 {
        let at = f64::from(a);
        let mut eta = self.beta0 + self.beta_t * at;
        for (j, xj) in x.iter().enumerate() {
            eta += xj * (self.beta_m[j] + self.beta_z[j] * at);
        }
        eta
    }

    pub fn risk(&self, x: &[f64], a: u8) -> f64 {
        expit(self.linear_predictor(x, a))
    }

    /// True risk difference `P(Y=1|a=1,x) - P(Y=1|a=0,x)` for every row.
    pub fn delta(&self, covariates: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_columns(covariates)?;
        Ok((0..covariates.nrows())
            .map(|i| {
                let row: Vec<f64> = covariates.row(i).iter().copied().collect();
                self.risk(&row, 1) - self.risk(&row, 0)
            })
            .collect())
    }

    fn check_columns(&self, covariates: &DMatrix<f64>) -> Result<()> {
        if covariates.ncols() != self.p() {
            return Err(Error::ColumnMismatch {
                expected: self.p(),
                actual: covariates.ncols(),
            });
        }
        Ok(())
    }

    /// Draws covariates, then treatment, then outcomes, all from `rng`.
    pub fn simulate<R: Rng>(&self, n: usize, rng: &mut R) -> Result<SimulatedTrial> {
        let x = gen_covariates(n, self.p(), self.rho, rng)?;
        let treatment: Vec<u8> = (0..n)
            .map(|_| u8::from(rng.random::<f64>() < self.treatment_probability))
            .collect();
        let mut risk0 = Vec::with_capacity(n);
        let mut risk1 = Vec::with_capacity(n);
        let mut outcome = Vec::with_capacity(n);
        let mut row = vec![0.0; self.p()];
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = x[(i, j)];
            }
            let r0 = self.risk(&row, 0);
            let r1 = self.risk(&row, 1);
            let r = if treatment[i] == 1 { r1 } else { r0 };
            outcome.push(u8::from(rng.random::<f64>() < r));
            risk0.push(r0);
            risk1.push(r1);
        }
        let true_delta = risk1.iter().zip(&risk0).map(|(a, b)| a - b).collect();
        Ok(SimulatedTrial {
            dataset: Dataset::from_parts(x, treatment, outcome)?,
            true_risk_control: risk0,
            true_risk_treated: risk1,
            true_delta,
        })
    }

    /// Monte Carlo mean risk of arm `a` over `draws` covariate rows, generated in chunks.
    pub fn mc_prevalence<R: Rng>(&self, a: u8, draws: usize, rng: &mut R) -> Result<f64> {
        const CHUNK: usize = 65_536;
        if draws == 0 {
            return Err(Error::InvalidConfig("need at least one draw".into()));
        }
        let mut total = 0.0;
        let mut done = 0;
        let mut row = vec![0.0; self.p()];
        while done < draws {
            let m = CHUNK.min(draws - done);
            let x = gen_covariates(m, self.p(), self.rho, rng)?;
            let mut chunk_total = 0.0;
            for i in 0..m {
                for (j, r) in row.iter_mut().enumerate() {
                    *r = x[(i, j)];
                }
                chunk_total += self.risk(&row, a);
            }
            total += chunk_total;
            done += m;
        }
        Ok(total / draws as f64)
    }

    /// Nagelkerke R² of the true assigned-arm log-odds against simulated outcomes.
    pub fn oracle_r2<R: Rng>(&self, n: usize, rng: &mut R) -> Result<f64> {
        let trial = self.simulate(n, rng)?;
        let data = &trial.dataset;
        let mut model_ll = 0.0;
        let mut row = vec![0.0; self.p()];
        for i in 0..n {
            for (j, r) in row.iter_mut().enumerate() {
                *r = data.covariates()[(i, j)];
            }
            let eta = self.linear_predictor(&row, data.treatment()[i]);
            model_ll += bernoulli_ll_from_eta(f64::from(data.outcome()[i]), eta);
        }
        let events = data.outcome().iter().filter(|&&y| y == 1).count() as f64;
        let nf = n as f64;
        let ybar = events / nf;
        let null_ll = if events == 0.0 || events == nf {
            0.0
        } else {
            events * ybar.ln() + (nf - events) * (1.0 - ybar).ln()
        };
        nagelkerke_r2(model_ll, null_ll, n)
    }
}

/// One trial from `config`, using `config.run_seed` for every draw.
pub fn gen_trial(config: &DgmConfig) -> Result<SimulatedTrial> {
    let model = TrueModel::from_config(config)?;
    model.simulate(config.n, &mut ChaCha8Rng::seed_from_u64(config.run_seed))
}

/// Oracle Nagelkerke R² of `config` on a sample of `n_large` subjects.
pub fn oracle_r2(config: &DgmConfig, n_large: usize) -> Result<f64> {
    let model = TrueModel::from_config(config)?;
    model.oracle_r2(n_large, &mut ChaCha8Rng::seed_from_u64(config.run_seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;

    #[test]
    fn quadrature_integrates_gaussian_moments() {
        let (x, w) = gauss_hermite(QUADRATURE_NODES);
        let pi = std::f64::consts::PI;
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - pi.sqrt()).abs() < 1e-12);
        assert!((m2 - pi.sqrt() / 2.0).abs() < 1e-12);
        assert!((m4 - 3.0 * pi.sqrt() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn intercept_degenerate_and_symmetric_cases() {
        let b = solve_intercept_sigma(0.0, 0.25).unwrap();
        assert!((b - logit(0.25)).abs() < 1e-10);
        assert!((b + 1.098612).abs() < 1e-6);
        for sigma in [0.3, 1.0, 2.5] {
            assert!(solve_intercept_sigma(sigma, 0.5).unwrap().abs() < 1e-10);
        }
        assert!(solve_intercept_sigma(1.0, 1.0).is_err());
    }

    #[test]
    fn intercept_hits_target_under_quadrature() {
        for (sigma, target) in [(1.7, 0.25), (0.5, 0.1), (3.0, 0.9)] {
            let b = solve_intercept_sigma(sigma, target).unwrap();
            assert!((marginal_prevalence(b, sigma) - target).abs() < 1e-8);
        }
    }

    #[test]
    fn paper_schedule_solves_to_known_intercept() {
        // sigma and intercept for the 12-covariate schedule at rho = 0.1, checked
        // against an independent numerical integration
        let model = TrueModel::from_config(&DgmConfig::default()).unwrap();
        assert!((model.sigma_arm[0] - 1.71154).abs() < 1e-4, "{}", model.sigma_arm[0]);
        assert!((model.beta0 + 1.63401).abs() < 1e-4, "{}", model.beta0);
        let simpson = {
            let steps = 20_000;
            let (a, b) = (-12.0, 12.0);
            let h = (b - a) / steps as f64;
            let f = |z: f64| {
                expit(model.beta0 + model.sigma_arm[0] * z) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
            };
            (0..=steps)
                .map(|k| {
                    let c = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                    c * f(a + k as f64 * h)
                })
                .sum::<f64>()
                * h
                / 3.0
        };
        assert!((simpson - 0.25).abs() < 1e-8);
    }

    #[test]
    fn monte_carlo_prevalence_tracks_quadrature() {
        let model = TrueModel::from_config(&DgmConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // 200k draws: standard error of the mean risk is well below 1e-3
        let mc = model.mc_prevalence(0, 200_000, &mut rng).unwrap();
        assert!((mc - 0.25).abs() < 3e-3, "{mc}");
        assert!(model.mc_prevalence(0, 0, &mut rng).is_err());
    }

    #[test]
    fn perturbations_are_fixed_and_bounded() {
        let a = make_perturbations(DEFAULT_PERTURBATION_SEED);
        assert_eq!(a.len(), 9);
        assert_eq!(a, make_perturbations(DEFAULT_PERTURBATION_SEED));
        assert_ne!(a, make_perturbations(DEFAULT_PERTURBATION_SEED + 1));
        assert!(a.iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn heterogeneous_interactions_follow_the_schedule() {
        let config = DgmConfig {
            heterogeneous: true,
            ..DgmConfig::default()
        };
        let model = TrueModel::from_config(&config).unwrap();
        assert_eq!(&model.beta_z[9..], &[-0.5, -0.25, -0.125]);
        assert_eq!(&model.beta_z[..9], make_perturbations(DEFAULT_PERTURBATION_SEED).as_slice());
        let hom = TrueModel::from_config(&DgmConfig::default()).unwrap();
        assert!(hom.beta_z.iter().all(|z| *z == 0.0));
        // beta_z does not enter the control arm
        assert_eq!(model.beta0, hom.beta0);
    }

    #[test]
    fn covariate_correlation_matches_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        for rho in [0.0, 0.1] {
            let x = gen_covariates(n, 3, rho, &mut rng).unwrap();
            let c = x.column(0).dot(&x.column(1)) / n as f64;
            let v = x.column(0).dot(&x.column(0)) / n as f64;
            assert!((c - rho).abs() < 0.01, "{c}");
            assert!((v - 1.0).abs() < 0.01, "{v}");
        }
        let a = gen_covariates(10, 3, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_covariates(10, 3, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn null_effect_gives_zero_delta() {
        let config = DgmConfig {
            beta_t: 0.0,
            n: 500,
            ..DgmConfig::default()
        };
        let trial = gen_trial(&config).unwrap();
        assert!(trial.true_delta.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn protective_effect_is_negative_everywhere() {
        let config = DgmConfig { n: 2000, ..DgmConfig::default() };
        let model = TrueModel::from_config(&config).unwrap();
        let trial = gen_trial(&config).unwrap();
        assert!(trial.true_delta.iter().all(|d| *d < 0.0 && *d > -1.0));
        for i in 0..trial.true_delta.len() {
            assert_eq!(trial.true_delta[i], trial.true_risk_treated[i] - trial.true_risk_control[i]);
        }
        let zero = vec![0.0; 12];
        let expected = expit(model.beta0 + 0.6f64.ln()) - expit(model.beta0);
        assert_eq!(model.risk(&zero, 1) - model.risk(&zero, 0), expected);
    }

    #[test]
    fn simulation_is_reproducible() {
        let config = DgmConfig { n: 300, run_seed: 42, ..DgmConfig::default() };
        let a = gen_trial(&config).unwrap();
        let b = gen_trial(&config).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.true_delta, b.true_delta);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad_rho = DgmConfig { rho: -0.2, ..DgmConfig::default() };
        assert!(TrueModel::from_config(&bad_rho).is_err());
        let bad_target = DgmConfig { target_control_prevalence: 0.0, ..DgmConfig::default() };
        assert!(TrueModel::from_config(&bad_target).is_err());
    }

    #[test]
    fn oracle_r2_null_and_monotone() {
        let zero = TrueModel::with_coefficients(0.0, vec![0.0; 12], vec![0.0; 12], 0.1, 0.25, 0.5).unwrap();
        let r0 = zero.oracle_r2(100_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(r0.abs() < 0.005, "{r0}");
        let base = main_effect_schedule(12, 1.0);
        let doubled: Vec<f64> = base.iter().map(|b| 2.0 * b).collect();
        let m1 = TrueModel::with_coefficients(0.6f64.ln(), base, vec![0.0; 12], 0.1, 0.25, 0.5).unwrap();
        let m2 = TrueModel::with_coefficients(0.6f64.ln(), doubled, vec![0.0; 12], 0.1, 0.25, 0.5).unwrap();
        let r1 = m1.oracle_r2(100_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let r2 = m2.oracle_r2(100_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(r2 > r1, "{r1} {r2}");
    }
}
