//! Unpenalized logistic regression by iteratively reweighted least squares,
//! plus the likelihood utilities the strategies build on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::math::{bernoulli_ll_from_eta, clamp_risk, expit};
use crate::tabular::{unstandardize_coefficients, Coefficients, ColumnRole, DesignMatrix};

/// Fitted linear predictors of this size mean probabilities are numerically 0 or 1.
const DIVERGED_ETA: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Relative log-likelihood change treated as converged.
    pub rel_tol: f64,
    /// Max-norm of the score vector required at the solution.
    pub grad_tol: f64,
    /// Coefficients beyond this magnitude signal separation.
    pub separation_bound: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        IrlsOptions {
            max_iter: 100,
            rel_tol: 1e-10,
            grad_tol: 1e-8,
            separation_bound: 1e3,
        }
    }
}

/// Raw output of the IRLS iteration on an arbitrary model matrix.
#[derive(Debug, Clone)]
pub(crate) struct IrlsFit {
    pub beta: DVector<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `X' W X` at the solution.
    pub information: DMatrix<f64>,
}

pub(crate) fn eta_of(x: &DMatrix<f64>, beta: &DVector<f64>, offset: Option<&[f64]>) -> DVector<f64> {
    let mut eta = x * beta;
    if let Some(off) = offset {
        for (e, o) in eta.iter_mut().zip(off) {
            *e += o;
        }
    }
    eta
}

pub(crate) fn ll_of_eta(eta: &DVector<f64>, y: &[f64]) -> f64 {
    eta.iter().zip(y).map(|(&e, &yi)| bernoulli_ll_from_eta(yi, e)).sum()
}

/// `X' diag(w) X`, filling the upper triangle and mirroring it.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let (n, p) = x.shape();
    let data = x.as_slice();
    let col = |j: usize| &data[j * n..(j + 1) * n];
    let mut g = DMatrix::zeros(p, p);
    let mut wx = vec![0.0; n];
    for j in 0..p {
        for ((o, a), b) in wx.iter_mut().zip(col(j)).zip(w) {
            *o = a * b;
        }
        for k in j..p {
            let v = dot(&wx, col(k));
            g[(j, k)] = v;
            g[(k, j)] = v;
        }
    }
    g
}

/// Dot product with four partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn irls(x: &DMatrix<f64>, y: &[f64], offset: Option<&[f64]>, opts: &IrlsOptions) -> Result<IrlsFit> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(Error::TooFewObservations { n, columns: p });
    }
    let mut beta = DVector::zeros(p);
    let mut eta = eta_of(x, &beta, offset);
    let mut ll = ll_of_eta(&eta, y);
    let mut small_change = false;
    let mut stalled = 0;
    for iter in 1..=opts.max_iter {
        let mu: Vec<f64> = eta.iter().map(|&e| expit(e)).collect();
        let w: Vec<f64> = mu.iter().map(|m| m * (1.0 - m)).collect();
        let resid = DVector::from_iterator(n, y.iter().zip(&mu).map(|(yi, m)| yi - m));
        let grad = x.tr_mul(&resid);
        let info = weighted_gram(x, &w);
        if small_change && (grad.amax() <= opts.grad_tol || stalled >= 2) {
            // a stationary point with saturated fitted probabilities is a separated fit
            if eta.amax() > DIVERGED_ETA {
                return Err(Error::Separation);
            }
            return Ok(IrlsFit {
                beta,
                log_likelihood: ll,
                iterations: iter - 1,
                converged: true,
                information: info,
            });
        }
        let diverged = eta.amax() > DIVERGED_ETA;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(if diverged { Error::Separation } else { Error::Singular }),
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Err(if diverged { Error::Separation } else { Error::Singular });
        }
        let mut scale = 1.0;
        let (mut new_beta, mut new_eta, mut new_ll);
        loop {
            new_beta = &beta + &step * scale;
            new_eta = eta_of(x, &new_beta, offset);
            new_ll = ll_of_eta(&new_eta, y);
            if new_ll >= ll - 1e-12 * ll.abs() || scale < 1e-9 {
                break;
            }
            scale *= 0.5;
        }
        if new_beta.amax() > opts.separation_bound {
            return Err(Error::Separation);
        }
        let change = (new_ll - ll).abs() / (ll.abs() + 0.1);
        small_change = change <= opts.rel_tol;
        stalled = if new_ll == ll { stalled + 1 } else { 0 };
        beta = new_beta;
        eta = new_eta;
        ll = new_ll;
    }
    if eta.amax() > DIVERGED_ETA {
        Err(Error::Separation)
    } else {
        Err(Error::NoConvergence {
            iterations: opts.max_iter,
        })
    }
}

/// Result of any (penalized or not) logistic fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Raw covariate scale.
    pub coefficients: Coefficients,
    /// Design-ordered coefficients on the scale of the fitted design.
    pub beta_std: Vec<f64>,
    pub log_likelihood: f64,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n: usize,
    /// Number of nonzero design coefficients, intercept included.
    pub p_effective: usize,
    /// Wald standard errors on the raw scale, design order (ML fits only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standard_errors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kkt_residual: Option<f64>,
}

impl FitResult {
    pub(crate) fn from_std(design: &DesignMatrix, beta_std: &DVector<f64>, iterations: usize, converged: bool) -> Result<Self> {
        let coefficients = unstandardize_coefficients(beta_std.as_slice(), design.scaling(), design.roles())?;
        Ok(FitResult {
            coefficients,
            beta_std: beta_std.as_slice().to_vec(),
            log_likelihood: f64::NAN,
            deviance: f64::NAN,
            iterations,
            converged,
            n: design.nrows(),
            p_effective: beta_std.iter().filter(|b| **b != 0.0).count(),
            standard_errors: None,
            lambda: None,
            kkt_residual: None,
        })
    }

    pub(crate) fn with_likelihood(mut self, ll: f64) -> Self {
        self.log_likelihood = ll;
        self.deviance = -2.0 * ll;
        self
    }
}

/// Jacobian of the standardized-to-raw coefficient map.
fn raw_jacobian(design: &DesignMatrix) -> DMatrix<f64> {
    let p = design.ncols();
    let mut j = DMatrix::zeros(p, p);
    let intercept = design.roles().iter().position(|r| r.is_intercept());
    for (c, s) in design.scaling().iter().enumerate() {
        if Some(c) == intercept {
            j[(c, c)] = 1.0;
            continue;
        }
        j[(c, c)] = 1.0 / s.sd;
        if let Some(c0) = intercept {
            j[(c0, c)] = -s.mean / s.sd;
        }
    }
    j
}

fn check_outcome(design: &DesignMatrix, outcome: &[u8]) -> Result<Vec<f64>> {
    if outcome.len() != design.nrows() {
        return Err(Error::LengthMismatch {
            expected: design.nrows(),
            actual: outcome.len(),
        });
    }
    Ok(outcome.iter().map(|&v| f64::from(v)).collect())
}

/// Maximum likelihood fit of a logistic model.
pub fn fit_ml(design: &DesignMatrix, outcome: &[u8]) -> Result<FitResult> {
    fit_ml_with(design, outcome, &IrlsOptions::default())
}

pub fn fit_ml_with(design: &DesignMatrix, outcome: &[u8], opts: &IrlsOptions) -> Result<FitResult> {
    let y = check_outcome(design, outcome)?;
    let fit = irls(design.matrix(), &y, design.offset(), opts)?;
    let mut result = FitResult::from_std(design, &fit.beta, fit.iterations, fit.converged)?.with_likelihood(fit.log_likelihood);
    result.p_effective = design.ncols();
    if let Some(ch) = fit.information.clone().cholesky() {
        let cov = ch.inverse();
        let jac = raw_jacobian(design);
        let raw_cov = &jac * cov * jac.transpose();
        result.standard_errors = Some(raw_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect());
    }
    Ok(result)
}

/// Sum of Bernoulli log-likelihood terms; risks are clamped away from 0 and 1.
pub fn log_likelihood(risk: &[f64], outcome: &[u8]) -> Result<f64> {
    if risk.len() != outcome.len() {
        return Err(Error::LengthMismatch {
            expected: outcome.len(),
            actual: risk.len(),
        });
    }
    Ok(risk
        .iter()
        .zip(outcome)
        .map(|(&r, &y)| {
            let r = clamp_risk(r);
            if y == 1 {
                r.ln()
            } else {
                (1.0 - r).ln()
            }
        })
        .sum())
}

/// Upper-tail chi-square p-value of the likelihood-ratio statistic.
pub fn lr_test(full: &FitResult, reduced: &FitResult, df: usize) -> Result<f64> {
    lr_test_ll(full.log_likelihood, reduced.log_likelihood, df)
}

pub fn lr_test_ll(full_ll: f64, reduced_ll: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::InvalidConfig("likelihood-ratio test needs df >= 1".into()));
    }
    let stat = 2.0 * (full_ll - reduced_ll);
    if stat < -2e-8 {
        return Err(Error::NegativeStatistic(stat));
    }
    chi_square_sf(stat.max(0.0), df)
}

pub fn chi_square_sf(stat: f64, df: usize) -> Result<f64> {
    if stat <= 0.0 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new(df as f64).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(dist.sf(stat).clamp(0.0, 1.0))
}

/// Predicted risks and the log-odds they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskPrediction {
    pub risk: Vec<f64>,
    pub linear_predictor: Vec<f64>,
}

impl RiskPrediction {
    pub fn from_linear_predictor(eta: Vec<f64>) -> Self {
        RiskPrediction {
            risk: eta.iter().map(|&e| expit(e)).collect(),
            linear_predictor: eta,
        }
    }
}

/// Risk under the design's own treatment values, or with every subject set to
/// `treatment_override` (treatment column and every interaction column).
pub fn predict_risk(coefficients: &Coefficients, design: &DesignMatrix, treatment_override: Option<u8>) -> Result<RiskPrediction> {
    let beta = coefficients.to_vector();
    if beta.len() != design.ncols() || coefficients.beta_t.is_some() != design.spec().include_treatment {
        return Err(Error::LengthMismatch {
            expected: design.ncols(),
            actual: beta.len(),
        });
    }
    let mut raw = design.unstandardized();
    if let Some(a) = treatment_override {
        let a = f64::from(a);
        let roles = design.roles().to_vec();
        for (c, role) in roles.iter().enumerate() {
            match *role {
                ColumnRole::Treatment => raw.column_mut(c).fill(a),
                ColumnRole::Interaction(j) => {
                    let parent = roles
                        .iter()
                        .position(|r| *r == ColumnRole::Main(j))
                        .ok_or(Error::HierarchyViolation(j))?;
                    let main = raw.column(parent).clone_owned();
                    raw.column_mut(c).copy_from(&(main * a));
                }
                _ => {}
            }
        }
    }
    let eta = eta_of(&raw, &DVector::from_vec(beta), design.offset());
    Ok(RiskPrediction::from_linear_predictor(eta.as_slice().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use crate::tabular::{build_design, Dataset, DesignSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weighted_gram_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(23, 5, |_, _| rng.random::<f64>() - 0.5);
        let w: Vec<f64> = (0..23).map(|_| rng.random::<f64>()).collect();
        let g = weighted_gram(&x, &w);
        for j in 0..5 {
            for k in 0..5 {
                let direct: f64 = (0..23).map(|i| w[i] * x[(i, j)] * x[(i, k)]).sum();
                assert!((g[(j, k)] - direct).abs() < 1e-13);
            }
        }
    }

    fn intercept_only() -> DesignSpec {
        DesignSpec {
            main_columns: vec![],
            interaction_columns: vec![],
            include_treatment: false,
            standardize: false,
            offset: None,
        }
    }

    fn logistic_data(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let a: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let y = (0..n)
            .map(|i| {
                let eta = -0.5 + 0.4 * f64::from(a[i]) + (0..p).map(|j| x[(i, j)] * (1.0 - 0.3 * j as f64)).sum::<f64>();
                u8::from(rng.random::<f64>() < expit(eta))
            })
            .collect();
        Dataset::from_parts(x, a, y).unwrap()
    }

    #[test]
    fn intercept_only_mle_is_logit_of_mean() {
        let y: Vec<u8> = (0..100).map(|i| u8::from(i < 25)).collect();
        let d = Dataset::from_parts(DMatrix::zeros(100, 0), vec![0; 100], y.clone()).unwrap();
        let dm = build_design(&d, &intercept_only()).unwrap();
        let fit = fit_ml(&dm, &y).unwrap();
        assert!((fit.coefficients.beta0 - logit(0.25)).abs() < 1e-9);
        assert!((fit.coefficients.beta0 + 1.098612).abs() < 1e-6);
        assert!(fit.converged);
        assert!((fit.deviance + 2.0 * fit.log_likelihood).abs() < 1e-12);
    }

    #[test]
    fn saturated_two_by_two_table() {
        // x=0: 10 events of 50; x=1: 25 events of 50
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (xv, events) in [(0.0, 10), (1.0, 25)] {
            for i in 0..50 {
                x.push(xv);
                y.push(u8::from(i < events));
            }
        }
        let d = Dataset::from_parts(DMatrix::from_vec(100, 1, x), vec![0; 100], y.clone()).unwrap();
        for standardize in [false, true] {
            let spec = DesignSpec {
                standardize,
                ..DesignSpec::mains_only(1)
            };
            let fit = fit_ml(&build_design(&d, &spec).unwrap(), &y).unwrap();
            assert!((fit.coefficients.beta0 - (10.0f64 / 40.0).ln()).abs() < 1e-8);
            assert!((fit.coefficients.beta_m[0] - (1.0f64 / (10.0 / 40.0)).ln()).abs() < 1e-8);
            assert!((fit.coefficients.beta0 + 1.386294).abs() < 1e-6);
        }
    }

    #[test]
    fn separation_is_detected() {
        let xs: Vec<f64> = (-10..10).map(|i| f64::from(i) + 0.5).collect();
        let y: Vec<u8> = xs.iter().map(|&v| u8::from(v > 0.0)).collect();
        let d = Dataset::from_parts(DMatrix::from_vec(20, 1, xs), vec![0; 20], y.clone()).unwrap();
        let dm = build_design(&d, &DesignSpec::mains_only(1)).unwrap();
        assert_eq!(fit_ml(&dm, &y).unwrap_err(), Error::Separation);
    }

    #[test]
    fn too_few_observations() {
        let d = logistic_data(3, 3, 1);
        let dm = build_design(&d, &DesignSpec::homogeneous(3)).unwrap();
        assert!(matches!(fit_ml(&dm, d.outcome()), Err(Error::TooFewObservations { .. })));
    }

    #[test]
    fn score_equations_hold_at_solution() {
        let d = logistic_data(400, 4, 3);
        let dm = build_design(&d, &DesignSpec::full_interaction(4)).unwrap();
        let fit = fit_ml(&dm, d.outcome()).unwrap();
        let beta = DVector::from_vec(fit.beta_std.clone());
        let eta = dm.linear_predictor(&beta);
        let resid = DVector::from_iterator(400, eta.iter().zip(d.outcome()).map(|(&e, &y)| f64::from(y) - expit(e)));
        assert!(dm.matrix().tr_mul(&resid).amax() <= 1e-8);
    }

    #[test]
    fn standardized_and_raw_fits_agree() {
        let d = logistic_data(300, 3, 4);
        let raw_spec = DesignSpec {
            standardize: false,
            ..DesignSpec::full_interaction(3)
        };
        let a = fit_ml(&build_design(&d, &raw_spec).unwrap(), d.outcome()).unwrap();
        let b = fit_ml(&build_design(&d, &DesignSpec::full_interaction(3)).unwrap(), d.outcome()).unwrap();
        for (x, y) in a.coefficients.to_vector().iter().zip(b.coefficients.to_vector()) {
            assert!((x - y).abs() < 1e-8);
        }
        let (sa, sb) = (a.standard_errors.unwrap(), b.standard_errors.unwrap());
        for (x, y) in sa.iter().zip(&sb) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn row_permutation_invariance() {
        let d = logistic_data(250, 3, 5);
        let spec = DesignSpec::full_interaction(3);
        let a = fit_ml(&build_design(&d, &spec).unwrap(), d.outcome()).unwrap();
        let perm: Vec<usize> = (0..250).rev().collect();
        let dp = d.select_rows(&perm).unwrap();
        let b = fit_ml(&build_design(&dp, &spec).unwrap(), dp.outcome()).unwrap();
        for (x, y) in a.coefficients.to_vector().iter().zip(b.coefficients.to_vector()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn log_likelihood_examples() {
        let y = [0u8, 1, 1, 0];
        let perfect: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        let ll = log_likelihood(&perfect, &y).unwrap();
        assert!((-4.0 * 1e-11..=0.0).contains(&ll));
        let half = log_likelihood(&[0.5; 4], &y).unwrap();
        assert!((half - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        let hand = log_likelihood(&[0.2, 0.7], &[0, 1]).unwrap();
        assert!((hand - (0.8f64.ln() + 0.7f64.ln())).abs() < 1e-12);
        assert!((hand + 0.579818).abs() < 1e-6);
        assert!(matches!(log_likelihood(&[0.5], &y), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn lr_test_examples() {
        assert_eq!(lr_test_ll(-10.0, -10.0, 1).unwrap(), 1.0);
        assert_eq!(lr_test_ll(-10.0, -10.0, 12).unwrap(), 1.0);
        let p = lr_test_ll(-10.0, -10.0 - 3.841 / 2.0, 1).unwrap();
        assert!((p - 0.05).abs() < 5e-4, "{p}");
        assert!(matches!(lr_test_ll(-11.0, -10.0, 1), Err(Error::NegativeStatistic(_))));
    }

    #[test]
    fn chi_square_tail_against_series_oracle() {
        // df=2 has the closed form exp(-x/2)
        for x in [0.5, 2.0, 5.99, 13.8] {
            assert!((chi_square_sf(x, 2).unwrap() - (-x / 2.0f64).exp()).abs() < 1e-12);
        }
        // df=1: 2*(1 - Phi(sqrt(x))) via erfc
        let p = chi_square_sf(3.841458820694124, 1).unwrap();
        assert!((p - 0.05).abs() < 1e-10);
    }

    #[test]
    fn predict_risk_examples() {
        let d = logistic_data(5, 0, 6);
        let spec = DesignSpec {
            standardize: false,
            ..DesignSpec::homogeneous(0)
        };
        let dm = build_design(&d, &spec).unwrap();
        let zero = Coefficients {
            beta0: 0.0,
            beta_t: Some(0.0),
            beta_m: vec![],
            beta_z: vec![],
        };
        assert!(predict_risk(&zero, &dm, None).unwrap().risk.iter().all(|&r| r == 0.5));
        let c = Coefficients {
            beta_t: Some(-1.0),
            ..zero.clone()
        };
        let r = predict_risk(&c, &dm, Some(1)).unwrap();
        assert!(r.risk.iter().all(|&v| (v - 0.2689).abs() < 1e-4));
        let c = Coefficients {
            beta0: -1.0,
            beta_t: Some(-1.0),
            ..zero
        };
        let r = predict_risk(&c, &dm, Some(1)).unwrap();
        assert!(r.risk.iter().all(|&v| (v - 0.1192).abs() < 1e-4));
    }

    #[test]
    fn predict_override_switches_interactions() {
        let d = logistic_data(30, 2, 7);
        let spec = DesignSpec::full_interaction(2);
        let dm = build_design(&d, &spec).unwrap();
        let fit = fit_ml(&dm, d.outcome()).unwrap();
        let c = &fit.coefficients;
        let r1 = predict_risk(c, &dm, Some(1)).unwrap();
        let ones = vec![1.0; 30];
        let eta = c.linear_predictor(d.covariates(), &ones, &spec, None).unwrap();
        for (a, b) in r1.linear_predictor.iter().zip(&eta) {
            assert!((a - b).abs() < 1e-10);
        }
        let own = predict_risk(c, &dm, None).unwrap();
        let eta = c.linear_predictor(d.covariates(), &d.treatment_f64(), &spec, None).unwrap();
        for (a, b) in own.linear_predictor.iter().zip(&eta) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
