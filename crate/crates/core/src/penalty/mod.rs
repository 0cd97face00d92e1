//! Penalized maximum likelihood for logistic models.
//!
//! Both solvers minimize `-(1/n) loglik(beta) + penalty(beta)` on the scale of
//! the supplied design (normally standardized). They share an outer loop that
//! replaces the log-likelihood by its second-order expansion at the current
//! iterate (the IRLS quadratic), with step-halving on the true objective:
//!
//! * elastic net / ridge / lasso: cyclic coordinate descent with
//!   soft-thresholding on the quadratic;
//! * hierarchical group lasso: accelerated proximal gradient with group
//!   soft-thresholding on an overlapped latent expansion in which every
//!   treatment interaction shares a group with latent copies of its treatment
//!   and covariate main effects, which yields strong hierarchy.
//!
//! The intercept is never penalized.

mod cv;
mod elastic_net;
mod hgl;

pub use cv::{cv_select, cv_select_lambdas, cv_select_with_folds, make_folds, CvResult};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{eta_of, irls, ll_of_eta, weighted_gram, FitResult, IrlsOptions};
use crate::math::expit;
use crate::tabular::{ColumnRole, DesignMatrix};

use hgl::LatentMap;

/// Outer (IRLS) iteration cap.
pub const MAX_OUTER: usize = 100;
/// Inner solver iteration cap per outer step.
pub const MAX_INNER: usize = 10_000;
/// Floor on IRLS weights when forming the quadratic; the fixed point is unaffected.
const MIN_WEIGHT: f64 = 1e-5;
/// Outer convergence: max coefficient change on the design scale.
const OUTER_TOL: f64 = 1e-10;
/// Ridge paths start where a lasso with this mixing would be null.
const RIDGE_ALPHA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyFamily {
    Ridge,
    Lasso,
    ElasticNet,
    HierarchicalGroupLasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub family: PenaltyFamily,
    pub lambda: f64,
    /// Elastic-net mixing; ignored for ridge (0), lasso (1) and group lasso.
    pub alpha: f64,
    pub penalize_treatment_main: bool,
    pub path_length: usize,
    /// `None` picks 1e-4 when n exceeds the column count and 1e-2 otherwise
    /// (1e-2 always for the group lasso).
    pub lambda_min_ratio: Option<f64>,
}

impl PenaltyConfig {
    pub fn new(family: PenaltyFamily, lambda: f64) -> Self {
        PenaltyConfig {
            family,
            lambda,
            alpha: match family {
                PenaltyFamily::Ridge => 0.0,
                PenaltyFamily::ElasticNet => 0.5,
                _ => 1.0,
            },
            penalize_treatment_main: true,
            path_length: 50,
            lambda_min_ratio: None,
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self::new(PenaltyFamily::Ridge, lambda)
    }

    pub fn lasso(lambda: f64) -> Self {
        Self::new(PenaltyFamily::Lasso, lambda)
    }

    pub fn elastic_net(lambda: f64, alpha: f64) -> Self {
        PenaltyConfig {
            alpha,
            ..Self::new(PenaltyFamily::ElasticNet, lambda)
        }
    }

    pub fn hgl(lambda: f64) -> Self {
        Self::new(PenaltyFamily::HierarchicalGroupLasso, lambda)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        PenaltyConfig {
            lambda,
            ..self.clone()
        }
    }

    pub fn with_path(mut self, path_length: usize, lambda_min_ratio: Option<f64>) -> Self {
        self.path_length = path_length;
        self.lambda_min_ratio = lambda_min_ratio;
        self
    }

    /// Mixing actually used by the elastic-net solver.
    pub fn effective_alpha(&self) -> f64 {
        match self.family {
            PenaltyFamily::Ridge => 0.0,
            PenaltyFamily::Lasso | PenaltyFamily::HierarchicalGroupLasso => 1.0,
            PenaltyFamily::ElasticNet => self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(r) = self.lambda_min_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidConfig(format!("lambda_min_ratio must lie in (0, 1), got {r}")));
            }
        }
        Ok(())
    }

    fn min_ratio(&self, n: usize, columns: usize) -> f64 {
        self.lambda_min_ratio.unwrap_or(match self.family {
            PenaltyFamily::HierarchicalGroupLasso => 1e-2,
            _ if n > columns => 1e-4,
            _ => 1e-2,
        })
    }
}

/// Warm-start state carried along a path.
#[derive(Debug, Clone)]
pub(crate) enum WarmStart {
    Coefficients(DVector<f64>),
    Latent(DVector<f64>),
}

/// A design/outcome pair prepared for repeated penalized solves.
pub(crate) struct Problem<'a> {
    design: &'a DesignMatrix,
    y: Vec<f64>,
    config: PenaltyConfig,
    /// 1 for penalized columns, 0 otherwise.
    penalty_factor: Vec<f64>,
    latent: Option<LatentMap>,
    null_beta: DVector<f64>,
    /// `(1/n) X'(y - mu)` at the null model.
    null_score: DVector<f64>,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(design: &'a DesignMatrix, outcome: &[u8], config: &PenaltyConfig) -> Result<Self> {
        config.validate()?;
        if outcome.len() != design.nrows() {
            return Err(Error::LengthMismatch {
                expected: design.nrows(),
                actual: outcome.len(),
            });
        }
        let y: Vec<f64> = outcome.iter().map(|&v| f64::from(v)).collect();
        let penalty_factor: Vec<f64> = design
            .roles()
            .iter()
            .map(|r| match r {
                ColumnRole::Intercept => 0.0,
                ColumnRole::Treatment if !config.penalize_treatment_main => 0.0,
                _ => 1.0,
            })
            .collect();
        let latent = match config.family {
            PenaltyFamily::HierarchicalGroupLasso => Some(LatentMap::new(design.roles(), config.penalize_treatment_main)),
            _ => None,
        };
        // null model: unpenalized columns only
        let free: Vec<usize> = (0..design.ncols()).filter(|&j| penalty_factor[j] == 0.0).collect();
        let mut null_beta = DVector::zeros(design.ncols());
        if !free.is_empty() {
            let sub = design.matrix().select_columns(free.iter());
            let fit = irls(&sub, &y, design.offset(), &IrlsOptions::default())?;
            for (k, &j) in free.iter().enumerate() {
                null_beta[j] = fit.beta[k];
            }
        }
        let null_score = score(design, &y, &null_beta);
        Ok(Problem {
            design,
            y,
            config: config.clone(),
            penalty_factor,
            latent,
            null_beta,
            null_score,
        })
    }

    fn n(&self) -> f64 {
        self.y.len() as f64
    }

    /// Smallest penalty at which every penalized coefficient is zero.
    pub(crate) fn lambda_max(&self) -> f64 {
        match &self.latent {
            Some(map) => map.lambda_max(&self.null_score),
            None => {
                let alpha = self.config.effective_alpha().max(RIDGE_ALPHA_FLOOR);
                self.null_score
                    .iter()
                    .zip(&self.penalty_factor)
                    .filter(|(_, pf)| **pf > 0.0)
                    .map(|(g, _)| g.abs())
                    .fold(0.0, f64::max)
                    / alpha
            }
        }
    }

    pub(crate) fn default_path(&self) -> Vec<f64> {
        let ratio = self.config.min_ratio(self.design.nrows(), self.design.ncols());
        geometric_grid(self.lambda_max(), ratio, self.config.path_length)
    }

    pub(crate) fn solve(&self, lambda: f64, warm: &mut Option<WarmStart>) -> Result<FitResult> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        match &self.latent {
            Some(map) => hgl::solve(self, map, lambda, warm),
            None => elastic_net::solve(self, lambda, warm),
        }
    }

    /// Penalized objective for a design-scale coefficient vector (elastic net).
    fn loss(&self, beta: &DVector<f64>) -> f64 {
        let eta = eta_of(self.design.matrix(), beta, self.design.offset());
        -ll_of_eta(&eta, &self.y) / self.n()
    }

    /// IRLS quadratic at `beta`: Hessian `X'WX/n` and linear term `H beta + score`.
    fn quadratic(&self, beta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let x = self.design.matrix();
        let eta = eta_of(x, beta, self.design.offset());
        let n = self.n();
        let mut w = vec![0.0; x.nrows()];
        let mut resid = DVector::zeros(x.nrows());
        for i in 0..x.nrows() {
            let mu = expit(eta[i]);
            w[i] = (mu * (1.0 - mu)).max(MIN_WEIGHT);
            resid[i] = self.y[i] - mu;
        }
        let h = weighted_gram(x, &w) / n;
        let g = x.tr_mul(&resid) / n;
        let c = &h * beta + g;
        (h, c)
    }

    fn finish(&self, beta: &DVector<f64>, iterations: usize, lambda: f64, kkt: f64) -> Result<FitResult> {
        let eta = eta_of(self.design.matrix(), beta, self.design.offset());
        let ll = ll_of_eta(&eta, &self.y);
        let mut fit = FitResult::from_std(self.design, beta, iterations, true)?.with_likelihood(ll);
        fit.lambda = Some(lambda);
        fit.kkt_residual = Some(kkt);
        Ok(fit)
    }
}

/// `(1/n) X'(y - mu)` at `beta`.
fn score(design: &DesignMatrix, y: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let x = design.matrix();
    let eta = eta_of(x, beta, design.offset());
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, &yi)| yi - expit(e)));
    x.tr_mul(&resid) / y.len() as f64
}

/// `len` points from `max` down to `max * ratio`, equally spaced in log scale.
pub fn geometric_grid(max: f64, ratio: f64, len: usize) -> Vec<f64> {
    match len {
        0 => Vec::new(),
        1 => vec![max],
        _ => (0..len)
            .map(|k| max * ratio.powf(k as f64 / (len - 1) as f64))
            .collect(),
    }
}

/// Elastic-net family fit (ridge, lasso, elastic net) at `config.lambda`.
pub fn fit_elastic_net(design: &DesignMatrix, outcome: &[u8], config: &PenaltyConfig) -> Result<FitResult> {
    if config.family == PenaltyFamily::HierarchicalGroupLasso {
        return Err(Error::InvalidConfig("use fit_hgl for the group lasso".into()));
    }
    Problem::new(design, outcome, config)?.solve(config.lambda, &mut None)
}

/// Strong-hierarchy group lasso fit at `config.lambda`.
pub fn fit_hgl(design: &DesignMatrix, outcome: &[u8], config: &PenaltyConfig) -> Result<FitResult> {
    let config = PenaltyConfig {
        family: PenaltyFamily::HierarchicalGroupLasso,
        ..config.clone()
    };
    Problem::new(design, outcome, &config)?.solve(config.lambda, &mut None)
}

/// Dispatches on `config.family`.
pub fn fit_penalized(design: &DesignMatrix, outcome: &[u8], config: &PenaltyConfig) -> Result<FitResult> {
    Problem::new(design, outcome, config)?.solve(config.lambda, &mut None)
}

/// Smallest penalty giving the all-zero penalized solution.
pub fn lambda_max(design: &DesignMatrix, outcome: &[u8], config: &PenaltyConfig) -> Result<f64> {
    Ok(Problem::new(design, outcome, config)?.lambda_max())
}

/// Warm-started fits along a decreasing penalty grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub lambdas: Vec<f64>,
    pub fits: Vec<FitResult>,
}

pub fn lambda_path(design: &DesignMatrix, outcome: &[u8], config: &PenaltyConfig) -> Result<LambdaPath> {
    if config.path_length < 2 {
        return Err(Error::InvalidConfig("path_length must be at least 2".into()));
    }
    let problem = Problem::new(design, outcome, config)?;
    let lambdas = problem.default_path();
    let mut warm = None;
    let fits = lambdas
        .iter()
        .map(|&l| problem.solve(l, &mut warm))
        .collect::<Result<Vec<_>>>()?;
    Ok(LambdaPath { lambdas, fits })
}
