use nalgebra::{DMatrix, DVector};

use super::{score, Problem, WarmStart, MAX_INNER, MAX_OUTER, OUTER_TOL};
use crate::error::{Error, Result};
use crate::glm::FitResult;

const INNER_TOL: f64 = 1e-13;
/// Stationarity residual at which a fit is accepted.
const KKT_TOL: f64 = 1e-10;

pub(crate) fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

struct Weights {
    l1: Vec<f64>,
    l2: Vec<f64>,
}

impl Weights {
    fn new(problem: &Problem, lambda: f64) -> Self {
        let alpha = problem.config.effective_alpha();
        Weights {
            l1: problem.penalty_factor.iter().map(|pf| lambda * alpha * pf).collect(),
            l2: problem.penalty_factor.iter().map(|pf| lambda * (1.0 - alpha) * pf).collect(),
        }
    }

    fn penalty(&self, beta: &DVector<f64>) -> f64 {
        beta.iter()
            .enumerate()
            .map(|(j, b)| self.l1[j] * b.abs() + 0.5 * self.l2[j] * b * b)
            .sum()
    }
}

/// Cyclic coordinate descent on `0.5 b'Hb - c'b + penalty`, sweeping the
/// active set between full passes. Returns the number of passes.
fn coordinate_descent(h: &DMatrix<f64>, c: &DVector<f64>, beta: &mut DVector<f64>, w: &Weights) -> Result<usize> {
    let p = beta.len();
    let mut hb = h * &*beta;
    let mut passes = 0;
    let mut full_pass = true;
    loop {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if !full_pass && beta[j] == 0.0 {
                continue;
            }
            let hjj = h[(j, j)];
            let denom = hjj + w.l2[j];
            if denom <= 1e-14 {
                continue;
            }
            let z = c[j] - hb[j] + hjj * beta[j];
            let new = soft_threshold(z, w.l1[j]) / denom;
            let delta = new - beta[j];
            if delta != 0.0 {
                hb.axpy(delta, &h.column(j), 1.0);
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        passes += 1;
        if passes > MAX_INNER {
            return Err(Error::NoConvergence { iterations: MAX_INNER });
        }
        if max_delta < INNER_TOL {
            if full_pass {
                return Ok(passes);
            }
            full_pass = true;
        } else {
            full_pass = false;
        }
    }
}

/// Max violation of the stationarity conditions at `beta`.
fn kkt_residual(problem: &Problem, beta: &DVector<f64>, w: &Weights) -> f64 {
    let s = score(problem.design, &problem.y, beta);
    (0..beta.len())
        .map(|j| {
            let grad = -s[j] + w.l2[j] * beta[j];
            if beta[j] != 0.0 {
                (grad + w.l1[j] * beta[j].signum()).abs()
            } else {
                (grad.abs() - w.l1[j]).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub(super) fn solve(problem: &Problem, lambda: f64, warm: &mut Option<WarmStart>) -> Result<FitResult> {
    let w = Weights::new(problem, lambda);
    let alpha = problem.config.effective_alpha();
    // the null model is exact when every penalized score is inside the l1 ball
    if alpha > 0.0
        && problem
            .null_score
            .iter()
            .zip(&problem.penalty_factor)
            .all(|(g, pf)| *pf == 0.0 || g.abs() <= lambda * alpha)
    {
        let beta = problem.null_beta.clone();
        let kkt = kkt_residual(problem, &beta, &w);
        *warm = Some(WarmStart::Coefficients(beta.clone()));
        return problem.finish(&beta, 0, lambda, kkt);
    }
    let mut beta = match warm {
        Some(WarmStart::Coefficients(b)) if b.len() == problem.null_beta.len() => b.clone(),
        _ => problem.null_beta.clone(),
    };
    let objective = |b: &DVector<f64>| problem.loss(b) + w.penalty(b);
    let mut obj = objective(&beta);
    for outer in 1..=MAX_OUTER {
        let (h, c) = problem.quadratic(&beta);
        let mut candidate = beta.clone();
        coordinate_descent(&h, &c, &mut candidate, &w)?;
        let mut cand_obj = objective(&candidate);
        let mut halvings = 0;
        while !(cand_obj <= obj + 1e-13 * obj.abs()) && halvings < 40 {
            candidate = (&candidate + &beta) * 0.5;
            cand_obj = objective(&candidate);
            halvings += 1;
        }
        let change = (&candidate - &beta).amax();
        beta = candidate;
        obj = cand_obj;
        let kkt = kkt_residual(problem, &beta, &w);
        if change < OUTER_TOL || kkt < KKT_TOL {
            *warm = Some(WarmStart::Coefficients(beta.clone()));
            return problem.finish(&beta, outer, lambda, kkt);
        }
    }
    Err(Error::NoConvergence { iterations: MAX_OUTER })
}

#[cfg(test)]
mod tests {
    use super::super::tests::sim_data;
    use super::super::*;
    use super::soft_threshold;
    use crate::math::logit;
    use crate::tabular::{build_design, DesignSpec};

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn lasso_at_lambda_max_is_null_model() {
        let d = sim_data(120, 3, 11, 0.0);
        let spec = DesignSpec::homogeneous(3);
        let dm = build_design(&d, &spec).unwrap();
        // lambda_max from the definition: max_j |x_j'(y - ybar)| / n on the standardized design
        let n = d.n() as f64;
        let ybar = d.outcome().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let lmax = (1..dm.ncols())
            .map(|j| {
                dm.matrix()
                    .column(j)
                    .iter()
                    .zip(d.outcome())
                    .map(|(x, &y)| x * (f64::from(y) - ybar))
                    .sum::<f64>()
                    .abs()
                    / n
            })
            .fold(0.0, f64::max);
        let computed = lambda_max(&dm, d.outcome(), &PenaltyConfig::lasso(0.0)).unwrap();
        assert!((computed - lmax).abs() < 1e-12);
        for lambda in [lmax, 2.0 * lmax] {
            let fit = fit_elastic_net(&dm, d.outcome(), &PenaltyConfig::lasso(lambda)).unwrap();
            assert!(fit.beta_std[1..].iter().all(|b| *b == 0.0));
            assert!((fit.coefficients.beta0 - logit(ybar)).abs() < 1e-9);
        }
        let below = fit_elastic_net(&dm, d.outcome(), &PenaltyConfig::lasso(0.9 * lmax)).unwrap();
        assert!(below.beta_std[1..].iter().any(|b| *b != 0.0));
    }

    #[test]
    fn kkt_conditions_hold() {
        let d = sim_data(150, 4, 12, 0.5);
        let dm = build_design(&d, &DesignSpec::full_interaction(4)).unwrap();
        for config in [
            PenaltyConfig::lasso(0.02),
            PenaltyConfig::ridge(0.1),
            PenaltyConfig::elastic_net(0.03, 0.3),
        ] {
            let fit = fit_elastic_net(&dm, d.outcome(), &config).unwrap();
            assert!(fit.kkt_residual.unwrap() <= 1e-7, "{:?} {:?}", config.family, fit.kkt_residual);
        }
    }

    #[test]
    fn unpenalized_treatment_stays_free() {
        let d = sim_data(200, 3, 13, 0.0);
        let dm = build_design(&d, &DesignSpec::homogeneous(3)).unwrap();
        let mut config = PenaltyConfig::lasso(10.0);
        config.penalize_treatment_main = false;
        let fit = fit_elastic_net(&dm, d.outcome(), &config).unwrap();
        assert!(fit.beta_std[1] != 0.0);
        assert!(fit.beta_std[2..].iter().all(|b| *b == 0.0));
    }
}
