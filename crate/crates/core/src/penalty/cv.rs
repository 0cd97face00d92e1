use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PenaltyConfig, Problem};
use crate::error::{Error, Result};
use crate::glm::{eta_of, ll_of_eta, FitResult};
use crate::tabular::DesignMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    /// Fold id in `1..=k` for every row.
    pub fold_assignments: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Held-out deviance `-2/n_test * loglik`, indexed `[fold][lambda]`; `+inf` where the fit failed.
    pub fold_deviance: Vec<Vec<f64>>,
    /// Design-scale coefficients of every fold fit, `None` where the fit failed.
    pub fold_coefficients: Vec<Vec<Option<Vec<f64>>>>,
    pub mean_deviance: Vec<f64>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    /// Full-data fit at the chosen penalty.
    pub chosen_fit: FitResult,
}

/// Seeded permutation of `0..n` cut into `k` contiguous blocks whose sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::TooFewObservations { n, columns: k });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &row) in perm.iter().enumerate() {
        folds[row] = pos * k / n + 1;
    }
    Ok(folds)
}

/// K-fold cross-validated choice of λ over the default path of `config`
/// (or `config.lambda` alone when `path_length` is 1).
pub fn cv_select(design: &DesignMatrix, outcome: &[u8], config: &PenaltyConfig, k: usize, seed: u64) -> Result<CvResult> {
    let folds = make_folds(design.nrows(), k, seed)?;
    cv_select_with_folds(design, outcome, config, &folds)
}

pub fn cv_select_with_folds(design: &DesignMatrix, outcome: &[u8], config: &PenaltyConfig, folds: &[usize]) -> Result<CvResult> {
    let lambdas = if config.path_length <= 1 {
        vec![config.lambda]
    } else {
        Problem::new(design, outcome, config)?.default_path()
    };
    cv_select_lambdas(design, outcome, config, &lambdas, folds)
}

/// Cross-validation over an explicit decreasing penalty sequence.
///
/// Fold fits reuse the full-data standardization so every fold works on the
/// same coefficient scale. A fold whose fit fails contributes `+inf` at the
/// affected penalties; ties in mean deviance go to the larger penalty.
pub fn cv_select_lambdas(
    design: &DesignMatrix,
    outcome: &[u8],
    config: &PenaltyConfig,
    lambdas: &[f64],
    folds: &[usize],
) -> Result<CvResult> {
    config.validate()?;
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty penalty sequence".into()));
    }
    if folds.len() != design.nrows() || outcome.len() != design.nrows() {
        return Err(Error::LengthMismatch {
            expected: design.nrows(),
            actual: if folds.len() != design.nrows() { folds.len() } else { outcome.len() },
        });
    }
    let k = folds.iter().copied().max().unwrap_or(0);
    if k < 2 || folds.contains(&0) {
        return Err(Error::InvalidConfig("fold ids must lie in 1..=k with k >= 2".into()));
    }
    let y: Vec<f64> = outcome.iter().map(|&v| f64::from(v)).collect();
    let per_fold: Vec<(Vec<f64>, Vec<Option<Vec<f64>>>)> = (1..=k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != fold).collect();
            let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == fold).collect();
            fold_path(design, outcome, &y, config, lambdas, &train, &test)
        })
        .collect();
    let (fold_deviance, fold_coefficients): (Vec<_>, Vec<_>) = per_fold.into_iter().unzip();
    let mean_deviance: Vec<f64> = (0..lambdas.len())
        .map(|l| fold_deviance.iter().map(|d| d[l]).sum::<f64>() / k as f64)
        .collect();
    let mut chosen_index = None;
    for (l, &d) in mean_deviance.iter().enumerate() {
        if d.is_finite() && chosen_index.is_none_or(|c: usize| d < mean_deviance[c]) {
            chosen_index = Some(l);
        }
    }
    let chosen_index = chosen_index.ok_or(Error::DegenerateFold)?;
    let problem = Problem::new(design, outcome, config)?;
    let mut warm = None;
    let mut chosen_fit = None;
    for &lambda in &lambdas[..=chosen_index] {
        chosen_fit = Some(problem.solve(lambda, &mut warm)?);
    }
    Ok(CvResult {
        fold_assignments: folds.to_vec(),
        lambdas: lambdas.to_vec(),
        fold_deviance,
        fold_coefficients,
        mean_deviance,
        chosen_index,
        chosen_lambda: lambdas[chosen_index],
        chosen_fit: chosen_fit.expect("non-empty penalty prefix"),
    })
}

fn fold_path(
    design: &DesignMatrix,
    outcome: &[u8],
    y: &[f64],
    config: &PenaltyConfig,
    lambdas: &[f64],
    train: &[usize],
    test: &[usize],
) -> (Vec<f64>, Vec<Option<Vec<f64>>>) {
    let failed = (vec![f64::INFINITY; lambdas.len()], vec![None; lambdas.len()]);
    if test.is_empty() {
        return failed;
    }
    let train_design = design.select_rows(train);
    let train_y: Vec<u8> = train.iter().map(|&i| outcome[i]).collect();
    let test_design = design.select_rows(test);
    let test_y: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    let Ok(problem) = Problem::new(&train_design, &train_y, config) else {
        return failed;
    };
    let mut warm = None;
    let mut deviance = Vec::with_capacity(lambdas.len());
    let mut coefficients = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        match problem.solve(lambda, &mut warm) {
            Ok(fit) => {
                let beta = DVector::from_column_slice(&fit.beta_std);
                let eta = eta_of(test_design.matrix(), &beta, test_design.offset());
                deviance.push(-2.0 * ll_of_eta(&eta, &test_y) / test.len() as f64);
                coefficients.push(Some(fit.beta_std.clone()));
            }
            Err(_) => {
                warm = None;
                deviance.push(f64::INFINITY);
                coefficients.push(None);
            }
        }
    }
    (deviance, coefficients)
}

#[cfg(test)]
mod tests {
    use super::super::tests::sim_data;
    use super::*;
    use crate::math::expit;
    use crate::tabular::{build_design, DesignSpec};

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let f = make_folds(103, 10, 7).unwrap();
        let mut counts = [0usize; 10];
        for &id in &f {
            counts[id - 1] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10 || c == 11));
        assert_eq!(counts.iter().sum::<usize>(), 103);
        assert_eq!(f, make_folds(103, 10, 7).unwrap());
        assert_ne!(f, make_folds(103, 10, 8).unwrap());
        assert!(make_folds(5, 10, 0).is_err());
        assert!(make_folds(5, 1, 0).is_err());
    }

    #[test]
    fn single_lambda_is_selected() {
        let d = sim_data(120, 3, 31, 0.0);
        let dm = build_design(&d, &DesignSpec::homogeneous(3)).unwrap();
        let config = PenaltyConfig::ridge(0.05).with_path(1, None);
        let cv = cv_select(&dm, d.outcome(), &config, 5, 1).unwrap();
        assert_eq!(cv.lambdas, vec![0.05]);
        assert_eq!(cv.chosen_lambda, 0.05);
    }

    #[test]
    fn same_seed_same_result() {
        let d = sim_data(200, 3, 32, 0.5);
        let dm = build_design(&d, &DesignSpec::full_interaction(3)).unwrap();
        let config = PenaltyConfig::lasso(0.0).with_path(10, None);
        let a = cv_select(&dm, d.outcome(), &config, 10, 99).unwrap();
        let b = cv_select(&dm, d.outcome(), &config, 10, 99).unwrap();
        assert_eq!(a.fold_assignments, b.fold_assignments);
        assert_eq!(a.chosen_lambda, b.chosen_lambda);
        assert_eq!(a.mean_deviance, b.mean_deviance);
    }

    #[test]
    fn held_out_deviance_matches_direct_loop() {
        let d = sim_data(250, 3, 33, 0.5);
        let dm = build_design(&d, &DesignSpec::full_interaction(3)).unwrap();
        for config in [PenaltyConfig::ridge(0.0), PenaltyConfig::hgl(0.0)] {
            let cv = cv_select(&dm, d.outcome(), &config.with_path(8, None), 5, 3).unwrap();
            for (l, &mean) in cv.mean_deviance.iter().enumerate() {
                let mut total = 0.0;
                for fold in 1..=5 {
                    let beta = cv.fold_coefficients[fold - 1][l].as_ref().unwrap();
                    let mut ll = 0.0;
                    let mut count = 0.0;
                    for i in 0..d.n() {
                        if cv.fold_assignments[i] != fold {
                            continue;
                        }
                        let eta: f64 = (0..dm.ncols()).map(|j| dm.matrix()[(i, j)] * beta[j]).sum();
                        let p = expit(eta);
                        ll += if d.outcome()[i] == 1 { p.ln() } else { (1.0 - p).ln() };
                        count += 1.0;
                    }
                    total += -2.0 * ll / count;
                }
                assert!((total / 5.0 - mean).abs() < 1e-10);
            }
            let min = cv.mean_deviance.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(cv.mean_deviance[cv.chosen_index], min);
            assert!(cv.mean_deviance[..cv.chosen_index].iter().all(|&m| m > min));
        }
    }

    #[test]
    fn single_class_training_fold_poisons_the_mean() {
        // eight positives, all in one fold: the training set of that fold has a single class
        let mut d = sim_data(80, 2, 34, 0.0);
        let folds = make_folds(80, 4, 5).unwrap();
        let y: Vec<u8> = folds.iter().map(|&f| u8::from(f == 2)).collect();
        d = crate::tabular::Dataset::from_parts(d.covariates().clone(), d.treatment().to_vec(), y).unwrap();
        let dm = build_design(&d, &DesignSpec::homogeneous(2)).unwrap();
        let cv = cv_select_lambdas(&dm, d.outcome(), &PenaltyConfig::ridge(0.0), &[1.0, 0.1], &folds).unwrap_err();
        assert_eq!(cv, Error::DegenerateFold);
    }
}
