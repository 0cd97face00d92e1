//! Modeling strategies that turn a trial dataset into a predictor of the
//! individual risk difference `P(Y=1|a=1,x) - P(Y=1|a=0,x)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::glm::{fit_ml, irls, lr_test, FitResult, IrlsOptions};
use crate::math::expit;
use crate::penalty::{cv_select, PenaltyConfig, PenaltyFamily};
use crate::seed::derive_seed;
use crate::tabular::{build_design, read_covariates, Coefficients, CovariateEncoding, Dataset, DesignSpec, Schema};

pub const DEFAULT_CV_FOLDS: usize = 10;
pub const DEFAULT_PATH_LENGTH: usize = 50;
pub const DEFAULT_ALPHA_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Overall,
    Hom,
    Hte,
    HteCk,
    RiskModel,
    SignificanceBased,
    PerArm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ml,
    Ridge,
    Lasso,
    Hgl,
}

impl Estimator {
    fn family(self) -> Option<PenaltyFamily> {
        match self {
            Estimator::Ml => None,
            Estimator::Ridge => Some(PenaltyFamily::Ridge),
            Estimator::Lasso => Some(PenaltyFamily::Lasso),
            Estimator::Hgl => Some(PenaltyFamily::HierarchicalGroupLasso),
        }
    }
}

fn default_folds() -> usize {
    DEFAULT_CV_FOLDS
}

fn default_path() -> usize {
    DEFAULT_PATH_LENGTH
}

fn default_alpha_level() -> f64 {
    DEFAULT_ALPHA_LEVEL
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub estimator: Estimator,
    /// Content-knowledge main effects (covariate indices).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ck_main_columns: Option<Vec<usize>>,
    /// Content-knowledge treatment-interaction candidates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ck_interaction_columns: Option<Vec<usize>>,
    #[serde(default = "default_alpha_level")]
    pub alpha_level: f64,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_path")]
    pub path_length: usize,
    #[serde(default = "default_true")]
    pub penalize_treatment_main: bool,
}

/// Every command-line strategy id.
pub const STRATEGY_IDS: [&str; 14] = [
    "overall",
    "hom-ml",
    "hom-ridge",
    "hte-ml",
    "hte-ridge",
    "hte-lasso",
    "hte-hgl",
    "hte-ck",
    "rm-ml",
    "rm-ridge",
    "sb",
    "perarm-ml",
    "perarm-ridge",
    "perarm-lasso",
];

impl StrategySpec {
    pub fn new(kind: StrategyKind, estimator: Estimator) -> Self {
        StrategySpec {
            kind,
            estimator,
            ck_main_columns: None,
            ck_interaction_columns: None,
            alpha_level: DEFAULT_ALPHA_LEVEL,
            cv_folds: DEFAULT_CV_FOLDS,
            path_length: DEFAULT_PATH_LENGTH,
            penalize_treatment_main: true,
        }
    }

    /// Content-knowledge model with the given main-effect and interaction sets.
    pub fn content_knowledge(mains: Vec<usize>, interactions: Vec<usize>) -> Self {
        StrategySpec {
            ck_main_columns: Some(mains),
            ck_interaction_columns: Some(interactions),
            ..Self::new(StrategyKind::HteCk, Estimator::Ridge)
        }
    }

    /// Parses a strategy id such as `hte-lasso`. `hte-ck` uses the
    /// twelve-covariate simulation sets (mains 1-8, interactions 9-12).
    pub fn from_id(id: &str) -> Result<Self> {
        use Estimator::*;
        use StrategyKind::*;
        let (kind, est) = match id {
            "overall" => (Overall, Ml),
            "hom-ml" => (Hom, Ml),
            "hom-ridge" => (Hom, Ridge),
            "hte-ml" => (Hte, Ml),
            "hte-ridge" => (Hte, Ridge),
            "hte-lasso" => (Hte, Lasso),
            "hte-hgl" => (Hte, Hgl),
            "hte-ck" => return Ok(Self::content_knowledge((0..8).collect(), (8..12).collect())),
            "rm-ml" => (RiskModel, Ml),
            "rm-ridge" => (RiskModel, Ridge),
            "sb" => (SignificanceBased, Ml),
            "perarm-ml" => (PerArm, Ml),
            "perarm-ridge" => (PerArm, Ridge),
            "perarm-lasso" => (PerArm, Lasso),
            other => return Err(Error::UnknownStrategy(other.to_string())),
        };
        Ok(Self::new(kind, est))
    }

    pub fn id(&self) -> String {
        let est = match self.estimator {
            Estimator::Ml => "ml",
            Estimator::Ridge => "ridge",
            Estimator::Lasso => "lasso",
            Estimator::Hgl => "hgl",
        };
        match self.kind {
            StrategyKind::Overall => "overall".into(),
            StrategyKind::SignificanceBased => "sb".into(),
            StrategyKind::HteCk if self.estimator == Estimator::Ridge => "hte-ck".into(),
            StrategyKind::HteCk => format!("hte-ck-{est}"),
            StrategyKind::Hom => format!("hom-{est}"),
            StrategyKind::Hte => format!("hte-{est}"),
            StrategyKind::RiskModel => format!("rm-{est}"),
            StrategyKind::PerArm => format!("perarm-{est}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        use Estimator::*;
        use StrategyKind::*;
        let ok = match self.kind {
            Overall | SignificanceBased => self.estimator == Ml,
            Hte => true,
            Hom | HteCk | PerArm => self.estimator != Hgl,
            RiskModel => matches!(self.estimator, Ml | Ridge),
        };
        if !ok {
            return Err(Error::InvalidConfig(format!("estimator {:?} is not available for {:?}", self.estimator, self.kind)));
        }
        if self.kind == HteCk && (self.ck_main_columns.is_none() || self.ck_interaction_columns.is_none()) {
            return Err(Error::InvalidConfig("content-knowledge model needs main and interaction sets".into()));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha level must lie in (0, 1), got {}", self.alpha_level)));
        }
        if self.estimator != Ml && self.cv_folds < 2 {
            return Err(Error::InvalidConfig("cross-validation needs at least 2 folds".into()));
        }
        Ok(())
    }

    fn penalty(&self) -> Option<PenaltyConfig> {
        self.estimator.family().map(|family| {
            let mut c = PenaltyConfig::new(family, 0.0).with_path(self.path_length, None);
            c.penalize_treatment_main = self.penalize_treatment_main;
            c
        })
    }
}

impl fmt::Display for StrategySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::from_id(s)
    }
}

/// Which branch the significance-based procedure ended in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SbBranch {
    /// No treatment effect: main effects only.
    NoEffect,
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbTests {
    pub p_treatment: f64,
    pub p_interactions: Option<f64>,
    pub branch: SbBranch,
}

/// Fitted state of a strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum PredictorModel {
    /// Arm event rates.
    Overall { risk_control: f64, risk_treated: f64 },
    /// One logistic model with optional treatment and interactions.
    Logistic { coefficients: Coefficients, design: DesignSpec },
    /// Control-arm risk score `eta` and `logit P = eta + a (beta_t + gamma eta)`.
    RiskModel {
        control: Coefficients,
        design: DesignSpec,
        beta_t: f64,
        gamma: f64,
    },
    /// Separate main-effects models per arm.
    PerArm {
        control: Coefficients,
        treated: Coefficients,
        design: DesignSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    /// Chosen penalty of every penalized component, in fitting order.
    pub lambdas: Vec<f64>,
    /// Nonzero coefficients excluding intercepts.
    pub nonzero: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub significance: Option<SbTests>,
}

impl FitDiagnostics {
    fn new() -> Self {
        FitDiagnostics {
            converged: true,
            lambdas: Vec::new(),
            nonzero: 0,
            significance: None,
        }
    }

    fn absorb(&mut self, fit: &FitResult) {
        self.converged &= fit.converged;
        self.lambdas.extend(fit.lambda);
        self.nonzero += fit.beta_std.iter().skip(1).filter(|b| **b != 0.0).count();
    }
}

/// A fitted strategy able to predict risks and risk differences for new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaPredictor {
    pub spec: StrategySpec,
    pub n_covariates: usize,
    pub model: PredictorModel,
    pub diagnostics: FitDiagnostics,
}

impl DeltaPredictor {
    fn check(&self, covariates: &DMatrix<f64>) -> Result<()> {
        if covariates.ncols() != self.n_covariates {
            return Err(Error::ColumnMismatch {
                expected: self.n_covariates,
                actual: covariates.ncols(),
            });
        }
        Ok(())
    }

    /// Risk of every row under arm `arm`.
    pub fn predict_arm_risk(&self, covariates: &DMatrix<f64>, arm: u8) -> Result<Vec<f64>> {
        self.check(covariates)?;
        let n = covariates.nrows();
        let a = vec![f64::from(arm); n];
        let zeros = vec![0.0; n];
        let eta = match &self.model {
            PredictorModel::Overall {
                risk_control,
                risk_treated,
            } => return Ok(vec![if arm == 1 { *risk_treated } else { *risk_control }; n]),
            PredictorModel::Logistic { coefficients, design } => coefficients.linear_predictor(covariates, &a, design, None)?,
            PredictorModel::RiskModel {
                control,
                design,
                beta_t,
                gamma,
            } => control
                .linear_predictor(covariates, &zeros, design, None)?
                .into_iter()
                .map(|e| e + f64::from(arm) * (beta_t + gamma * e))
                .collect(),
            PredictorModel::PerArm { control, treated, design } => {
                let arm_model = if arm == 1 { treated } else { control };
                arm_model.linear_predictor(covariates, &zeros, design, None)?
            }
        };
        Ok(eta.into_iter().map(expit).collect())
    }

    /// Risk of every row under its own treatment value.
    pub fn predict_risk(&self, covariates: &DMatrix<f64>, treatment: &[u8]) -> Result<Vec<f64>> {
        if treatment.len() != covariates.nrows() {
            return Err(Error::LengthMismatch {
                expected: covariates.nrows(),
                actual: treatment.len(),
            });
        }
        let r0 = self.predict_arm_risk(covariates, 0)?;
        let r1 = self.predict_arm_risk(covariates, 1)?;
        Ok(treatment
            .iter()
            .enumerate()
            .map(|(i, &a)| if a == 1 { r1[i] } else { r0[i] })
            .collect())
    }

    /// Predicted risk difference, treated minus control.
    pub fn predict_delta(&self, covariates: &DMatrix<f64>) -> Result<Vec<f64>> {
        let r0 = self.predict_arm_risk(covariates, 0)?;
        let r1 = self.predict_arm_risk(covariates, 1)?;
        Ok(r1.iter().zip(&r0).map(|(a, b)| a - b).collect())
    }

    /// Coefficients in the single-model interaction parameterization, when
    /// the strategy has one.
    pub fn interaction_coefficients(&self) -> Option<(Coefficients, DesignSpec)> {
        match &self.model {
            PredictorModel::Logistic { coefficients, design } => Some((coefficients.clone(), design.clone())),
            PredictorModel::PerArm { control, treated, design } => Some((
                stitch_per_arm(control, treated),
                DesignSpec {
                    include_treatment: true,
                    interaction_columns: design.main_columns.clone(),
                    ..design.clone()
                },
            )),
            _ => None,
        }
    }
}

/// Interaction-model coefficients equivalent to separate per-arm models:
/// the control model gives intercept and main effects, the treated model's
/// differences give treatment effect and interactions.
pub fn stitch_per_arm(control: &Coefficients, treated: &Coefficients) -> Coefficients {
    Coefficients {
        beta0: control.beta0,
        beta_t: Some(treated.beta0 - control.beta0),
        beta_m: control.beta_m.clone(),
        beta_z: treated.beta_m.iter().zip(&control.beta_m).map(|(t, c)| t - c).collect(),
    }
}

fn require_both_classes(outcome: &[u8], what: &str) -> Result<()> {
    let events = outcome.iter().filter(|&&y| y == 1).count();
    if events == 0 || events == outcome.len() {
        return Err(Error::StrategyInfeasible(format!("{what} has a single outcome class")));
    }
    Ok(())
}

/// ML or cross-validated penalized fit of `design` on `data`.
fn fit_model(data: &Dataset, design: &DesignSpec, spec: &StrategySpec, seed: u64) -> Result<FitResult> {
    let dm = build_design(data, design)?;
    match spec.penalty() {
        None => fit_ml(&dm, data.outcome()),
        Some(config) => Ok(cv_select(&dm, data.outcome(), &config, spec.cv_folds, seed)?.chosen_fit),
    }
}

fn logistic(spec: &StrategySpec, data: &Dataset, design: DesignSpec, seed: u64) -> Result<DeltaPredictor> {
    let fit = fit_model(data, &design, spec, seed)?;
    let mut diagnostics = FitDiagnostics::new();
    diagnostics.absorb(&fit);
    Ok(DeltaPredictor {
        spec: spec.clone(),
        n_covariates: data.p(),
        model: PredictorModel::Logistic {
            coefficients: fit.coefficients,
            design,
        },
        diagnostics,
    })
}

/// Fits the strategy described by `spec`. `seed` fixes the cross-validation folds.
pub fn fit_strategy(spec: &StrategySpec, data: &Dataset, seed: u64) -> Result<DeltaPredictor> {
    spec.validate()?;
    let p = data.p();
    match spec.kind {
        StrategyKind::Overall => fit_overall(spec, data),
        StrategyKind::Hom => logistic(spec, data, DesignSpec::homogeneous(p), seed),
        StrategyKind::Hte => logistic(spec, data, DesignSpec::full_interaction(p), seed),
        StrategyKind::HteCk => {
            let interactions = spec.ck_interaction_columns.clone().unwrap_or_default();
            // interaction candidates enter as main effects too, keeping the model hierarchical
            let mut mains = spec.ck_main_columns.clone().unwrap_or_default();
            mains.extend(&interactions);
            mains.sort_unstable();
            mains.dedup();
            let design = DesignSpec {
                main_columns: mains,
                interaction_columns: interactions,
                include_treatment: true,
                standardize: true,
                offset: None,
            };
            design.validate(p)?;
            logistic(spec, data, design, seed)
        }
        StrategyKind::RiskModel => fit_risk_model(spec, data, seed),
        StrategyKind::SignificanceBased => fit_significance_based(data, spec.alpha_level),
        StrategyKind::PerArm => fit_per_arm(spec, data, seed),
    }
}

fn fit_overall(spec: &StrategySpec, data: &Dataset) -> Result<DeltaPredictor> {
    let rate = |arm: u8| -> Result<f64> {
        let rows = data.arm_rows(arm);
        if rows.is_empty() {
            return Err(Error::StrategyInfeasible(format!("arm {arm} is empty")));
        }
        Ok(rows.iter().map(|&i| f64::from(data.outcome()[i])).sum::<f64>() / rows.len() as f64)
    };
    Ok(DeltaPredictor {
        spec: spec.clone(),
        n_covariates: data.p(),
        model: PredictorModel::Overall {
            risk_control: rate(0)?,
            risk_treated: rate(1)?,
        },
        diagnostics: FitDiagnostics::new(),
    })
}

/// Two-stage risk modeling: a control-arm main-effects model gives the
/// score `eta`, then `beta_t` and the score interaction `gamma` are fitted
/// by ML on all subjects with `eta` as offset.
pub fn fit_risk_model(spec: &StrategySpec, data: &Dataset, seed: u64) -> Result<DeltaPredictor> {
    let control = data.select_rows(&data.arm_rows(0))?;
    require_both_classes(control.outcome(), "control arm")?;
    let design = DesignSpec::mains_only(data.p());
    let stage1 = fit_model(&control, &design, spec, seed)?;
    let n = data.n();
    let eta = stage1
        .coefficients
        .linear_predictor(data.covariates(), &vec![0.0; n], &design, None)?;
    let a = data.treatment_f64();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { a[i] } else { a[i] * eta[i] });
    let stage2 = irls(&x, &data.outcome_f64(), Some(&eta), &IrlsOptions::default())?;
    let mut diagnostics = FitDiagnostics::new();
    diagnostics.absorb(&stage1);
    diagnostics.converged &= stage2.converged;
    diagnostics.nonzero += stage2.beta.iter().filter(|b| **b != 0.0).count();
    Ok(DeltaPredictor {
        spec: spec.clone(),
        n_covariates: data.p(),
        model: PredictorModel::RiskModel {
            control: stage1.coefficients,
            design,
            beta_t: stage2.beta[0],
            gamma: stage2.beta[1],
        },
        diagnostics,
    })
}

/// Likelihood-ratio test sequence: treatment effect first, then all
/// interactions jointly; a p-value equal to `alpha` is not significant.
pub fn fit_significance_based(data: &Dataset, alpha: f64) -> Result<DeltaPredictor> {
    let spec = StrategySpec {
        alpha_level: alpha,
        ..StrategySpec::new(StrategyKind::SignificanceBased, Estimator::Ml)
    };
    spec.validate()?;
    let p = data.p();
    let mains = DesignSpec::mains_only(p);
    let hom = DesignSpec::homogeneous(p);
    let hte = DesignSpec::full_interaction(p);
    let fit_mains = fit_ml(&build_design(data, &mains)?, data.outcome())?;
    let fit_hom = fit_ml(&build_design(data, &hom)?, data.outcome())?;
    let p_treatment = lr_test(&fit_hom, &fit_mains, 1)?;
    let (branch, p_interactions, fit, design) = if p_treatment >= alpha {
        (SbBranch::NoEffect, None, fit_mains, mains)
    } else {
        let fit_hte = fit_ml(&build_design(data, &hte)?, data.outcome())?;
        let p_z = lr_test(&fit_hte, &fit_hom, p)?;
        if p_z >= alpha {
            (SbBranch::Homogeneous, Some(p_z), fit_hom, hom)
        } else {
            (SbBranch::Heterogeneous, Some(p_z), fit_hte, hte)
        }
    };
    let mut diagnostics = FitDiagnostics::new();
    diagnostics.absorb(&fit);
    diagnostics.significance = Some(SbTests {
        p_treatment,
        p_interactions,
        branch,
    });
    Ok(DeltaPredictor {
        spec,
        n_covariates: p,
        model: PredictorModel::Logistic {
            coefficients: fit.coefficients,
            design,
        },
        diagnostics,
    })
}

/// Separate main-effects models in each arm; penalized variants choose
/// their own penalty by cross-validation within the arm.
pub fn fit_per_arm(spec: &StrategySpec, data: &Dataset, seed: u64) -> Result<DeltaPredictor> {
    let design = DesignSpec::mains_only(data.p());
    let mut diagnostics = FitDiagnostics::new();
    let mut fits = Vec::with_capacity(2);
    for arm in [0u8, 1] {
        let rows = data.arm_rows(arm);
        let sub = data.select_rows(&rows)?;
        require_both_classes(sub.outcome(), if arm == 0 { "control arm" } else { "treated arm" })?;
        let fit = fit_model(&sub, &design, spec, derive_seed(seed, &[u64::from(arm)]))?;
        diagnostics.absorb(&fit);
        fits.push(fit.coefficients);
    }
    let treated = fits.pop().expect("two arms");
    let control = fits.pop().expect("two arms");
    Ok(DeltaPredictor {
        spec: spec.clone(),
        n_covariates: data.p(),
        model: PredictorModel::PerArm { control, treated, design },
        diagnostics,
    })
}

/// A fitted predictor together with the column mapping needed to score new files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub schema: Schema,
    pub encodings: Vec<CovariateEncoding>,
    pub predictor: DeltaPredictor,
}

impl SavedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Covariates of a CSV encoded the way the training file was.
    pub fn covariates<R: std::io::Read>(&self, reader: R) -> Result<DMatrix<f64>> {
        read_covariates(reader, &self.encodings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgm::{gen_trial, DgmConfig};

    fn trial(n: usize, beta_t: f64, heterogeneous: bool, seed: u64) -> Dataset {
        gen_trial(&DgmConfig {
            n,
            beta_t,
            heterogeneous,
            run_seed: seed,
            ..DgmConfig::default()
        })
        .unwrap()
        .dataset
    }

    #[test]
    fn ids_round_trip() {
        for id in STRATEGY_IDS {
            let spec = StrategySpec::from_id(id).unwrap();
            assert_eq!(spec.id(), id);
            spec.validate().unwrap();
        }
        assert!(matches!(StrategySpec::from_id("hte-forest"), Err(Error::UnknownStrategy(_))));
        assert!(StrategySpec::new(StrategyKind::Overall, Estimator::Ridge).validate().is_err());
        assert!(StrategySpec::new(StrategyKind::Hom, Estimator::Hgl).validate().is_err());
    }

    #[test]
    fn overall_is_difference_of_arm_rates() {
        // treated event rate 0.20, control 0.25
        let n = 40;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let a: Vec<u8> = (0..n).map(|i| u8::from(i < 20)).collect();
        let y: Vec<u8> = (0..n).map(|i| u8::from(i % 20 < if i < 20 { 4 } else { 5 })).collect();
        let d = Dataset::from_parts(x, a, y).unwrap();
        let pred = fit_strategy(&StrategySpec::from_id("overall").unwrap(), &d, 0).unwrap();
        let delta = pred.predict_delta(d.covariates()).unwrap();
        assert!(delta.iter().all(|v| (v + 0.05).abs() < 1e-12));
    }

    #[test]
    fn hom_effect_sign_matches_treatment_coefficient() {
        let d = trial(600, 0.6f64.ln(), false, 1);
        let pred = fit_strategy(&StrategySpec::from_id("hom-ml").unwrap(), &d, 0).unwrap();
        let PredictorModel::Logistic { coefficients, .. } = &pred.model else { panic!() };
        let bt = coefficients.beta_t.unwrap();
        let delta = pred.predict_delta(d.covariates()).unwrap();
        assert!(delta.iter().all(|v| v.signum() == bt.signum()));
    }

    #[test]
    fn hom_delta_matches_reference_values() {
        // intercept-free model with beta_t = -1: eta = 0 and eta = -1 subjects
        let design = DesignSpec::homogeneous(1);
        let pred = DeltaPredictor {
            spec: StrategySpec::from_id("hom-ml").unwrap(),
            n_covariates: 1,
            model: PredictorModel::Logistic {
                coefficients: Coefficients {
                    beta0: 0.0,
                    beta_t: Some(-1.0),
                    beta_m: vec![1.0],
                    beta_z: vec![],
                },
                design,
            },
            diagnostics: FitDiagnostics::new(),
        };
        let x = DMatrix::from_row_slice(2, 1, &[0.0, -1.0]);
        let d = pred.predict_delta(&x).unwrap();
        assert!((d[0] + 0.2310586).abs() < 1e-6);
        assert!((d[1] + 0.1497385).abs() < 1e-6);
        let r1 = pred.predict_arm_risk(&x, 1).unwrap();
        assert!((r1[0] - 0.2689414).abs() < 1e-6);
        assert!((r1[1] - 0.1192029).abs() < 1e-6);
        // |delta| along a grid of control risk peaks near 0.5 and vanishes at the extremes
        let grid = DMatrix::from_fn(41, 1, |i, _| i as f64 * 0.5 - 10.0);
        let d = pred.predict_delta(&grid).unwrap();
        let peak = d.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let peak_eta = peak as f64 * 0.5 - 10.0;
        assert!((-0.5..=1.5).contains(&peak_eta), "{peak_eta}");
        assert!(d[0].abs() < 1e-4 && d[40].abs() < 1e-4);
    }

    #[test]
    fn predict_delta_is_difference_of_arm_risks() {
        let d = trial(500, 0.6f64.ln(), true, 2);
        for id in ["overall", "hom-ridge", "hte-lasso", "hte-ck", "rm-ml", "perarm-ridge"] {
            let pred = fit_strategy(&StrategySpec::from_id(id).unwrap(), &d, 3).unwrap();
            let delta = pred.predict_delta(d.covariates()).unwrap();
            let r1 = pred.predict_arm_risk(d.covariates(), 1).unwrap();
            let r0 = pred.predict_arm_risk(d.covariates(), 0).unwrap();
            for i in 0..d.n() {
                assert_eq!(delta[i], r1[i] - r0[i]);
                assert!(delta[i] > -1.0 && delta[i] < 1.0);
            }
        }
    }

    #[test]
    fn per_arm_ml_equals_interaction_ml() {
        let d = trial(2000, 0.6f64.ln(), true, 4);
        let hte = fit_strategy(&StrategySpec::from_id("hte-ml").unwrap(), &d, 0).unwrap();
        let arm = fit_strategy(&StrategySpec::from_id("perarm-ml").unwrap(), &d, 0).unwrap();
        let (a, _) = hte.interaction_coefficients().unwrap();
        let (b, _) = arm.interaction_coefficients().unwrap();
        for (x, y) in a.to_vector().iter().zip(b.to_vector()) {
            assert!((x - y).abs() < 1e-6, "{x} {y}");
        }
        let da = hte.predict_delta(d.covariates()).unwrap();
        let db = arm.predict_delta(d.covariates()).unwrap();
        assert!(da.iter().zip(&db).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn penalized_interaction_fit_differs_from_per_arm() {
        // at a matched penalty the full-sample model shrinks the treatment
        // effect while the per-arm intercepts are free
        let d = trial(800, 0.6f64.ln(), false, 5);
        let lambda = 0.02;
        let full = build_design(&d, &DesignSpec::full_interaction(12)).unwrap();
        let full_fit = crate::penalty::fit_elastic_net(&full, d.outcome(), &PenaltyConfig::ridge(lambda)).unwrap();
        let mut stitched = Vec::new();
        for arm in [0u8, 1] {
            let sub = d.select_rows(&d.arm_rows(arm)).unwrap();
            let dm = build_design(&sub, &DesignSpec::mains_only(12)).unwrap();
            stitched.push(crate::penalty::fit_elastic_net(&dm, sub.outcome(), &PenaltyConfig::ridge(lambda)).unwrap().coefficients);
        }
        let s = stitch_per_arm(&stitched[0], &stitched[1]);
        let diff = full_fit
            .coefficients
            .to_vector()
            .iter()
            .zip(s.to_vector())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn risk_model_structure() {
        let d = trial(800, 0.6f64.ln(), false, 6);
        let pred = fit_strategy(&StrategySpec::from_id("rm-ml").unwrap(), &d, 0).unwrap();
        let PredictorModel::RiskModel {
            control,
            design,
            beta_t,
            gamma,
        } = pred.model.clone()
        else {
            panic!()
        };
        // a row whose score is zero: delta = expit(beta_t) - 1/2
        let mut x = DMatrix::zeros(1, 12);
        x[(0, 0)] = -control.beta0 / control.beta_m[0];
        let eta = control.linear_predictor(&x, &[0.0], &design, None).unwrap()[0];
        assert!(eta.abs() < 1e-12);
        let delta = pred.predict_delta(&x).unwrap()[0];
        assert!((delta - (expit(beta_t) - 0.5)).abs() < 1e-12);
        // with gamma removed the predictor has the homogeneous form in the score
        let hom_form = DeltaPredictor {
            model: PredictorModel::RiskModel {
                control: control.clone(),
                design: design.clone(),
                beta_t,
                gamma: 0.0,
            },
            ..pred.clone()
        };
        let scores = control.linear_predictor(d.covariates(), &vec![0.0; d.n()], &design, None).unwrap();
        let dh = hom_form.predict_delta(d.covariates()).unwrap();
        for (s, v) in scores.iter().zip(&dh) {
            assert!((v - (expit(s + beta_t) - expit(*s))).abs() < 1e-12);
        }
        assert!(gamma.is_finite());
    }

    #[test]
    fn significance_based_branches() {
        let null = trial(1200, 0.0, false, 7);
        let pred = fit_significance_based(&null, 0.05).unwrap();
        let tests = pred.diagnostics.significance.clone().unwrap();
        if tests.branch == SbBranch::NoEffect {
            assert!(pred.predict_delta(null.covariates()).unwrap().iter().all(|v| *v == 0.0));
        }
        // alpha just above/below the observed p-value flips the first decision
        let above = fit_significance_based(&null, (tests.p_treatment * 1.0001).min(0.999)).unwrap();
        assert_ne!(above.diagnostics.significance.unwrap().branch, SbBranch::NoEffect);
        let at = fit_significance_based(&null, tests.p_treatment).unwrap();
        assert_eq!(at.diagnostics.significance.unwrap().branch, SbBranch::NoEffect);

        let effect = trial(3600, 0.6f64.ln(), false, 8);
        let sb = fit_significance_based(&effect, 0.05).unwrap();
        let tests = sb.diagnostics.significance.clone().unwrap();
        assert!(tests.p_treatment < 0.05);
        if tests.branch == SbBranch::Homogeneous {
            let hom = fit_strategy(&StrategySpec::from_id("hom-ml").unwrap(), &effect, 0).unwrap();
            assert_eq!(sb.model, hom.model);
        }
    }

    #[test]
    fn per_arm_requires_both_classes() {
        let x = DMatrix::from_fn(20, 2, |i, j| (i * (j + 1)) as f64);
        let a: Vec<u8> = (0..20).map(|i| u8::from(i % 2 == 0)).collect();
        let y: Vec<u8> = (0..20).map(|i| u8::from(i % 2 == 0 && i % 4 == 0)).collect();
        let d = Dataset::from_parts(x, a, y).unwrap();
        let err = fit_strategy(&StrategySpec::from_id("perarm-ml").unwrap(), &d, 0).unwrap_err();
        assert!(matches!(err, Error::StrategyInfeasible(_)));
    }

    #[test]
    fn hgl_predictor_is_hierarchical() {
        let d = trial(600, 0.6f64.ln(), true, 9);
        let pred = fit_strategy(&StrategySpec::from_id("hte-hgl").unwrap(), &d, 1).unwrap();
        let PredictorModel::Logistic { coefficients, design } = &pred.model else { panic!() };
        for (k, &j) in design.interaction_columns.iter().enumerate() {
            if coefficients.beta_z[k] != 0.0 {
                let m = design.main_columns.iter().position(|&c| c == j).unwrap();
                assert!(coefficients.beta_m[m] != 0.0);
                assert!(coefficients.beta_t.unwrap() != 0.0);
            }
        }
    }
}
