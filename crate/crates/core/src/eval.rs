//! Accuracy and calibration metrics for predicted treatment effects and
//! risks, bootstrap internal validation, and grouped treatment-effect
//! calibration.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::clamp_risk;
use crate::seed::{derive_seed, stream_rng};
use crate::strategies::{fit_strategy, DeltaPredictor, StrategySpec};
use crate::tabular::Dataset;

/// Redraws allowed per bootstrap replicate when the out-of-bag set is empty.
pub const MAX_REDRAWS: usize = 10;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { expected: a, actual: b });
    }
    if a == 0 {
        return Err(Error::TooFewSubjects { needed: 1, actual: 0 });
    }
    Ok(())
}

/// Root mean squared difference.
pub fn rmspe(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(predicted.len(), truth.len())?;
    let ss: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((ss / predicted.len() as f64).sqrt())
}

/// Linear-interpolation (type 7) sample quantile.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::TooFewSubjects { needed: 1, actual: 0 });
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidConfig(format!("quantile level must lie in [0, 1], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, q))
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 quantile of `|predicted - truth|`.
pub fn quantile_abs_error(predicted: &[f64], truth: &[f64], q: f64) -> Result<f64> {
    check_lengths(predicted.len(), truth.len())?;
    let errors: Vec<f64> = predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    quantile(&errors, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_predicted: f64,
    pub mean_reference: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub n_bins: usize,
    pub bins: Vec<CalibrationBin>,
}

/// Equal-size groups of subjects ranked by prediction (ties in row order,
/// remainder spread over the lowest bins) with per-group means.
pub fn calibration_bins(predicted: &[f64], reference: &[f64], n_bins: usize) -> Result<CalibrationBins> {
    check_lengths(predicted.len(), reference.len())?;
    let n = predicted.len();
    if n_bins == 0 || n < n_bins {
        return Err(Error::TooFewSubjects { needed: n_bins.max(1), actual: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]));
    let (base, extra) = (n / n_bins, n % n_bins);
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        let members = &order[start..start + size];
        let count = members.len() as f64;
        bins.push(CalibrationBin {
            mean_predicted: members.iter().map(|&i| predicted[i]).sum::<f64>() / count,
            mean_reference: members.iter().map(|&i| reference[i]).sum::<f64>() / count,
            count: members.len(),
        });
        start += size;
    }
    Ok(CalibrationBins { n_bins, bins })
}

/// Mean squared difference between predicted risk and outcome.
pub fn brier(risk: &[f64], outcome: &[u8]) -> Result<f64> {
    check_lengths(risk.len(), outcome.len())?;
    let ss: f64 = risk.iter().zip(outcome).map(|(r, &y)| (r - f64::from(y)).powi(2)).sum();
    Ok(ss / risk.len() as f64)
}

/// Log-likelihood of the intercept-only model (at the outcome mean).
pub fn null_log_likelihood(outcome: &[u8]) -> f64 {
    let n = outcome.len() as f64;
    let events = outcome.iter().filter(|&&y| y == 1).count() as f64;
    let mut ll = 0.0;
    if events > 0.0 {
        ll += events * (events / n).ln();
    }
    if events < n {
        ll += (n - events) * (1.0 - events / n).ln();
    }
    ll
}

/// `[1 - exp(2/n (ll0 - ll1))] / [1 - exp(2/n ll0)]`; negative when the model
/// is worse than the intercept-only model.
pub fn nagelkerke_r2(model_ll: f64, null_ll: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::TooFewSubjects { needed: 1, actual: 0 });
    }
    if null_ll > 0.0 || !null_ll.is_finite() || model_ll.is_nan() {
        return Err(Error::InvalidData(format!("invalid log-likelihoods ({model_ll}, {null_ll})")));
    }
    let nf = n as f64;
    let denom = -(2.0 * null_ll / nf).exp_m1();
    if denom <= 0.0 {
        return Err(Error::DegenerateNull);
    }
    Ok(-(2.0 * (null_ll - model_ll) / nf).exp_m1() / denom)
}

/// Nagelkerke R² of predicted risks against their outcomes, with the null
/// model fitted on the same subjects.
pub fn nagelkerke_from_risk(risk: &[f64], outcome: &[u8]) -> Result<f64> {
    check_lengths(risk.len(), outcome.len())?;
    let model_ll: f64 = risk
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
        .sum();
    nagelkerke_r2(model_ll, null_log_likelihood(outcome), risk.len())
}

/// Probability that an event subject out-ranks a non-event subject (ties count
/// one half), via the rank-sum identity.
pub fn c_statistic(risk: &[f64], outcome: &[u8]) -> Result<f64> {
    check_lengths(risk.len(), outcome.len())?;
    let n1 = outcome.iter().filter(|&&y| y == 1).count();
    let n0 = outcome.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..risk.len()).collect();
    order.sort_by(|&a, &b| risk[a].total_cmp(&risk[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && risk[order[end]] == risk[order[start]] {
            end += 1;
        }
        // average of ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        rank_sum += avg * order[start..end].iter().filter(|&&i| outcome[i] == 1).count() as f64;
        start = end;
    }
    let n1f = n1 as f64;
    Ok((rank_sum - n1f * (n1f + 1.0) / 2.0) / (n1f * n0 as f64))
}

/// Metrics of one simulated validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmspe: f64,
    pub q90_abs_delta_err: f64,
    /// Over predicted vs true risk of each subject's assigned arm.
    pub q90_abs_risk_err: f64,
    pub brier: f64,
    pub nagelkerke_r2: Option<f64>,
    pub c_statistic: Option<f64>,
    /// Groups of predicted effect against mean true effect.
    pub calibration: CalibrationBins,
}

impl EvalReport {
    pub fn compute(
        delta_hat: &[f64],
        delta_true: &[f64],
        risk_hat: &[f64],
        risk_true: &[f64],
        outcome: &[u8],
        n_bins: usize,
    ) -> Result<Self> {
        check_lengths(risk_hat.len(), outcome.len())?;
        Ok(EvalReport {
            rmspe: rmspe(delta_hat, delta_true)?,
            q90_abs_delta_err: quantile_abs_error(delta_hat, delta_true, 0.9)?,
            q90_abs_risk_err: quantile_abs_error(risk_hat, risk_true, 0.9)?,
            brier: brier(risk_hat, outcome)?,
            nagelkerke_r2: nagelkerke_from_risk(risk_hat, outcome).ok(),
            c_statistic: c_statistic(risk_hat, outcome).ok(),
            calibration: calibration_bins(delta_hat, delta_true, n_bins)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    /// Fit on the resample, score the rows it did not draw.
    OutOfBag,
    /// Apparent performance minus the mean optimism of resample fits.
    OptimismCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReplicate {
    pub replicate: usize,
    /// Resamples discarded because every row was drawn.
    pub redraws: usize,
    pub out_of_bag: usize,
    pub brier: Option<f64>,
    pub nagelkerke_r2: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mode: BootstrapMode,
    pub brier: f64,
    pub nagelkerke_r2: f64,
    pub apparent_brier: f64,
    pub apparent_nagelkerke_r2: f64,
    pub mean_out_of_bag_fraction: f64,
    pub replicates: Vec<BootstrapReplicate>,
}

struct Resample {
    in_bag: Vec<usize>,
    out_of_bag: Vec<usize>,
    redraws: usize,
}

fn resample<R: Rng>(n: usize, rng: &mut R, replicate: usize) -> Result<Resample> {
    for redraws in 0..=MAX_REDRAWS {
        let in_bag: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut drawn = vec![false; n];
        for &i in &in_bag {
            drawn[i] = true;
        }
        let out_of_bag: Vec<usize> = (0..n).filter(|&i| !drawn[i]).collect();
        if !out_of_bag.is_empty() {
            return Ok(Resample {
                in_bag,
                out_of_bag,
                redraws,
            });
        }
    }
    Err(Error::AllInBag(replicate))
}

/// Predicted risk for each row's assigned arm.
fn assigned_risk(predictor: &DeltaPredictor, data: &Dataset) -> Result<Vec<f64>> {
    predictor.predict_risk(data.covariates(), data.treatment())
}

fn scores(predictor: &DeltaPredictor, data: &Dataset) -> Result<(f64, Option<f64>)> {
    let risk = assigned_risk(predictor, data)?;
    Ok((brier(&risk, data.outcome())?, nagelkerke_from_risk(&risk, data.outcome()).ok()))
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

/// Bootstrap internal validation of Brier score and Nagelkerke R².
///
/// Replicate `b` draws from its own random stream, so results do not depend
/// on scheduling. A replicate whose fit fails is kept with its error and
/// excluded from the means; an empty out-of-bag set is redrawn up to
/// [`MAX_REDRAWS`] times.
pub fn bootstrap_validate(data: &Dataset, spec: &StrategySpec, b: usize, seed: u64, mode: BootstrapMode) -> Result<BootstrapSummary> {
    if b == 0 {
        return Err(Error::InvalidConfig("need at least one bootstrap replicate".into()));
    }
    let apparent = fit_strategy(spec, data, derive_seed(seed, &[u64::MAX]))?;
    let (apparent_brier, apparent_r2) = scores(&apparent, data)?;
    let n = data.n();
    let replicates: Vec<BootstrapReplicate> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, &[r as u64], 0);
            let draw = resample(n, &mut rng, r)?;
            let mut rec = BootstrapReplicate {
                replicate: r,
                redraws: draw.redraws,
                out_of_bag: draw.out_of_bag.len(),
                brier: None,
                nagelkerke_r2: None,
                error: None,
            };
            let boot = data.select_rows(&draw.in_bag)?;
            let outcome = fit_strategy(spec, &boot, derive_seed(seed, &[r as u64, 1])).and_then(|pred| match mode {
                BootstrapMode::OutOfBag => scores(&pred, &data.select_rows(&draw.out_of_bag)?),
                BootstrapMode::OptimismCorrected => {
                    let (b_boot, r_boot) = scores(&pred, &boot)?;
                    let (b_orig, r_orig) = scores(&pred, data)?;
                    let r2 = match (r_boot, r_orig, apparent_r2) {
                        (Some(rb), Some(ro), Some(ra)) => Some(ra - (rb - ro)),
                        _ => None,
                    };
                    Ok((apparent_brier - (b_boot - b_orig), r2))
                }
            });
            match outcome {
                Ok((brier, r2)) => {
                    rec.brier = Some(brier);
                    rec.nagelkerke_r2 = r2;
                }
                Err(e) => rec.error = Some(e.to_string()),
            }
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapSummary {
        mode,
        brier: mean_of(replicates.iter().filter_map(|r| r.brier)),
        nagelkerke_r2: mean_of(replicates.iter().filter_map(|r| r.nagelkerke_r2)),
        apparent_brier,
        apparent_nagelkerke_r2: apparent_r2.unwrap_or(f64::NAN),
        mean_out_of_bag_fraction: mean_of(replicates.iter().map(|r| r.out_of_bag as f64 / n as f64)),
        replicates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatus {
    Ok,
    /// No subjects fell in this group (ties in the predicted effect).
    Empty,
    /// The group lacks subjects of one arm, so no observed effect exists.
    EmptyArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectGroup {
    pub group: usize,
    pub count: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub mean_predicted: Option<f64>,
    /// Treated minus control event rate within the group.
    pub observed_effect: Option<f64>,
    /// Standard error of the difference of proportions.
    pub standard_error: Option<f64>,
    pub status: GroupStatus,
}

/// Groups by quantiles of predicted effect with observed arm differences.
///
/// Cut points are type-7 quantiles at `k / n_groups`; a subject belongs to
/// the first group whose upper cut point it does not exceed, so tied
/// predictions always share a group.
pub fn effect_groups(delta_hat: &[f64], treatment: &[u8], outcome: &[u8], n_groups: usize) -> Result<Vec<EffectGroup>> {
    check_lengths(delta_hat.len(), treatment.len())?;
    check_lengths(delta_hat.len(), outcome.len())?;
    if n_groups == 0 || delta_hat.len() < n_groups {
        return Err(Error::TooFewSubjects {
            needed: n_groups.max(1),
            actual: delta_hat.len(),
        });
    }
    let mut sorted = delta_hat.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..n_groups).map(|k| quantile_sorted(&sorted, k as f64 / n_groups as f64)).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &d) in delta_hat.iter().enumerate() {
        let g = cuts.iter().position(|&c| d <= c).unwrap_or(n_groups - 1);
        members[g].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(g, rows)| {
            let treated: Vec<usize> = rows.iter().copied().filter(|&i| treatment[i] == 1).collect();
            let control: Vec<usize> = rows.iter().copied().filter(|&i| treatment[i] == 0).collect();
            let rate = |idx: &[usize]| idx.iter().map(|&i| f64::from(outcome[i])).sum::<f64>() / idx.len() as f64;
            let status = if rows.is_empty() {
                GroupStatus::Empty
            } else if treated.is_empty() || control.is_empty() {
                GroupStatus::EmptyArm
            } else {
                GroupStatus::Ok
            };
            let (observed_effect, standard_error) = if status == GroupStatus::Ok {
                let (p1, p0) = (rate(&treated), rate(&control));
                let se = (p1 * (1.0 - p1) / treated.len() as f64 + p0 * (1.0 - p0) / control.len() as f64).sqrt();
                (Some(p1 - p0), Some(se))
            } else {
                (None, None)
            };
            EffectGroup {
                group: g + 1,
                count: rows.len(),
                n_treated: treated.len(),
                n_control: control.len(),
                mean_predicted: (!rows.is_empty()).then(|| rows.iter().map(|&i| delta_hat[i]).sum::<f64>() / rows.len() as f64),
                observed_effect,
                standard_error,
                status,
            }
        })
        .collect())
}

/// Grouped calibration of a fitted predictor on `data`.
pub fn te_quintile_calibration(predictor: &DeltaPredictor, data: &Dataset, n_groups: usize) -> Result<Vec<EffectGroup>> {
    let delta = predictor.predict_delta(data.covariates())?;
    effect_groups(&delta, data.treatment(), data.outcome(), n_groups)
}

/// Grouped calibration per bootstrap replicate: the strategy is refitted on
/// each resample and the out-of-bag rows are grouped by that fit's
/// predicted-effect quantiles.
pub fn bootstrap_te_calibration(
    data: &Dataset,
    spec: &StrategySpec,
    b: usize,
    n_groups: usize,
    seed: u64,
) -> Result<Vec<(usize, Result<Vec<EffectGroup>>)>> {
    (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, &[r as u64], 0);
            let draw = resample(data.n(), &mut rng, r)?;
            let boot = data.select_rows(&draw.in_bag)?;
            let oob = data.select_rows(&draw.out_of_bag)?;
            let groups = fit_strategy(spec, &boot, derive_seed(seed, &[r as u64, 1]))
                .and_then(|pred| te_quintile_calibration(&pred, &oob, n_groups));
            Ok((r, groups))
        })
        .collect()
}
