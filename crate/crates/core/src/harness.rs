//! Factorial simulation studies: plans, seeding, crash-safe result files and
//! aggregation.
//!
//! A study is a list of work units, one per `(setting, run)`. Each unit draws
//! a development trial and a large validation trial from its own random
//! streams, fits every strategy on the development data and scores the
//! predicted risk differences against the true ones on the validation data.
//! Units are computed in parallel but written in canonical order, so the
//! output files depend only on the plan.
//!
//! Files written to the output directory:
//!
//! * `metadata.json`: plan, interaction perturbations and solved intercepts.
//! * `results.csv`: one row per `(setting, run, strategy)`.
//! * `calibration.csv`: per-record groups of predicted against true effect.
//! * `timings.csv`: wall time per fit, kept apart so the other files are
//!   reproducible byte for byte.
//! * `summary.csv`: per-`(setting, strategy)` means with standard errors.
//!
//! `results.csv` is appended last for each unit and acts as the commit log:
//! on resume every file is cut back to the units it records in full.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgm::{make_perturbations, DgmConfig, TrueModel, DEFAULT_PERTURBATION_SEED};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::seed::{derive_seed, stream_rng};
use crate::strategies::{fit_strategy, StrategySpec, STRATEGY_IDS};

/// Groups in the per-record calibration table.
pub const CALIBRATION_BINS: usize = 10;
pub const MIN_VALIDATION_N: usize = 1000;
/// Random stream of the development trial of a unit.
const DEV_STREAM: u64 = 0;
const VALIDATION_STREAM: u64 = 1;
const AUDIT_MC_STREAM: u64 = 2;
const AUDIT_R2_STREAM: u64 = 3;

pub const RESULTS_FILE: &str = "results.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METADATA_FILE: &str = "metadata.json";

/// One cell of the factorial design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub id: usize,
    pub n: usize,
    pub beta_t: f64,
    pub heterogeneous: bool,
}

impl Setting {
    pub fn dgm_config(&self, perturbation_seed: u64) -> DgmConfig {
        DgmConfig {
            n: self.n,
            beta_t: self.beta_t,
            heterogeneous: self.heterogeneous,
            perturbation_seed,
            ..DgmConfig::default()
        }
    }
}

/// A strategy given either by id or as a full specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum StrategyEntry {
    Id(String),
    Spec(StrategySpec),
}

mod strategy_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(specs: &[StrategySpec], s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<StrategyEntry> = specs
            .iter()
            .map(|spec| match StrategySpec::from_id(&spec.id()) {
                Ok(canonical) if &canonical == spec => StrategyEntry::Id(spec.id()),
                _ => StrategyEntry::Spec(spec.clone()),
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<StrategySpec>, D::Error> {
        Vec::<StrategyEntry>::deserialize(d)?
            .into_iter()
            .map(|e| match e {
                StrategyEntry::Id(id) => StrategySpec::from_id(&id).map_err(serde::de::Error::custom),
                StrategyEntry::Spec(spec) => Ok(spec),
            })
            .collect()
    }
}

/// Full factorial plan: every combination of `ns`, `beta_t_values` and `heterogeneous`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub ns: Vec<usize>,
    pub beta_t_values: Vec<f64>,
    pub heterogeneous: Vec<bool>,
    pub runs: usize,
    pub validation_n: usize,
    #[serde(with = "strategy_list")]
    pub strategies: Vec<StrategySpec>,
    pub base_seed: u64,
    #[serde(default = "default_perturbation_seed")]
    pub perturbation_seed: u64,
}

fn default_perturbation_seed() -> u64 {
    DEFAULT_PERTURBATION_SEED
}

impl StudyPlan {
    /// The twelve-setting design with every strategy.
    pub fn full(runs: usize, base_seed: u64) -> Self {
        StudyPlan {
            ns: vec![400, 1200, 3600],
            beta_t_values: vec![0.6f64.ln(), 0.0],
            heterogeneous: vec![false, true],
            runs,
            validation_n: 10_000,
            strategies: STRATEGY_IDS.iter().map(|id| StrategySpec::from_id(id).expect("known id")).collect(),
            base_seed,
            perturbation_seed: DEFAULT_PERTURBATION_SEED,
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let plan: StudyPlan = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Settings in canonical order: sample size, then treatment effect, then heterogeneity.
    pub fn settings(&self) -> Vec<Setting> {
        let mut out = Vec::new();
        for &n in &self.ns {
            for &beta_t in &self.beta_t_values {
                for &heterogeneous in &self.heterogeneous {
                    out.push(Setting {
                        id: out.len(),
                        n,
                        beta_t,
                        heterogeneous,
                    });
                }
            }
        }
        out
    }

    pub fn strategy_ids(&self) -> Vec<String> {
        self.strategies.iter().map(StrategySpec::id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() || self.beta_t_values.is_empty() || self.heterogeneous.is_empty() {
            return Err(Error::InvalidConfig("every factor needs at least one level".into()));
        }
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be positive".into()));
        }
        if self.validation_n < MIN_VALIDATION_N {
            return Err(Error::InvalidConfig(format!(
                "validation_n must be at least {MIN_VALIDATION_N}, got {}",
                self.validation_n
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidConfig("no strategies".into()));
        }
        let mut ids = self.strategy_ids();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("strategy ids must be unique".into()));
        }
        for spec in &self.strategies {
            spec.validate()?;
        }
        for setting in self.settings() {
            setting.dgm_config(self.perturbation_seed).validate()?;
        }
        Ok(())
    }

    fn n_units(&self) -> usize {
        self.settings().len() * self.runs
    }
}

/// One fitted strategy in one run. Metric fields are empty when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting_id: usize,
    pub run: usize,
    pub n: usize,
    pub beta_t: f64,
    pub heterogeneous: bool,
    pub strategy: String,
    /// `ok` or `error`.
    pub status: String,
    pub error: String,
    pub rmspe: Option<f64>,
    pub q90_abs_delta_err: Option<f64>,
    pub q90_abs_risk_err: Option<f64>,
    pub brier: Option<f64>,
    pub nagelkerke_r2: Option<f64>,
    pub c_statistic: Option<f64>,
    pub converged: Option<bool>,
    /// Chosen penalties separated by `;`.
    pub lambdas: String,
    pub nonzero: Option<usize>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub setting_id: usize,
    pub run: usize,
    pub strategy: String,
    pub bin: usize,
    pub mean_predicted: f64,
    pub mean_true: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub setting_id: usize,
    pub run: usize,
    pub strategy: String,
    pub seconds: f64,
}

/// Everything one `(setting, run)` unit produces.
#[derive(Debug, Clone)]
pub struct UnitOutput {
    pub records: Vec<RunRecord>,
    pub calibration: Vec<CalibrationRecord>,
    pub timings: Vec<TimingRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SettingMetadata {
    #[serde(flatten)]
    setting: Setting,
    beta0: f64,
    sigma_control: f64,
    sigma_treated: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Metadata {
    software_version: String,
    plan: StudyPlan,
    perturbations: Vec<f64>,
    settings: Vec<SettingMetadata>,
}

/// Generative model of every setting of `plan`, in canonical order.
pub fn setting_models(plan: &StudyPlan) -> Result<Vec<(Setting, TrueModel)>> {
    plan.settings()
        .into_iter()
        .map(|s| Ok((s, TrueModel::from_config(&s.dgm_config(plan.perturbation_seed))?)))
        .collect()
}

/// Simulates, fits and scores one unit. Strategy failures become error
/// records; only data generation errors are returned.
pub fn run_unit(plan: &StudyPlan, setting: &Setting, model: &TrueModel, run: usize) -> Result<UnitOutput> {
    let coords = [setting.id as u64, run as u64];
    let dev = model.simulate(setting.n, &mut stream_rng(plan.base_seed, &coords, DEV_STREAM))?;
    let val = model.simulate(plan.validation_n, &mut stream_rng(plan.base_seed, &coords, VALIDATION_STREAM))?;
    let x_val = val.dataset.covariates();
    let t_val = val.dataset.treatment();
    let risk_true: Vec<f64> = t_val
        .iter()
        .enumerate()
        .map(|(i, &a)| if a == 1 { val.true_risk_treated[i] } else { val.true_risk_control[i] })
        .collect();
    let mut out = UnitOutput {
        records: Vec::with_capacity(plan.strategies.len()),
        calibration: Vec::new(),
        timings: Vec::with_capacity(plan.strategies.len()),
    };
    for (s, spec) in plan.strategies.iter().enumerate() {
        let strategy = spec.id();
        let fit_seed = derive_seed(plan.base_seed, &[setting.id as u64, run as u64, 2, s as u64]);
        let start = Instant::now();
        let scored = fit_strategy(spec, &dev.dataset, fit_seed).and_then(|predictor| {
            let delta_hat = predictor.predict_delta(x_val)?;
            let risk_hat = predictor.predict_risk(x_val, t_val)?;
            let report = EvalReport::compute(
                &delta_hat,
                &val.true_delta,
                &risk_hat,
                &risk_true,
                val.dataset.outcome(),
                CALIBRATION_BINS,
            )?;
            Ok((predictor.diagnostics, report))
        });
        let seconds = start.elapsed().as_secs_f64();
        let mut record = RunRecord {
            setting_id: setting.id,
            run,
            n: setting.n,
            beta_t: setting.beta_t,
            heterogeneous: setting.heterogeneous,
            strategy: strategy.clone(),
            status: "ok".into(),
            error: String::new(),
            rmspe: None,
            q90_abs_delta_err: None,
            q90_abs_risk_err: None,
            brier: None,
            nagelkerke_r2: None,
            c_statistic: None,
            converged: None,
            lambdas: String::new(),
            nonzero: None,
        };
        match scored {
            Ok((diagnostics, report)) => {
                record.rmspe = Some(report.rmspe);
                record.q90_abs_delta_err = Some(report.q90_abs_delta_err);
                record.q90_abs_risk_err = Some(report.q90_abs_risk_err);
                record.brier = Some(report.brier);
                record.nagelkerke_r2 = report.nagelkerke_r2;
                record.c_statistic = report.c_statistic;
                record.converged = Some(diagnostics.converged);
                record.lambdas = diagnostics.lambdas.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
                record.nonzero = Some(diagnostics.nonzero);
                for (bin, b) in report.calibration.bins.iter().enumerate() {
                    out.calibration.push(CalibrationRecord {
                        setting_id: setting.id,
                        run,
                        strategy: strategy.clone(),
                        bin,
                        mean_predicted: b.mean_predicted,
                        mean_true: b.mean_reference,
                        count: b.count,
                    });
                }
            }
            Err(e) => {
                record.status = "error".into();
                record.error = e.to_string();
            }
        }
        out.records.push(record);
        out.timings.push(TimingRecord {
            setting_id: setting.id,
            run,
            strategy,
            seconds,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the units already committed to `results.csv`.
    pub resume: bool,
    /// Stop after this many units have been committed in this call.
    pub max_units: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StudyOutput {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub summary: Vec<CellSummary>,
    /// Units committed in total, including resumed ones.
    pub units_done: usize,
    pub units_total: usize,
}

fn aborted<E: std::fmt::Display>(e: E) -> Error {
    Error::StudyAborted(e.to_string())
}

/// Runs `plan`, writing the result files into `dir`.
///
/// Units run in parallel in batches the size of the thread pool and are
/// committed in canonical order; seeding is per unit, so serial and parallel
/// runs write the same bytes.
pub fn run_study(plan: &StudyPlan, dir: impl AsRef<Path>, options: &RunOptions) -> Result<StudyOutput> {
    plan.validate()?;
    let dir = dir.as_ref().to_path_buf();
    fs::create_dir_all(&dir).map_err(aborted)?;
    let models = setting_models(plan)?;
    let metadata = Metadata {
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        plan: plan.clone(),
        perturbations: make_perturbations(plan.perturbation_seed),
        settings: models
            .iter()
            .map(|(s, m)| SettingMetadata {
                setting: *s,
                beta0: m.beta0,
                sigma_control: m.sigma_arm[0],
                sigma_treated: m.sigma_arm[1],
            })
            .collect(),
    };
    let meta_path = dir.join(METADATA_FILE);
    let results_path = dir.join(RESULTS_FILE);
    let calibration_path = dir.join(CALIBRATION_FILE);
    let timings_path = dir.join(TIMINGS_FILE);

    let mut done = 0;
    if options.resume && results_path.exists() {
        let previous: Metadata = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(aborted)?)?;
        if previous.plan != *plan {
            return Err(Error::InvalidConfig("plan differs from the one recorded in metadata.json".into()));
        }
        done = committed_units(&results_path, plan)?;
        truncate_to_units(&results_path, plan, done)?;
        truncate_to_units(&calibration_path, plan, done)?;
        truncate_to_units(&timings_path, plan, done)?;
    } else {
        fs::write(&meta_path, serde_json::to_string_pretty(&metadata)? + "\n").map_err(aborted)?;
        for path in [&results_path, &calibration_path, &timings_path] {
            File::create(path).map_err(aborted)?;
        }
    }

    let mut results = Appender::<RunRecord>::open(&results_path)?;
    let mut calibration = Appender::<CalibrationRecord>::open(&calibration_path)?;
    let mut timings = Appender::<TimingRecord>::open(&timings_path)?;

    let total = plan.n_units();
    let runs = plan.runs;
    let mut end = total;
    if let Some(limit) = options.max_units {
        end = end.min(done + limit);
    }
    let batch = rayon::current_num_threads().max(1);
    let mut next = done;
    while next < end {
        let stop = (next + batch).min(end);
        let outputs: Vec<Result<UnitOutput>> = (next..stop)
            .into_par_iter()
            .map(|u| {
                let (setting, model) = &models[u / runs];
                run_unit(plan, setting, model, u % runs)
            })
            .collect();
        for output in outputs {
            let output = output?;
            calibration.append(&output.calibration)?;
            timings.append(&output.timings)?;
            results.append(&output.records)?;
        }
        next = stop;
    }

    let records = read_results(&results_path)?;
    let summary = aggregate(&records);
    write_csv(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(StudyOutput {
        dir,
        records,
        summary,
        units_done: next,
        units_total: total,
    })
}

/// Appends serialized rows to a CSV file, writing the header only into an empty file.
struct Appender<T> {
    path: PathBuf,
    needs_header: bool,
    _rows: std::marker::PhantomData<T>,
}

impl<T: Serialize> Appender<T> {
    fn open(path: &Path) -> Result<Self> {
        let len = fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        Ok(Appender {
            path: path.to_path_buf(),
            needs_header: len == 0,
            _rows: std::marker::PhantomData,
        })
    }

    fn append(&mut self, rows: &[T]) -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new().append(true).create(true).open(&self.path).map_err(aborted)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(self.needs_header)
            .from_writer(BufWriter::new(file));
        for row in rows {
            w.serialize(row).map_err(aborted)?;
        }
        let mut inner = w.into_inner().map_err(aborted)?;
        inner.flush().map_err(aborted)?;
        inner.get_ref().sync_data().map_err(aborted)?;
        self.needs_header = false;
        Ok(())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(aborted)?;
    for row in rows {
        w.serialize(row).map_err(aborted)?;
    }
    w.flush().map_err(aborted)?;
    Ok(())
}

/// Canonical unit index of every data row with its end offset, stopping at the first malformed row.
fn unit_offsets(path: &Path, plan: &StudyPlan) -> Result<(u64, Vec<(usize, u64)>)> {
    let Ok(bytes) = fs::read(path) else {
        return Ok((0, Vec::new()));
    };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(bytes.as_slice());
    let width = match rdr.headers() {
        Ok(h) => h.len(),
        Err(_) => return Ok((0, Vec::new())),
    };
    let header_end = rdr.position().byte();
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    while let Ok(true) = rdr.read_record(&mut record) {
        let end = rdr.position().byte();
        // a row cut short by a crash has no line terminator
        if record.len() != width || bytes.get(end as usize - 1) != Some(&b'\n') {
            break;
        }
        let parsed = (record[0].parse::<usize>(), record[1].parse::<usize>());
        let (Ok(setting), Ok(run)) = parsed else { break };
        rows.push((setting * plan.runs + run, end));
    }
    Ok((header_end, rows))
}

/// Number of leading units whose result rows are all present.
fn committed_units(path: &Path, plan: &StudyPlan) -> Result<usize> {
    let (_, rows) = unit_offsets(path, plan)?;
    let per_unit = plan.strategies.len();
    let mut done = 0;
    let mut count = 0;
    for &(unit, _) in &rows {
        if unit != done {
            break;
        }
        count += 1;
        if count == per_unit {
            done += 1;
            count = 0;
        }
    }
    Ok(done)
}

/// Cuts a result file back to the rows of units `0..done`.
fn truncate_to_units(path: &Path, plan: &StudyPlan, done: usize) -> Result<()> {
    let (header_end, rows) = unit_offsets(path, plan)?;
    let keep = rows
        .iter()
        .take_while(|(unit, _)| *unit < done)
        .last()
        .map_or(header_end, |(_, end)| *end);
    if path.exists() {
        let file = OpenOptions::new().write(true).open(path).map_err(aborted)?;
        file.set_len(keep).map_err(aborted)?;
        file.sync_data().map_err(aborted)?;
    }
    Ok(())
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Mean and standard error of one `(setting, strategy)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub setting_id: usize,
    pub n: usize,
    pub beta_t: f64,
    pub heterogeneous: bool,
    pub strategy: String,
    /// Runs with a successful fit.
    pub runs: usize,
    pub failed: usize,
    pub mean_rmspe: Option<f64>,
    /// `sd / sqrt(runs)`; empty with fewer than two runs.
    pub se_rmspe: Option<f64>,
    pub mean_q90_abs_delta_err: Option<f64>,
    /// `ok`, or `empty_cell` when every run failed.
    pub status: String,
}

impl CellSummary {
    pub fn mean(&self) -> Result<f64> {
        self.mean_rmspe.ok_or(Error::EmptyCell)
    }
}

fn strategy_rank(id: &str) -> usize {
    STRATEGY_IDS.iter().position(|s| *s == id).unwrap_or(STRATEGY_IDS.len())
}

/// Per-cell means and standard errors, ordered by setting and then strategy.
/// Values are reduced in run order, so the result does not depend on the
/// order of `records`.
pub fn aggregate(records: &[RunRecord]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(usize, usize, &str), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.setting_id, strategy_rank(&r.strategy), r.strategy.as_str()))
            .or_default()
            .push(r);
    }
    cells
        .into_values()
        .map(|mut rows| {
            rows.sort_by_key(|r| r.run);
            let first = rows[0];
            let ok: Vec<&RunRecord> = rows.iter().copied().filter(|r| r.is_ok()).collect();
            let rmspe: Vec<f64> = ok.iter().filter_map(|r| r.rmspe).collect();
            let q90: Vec<f64> = ok.iter().filter_map(|r| r.q90_abs_delta_err).collect();
            let (mean_rmspe, se_rmspe) = mean_se(&rmspe);
            CellSummary {
                setting_id: first.setting_id,
                n: first.n,
                beta_t: first.beta_t,
                heterogeneous: first.heterogeneous,
                strategy: first.strategy.clone(),
                runs: rmspe.len(),
                failed: rows.len() - rmspe.len(),
                mean_rmspe,
                se_rmspe,
                mean_q90_abs_delta_err: mean_se(&q90).0,
                status: if rmspe.is_empty() { "empty_cell".into() } else { "ok".into() },
            }
        })
        .collect()
}

fn mean_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let k = values.len();
    if k == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (Some(mean), Some((var / k as f64).sqrt()))
}

/// Generative-model check of one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub setting_id: usize,
    pub n: usize,
    pub beta_t: f64,
    pub heterogeneous: bool,
    pub beta0: f64,
    pub sigma_control: f64,
    pub sigma_treated: f64,
    pub quadrature_prevalence: f64,
    /// Mean true control risk over `mc_draws` simulated covariate rows.
    pub mc_control_prevalence: f64,
    pub mc_draws: usize,
    /// Nagelkerke R² of the true assigned-arm risks on `r2_n` simulated subjects.
    pub oracle_r2: f64,
    pub r2_n: usize,
}

/// Solved intercepts, Monte Carlo control prevalence and oracle R² of every setting.
pub fn dgm_audit(plan: &StudyPlan, mc_draws: usize, r2_n: usize) -> Result<Vec<AuditRow>> {
    setting_models(plan)?
        .into_iter()
        .map(|(s, model)| {
            let coords = [s.id as u64];
            let mc = model.mc_prevalence(0, mc_draws, &mut stream_rng(plan.base_seed, &coords, AUDIT_MC_STREAM))?;
            let r2 = model.oracle_r2(r2_n, &mut stream_rng(plan.base_seed, &coords, AUDIT_R2_STREAM))?;
            Ok(AuditRow {
                setting_id: s.id,
                n: s.n,
                beta_t: s.beta_t,
                heterogeneous: s.heterogeneous,
                beta0: model.beta0,
                sigma_control: model.sigma_arm[0],
                sigma_treated: model.sigma_arm[1],
                quadrature_prevalence: crate::dgm::marginal_prevalence(model.beta0, model.sigma_arm[0]),
                mc_control_prevalence: mc,
                mc_draws,
                oracle_r2: r2,
                r2_n,
            })
        })
        .collect()
}

pub fn write_audit(rows: &[AuditRow], path: impl AsRef<Path>) -> Result<()> {
    write_csv(path.as_ref(), rows)
}
