//! `hte`: simulation studies, model fitting, prediction and validation from the shell.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hte_core::dgm::{gen_trial, DgmConfig};
use hte_core::eval::{bootstrap_te_calibration, bootstrap_validate, te_quintile_calibration, BootstrapMode, EffectGroup};
use hte_core::harness::{dgm_audit, run_study, write_audit, RunOptions, StudyPlan};
use hte_core::strategies::{fit_strategy, SavedModel, StrategySpec};
use hte_core::tabular::{load_csv_with_encoding, read_csv, save_csv, Dataset, Schema};

#[derive(Parser)]
#[command(name = "hte", version, about = "Individualized treatment effect prediction for binary outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Oob,
    Optimism,
}

#[derive(Subcommand)]
enum Command {
    /// Run a factorial simulation study.
    Simulate {
        /// JSON study plan; the full factorial design when omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `runs` of the plan.
        #[arg(long)]
        runs: Option<usize>,
        /// Overrides `base_seed` of the plan.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue an interrupted study in `out`.
        #[arg(long)]
        resume: bool,
    },
    /// Write one simulated trial as CSV.
    GenTrial {
        #[arg(long, default_value_t = 1200)]
        n: usize,
        #[arg(long, default_value_t = 0.6f64.ln(), allow_hyphen_values = true)]
        beta_t: f64,
        #[arg(long)]
        heterogeneous: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one strategy and save the model.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict arm risks and risk differences for new covariate rows.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bootstrap validation of several strategies on one dataset.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Comma-separated strategy ids.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 100)]
        bootstrap: usize,
        #[arg(long, value_enum, default_value = "oob")]
        mode: Mode,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Observed against predicted effect by groups of predicted effect.
    TeCalib {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check solved intercepts, simulated prevalence and oracle R² of every setting.
    DgmCheck {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        mc_draws: usize,
        #[arg(long, default_value_t = 100_000)]
        r2_n: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate {
            plan,
            out,
            runs,
            seed,
            resume,
        } => simulate(plan.as_deref(), &out, runs, seed, resume),
        Command::GenTrial {
            n,
            beta_t,
            heterogeneous,
            seed,
            out,
        } => {
            let config = DgmConfig {
                n,
                beta_t,
                heterogeneous,
                run_seed: seed,
                ..DgmConfig::default()
            };
            save_csv(&gen_trial(&config)?.dataset, &out)?;
            Ok(())
        }
        Command::Fit {
            data,
            schema,
            strategy,
            seed,
            out,
        } => fit(&data, &schema, &strategy, seed, &out),
        Command::Predict { model, data, out } => predict(&model, &data, &out),
        Command::Validate {
            data,
            schema,
            strategies,
            bootstrap,
            mode,
            groups,
            seed,
            out,
        } => {
            let mode = match mode {
                Mode::Oob => BootstrapMode::OutOfBag,
                Mode::Optimism => BootstrapMode::OptimismCorrected,
            };
            validate(&data, &schema, &strategies, bootstrap, mode, groups, seed, &out)
        }
        Command::TeCalib { data, model, groups, out } => te_calib(&data, &model, groups, &out),
        Command::DgmCheck {
            plan,
            out,
            mc_draws,
            r2_n,
        } => {
            let plan = load_plan(plan.as_deref())?;
            let rows = dgm_audit(&plan, mc_draws, r2_n)?;
            write_audit(&rows, &out)?;
            for r in &rows {
                println!(
                    "setting {:>2}: beta0 {:.5} prevalence {:.5} (mc {:.5}) oracle R2 {:.4}",
                    r.setting_id, r.beta0, r.quadrature_prevalence, r.mc_control_prevalence, r.oracle_r2
                );
            }
            Ok(())
        }
    }
}

fn load_plan(path: Option<&Path>) -> Result<StudyPlan> {
    match path {
        Some(path) => StudyPlan::from_json_file(path).context("reading plan"),
        None => Ok(StudyPlan::full(50, 0)),
    }
}

fn simulate(plan: Option<&Path>, out: &Path, runs: Option<usize>, seed: Option<u64>, resume: bool) -> Result<()> {
    let mut plan = load_plan(plan)?;
    if let Some(runs) = runs {
        plan.runs = runs;
    }
    if let Some(seed) = seed {
        plan.base_seed = seed;
    }
    let options = RunOptions { resume, max_units: None };
    let output = run_study(&plan, out, &options)?;
    println!("{} of {} units complete in {}", output.units_done, output.units_total, out.display());
    for cell in &output.summary {
        let mean = cell.mean_rmspe.map_or("-".to_string(), |m| format!("{m:.5}"));
        let se = cell.se_rmspe.map_or("-".to_string(), |s| format!("{s:.5}"));
        println!(
            "setting {:>2} n={:<5} {:<14} rmspe {mean} (se {se}) failed {}",
            cell.setting_id, cell.n, cell.strategy, cell.failed
        );
    }
    Ok(())
}

fn fit(data: &Path, schema: &Path, strategy: &str, seed: u64, out: &Path) -> Result<()> {
    let schema = Schema::from_json_file(schema).context("reading schema")?;
    let (dataset, encodings) = load_csv_with_encoding(data, &schema)?;
    let spec = StrategySpec::from_id(strategy)?;
    let predictor = fit_strategy(&spec, &dataset, seed)?;
    println!(
        "{}: {} nonzero coefficients, converged {}",
        spec.id(),
        predictor.diagnostics.nonzero,
        predictor.diagnostics.converged
    );
    SavedModel {
        schema,
        encodings,
        predictor,
    }
    .save(out)?;
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    row: usize,
    risk_control: f64,
    risk_treated: f64,
    delta: f64,
}

fn predict(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let model = SavedModel::load(model).context("reading model")?;
    let x = model.covariates(File::open(data)?)?;
    let risk0 = model.predictor.predict_arm_risk(&x, 0)?;
    let risk1 = model.predictor.predict_arm_risk(&x, 1)?;
    let rows: Vec<PredictionRow> = (0..x.nrows())
        .map(|i| PredictionRow {
            row: i,
            risk_control: risk0[i],
            risk_treated: risk1[i],
            delta: risk1[i] - risk0[i],
        })
        .collect();
    write_rows(out, &rows)
}

#[derive(Serialize)]
struct ValidationRow {
    strategy: String,
    mode: String,
    replicates: usize,
    failed_replicates: usize,
    brier: f64,
    nagelkerke_r2: f64,
    apparent_brier: f64,
    apparent_nagelkerke_r2: f64,
    mean_out_of_bag_fraction: f64,
}

#[derive(Serialize)]
struct ReplicateRow {
    strategy: String,
    replicate: usize,
    redraws: usize,
    out_of_bag: usize,
    brier: Option<f64>,
    nagelkerke_r2: Option<f64>,
    error: String,
}

#[derive(Serialize)]
struct GroupRow {
    strategy: String,
    /// Empty for the apparent grouping on the full data.
    replicate: Option<usize>,
    group: usize,
    count: usize,
    n_treated: usize,
    n_control: usize,
    mean_predicted: Option<f64>,
    observed_effect: Option<f64>,
    standard_error: Option<f64>,
    status: String,
}

impl GroupRow {
    fn new(strategy: &str, replicate: Option<usize>, g: &EffectGroup) -> Self {
        GroupRow {
            strategy: strategy.to_string(),
            replicate,
            group: g.group,
            count: g.count,
            n_treated: g.n_treated,
            n_control: g.n_control,
            mean_predicted: g.mean_predicted,
            observed_effect: g.observed_effect,
            standard_error: g.standard_error,
            status: format!("{:?}", g.status).to_lowercase(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn validate(
    data: &Path,
    schema: &Path,
    strategies: &[String],
    b: usize,
    mode: BootstrapMode,
    groups: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if strategies.is_empty() {
        bail!("no strategies given");
    }
    let schema = Schema::from_json_file(schema).context("reading schema")?;
    let (dataset, _) = load_csv_with_encoding(data, &schema)?;
    fs::create_dir_all(out)?;
    let mut summary = Vec::new();
    let mut replicates = Vec::new();
    let mut calibration = Vec::new();
    for id in strategies {
        let spec = StrategySpec::from_id(id)?;
        let s = bootstrap_validate(&dataset, &spec, b, seed, mode)?;
        let failed = s.replicates.iter().filter(|r| r.error.is_some()).count();
        println!("{id}: brier {:.5} (apparent {:.5}), R2 {:.4}", s.brier, s.apparent_brier, s.nagelkerke_r2);
        summary.push(ValidationRow {
            strategy: id.clone(),
            mode: format!("{mode:?}"),
            replicates: s.replicates.len(),
            failed_replicates: failed,
            brier: s.brier,
            nagelkerke_r2: s.nagelkerke_r2,
            apparent_brier: s.apparent_brier,
            apparent_nagelkerke_r2: s.apparent_nagelkerke_r2,
            mean_out_of_bag_fraction: s.mean_out_of_bag_fraction,
        });
        replicates.extend(s.replicates.into_iter().map(|r| ReplicateRow {
            strategy: id.clone(),
            replicate: r.replicate,
            redraws: r.redraws,
            out_of_bag: r.out_of_bag,
            brier: r.brier,
            nagelkerke_r2: r.nagelkerke_r2,
            error: r.error.unwrap_or_default(),
        }));
        let apparent = fit_strategy(&spec, &dataset, seed)?;
        for g in te_quintile_calibration(&apparent, &dataset, groups)? {
            calibration.push(GroupRow::new(id, None, &g));
        }
        for (r, result) in bootstrap_te_calibration(&dataset, &spec, b, groups, seed)? {
            if let Ok(gs) = result {
                calibration.extend(gs.iter().map(|g| GroupRow::new(id, Some(r), g)));
            }
        }
    }
    write_rows(&out.join("bootstrap_summary.csv"), &summary)?;
    write_rows(&out.join("bootstrap_replicates.csv"), &replicates)?;
    write_rows(&out.join("te_calibration.csv"), &calibration)
}

fn te_calib(data: &Path, model: &Path, groups: usize, out: &Path) -> Result<()> {
    let model = SavedModel::load(model).context("reading model")?;
    let (raw, _) = read_csv(File::open(data)?, &model.schema)?;
    let x = model.covariates(File::open(data)?)?;
    let dataset = Dataset::from_parts(x, raw.treatment().to_vec(), raw.outcome().to_vec())?;
    let id = model.predictor.spec.id();
    let rows: Vec<GroupRow> = te_quintile_calibration(&model.predictor, &dataset, groups)?
        .iter()
        .map(|g| GroupRow::new(&id, None, g))
        .collect();
    write_rows(out, &rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
