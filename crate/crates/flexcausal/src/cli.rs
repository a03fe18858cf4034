//! Command-line pipeline: simulate, ps, fit, predict, evaluate.
//!
//! Each subcommand is a thin binding over the library operations, so a
//! scripted sequence of CLI invocations produces byte-identical results
//! to direct library calls with the same configuration and seed. Every
//! command is idempotent given identical inputs. Errors map to distinct
//! exit codes (1 usage, 2 io, 3 parse, 4 numeric) with a single-line
//! machine-parsable message on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    build_design, build_response, load_panel, AnalysisLevel, CovariateSchema, DataError,
    DesignTarget, PanelDataset,
};
use crate::dgp::{generate, regime_config, DgpError};
use crate::estimands::{att, default_subgroups, subgroup_atts, EstimandError};
use crate::eval::{run_study, EvalError};
use crate::propensity::{practice_propensities, PropensityError, PsMethod};
use crate::sampler::{fit, PosteriorArchive, SamplerError};

/// CLI failure categories; ordered exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Parse(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(e) => CliError::Io(e.to_string()),
            ConfigError::Parse(e) => CliError::Parse(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) => CliError::Io(e.to_string()),
            DataError::Csv(ref c) if c.is_io_error() => CliError::Io(e.to_string()),
            _ => CliError::Parse(e.to_string()),
        }
    }
}

impl From<DgpError> for CliError {
    fn from(e: DgpError) -> Self {
        match e {
            DgpError::Io(_) => CliError::Io(e.to_string()),
            DgpError::Json(_) => CliError::Parse(e.to_string()),
            DgpError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            DgpError::NoTreatedPractices => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<PropensityError> for CliError {
    fn from(e: PropensityError) -> Self {
        match e {
            PropensityError::Io(_) => CliError::Io(e.to_string()),
            PropensityError::BadModel(_) => CliError::Parse(e.to_string()),
            PropensityError::NotImplemented(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Io(_) => CliError::Io(e.to_string()),
            SamplerError::Parse(_) => CliError::Parse(e.to_string()),
            SamplerError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EstimandError> for CliError {
    fn from(e: EstimandError) -> Self {
        match e {
            EstimandError::Sampler(inner) => inner.into(),
            EstimandError::BadRequest(_) => CliError::Usage(e.to_string()),
            EstimandError::UnknownCovariate(_) | EstimandError::NotDiscrete(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(_) => CliError::Io(e.to_string()),
            EvalError::Json(_) => CliError::Parse(e.to_string()),
            EvalError::BadStudy(_) | EvalError::UnknownBaseline(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "flexcausal",
    about = "Longitudinal Bayesian causal forests: simulate, fit, evaluate",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration (defaults used when absent).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic panels with ground truth.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Regime category 1..=5 overriding the configured knobs.
        #[arg(long)]
        category: Option<u8>,
        /// Replications to write (default 1).
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Estimate per-practice propensity scores.
    Ps {
        #[command(flatten)]
        common: CommonArgs,
        /// Panel CSV.
        #[arg(long)]
        data: PathBuf,
        /// Covariate schema JSON.
        #[arg(long)]
        schema: PathBuf,
        /// Propensity method (lasso or gbm) overriding the config.
        #[arg(long)]
        method: Option<String>,
        /// Output propensity CSV (practice_id,ps).
        #[arg(long)]
        out: PathBuf,
        /// Also save the fitted model.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Fit the causal forest and stream the posterior to disk.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Propensity CSV from `ps`.
        #[arg(long)]
        ps: PathBuf,
        /// Output archive path.
        #[arg(long)]
        out: PathBuf,
        /// Keep the prognostic forest in the archive.
        #[arg(long)]
        save_mu_forest: bool,
    },
    /// Summarize treatment-effect estimands from an archive.
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Posterior archive from `fit`.
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Output estimate JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation study and report RMSE/coverage/interval length.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Output directory for report files.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for replications.
        #[arg(long)]
        workers: Option<usize>,
        /// Also write per-replication long-format plot data.
        #[arg(long)]
        plot_data: bool,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_json_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.dgp.seed = seed;
        cfg.sampler.seed = seed;
        cfg.study.dgp.seed = seed;
    }
    Ok(cfg)
}

fn load_dataset(data: &Path, schema: &Path) -> Result<PanelDataset, CliError> {
    let schema = CovariateSchema::from_json_file(schema)?;
    Ok(load_panel(data, &schema)?)
}

/// Generate replications and write panel CSVs, truth JSONs, the schema,
/// and the effective configuration.
pub fn cmd_simulate(
    common: &CommonArgs,
    out: &Path,
    category: Option<u8>,
    reps: usize,
) -> Result<(), CliError> {
    if reps == 0 {
        return Err(CliError::Usage("reps must be positive".into()));
    }
    let cfg = load_config(common)?;
    let dgp = match category {
        Some(c) => regime_config(&cfg.dgp, c)?,
        None => cfg.dgp.clone(),
    };
    std::fs::create_dir_all(out)?;
    cfg.echo(out)?;
    for rep in 0..reps {
        let (data, truth) = generate(&dgp, rep)?;
        data.write_csv(&out.join(format!("panel_rep{rep}.csv")))?;
        truth.to_json_file(&out.join(format!("truth_rep{rep}.json")))?;
        if rep == 0 {
            data.schema.to_json_file(&out.join("schema.json"))?;
        }
    }
    Ok(())
}

/// Estimate per-practice propensities and write them as CSV.
pub fn cmd_ps(
    common: &CommonArgs,
    data: &Path,
    schema: &Path,
    method: Option<&str>,
    out: &Path,
    model_out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let mut settings = cfg.propensity.settings();
    if let Some(name) = method {
        settings.method = match name {
            "lasso" => PsMethod::Lasso,
            "gbm" => PsMethod::Gbm,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown propensity method {other} (expected lasso or gbm)"
                )))
            }
        };
    }
    let dataset = load_dataset(data, schema)?;
    let mut rng = ChaCha20Rng::seed_from_u64(common.seed.unwrap_or(cfg.dgp.seed));
    let (model, ps) = practice_propensities(
        &dataset,
        &settings,
        AnalysisLevel::Practice,
        cfg.study.max_cuts,
        &mut rng,
    )?;
    let mut w = csv::Writer::from_path(out).map_err(csv_io)?;
    w.write_record(["practice_id", "ps"]).map_err(csv_io)?;
    for (id, p) in dataset.practice_ids.iter().zip(&ps) {
        w.write_record([id.clone(), format!("{p}")]).map_err(csv_io)?;
    }
    w.flush()?;
    if let Some(path) = model_out {
        crate::propensity::save_model(&model, path)?;
    }
    Ok(())
}

/// Read a `practice_id,ps` CSV aligned to the dataset's practices.
pub fn read_ps_csv(path: &Path, data: &PanelDataset) -> Result<Vec<f64>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_io)?;
    let mut by_id = std::collections::HashMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Parse(e.to_string()))?;
        if rec.len() != 2 {
            return Err(CliError::Parse(format!(
                "propensity csv: expected 2 fields, got {}",
                rec.len()
            )));
        }
        let p: f64 = rec[1]
            .parse()
            .map_err(|e| CliError::Parse(format!("propensity csv: {e}")))?;
        by_id.insert(rec[0].to_string(), p);
    }
    data.practice_ids
        .iter()
        .map(|id| {
            by_id.get(id).copied().ok_or_else(|| {
                CliError::Parse(format!("propensity csv: missing practice {id}"))
            })
        })
        .collect()
}

/// Fit the model and write the posterior archive.
pub fn cmd_fit(
    common: &CommonArgs,
    data: &Path,
    schema: &Path,
    ps: &Path,
    out: &Path,
    save_mu_forest: bool,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let dataset = load_dataset(data, schema)?;
    let ps = read_ps_csv(ps, &dataset)?;
    let level = AnalysisLevel::Practice;
    let mu_design = build_design(&dataset, DesignTarget::Mu, level, Some(&ps), cfg.study.max_cuts)?;
    let tau_design = build_design(&dataset, DesignTarget::Tau, level, None, cfg.study.max_cuts)?;
    let resp = build_response(&dataset, level);
    let mut sampler_cfg = cfg.sampler.clone();
    sampler_cfg.tree_prior = cfg.prior;
    if save_mu_forest {
        sampler_cfg.save_mu_forest = true;
    }
    fit(
        &mu_design,
        &tau_design,
        &resp.y,
        &resp.zmask,
        &sampler_cfg,
        out,
    )?;
    Ok(())
}

/// One line of the predict output.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct EstimateLine {
    pub estimand: String,
    pub years: Vec<u8>,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub draws: usize,
}

/// Summarize the configured estimands from an archive.
pub fn cmd_predict(
    common: &CommonArgs,
    archive: &Path,
    data: &Path,
    schema: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    cfg.estimands.validate()?;
    let dataset = load_dataset(data, schema)?;
    let archive = PosteriorArchive::open(archive)?;
    let level = AnalysisLevel::Practice;
    let tau_design = build_design(&dataset, DesignTarget::Tau, level, None, cfg.study.max_cuts)?;
    let resp = build_response(&dataset, level);
    let rows: Vec<u32> = (0..resp.zmask.len() as u32)
        .filter(|&i| {
            resp.zmask[i as usize] && cfg.estimands.years.contains(&resp.keys[i as usize].1)
        })
        .collect();
    let mut lines = Vec::new();
    let overall = att(&archive, &tau_design, &rows, None, cfg.estimands.level)?;
    lines.push(EstimateLine {
        estimand: "att".into(),
        years: cfg.estimands.years.clone(),
        point: overall.point,
        lower: overall.lower,
        upper: overall.upper,
        draws: overall.draws_used,
    });
    // An unconfigured request falls back to one subgroup per level of
    // each discrete baseline covariate present in the design.
    let subgroups = if cfg.estimands.subgroups.is_empty() {
        let names: Vec<&str> = ["X1", "X2", "X3", "X4", "X5"]
            .into_iter()
            .filter(|n| tau_design.columns.iter().any(|c| c.name() == *n))
            .collect();
        default_subgroups(&tau_design, &names)?
    } else {
        cfg.estimands.subgroups.clone()
    };
    if !subgroups.is_empty() {
        let subs = subgroup_atts(
            &archive,
            &tau_design,
            &rows,
            None,
            &subgroups,
            cfg.estimands.level,
        )?;
        for (name, s) in subs {
            lines.push(EstimateLine {
                estimand: name,
                years: cfg.estimands.years.clone(),
                point: s.point,
                lower: s.lower,
                upper: s.upper,
                draws: s.draws_used,
            });
        }
    }
    std::fs::write(
        out,
        serde_json::to_string_pretty(&lines).map_err(|e| CliError::Parse(e.to_string()))?,
    )?;
    Ok(())
}

/// Run the configured study and write report files.
pub fn cmd_evaluate(
    common: &CommonArgs,
    out: &Path,
    workers: Option<usize>,
    plot_data: bool,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let report = run_study(&cfg.study, workers)?;
    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    if plot_data {
        report.write_plot_data(&out.join("plot_data.csv"))?;
    }
    Ok(())
}

/// Dispatch a parsed invocation.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate {
            common,
            out,
            category,
            reps,
        } => cmd_simulate(common, out, *category, *reps),
        Command::Ps {
            common,
            data,
            schema,
            method,
            out,
            model_out,
        } => cmd_ps(
            common,
            data,
            schema,
            method.as_deref(),
            out,
            model_out.as_deref(),
        ),
        Command::Fit {
            common,
            data,
            schema,
            ps,
            out,
            save_mu_forest,
        } => cmd_fit(common, data, schema, ps, out, *save_mu_forest),
        Command::Predict {
            common,
            archive,
            data,
            schema,
            out,
        } => cmd_predict(common, archive, data, schema, out),
        Command::Evaluate {
            common,
            out,
            workers,
            plot_data,
        } => cmd_evaluate(common, out, *workers, *plot_data),
    }
}

fn csv_io(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}
