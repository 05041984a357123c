use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ziplnpca::elbo::ModelKind;
use ziplnpca::missingness::Mechanism;
use ziplnpca::optim::{Criterion, QSpec, StepRule};
use ziplnpca::uncertainty::ImputationMode;

use crate::output::CliError;

/// Version of the JSON config schema accepted by `--config`.
pub const CONFIG_SCHEMA_VERSION: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "ziplnpca", version, about = "Zero-inflated Poisson log-normal PCA for site-by-year count panels")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model, optionally selecting q from a range.
    Fit(FitArgs),
    /// Point predictions for the missing cells.
    Impute(ImputeArgs),
    /// Monte Carlo confidence and prediction intervals for the missing cells.
    Intervals(IntervalsArgs),
    /// Linear trend through the estimated year effects.
    Trend(TrendArgs),
    /// Single change point in the estimated year effects.
    Changepoint(ChangepointArgs),
    /// Missingness simulation grid: mechanisms x rates x replicates.
    Simulate(SimulateArgs),
    /// Identifiability diagnostics for the visit pattern.
    CheckIdentifiability(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// Intercept plus site and year indicators.
    Effects,
    /// Intercept only.
    Intercept,
    /// Intercept plus the covariates in --site-covariates / --year-covariates.
    Covariates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArg {
    Zi,
    Pln,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Zi => ModelKind::ZeroInflated,
            ModelArg::Pln => ModelKind::Pln,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionArg {
    Bic,
    Icl,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Bic => Criterion::Bic,
            CriterionArg::Icl => Criterion::Icl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepArg {
    BlockNewton,
    Joint,
}

impl From<StepArg> for StepRule {
    fn from(s: StepArg) -> Self {
        match s {
            StepArg::BlockNewton => StepRule::BlockNewton,
            StepArg::Joint => StepRule::AdaptiveFirstOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Conditional,
    Marginal,
}

impl From<ModeArg> for ImputationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Conditional => ImputationMode::Conditional,
            ModeArg::Marginal => ImputationMode::Marginal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetArg {
    Abundance,
    Presence,
}

/// `3` or an inclusive range `1..8`.
fn parse_q(s: &str) -> Result<QSpec, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("'{s}' is not a latent dimension or range like 1..8"));
    match s.split_once("..") {
        Some((lo, hi)) => {
            let (lo, hi) = (num(lo)?, num(hi.trim_start_matches('='))?);
            if lo > hi {
                return Err(format!("empty range '{s}'"));
            }
            Ok(QSpec::Range(lo, hi))
        }
        None => Ok(QSpec::Fixed(num(s)?)),
    }
}

fn parse_unit(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("'{s}' must be a number in (0, 1)")),
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// Counts CSV: a site column followed by one column per year; empty fields are unvisited.
    #[arg(long)]
    pub counts: PathBuf,
    /// Extra token marking an unvisited cell, e.g. NA.
    #[arg(long)]
    pub missing_token: Option<String>,
    #[arg(long, value_enum, default_value_t = DesignKind::Effects)]
    pub design: DesignKind,
    /// Site covariates CSV: site id column, then one column per covariate, rows in counts order.
    #[arg(long)]
    pub site_covariates: Option<PathBuf>,
    /// Year covariates CSV: year label column, then one column per covariate.
    #[arg(long)]
    pub year_covariates: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "ZIPLNPCA_OUT", default_value = "ziplnpca-out")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Latent dimension, or a range such as 1..8 to select from.
    #[arg(long, value_parser = parse_q, default_value = "1")]
    pub q: QSpec,
    #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
    pub criterion: CriterionArg,
    #[arg(long, value_enum, default_value_t = ModelArg::Zi)]
    pub model: ModelArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub rel_tol: f64,
    #[arg(long, value_enum, default_value_t = StepArg::BlockNewton)]
    pub step_rule: StepArg,
    /// Fit measured covariates on their original scale.
    #[arg(long)]
    pub no_standardize: bool,
    /// Start every q in a range from scratch.
    #[arg(long)]
    pub no_warm_start: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fit document written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Conditional)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct IntervalsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Conditional)]
    pub mode: ModeArg,
    /// Number of Monte Carlo particles.
    #[arg(long = "B", default_value_t = 500)]
    pub particles: usize,
    #[arg(long, value_parser = parse_unit, default_value = "0.9")]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip count simulation and report confidence intervals only.
    #[arg(long)]
    pub confidence_only: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrendArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_enum, default_value_t = TargetArg::Abundance)]
    pub target: TargetArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ChangepointArgs {
    #[command(flatten)]
    pub trend: TrendArgs,
    #[arg(long, value_parser = parse_unit, default_value = "0.05")]
    pub alpha: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CheckArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Latent dimension for the low-rank conditions.
    #[arg(long)]
    pub q: Option<usize>,
    /// Fit document whose Σ is used for the numerical overlap-rank check; also supplies q.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 200)]
    pub sites: usize,
    #[arg(long, default_value_t = 10)]
    pub years: usize,
    #[arg(long, default_value_t = 1)]
    pub q: usize,
    /// Log-scale intercept of the abundance layer.
    #[arg(long, default_value_t = 1.5)]
    pub mu: f64,
    /// Presence probability.
    #[arg(long, value_parser = parse_unit, default_value = "0.7")]
    pub presence: f64,
    /// Latent variance per year.
    #[arg(long, default_value_t = 0.5)]
    pub sigma2: f64,
    #[arg(long, value_delimiter = ',', default_value = "mcar,mar_year,mar_site,mar_year_site")]
    pub mechanisms: Vec<Mechanism>,
    #[arg(long, value_delimiter = ',', value_parser = parse_unit, default_value = "0.3,0.5,0.7")]
    pub rates: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[arg(long = "B", default_value_t = 500)]
    pub particles: usize,
    #[arg(long, value_parser = parse_unit, default_value = "0.9")]
    pub level: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Conditional)]
    pub mode: ModeArg,
    /// Also fit the PLN baseline and report per-cell error ratios.
    #[arg(long)]
    pub compare_pln: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for replicates; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    #[serde(skip)]
    pub jobs: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Replaces `--config FILE` with the flags it holds, placed right after the
/// subcommand so that explicit flags override them.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    if pos < 2 {
        return Err(CliError::usage("--config must follow the subcommand"));
    }
    let (path, consumed) = match argv[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => match argv.get(pos + 1) {
            Some(p) => (p.clone(), 2),
            None => return Err(CliError::usage("--config needs a file")),
        },
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::usage(format!("cannot read config '{path}': {e}")))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config '{path}' is not valid JSON: {e}")))?;
    let obj = doc.as_object().ok_or_else(|| CliError::usage(format!("config '{path}' must hold a JSON object")))?;
    let mut flags = Vec::new();
    for (key, value) in obj {
        if key == "schema_version" {
            if value.as_u64() != Some(CONFIG_SCHEMA_VERSION) {
                return Err(CliError::usage(format!(
                    "config schema_version {value} is not supported (expected {CONFIG_SCHEMA_VERSION})"
                )));
            }
            continue;
        }
        let flag = if key == "B" { "--B".to_string() } else { format!("--{}", key.replace('_', "-")) };
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            _ => Err(CliError::usage(format!("config key '{key}' has an unsupported value {v}"))),
        };
        match value {
            serde_json::Value::Bool(true) => flags.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let parts: Result<Vec<String>, CliError> = items.iter().map(scalar).collect();
                flags.push(flag);
                flags.push(parts?.join(","));
            }
            v => {
                flags.push(flag);
                flags.push(scalar(v)?);
            }
        }
    }
    let mut out: Vec<String> = argv[..2].to_vec();
    out.extend(flags);
    out.extend(argv[2..pos].iter().cloned());
    out.extend(argv[pos + consumed..].iter().cloned());
    Ok(out)
}
