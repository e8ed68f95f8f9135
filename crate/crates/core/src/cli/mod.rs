//! Command-line front end.
//!
//! Every option can also come from a TOML file given with `--config`; keys
//! are the long flag names. Flags given on the command line win over the
//! file, and the file wins over built-in defaults.

mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decomposition::ResidualMode;
use crate::error::{Error, Result};
use crate::model::{EffectMode, LinkFunction, OutcomeKind};
use crate::simulation::HospitalParams;

pub use commands::{cmd_decompose, cmd_meta, cmd_oracle, cmd_simulate};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "vardecomp", version, about = "Causal variance decomposition of hospital quality indicators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose the variance of an outcome in a patient-level CSV file.
    Decompose(DecomposeArgs),
    /// Run a simulation study against the known generating mechanism.
    Simulate(SimulateArgs),
    /// Compute the true components of a simulation design by Monte Carlo.
    Oracle(OracleArgs),
    /// Indirectly standardized rates and a DerSimonian-Laird meta-analysis.
    Meta(MetaArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Auto,
    Binary,
    Continuous,
}

impl KindArg {
    fn resolve(self) -> Option<OutcomeKind> {
        match self {
            KindArg::Auto => None,
            KindArg::Binary => Some(OutcomeKind::Binary),
            KindArg::Continuous => Some(OutcomeKind::Continuous),
        }
    }
}

/// Options shared by the subcommands that read a CSV file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct InputArgs {
    /// Patient-level CSV file with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Outcome column [default: outcome].
    #[arg(long)]
    pub outcome_column: Option<String>,
    /// Hospital identifier column [default: hospital].
    #[arg(long)]
    pub hospital_column: Option<String>,
    /// Comma-separated covariate columns [default: every other column].
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
}

impl InputArgs {
    fn merge(self, file: InputArgs) -> InputArgs {
        InputArgs {
            input: self.input.or(file.input),
            outcome_column: self.outcome_column.or(file.outcome_column),
            hospital_column: self.hospital_column.or(file.hospital_column),
            covariates: self.covariates.or(file.covariates),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct DecomposeArgs {
    /// TOML file with default values for any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// auto, binary or continuous [default: auto].
    #[arg(long, value_enum)]
    pub outcome_kind: Option<KindArg>,
    /// identity or logit [default: logit for binary, identity otherwise].
    #[arg(long)]
    pub link: Option<LinkFunction>,
    /// fixed or random hospital effects [default: fixed].
    #[arg(long)]
    pub effects: Option<EffectMode>,
    /// subtraction or distributional [default: subtraction].
    #[arg(long)]
    pub residual_mode: Option<ResidualMode>,
    /// Hospitals with fewer patients get intercept-only assignment terms [default: 35].
    #[arg(long)]
    pub volume_threshold: Option<usize>,
    /// Number of posterior draws for the intervals [default: 1000].
    #[arg(long)]
    pub draws: Option<usize>,
    /// Credible level [default: 0.95].
    #[arg(long)]
    pub level: Option<f64>,
    /// Skip the credible intervals.
    #[arg(long)]
    #[serde(skip)]
    pub no_intervals: bool,
    #[arg(skip)]
    pub intervals: Option<bool>,
    /// Master random seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report path [default: standard output].
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Optional CSV dump of the component draws.
    #[arg(long)]
    pub draws_output: Option<PathBuf>,
    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct DesignArgs {
    /// Patients per replicate [default: 5000].
    #[arg(long)]
    pub n: Option<usize>,
    /// Hospitals [default: 10].
    #[arg(long)]
    pub m: Option<usize>,
    /// binary or continuous [default: continuous].
    #[arg(long)]
    pub outcome_kind: Option<OutcomeKind>,
    /// Master random seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Set every hospital effect to zero.
    #[arg(long)]
    #[serde(skip)]
    pub zero_hospital_effect: bool,
    /// Assign patients to hospitals uniformly at random.
    #[arg(long)]
    #[serde(skip)]
    pub randomized_assignment: bool,
    /// Remove the case-mix effect on the outcome.
    #[arg(long)]
    #[serde(skip)]
    pub no_case_mix_effect: bool,
    #[arg(skip)]
    pub scenario: Option<crate::simulation::Scenario>,
    /// Explicit hospital parameters (configuration file only).
    #[arg(skip)]
    pub hospital_params: Option<HospitalParams>,
    /// Monte Carlo draws for the true components [default: 1000000].
    #[arg(long)]
    pub oracle_draws: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// TOML file with default values for any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignArgs,
    /// Replications [default: 200].
    #[arg(long)]
    pub replications: Option<usize>,
    /// Comma-separated estimators, fixed and/or random [default: fixed,random].
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<EffectMode>>,
    /// Assignment-model volume threshold [default: 0].
    #[arg(long)]
    pub volume_threshold: Option<usize>,
    /// JSON summary path [default: standard output].
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// CSV summary, one row per estimator and component.
    #[arg(long)]
    pub summary_csv: Option<PathBuf>,
    /// CSV dump of every replicate estimate.
    #[arg(long)]
    pub replicates_csv: Option<PathBuf>,
    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct OracleArgs {
    /// TOML file with default values for any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub design: DesignArgs,
    /// JSON report path [default: standard output].
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct MetaArgs {
    /// TOML file with default values for any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Pool precomputed estimates instead: CSV with columns `hospital`, `qi`, `variance`.
    #[arg(long, conflicts_with = "input")]
    pub estimates: Option<PathBuf>,
    /// JSON report path [default: standard output].
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// CSV of the per-hospital standardized rates.
    #[arg(long)]
    pub qi_csv: Option<PathBuf>,
    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

const INPUT_KEYS: &[&str] = &["input", "outcome-column", "hospital-column", "covariates"];
const DESIGN_KEYS: &[&str] = &["n", "m", "outcome-kind", "seed", "scenario", "hospital-params", "oracle-draws"];
const DECOMPOSE_KEYS: &[&str] = &[
    "outcome-kind",
    "link",
    "effects",
    "residual-mode",
    "volume-threshold",
    "draws",
    "level",
    "intervals",
    "seed",
    "output",
    "draws-output",
    "threads",
];
const SIMULATE_KEYS: &[&str] = &[
    "replications",
    "estimators",
    "volume-threshold",
    "output",
    "summary-csv",
    "replicates-csv",
    "threads",
];
const ORACLE_KEYS: &[&str] = &["output", "threads"];
const META_KEYS: &[&str] = &["estimates", "output", "qi-csv", "threads"];

/// Parse a configuration file, rejecting keys outside `allowed`.
fn load_file<T: DeserializeOwned + Default>(path: Option<&Path>, allowed: &[&[&str]]) -> Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    if let Some(k) = table.keys().find(|k| !allowed.iter().any(|set| set.contains(&k.as_str()))) {
        return Err(Error::Config(format!("{}: unknown key `{k}`", p.display())));
    }
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

impl DecomposeArgs {
    /// Command-line values over file values.
    pub fn merged(self) -> Result<Self> {
        let file: DecomposeArgs = load_file(self.config.as_deref(), &[INPUT_KEYS, DECOMPOSE_KEYS])?;
        Ok(DecomposeArgs {
            config: self.config,
            input: self.input.merge(file.input),
            outcome_kind: self.outcome_kind.or(file.outcome_kind),
            link: self.link.or(file.link),
            effects: self.effects.or(file.effects),
            residual_mode: self.residual_mode.or(file.residual_mode),
            volume_threshold: self.volume_threshold.or(file.volume_threshold),
            draws: self.draws.or(file.draws),
            level: self.level.or(file.level),
            no_intervals: self.no_intervals,
            intervals: if self.no_intervals { Some(false) } else { file.intervals },
            seed: self.seed.or(file.seed),
            output: self.output.or(file.output),
            draws_output: self.draws_output.or(file.draws_output),
            threads: self.threads.or(file.threads),
        })
    }
}

impl DesignArgs {
    fn merge(self, file: DesignArgs) -> DesignArgs {
        let base = file.scenario.unwrap_or_default();
        let scenario = crate::simulation::Scenario {
            zero_hospital_effect: self.zero_hospital_effect || base.zero_hospital_effect,
            randomized_assignment: self.randomized_assignment || base.randomized_assignment,
            no_case_mix_effect: self.no_case_mix_effect || base.no_case_mix_effect,
        };
        DesignArgs {
            n: self.n.or(file.n),
            m: self.m.or(file.m),
            outcome_kind: self.outcome_kind.or(file.outcome_kind),
            seed: self.seed.or(file.seed),
            zero_hospital_effect: scenario.zero_hospital_effect,
            randomized_assignment: scenario.randomized_assignment,
            no_case_mix_effect: scenario.no_case_mix_effect,
            scenario: Some(scenario),
            hospital_params: self.hospital_params.or(file.hospital_params),
            oracle_draws: self.oracle_draws.or(file.oracle_draws),
        }
    }
}

impl SimulateArgs {
    pub fn merged(self) -> Result<Self> {
        let file: SimulateArgs = load_file(self.config.as_deref(), &[DESIGN_KEYS, SIMULATE_KEYS])?;
        Ok(SimulateArgs {
            config: self.config,
            design: self.design.merge(file.design),
            replications: self.replications.or(file.replications),
            estimators: self.estimators.or(file.estimators),
            volume_threshold: self.volume_threshold.or(file.volume_threshold),
            output: self.output.or(file.output),
            summary_csv: self.summary_csv.or(file.summary_csv),
            replicates_csv: self.replicates_csv.or(file.replicates_csv),
            threads: self.threads.or(file.threads),
        })
    }
}

impl OracleArgs {
    pub fn merged(self) -> Result<Self> {
        let file: OracleArgs = load_file(self.config.as_deref(), &[DESIGN_KEYS, ORACLE_KEYS])?;
        Ok(OracleArgs {
            config: self.config,
            design: self.design.merge(file.design),
            output: self.output.or(file.output),
            threads: self.threads.or(file.threads),
        })
    }
}

impl MetaArgs {
    pub fn merged(self) -> Result<Self> {
        let file: MetaArgs = load_file(self.config.as_deref(), &[INPUT_KEYS, META_KEYS])?;
        Ok(MetaArgs {
            config: self.config,
            input: self.input.merge(file.input),
            estimates: self.estimates.or(file.estimates),
            output: self.output.or(file.output),
            qi_csv: self.qi_csv.or(file.qi_csv),
            threads: self.threads.or(file.threads),
        })
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::InvalidData(_) | Error::DimensionMismatch(_) | Error::UnknownHospital { .. } | Error::Csv(_) => EXIT_DATA,
        Error::RankDeficient { .. } | Error::NonConvergence { .. } | Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Io { .. } | Error::Json(_) => EXIT_IO,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match exit_code(e) {
        EXIT_CONFIG => "config",
        EXIT_DATA => "data",
        EXIT_NUMERICAL => "numerical",
        _ => "io",
    }
}

fn run_pool<F: FnOnce() -> Result<()> + Send>(threads: Option<usize>, f: F) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(f)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose(a) => {
            let a = a.merged()?;
            run_pool(a.threads, || cmd_decompose(&a))
        }
        Command::Simulate(a) => {
            let a = a.merged()?;
            run_pool(a.threads, || cmd_simulate(&a))
        }
        Command::Oracle(a) => {
            let a = a.merged()?;
            run_pool(a.threads, || cmd_oracle(&a))
        }
        Command::Meta(a) => {
            let a = a.merged()?;
            run_pool(a.threads, || cmd_meta(&a))
        }
    }
}

/// Parse arguments, run, and return the process exit status. Errors are
/// reported on standard error as one JSON object.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let report = serde_json::json!({ "error": error_kind(&e), "message": e.to_string(), "exit_code": code });
            eprintln!("{report}");
            code
        }
    }
}

pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    run_from(std::env::args_os())
}
