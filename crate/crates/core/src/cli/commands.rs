use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{DecomposeArgs, DesignArgs, MetaArgs, OracleArgs, SimulateArgs};
use crate::decomposition::{decompose, DecomposeConfig, ResidualMode, DEFAULT_VOLUME_THRESHOLD};
use crate::error::{Error, Result};
use crate::io::{read_csv, Columns};
use crate::meta::{dersimonian_laird, meta_baseline, write_qi_csv, HospitalQi, MetaResult};
use crate::model::{Dataset, EffectMode, LinkFunction, OutcomeKind};
use crate::simulation::{
    oracle_truth, run_study, write_records_csv, write_summary_csv, SimulationConfig, StudyConfig, StudySummary,
    TruthOracle, DEFAULT_ORACLE_DRAWS, DEFAULT_REPLICATIONS,
};
use crate::uncertainty::{credible_intervals, posterior_draws, write_draws_csv, DEFAULT_DRAWS, DEFAULT_LEVEL};

const DEFAULT_SEED: u64 = 1;
const DEFAULT_N: usize = 5000;
const DEFAULT_M: usize = 10;

/// Write `bytes` to `path`, or to standard output when no path is given.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit(path, text.as_bytes())
}

/// CSV file whose first line echoes the resolved configuration.
fn emit_csv<C: Serialize>(path: &Path, config: &C, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = format!("# config: {}\n", serde_json::to_string(config)?).into_bytes();
    body(&mut buf)?;
    emit(Some(path), &buf)
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn guard_outputs(input: &Path, outputs: &[&Option<PathBuf>]) -> Result<()> {
    for p in outputs.iter().filter_map(|o| o.as_deref()) {
        if same_file(input, p) {
            return Err(Error::Config(format!("output `{}` would overwrite the input file", p.display())));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct InputRun {
    input: String,
    outcome_column: String,
    hospital_column: String,
    covariates: Vec<String>,
}

fn load_input(args: &super::InputArgs, kind: Option<OutcomeKind>) -> Result<(Dataset, InputRun)> {
    let input = args
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("no input file given (--input)".into()))?;
    let outcome = args.outcome_column.as_deref().unwrap_or("outcome");
    let hospital = args.hospital_column.as_deref().unwrap_or("hospital");
    let raw = read_csv(
        input,
        &Columns {
            outcome,
            hospital,
            covariates: args.covariates.as_deref(),
        },
    )?;
    let covariates = raw.covariate_names.clone();
    let ds = Dataset::validate(raw, kind)?;
    Ok((
        ds,
        InputRun {
            input: input.display().to_string(),
            outcome_column: outcome.into(),
            hospital_column: hospital.into(),
            covariates,
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
struct DecomposeRun {
    command: &'static str,
    #[serde(flatten)]
    input: InputRun,
    outcome_kind: OutcomeKind,
    link: LinkFunction,
    effects: EffectMode,
    residual_mode: ResidualMode,
    volume_threshold: usize,
    intervals: bool,
    draws: usize,
    level: f64,
    seed: u64,
}

pub fn cmd_decompose(args: &DecomposeArgs) -> Result<()> {
    let draws = args.draws.unwrap_or(DEFAULT_DRAWS);
    let level = args.level.unwrap_or(DEFAULT_LEVEL);
    if draws == 0 {
        return Err(Error::Config("--draws must be at least 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("--level must lie in (0, 1), got {level}")));
    }
    if let Some(input) = &args.input.input {
        guard_outputs(input, &[&args.output, &args.draws_output])?;
    }
    let kind = args.outcome_kind.and_then(|k| k.resolve());
    let (ds, input) = load_input(&args.input, kind)?;
    let cfg = DecomposeConfig {
        link: args.link,
        effects: args.effects.unwrap_or(EffectMode::Fixed),
        residual_mode: args.residual_mode.unwrap_or(ResidualMode::Subtraction),
        volume_threshold: args.volume_threshold.unwrap_or(DEFAULT_VOLUME_THRESHOLD),
        divisor: None,
    };
    let run = DecomposeRun {
        command: "decompose",
        input,
        outcome_kind: ds.kind(),
        link: cfg.link.unwrap_or_else(|| ds.kind().default_link()),
        effects: cfg.effects,
        residual_mode: cfg.residual_mode,
        volume_threshold: cfg.volume_threshold,
        intervals: args.intervals.unwrap_or(true),
        draws,
        level,
        seed: args.seed.unwrap_or(DEFAULT_SEED),
    };
    let mut dec = decompose(&ds, &cfg)?;
    if run.intervals {
        let post = posterior_draws(&dec, &ds, cfg.residual_mode, draws, run.seed)?;
        dec.result.intervals = Some(credible_intervals(&post, level)?);
        if let Some(p) = &args.draws_output {
            emit_csv(p, &run, |buf| write_draws_csv(&post, buf))?;
        }
    } else if args.draws_output.is_some() {
        return Err(Error::Config("--draws-output needs intervals to be enabled".into()));
    }

    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a DecomposeRun,
        hospitals: &'a [String],
        result: &'a crate::decomposition::DecompositionResult,
    }
    emit_json(
        args.output.as_deref(),
        &Report {
            config: &run,
            hospitals: ds.hospital_labels(),
            result: &dec.result,
        },
    )
}

fn simulation_config(d: &DesignArgs) -> SimulationConfig {
    let mut cfg = SimulationConfig::new(
        d.n.unwrap_or(DEFAULT_N),
        d.m.unwrap_or(DEFAULT_M),
        d.outcome_kind.unwrap_or(OutcomeKind::Continuous),
        d.seed.unwrap_or(DEFAULT_SEED),
    );
    cfg.scenario = d.scenario.unwrap_or_default();
    cfg.hospital_params = d.hospital_params.clone();
    cfg
}

#[derive(Debug, Clone, Serialize)]
struct OracleRun {
    command: &'static str,
    simulation: SimulationConfig,
    oracle_draws: usize,
}

fn compute_oracle(d: &DesignArgs, command: &'static str) -> Result<(OracleRun, TruthOracle)> {
    let sim = simulation_config(d);
    let run = OracleRun {
        command,
        simulation: sim.resolved()?,
        oracle_draws: d.oracle_draws.unwrap_or(DEFAULT_ORACLE_DRAWS),
    };
    let params = sim.params()?;
    let oracle = oracle_truth(&params, sim.outcome_kind, run.oracle_draws, sim.seed)?;
    Ok((run, oracle))
}

pub fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let (run, oracle) = compute_oracle(&args.design, "oracle")?;

    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a OracleRun,
        oracle: &'a TruthOracle,
        total: f64,
    }
    emit_json(
        args.output.as_deref(),
        &Report {
            config: &run,
            total: oracle.total(),
            oracle: &oracle,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
struct SimulateRun {
    #[serde(flatten)]
    oracle: OracleRun,
    study: StudyConfig,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let (oracle_run, oracle) = compute_oracle(&args.design, "simulate")?;
    let study = StudyConfig {
        replications: args.replications.unwrap_or(DEFAULT_REPLICATIONS),
        estimators: args.estimators.clone().unwrap_or_else(|| vec![EffectMode::Fixed, EffectMode::Random]),
        volume_threshold: args.volume_threshold.unwrap_or(0),
    };
    let run = SimulateRun {
        oracle: oracle_run,
        study,
    };
    let summary = run_study(&simulation_config(&args.design), &run.study, &oracle)?;
    if let Some(p) = &args.summary_csv {
        emit_csv(p, &run, |buf| write_summary_csv(&summary, buf))?;
    }
    if let Some(p) = &args.replicates_csv {
        emit_csv(p, &run, |buf| write_records_csv(&summary, buf))?;
    }

    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a SimulateRun,
        summary: &'a StudySummary,
    }
    emit_json(
        args.output.as_deref(),
        &Report {
            config: &run,
            summary: &summary,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
enum MetaSource {
    Patients(InputRun),
    Estimates { estimates: String },
}

#[derive(Debug, Clone, Serialize)]
struct MetaRun {
    command: &'static str,
    #[serde(flatten)]
    source: MetaSource,
}

#[derive(serde::Deserialize)]
struct EstimateRow {
    hospital: String,
    qi: f64,
    variance: f64,
}

fn read_estimates(path: &Path) -> Result<Vec<HospitalQi>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    rdr.deserialize::<EstimateRow>()
        .map(|r| {
            let r = r?;
            Ok(HospitalQi {
                hospital: r.hospital,
                volume: 0,
                observed: f64::NAN,
                expected: f64::NAN,
                qi: r.qi,
                variance: r.variance,
            })
        })
        .collect()
}

pub fn cmd_meta(args: &MetaArgs) -> Result<()> {
    let source_path = args.estimates.as_ref().or(args.input.input.as_ref());
    if let Some(input) = source_path {
        guard_outputs(input, &[&args.output, &args.qi_csv])?;
    }
    let (run, qi, meta) = match &args.estimates {
        Some(p) => {
            let qi = read_estimates(p)?;
            let meta = dersimonian_laird(&qi)?;
            let source = MetaSource::Estimates {
                estimates: p.display().to_string(),
            };
            (MetaRun { command: "meta", source }, qi, meta)
        }
        None => {
            let (ds, input) = load_input(&args.input, Some(OutcomeKind::Binary))?;
            let (qi, meta) = meta_baseline(&ds)?;
            (
                MetaRun {
                    command: "meta",
                    source: MetaSource::Patients(input),
                },
                qi,
                meta,
            )
        }
    };
    if let Some(p) = &args.qi_csv {
        emit_csv(p, &run, |buf| write_qi_csv(&qi, buf))?;
    }

    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a MetaRun,
        meta: &'a MetaResult,
        hospitals: &'a [HospitalQi],
    }
    emit_json(
        args.output.as_deref(),
        &Report {
            config: &run,
            meta: &meta,
            hospitals: &qi,
        },
    )
}
