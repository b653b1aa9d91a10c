//! `socc`: decide local controllability of endpoint-constrained control
//! systems numerically, steer to nearby targets, sweep parameters, and check
//! second-order optimality conditions.
//!
//! Exit codes: 0 analysis completed (whatever the verdict), 2 invalid input,
//! 3 inadmissible reference process, 4 corrector failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rayon::prelude::*;

use socc_core::analysis::{
    self, analyze, AnalysisError, AnalyzeOptions, ReachError, SweepRow,
};
use socc_core::corrector::CorrectorError;
use socc_core::scenario::ScenarioFile;

#[derive(Parser)]
#[command(name = "socc", version, about = "local controllability analysis for control systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Clone)]
struct GlobalArgs {
    /// Override the number of grid cells.
    #[arg(long = "grid-n", global = true)]
    grid_n: Option<usize>,
    /// Seed for all randomized pieces.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Exclude timestamps so reports are byte-reproducible.
    #[arg(long = "no-meta", global = true, default_value_t = false)]
    no_meta: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Full analysis: multiplier cone, abnormality, certificate, verdict.
    Analyze {
        scenario: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the analysis over a parameter range; emits CSV rows.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        param: String,
        /// Range `lo:hi`.
        #[arg(long)]
        range: String,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Steer the system to a nearby endpoint target.
    Reach {
        scenario: PathBuf,
        /// Comma-separated target vector (m1+m2 entries).
        #[arg(long)]
        target: String,
        /// Steer even when the analysis verdict does not guarantee success.
        #[arg(long, default_value_t = false)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the steered trajectory CSV here.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Second-order necessary conditions for a cost over z1..z2n.
    CheckOptimality {
        scenario: PathBuf,
        #[arg(long)]
        cost: String,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Randomized search for a control realizing a shifted equality target;
    /// a large residual floor corroborates an obstruction.
    Probe {
        scenario: PathBuf,
        /// Comma-separated shift of the equality endpoint values (m2 entries).
        #[arg(long)]
        shift: String,
        #[arg(long, default_value_t = 2000)]
        budget: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> CliError {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(err: AnalysisError) -> CliError {
        let code = match &err {
            AnalysisError::Inadmissible { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

impl From<ReachError> for CliError {
    fn from(err: ReachError) -> CliError {
        match err {
            ReachError::Analysis(e) => e.into(),
            ReachError::PreconditionNotMet(_) => CliError {
                code: 2,
                message: err.to_string(),
            },
            ReachError::Corrector(c) => CliError {
                code: 4,
                message: c.to_string(),
            },
        }
    }
}

impl From<CorrectorError> for CliError {
    fn from(err: CorrectorError) -> CliError {
        CliError {
            code: 4,
            message: err.to_string(),
        }
    }
}

fn load_scenario(path: &PathBuf) -> Result<ScenarioFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::invalid(format!("cannot read {}: {e}", path.display())))?;
    ScenarioFile::from_str(&text).map_err(|e| CliError::invalid(e.to_string()))
}

fn parse_vector(text: &str, expected: usize, what: &str) -> Result<DVector<f64>, CliError> {
    let values: Result<Vec<f64>, _> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect();
    let values = values.map_err(|e| CliError::invalid(format!("bad {what} `{text}`: {e}")))?;
    if values.len() != expected {
        return Err(CliError::invalid(format!(
            "{what} has {} entries, expected {expected}",
            values.len()
        )));
    }
    Ok(DVector::from_vec(values))
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::invalid(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(content.as_bytes())
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| CliError::invalid(format!("stdout: {e}")))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let opts = AnalyzeOptions {
        seed: cli.global.seed,
        include_meta: !cli.global.no_meta,
        grid_n: cli.global.grid_n,
        q_samples: 20,
    };
    match cli.command {
        Command::Analyze { scenario, out } => {
            let file = load_scenario(&scenario)?;
            let report = analyze(&file, &opts)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::invalid(e.to_string()))?;
            emit(&out, &json)?;
            Ok(())
        }
        Command::Sweep {
            scenario,
            param,
            range,
            steps,
            out,
        } => {
            let file = load_scenario(&scenario)?;
            let (lo, hi) = range
                .split_once(':')
                .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)))
                .ok_or_else(|| CliError::invalid(format!("bad --range `{range}`, expected lo:hi")))?;
            // rows run in a parallel worker pool; output order is preserved
            let values: Vec<f64> = (0..steps)
                .map(|i| {
                    if steps == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect();
            let rows: Result<Vec<SweepRow>, AnalysisError> = values
                .par_iter()
                .map(|&value| {
                    analyze(&file.with_param(&param, value), &opts).map(|r| SweepRow {
                        value,
                        min_restricted_eig: r
                            .certificate
                            .as_ref()
                            .and_then(|c| c.min_restricted_eig),
                        verdict: r.verdict,
                    })
                })
                .collect();
            let csv = analysis::sweep_csv(&param, &rows?);
            emit(&out, &csv)?;
            Ok(())
        }
        Command::Reach {
            scenario,
            target,
            force,
            out,
            trajectory,
        } => {
            let file = load_scenario(&scenario)?;
            let resolved = socc_core::scenario::resolve(&file, opts.grid_n)
                .map_err(|e| CliError::invalid(e.to_string()))?;
            let m = resolved.system.m1 + resolved.system.m2;
            let y = parse_vector(&target, m, "--target")?;
            let output = analysis::reach(&file, &y, force, &opts)?;
            if !output.steering.converged {
                return Err(CliError {
                    code: 4,
                    message: format!(
                        "steering did not converge (residual {:.3e})",
                        output.steering.residual
                    ),
                });
            }
            if let Some(path) = &trajectory {
                std::fs::write(path, &output.trajectory_csv)
                    .map_err(|e| CliError::invalid(format!("cannot write {}: {e}", path.display())))?;
            }
            let json = serde_json::to_string_pretty(&output.summary)
                .map_err(|e| CliError::invalid(e.to_string()))?;
            emit(&out, &json)?;
            Ok(())
        }
        Command::CheckOptimality {
            scenario,
            cost,
            samples,
            out,
        } => {
            let file = load_scenario(&scenario)?;
            let output = analysis::check_optimality(&file, &cost, samples, &opts)?;
            let json = serde_json::to_string_pretty(&output)
                .map_err(|e| CliError::invalid(e.to_string()))?;
            emit(&out, &json)?;
            Ok(())
        }
        Command::Probe {
            scenario,
            shift,
            budget,
            out,
        } => {
            let file = load_scenario(&scenario)?;
            let resolved = socc_core::scenario::resolve(&file, opts.grid_n)
                .map_err(|e| CliError::invalid(e.to_string()))?;
            let shift = parse_vector(&shift, resolved.system.m2, "--shift")?;
            let report = analysis::probe(&file, &shift, budget, &opts)?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::invalid(e.to_string()))?;
            emit(&out, &json)?;
            Ok(())
        }
    }
}
