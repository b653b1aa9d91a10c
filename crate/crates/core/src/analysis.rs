//! End-to-end analysis pipeline and machine-readable reports.
//!
//! `analyze` runs admissibility -> multiplier cone -> abnormality/singularity
//! -> certificate search and folds everything into one JSON-serializable
//! report. The verdict vocabulary separates "a theorem applies"
//! (CONTROLLABLE, LINEARLY_CONTROLLABLE) from "the theory is silent here"
//! (NOT_CERTIFIED, UNKNOWN); the tool never claims non-controllability.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corrector::{
    build_corrector_problem, build_right_inverse, probe_reachability, reach_target,
    CorrectorError, ProbeReport, SteeringResult,
};
use crate::kernel::{build_kernel_cone, KernelCone};
use crate::multiplier::{
    lambda_max_set, singularity_check, ConeDescription, MultiplierError,
};
use crate::optimality::{check_second_order_necessary, OptimalityReport};
use crate::quadform::{
    assemble_q, certificate_search, lambda_q_nonempty, Certificate, CertificateVerdict,
    LambdaQStatus, QuadraticForm,
};
use crate::scenario::{resolve, Scenario, ScenarioError, ScenarioFile};
use crate::system::ControlSystem;
use crate::trajectory::{
    dynamics_defect, linearize, simulate, trajectory_csv, Grid, LinearizedCells, Process,
    SimulateError,
};
use crate::Tolerances;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Multiplier(#[from] MultiplierError),
    #[error("reference process is not admissible: dynamics defect {dyn_defect:.3e}, f violation {f_violation:.3e}, g residual {g_residual:.3e}, controls in window: {controls_in_window}")]
    Inadmissible {
        dyn_defect: f64,
        f_violation: f64,
        g_residual: f64,
        controls_in_window: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "CONTROLLABLE")]
    Controllable,
    #[serde(rename = "LINEARLY_CONTROLLABLE")]
    LinearlyControllable,
    #[serde(rename = "NOT_CERTIFIED")]
    NotCertified,
    #[serde(rename = "UNKNOWN")]
    Unknown,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Verdict::Controllable => "CONTROLLABLE",
            Verdict::LinearlyControllable => "LINEARLY_CONTROLLABLE",
            Verdict::NotCertified => "NOT_CERTIFIED",
            Verdict::Unknown => "UNKNOWN",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        ToolInfo {
            name: "socc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub dyn_defect: f64,
    pub f_violation: f64,
    pub g_residual: f64,
    pub controls_in_window: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub costate_t0: Vec<f64>,
    pub costate_t1: Vec<f64>,
    pub boundary_residual: f64,
    pub complementarity: f64,
    pub hamiltonian_margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConeReport {
    pub ambient: usize,
    pub nullspace_dim: usize,
    pub order: usize,
    pub is_empty: bool,
    pub is_pointed: bool,
    pub degenerate_nullspace: bool,
    pub generators: Vec<GeneratorReport>,
    pub lineality: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WitnessReport {
    pub h0: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub eq_residual: f64,
    pub ineq_violation: f64,
    /// Q value of the witness for each generator.
    pub q_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub verdict: CertificateVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_restricted_eig: Option<f64>,
    pub tol_q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<WitnessReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaQSummary {
    pub samples: usize,
    pub nonempty: usize,
    pub empty: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaInfo {
    pub timestamp_unix: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool: ToolInfo,
    pub scenario: ScenarioFile,
    pub grid: Grid,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub admissibility: AdmissibilityReport,
    pub lambda_max: ConeReport,
    pub abnormality_order: usize,
    pub singular: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singular_witness: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_q: Option<LambdaQSummary>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaInfo>,
}

#[derive(Debug, Clone, Copy)]
pub struct AnalyzeOptions {
    pub seed: u64,
    pub include_meta: bool,
    pub grid_n: Option<usize>,
    /// Variations sampled for the Lambda(q) study.
    pub q_samples: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            seed: 1,
            include_meta: false,
            grid_n: None,
            q_samples: 20,
        }
    }
}

/// Everything the pipeline computed, for callers that keep going (reach,
/// optimality, sweeps).
pub struct AnalysisArtifacts {
    pub scenario: Scenario,
    pub process: Process,
    pub cells: LinearizedCells,
    pub cone_desc: ConeDescription,
    pub kernel: KernelCone,
    pub certificate: Option<Certificate>,
    pub forms: Vec<QuadraticForm>,
    pub report: AnalysisReport,
}

fn admissibility(
    system: &ControlSystem,
    process: &Process,
    tols: &Tolerances,
) -> (AdmissibilityReport, bool) {
    let z = process.endpoints();
    let f_violation = if system.m1 > 0 {
        system
            .f
            .value(&z)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(*v))
            .max(0.0)
    } else {
        0.0
    };
    let g_residual = if system.m2 > 0 {
        system.g.value(&z).amax()
    } else {
        0.0
    };
    let controls_in_window = process
        .u
        .iter()
        .all(|u| system.control_set.window_contains(u));
    let report = AdmissibilityReport {
        dyn_defect: process.dyn_defect,
        f_violation,
        g_residual,
        controls_in_window,
    };
    let ok = report.dyn_defect <= tols.dyn_defect
        && report.f_violation <= tols.admissibility
        && report.g_residual <= tols.admissibility
        && controls_in_window;
    (report, ok)
}

/// Run the full analysis pipeline on a scenario.
pub fn analyze(file: &ScenarioFile, opts: &AnalyzeOptions) -> Result<AnalysisReport, AnalysisError> {
    analyze_with_artifacts(file, opts).map(|a| a.report)
}

pub fn analyze_with_artifacts(
    file: &ScenarioFile,
    opts: &AnalyzeOptions,
) -> Result<AnalysisArtifacts, AnalysisError> {
    let scenario = resolve(file, opts.grid_n)?;
    let tols = scenario.tolerances.clone();
    let mut process = simulate(&scenario.system, &scenario.x0, &scenario.controls, scenario.grid)?;
    process.dyn_defect = dynamics_defect(&scenario.system, &process);

    let (adm_report, admissible) = admissibility(&scenario.system, &process, &tols);
    if !admissible {
        return Err(AnalysisError::Inadmissible {
            dyn_defect: adm_report.dyn_defect,
            f_violation: adm_report.f_violation,
            g_residual: adm_report.g_residual,
            controls_in_window: adm_report.controls_in_window,
        });
    }

    let cells = linearize(&scenario.system, &process);
    let cone_desc = lambda_max_set(&scenario.system, &process, &cells, &tols)?;
    let singularity = singularity_check(&scenario.system, &process, &cells, &cone_desc, &tols);
    let kernel = build_kernel_cone(&scenario.system, &process, &cells, tols.svd_rel);

    let mut notes = Vec::new();
    let mut certificate = None;
    let mut forms: Vec<QuadraticForm> = Vec::new();
    let mut lambda_q = None;

    let verdict = if cone_desc.is_empty {
        // Lambda_max empty already decides local controllability through the
        // first-order criterion (zero variation).
        Verdict::LinearlyControllable
    } else if cone_desc.order == 1 && !singularity.singular {
        let (cert, cert_forms) = certificate_search(
            &scenario.system,
            &process,
            &kernel,
            &cone_desc,
            singularity.singular,
            opts.seed,
            &tols,
        );
        forms = cert_forms;
        let verdict = match cert.verdict {
            CertificateVerdict::Controllable => Verdict::Controllable,
            CertificateVerdict::NotCertified => Verdict::NotCertified,
            CertificateVerdict::Unknown => Verdict::Unknown,
        };
        if verdict != Verdict::Controllable {
            let summary = lambda_q_study(
                &cone_desc, &forms, &kernel, cert.tol_q, singularity.singular, opts,
            );
            if summary.samples > 0 && summary.nonempty == summary.samples {
                notes.push("Lambda(q) nonempty for all sampled q".to_string());
            }
            lambda_q = Some(summary);
        }
        certificate = Some(cert);
        verdict
    } else {
        if singularity.singular {
            notes.push("process is singular; certificate theory does not apply".to_string());
        } else {
            notes.push(format!(
                "abnormality order {} > 1; no decision procedure for Lambda(q) emptiness",
                cone_desc.order
            ));
        }
        forms = cone_desc
            .generators
            .iter()
            .take(4)
            .map(|g| assemble_q(&scenario.system, &process, g, &kernel))
            .collect();
        let tol_q = tols.q_rel
            * forms
                .iter()
                .map(|f| f.spectral_norm())
                .fold(0.0f64, f64::max);
        let summary = lambda_q_study(&cone_desc, &forms, &kernel, tol_q, singularity.singular, opts);
        if summary.samples > 0 && summary.nonempty == summary.samples {
            notes.push("Lambda(q) nonempty for all sampled q".to_string());
        }
        lambda_q = Some(summary);
        Verdict::Unknown
    };

    let report = AnalysisReport {
        tool: ToolInfo::default(),
        scenario: scenario.file.clone(),
        grid: scenario.grid,
        seed: opts.seed,
        tolerances: tols.clone(),
        admissibility: adm_report,
        lambda_max: cone_report(&cone_desc, &process),
        abnormality_order: cone_desc.order,
        singular: singularity.singular,
        singular_witness: singularity.witness.as_ref().map(|w| w.iter().copied().collect()),
        certificate: certificate.as_ref().map(|c| certificate_report(c, &kernel, &forms)),
        lambda_q,
        verdict,
        notes,
        meta: if opts.include_meta {
            Some(MetaInfo {
                timestamp_unix: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            })
        } else {
            None
        },
    };

    Ok(AnalysisArtifacts {
        scenario,
        process,
        cells,
        cone_desc,
        kernel,
        certificate,
        forms,
        report,
    })
}

fn lambda_q_study(
    cone_desc: &ConeDescription,
    forms: &[QuadraticForm],
    kernel: &KernelCone,
    tol_q: f64,
    singular: bool,
    opts: &AnalyzeOptions,
) -> LambdaQSummary {
    let samples = kernel.sample(opts.q_samples, opts.seed);
    let mut summary = LambdaQSummary {
        samples: samples.len(),
        nonempty: 0,
        empty: 0,
        unknown: 0,
    };
    for q in &samples {
        let coords = kernel.join(&q.h0, &q.v);
        match lambda_q_nonempty(cone_desc, forms, &coords, singular, tol_q) {
            LambdaQStatus::NonEmpty { .. } => summary.nonempty += 1,
            LambdaQStatus::Empty => summary.empty += 1,
            LambdaQStatus::Unknown => summary.unknown += 1,
        }
    }
    summary
}

fn cone_report(cone: &ConeDescription, _process: &Process) -> ConeReport {
    ConeReport {
        ambient: cone.ambient,
        nullspace_dim: cone.nullspace_dim,
        order: cone.order,
        is_empty: cone.is_empty,
        is_pointed: cone.is_pointed,
        degenerate_nullspace: cone.degenerate_nullspace,
        generators: cone
            .generators
            .iter()
            .map(|g| GeneratorReport {
                lambda1: g.lambda1.iter().copied().collect(),
                lambda2: g.lambda2.iter().copied().collect(),
                costate_t0: g.costate.p[0].iter().copied().collect(),
                costate_t1: g.costate.p.last().unwrap().iter().copied().collect(),
                boundary_residual: g.boundary_residual,
                complementarity: g.complementarity,
                hamiltonian_margin: g.hamiltonian_margin,
            })
            .collect(),
        lineality: cone
            .lineality
            .iter()
            .map(|l| l.iter().copied().collect())
            .collect(),
    }
}

fn certificate_report(
    cert: &Certificate,
    kernel: &KernelCone,
    forms: &[QuadraticForm],
) -> CertificateReport {
    let witness = cert.witness.as_ref().map(|coords| {
        let variation = kernel.variation(coords);
        WitnessReport {
            h0: variation.h0.iter().copied().collect(),
            v: variation.v.iter().map(|v| v.iter().copied().collect()).collect(),
            eq_residual: kernel.eq_residual(coords),
            ineq_violation: kernel.ineq_violation(coords),
            q_values: forms.iter().map(|f| f.eval(coords)).collect(),
        }
    });
    CertificateReport {
        verdict: cert.verdict,
        reason: cert.reason.clone(),
        min_restricted_eig: cert.min_restricted_eig,
        tol_q: cert.tol_q,
        witness,
    }
}

/// Re-run the certificate checks from a serialized report alone: rebuilds
/// the scenario, re-verifies the witness residuals and Q signs, and returns
/// the reproduced verdict. No search is re-run.
pub fn reverify_certificate(report: &AnalysisReport) -> Result<Verdict, AnalysisError> {
    let scenario = resolve(&report.scenario, Some(report.grid.steps))?;
    let process = simulate(&scenario.system, &scenario.x0, &scenario.controls, scenario.grid)?;
    let cells = linearize(&scenario.system, &process);
    let kernel = build_kernel_cone(&scenario.system, &process, &cells, scenario.tolerances.svd_rel);
    let cone = lambda_max_set(&scenario.system, &process, &cells, &scenario.tolerances)?;

    let cert = match &report.certificate {
        Some(c) => c,
        None => {
            return Ok(if report.lambda_max.is_empty {
                Verdict::LinearlyControllable
            } else {
                Verdict::Unknown
            })
        }
    };
    let witness = match &cert.witness {
        Some(w) => w,
        None => return Ok(report.verdict),
    };
    let h0 = DVector::from_row_slice(&witness.h0);
    let v: Vec<DVector<f64>> = witness.v.iter().map(|x| DVector::from_row_slice(x)).collect();
    let coords = kernel.join(&h0, &v);
    if kernel.eq_residual(&coords) > scenario.tolerances.cone_residual
        || kernel.ineq_violation(&coords) > scenario.tolerances.cone_residual
    {
        return Ok(Verdict::Unknown);
    }
    let all_negative = cone.generators.iter().all(|g| {
        let form = assemble_q(&scenario.system, &process, g, &kernel);
        form.eval(&coords) < -cert.tol_q
    });
    Ok(if all_negative && !cone.is_empty {
        Verdict::Controllable
    } else {
        report.verdict
    })
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub min_restricted_eig: Option<f64>,
    pub verdict: Verdict,
}

pub fn sweep(
    file: &ScenarioFile,
    param: &str,
    lo: f64,
    hi: f64,
    steps: usize,
    opts: &AnalyzeOptions,
) -> Result<Vec<SweepRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(steps);
    for i in 0..steps {
        let value = if steps == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (steps - 1) as f64
        };
        let report = analyze(&file.with_param(param, value), opts)?;
        rows.push(SweepRow {
            value,
            min_restricted_eig: report.certificate.as_ref().and_then(|c| c.min_restricted_eig),
            verdict: report.verdict,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{param},min_restricted_eig,verdict\n");
    for row in rows {
        let eig = row
            .min_restricted_eig
            .map(|v| format!("{v:.12e}"))
            .unwrap_or_else(|| "nan".to_string());
        out.push_str(&format!("{:.12e},{},{}\n", row.value, eig, row.verdict));
    }
    out
}

// ---------------------------------------------------------------------------
// steering entry point

#[derive(Debug, Error)]
pub enum ReachError {
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("analysis verdict {0} does not allow steering (use force to override)")]
    PreconditionNotMet(Verdict),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
}

#[derive(Debug, Serialize)]
pub struct ReachSummary {
    pub y: Vec<f64>,
    pub iterations: usize,
    pub deviation: f64,
    pub kappa_empirical: f64,
    pub kappa_theory: f64,
    pub converged: bool,
    pub residual: f64,
    pub verdict: Verdict,
}

pub struct ReachOutput {
    pub steering: SteeringResult,
    pub summary: ReachSummary,
    pub trajectory_csv: String,
    pub report: AnalysisReport,
}

pub fn reach(
    file: &ScenarioFile,
    target: &DVector<f64>,
    force: bool,
    opts: &AnalyzeOptions,
) -> Result<ReachOutput, ReachError> {
    let artifacts = analyze_with_artifacts(file, opts)?;
    let verdict = artifacts.report.verdict;
    if !force && verdict != Verdict::Controllable && verdict != Verdict::LinearlyControllable {
        return Err(ReachError::PreconditionNotMet(verdict));
    }
    let direction = artifacts
        .certificate
        .as_ref()
        .and_then(|c| c.witness.clone());
    let problem = build_corrector_problem(
        &artifacts.scenario.system,
        &artifacts.process,
        &artifacts.kernel,
        direction.as_ref(),
        &artifacts.scenario.tolerances,
    );
    let tols = &artifacts.scenario.tolerances;
    let inverse = build_right_inverse(&problem, &artifacts.cells, tols)?;
    let steering = reach_target(
        &problem,
        &inverse,
        target,
        tols.reach_max_iter,
        tols.reach_tol,
        tols,
    )?;
    if !steering.converged {
        return Err(ReachError::Corrector(CorrectorError::Diverged {
            residual: steering.residual,
            iterations: steering.iterations,
        }));
    }

    // node-level trajectory CSV of the steered process
    let mut steered = artifacts.process.clone();
    steered.x = steering.node_states.clone();
    steered.u = (0..steered.grid.steps)
        .map(|k| steering.control.value_at(steered.grid.time(k)))
        .collect();
    let trajectory = trajectory_csv(&steered);

    let summary = ReachSummary {
        y: steering.y.clone(),
        iterations: steering.iterations,
        deviation: steering.deviation,
        kappa_empirical: steering.kappa_empirical,
        kappa_theory: steering.kappa_theory,
        converged: steering.converged,
        residual: steering.residual,
        verdict,
    };
    Ok(ReachOutput {
        steering,
        summary,
        trajectory_csv: trajectory,
        report: artifacts.report,
    })
}

// ---------------------------------------------------------------------------
// optimality entry point

#[derive(Debug, Serialize)]
pub struct OptimalityOutput {
    pub report: OptimalityReport,
    pub refuted: bool,
}

pub fn check_optimality(
    file: &ScenarioFile,
    cost_expr: &str,
    q_samples: usize,
    opts: &AnalyzeOptions,
) -> Result<OptimalityOutput, AnalysisError> {
    let scenario = resolve(file, opts.grid_n)?;
    let cost = crate::system::ParsedEndpoint::new(
        &[cost_expr.to_string()],
        scenario.system.n,
        &scenario.file.params,
    )
    .map_err(|err| ScenarioError::Expr {
        field: "cost".into(),
        err,
    })?;
    let process = simulate(&scenario.system, &scenario.x0, &scenario.controls, scenario.grid)?;
    let cells = linearize(&scenario.system, &process);
    let report = check_second_order_necessary(
        &scenario.system,
        &process,
        &cells,
        std::sync::Arc::new(cost),
        q_samples,
        opts.seed,
        &scenario.tolerances,
    )?;
    let refuted = report.refuted;
    Ok(OptimalityOutput { report, refuted })
}

/// Reachability probe wrapper used by the CLI.
pub fn probe(
    file: &ScenarioFile,
    target_shift: &DVector<f64>,
    budget: usize,
    opts: &AnalyzeOptions,
) -> Result<ProbeReport, AnalysisError> {
    let scenario = resolve(file, opts.grid_n)?;
    let process = simulate(&scenario.system, &scenario.x0, &scenario.controls, scenario.grid)?;
    Ok(probe_reachability(
        &scenario.system,
        &process,
        target_shift,
        budget,
        opts.seed,
    ))
}
