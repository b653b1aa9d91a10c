//! Scenario files: JSON descriptions of the system, the reference process,
//! the grid and tolerance overrides.
//!
//! Two flavors: `builtin` (named analytic system plus parameters) or
//! `system`/`endpoints` with expressions in the scenario language
//! (derivatives by finite differences). Top-level `params` are substituted
//! into expressions and override builtin parameters, which is what sweeps
//! rebind.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, ExprError};
use crate::system::{
    build_builtin, ControlSet, ControlSystem, ParsedDynamics, ParsedEndpoint, SystemError,
};
use crate::trajectory::Grid;
use crate::Tolerances;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("in `{field}`: {err}")]
    Expr { field: String, err: ExprError },
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("scenario error: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSetSpec {
    /// `null` entries mean unbounded below.
    pub lower: Vec<Option<f64>>,
    /// `null` entries mean unbounded above.
    pub upper: Vec<Option<f64>>,
    pub test_window: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n: usize,
    pub r: usize,
    pub dynamics: Vec<String>,
    pub control_set: ControlSetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_box: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    #[serde(default)]
    pub f: Vec<String>,
    #[serde(default)]
    pub g: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub x0: Vec<f64>,
    /// Control expressions in `t` (one per control coordinate).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<String>>,
    /// Alternatively, explicit N x r samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", alias = "N")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BuiltinSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<EndpointSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub process: Option<ProcessSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<Tolerances>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

impl ScenarioFile {
    pub fn from_str(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Rebind one parameter (sweeps); overrides both the top-level map and
    /// any builtin parameter of the same name.
    pub fn with_param(&self, name: &str, value: f64) -> ScenarioFile {
        let mut out = self.clone();
        out.params.insert(name.to_string(), value);
        if let Some(b) = out.builtin.as_mut() {
            b.params.insert(name.to_string(), value);
        }
        out
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
            || self
                .builtin
                .as_ref()
                .map(|b| b.params.contains_key(name))
                .unwrap_or(false)
    }
}

/// A fully resolved scenario: system, reference process and grid.
pub struct Scenario {
    pub file: ScenarioFile,
    pub system: ControlSystem,
    pub x0: DVector<f64>,
    pub controls: Vec<DVector<f64>>,
    pub grid: Grid,
    pub tolerances: Tolerances,
}

const DEFAULT_GRID_STEPS: usize = 200;

pub fn resolve(file: &ScenarioFile, grid_n: Option<usize>) -> Result<Scenario, ScenarioError> {
    let tolerances = file.tolerances.clone().unwrap_or_default();
    let params = file.params.clone();

    let (system, mut t0, mut t1, default_x0, default_u) = if let Some(builtin) = &file.builtin {
        let mut merged = builtin.params.clone();
        merged.append(&mut params.clone());
        let (system, reference) = build_builtin(&builtin.name, &merged)?;
        (
            system,
            reference.t0,
            reference.t1,
            Some(reference.x0),
            Some(reference.u_const),
        )
    } else {
        let spec = file
            .system
            .as_ref()
            .ok_or_else(|| ScenarioError::Shape("need either `builtin` or `system`".into()))?;
        if spec.dynamics.len() != spec.n {
            return Err(ScenarioError::Shape(format!(
                "dynamics has {} entries for n = {}",
                spec.dynamics.len(),
                spec.n
            )));
        }
        if spec.control_set.lower.len() != spec.r
            || spec.control_set.upper.len() != spec.r
            || spec.control_set.test_window.len() != spec.r
        {
            return Err(ScenarioError::Shape("control_set dimension mismatch".into()));
        }
        let dynamics =
            ParsedDynamics::new(&spec.dynamics, spec.n, spec.r, &params).map_err(|err| {
                ScenarioError::Expr {
                    field: "system.dynamics".into(),
                    err,
                }
            })?;
        let endpoints = file.endpoints.clone().unwrap_or_default();
        let f = ParsedEndpoint::new(&endpoints.f, spec.n, &params).map_err(|err| {
            ScenarioError::Expr {
                field: "endpoints.f".into(),
                err,
            }
        })?;
        let g = ParsedEndpoint::new(&endpoints.g, spec.n, &params).map_err(|err| {
            ScenarioError::Expr {
                field: "endpoints.g".into(),
                err,
            }
        })?;
        let control_set = ControlSet {
            lower: spec
                .control_set
                .lower
                .iter()
                .map(|v| v.unwrap_or(f64::NEG_INFINITY))
                .collect(),
            upper: spec
                .control_set
                .upper
                .iter()
                .map(|v| v.unwrap_or(f64::INFINITY))
                .collect(),
            test_window: spec.control_set.test_window.iter().map(|w| (w[0], w[1])).collect(),
        };
        control_set.validate().map_err(ScenarioError::Shape)?;
        let state_box = spec
            .state_box
            .clone()
            .map(|b| b.iter().map(|w| (w[0], w[1])).collect())
            .unwrap_or_else(|| vec![(-10.0, 10.0); spec.n]);
        if state_box.len() != spec.n {
            return Err(ScenarioError::Shape("state_box dimension mismatch".into()));
        }
        let system = ControlSystem {
            n: spec.n,
            r: spec.r,
            m1: endpoints.f.len(),
            m2: endpoints.g.len(),
            dynamics: Arc::new(dynamics),
            f: Arc::new(f),
            g: Arc::new(g),
            control_set,
            state_box,
        };
        (system, 0.0, 1.0, None, None)
    };

    if let Some(grid) = &file.grid {
        if let Some(v) = grid.t0 {
            t0 = v;
        }
        if let Some(v) = grid.t1 {
            t1 = v;
        }
    }
    let steps = grid_n
        .or(file.grid.as_ref().and_then(|g| g.n))
        .unwrap_or(DEFAULT_GRID_STEPS);
    if steps < 2 || !(t1 > t0) {
        return Err(ScenarioError::Shape(format!(
            "bad grid: t0 = {t0}, t1 = {t1}, n = {steps}"
        )));
    }
    let grid = Grid::new(t0, t1, steps);

    // reference process
    let x0 = match (&file.process, default_x0) {
        (Some(p), _) => {
            if p.x0.len() != system.n {
                return Err(ScenarioError::Shape("process.x0 dimension mismatch".into()));
            }
            DVector::from_row_slice(&p.x0)
        }
        (None, Some(x0)) => x0,
        (None, None) => return Err(ScenarioError::Shape("missing `process`".into())),
    };
    let controls: Vec<DVector<f64>> = match &file.process {
        Some(p) => match (&p.u, &p.samples) {
            (Some(exprs), None) => {
                if exprs.len() != system.r {
                    return Err(ScenarioError::Shape("process.u dimension mismatch".into()));
                }
                let mut vars: Vec<String> = vec!["t".to_string()];
                let mut param_values = vec![];
                for (k, v) in &params {
                    vars.push(k.clone());
                    param_values.push(*v);
                }
                let compiled: Vec<expr::Expr> = exprs
                    .iter()
                    .map(|s| expr::parse(s, &vars))
                    .collect::<Result<_, _>>()
                    .map_err(|err| ScenarioError::Expr {
                        field: "process.u".into(),
                        err,
                    })?;
                (0..steps)
                    .map(|k| {
                        let mut vals = vec![grid.time(k)];
                        vals.extend(param_values.iter().copied());
                        DVector::from_iterator(system.r, compiled.iter().map(|e| e.eval(&vals)))
                    })
                    .collect()
            }
            (None, Some(samples)) => {
                if samples.len() != steps || samples.iter().any(|s| s.len() != system.r) {
                    return Err(ScenarioError::Shape(format!(
                        "process.samples must be {} x {}",
                        steps, system.r
                    )));
                }
                samples.iter().map(|s| DVector::from_row_slice(s)).collect()
            }
            (Some(_), Some(_)) => {
                return Err(ScenarioError::Shape(
                    "give either process.u or process.samples, not both".into(),
                ))
            }
            (None, None) => match &default_u {
                Some(u) => vec![u.clone(); steps],
                None => return Err(ScenarioError::Shape("missing process.u".into())),
            },
        },
        None => {
            let u = default_u.ok_or_else(|| ScenarioError::Shape("missing `process`".into()))?;
            vec![u; steps]
        }
    };

    Ok(Scenario {
        file: file.clone(),
        system,
        x0,
        controls,
        grid,
        tolerances,
    })
}
