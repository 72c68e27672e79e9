//! JSON experiment configuration: schema, loading, and the two shipped
//! presets.
//!
//! A configuration names the hybrid system (builtin nonlinear flows or
//! time-gridded linear matrices, guards, resets), the nominal-trajectory
//! problem, and the steering boundary data. Constants the source experiments
//! leave unstated live in the preset files under a `notes` object so their
//! provenance is visible in the artifact itself.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid_model::{
    FlowSpec, GuardSpec, HybridSystemSpec, ModeSpec, ResetSpec, TransitionSpec,
};
use crate::linalg::{matrix_from_rows, Schedule};
use crate::nominal_ilqr::IlqrConfig;

/// A dense matrix literal or a scaled identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixConfig {
    ScaledIdentity { scale: f64, dim: usize },
    Dense(Vec<Vec<f64>>),
}

impl MatrixConfig {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            MatrixConfig::ScaledIdentity { scale, dim } => {
                Ok(DMatrix::identity(*dim, *dim) * *scale)
            }
            MatrixConfig::Dense(rows) => matrix_from_rows(rows),
        }
    }
}

/// A constant matrix or a uniform time grid of matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridConfig {
    Constant(Vec<Vec<f64>>),
    Grid {
        t0: f64,
        dt: f64,
        values: Vec<Vec<Vec<f64>>>,
    },
}

impl GridConfig {
    pub fn to_schedule(&self) -> Result<Schedule> {
        match self {
            GridConfig::Constant(rows) => Ok(Schedule::constant(matrix_from_rows(rows)?)),
            GridConfig::Grid { t0, dt, values } => {
                if values.is_empty() {
                    return Err(Error::Config("empty matrix grid".into()));
                }
                let mats = values
                    .iter()
                    .map(|rows| matrix_from_rows(rows))
                    .collect::<Result<Vec<_>>>()?;
                let times = (0..mats.len()).map(|i| t0 + i as f64 * dt).collect();
                Ok(Schedule::new(times, mats))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FlowConfig {
    Linear { a: GridConfig, b: GridConfig },
    BouncingBall { mass: f64, gravity: f64 },
    SlipStance { r0: f64, k: f64, m: f64, gravity: f64 },
    SlipFlight { gravity: f64 },
}

impl FlowConfig {
    fn to_flow(&self) -> Result<FlowSpec> {
        Ok(match self {
            FlowConfig::Linear { a, b } => {
                let a = a.to_schedule()?;
                let b = b.to_schedule()?;
                if a.first().nrows() != b.first().nrows() {
                    return Err(Error::Config("A and B row counts differ".into()));
                }
                FlowSpec::Linear { a, b }
            }
            FlowConfig::BouncingBall { mass, gravity } => FlowSpec::BouncingBall {
                mass: *mass,
                gravity: *gravity,
            },
            FlowConfig::SlipStance { r0, k, m, gravity } => FlowSpec::SlipStance {
                r0: *r0,
                k: *k,
                m: *m,
                gravity: *gravity,
            },
            FlowConfig::SlipFlight { gravity } => FlowSpec::SlipFlight { gravity: *gravity },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeConfig {
    pub id: usize,
    pub flow: FlowConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_cost: Option<GridConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionConfig {
    pub from: usize,
    pub to: usize,
    pub guard: GuardSpec,
    pub reset: ResetSpec,
}

fn default_max_events() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub initial_mode: usize,
    #[serde(default = "default_max_events")]
    pub max_events: usize,
    pub modes: Vec<ModeConfig>,
    #[serde(default)]
    pub transitions: Vec<TransitionConfig>,
}

impl SystemConfig {
    pub fn to_system(&self) -> Result<HybridSystemSpec> {
        if self.dt <= 0.0 || self.horizon <= 0.0 {
            return Err(Error::Config("dt and horizon must be positive".into()));
        }
        let mut modes = Vec::with_capacity(self.modes.len());
        for mc in &self.modes {
            let flow = mc.flow.to_flow()?;
            let mut mode = ModeSpec::new(mc.id, flow);
            if let Some(q) = &mc.state_cost {
                let q = q.to_schedule()?;
                if q.first().nrows() != mode.state_dim() {
                    return Err(Error::Config(format!(
                        "state cost dim mismatch in mode {}",
                        mc.id
                    )));
                }
                mode = mode.with_state_cost(q);
            }
            modes.push(mode);
        }
        let transitions = self
            .transitions
            .iter()
            .map(|tc| {
                let from_dim = modes
                    .iter()
                    .find(|m| m.mode_id == tc.from)
                    .map(|m| m.state_dim())
                    .ok_or_else(|| Error::Config(format!("unknown mode {}", tc.from)))?;
                let to_dim = modes
                    .iter()
                    .find(|m| m.mode_id == tc.to)
                    .map(|m| m.state_dim())
                    .ok_or_else(|| Error::Config(format!("unknown mode {}", tc.to)))?;
                if tc.reset.output_dim() != to_dim {
                    return Err(Error::Config(format!(
                        "reset output dim {} does not match mode {} dim {}",
                        tc.reset.output_dim(),
                        tc.to,
                        to_dim
                    )));
                }
                let _ = from_dim;
                Ok(TransitionSpec {
                    from_mode: tc.from,
                    to_mode: tc.to,
                    guard: tc.guard.clone(),
                    reset: tc.reset.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HybridSystemSpec {
            modes,
            transitions,
            dt: self.dt,
            horizon: self.horizon,
            initial_mode: self.initial_mode,
            max_events: self.max_events,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NominalConfig {
    pub x0: Vec<f64>,
    pub goal: Vec<f64>,
    pub terminal_weight: MatrixConfig,
    #[serde(default = "default_ilqr_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_control_weight")]
    pub control_weight: f64,
    #[serde(default)]
    pub running_state_weight: f64,
}

fn default_ilqr_iterations() -> usize {
    100
}

fn default_control_weight() -> f64 {
    1.0
}

impl NominalConfig {
    pub fn to_ilqr(&self) -> Result<(DVector<f64>, IlqrConfig)> {
        let goal = DVector::from_vec(self.goal.clone());
        let qt = self.terminal_weight.to_matrix()?;
        if qt.nrows() != goal.len() {
            return Err(Error::Config(
                "terminal weight dim does not match goal dim".into(),
            ));
        }
        let config = IlqrConfig {
            control_weight: self.control_weight,
            running_state_weight: self.running_state_weight,
            max_iterations: self.max_iterations,
            ..IlqrConfig::new(goal, qt)
        };
        Ok((DVector::from_vec(self.x0.clone()), config))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub sigma0: MatrixConfig,
    pub sigma_f: MatrixConfig,
    pub epsilon: f64,
}

/// A full experiment: system, nominal problem, steering boundary data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
    pub system: SystemConfig,
    pub nominal: NominalConfig,
    pub steering: SteeringConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const BOUNCING_BALL_JSON: &str = include_str!("../presets/bouncing_ball.json");
const SLIP_JSON: &str = include_str!("../presets/slip.json");

/// Shipped experiment presets by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    match name {
        "bouncing-ball" | "bouncing_ball" => ExperimentConfig::from_json(BOUNCING_BALL_JSON),
        "slip" => ExperimentConfig::from_json(SLIP_JSON),
        other => Err(Error::Config(format!(
            "unknown experiment '{other}' (available: bouncing-ball, slip)"
        ))),
    }
}

pub fn preset_names() -> &'static [&'static str] {
    &["bouncing-ball", "slip"]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bouncing_ball_preset_parses_and_builds() {
        let cfg = preset("bouncing-ball").unwrap();
        let sys = cfg.system.to_system().unwrap();
        assert_eq!(sys.modes.len(), 1);
        assert_eq!(sys.transitions.len(), 1);
        assert_eq!(sys.n_steps(), 1200);
        let (x0, ilqr) = cfg.nominal.to_ilqr().unwrap();
        assert_eq!(x0.as_slice(), &[5.0, 1.5]);
        assert_eq!(ilqr.terminal_weight[(0, 0)], 25.0);
        let sigma0 = cfg.steering.sigma0.to_matrix().unwrap();
        assert_eq!(sigma0[(0, 0)], 0.2);
        assert_eq!(cfg.steering.epsilon, 0.5);
    }

    #[test]
    fn slip_preset_parses_and_builds() {
        let cfg = preset("slip").unwrap();
        let sys = cfg.system.to_system().unwrap();
        assert_eq!(sys.modes.len(), 2);
        assert_eq!(sys.mode(0).state_dim(), 4);
        assert_eq!(sys.mode(1).state_dim(), 5);
        assert_eq!(sys.dt, 5e-5);
        assert_eq!(sys.horizon, 0.5);
        let sigma_f = cfg.steering.sigma_f.to_matrix().unwrap();
        assert_eq!(sigma_f.nrows(), 5);
        assert_eq!(sigma_f[(0, 0)], 0.0003);
        assert_eq!(cfg.steering.epsilon, 0.0015);
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        assert!(matches!(preset("nope"), Err(Error::Config(_))));
    }

    #[test]
    fn linear_grid_config_roundtrip() {
        let text = r#"{
            "dt": 0.01, "horizon": 1.0,
            "modes": [{"id": 0, "flow": {"type": "linear",
                "a": [[0.0, 1.0], [0.0, 0.0]],
                "b": {"t0": 0.0, "dt": 0.5, "values": [[[0.0], [1.0]], [[0.0], [2.0]]]}}}]
        }"#;
        let sc: SystemConfig = serde_json::from_str(text).unwrap();
        let sys = sc.to_system().unwrap();
        let mode = sys.mode(0);
        assert_eq!(mode.state_dim(), 2);
        assert_eq!(mode.input_dim(), 1);
        // gridded B interpolates linearly
        let b_mid = mode.flow.jac_u(0.25, &DVector::zeros(2));
        assert!((b_mid[(1, 0)] - 1.5).abs() < 1e-12);
    }
}
