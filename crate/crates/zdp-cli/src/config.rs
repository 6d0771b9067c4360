//! TOML experiment configuration. Every section has complete defaults, so an
//! empty file is a valid cartpole setup; unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use zdp_core::dynamics::CartpoleParams;
use zdp_core::learning::UstarTreatment;
use zdp_core::mlp::Activation;
use zdp_core::runtime::InputHold;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub system: SystemSection,
    pub construct: ConstructSection,
    pub ocp: OcpSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub simulate: SimulateSection,
    pub roa: RoaSection,
    pub baseline: BaselineSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            system: SystemSection::default(),
            construct: ConstructSection::default(),
            ocp: OcpSection::default(),
            pretrain: PretrainSection::default(),
            train: TrainSection::default(),
            simulate: SimulateSection::default(),
            roa: RoaSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Cartpole,
    DecoupledToy,
}

impl SystemKind {
    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Cartpole => "cartpole",
            SystemKind::DecoupledToy => "decoupled_toy",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub kind: SystemKind,
    pub cart_mass_kg: f64,
    pub pole_mass_kg: f64,
    pub pole_length_m: f64,
    pub gravity_m_s2: f64,
    pub damping_threshold_m_s: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        let p = CartpoleParams::default();
        Self {
            kind: SystemKind::Cartpole,
            cart_mass_kg: p.cart_mass_kg,
            pole_mass_kg: p.pole_mass_kg,
            pole_length_m: p.pole_length_m,
            gravity_m_s2: p.gravity_m_s2,
            damping_threshold_m_s: p.damping_threshold_m_s,
        }
    }
}

impl SystemSection {
    pub fn cartpole_params(&self) -> CartpoleParams {
        CartpoleParams {
            cart_mass_kg: self.cart_mass_kg,
            pole_mass_kg: self.pole_mass_kg,
            pole_length_m: self.pole_length_m,
            gravity_m_s2: self.gravity_m_s2,
            damping_threshold_m_s: self.damping_threshold_m_s,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstructSection {
    /// Requested closed-loop spectrum for the placement step.
    pub poles: Vec<f64>,
}

impl Default for ConstructSection {
    fn default() -> Self {
        Self {
            poles: vec![-1.0, -2.0, -3.0, -4.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpSection {
    pub horizon_s: f64,
    pub dt_s: f64,
    pub max_iters: usize,
    /// Q = state_weight * I.
    pub state_weight: f64,
    pub input_weight: f64,
}

impl Default for OcpSection {
    fn default() -> Self {
        Self {
            horizon_s: 3.0,
            dt_s: 0.02,
            max_iters: 20,
            state_weight: 1.0,
            input_weight: 0.01,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub tol: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            max_steps: 20_000,
            batch_size: 64,
            learning_rate: 5e-3,
            momentum: 0.9,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UstarChoice {
    Differentiated,
    Frozen,
}

impl From<UstarChoice> for UstarTreatment {
    fn from(c: UstarChoice) -> Self {
        match c {
            UstarChoice::Differentiated => UstarTreatment::Differentiated,
            UstarChoice::Frozen => UstarTreatment::Frozen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationChoice {
    Relu,
    Tanh,
}

impl From<ActivationChoice> for Activation {
    fn from(c: ActivationChoice) -> Self {
        match c {
            ActivationChoice::Relu => Activation::Relu,
            ActivationChoice::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step at which the learning rate is multiplied by `lr_drop_factor`;
    /// zero keeps the rate constant.
    pub lr_drop_step: usize,
    pub lr_drop_factor: f64,
    pub width: usize,
    pub activation: ActivationChoice,
    /// Half-width of the symmetric sampling box per zero coordinate.
    pub z_half_widths: Vec<f64>,
    pub ustar: UstarChoice,
    pub divergence_factor: f64,
    /// Cap on the batch gradient norm; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            momentum: 0.9,
            lr_drop_step: 0,
            lr_drop_factor: 0.1,
            width: 64,
            activation: ActivationChoice::Relu,
            z_half_widths: vec![1.2, 2.0],
            ustar: UstarChoice::Differentiated,
            divergence_factor: 10.0,
            grad_clip: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldChoice {
    Stage,
    Step,
}

impl From<HoldChoice> for InputHold {
    fn from(c: HoldChoice) -> Self {
        match c {
            HoldChoice::Stage => InputHold::Stage,
            HoldChoice::Step => InputHold::Step,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub dt_s: f64,
    pub t_final_s: f64,
    pub kp: f64,
    pub kd: f64,
    pub input_hold: HoldChoice,
    pub escape_norm: f64,
    /// Flat initial state in the split coordinates, eta first.
    pub initial_state: Vec<f64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            dt_s: 1e-3,
            t_final_s: 10.0,
            kp: 25.0,
            kd: 10.0,
            input_hold: HoldChoice::Stage,
            escape_norm: 1e6,
            initial_state: vec![0.05, 0.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoaSection {
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_dot_min: f64,
    pub theta_dot_max: f64,
    pub grid_theta: usize,
    pub grid_theta_dot: usize,
    pub dt_s: f64,
    pub t_final_s: f64,
    pub escape_norm: f64,
    pub early_tol: f64,
    pub settle_tol: f64,
}

impl Default for RoaSection {
    fn default() -> Self {
        Self {
            theta_min: -std::f64::consts::PI,
            theta_max: std::f64::consts::PI,
            theta_dot_min: -6.0,
            theta_dot_max: 6.0,
            grid_theta: 61,
            grid_theta_dot: 61,
            dt_s: 0.01,
            t_final_s: 10.0,
            escape_norm: 50.0,
            early_tol: 1e-4,
            settle_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Weights for the benchmark regulator in native coordinates.
    pub state_weight: f64,
    pub input_weight: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            state_weight: 1.0,
            input_weight: 0.01,
        }
    }
}

/// Read and validate a configuration file.
pub fn load_config(path: &Path) -> Result<Config, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let config: Config =
        toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?;
    validate(&config)?;
    Ok(config)
}

fn validate(config: &Config) -> Result<(), String> {
    if config.system.kind == SystemKind::Cartpole {
        config
            .system
            .cartpole_params()
            .validate()
            .map_err(|e| e.to_string())?;
    }
    if config.construct.poles.is_empty() {
        return Err("construct.poles must not be empty".into());
    }
    for (name, v) in [
        ("ocp.horizon_s", config.ocp.horizon_s),
        ("ocp.dt_s", config.ocp.dt_s),
        ("ocp.state_weight", config.ocp.state_weight),
        ("ocp.input_weight", config.ocp.input_weight),
        ("simulate.dt_s", config.simulate.dt_s),
        ("simulate.t_final_s", config.simulate.t_final_s),
        ("simulate.kp", config.simulate.kp),
        ("simulate.kd", config.simulate.kd),
        ("roa.dt_s", config.roa.dt_s),
        ("roa.t_final_s", config.roa.t_final_s),
        ("baseline.state_weight", config.baseline.state_weight),
        ("baseline.input_weight", config.baseline.input_weight),
    ] {
        if !(v > 0.0) {
            return Err(format!("{name} must be positive, got {v}"));
        }
    }
    if config.train.z_half_widths.iter().any(|w| !(*w > 0.0)) {
        return Err("train.z_half_widths must be positive".into());
    }
    if config.roa.grid_theta < 2 || config.roa.grid_theta_dot < 2 {
        return Err("roa grid needs at least two points per axis".into());
    }
    Ok(())
}
