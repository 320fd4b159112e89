//! Run configuration loaded from TOML.
//!
//! Every key is optional; an empty document yields the default airframe,
//! limits and tunings. Unknown keys are rejected.
//!
//! ```toml
//! scenario = "agile"
//! controller = "nmpc"
//! dt = 0.02
//! seed = 7
//!
//! [vehicle]
//! mass = 0.5
//!
//! [nmpc]
//! horizon = 10
//! ```

use crate::baseline::{LqrConfig, SmcConfig};
use crate::nmpc::NmpcConfig;
use crate::sim::{ControllerKind, ControllerSettings, Reference, Scenario, ScenarioKind};
use crate::vehicle::{ActuatorLimits, DisturbanceConfig, VehicleParams, VehicleState};
use crate::{Error, Result};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Reference and initial condition of the `custom` scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CustomScenario {
    pub reference: Reference,
    /// Start position (at rest, level), m.
    pub initial_position: [f64; 3],
    pub duration: f64,
}

impl Default for CustomScenario {
    fn default() -> Self {
        Self {
            reference: Reference::Hold { position: [0.0, 0.0, -4.0], attitude: [0.0; 3] },
            initial_position: [0.0, 0.0, -4.0],
            duration: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub controller: ControllerKind,
    /// Simulation and control period, s.
    pub dt: f64,
    /// Episode length, s; the scenario's own duration when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// Disturbance phase seed; 0 keeps the configured phases.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write measured controller times to `trace.csv` (makes the file
    /// non-reproducible).
    pub record_timing: bool,
    pub vehicle: VehicleParams,
    pub limits: ActuatorLimits,
    pub nmpc: NmpcConfig,
    pub lqr: LqrConfig,
    pub smc: SmcConfig,
    /// Replaces the scenario's disturbance when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceConfig>,
    pub custom: CustomScenario,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Sluggish,
            controller: ControllerKind::Nmpc,
            dt: 0.02,
            duration: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            record_timing: false,
            vehicle: VehicleParams::default(),
            limits: ActuatorLimits::default(),
            nmpc: NmpcConfig::default(),
            lqr: LqrConfig::default(),
            smc: SmcConfig::default(),
            disturbance: None,
            custom: CustomScenario::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if let Some(d) = self.duration {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidParameter(format!("duration must be positive, got {d}")));
            }
        }
        self.vehicle.validate()?;
        self.limits.validate()?;
        self.nmpc.validate()?;
        self.lqr.validate()?;
        self.smc.validate()?;
        self.scenario().validate()
    }

    pub fn controllers(&self) -> ControllerSettings {
        ControllerSettings { nmpc: self.nmpc.clone(), lqr: self.lqr.clone(), smc: self.smc.clone() }
    }

    /// The selected scenario with the duration and disturbance overrides applied.
    pub fn scenario(&self) -> Scenario {
        let mut scenario = match self.scenario {
            ScenarioKind::Custom => Scenario {
                name: "custom".into(),
                duration: self.custom.duration,
                reference: self.custom.reference.clone(),
                disturbance: DisturbanceConfig::default(),
                initial_state: VehicleState::at_rest(Vector3::from(self.custom.initial_position)),
            },
            kind => Scenario::builtin(kind),
        };
        if let Some(d) = self.duration {
            scenario.duration = d;
        }
        if let Some(d) = self.disturbance {
            scenario.disturbance = d;
        }
        scenario
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.vehicle.mass, 0.468);
        assert_eq!(c.nmpc, NmpcConfig::default());
        assert_eq!(c.nmpc.state_weights, [0.04, 0.04, 0.04, 8.0, 8.0, 8.0, 1.0, 1.0, 4.0, 65.0, 65.0, 70.0]);
        assert_eq!(c.nmpc.input_weights, [5e-4; 6]);
        assert_eq!(c.nmpc.horizon, 5);
        assert_eq!(c.limits.rotor_speed_max, 10_000.0);
    }

    #[test]
    fn negative_mass_rejected() {
        let err = RunConfig::from_toml("[vehicle]\nmass = -1.0\n").unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(ref m) if m.contains("mass")), "{err}");
    }

    #[test]
    fn horizon_override() {
        let c = RunConfig::from_toml("[nmpc]\nhorizon = 10\n").unwrap();
        assert_eq!(c.nmpc.horizon, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        for doc in ["colour = 1\n", "[vehicle]\nmas = 1.0\n", "[nmpc]\nhorizn = 3\n", "[teleport]\n"] {
            assert!(matches!(RunConfig::from_toml(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = RunConfig::from_toml("dt = 0.01\nseed = \"x\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn invalid_enumerations_rejected() {
        assert!(RunConfig::from_toml("controller = \"pid\"\n").is_err());
        assert!(RunConfig::from_toml("scenario = \"loop\"\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig {
            scenario: ScenarioKind::Custom,
            duration: Some(3.5),
            seed: 11,
            disturbance: Some(DisturbanceConfig::enabled()),
            ..RunConfig::default()
        };
        c.lqr.input_weights = [0.1; 6];
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn custom_scenario_from_document() {
        let doc = r#"
scenario = "custom"
[custom]
initial_position = [1.0, 2.0, -3.0]
duration = 4.0
[custom.reference]
kind = "lemniscate"
amplitude_x = 2.0
amplitude_y = 0.5
period = 10.0
altitude = -3.0
"#;
        let c = RunConfig::from_toml(doc).unwrap();
        let s = c.scenario();
        assert_eq!(s.duration, 4.0);
        assert_eq!(s.initial_state.position, Vector3::new(1.0, 2.0, -3.0));
        assert!(matches!(s.reference, Reference::Lemniscate { period, .. } if period == 10.0));
    }

    #[test]
    fn overrides_apply_to_builtin_scenarios() {
        let c = RunConfig::from_toml("scenario = \"agile\"\nduration = 2.0\n[disturbance]\nenabled = false\n").unwrap();
        let s = c.scenario();
        assert_eq!(s.duration, 2.0);
        assert!(!s.disturbance.enabled);
        assert!(Scenario::agile().disturbance.enabled);
    }
}
