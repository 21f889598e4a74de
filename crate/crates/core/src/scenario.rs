//! Experiment descriptions: which buildings participate, the feeder band
//! and price, the nominal voltage profile over absolute time, and the
//! closed-loop run length.
//!
//! A scenario is plain data, loadable from TOML:
//!
//! ```toml
//! name = "surge-demo"
//! horizon = 14
//! steps = 20
//!
//! [[building]]
//! kind = "middle"
//! seed = 7
//!
//! [surge]
//! start = 16
//! len = 4
//! amplitude = 0.06
//! ```
//!
//! [`Fleet::new`] turns it into concrete building models and pregenerated
//! disturbance sequences; [`Fleet::problems`] then assembles the coordination
//! problems for any sampling instant. The prediction window at time `t`
//! covers absolute steps `t..t+N`, so its first entry is the instant whose
//! input the controller applies.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{read_disturbance_csv, synth_building, BuildingKind, BuildingModel, ModelError};
use crate::problem::{build_local, CouplingData, LocalProblem, ProblemError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("could not read scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("could not parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario lists no buildings")]
    EmptyFleet,
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("voltage band is empty: v_min {v_min} >= v_max {v_max}")]
    EmptyBand { v_min: f64, v_max: f64 },
    #[error("share penalty must be positive, got {0}")]
    BadPenalty(f64),
    #[error("solver tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("surge length must be at least 1")]
    EmptySurge,
    #[error("disturbance file covers {got} steps but the run needs {needed}")]
    ShortDisturbance { got: usize, needed: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// One participating building: its size class, its generator seed and an
/// optional disturbance file overriding the generated sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildingSpec {
    pub kind: BuildingKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance_csv: Option<String>,
}

/// Raised-cosine bump added to the nominal voltage over absolute steps
/// `start..start+len`, zero at both fences.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surge {
    pub start: usize,
    pub len: usize,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(rename = "building")]
    pub buildings: Vec<BuildingSpec>,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    /// Sampling period in hours; informational, the dynamics are discrete.
    #[serde(default = "defaults::sample_hours")]
    pub sample_hours: f64,
    /// Share penalty weight.
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    /// Online solver accuracy.
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::v_min")]
    pub v_min: f64,
    #[serde(default = "defaults::v_max")]
    pub v_max: f64,
    /// Energy price applied uniformly over the horizon.
    #[serde(default = "defaults::price")]
    pub price: f64,
    /// Nominal uncontrolled voltage away from any surge.
    #[serde(default = "defaults::v_base")]
    pub v_base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surge: Option<Surge>,
    /// Closed-loop run length in sampling steps.
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    /// Standard deviation of the generated state disturbances.
    #[serde(default)]
    pub disturbance_scale: f64,
    /// Seed for the disturbance generator.
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Realized disturbances are the predicted ones times this factor.
    #[serde(default = "defaults::mismatch")]
    pub mismatch: f64,
}

mod defaults {
    pub fn horizon() -> usize {
        14
    }
    pub fn sample_hours() -> f64 {
        0.5
    }
    pub fn mu() -> f64 {
        0.1
    }
    pub fn epsilon() -> f64 {
        1e-4
    }
    pub fn v_min() -> f64 {
        0.95
    }
    pub fn v_max() -> f64 {
        1.05
    }
    pub fn price() -> f64 {
        1.0
    }
    pub fn v_base() -> f64 {
        1.0
    }
    pub fn steps() -> usize {
        20
    }
    pub fn seed() -> u64 {
        42
    }
    pub fn mismatch() -> f64 {
        1.0
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path<P: AsRef<Path>>(path: P) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.buildings.is_empty() {
            return Err(ScenarioError::EmptyFleet);
        }
        if self.horizon == 0 {
            return Err(ScenarioError::EmptyHorizon);
        }
        if self.v_min >= self.v_max {
            return Err(ScenarioError::EmptyBand {
                v_min: self.v_min,
                v_max: self.v_max,
            });
        }
        if !(self.mu > 0.0) {
            return Err(ScenarioError::BadPenalty(self.mu));
        }
        if !(self.epsilon > 0.0) {
            return Err(ScenarioError::BadTolerance(self.epsilon));
        }
        if let Some(surge) = &self.surge {
            if surge.len == 0 {
                return Err(ScenarioError::EmptySurge);
            }
        }
        Ok(())
    }

    /// Nominal uncontrolled voltage at an absolute step.
    pub fn nominal_voltage(&self, t: usize) -> f64 {
        let mut v = self.v_base;
        if let Some(surge) = &self.surge {
            if t >= surge.start && t < surge.start + surge.len {
                let phase = (t - surge.start + 1) as f64 / (surge.len + 1) as f64;
                v += surge.amplitude * (std::f64::consts::PI * phase).sin().powi(2);
            }
        }
        v
    }

    /// Nominal voltages over the prediction window starting at `t`.
    pub fn voltage_window(&self, t: usize) -> DVector<f64> {
        DVector::from_fn(self.horizon, |k, _| self.nominal_voltage(t + k))
    }

    /// The 12-building benchmark mix: 2 large, 7 middle and 3 small
    /// buildings on the default band and price.
    pub fn paper_mix(seed: u64) -> Scenario {
        let mut buildings = Vec::new();
        for i in 0..2 {
            buildings.push(BuildingSpec {
                kind: BuildingKind::Large,
                seed: seed.wrapping_add(i),
                disturbance_csv: None,
            });
        }
        for i in 0..7 {
            buildings.push(BuildingSpec {
                kind: BuildingKind::Middle,
                seed: seed.wrapping_add(10 + i),
                disturbance_csv: None,
            });
        }
        for i in 0..3 {
            buildings.push(BuildingSpec {
                kind: BuildingKind::Small,
                seed: seed.wrapping_add(20 + i),
                disturbance_csv: None,
            });
        }
        Scenario {
            name: "paper-mix".to_string(),
            buildings,
            horizon: defaults::horizon(),
            sample_hours: defaults::sample_hours(),
            mu: defaults::mu(),
            epsilon: defaults::epsilon(),
            v_min: defaults::v_min(),
            v_max: defaults::v_max(),
            price: defaults::price(),
            v_base: defaults::v_base(),
            surge: None,
            steps: defaults::steps(),
            disturbance_scale: 0.0,
            seed,
            mismatch: defaults::mismatch(),
        }
    }
}

/// A scenario compiled into concrete models and disturbance sequences.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub scenario: Scenario,
    pub models: Vec<BuildingModel>,
    /// Predicted disturbance per building and absolute step; covers the
    /// whole run plus one full window.
    disturbances: Vec<Vec<DVector<f64>>>,
}

impl Fleet {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let models: Vec<BuildingModel> = scenario
            .buildings
            .iter()
            .map(|spec| synth_building(spec.kind, spec.seed))
            .collect();
        let needed = scenario.steps + scenario.horizon;
        let mut disturbances = Vec::with_capacity(models.len());
        for (i, (spec, model)) in scenario.buildings.iter().zip(&models).enumerate() {
            let w = match &spec.disturbance_csv {
                Some(path) => {
                    let rows = read_disturbance_csv(path, model.n_x())?;
                    if rows.len() < needed {
                        return Err(ScenarioError::ShortDisturbance {
                            got: rows.len(),
                            needed,
                        });
                    }
                    rows
                }
                None => {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(scenario.seed.wrapping_add(1000 + i as u64));
                    (0..needed)
                        .map(|_| {
                            DVector::from_fn(model.n_x(), |_, _| {
                                let z: f64 = rng.sample(rand_distr::StandardNormal);
                                z * scenario.disturbance_scale
                            })
                        })
                        .collect()
                }
            };
            disturbances.push(w);
        }
        Ok(Fleet {
            scenario,
            models,
            disturbances,
        })
    }

    pub fn fleet_size(&self) -> usize {
        self.models.len()
    }

    /// All-zero initial states.
    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        self.models.iter().map(|m| DVector::zeros(m.n_x())).collect()
    }

    /// Predicted disturbances for building `i`'s window starting at `t`.
    pub fn disturbance_window(&self, i: usize, t: usize) -> &[DVector<f64>] {
        &self.disturbances[i][t..t + self.scenario.horizon]
    }

    /// Coupling data for the window starting at `t`.
    pub fn coupling(&self, t: usize) -> Result<CouplingData, ProblemError> {
        let n = self.scenario.horizon;
        CouplingData::from_models(
            &self.models,
            self.scenario.voltage_window(t),
            self.scenario.v_min,
            self.scenario.v_max,
            DVector::from_element(n, self.scenario.price),
        )
    }

    /// Per-building coordination problems for the window starting at `t`
    /// with the given current states.
    pub fn problems(
        &self,
        t: usize,
        x: &[DVector<f64>],
    ) -> Result<Vec<LocalProblem>, ScenarioError> {
        let coupling = self.coupling(t)?;
        self.models
            .iter()
            .enumerate()
            .map(|(i, model)| {
                build_local(
                    model,
                    &x[i],
                    self.disturbance_window(i, t),
                    &coupling,
                    i,
                    self.scenario.mu,
                )
                .map_err(ScenarioError::from)
            })
            .collect()
    }
}
