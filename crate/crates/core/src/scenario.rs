//! Declarative scenario description: the TOML-facing configuration schema,
//! the bundled case presets, and dotted-path overrides.
//!
//! File conventions: frequencies appear in Hz, inverter and bus indices are
//! 1-based, matrices are row-major flat lists. Everything is converted to
//! internal units (rad/s, 0-based indices) by the `build_*` accessors.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::attacks::{AttackShape, AttackSignal, Channel};
use crate::controller::{ControlMode, ControllerParams, LeaderSignal};
use crate::plant::{ElectricalNetwork, InverterParams, PiecewiseConstant};
use crate::topology::CommGraph;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("override path `{0}` does not exist in the scenario")]
    UnknownPath(String),
    #[error("override value `{value}` is not valid for `{path}`: {reason}")]
    BadOverride {
        path: String,
        value: String,
        reason: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub graph: GraphSection,
    pub network: NetworkSection,
    pub inverters: InverterSection,
    pub controller: ControllerSection,
    pub leaders: LeaderSection,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub events: Vec<EventEntry>,
    #[serde(default)]
    pub initial: InitialSection,
    pub solver: SolverSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub n: usize,
    /// Row-major N×N adjacency; entry (i, j) is the weight from j into i.
    pub adjacency: Vec<f64>,
    /// Pinning gains from the upper-voltage-reference leader.
    pub pin_upper: Vec<f64>,
    /// Pinning gains from the lower-voltage-reference leader.
    pub pin_lower: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Row-major N×N active coupling (W per rad of angle difference).
    pub b_active: Vec<f64>,
    /// Row-major N×N reactive coupling (var per V).
    pub b_reactive: Vec<f64>,
    /// Per-inverter active load schedule, `[[time, watts], …]`.
    pub load_p: Vec<Vec<(f64, f64)>>,
    /// Per-inverter reactive load schedule, `[[time, vars], …]`.
    pub load_q: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterSection {
    pub m_p: Vec<f64>,
    pub n_q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub mode: ControlMode,
    pub c_f: Vec<f64>,
    pub c_v: Vec<f64>,
    pub beta_f: Vec<f64>,
    pub beta_v: Vec<f64>,
    pub alpha_f: Vec<f64>,
    pub alpha_v: Vec<f64>,
    pub gamma: usize,
    pub chi_f0: Vec<f64>,
    pub chi_v0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderSection {
    pub frequency_hz: f64,
    pub v_upper: f64,
    pub v_lower: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEntry {
    /// 1-based inverter index.
    pub inverter: usize,
    pub channel: Channel,
    pub start_time: f64,
    pub shape: AttackShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEntry {
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    /// Adds an extra load at a bus (1-based) until removed by id.
    LoadStep {
        id: String,
        bus: usize,
        delta_p: f64,
        delta_q: f64,
    },
    LoadRemove { id: String },
    /// Disables the bidirectional communication link {i, j} (1-based).
    LinkDown { i: usize, j: usize },
    /// Restores the link {i, j} to its original weights.
    LinkUp { i: usize, j: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    /// Start from the attack-free secondary-control equilibrium, computed
    /// from the loads at t = 0. Mutually exclusive with the explicit fields.
    #[serde(default)]
    pub steady_state: bool,
    /// Initial setpoints in Hz; defaults to the leader frequency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_n_hz: Option<Vec<f64>>,
    /// Initial voltage setpoints; defaults to the leader midpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_n: Option<Vec<f64>>,
    /// Initial angles; defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub divergence: DivergenceSection,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            t_end: default_t_end(),
            record_every: default_record_every(),
            divergence: DivergenceSection::default(),
        }
    }
}

fn default_dt() -> f64 {
    1e-3
}
fn default_t_end() -> f64 {
    30.0
}
fn default_record_every() -> usize {
    10
}

/// Trip thresholds for the divergence detector, set at realistic protection
/// levels so a runaway trajectory is flagged within the simulated horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceSection {
    pub max_frequency_deviation_hz: f64,
    pub v_od_min: f64,
    pub v_od_max: f64,
}

impl Default for DivergenceSection {
    fn default() -> Self {
        Self {
            max_frequency_deviation_hz: 2.0,
            v_od_min: 238.0,
            v_od_max: 442.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Builders and validation
// ---------------------------------------------------------------------------

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ScenarioError> {
        toml::to_string_pretty(self).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.graph.n
    }

    pub fn comm_graph(&self) -> Result<CommGraph, ScenarioError> {
        let n = self.graph.n;
        if self.graph.adjacency.len() != n * n {
            return Err(ScenarioError::Invalid(format!(
                "adjacency must have {} entries, got {}",
                n * n,
                self.graph.adjacency.len()
            )));
        }
        CommGraph::new(
            nalgebra::DMatrix::from_row_slice(n, n, &self.graph.adjacency),
            nalgebra::DVector::from_row_slice(&self.graph.pin_upper),
            nalgebra::DVector::from_row_slice(&self.graph.pin_lower),
        )
        .map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn electrical_network(&self) -> Result<ElectricalNetwork, ScenarioError> {
        let n = self.graph.n;
        let invalid = |what: &str| ScenarioError::Invalid(format!("network.{what}"));
        if self.network.b_active.len() != n * n || self.network.b_reactive.len() != n * n {
            return Err(invalid("coupling matrices must be N×N row-major"));
        }
        let schedules = |raw: &Vec<Vec<(f64, f64)>>, what: &str| {
            if raw.len() != n {
                return Err(invalid(&format!("{what} must have one schedule per inverter")));
            }
            raw.iter()
                .enumerate()
                .map(|(i, pts)| {
                    PiecewiseConstant::new(pts.clone())
                        .ok_or_else(|| invalid(&format!("{what}[{i}] must be nonempty and sorted")))
                })
                .collect::<Result<Vec<_>, _>>()
        };
        ElectricalNetwork::new(
            nalgebra::DMatrix::from_row_slice(n, n, &self.network.b_active),
            nalgebra::DMatrix::from_row_slice(n, n, &self.network.b_reactive),
            schedules(&self.network.load_p, "load_p")?,
            schedules(&self.network.load_q, "load_q")?,
        )
        .map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn inverter_params(&self) -> Result<Vec<InverterParams>, ScenarioError> {
        let n = self.graph.n;
        if self.inverters.m_p.len() != n || self.inverters.n_q.len() != n {
            return Err(ScenarioError::Invalid(
                "inverters.m_p and inverters.n_q must have one entry per inverter".into(),
            ));
        }
        (0..n)
            .map(|i| {
                let mut p = InverterParams::new(self.inverters.m_p[i], self.inverters.n_q[i])
                    .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
                if let Some(ratings) = &self.inverters.rating {
                    p.rating = ratings.get(i).cloned();
                }
                Ok(p)
            })
            .collect()
    }

    pub fn controller_params(&self) -> ControllerParams {
        let c = &self.controller;
        ControllerParams {
            mode: c.mode,
            c_f: c.c_f.clone(),
            c_v: c.c_v.clone(),
            beta_f: c.beta_f.clone(),
            beta_v: c.beta_v.clone(),
            alpha_f: c.alpha_f.clone(),
            alpha_v: c.alpha_v.clone(),
            gamma: c.gamma,
            chi_f0: c.chi_f0.clone(),
            chi_v0: c.chi_v0.clone(),
        }
    }

    pub fn leader_signal(&self) -> LeaderSignal {
        LeaderSignal {
            omega_ref: TWO_PI * self.leaders.frequency_hz,
            v_upper: self.leaders.v_upper,
            v_lower: self.leaders.v_lower,
        }
    }

    /// Attack signals with 0-based inverter indices. Frequency-channel shapes
    /// act on the rad/s setpoint-rate channel as written.
    pub fn attack_signals(&self) -> Vec<AttackSignal> {
        self.attacks
            .iter()
            .map(|a| AttackSignal {
                inverter: a.inverter - 1,
                channel: a.channel,
                start_time: a.start_time,
                shape: a.shape.clone(),
            })
            .collect()
    }

    /// Initial `(omega_n, v_n, delta)` in internal units.
    pub fn initial_state(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.graph.n;
        let omega_n = match &self.initial.omega_n_hz {
            Some(v) => v.iter().map(|hz| TWO_PI * hz).collect(),
            None => vec![TWO_PI * self.leaders.frequency_hz; n],
        };
        let v_n = match &self.initial.v_n {
            Some(v) => v.clone(),
            None => vec![0.5 * (self.leaders.v_upper + self.leaders.v_lower); n],
        };
        let delta = match &self.initial.delta {
            Some(v) => v.clone(),
            None => vec![0.0; n],
        };
        (omega_n, v_n, delta)
    }

    /// Events sorted by time (stable for equal times).
    pub fn sorted_events(&self) -> Vec<EventEntry> {
        let mut events = self.events.clone();
        events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap_or(std::cmp::Ordering::Equal));
        events
    }

    /// Communication topologies in force over the run: the initial graph at
    /// t = 0 plus one entry per link event, in event order.
    pub fn topology_timeline(&self) -> Result<Vec<(f64, CommGraph)>, ScenarioError> {
        let n = self.graph.n;
        let base = self.comm_graph()?;
        let mut timeline = vec![(0.0, base.clone())];
        let mut adjacency = base.adjacency().clone();
        for ev in self.sorted_events() {
            match ev.kind {
                EventKind::LinkDown { i, j } => {
                    adjacency[(i - 1, j - 1)] = 0.0;
                    adjacency[(j - 1, i - 1)] = 0.0;
                }
                EventKind::LinkUp { i, j } => {
                    adjacency[(i - 1, j - 1)] = self.graph.adjacency[(i - 1) * n + (j - 1)];
                    adjacency[(j - 1, i - 1)] = self.graph.adjacency[(j - 1) * n + (i - 1)];
                }
                _ => continue,
            }
            let graph = CommGraph::new(
                adjacency.clone(),
                base.pin_upper().clone(),
                base.pin_lower().clone(),
            )
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            timeline.push((ev.time, graph));
        }
        Ok(timeline)
    }

    /// Structural validation of every section.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let n = self.graph.n;
        if n == 0 {
            return Err(ScenarioError::Invalid("graph.n must be positive".into()));
        }
        self.comm_graph()?;
        self.electrical_network()?;
        let params = self.inverter_params()?;
        self.controller_params()
            .validate(n)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.leader_signal()
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let _ = params;

        for (k, a) in self.attacks.iter().enumerate() {
            if a.inverter == 0 || a.inverter > n {
                return Err(ScenarioError::Invalid(format!(
                    "attacks[{k}].inverter must be in 1..={n}"
                )));
            }
            if a.start_time < 0.0 || !a.start_time.is_finite() {
                return Err(ScenarioError::Invalid(format!(
                    "attacks[{k}].start_time must be finite and nonnegative"
                )));
            }
        }

        let mut active_loads: Vec<String> = Vec::new();
        for (k, ev) in self.sorted_events().iter().enumerate() {
            if ev.time < 0.0 || !ev.time.is_finite() {
                return Err(ScenarioError::Invalid(format!("events[{k}].time invalid")));
            }
            match &ev.kind {
                EventKind::LoadStep { id, bus, .. } => {
                    if *bus == 0 || *bus > n {
                        return Err(ScenarioError::Invalid(format!(
                            "events[{k}]: bus must be in 1..={n}"
                        )));
                    }
                    if active_loads.contains(id) {
                        return Err(ScenarioError::Invalid(format!(
                            "events[{k}]: load id `{id}` is already active"
                        )));
                    }
                    active_loads.push(id.clone());
                }
                EventKind::LoadRemove { id } => {
                    let Some(pos) = active_loads.iter().position(|x| x == id) else {
                        return Err(ScenarioError::Invalid(format!(
                            "events[{k}]: load id `{id}` is not active"
                        )));
                    };
                    active_loads.remove(pos);
                }
                EventKind::LinkDown { i, j } | EventKind::LinkUp { i, j } => {
                    if *i == 0 || *i > n || *j == 0 || *j > n || i == j {
                        return Err(ScenarioError::Invalid(format!(
                            "events[{k}]: link endpoints must be distinct and in 1..={n}"
                        )));
                    }
                    let (bi, bj) = (i - 1, j - 1);
                    let base = &self.graph.adjacency;
                    if base[bi * n + bj] == 0.0 && base[bj * n + bi] == 0.0 {
                        return Err(ScenarioError::Invalid(format!(
                            "events[{k}]: link {i}<->{j} does not exist in the base graph"
                        )));
                    }
                }
            }
        }

        let s = &self.solver;
        if !(s.dt > 0.0) || !(s.t_end > 0.0) || s.record_every == 0 {
            return Err(ScenarioError::Invalid(
                "solver.dt, solver.t_end must be positive and record_every nonzero".into(),
            ));
        }
        let d = &s.divergence;
        if !(d.max_frequency_deviation_hz > 0.0) || !(d.v_od_min < d.v_od_max) {
            return Err(ScenarioError::Invalid("solver.divergence thresholds invalid".into()));
        }

        for (name, field) in [
            ("omega_n_hz", &self.initial.omega_n_hz),
            ("v_n", &self.initial.v_n),
            ("delta", &self.initial.delta),
        ] {
            if let Some(v) = field {
                if self.initial.steady_state {
                    return Err(ScenarioError::Invalid(format!(
                        "initial.steady_state excludes explicit initial.{name}"
                    )));
                }
                if v.len() != n {
                    return Err(ScenarioError::Invalid(format!(
                        "initial.{name} must have {n} entries"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

pub const PRESET_NAMES: &[&str] = &[
    "case1_conventional",
    "case1_resilient",
    "case2",
    "case3",
    "beta_sweep",
];

/// Adaptation gains swept in the comparison study.
pub const BETA_SWEEP_VALUES: [f64; 3] = [3.5, 35.0, 350.0];

// The resilient runs integrate an increasingly stiff boundary layer: the
// adaptive gain grows for as long as any disagreement persists, and the
// explicit scheme is only stable while gain * coupling * dt stays inside its
// stability region. The adaptive gain reaches ~3.3e4 by t = 30 s on the
// bundled cases, which caps the stable step near 7e-7; 4e-7 keeps a ~1.7x
// margin (verified against 3e-7 and 2e-7 runs).
const CONVENTIONAL_DT: f64 = 1e-3;
const RESILIENT_DT: f64 = 4e-7;

/// Recording cadence of one sample per 10 ms of simulated time.
fn record_every_for(dt: f64) -> usize {
    ((0.01 / dt).round() as usize).max(1)
}

fn line_coupling(n: usize, b: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n - 1 {
        m[i * n + (i + 1)] = b;
        m[(i + 1) * n + i] = b;
    }
    m
}

fn base_case(mode: ControlMode, dt: f64) -> ScenarioConfig {
    let n = 4;
    ScenarioConfig {
        name: String::new(),
        graph: GraphSection {
            n,
            adjacency: vec![
                0.0, 1.0, 0.0, 1.0, //
                1.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 1.0, //
                1.0, 0.0, 1.0, 0.0,
            ],
            pin_upper: vec![1.0, 0.0, 0.0, 0.0],
            pin_lower: vec![0.0, 0.0, 1.0, 0.0],
        },
        network: NetworkSection {
            b_active: line_coupling(n, 40_000.0),
            b_reactive: line_coupling(n, 50.0),
            load_p: vec![vec![(0.0, 6000.0)]; n],
            load_q: vec![vec![(0.0, 1000.0)]; n],
        },
        inverters: InverterSection {
            m_p: vec![9.4e-5, 9.4e-5, 18.8e-5, 18.8e-5],
            n_q: vec![1.3e-3, 1.3e-3, 2.6e-3, 2.6e-3],
            rating: None,
        },
        controller: ControllerSection {
            mode,
            c_f: vec![20.0; n],
            c_v: vec![10.0; n],
            beta_f: vec![350.0; n],
            beta_v: vec![20.0; n],
            alpha_f: vec![0.01; n],
            alpha_v: vec![0.01; n],
            gamma: 3,
            chi_f0: vec![0.01; n],
            chi_v0: vec![0.01; n],
        },
        leaders: LeaderSection {
            frequency_hz: 60.0,
            v_upper: 350.0,
            v_lower: 330.0,
        },
        attacks: standard_attacks(),
        events: Vec::new(),
        initial: InitialSection {
            steady_state: true,
            ..InitialSection::default()
        },
        solver: SolverSection {
            dt,
            t_end: 30.0,
            record_every: record_every_for(dt),
            divergence: DivergenceSection::default(),
        },
    }
}

/// The quadratic injections of the resilience study, switched on at t = 5 s.
fn standard_attacks() -> Vec<AttackEntry> {
    let quad = |c: f64| AttackShape::Polynomial {
        coefficients: vec![0.0, 0.0, c],
    };
    let mut attacks = Vec::new();
    for (i, c) in [(1, 0.5), (2, 0.4), (3, 0.5), (4, 0.3)] {
        attacks.push(AttackEntry {
            inverter: i,
            channel: Channel::Frequency,
            start_time: 5.0,
            shape: quad(c),
        });
    }
    for (i, c) in [(1, 0.5), (2, 1.0), (3, 0.3), (4, 0.4)] {
        attacks.push(AttackEntry {
            inverter: i,
            channel: Channel::Voltage,
            start_time: 5.0,
            shape: quad(c),
        });
    }
    attacks
}

/// Returns the scenario(s) of a named preset: a single configuration for the
/// case studies, three variants differing only in `beta_f` for `beta_sweep`.
pub fn preset(name: &str) -> Result<Vec<ScenarioConfig>, ScenarioError> {
    match name {
        "case1_conventional" => {
            let mut cfg = base_case(ControlMode::Conventional, CONVENTIONAL_DT);
            cfg.name = "case1_conventional".into();
            Ok(vec![cfg])
        }
        "case1_resilient" => {
            let mut cfg = base_case(ControlMode::Resilient, RESILIENT_DT);
            cfg.name = "case1_resilient".into();
            Ok(vec![cfg])
        }
        "case2" => {
            let mut cfg = base_case(ControlMode::Resilient, RESILIENT_DT);
            cfg.name = "case2".into();
            // An extra resistive load v_nom^2 / R_L at inverter 1's bus.
            let v_nom = 340.0;
            let r_l = 15.0;
            cfg.events = vec![
                EventEntry {
                    time: 13.0,
                    kind: EventKind::LoadStep {
                        id: "aux_resistive".into(),
                        bus: 1,
                        delta_p: v_nom * v_nom / r_l,
                        delta_q: 0.0,
                    },
                },
                EventEntry {
                    time: 20.0,
                    kind: EventKind::LoadRemove {
                        id: "aux_resistive".into(),
                    },
                },
            ];
            Ok(vec![cfg])
        }
        "case3" => {
            let mut cfg = base_case(ControlMode::Resilient, RESILIENT_DT);
            cfg.name = "case3".into();
            cfg.events = vec![
                EventEntry {
                    time: 12.0,
                    kind: EventKind::LinkDown { i: 1, j: 2 },
                },
                EventEntry {
                    time: 18.0,
                    kind: EventKind::LinkUp { i: 1, j: 2 },
                },
            ];
            Ok(vec![cfg])
        }
        "beta_sweep" => Ok(BETA_SWEEP_VALUES
            .iter()
            .map(|&beta| {
                let mut cfg = base_case(ControlMode::Resilient, RESILIENT_DT);
                cfg.controller.beta_f = vec![beta; 4];
                cfg.name = format!("case1_resilient_beta_f_{beta}");
                cfg
            })
            .collect()),
        other => Err(ScenarioError::UnknownPreset(other.to_string())),
    }
}

/// Convenience for presets that define exactly one scenario.
pub fn single_preset(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let mut list = preset(name)?;
    if list.len() != 1 {
        return Err(ScenarioError::Invalid(format!(
            "preset `{name}` defines {} scenarios; use the sweep interface",
            list.len()
        )));
    }
    Ok(list.pop().unwrap())
}

// ---------------------------------------------------------------------------
// Overrides
// ---------------------------------------------------------------------------

/// Applies `key=value` overrides addressed by dotted paths
/// (`controller.beta_f`, `solver.dt`, `attacks.0.start_time`, …).
///
/// A scalar assigned to a numeric array broadcasts to every entry; a
/// comma-separated list replaces the array elementwise. Paths must already
/// exist in the configuration.
pub fn apply_overrides(
    cfg: &ScenarioConfig,
    sets: &[(String, String)],
) -> Result<ScenarioConfig, ScenarioError> {
    if sets.is_empty() {
        return Ok(cfg.clone());
    }
    let mut root =
        toml::Value::try_from(cfg).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    for (path, value) in sets {
        set_path(&mut root, path, value)?;
    }
    let updated: ScenarioConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
    updated.validate()?;
    Ok(updated)
}

fn parse_scalar(raw: &str) -> toml::Value {
    let trimmed = raw.trim();
    if trimmed == "true" || trimmed == "false" {
        return toml::Value::Boolean(trimmed == "true");
    }
    if let Ok(i) = trimmed.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = trimmed.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(trimmed.to_string())
}

fn as_float(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), ScenarioError> {
    let segments: Vec<&str> = path.split('.').collect();
    let mut current = root;
    for (depth, seg) in segments.iter().enumerate() {
        let last = depth == segments.len() - 1;
        let missing = || ScenarioError::UnknownPath(path.to_string());
        if last {
            let slot: &mut toml::Value = match current {
                toml::Value::Table(t) => t.get_mut(*seg).ok_or_else(missing)?,
                toml::Value::Array(a) => {
                    let idx: usize = seg.parse().map_err(|_| missing())?;
                    a.get_mut(idx).ok_or_else(missing)?
                }
                _ => return Err(missing()),
            };
            let bad = |reason: &str| ScenarioError::BadOverride {
                path: path.to_string(),
                value: raw.to_string(),
                reason: reason.to_string(),
            };
            *slot = match slot {
                toml::Value::Array(existing) => {
                    let parts: Vec<toml::Value> = if raw.contains(',') {
                        raw.split(',').map(parse_scalar).collect()
                    } else {
                        vec![parse_scalar(raw)]
                    };
                    if parts.len() == 1 && existing.iter().all(|e| as_float(e).is_some()) {
                        // one scalar broadcast over a numeric array
                        let v = as_float(&parts[0])
                            .ok_or_else(|| bad("expected a numeric value"))?;
                        toml::Value::Array(vec![toml::Value::Float(v); existing.len()])
                    } else if parts.len() == existing.len() {
                        toml::Value::Array(
                            parts
                                .into_iter()
                                .map(|p| match (as_float(&p), existing.first().and_then(as_float)) {
                                    (Some(f), Some(_)) => toml::Value::Float(f),
                                    _ => p,
                                })
                                .collect(),
                        )
                    } else {
                        return Err(bad(&format!(
                            "expected 1 or {} comma-separated values",
                            existing.len()
                        )));
                    }
                }
                toml::Value::Float(_) => {
                    toml::Value::Float(as_float(&parse_scalar(raw)).ok_or_else(|| bad("expected a number"))?)
                }
                toml::Value::Integer(_) => match parse_scalar(raw) {
                    toml::Value::Integer(i) => toml::Value::Integer(i),
                    _ => return Err(bad("expected an integer")),
                },
                toml::Value::Boolean(_) => match parse_scalar(raw) {
                    toml::Value::Boolean(b) => toml::Value::Boolean(b),
                    _ => return Err(bad("expected true or false")),
                },
                toml::Value::String(_) => toml::Value::String(raw.trim().to_string()),
                _ => return Err(bad("path does not address a settable value")),
            };
            return Ok(());
        }
        current = match current {
            toml::Value::Table(t) => t.get_mut(*seg).ok_or_else(missing)?,
            toml::Value::Array(a) => {
                let idx: usize = seg.parse().map_err(|_| missing())?;
                a.get_mut(idx).ok_or_else(missing)?
            }
            _ => return Err(missing()),
        };
    }
    Err(ScenarioError::UnknownPath(path.to_string()))
}
