//! Deterministic desk-scale simulator for cooperative secondary control of
//! inverter-based AC microgrids, including attack-resilient adaptive defense
//! of the frequency and voltage loops against growing injections on the
//! control input channels.
//!
//! Module map:
//! - [`topology`]: communication digraph, containment matrices, reachability
//! - [`plant`]: droop relations and the reduced lossless coupling network
//! - [`controller`]: conventional and resilient secondary protocols
//! - [`attacks`]: injection signals and derivative-bound certification
//! - [`scenario`]: declarative configuration, presets, overrides
//! - [`engine`]: fixed-step integration, events, divergence detection
//! - [`analysis`]: containment errors, energy monitor, ultimate bounds
//! - [`report`]: CSV/summary artifact emission

pub mod analysis;
pub mod attacks;
pub mod controller;
pub mod engine;
pub mod plant;
pub mod report;
pub mod scenario;
pub mod topology;

pub use analysis::{ultimate_bound, SignalSelector, UltimateBoundEstimate};
pub use attacks::{certify_assumption2, AttackShape, AttackSignal, Channel, DerivativeBound};
pub use controller::{ControlMode, ControllerParams, ControllerState, LeaderSignal};
pub use engine::{run, Divergence, Rk4, Sample, SimTrace};
pub use plant::{ElectricalNetwork, InverterParams, PlantOutputs};
pub use scenario::{apply_overrides, preset, single_preset, ScenarioConfig, ScenarioError};
pub use topology::{CommGraph, GraphMatrices, TopologyError};
