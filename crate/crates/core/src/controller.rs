//! Secondary control layer: conventional cooperative setpoint regulation and
//! the attack-resilient variant with adaptive compensation.
//!
//! Every input is assembled from neighborhood-relative information only: a
//! node sees its own state, the states its in-neighbors transmit, and the
//! references of the leaders pinning it. The resilient variant adds a
//! compensation term `ζχ/(|ζ| + η)` whose gain `χ` is the γ-fold integral of
//! `β|ζ|`, so it keeps growing until it dominates whatever is being injected
//! into the channel, while `η = exp(−αt)` keeps the division regular.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::CommGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("{name} must have one entry per inverter ({expected}), got {got}")]
    Length {
        name: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{name}[{index}] must be positive, got {value}")]
    NonPositive {
        name: &'static str,
        index: usize,
        value: f64,
    },
    #[error("adaptive order gamma must be at least 1")]
    ZeroGamma,
    #[error("upper voltage reference must exceed the lower one")]
    LeaderOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Conventional,
    Resilient,
}

/// Per-inverter gains of the secondary layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    pub mode: ControlMode,
    pub c_f: Vec<f64>,
    pub c_v: Vec<f64>,
    pub beta_f: Vec<f64>,
    pub beta_v: Vec<f64>,
    pub alpha_f: Vec<f64>,
    pub alpha_v: Vec<f64>,
    /// Order of the adaptive integrator chain.
    pub gamma: usize,
    pub chi_f0: Vec<f64>,
    pub chi_v0: Vec<f64>,
}

impl ControllerParams {
    pub fn validate(&self, n: usize) -> Result<(), ControllerError> {
        if self.gamma == 0 {
            return Err(ControllerError::ZeroGamma);
        }
        let fields: [(&'static str, &Vec<f64>); 8] = [
            ("c_f", &self.c_f),
            ("c_v", &self.c_v),
            ("beta_f", &self.beta_f),
            ("beta_v", &self.beta_v),
            ("alpha_f", &self.alpha_f),
            ("alpha_v", &self.alpha_v),
            ("chi_f0", &self.chi_f0),
            ("chi_v0", &self.chi_v0),
        ];
        for (name, values) in fields {
            if values.len() != n {
                return Err(ControllerError::Length {
                    name,
                    expected: n,
                    got: values.len(),
                });
            }
            if let Some((index, &value)) = values.iter().enumerate().find(|&(_, &v)| v <= 0.0) {
                return Err(ControllerError::NonPositive { name, index, value });
            }
        }
        Ok(())
    }
}

/// References broadcast by the two leaders. Both carry the same frequency
/// reference; they differ in the voltage bound they issue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeaderSignal {
    /// rad/s
    pub omega_ref: f64,
    pub v_upper: f64,
    pub v_lower: f64,
}

impl LeaderSignal {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.v_upper <= self.v_lower {
            return Err(ControllerError::LeaderOrder);
        }
        Ok(())
    }
}

/// Mutable controller state: the droop setpoints and the adaptive chains
/// (row `i` holds `[χ_i, χ_i⁽¹⁾, …, χ_i⁽ᵞ⁻¹⁾]`, stored row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub omega_n: Vec<f64>,
    pub v_n: Vec<f64>,
    pub chi_f: Vec<f64>,
    pub chi_v: Vec<f64>,
    pub gamma: usize,
}

impl ControllerState {
    pub fn new(omega_n: Vec<f64>, v_n: Vec<f64>, params: &ControllerParams) -> Self {
        let n = omega_n.len();
        let gamma = params.gamma;
        let mut chi_f = vec![0.0; n * gamma];
        let mut chi_v = vec![0.0; n * gamma];
        for i in 0..n {
            chi_f[i * gamma] = params.chi_f0[i];
            chi_v[i * gamma] = params.chi_v0[i];
        }
        Self {
            omega_n,
            v_n,
            chi_f,
            chi_v,
            gamma,
        }
    }

    pub fn chi_f_of(&self, i: usize) -> &[f64] {
        &self.chi_f[i * self.gamma..(i + 1) * self.gamma]
    }

    pub fn chi_v_of(&self, i: usize) -> &[f64] {
        &self.chi_v[i * self.gamma..(i + 1) * self.gamma]
    }
}

/// Gain-scaled disagreement of a node against its in-neighbors and pinned
/// leader references.
#[inline]
pub fn neighborhood_term(
    own: f64,
    neighbors: impl IntoIterator<Item = (f64, f64)>,
    leaders: impl IntoIterator<Item = (f64, f64)>,
    gain: f64,
) -> f64 {
    let mut acc = 0.0;
    for (w, x) in neighbors {
        acc += w * (x - own);
    }
    for (g, x) in leaders {
        acc += g * (x - own);
    }
    gain * acc
}

/// Frequency-loop disagreement for inverter `i`. The leader reference lives
/// in setpoint space: `ω_ref + m_Pi P_i` with the node's own droop shift.
#[inline]
pub fn neighborhood_term_f(
    i: usize,
    omega_n: &[f64],
    p: &[f64],
    graph: &CommGraph,
    leaders: &LeaderSignal,
    c_f: &[f64],
    m_p: &[f64],
) -> f64 {
    let leader_value = leaders.omega_ref + m_p[i] * p[i];
    neighborhood_term(
        omega_n[i],
        graph.in_neighbors(i).map(|(j, w)| (w, omega_n[j])),
        [
            (graph.pin_upper()[i], leader_value),
            (graph.pin_lower()[i], leader_value),
        ],
        c_f[i],
    )
}

/// Voltage-loop disagreement for inverter `i`; the two leaders carry the
/// upper and lower voltage references, each shifted by the node's own droop.
#[inline]
pub fn neighborhood_term_v(
    i: usize,
    v_n: &[f64],
    q: &[f64],
    graph: &CommGraph,
    leaders: &LeaderSignal,
    c_v: &[f64],
    n_q: &[f64],
) -> f64 {
    let shift = n_q[i] * q[i];
    neighborhood_term(
        v_n[i],
        graph.in_neighbors(i).map(|(j, w)| (w, v_n[j])),
        [
            (graph.pin_upper()[i], leaders.v_upper + shift),
            (graph.pin_lower()[i], leaders.v_lower + shift),
        ],
        c_v[i],
    )
}

/// The conventional protocol is the neighborhood term itself.
#[inline]
pub fn conventional_input(zeta: f64) -> f64 {
    zeta
}

/// Resilient protocol: neighborhood term plus the adaptive compensation.
/// Returns `(u, Λ)` with `Λ = ζχ/(|ζ| + η)` and `η = exp(−α t)`, so
/// `|Λ| < χ` for any finite time.
#[inline]
pub fn resilient_input(zeta: f64, chi: f64, t: f64, alpha: f64) -> (f64, f64) {
    let eta = (-alpha * t).exp();
    let lambda = zeta * chi / (zeta.abs() + eta);
    (zeta + lambda, lambda)
}

/// Derivative of one adaptive chain: each entry integrates the next, and the
/// top of the chain absorbs `β|ζ|`. With positive initial state the bottom
/// entry can only grow.
#[inline]
pub fn adaptive_chain_derivative(zeta: f64, chain: &[f64], beta: f64, out: &mut [f64]) {
    let gamma = chain.len();
    for s in 0..gamma - 1 {
        out[s] = chain[s + 1];
    }
    out[gamma - 1] = beta * zeta.abs();
}

/// Setpoint dynamics from the auxiliary inputs. Attack injections are added
/// by the engine on top of these, never inside the controller.
#[inline]
pub fn setpoint_derivative(u_f: f64, u_v: f64) -> (f64, f64) {
    (u_f, u_v)
}

/// Stacked per-node evaluation of one controller channel set, written into
/// caller-owned buffers so the integration loop stays allocation-free.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlEval {
    pub u_f: Vec<f64>,
    pub u_v: Vec<f64>,
    pub zeta_f: Vec<f64>,
    pub zeta_v: Vec<f64>,
    pub lambda_f: Vec<f64>,
    pub lambda_v: Vec<f64>,
}

impl ControlEval {
    pub fn zeros(n: usize) -> Self {
        Self {
            u_f: vec![0.0; n],
            u_v: vec![0.0; n],
            zeta_f: vec![0.0; n],
            zeta_v: vec![0.0; n],
            lambda_f: vec![0.0; n],
            lambda_v: vec![0.0; n],
        }
    }
}

/// Evaluates both control loops for every inverter at time `t`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_into(
    t: f64,
    omega_n: &[f64],
    v_n: &[f64],
    chi_f: &[f64],
    chi_v: &[f64],
    p: &[f64],
    q: &[f64],
    graph: &CommGraph,
    leaders: &LeaderSignal,
    params: &ControllerParams,
    m_p: &[f64],
    n_q: &[f64],
    out: &mut ControlEval,
) {
    let n = omega_n.len();
    let gamma = params.gamma;
    for i in 0..n {
        let zf = neighborhood_term_f(i, omega_n, p, graph, leaders, &params.c_f, m_p);
        let zv = neighborhood_term_v(i, v_n, q, graph, leaders, &params.c_v, n_q);
        out.zeta_f[i] = zf;
        out.zeta_v[i] = zv;
        match params.mode {
            ControlMode::Conventional => {
                out.u_f[i] = conventional_input(zf);
                out.u_v[i] = conventional_input(zv);
                out.lambda_f[i] = 0.0;
                out.lambda_v[i] = 0.0;
            }
            ControlMode::Resilient => {
                let (uf, lf) = resilient_input(zf, chi_f[i * gamma], t, params.alpha_f[i]);
                let (uv, lv) = resilient_input(zv, chi_v[i * gamma], t, params.alpha_v[i]);
                out.u_f[i] = uf;
                out.u_v[i] = uv;
                out.lambda_f[i] = lf;
                out.lambda_v[i] = lv;
            }
        }
    }
}
