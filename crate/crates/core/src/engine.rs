//! Fixed-step integration of the coupled plant/controller/attack system with
//! a deterministic event schedule and full trace recording.
//!
//! State layout (flat vector): `[omega_n | v_n | chi_f | chi_v | delta]`,
//! with each adaptive chain stored row-major per inverter. All algebraic
//! outputs are recomputed at every stage; events apply between steps, never
//! mid-stage, and their times snap to the nearest step boundary.

use thiserror::Error;

use crate::attacks::{AttackSignal, Channel};
use crate::controller::{self, ControlMode, ControllerParams, LeaderSignal};
use crate::plant::{ElectricalNetwork, InverterParams, VoltageSolver};
use crate::scenario::{EventKind, ScenarioConfig, TWO_PI};
use crate::topology::{CommGraph, GraphMatrices};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

impl From<crate::scenario::ScenarioError> for EngineError {
    fn from(e: crate::scenario::ScenarioError) -> Self {
        EngineError::InvalidScenario(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Trace types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceReason {
    NonFinite,
    FrequencyDeviation { inverter: usize },
    VoltageRange { inverter: usize },
}

impl std::fmt::Display for DivergenceReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DivergenceReason::NonFinite => write!(f, "non-finite state"),
            DivergenceReason::FrequencyDeviation { inverter } => {
                write!(f, "frequency deviation limit at inverter {}", inverter + 1)
            }
            DivergenceReason::VoltageRange { inverter } => {
                write!(f, "terminal voltage limit at inverter {}", inverter + 1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub time: f64,
    pub reason: DivergenceReason,
}

/// One recorded instant; every per-inverter field has length N.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub omega_n: Vec<f64>,
    pub v_n: Vec<f64>,
    pub omega: Vec<f64>,
    pub v_od: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub zeta_f: Vec<f64>,
    pub zeta_v: Vec<f64>,
    pub chi_f: Vec<f64>,
    pub chi_v: Vec<f64>,
    pub lambda_f: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub attack_f: Vec<f64>,
    pub attack_v: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Communication topology in force from `start_time` on.
#[derive(Debug, Clone)]
pub struct TopologyEpoch {
    pub start_time: f64,
    pub graph: CommGraph,
    /// `None` when the epoch's containment matrix sum is singular.
    pub matrices: Option<GraphMatrices>,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub config: ScenarioConfig,
    pub samples: Vec<Sample>,
    pub divergence: Option<Divergence>,
    pub warnings: Vec<String>,
    pub epochs: Vec<TopologyEpoch>,
}

impl SimTrace {
    pub fn n(&self) -> usize {
        self.config.n()
    }

    pub fn completed(&self) -> bool {
        self.divergence.is_none()
    }

    /// Matrices of the epoch active at time `t` (last epoch starting at or
    /// before `t`).
    pub fn epoch_at(&self, t: f64) -> &TopologyEpoch {
        let idx = self
            .epochs
            .partition_point(|e| e.start_time <= t)
            .saturating_sub(1);
        &self.epochs[idx]
    }
}

// ---------------------------------------------------------------------------
// Generic fixed-step integrator
// ---------------------------------------------------------------------------

/// Classical 4-stage Runge–Kutta step over a flat state vector.
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4 {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            stage: vec![0.0; dim],
        }
    }

    pub fn step(
        &mut self,
        f: &mut impl FnMut(f64, &[f64], &mut [f64]),
        t: f64,
        dt: f64,
        y: &mut [f64],
    ) {
        let dim = y.len();
        f(t, y, &mut self.k1);
        for i in 0..dim {
            self.stage[i] = y[i] + 0.5 * dt * self.k1[i];
        }
        f(t + 0.5 * dt, &self.stage, &mut self.k2);
        for i in 0..dim {
            self.stage[i] = y[i] + 0.5 * dt * self.k2[i];
        }
        f(t + 0.5 * dt, &self.stage, &mut self.k3);
        for i in 0..dim {
            self.stage[i] = y[i] + dt * self.k3[i];
        }
        f(t + dt, &self.stage, &mut self.k4);
        for i in 0..dim {
            y[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Runtime
// ---------------------------------------------------------------------------

/// Algebraic outputs and controller diagnostics at one stage.
#[derive(Debug, Clone, Default)]
struct StageDiag {
    p: Vec<f64>,
    q: Vec<f64>,
    omega: Vec<f64>,
    v_od: Vec<f64>,
    zeta_f: Vec<f64>,
    zeta_v: Vec<f64>,
    lambda_f: Vec<f64>,
    lambda_v: Vec<f64>,
    attack_f: Vec<f64>,
    attack_v: Vec<f64>,
}

impl StageDiag {
    fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
            omega: vec![0.0; n],
            v_od: vec![0.0; n],
            zeta_f: vec![0.0; n],
            zeta_v: vec![0.0; n],
            lambda_f: vec![0.0; n],
            lambda_v: vec![0.0; n],
            attack_f: vec![0.0; n],
            attack_v: vec![0.0; n],
        }
    }
}

struct Runtime {
    n: usize,
    gamma: usize,
    mode: ControlMode,
    // flattened row-major copies for the integration loop
    adj: Vec<f64>,
    pin_upper: Vec<f64>,
    pin_lower: Vec<f64>,
    b_active: Vec<f64>,
    v_solve: Vec<f64>,
    m_p: Vec<f64>,
    n_q: Vec<f64>,
    inv_n_q: Vec<f64>,
    c_f: Vec<f64>,
    c_v: Vec<f64>,
    beta_f: Vec<f64>,
    beta_v: Vec<f64>,
    alpha_f: Vec<f64>,
    alpha_v: Vec<f64>,
    leaders: LeaderSignal,
    attacks: Vec<AttackSignal>,
    // loads currently in force (base schedule + event deltas)
    load_p_now: Vec<f64>,
    load_q_now: Vec<f64>,
}

impl Runtime {
    fn refresh_graph(&mut self, graph: &CommGraph) {
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                self.adj[i * n + j] = graph.weight(i, j);
            }
            self.pin_upper[i] = graph.pin_upper()[i];
            self.pin_lower[i] = graph.pin_lower()[i];
        }
    }

    fn refresh_loads(
        &mut self,
        t: f64,
        net: &ElectricalNetwork,
        extra_p: &[f64],
        extra_q: &[f64],
    ) {
        for i in 0..self.n {
            self.load_p_now[i] = net.load_p()[i].value(t) + extra_p[i];
            self.load_q_now[i] = net.load_q()[i].value(t) + extra_q[i];
        }
    }

    /// Full derivative of the flat state. Mirrors the per-node controller
    /// operations on flattened storage; the correspondence is pinned by the
    /// `recorded_diagnostics_match_public_operations` test.
    fn derivative(&self, t: f64, y: &[f64], dy: &mut [f64], mut diag: Option<&mut StageDiag>) {
        let n = self.n;
        let g = self.gamma;
        let (omega_n, rest) = y.split_at(n);
        let (v_n, rest) = rest.split_at(n);
        let (chi_f, rest) = rest.split_at(n * g);
        let (chi_v, delta) = rest.split_at(n * g);

        let eta_f = (-self.alpha_f[0] * t).exp();
        let eta_v = (-self.alpha_v[0] * t).exp();

        let (d_omega_n, drest) = dy.split_at_mut(n);
        let (d_v_n, drest) = drest.split_at_mut(n);
        let (d_chi_f, drest) = drest.split_at_mut(n * g);
        let (d_chi_v, d_delta) = drest.split_at_mut(n * g);

        for i in 0..n {
            // --- plant outputs ---
            let mut p_i = self.load_p_now[i];
            let mut v_od_i = 0.0;
            for j in 0..n {
                p_i += self.b_active[i * n + j] * (delta[i] - delta[j]);
                v_od_i += self.v_solve[i * n + j] * (v_n[j] - self.n_q[j] * self.load_q_now[j]);
            }
            let q_i = (v_n[i] - v_od_i) * self.inv_n_q[i];
            let omega_i = omega_n[i] - self.m_p[i] * p_i;

            // --- neighborhood disagreement ---
            let mut acc_f = 0.0;
            let mut acc_v = 0.0;
            for j in 0..n {
                let w = self.adj[i * n + j];
                acc_f += w * (omega_n[j] - omega_n[i]);
                acc_v += w * (v_n[j] - v_n[i]);
            }
            let leader_f = self.leaders.omega_ref + self.m_p[i] * p_i;
            let pin_sum = self.pin_upper[i] + self.pin_lower[i];
            acc_f += pin_sum * (leader_f - omega_n[i]);
            let shift = self.n_q[i] * q_i;
            acc_v += self.pin_upper[i] * (self.leaders.v_upper + shift - v_n[i])
                + self.pin_lower[i] * (self.leaders.v_lower + shift - v_n[i]);
            let zeta_f = self.c_f[i] * acc_f;
            let zeta_v = self.c_v[i] * acc_v;

            // --- control inputs ---
            let (u_f, u_v, lambda_f, lambda_v);
            match self.mode {
                ControlMode::Conventional => {
                    u_f = zeta_f;
                    u_v = zeta_v;
                    lambda_f = 0.0;
                    lambda_v = 0.0;
                    for s in 0..g {
                        d_chi_f[i * g + s] = 0.0;
                        d_chi_v[i * g + s] = 0.0;
                    }
                }
                ControlMode::Resilient => {
                    let chif = chi_f[i * g];
                    let chiv = chi_v[i * g];
                    lambda_f = zeta_f * chif / (zeta_f.abs() + eta_f);
                    lambda_v = zeta_v * chiv / (zeta_v.abs() + eta_v);
                    u_f = zeta_f + lambda_f;
                    u_v = zeta_v + lambda_v;
                    for s in 0..g - 1 {
                        d_chi_f[i * g + s] = chi_f[i * g + s + 1];
                        d_chi_v[i * g + s] = chi_v[i * g + s + 1];
                    }
                    d_chi_f[i * g + g - 1] = self.beta_f[i] * zeta_f.abs();
                    d_chi_v[i * g + g - 1] = self.beta_v[i] * zeta_v.abs();
                }
            }

            d_omega_n[i] = u_f;
            d_v_n[i] = u_v;
            d_delta[i] = omega_i - self.leaders.omega_ref;

            if let Some(d) = diag.as_deref_mut() {
                d.p[i] = p_i;
                d.q[i] = q_i;
                d.omega[i] = omega_i;
                d.v_od[i] = v_od_i;
                d.zeta_f[i] = zeta_f;
                d.zeta_v[i] = zeta_v;
                d.lambda_f[i] = lambda_f;
                d.lambda_v[i] = lambda_v;
                d.attack_f[i] = 0.0;
                d.attack_v[i] = 0.0;
            }
        }

        // --- attack injections on the setpoint-rate channels ---
        for a in &self.attacks {
            let v = a.evaluate(t);
            match a.channel {
                Channel::Frequency => {
                    d_omega_n[a.inverter] += v;
                    if let Some(d) = diag.as_deref_mut() {
                        d.attack_f[a.inverter] += v;
                    }
                }
                Channel::Voltage => {
                    d_v_n[a.inverter] += v;
                    if let Some(d) = diag.as_deref_mut() {
                        d.attack_v[a.inverter] += v;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

struct SnappedEvent {
    step: u64,
    kind: EventKind,
}

/// Attack-free equilibrium of the coupled system under the loads at t = 0:
/// every terminal frequency at the reference, droop products equalized, and
/// the voltage setpoints at the containment fixed point of the live graph.
fn steady_state_init(
    matrices: &GraphMatrices,
    graph: &CommGraph,
    net: &ElectricalNetwork,
    droop: &[InverterParams],
    vsolver: &VoltageSolver,
    leaders: &LeaderSignal,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), EngineError> {
    use nalgebra::{DMatrix, DVector};
    let n = net.n();
    let load_p0 = DVector::from_fn(n, |i, _| net.load_p()[i].value(0.0));
    let load_q0 = DVector::from_fn(n, |i, _| net.load_q()[i].value(0.0));
    let inv_m: Vec<f64> = droop.iter().map(|p| 1.0 / p.m_p).collect();

    // Active side: equalized droop products, angles from the flow balance.
    let (p_star, delta) = if net.b_active().iter().all(|&b| b == 0.0) {
        // Islanded coupling: each unit carries its own load; an equilibrium
        // exists only when the droop products already agree.
        let products: Vec<f64> = (0..n).map(|i| droop[i].m_p * load_p0[i]).collect();
        let spread = products.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - products.iter().cloned().fold(f64::INFINITY, f64::min);
        if n > 1 && spread > 1e-9 * products[0].abs().max(1e-12) {
            return Err(EngineError::InvalidScenario(
                "steady-state start needs a connected active coupling or uniform droop products"
                    .into(),
            ));
        }
        (load_p0.clone(), DVector::zeros(n))
    } else {
        let share = load_p0.sum() / inv_m.iter().sum::<f64>();
        let p_star = DVector::from_fn(n, |i, _| share * inv_m[i]);
        let degrees = DVector::from_fn(n, |i, _| net.b_active().row(i).sum());
        let mut l_a = DMatrix::from_diagonal(&degrees) - net.b_active();
        let mut rhs = &p_star - &load_p0;
        // Gauge: pin the last angle to zero.
        for j in 0..n {
            l_a[(n - 1, j)] = if j == n - 1 { 1.0 } else { 0.0 };
        }
        rhs[n - 1] = 0.0;
        let delta = l_a.lu().solve(&rhs).ok_or_else(|| {
            EngineError::InvalidScenario("active coupling admits no angle solution".into())
        })?;
        (p_star, delta)
    };
    let share = droop[0].m_p * p_star[0];
    let omega_n = vec![leaders.omega_ref + share; n];

    // Voltage side: setpoints solving the containment fixed point coupled
    // with the terminal-voltage relation v_od = S (V_n - N load_q).
    let g_up = DMatrix::from_diagonal(graph.pin_upper());
    let g_lo = DMatrix::from_diagonal(graph.pin_lower());
    let g_sum = &g_up + &g_lo;
    let n_mat = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| droop[i].n_q));
    let s = vsolver.inverse();
    let system = &matrices.phi_sum - &g_sum * (DMatrix::identity(n, n) - s);
    let ones = DVector::from_element(n, 1.0);
    let rhs = (&g_up * &ones) * leaders.v_upper
        + (&g_lo * &ones) * leaders.v_lower
        + &g_sum * s * &n_mat * &load_q0;
    let v_n = system.lu().solve(&rhs).ok_or_else(|| {
        EngineError::InvalidScenario("voltage containment fixed point is singular".into())
    })?;

    Ok((
        omega_n,
        v_n.as_slice().to_vec(),
        delta.as_slice().to_vec(),
    ))
}

/// Per-inverter alpha values must be uniform for the shared `exp` in the hot
/// loop; the schema allows per-inverter values, so fall back per node if they
/// differ. Uniform alphas are the only configurations shipped; reject others
/// early rather than silently miscomputing.
fn require_uniform(name: &str, values: &[f64]) -> Result<(), EngineError> {
    if values.windows(2).any(|w| w[0] != w[1]) {
        return Err(EngineError::InvalidScenario(format!(
            "{name} must currently be uniform across inverters"
        )));
    }
    Ok(())
}

pub fn run(cfg: &ScenarioConfig) -> Result<SimTrace, EngineError> {
    cfg.validate()?;
    let n = cfg.n();
    let graph = cfg.comm_graph()?;
    if !graph.assumption1_holds() {
        let unreachable: Vec<usize> = graph
            .leader_reachability()
            .iter()
            .enumerate()
            .filter(|(_, &r)| !r)
            .map(|(i, _)| i + 1)
            .collect();
        return Err(EngineError::InvalidScenario(format!(
            "leader reachability fails at t=0 for inverters {unreachable:?}"
        )));
    }
    let matrices = graph
        .build_matrices()
        .map_err(|e| EngineError::InvalidScenario(e.to_string()))?;
    let net = cfg.electrical_network()?;
    let droop: Vec<InverterParams> = cfg.inverter_params()?;
    let vsolver =
        VoltageSolver::new(&net, &droop).map_err(|e| EngineError::InvalidScenario(e.to_string()))?;
    let params: ControllerParams = cfg.controller_params();
    let leaders = cfg.leader_signal();
    require_uniform("controller.alpha_f", &params.alpha_f)?;
    require_uniform("controller.alpha_v", &params.alpha_v)?;

    let dt = cfg.solver.dt;
    let n_steps = (cfg.solver.t_end / dt).round() as u64;
    if n_steps == 0 {
        return Err(EngineError::InvalidScenario(
            "t_end shorter than one step".into(),
        ));
    }

    let events: Vec<SnappedEvent> = cfg
        .sorted_events()
        .into_iter()
        .map(|e| SnappedEvent {
            step: ((e.time / dt).round() as u64).min(n_steps),
            kind: e.kind,
        })
        .collect();

    let gamma = params.gamma;
    let dim = 2 * n + 2 * n * gamma + n;
    let (omega_n0, v_n0, delta0) = if cfg.initial.steady_state {
        steady_state_init(&matrices, &graph, &net, &droop, &vsolver, &leaders)?
    } else {
        cfg.initial_state()
    };
    let state0 = controller::ControllerState::new(omega_n0, v_n0, &params);
    let mut y = vec![0.0; dim];
    y[..n].copy_from_slice(&state0.omega_n);
    y[n..2 * n].copy_from_slice(&state0.v_n);
    y[2 * n..2 * n + n * gamma].copy_from_slice(&state0.chi_f);
    y[2 * n + n * gamma..2 * n + 2 * n * gamma].copy_from_slice(&state0.chi_v);
    y[dim - n..].copy_from_slice(&delta0);

    let mut rt = Runtime {
        n,
        gamma,
        mode: params.mode,
        adj: vec![0.0; n * n],
        pin_upper: vec![0.0; n],
        pin_lower: vec![0.0; n],
        b_active: net.b_active().transpose().as_slice().to_vec(),
        v_solve: vsolver.inverse().transpose().as_slice().to_vec(),
        m_p: droop.iter().map(|p| p.m_p).collect(),
        n_q: droop.iter().map(|p| p.n_q).collect(),
        inv_n_q: droop.iter().map(|p| 1.0 / p.n_q).collect(),
        c_f: params.c_f.clone(),
        c_v: params.c_v.clone(),
        beta_f: params.beta_f.clone(),
        beta_v: params.beta_v.clone(),
        alpha_f: params.alpha_f.clone(),
        alpha_v: params.alpha_v.clone(),
        leaders,
        attacks: cfg.attack_signals(),
        load_p_now: vec![0.0; n],
        load_q_now: vec![0.0; n],
    };
    rt.refresh_graph(&graph);

    let mut live_graph = graph.clone();
    let base_adjacency = graph.adjacency().clone();
    let mut epochs = vec![TopologyEpoch {
        start_time: 0.0,
        graph: graph.clone(),
        matrices: Some(matrices),
    }];
    let mut warnings: Vec<String> = Vec::new();

    let mut extra_p = vec![0.0; n];
    let mut extra_q = vec![0.0; n];
    let mut active_loads: Vec<(String, usize, f64, f64)> = Vec::new();

    // Next time any base load schedule changes; event deltas refresh loads
    // directly when applied.
    let breakpoint_after = |t: f64| {
        let mut next = f64::INFINITY;
        for s in net.load_p().iter().chain(net.load_q().iter()) {
            for &(tp, _) in s.points() {
                if tp > t && tp < next {
                    next = tp;
                }
            }
        }
        next
    };

    let freq_limit = TWO_PI * cfg.solver.divergence.max_frequency_deviation_hz;
    let v_min = cfg.solver.divergence.v_od_min;
    let v_max = cfg.solver.divergence.v_od_max;
    let check_divergence = |diag: &StageDiag, t: f64| -> Option<Divergence> {
        for i in 0..n {
            let w = diag.omega[i];
            let v = diag.v_od[i];
            if !w.is_finite() || !v.is_finite() {
                return Some(Divergence {
                    time: t,
                    reason: DivergenceReason::NonFinite,
                });
            }
            if (w - leaders.omega_ref).abs() > freq_limit {
                return Some(Divergence {
                    time: t,
                    reason: DivergenceReason::FrequencyDeviation { inverter: i },
                });
            }
            if v < v_min || v > v_max {
                return Some(Divergence {
                    time: t,
                    reason: DivergenceReason::VoltageRange { inverter: i },
                });
            }
        }
        None
    };

    let record_every = cfg.solver.record_every as u64;
    let expected_samples = (n_steps / record_every + 2) as usize;
    let mut samples: Vec<Sample> = Vec::with_capacity(expected_samples);
    let mut divergence: Option<Divergence> = None;

    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut stage = vec![0.0; dim];
    let mut diag = StageDiag::zeros(n);

    let make_sample = |t: f64, y: &[f64], diag: &StageDiag| -> Sample {
        let chi_pick = |chain: &[f64]| -> Vec<f64> { (0..n).map(|i| chain[i * gamma]).collect() };
        Sample {
            time: t,
            omega_n: y[..n].to_vec(),
            v_n: y[n..2 * n].to_vec(),
            omega: diag.omega.clone(),
            v_od: diag.v_od.clone(),
            p: diag.p.clone(),
            q: diag.q.clone(),
            zeta_f: diag.zeta_f.clone(),
            zeta_v: diag.zeta_v.clone(),
            chi_f: chi_pick(&y[2 * n..2 * n + n * gamma]),
            chi_v: chi_pick(&y[2 * n + n * gamma..2 * n + 2 * n * gamma]),
            lambda_f: diag.lambda_f.clone(),
            lambda_v: diag.lambda_v.clone(),
            attack_f: diag.attack_f.clone(),
            attack_v: diag.attack_v.clone(),
            delta: y[dim - n..].to_vec(),
        }
    };

    let mut event_idx = 0usize;
    rt.refresh_loads(0.0, &net, &extra_p, &extra_q);
    let mut next_breakpoint = breakpoint_after(0.0);

    let mut k = 0u64;
    loop {
        let t = k as f64 * dt;

        // Events due at this boundary.
        let mut topology_changed = false;
        while event_idx < events.len() && events[event_idx].step == k {
            match &events[event_idx].kind {
                EventKind::LoadStep {
                    id,
                    bus,
                    delta_p,
                    delta_q,
                } => {
                    extra_p[bus - 1] += delta_p;
                    extra_q[bus - 1] += delta_q;
                    active_loads.push((id.clone(), bus - 1, *delta_p, *delta_q));
                }
                EventKind::LoadRemove { id } => {
                    if let Some(pos) = active_loads.iter().position(|(x, _, _, _)| x == id) {
                        let (_, bus, dp, dq) = active_loads.remove(pos);
                        extra_p[bus] -= dp;
                        extra_q[bus] -= dq;
                    }
                }
                EventKind::LinkDown { i, j } => {
                    let mut adj = live_graph.adjacency().clone();
                    adj[(i - 1, j - 1)] = 0.0;
                    adj[(j - 1, i - 1)] = 0.0;
                    live_graph = CommGraph::new(
                        adj,
                        live_graph.pin_upper().clone(),
                        live_graph.pin_lower().clone(),
                    )
                    .expect("link removal preserves structural invariants");
                    topology_changed = true;
                }
                EventKind::LinkUp { i, j } => {
                    let mut adj = live_graph.adjacency().clone();
                    adj[(i - 1, j - 1)] = base_adjacency[(i - 1, j - 1)];
                    adj[(j - 1, i - 1)] = base_adjacency[(j - 1, i - 1)];
                    live_graph = CommGraph::new(
                        adj,
                        live_graph.pin_upper().clone(),
                        live_graph.pin_lower().clone(),
                    )
                    .expect("link restoration preserves structural invariants");
                    topology_changed = true;
                }
            }
            event_idx += 1;
            rt.refresh_loads(t, &net, &extra_p, &extra_q);
        }
        if topology_changed {
            rt.refresh_graph(&live_graph);
            if !live_graph.assumption1_holds() {
                let unreachable: Vec<usize> = live_graph
                    .leader_reachability()
                    .iter()
                    .enumerate()
                    .filter(|(_, &r)| !r)
                    .map(|(i, _)| i + 1)
                    .collect();
                warnings.push(format!(
                    "t={t:.6}: leader reachability lost for inverters {unreachable:?}"
                ));
            }
            let matrices = match live_graph.build_matrices() {
                Ok(m) => Some(m),
                Err(e) => {
                    warnings.push(format!("t={t:.6}: {e}"));
                    None
                }
            };
            epochs.push(TopologyEpoch {
                start_time: t,
                graph: live_graph.clone(),
                matrices,
            });
        }
        if t >= next_breakpoint {
            rt.refresh_loads(t, &net, &extra_p, &extra_q);
            next_breakpoint = breakpoint_after(t);
        }

        // First-stage evaluation doubles as the observation of the state at t.
        rt.derivative(t, &y, &mut k1, Some(&mut diag));
        if let Some(div) = check_divergence(&diag, t) {
            if div.reason == DivergenceReason::NonFinite {
                divergence = Some(div);
            } else {
                samples.push(make_sample(t, &y, &diag));
                divergence = Some(div);
            }
            break;
        }
        if k % record_every == 0 || k == n_steps {
            samples.push(make_sample(t, &y, &diag));
        }
        if k == n_steps {
            break;
        }

        // Remaining stages.
        for i in 0..dim {
            stage[i] = y[i] + 0.5 * dt * k1[i];
        }
        rt.derivative(t + 0.5 * dt, &stage, &mut k2, None);
        for i in 0..dim {
            stage[i] = y[i] + 0.5 * dt * k2[i];
        }
        rt.derivative(t + 0.5 * dt, &stage, &mut k3, None);
        for i in 0..dim {
            stage[i] = y[i] + dt * k3[i];
        }
        rt.derivative(t + dt, &stage, &mut k4, None);
        for i in 0..dim {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        k += 1;
    }

    Ok(SimTrace {
        config: cfg.clone(),
        samples,
        divergence,
        warnings,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{single_preset, EventEntry};
    use approx::assert_relative_eq;

    /// Case-style scenario with decoupled electrical network and uniform
    /// droop products, so the exact consensus point is known.
    fn decoupled_consensus_scenario() -> ScenarioConfig {
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.network.b_active = vec![0.0; 16];
        cfg.network.b_reactive = vec![0.0; 16];
        // m_p = (9.4e-5, 9.4e-5, 18.8e-5, 18.8e-5): halve the loads of the
        // high-droop units so every m_p * P matches.
        cfg.network.load_p = vec![
            vec![(0.0, 6000.0)],
            vec![(0.0, 6000.0)],
            vec![(0.0, 3000.0)],
            vec![(0.0, 3000.0)],
        ];
        cfg.network.load_q = vec![
            vec![(0.0, 1000.0)],
            vec![(0.0, 1000.0)],
            vec![(0.0, 500.0)],
            vec![(0.0, 500.0)],
        ];
        cfg.attacks.clear();
        cfg
    }

    #[test]
    fn rk4_matches_exponential_decay() {
        let mut y = vec![1.0];
        let mut rk4 = Rk4::new(1);
        let dt = 1e-3;
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
        for k in 0..1000 {
            rk4.step(&mut f, k as f64 * dt, dt, &mut y);
        }
        assert!((y[0] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn rk4_observed_order_is_at_least_3_9() {
        let error_at = |dt: f64| -> f64 {
            let steps = (1.0 / dt).round() as usize;
            let mut y = vec![1.0];
            let mut rk4 = Rk4::new(1);
            let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
            for k in 0..steps {
                rk4.step(&mut f, k as f64 * dt, dt, &mut y);
            }
            (y[0] - (-1.0f64).exp()).abs()
        };
        let e1 = error_at(1e-2);
        let e2 = error_at(5e-3);
        let e3 = error_at(2.5e-3);
        let order12 = (e1 / e2).log2();
        let order23 = (e2 / e3).log2();
        assert!(order12 >= 3.9, "order {order12}");
        assert!(order23 >= 3.9, "order {order23}");
    }

    #[test]
    fn consensus_equilibrium_is_preserved() {
        let mut cfg = decoupled_consensus_scenario();
        cfg.solver.t_end = 0.5;
        // Exact equilibrium: uniform droop product, setpoints at the
        // containment fixed point.
        cfg.initial.steady_state = false;
        let prod = 9.4e-5 * 6000.0;
        cfg.initial.omega_n_hz = Some(vec![60.0 + prod / TWO_PI; 4]);
        // Voltage fixed point for the ring with pins at 1 and 3:
        // (phi_sum)^{-1} (350 g_up + 330 g_lo) plus the uniform droop shift.
        let shift = 1.3e-3 * 1000.0;
        let base = [
            350.0 * (2.0 / 3.0) + 330.0 / 3.0,
            340.0,
            350.0 / 3.0 + 330.0 * (2.0 / 3.0),
            340.0,
        ];
        cfg.initial.v_n = Some(base.iter().map(|b| b + shift).collect());
        let trace = run(&cfg).unwrap();
        assert!(trace.completed());
        let first = trace.samples.first().unwrap();
        let last = trace.samples.last().unwrap();
        for i in 0..4 {
            assert!((last.omega_n[i] - first.omega_n[i]).abs() < 1e-12);
            assert!((last.v_n[i] - first.v_n[i]).abs() < 1e-12);
            assert!((last.delta[i] - first.delta[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_configs_give_bit_identical_traces() {
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.solver.t_end = 1.0;
        let t1 = run(&cfg).unwrap();
        let t2 = run(&cfg).unwrap();
        assert_eq!(t1.samples.len(), t2.samples.len());
        for (a, b) in t1.samples.iter().zip(&t2.samples) {
            for (x, y) in a.omega_n.iter().zip(&b.omega_n) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.v_od.iter().zip(&b.v_od) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn recorded_diagnostics_match_public_operations() {
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.solver.t_end = 0.2;
        let trace = run(&cfg).unwrap();
        let graph = cfg.comm_graph().unwrap();
        let leaders = cfg.leader_signal();
        let params = cfg.controller_params();
        let sample = &trace.samples[5];
        for i in 0..4 {
            let zf = controller::neighborhood_term_f(
                i,
                &sample.omega_n,
                &sample.p,
                &graph,
                &leaders,
                &params.c_f,
                &cfg.inverters.m_p,
            );
            let zv = controller::neighborhood_term_v(
                i,
                &sample.v_n,
                &sample.q,
                &graph,
                &leaders,
                &params.c_v,
                &cfg.inverters.n_q,
            );
            assert_relative_eq!(zf, sample.zeta_f[i], epsilon = 1e-10);
            assert_relative_eq!(zv, sample.zeta_v[i], epsilon = 1e-10);
        }
        // Plant outputs match the public algebraic chain.
        let net = cfg.electrical_network().unwrap();
        let droop = cfg.inverter_params().unwrap();
        let solver = VoltageSolver::new(&net, &droop).unwrap();
        let outs = crate::plant::plant_outputs(
            &sample.delta,
            &sample.omega_n,
            &sample.v_n,
            &droop,
            &net,
            &solver,
            sample.time,
        );
        for i in 0..4 {
            assert_relative_eq!(outs.p[i], sample.p[i], epsilon = 1e-9);
            assert_relative_eq!(outs.q[i], sample.q[i], epsilon = 1e-9);
            assert_relative_eq!(outs.omega[i], sample.omega[i], epsilon = 1e-9);
            assert_relative_eq!(outs.v_od[i], sample.v_od[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn link_events_create_epochs_and_keep_reachability() {
        let mut cfg = single_preset("case3").unwrap();
        cfg.solver.dt = 1e-3;
        cfg.solver.record_every = 10;
        cfg.solver.t_end = 0.1;
        cfg.events = vec![
            EventEntry {
                time: 0.02,
                kind: EventKind::LinkDown { i: 1, j: 2 },
            },
            EventEntry {
                time: 0.06,
                kind: EventKind::LinkUp { i: 1, j: 2 },
            },
        ];
        cfg.attacks.clear();
        let trace = run(&cfg).unwrap();
        assert_eq!(trace.epochs.len(), 3);
        assert!(trace.warnings.is_empty());
        assert_eq!(trace.epochs[1].graph.weight(0, 1), 0.0);
        assert_eq!(trace.epochs[2].graph.weight(0, 1), 1.0);
        assert!(trace.epochs.iter().all(|e| e.graph.assumption1_holds()));
        // Epoch lookup by time.
        assert_relative_eq!(trace.epoch_at(0.03).start_time, 0.02);
        assert_relative_eq!(trace.epoch_at(0.08).start_time, 0.06);
    }

    #[test]
    fn losing_all_pins_records_warning() {
        // A two-node chain where the only leader pin reaches node 2 through
        // node 1; cutting the link isolates node 2.
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.graph.n = 2;
        cfg.graph.adjacency = vec![0.0, 1.0, 1.0, 0.0];
        cfg.graph.pin_upper = vec![1.0, 0.0];
        cfg.graph.pin_lower = vec![1.0, 0.0];
        cfg.network.b_active = vec![0.0, 100.0, 100.0, 0.0];
        cfg.network.b_reactive = vec![0.0, 10.0, 10.0, 0.0];
        cfg.network.load_p = vec![vec![(0.0, 100.0)]; 2];
        cfg.network.load_q = vec![vec![(0.0, 10.0)]; 2];
        cfg.inverters.m_p = vec![9.4e-5; 2];
        cfg.inverters.n_q = vec![1.3e-3; 2];
        let c = &mut cfg.controller;
        for v in [
            &mut c.c_f,
            &mut c.c_v,
            &mut c.beta_f,
            &mut c.beta_v,
            &mut c.alpha_f,
            &mut c.alpha_v,
            &mut c.chi_f0,
            &mut c.chi_v0,
        ] {
            v.truncate(2);
        }
        cfg.attacks.clear();
        cfg.events = vec![EventEntry {
            time: 0.05,
            kind: EventKind::LinkDown { i: 1, j: 2 },
        }];
        cfg.solver.t_end = 0.1;
        let trace = run(&cfg).unwrap();
        assert_eq!(trace.warnings.len(), 2, "{:?}", trace.warnings);
        assert!(trace.warnings[0].contains("reachability"));
        assert!(trace.epochs[1].matrices.is_none());
    }

    #[test]
    fn load_events_change_power_and_revert() {
        let mut cfg = single_preset("case2").unwrap();
        cfg.attacks.clear();
        cfg.solver.dt = 1e-3;
        cfg.solver.record_every = 10;
        cfg.solver.t_end = 1.0;
        cfg.events = vec![
            EventEntry {
                time: 0.3,
                kind: EventKind::LoadStep {
                    id: "x".into(),
                    bus: 1,
                    delta_p: 7000.0,
                    delta_q: 0.0,
                },
            },
            EventEntry {
                time: 0.6,
                kind: EventKind::LoadRemove { id: "x".into() },
            },
        ];
        let trace = run(&cfg).unwrap();
        let total_p = |s: &Sample| -> f64 { s.p.iter().sum() };
        let before = trace.samples.iter().find(|s| s.time >= 0.29).unwrap();
        let during = trace.samples.iter().find(|s| s.time >= 0.45).unwrap();
        let after = trace.samples.iter().find(|s| s.time >= 0.9).unwrap();
        assert_relative_eq!(total_p(before), 24_000.0, epsilon = 1.0);
        assert_relative_eq!(total_p(during), 31_000.0, epsilon = 1.0);
        assert_relative_eq!(total_p(after), 24_000.0, epsilon = 1.0);
    }

    #[test]
    fn event_times_snap_to_step_boundaries() {
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.attacks.clear();
        cfg.solver.dt = 1e-3;
        cfg.solver.record_every = 1;
        cfg.solver.t_end = 0.03;
        cfg.events = vec![EventEntry {
            time: 0.01205, // snaps to 0.012
            kind: EventKind::LoadStep {
                id: "s".into(),
                bus: 2,
                delta_p: 5000.0,
                delta_q: 0.0,
            },
        }];
        let trace = run(&cfg).unwrap();
        // Steady-state start shares 24 kW as (8, 8, 4, 4) kW; the stepped bus
        // absorbs the extra 5 kW instantaneously at the snapped boundary.
        let base = 8000.0;
        for s in &trace.samples {
            if s.time < 0.012 - 1e-12 {
                assert!((s.p[1] - base).abs() < 500.0, "t={} p={}", s.time, s.p[1]);
            }
            if (s.time - 0.012).abs() < 1e-12 {
                assert!((s.p[1] - base - 5000.0).abs() < 500.0);
            }
        }
    }

    #[test]
    fn steady_state_start_is_an_equilibrium() {
        let mut cfg = single_preset("case1_resilient").unwrap();
        cfg.attacks.clear();
        cfg.solver.dt = 1e-4;
        cfg.solver.record_every = 100;
        cfg.solver.t_end = 0.5;
        let trace = run(&cfg).unwrap();
        let first = trace.samples.first().unwrap();
        let last = trace.samples.last().unwrap();
        let omega_ref = cfg.leader_signal().omega_ref;
        for i in 0..4 {
            assert!((first.omega[i] - omega_ref).abs() < 1e-9);
            assert!((last.omega_n[i] - first.omega_n[i]).abs() < 1e-9);
            assert!((last.v_n[i] - first.v_n[i]).abs() < 1e-9);
            assert!((last.delta[i] - first.delta[i]).abs() < 1e-9);
            assert!(first.v_od[i] > 330.0 && first.v_od[i] < 350.0);
        }
        // Droop products equalized at start.
        let prods: Vec<f64> = (0..4).map(|i| cfg.inverters.m_p[i] * first.p[i]).collect();
        for p in &prods {
            assert_relative_eq!(*p, prods[0], max_relative = 1e-9);
        }
    }

    #[test]
    fn huge_attack_trips_divergence_detector() {
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.solver.t_end = 5.0;
        for a in &mut cfg.attacks {
            a.start_time = 0.5;
            a.shape = crate::attacks::AttackShape::Ramp { slope: 50.0 };
        }
        let trace = run(&cfg).unwrap();
        let div = trace.divergence.expect("must diverge");
        assert!(div.time > 0.5 && div.time < 5.0);
        assert!(matches!(
            div.reason,
            DivergenceReason::FrequencyDeviation { .. } | DivergenceReason::VoltageRange { .. }
        ));
        // Trace ends at the divergence mark.
        assert!(trace.samples.last().unwrap().time <= div.time);
    }

    #[test]
    fn chi_is_nondecreasing_in_resilient_mode() {
        let mut cfg = single_preset("case1_resilient").unwrap();
        cfg.solver.dt = 1e-4;
        cfg.solver.record_every = 100;
        cfg.solver.t_end = 3.0;
        for a in &mut cfg.attacks {
            a.start_time = 0.5;
        }
        let trace = run(&cfg).unwrap();
        for i in 0..4 {
            let mut prev = 0.0;
            for s in &trace.samples {
                assert!(s.chi_f[i] >= prev - 1e-15);
                prev = s.chi_f[i];
            }
            assert!(
                trace.samples.last().unwrap().chi_f[i] > trace.samples[0].chi_f[i],
                "chi must grow while disagreement persists"
            );
        }
    }

    #[test]
    fn halving_dt_leaves_short_resilient_trace_unchanged() {
        let mut cfg = single_preset("case1_resilient").unwrap();
        cfg.controller.beta_f = vec![3.5; 4];
        for a in &mut cfg.attacks {
            a.start_time = 0.5;
        }
        cfg.solver.t_end = 2.0;
        cfg.solver.dt = 1e-5;
        cfg.solver.record_every = 1000;
        let coarse = run(&cfg).unwrap();
        cfg.solver.dt = 5e-6;
        cfg.solver.record_every = 2000;
        let fine = run(&cfg).unwrap();
        assert_eq!(coarse.samples.len(), fine.samples.len());
        let mut sup = 0.0f64;
        for (a, b) in coarse.samples.iter().zip(&fine.samples) {
            assert!((a.time - b.time).abs() < 1e-12);
            for i in 0..4 {
                sup = sup.max((a.omega_n[i] - b.omega_n[i]).abs());
            }
        }
        assert!(sup < 1e-4, "sup-norm difference {sup}");
    }

    #[test]
    fn unreachable_initial_graph_is_rejected() {
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.graph.pin_upper = vec![0.0; 4];
        cfg.graph.pin_lower = vec![0.0; 4];
        let err = run(&cfg).unwrap_err();
        assert!(matches!(err, EngineError::InvalidScenario(_)));
    }
}
