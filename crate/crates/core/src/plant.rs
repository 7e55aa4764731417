//! Reduced physical layer: droop relations per inverter plus a lossless
//! linearized coupling network that produces active/reactive power from
//! source angles and terminal voltages.
//!
//! Power flows are algebraic: `P`, `Q`, `omega` and `v_od` are recomputed
//! from `(delta, setpoints, loads)` at every evaluation and never integrated
//! on their own.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("droop gain must be positive, got {0}")]
    NonPositiveDroopGain(f64),
    #[error("coupling matrix must be square and match the inverter count")]
    CouplingShape,
    #[error("coupling matrix must be symmetric with zero diagonal and nonnegative weights")]
    CouplingStructure,
    #[error("electrical coupling graph is not connected")]
    Disconnected,
    #[error("load schedule for inverter {0} is empty or not sorted by time")]
    BadSchedule(usize),
    #[error("voltage coupling system is singular")]
    SingularVoltageSystem,
}

/// Droop coefficients of one inverter.
#[derive(Debug, Clone, PartialEq)]
pub struct InverterParams {
    /// P–ω droop gain (rad/s per W).
    pub m_p: f64,
    /// Q–v droop gain (V per var).
    pub n_q: f64,
    /// Informational rating tag.
    pub rating: Option<String>,
}

impl InverterParams {
    pub fn new(m_p: f64, n_q: f64) -> Result<Self, PlantError> {
        if m_p <= 0.0 {
            return Err(PlantError::NonPositiveDroopGain(m_p));
        }
        if n_q <= 0.0 {
            return Err(PlantError::NonPositiveDroopGain(n_q));
        }
        Ok(Self {
            m_p,
            n_q,
            rating: None,
        })
    }
}

/// Piecewise-constant schedule given as sorted `(time, value)` breakpoints.
/// Evaluates to the value of the latest breakpoint at or before `t`, and to
/// zero before the first breakpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant {
    points: Vec<(f64, f64)>,
}

impl PiecewiseConstant {
    pub fn new(points: Vec<(f64, f64)>) -> Option<Self> {
        if points.is_empty() {
            return None;
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return None;
        }
        Some(Self { points })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            points: vec![(0.0, value)],
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self.points.partition_point(|&(tp, _)| tp <= t) {
            0 => 0.0,
            k => self.points[k - 1].1,
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// Lossless linearized electrical coupling plus local load schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectricalNetwork {
    n: usize,
    b_active: DMatrix<f64>,
    b_reactive: DMatrix<f64>,
    load_p: Vec<PiecewiseConstant>,
    load_q: Vec<PiecewiseConstant>,
}

impl ElectricalNetwork {
    pub fn new(
        b_active: DMatrix<f64>,
        b_reactive: DMatrix<f64>,
        load_p: Vec<PiecewiseConstant>,
        load_q: Vec<PiecewiseConstant>,
    ) -> Result<Self, PlantError> {
        let n = b_active.nrows();
        if b_active.ncols() != n || b_reactive.nrows() != n || b_reactive.ncols() != n {
            return Err(PlantError::CouplingShape);
        }
        if load_p.len() != n || load_q.len() != n {
            return Err(PlantError::CouplingShape);
        }
        for m in [&b_active, &b_reactive] {
            for i in 0..n {
                if m[(i, i)] != 0.0 {
                    return Err(PlantError::CouplingStructure);
                }
                for j in 0..n {
                    if m[(i, j)] < 0.0 || m[(i, j)] != m[(j, i)] {
                        return Err(PlantError::CouplingStructure);
                    }
                }
            }
        }
        // A completely zero coupling is the islanded degenerate case (every
        // inverter feeds only its local load) and is allowed; a partially
        // wired coupling must be connected.
        let has_coupling = b_active.iter().any(|&v| v > 0.0);
        if n > 1 && has_coupling && !coupling_connected(&b_active) {
            return Err(PlantError::Disconnected);
        }
        Ok(Self {
            n,
            b_active,
            b_reactive,
            load_p,
            load_q,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn b_active(&self) -> &DMatrix<f64> {
        &self.b_active
    }

    pub fn b_reactive(&self) -> &DMatrix<f64> {
        &self.b_reactive
    }

    pub fn load_p(&self) -> &[PiecewiseConstant] {
        &self.load_p
    }

    pub fn load_q(&self) -> &[PiecewiseConstant] {
        &self.load_q
    }

    /// Active and reactive injections from angles, terminal voltages and the
    /// local loads at time `t`:
    /// `P_i = Σ_j b_active[i,j] (δ_i − δ_j) + load_P_i(t)` and the analogous
    /// expression in `v_od` for `Q`.
    pub fn network_flows(&self, delta: &[f64], v_od: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; self.n];
        let mut q = vec![0.0; self.n];
        for i in 0..self.n {
            let mut pi = self.load_p[i].value(t);
            let mut qi = self.load_q[i].value(t);
            for j in 0..self.n {
                pi += self.b_active[(i, j)] * (delta[i] - delta[j]);
                qi += self.b_reactive[(i, j)] * (v_od[i] - v_od[j]);
            }
            p[i] = pi;
            q[i] = qi;
        }
        (p, q)
    }
}

fn coupling_connected(b: &DMatrix<f64>) -> bool {
    let n = b.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && b[(i, j)] > 0.0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Primary droop relations: `ω_i = ω_ni − m_Pi P_i`, `v_odi = V_ni − n_Qi Q_i`.
pub fn droop_outputs(
    omega_n: &[f64],
    v_n: &[f64],
    p: &[f64],
    q: &[f64],
    params: &[InverterParams],
) -> (Vec<f64>, Vec<f64>) {
    let omega = omega_n
        .iter()
        .zip(p)
        .zip(params)
        .map(|((&on, &pi), ip)| on - ip.m_p * pi)
        .collect();
    let v_od = v_n
        .iter()
        .zip(q)
        .zip(params)
        .map(|((&vn, &qi), ip)| vn - ip.n_q * qi)
        .collect();
    (omega, v_od)
}

/// Angle kinematics relative to the reference frame: `dδ_i/dt = ω_i − ω_ref`.
pub fn plant_derivative(omega: &[f64], omega_ref: f64) -> Vec<f64> {
    omega.iter().map(|&w| w - omega_ref).collect()
}

/// Precomputed solver for the terminal-voltage fixed point.
///
/// The droop relation and the reactive flow equation close on `v_od`:
/// `(I + diag(n_Q) L_r) v_od = V_n − diag(n_Q) load_Q(t)`, where `L_r` is the
/// weighted Laplacian of the reactive coupling. The system matrix is constant
/// per scenario, so its inverse is formed once.
#[derive(Debug, Clone)]
pub struct VoltageSolver {
    inverse: DMatrix<f64>,
}

impl VoltageSolver {
    pub fn new(net: &ElectricalNetwork, params: &[InverterParams]) -> Result<Self, PlantError> {
        let n = net.n;
        let degrees = DVector::from_fn(n, |i, _| net.b_reactive.row(i).sum());
        let l_r = DMatrix::from_diagonal(&degrees) - &net.b_reactive;
        let n_q = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| params[i].n_q));
        let system = DMatrix::identity(n, n) + n_q * l_r;
        let inverse = system
            .try_inverse()
            .ok_or(PlantError::SingularVoltageSystem)?;
        Ok(Self { inverse })
    }

    /// Inverse of the constant voltage-coupling system matrix.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// Terminal voltages for the given setpoints and reactive loads.
    pub fn solve_into(
        &self,
        v_n: &[f64],
        load_q: &[f64],
        params: &[InverterParams],
        v_od: &mut [f64],
    ) {
        let n = v_n.len();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.inverse[(i, j)] * (v_n[j] - params[j].n_q * load_q[j]);
            }
            v_od[i] = acc;
        }
    }
}

/// Algebraic plant outputs at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantOutputs {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub omega: Vec<f64>,
    pub v_od: Vec<f64>,
}

/// Evaluates the full algebraic output chain: flows from angles, terminal
/// voltages from the reactive fixed point, then the droop relations.
pub fn plant_outputs(
    delta: &[f64],
    omega_n: &[f64],
    v_n: &[f64],
    params: &[InverterParams],
    net: &ElectricalNetwork,
    solver: &VoltageSolver,
    t: f64,
) -> PlantOutputs {
    let n = delta.len();
    let load_q: Vec<f64> = (0..n).map(|i| net.load_q[i].value(t)).collect();
    let mut v_od = vec![0.0; n];
    solver.solve_into(v_n, &load_q, params, &mut v_od);
    let (p, q) = net.network_flows(delta, &v_od, t);
    let omega: Vec<f64> = (0..n).map(|i| omega_n[i] - params[i].m_p * p[i]).collect();
    PlantOutputs { p, q, omega, v_od }
}
