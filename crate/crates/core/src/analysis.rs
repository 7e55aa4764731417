//! Post-processing of recorded traces: containment errors, the quadratic
//! disagreement energy and its decrease monitor, ultimate-bound estimates,
//! and power-sharing spread.

use nalgebra::DVector;
use thiserror::Error;

use crate::attacks::{certify_assumption2, Channel};
use crate::controller::LeaderSignal;
use crate::engine::{Sample, SimTrace};
use crate::topology::{CommGraph, GraphMatrices};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("trace terminated by the divergence detector; no tail statistics")]
    DivergedTrace,
    #[error("topology epoch has no usable matrices")]
    MissingMatrices,
}

// ---------------------------------------------------------------------------
// Containment error
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentError {
    /// rad/s per inverter
    pub e_f: DVector<f64>,
    /// V per inverter
    pub e_v: DVector<f64>,
}

impl ContainmentError {
    pub fn e_f_norm(&self) -> f64 {
        self.e_f.norm()
    }

    pub fn e_v_norm(&self) -> f64 {
        self.e_v.norm()
    }

    pub fn e_f_max_abs(&self) -> f64 {
        self.e_f.amax()
    }

    pub fn e_v_max_abs(&self) -> f64 {
        self.e_v.amax()
    }
}

/// Containment error of one recorded sample.
///
/// The reference point combines the pinned leader values (shifted into
/// setpoint space by each node's own droop term) through the inverse of the
/// containment matrix sum: `x − (ΣΦ)⁻¹ Σ_k G_k w_k`. With that reference the
/// recorded disagreement satisfies `ζ = −diag(c) ΣΦ e` identically along any
/// trajectory, which is the linear-algebra identity the monitors rely on.
pub fn containment_error(
    sample: &Sample,
    graph: &CommGraph,
    matrices: &GraphMatrices,
    leaders: &LeaderSignal,
    m_p: &[f64],
    n_q: &[f64],
) -> ContainmentError {
    let n = graph.n_followers();
    let pin_up = graph.pin_upper();
    let pin_lo = graph.pin_lower();

    let mut rhs_f = DVector::zeros(n);
    let mut rhs_v = DVector::zeros(n);
    for i in 0..n {
        let w_f = leaders.omega_ref + m_p[i] * sample.p[i];
        rhs_f[i] = (pin_up[i] + pin_lo[i]) * w_f;
        let shift = n_q[i] * sample.q[i];
        rhs_v[i] =
            pin_up[i] * (leaders.v_upper + shift) + pin_lo[i] * (leaders.v_lower + shift);
    }
    let ref_f = &matrices.phi_sum_inv * rhs_f;
    let ref_v = &matrices.phi_sum_inv * rhs_v;
    let e_f = DVector::from_row_slice(&sample.omega_n) - ref_f;
    let e_v = DVector::from_row_slice(&sample.v_n) - ref_v;
    ContainmentError { e_f, e_v }
}

/// Containment-error series over a whole trace, using the matrices of the
/// topology epoch in force at each sample.
pub fn containment_series(trace: &SimTrace) -> Result<Vec<(f64, ContainmentError)>, AnalysisError> {
    let leaders = trace.config.leader_signal();
    let m_p = &trace.config.inverters.m_p;
    let n_q = &trace.config.inverters.n_q;
    trace
        .samples
        .iter()
        .map(|s| {
            let epoch = trace.epoch_at(s.time);
            let matrices = epoch.matrices.as_ref().ok_or(AnalysisError::MissingMatrices)?;
            Ok((
                s.time,
                containment_error(s, &epoch.graph, matrices, &leaders, m_p, n_q),
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Disagreement energy monitor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSample {
    pub time: f64,
    /// `E = ½ ζᵀ (ΣΦ)⁻¹ ζ`, nonnegative by positive definiteness.
    pub energy: f64,
    /// Finite-difference slope on the recorded grid (central in the
    /// interior, one-sided at the ends).
    pub d_energy_dt: f64,
    pub zeta_inf_norm: f64,
}

/// Energy series of the frequency disagreement vector over a trace with a
/// fixed topology (uses the matrices supplied rather than per-epoch ones).
pub fn lyapunov_monitor(trace: &SimTrace, matrices: &GraphMatrices) -> Vec<LyapunovSample> {
    let energies: Vec<f64> = trace
        .samples
        .iter()
        .map(|s| {
            let zeta = DVector::from_row_slice(&s.zeta_f);
            0.5 * zeta.dot(&(&matrices.phi_sum_inv * &zeta))
        })
        .collect();
    let times: Vec<f64> = trace.samples.iter().map(|s| s.time).collect();
    let m = energies.len();
    (0..m)
        .map(|k| {
            let d_energy_dt = if m < 2 {
                0.0
            } else if k == 0 {
                (energies[1] - energies[0]) / (times[1] - times[0])
            } else if k == m - 1 {
                (energies[m - 1] - energies[m - 2]) / (times[m - 1] - times[m - 2])
            } else {
                (energies[k + 1] - energies[k - 1]) / (times[k + 1] - times[k - 1])
            };
            LyapunovSample {
                time: times[k],
                energy: energies[k],
                d_energy_dt,
                zeta_inf_norm: trace.samples[k]
                    .zeta_f
                    .iter()
                    .fold(0.0f64, |a, &z| a.max(z.abs())),
            }
        })
        .collect()
}

/// Fraction of samples after `t_min` that sit in the theoretical decrease
/// region (`‖ζ‖∞ > zeta_threshold`) yet show increasing energy.
pub fn lyapunov_violation_fraction(
    samples: &[LyapunovSample],
    zeta_threshold: f64,
    t_min: f64,
) -> f64 {
    let in_region: Vec<&LyapunovSample> = samples
        .iter()
        .filter(|s| s.time >= t_min && s.zeta_inf_norm > zeta_threshold)
        .collect();
    if in_region.is_empty() {
        return 0.0;
    }
    let violations = in_region.iter().filter(|s| s.d_energy_dt > 0.0).count();
    violations as f64 / in_region.len() as f64
}

/// Decrease-region threshold `max_i κ_i / β_i` for the frequency channel at
/// the scenario's adaptive order, floored at `1e-9` for the certified-zero
/// case. `None` when some attack cannot be certified at this order.
pub fn frequency_decrease_threshold(trace: &SimTrace) -> Option<f64> {
    let cfg = &trace.config;
    let gamma = cfg.controller.gamma;
    let horizon = cfg.solver.t_end;
    let mut threshold = 0.0f64;
    for sig in cfg.attack_signals() {
        if sig.channel != Channel::Frequency || sig.start_time >= horizon {
            continue;
        }
        let bound = certify_assumption2(&sig, gamma, horizon).ok()?;
        threshold = threshold.max(bound.kappa / cfg.controller.beta_f[sig.inverter]);
    }
    Some(threshold.max(1e-9))
}

// ---------------------------------------------------------------------------
// Ultimate bound
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalSelector {
    /// Euclidean norm of the frequency containment error (rad/s).
    FrequencyError,
    /// Euclidean norm of the voltage containment error (V).
    VoltageError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UltimateBoundEstimate {
    pub bound: f64,
    pub window: (f64, f64),
    pub converged: bool,
}

/// Supremum of a series over `t >= t_lo`.
pub fn sup_over_tail(series: &[(f64, f64)], t_lo: f64) -> f64 {
    series
        .iter()
        .filter(|(t, _)| *t >= t_lo)
        .fold(0.0f64, |acc, &(_, v)| acc.max(v))
}

/// Supremum of the selected error norm over the trailing fraction of the
/// horizon. Refuses traces that were cut short by the divergence detector.
pub fn ultimate_bound(
    trace: &SimTrace,
    selector: SignalSelector,
    window_fraction: f64,
) -> Result<UltimateBoundEstimate, AnalysisError> {
    if trace.divergence.is_some() {
        return Err(AnalysisError::DivergedTrace);
    }
    let t_end = trace.config.solver.t_end;
    let t_lo = t_end * (1.0 - window_fraction.clamp(0.0, 1.0));
    let series: Vec<(f64, f64)> = containment_series(trace)?
        .into_iter()
        .map(|(t, e)| {
            let v = match selector {
                SignalSelector::FrequencyError => e.e_f_norm(),
                SignalSelector::VoltageError => e.e_v_norm(),
            };
            (t, v)
        })
        .collect();
    Ok(UltimateBoundEstimate {
        bound: sup_over_tail(&series, t_lo),
        window: (t_lo, t_end),
        converged: true,
    })
}

// ---------------------------------------------------------------------------
// Power sharing
// ---------------------------------------------------------------------------

/// Relative spread of the droop-weighted active powers:
/// `max_{i,j} |m_i P_i − m_j P_j| / mean(m P)`. Zero when all products agree
/// (including the degenerate all-zero case).
pub fn power_sharing_spread(sample: &Sample, m_p: &[f64]) -> f64 {
    let products: Vec<f64> = sample.p.iter().zip(m_p).map(|(&p, &m)| m * p).collect();
    let max = products.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = products.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    let mean = products.iter().sum::<f64>() / products.len() as f64;
    if spread == 0.0 {
        0.0
    } else {
        spread / mean.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::single_preset;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn ring4_graph() -> CommGraph {
        single_preset("case1_resilient")
            .unwrap()
            .comm_graph()
            .unwrap()
    }

    fn sample_with(omega_n: Vec<f64>, p: Vec<f64>, v_n: Vec<f64>, q: Vec<f64>) -> Sample {
        let n = omega_n.len();
        Sample {
            time: 0.0,
            omega_n,
            v_n,
            omega: vec![0.0; n],
            v_od: vec![0.0; n],
            p,
            q,
            zeta_f: vec![0.0; n],
            zeta_v: vec![0.0; n],
            chi_f: vec![0.0; n],
            chi_v: vec![0.0; n],
            lambda_f: vec![0.0; n],
            lambda_v: vec![0.0; n],
            attack_f: vec![0.0; n],
            attack_v: vec![0.0; n],
            delta: vec![0.0; n],
        }
    }

    const OMEGA_REF: f64 = 2.0 * std::f64::consts::PI * 60.0;

    fn leaders() -> LeaderSignal {
        LeaderSignal {
            omega_ref: OMEGA_REF,
            v_upper: 350.0,
            v_lower: 330.0,
        }
    }

    #[test]
    fn containment_error_vanishes_at_reference_combination() {
        let graph = ring4_graph();
        let m = graph.build_matrices().unwrap();
        let m_p = [9.4e-5, 9.4e-5, 18.8e-5, 18.8e-5];
        let n_q = [1.3e-3, 1.3e-3, 2.6e-3, 2.6e-3];
        // Uniform droop product: the frequency reference point is
        // omega_ref + product for every node.
        let prod = 0.6;
        let p: Vec<f64> = m_p.iter().map(|m| prod / m).collect();
        let omega_n = vec![OMEGA_REF + prod; 4];
        // Voltage reference point with q = 0: (ΣΦ)⁻¹(350 g_up + 330 g_lo).
        let v_ref = [
            350.0 * (2.0 / 3.0) + 330.0 / 3.0,
            340.0,
            350.0 / 3.0 + 330.0 * (2.0 / 3.0),
            340.0,
        ];
        let s = sample_with(omega_n, p, v_ref.to_vec(), vec![0.0; 4]);
        let e = containment_error(&s, &graph, &m, &leaders(), &m_p, &n_q);
        assert!(e.e_f_max_abs() < 1e-10, "e_f = {:?}", e.e_f);
        assert!(e.e_v_max_abs() < 1e-10, "e_v = {:?}", e.e_v);
    }

    #[test]
    fn containment_error_two_node_single_leader() {
        // Leader pins node 1 only; node 2 listens to node 1. A uniform
        // offset from the leader value shows up unchanged in both entries.
        let graph = CommGraph::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let m = graph.build_matrices().unwrap();
        let offset = 0.37;
        let s = sample_with(
            vec![OMEGA_REF + offset, OMEGA_REF + offset],
            vec![0.0, 0.0],
            vec![340.0, 340.0],
            vec![0.0, 0.0],
        );
        let e = containment_error(&s, &graph, &m, &leaders(), &[1e-4; 2], &[1e-3; 2]);
        assert_relative_eq!(e.e_f[0], offset, epsilon = 1e-12);
        assert_relative_eq!(e.e_f[1], offset, epsilon = 1e-12);
    }

    #[test]
    fn energy_of_unit_disagreement_uses_matrix_inverse() {
        let graph = ring4_graph();
        let m = graph.build_matrices().unwrap();
        // ζ = e1: E = ½ [(ΣΦ)⁻¹]_{11} = ½ · 2/3.
        let zeta = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let e = 0.5 * zeta.dot(&(&m.phi_sum_inv * &zeta));
        assert_relative_eq!(e, 0.5 * (2.0 / 3.0), epsilon = 1e-12);
        assert_relative_eq!(m.phi_sum_inv[(0, 0)], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn energy_is_zero_iff_zeta_zero() {
        let graph = ring4_graph();
        let m = graph.build_matrices().unwrap();
        for trial in 0..16u32 {
            let zeta = DVector::from_fn(4, |i, _| ((trial + i as u32) as f64 * 0.37).sin());
            let e = 0.5 * zeta.dot(&(&m.phi_sum_inv * &zeta));
            if zeta.amax() > 0.0 {
                assert!(e > 0.0);
            }
        }
    }

    #[test]
    fn sup_over_tail_monotone_for_nonincreasing_envelope() {
        let series: Vec<(f64, f64)> = (0..100)
            .map(|k| {
                let t = k as f64 * 0.1;
                (t, (-0.3 * t).exp())
            })
            .collect();
        let mut prev = f64::INFINITY;
        for start in [0.0, 2.0, 5.0, 8.0] {
            let b = sup_over_tail(&series, start);
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn spread_examples() {
        let m_p = [1e-4, 1e-4, 2e-4, 2e-4];
        let s = sample_with(vec![0.0; 4], vec![2000.0, 2000.0, 1000.0, 1000.0], vec![0.0; 4], vec![0.0; 4]);
        assert_eq!(power_sharing_spread(&s, &m_p), 0.0);

        let s = sample_with(vec![0.0; 4], vec![2000.0, 2200.0, 1000.0, 1000.0], vec![0.0; 4], vec![0.0; 4]);
        let spread = power_sharing_spread(&s, &m_p);
        assert_relative_eq!(spread, 0.02 / 0.205, epsilon = 1e-12);
    }

    #[test]
    fn diverged_trace_has_no_bound() {
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.solver.t_end = 3.0;
        for a in &mut cfg.attacks {
            a.start_time = 0.2;
            a.shape = crate::attacks::AttackShape::Ramp { slope: 100.0 };
        }
        let trace = crate::engine::run(&cfg).unwrap();
        assert!(trace.divergence.is_some());
        assert!(matches!(
            ultimate_bound(&trace, SignalSelector::FrequencyError, 0.2),
            Err(AnalysisError::DivergedTrace)
        ));
    }

    #[test]
    fn zero_error_trace_has_zero_bound() {
        // Constant consensus trace: bound must be exactly zero.
        let mut cfg = single_preset("case1_conventional").unwrap();
        cfg.network.b_active = vec![0.0; 16];
        cfg.network.b_reactive = vec![0.0; 16];
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
        cfg.solver.t_end = 2.0;
        cfg.initial.steady_state = false;
        let prod = 9.4e-5 * 6000.0;
        cfg.initial.omega_n_hz = Some(vec![60.0 + prod / crate::scenario::TWO_PI; 4]);
        let shift = 1.3e-3 * 1000.0;
        let base = [
            350.0 * (2.0 / 3.0) + 330.0 / 3.0,
            340.0,
            350.0 / 3.0 + 330.0 * (2.0 / 3.0),
            340.0,
        ];
        cfg.initial.v_n = Some(base.iter().map(|b| b + shift).collect());
        let trace = crate::engine::run(&cfg).unwrap();
        let b = ultimate_bound(&trace, SignalSelector::FrequencyError, 0.2).unwrap();
        assert!(b.bound < 1e-9, "bound {}", b.bound);
        assert!(b.converged);
    }

    #[test]
    fn decrease_threshold_for_quadratics_at_gamma_3() {
        let cfg = single_preset("case1_resilient").unwrap();
        let trace = SimTrace {
            config: cfg,
            samples: vec![],
            divergence: None,
            warnings: vec![],
            epochs: vec![],
        };
        // κ = 0 at γ = 3 for quadratic shapes: floored threshold.
        assert_eq!(frequency_decrease_threshold(&trace), Some(1e-9));

        let mut cfg2 = trace.config.clone();
        cfg2.controller.gamma = 1;
        let trace2 = SimTrace {
            config: cfg2,
            samples: vec![],
            divergence: None,
            warnings: vec![],
            epochs: vec![],
        };
        // Quadratics cannot be certified at γ = 1.
        assert_eq!(frequency_decrease_threshold(&trace2), None);
    }
}
