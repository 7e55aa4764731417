//! False-data-injection signals on the control input channels, and the
//! smoothness/derivative-bound certification used to decide whether a given
//! adaptive order can neutralize them.
//!
//! Signals are zero before their start time and follow an analytic shape in
//! `s = t − start_time` afterwards. The certification works on the analytic
//! continuation over `[start_time, ∞)`; the switch-on jump in higher
//! derivatives at the activation boundary is an accepted modeling deviation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("signal is not C^{required} under the configured activation")]
    NotSmoothEnough { required: usize },
    #[error("order-{gamma} derivative grows without bound; no finite bound certifies it")]
    UnboundedDerivative { gamma: usize },
    #[error("certification horizon must be finite and reach past the start time")]
    BadHorizon,
}

/// Control loop targeted by an injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Frequency,
    Voltage,
}

/// Analytic waveform in time-since-onset `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackShape {
    /// `c_0 + c_1 s + c_2 s² + …`
    Polynomial { coefficients: Vec<f64> },
    /// `slope · s`
    Ramp { slope: f64 },
    /// `amplitude · sin(angular_frequency · s + phase)`
    Sinusoid {
        amplitude: f64,
        angular_frequency: f64,
        phase: f64,
    },
    Sum { terms: Vec<AttackShape> },
}

impl AttackShape {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            AttackShape::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, &c| acc * s + c)
            }
            AttackShape::Ramp { slope } => slope * s,
            AttackShape::Sinusoid {
                amplitude,
                angular_frequency,
                phase,
            } => amplitude * (angular_frequency * s + phase).sin(),
            AttackShape::Sum { terms } => terms.iter().map(|t| t.value(s)).sum(),
        }
    }

    /// Exact derivative as another shape.
    pub fn derivative(&self) -> AttackShape {
        match self {
            AttackShape::Polynomial { coefficients } => AttackShape::Polynomial {
                coefficients: coefficients
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, &c)| k as f64 * c)
                    .collect(),
            },
            AttackShape::Ramp { slope } => AttackShape::Polynomial {
                coefficients: vec![*slope],
            },
            AttackShape::Sinusoid {
                amplitude,
                angular_frequency,
                phase,
            } => AttackShape::Sinusoid {
                amplitude: amplitude * angular_frequency,
                angular_frequency: *angular_frequency,
                phase: phase + std::f64::consts::FRAC_PI_2,
            },
            AttackShape::Sum { terms } => AttackShape::Sum {
                terms: terms.iter().map(|t| t.derivative()).collect(),
            },
        }
    }

    pub fn nth_derivative(&self, n: usize) -> AttackShape {
        let mut d = self.clone();
        for _ in 0..n {
            d = d.derivative();
        }
        d
    }

    /// Whether the shape stays bounded as `s → ∞`.
    fn bounded_globally(&self) -> bool {
        match self {
            AttackShape::Polynomial { coefficients } => {
                coefficients.iter().skip(1).all(|&c| c == 0.0)
            }
            AttackShape::Ramp { slope } => *slope == 0.0,
            AttackShape::Sinusoid { .. } => true,
            AttackShape::Sum { terms } => terms.iter().all(|t| t.bounded_globally()),
        }
    }

    /// Supremum of `|value|` over `[0, span]`, exact for polynomial and
    /// sinusoid shapes (endpoints plus interior extrema); for sums the
    /// triangle-inequality upper bound is returned.
    fn sup_abs(&self, span: f64) -> f64 {
        match self {
            AttackShape::Polynomial { coefficients } => {
                let poly = coefficients.clone();
                let mut candidates = vec![0.0, span];
                candidates.extend(real_roots_in(&derive_poly(&poly), 0.0, span));
                candidates
                    .into_iter()
                    .map(|s| self.value(s).abs())
                    .fold(0.0, f64::max)
            }
            AttackShape::Ramp { slope } => (slope * span).abs(),
            AttackShape::Sinusoid {
                amplitude,
                angular_frequency,
                phase,
            } => {
                let mut best = self.value(0.0).abs().max(self.value(span).abs());
                if *angular_frequency != 0.0 {
                    // Extrema where the argument hits π/2 + kπ.
                    let w = *angular_frequency;
                    let k_lo = ((w * 0.0 + phase - std::f64::consts::FRAC_PI_2)
                        / std::f64::consts::PI)
                        .floor() as i64
                        - 1;
                    let k_hi = ((w * span + phase - std::f64::consts::FRAC_PI_2)
                        / std::f64::consts::PI)
                        .ceil() as i64
                        + 1;
                    for k in k_lo..=k_hi {
                        let s = (std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI
                            - phase)
                            / w;
                        if s >= 0.0 && s <= span {
                            best = best.max(amplitude.abs());
                        }
                    }
                }
                best
            }
            AttackShape::Sum { terms } => terms.iter().map(|t| t.sup_abs(span)).sum(),
        }
    }
}

fn derive_poly(coefficients: &[f64]) -> Vec<f64> {
    coefficients
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| k as f64 * c)
        .collect()
}

/// Real roots of a polynomial inside `[lo, hi]`, via the companion-matrix
/// eigenvalues. Degrees here are tiny, so this is exact enough and avoids a
/// bespoke root finder.
fn real_roots_in(coefficients: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut coeffs = coefficients.to_vec();
    while coeffs.last().is_some_and(|&c| c == 0.0) {
        coeffs.pop();
    }
    let deg = coeffs.len().saturating_sub(1);
    if deg == 0 {
        return Vec::new();
    }
    if deg == 1 {
        let r = -coeffs[0] / coeffs[1];
        return if r >= lo && r <= hi { vec![r] } else { vec![] };
    }
    let lead = coeffs[deg];
    let mut companion = nalgebra::DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        companion[(i, deg - 1)] = -coeffs[i] / lead;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|e| e.im.abs() < 1e-9 * (1.0 + e.re.abs()))
        .map(|e| e.re)
        .filter(|&r| r >= lo && r <= hi)
        .collect()
}

/// One injection on a single inverter/channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSignal {
    /// Target inverter, zero-based.
    pub inverter: usize,
    pub channel: Channel,
    /// Time the injection switches on; the signal is identically zero before.
    pub start_time: f64,
    pub shape: AttackShape,
}

impl AttackSignal {
    pub fn evaluate(&self, t: f64) -> f64 {
        if t < self.start_time {
            0.0
        } else {
            self.shape.value(t - self.start_time)
        }
    }
}

/// Certified bound on the order-`gamma` derivative of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBound {
    pub gamma: usize,
    pub kappa: f64,
}

/// Certifies that the signal's order-`gamma` derivative is bounded and
/// returns its supremum over `[start_time, horizon]`.
///
/// Boundedness is required on the whole half-line: a polynomial whose degree
/// exceeds `gamma` has an unbounded derivative of that order no matter the
/// horizon, so no finite constant certifies it.
pub fn certify_assumption2(
    sig: &AttackSignal,
    gamma: usize,
    horizon: f64,
) -> Result<DerivativeBound, AttackError> {
    if !horizon.is_finite() || horizon <= sig.start_time {
        return Err(AttackError::BadHorizon);
    }
    let d = sig.shape.nth_derivative(gamma);
    if !d.bounded_globally() {
        return Err(AttackError::UnboundedDerivative { gamma });
    }
    let span = horizon - sig.start_time;
    Ok(DerivativeBound {
        gamma,
        kappa: d.sup_abs(span),
    })
}
