//! Artifact emission: trace and metrics tables (comma-separated, one header
//! row, time first) and the per-run summary document.
//!
//! Numbers are written with fixed 9-significant-digit scientific formatting
//! so repeated runs of the same scenario produce byte-identical files.

use std::io::Write;

use crate::analysis::{
    containment_series, frequency_decrease_threshold, lyapunov_monitor,
    lyapunov_violation_fraction, power_sharing_spread, ultimate_bound, SignalSelector,
};
use crate::controller::ControlMode;
use crate::engine::SimTrace;
use crate::scenario::TWO_PI;

/// 9 significant digits, scientific; negative zero is normalized.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0.00000000e0".to_string();
    }
    format!("{:.8e}", x)
}

/// Writes the full state/diagnostic trace. Frequencies are reported in Hz;
/// control-channel quantities stay in their native rad/s-based units.
pub fn write_trace_csv(trace: &SimTrace, w: &mut impl Write) -> std::io::Result<()> {
    let n = trace.n();
    let mut header = vec!["time".to_string()];
    let groups: [&str; 16] = [
        "freq_hz", "omega_n_hz", "v_od", "v_n", "p_w", "q_var", "zeta_f", "zeta_v", "lambda_f",
        "lambda_v", "chi_f", "chi_v", "attack_f", "attack_v", "angle_rad", "e_f_hz",
    ];
    for g in groups {
        for i in 1..=n {
            header.push(format!("{g}_{i}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;

    let errors = containment_series(trace).ok();
    for (k, s) in trace.samples.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(format_sig9(s.time));
        for i in 0..n {
            row.push(format_sig9(s.omega[i] / TWO_PI));
        }
        for i in 0..n {
            row.push(format_sig9(s.omega_n[i] / TWO_PI));
        }
        for field in [
            &s.v_od, &s.v_n, &s.p, &s.q, &s.zeta_f, &s.zeta_v, &s.lambda_f, &s.lambda_v,
            &s.chi_f, &s.chi_v, &s.attack_f, &s.attack_v, &s.delta,
        ] {
            for i in 0..n {
                row.push(format_sig9(field[i]));
            }
        }
        for i in 0..n {
            let e = errors
                .as_ref()
                .map(|es| es[k].1.e_f[i] / TWO_PI)
                .unwrap_or(f64::NAN);
            row.push(format_sig9(e));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes the per-sample scalar metrics table.
pub fn write_metrics_csv(trace: &SimTrace, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "time,e_f_norm_rad_s,e_f_max_hz,e_v_norm_v,e_v_max_v,power_spread,zeta_f_inf,zeta_v_inf,lyapunov_energy,lyapunov_de_dt"
    )?;
    let errors = containment_series(trace).ok();
    let lyapunov = trace
        .epochs
        .first()
        .and_then(|e| e.matrices.as_ref())
        .map(|m| lyapunov_monitor(trace, m));
    let m_p = &trace.config.inverters.m_p;
    for (k, s) in trace.samples.iter().enumerate() {
        let (ef_norm, ef_max, ev_norm, ev_max) = errors
            .as_ref()
            .map(|es| {
                let e = &es[k].1;
                (
                    e.e_f_norm(),
                    e.e_f_max_abs() / TWO_PI,
                    e.e_v_norm(),
                    e.e_v_max_abs(),
                )
            })
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
        let (energy, de_dt) = lyapunov
            .as_ref()
            .map(|l| (l[k].energy, l[k].d_energy_dt))
            .unwrap_or((f64::NAN, f64::NAN));
        let zf = s.zeta_f.iter().fold(0.0f64, |a, &z| a.max(z.abs()));
        let zv = s.zeta_v.iter().fold(0.0f64, |a, &z| a.max(z.abs()));
        let row = [
            format_sig9(s.time),
            format_sig9(ef_norm),
            format_sig9(ef_max),
            format_sig9(ev_norm),
            format_sig9(ev_max),
            format_sig9(power_sharing_spread(s, m_p)),
            format_sig9(zf),
            format_sig9(zv),
            format_sig9(energy),
            format_sig9(de_dt),
        ];
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Scalar digest of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub mode: ControlMode,
    pub completed: bool,
    pub diverged_at: Option<f64>,
    pub divergence_reason: Option<String>,
    pub dt: f64,
    pub t_end: f64,
    pub tail_window: (f64, f64),
    pub freq_ultimate_bound_rad_s: Option<f64>,
    pub volt_ultimate_bound_v: Option<f64>,
    pub tail_max_freq_dev_hz: Option<f64>,
    pub tail_v_od_min: Option<f64>,
    pub tail_v_od_max: Option<f64>,
    pub tail_power_spread_max: Option<f64>,
    pub lyapunov_violation_fraction: Option<f64>,
    pub warnings: Vec<String>,
    pub overrides: Vec<String>,
}

pub fn summarize(trace: &SimTrace) -> RunSummary {
    let cfg = &trace.config;
    let t_end = cfg.solver.t_end;
    let tail_lo = t_end - (t_end * 0.5).min(5.0);
    let tail: Vec<&crate::engine::Sample> = trace
        .samples
        .iter()
        .filter(|s| s.time >= tail_lo)
        .collect();
    let completed = trace.completed();
    let omega_ref = cfg.leader_signal().omega_ref;

    let (tail_freq, tail_vmin, tail_vmax, tail_spread) = if completed && !tail.is_empty() {
        let mut f = 0.0f64;
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        let mut spread = 0.0f64;
        for s in &tail {
            for i in 0..trace.n() {
                f = f.max((s.omega[i] - omega_ref).abs() / TWO_PI);
                vmin = vmin.min(s.v_od[i]);
                vmax = vmax.max(s.v_od[i]);
            }
            spread = spread.max(power_sharing_spread(s, &cfg.inverters.m_p));
        }
        (Some(f), Some(vmin), Some(vmax), Some(spread))
    } else {
        (None, None, None, None)
    };

    let lyap = if completed && cfg.controller.mode == ControlMode::Resilient {
        match (
            frequency_decrease_threshold(trace),
            trace.epochs.first().and_then(|e| e.matrices.as_ref()),
        ) {
            (Some(threshold), Some(m)) if trace.epochs.len() == 1 => {
                let samples = lyapunov_monitor(trace, m);
                let t_min = (t_end * 0.5).min(10.0);
                Some(lyapunov_violation_fraction(&samples, threshold, t_min))
            }
            _ => None,
        }
    } else {
        None
    };

    RunSummary {
        name: cfg.name.clone(),
        mode: cfg.controller.mode,
        completed,
        diverged_at: trace.divergence.as_ref().map(|d| d.time),
        divergence_reason: trace.divergence.as_ref().map(|d| d.reason.to_string()),
        dt: cfg.solver.dt,
        t_end,
        tail_window: (tail_lo, t_end),
        freq_ultimate_bound_rad_s: ultimate_bound(trace, SignalSelector::FrequencyError, 0.2)
            .ok()
            .map(|b| b.bound),
        volt_ultimate_bound_v: ultimate_bound(trace, SignalSelector::VoltageError, 0.2)
            .ok()
            .map(|b| b.bound),
        tail_max_freq_dev_hz: tail_freq,
        tail_v_od_min: tail_vmin,
        tail_v_od_max: tail_vmax,
        tail_power_spread_max: tail_spread,
        lyapunov_violation_fraction: lyap,
        warnings: trace.warnings.clone(),
        overrides: Vec::new(),
    }
}

impl RunSummary {
    /// Plain `key = value` rendering.
    pub fn render(&self) -> String {
        let opt = |v: &Option<f64>| match v {
            Some(x) => format_sig9(*x),
            None => "none".to_string(),
        };
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("name", self.name.clone());
        line(
            "mode",
            match self.mode {
                ControlMode::Conventional => "conventional".into(),
                ControlMode::Resilient => "resilient".into(),
            },
        );
        line("completed", self.completed.to_string());
        line("diverged_at", opt(&self.diverged_at));
        line(
            "divergence_reason",
            self.divergence_reason.clone().unwrap_or("none".into()),
        );
        line("dt", format_sig9(self.dt));
        line("t_end", format_sig9(self.t_end));
        line(
            "tail_window",
            format!(
                "{}..{}",
                format_sig9(self.tail_window.0),
                format_sig9(self.tail_window.1)
            ),
        );
        line(
            "freq_ultimate_bound_rad_s",
            opt(&self.freq_ultimate_bound_rad_s),
        );
        line("volt_ultimate_bound_v", opt(&self.volt_ultimate_bound_v));
        line("tail_max_freq_dev_hz", opt(&self.tail_max_freq_dev_hz));
        line("tail_v_od_min", opt(&self.tail_v_od_min));
        line("tail_v_od_max", opt(&self.tail_v_od_max));
        line("tail_power_spread_max", opt(&self.tail_power_spread_max));
        line(
            "lyapunov_violation_fraction",
            opt(&self.lyapunov_violation_fraction),
        );
        line("warnings", self.warnings.len().to_string());
        for wmsg in &self.warnings {
            line("warning", wmsg.clone());
        }
        for o in &self.overrides {
            line("override", o.clone());
        }
        out
    }
}
