// Dev-only probe for tuning preset step sizes. Usage:
//   cargo run --release -p mgsim-core --example probe -- <preset> <dt> <t_end> [beta_f]
use mgsim_core::analysis::{
    frequency_decrease_threshold, lyapunov_monitor, lyapunov_violation_fraction,
};
use mgsim_core::report::summarize;
use mgsim_core::scenario::single_preset;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let preset_name = args.get(1).map(String::as_str).unwrap_or("case1_resilient");
    let dt: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-6);
    let t_end: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(30.0);
    let beta_f: Option<f64> = args.get(4).map(|s| s.parse().unwrap());

    let mut cfg = single_preset(preset_name).unwrap();
    cfg.solver.dt = dt;
    cfg.solver.t_end = t_end;
    cfg.solver.record_every = ((0.01 / dt).round() as usize).max(1);
    if let Some(b) = beta_f {
        cfg.controller.beta_f = vec![b; cfg.n()];
    }
    if let Some(flags) = args.get(5) {
        if flags.contains("noattack") {
            cfg.attacks.clear();
        }
        if flags.contains("cold") {
            cfg.initial.steady_state = false;
        }
    }

    let start = std::time::Instant::now();
    let trace = mgsim_core::run(&cfg).unwrap();
    let wall = start.elapsed().as_secs_f64();
    let steps = (t_end / dt) as u64;
    println!(
        "preset={preset_name} dt={dt:.2e} t_end={t_end} steps={steps} wall={wall:.2}s ({:.0} steps/s)",
        steps as f64 / wall
    );
    if let Some(d) = &trace.divergence {
        println!("DIVERGED at t={:.4}: {}", d.time, d.reason);
    }
    let last = trace.samples.last().unwrap();
    println!(
        "chi_f_end={:?}\nchi_v_end={:?}",
        last.chi_f
            .iter()
            .map(|x| format!("{x:.1}"))
            .collect::<Vec<_>>(),
        last.chi_v
            .iter()
            .map(|x| format!("{x:.1}"))
            .collect::<Vec<_>>()
    );
    let zmax = |z: &Vec<f64>| z.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    println!(
        "zeta_f_end={:.4e} zeta_v_end={:.4e}",
        zmax(&last.zeta_f),
        zmax(&last.zeta_v)
    );
    let s = summarize(&trace);
    println!(
        "tail_freq_dev_hz={:?} tail_v=[{:?},{:?}] spread={:?} lyap={:?}",
        s.tail_max_freq_dev_hz,
        s.tail_v_od_min,
        s.tail_v_od_max,
        s.tail_power_spread_max,
        s.lyapunov_violation_fraction
    );
    if trace.completed() {
        if let Some(m) = trace.epochs[0].matrices.as_ref() {
            let mon = lyapunov_monitor(&trace, m);
            if let Some(th) = frequency_decrease_threshold(&trace) {
                for tmin in [10.0_f64, 15.0, 20.0, 25.0] {
                    if tmin < t_end {
                        println!(
                            "lyap_violation(t>={tmin}) = {:.4}",
                            lyapunov_violation_fraction(&mon, th, tmin)
                        );
                    }
                }
            }
            println!("t, E, dEdt, zeta_f_inf, chi_f_1, zeta_v_inf, chi_v_1");
            for s in mon.iter() {
                let frac = s.time / t_end * 16.0;
                if (frac - frac.round()).abs() < 1e-9 {
                    let samp = trace
                        .samples
                        .iter()
                        .find(|x| (x.time - s.time).abs() < 1e-9)
                        .unwrap();
                    let zv = samp.zeta_v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
                    println!(
                        "{:.3}, {:.6e}, {:+.3e}, {:.4e}, {:.1}, {:.4e}, {:.1}",
                        s.time, s.energy, s.d_energy_dt, s.zeta_inf_norm, samp.chi_f[0], zv, samp.chi_v[0]
                    );
                }
            }
        }
    }
}
