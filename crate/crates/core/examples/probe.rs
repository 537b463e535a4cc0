//! Scratch probe for harness tuning (not part of the test suite).

use bql_core::coupled::{run_params_mild, GlueRun, PerturbMode};
use bql_core::problem::{normalize_domain_scale, tp1, tp2};
use bql_core::quasi;
use bql_core::sde::SimConfig;
use bql_core::value::{self, PolicySpec};
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();

    if which == "value" || which.is_empty() {
        let t0 = Instant::now();
        let p = tp1(2);
        let cfg = SimConfig::new(1e-3, 40.0);
        let est = value::estimate_value(
            &p,
            &PolicySpec::all_constant(&p),
            &[0.0, 0.0],
            100_000,
            &cfg,
            42,
        )
        .unwrap();
        println!(
            "TP1 v(0): {} +- {} (exact 0.25, err {:+.5}) in {:?}",
            est.mean,
            est.stderr,
            est.mean - 0.25,
            t0.elapsed()
        );
    }

    if which == "calib" || which.is_empty() {
        for (name, prob) in [("TP1", tp1(2)), ("TP2", tp2(32))] {
            let t0 = Instant::now();
            let norm = normalize_domain_scale(&prob).unwrap();
            match quasi::calibrate_lambda(&norm, 256, 42) {
                Ok((params, cert)) => println!(
                    "{name}: lambda = 2^{:.0}, theta = {}, k1 = {}, margins = {:?}, drift = ({:.2e}, {:.2e}) in {:?}",
                    params.lambda.log2(),
                    params.theta_exp,
                    params.k1,
                    cert.switching_margins,
                    cert.drift_max_strip,
                    cert.drift_max_interior,
                    t0.elapsed()
                ),
                Err(e) => println!("{name}: CALIBRATION FAILED: {e} in {:?}", t0.elapsed()),
            }
        }
    }

    if which == "rep" || which.is_empty() {
        let p = tp1(2);
        let oracle = |x: &[f64]| (1.0 - x.iter().map(|v| v * v).sum::<f64>()) / 4.0;
        for (eps, dt, n) in [(0.0, 1e-3, 30_000u64), (0.1, 1e-3, 30_000), (0.1, 2e-4, 30_000)] {
            let t0 = Instant::now();
            let run = GlueRun {
                params: run_params_mild(),
                eps,
                dt,
                t_max: 8.0,
                xi_cap: 1e3,
                stop_level: 0.125,
                mode: PerturbMode::First,
                control: 0,
            };
            let rep = value::representation_first(
                &p,
                &[0.3, 0.0],
                &[0.0, 1.0],
                eps,
                &run,
                n,
                &oracle,
                7,
            )
            .unwrap();
            println!(
                "rep eps={eps} dt={dt}: lhs {} rhs {} +- {} diff {:+.5} in {:?}",
                rep.lhs,
                rep.rhs.mean,
                rep.rhs.stderr,
                rep.lhs - rep.rhs.mean,
                t0.elapsed()
            );
        }
    }

    if which == "coupling" || which.is_empty() {
        let p = tp1(2);
        for (x0, xi, t_max, dt, stop, cap) in [
            ([0.45, 0.0], [0.0, 1.0], 0.15, 1e-4, 0.3, 20.0),
            ([0.45, 0.0], [0.0, 1.0], 0.3, 1e-4, 0.3, 20.0),
            ([0.3, 0.0], [0.0, 1.0], 0.3, 1e-4, 0.3, 20.0),
        ] {
            let run = GlueRun {
                params: run_params_mild(),
                eps: 0.0,
                dt,
                t_max,
                xi_cap: cap,
                stop_level: stop,
                mode: PerturbMode::First,
                control: 0,
            };
            let t0 = Instant::now();
            let ests =
                value::coupling_first(&p, &x0, &xi, &[0.2, 0.1, 0.05], &run, 4_000, 3).unwrap();
            let vals: Vec<f64> = ests.iter().map(|e| e.mean).collect();
            println!(
                "coupling1 x0={x0:?} xi={xi:?} T={t_max} stop={stop}: [{:.4}, {:.4}, {:.4}] ratio {:.3} in {:?}",
                vals[0], vals[1], vals[2],
                vals[2] / vals[0],
                t0.elapsed()
            );
            let ests = value::coupling_second(
                &p, &x0, &xi, &[0.0, 0.0], &[0.2, 0.1, 0.05], &run, 4_000, 3,
            )
            .unwrap();
            let vals: Vec<f64> = ests.iter().map(|e| e.mean).collect();
            println!("  coupling2: [{:.5}, {:.5}, {:.5}] ratio {:.3}", vals[0], vals[1], vals[2], vals[2] / vals[0]);
        }
    }

    if which == "hjb" || which.is_empty() {
        use bql_core::hjb::{solve, Grid, RegConvention};
        let t0 = Instant::now();
        let p = tp2(32);
        let grid = Grid::new(&p, 1.0 / 64.0).unwrap();
        let sol = solve(&p, &grid, 0.05, RegConvention::Generator, 1e-10).unwrap();
        let q = grid.index_near(&[0.0, 0.0]).unwrap();
        println!(
            "TP2 u(0) = {} (exact 0.5, err {:+.5}), howard {} in {:?}",
            sol.values[q],
            sol.values[q] - 0.5,
            sol.howard_iters,
            t0.elapsed()
        );
    }

    if which == "girsanov" || which.is_empty() {
        use bql_core::coupled::run_coupled;
        use bql_core::linalg::Kahan;
        use bql_core::rng::NoiseStream;
        let p = tp1(2);
        let run = GlueRun {
            params: run_params_mild(),
            eps: 0.1,
            dt: 1e-3,
            t_max: 1.0,
            xi_cap: 1e3,
            stop_level: 0.125,
            mode: PerturbMode::First,
            control: 0,
        };
        let t0 = Instant::now();
        let n = 100_000u64;
        let mut acc = Kahan::new();
        let mut acc2 = Kahan::new();
        for k in 0..n {
            let mut noise = NoiseStream::new(11, k);
            let out =
                run_coupled(&p, &run, &[0.3, 0.0], &[0.0, 1.0], &[0.0, 0.0], &mut noise).unwrap();
            acc.add(out.p_at_tau_cap_one);
            acc2.add(out.p_at_tau_cap_one * out.p_at_tau_cap_one);
        }
        let mean = acc.value() / n as f64;
        let var = acc2.value() / n as f64 - mean * mean;
        println!(
            "E[p at tau^1] = {} +- {} in {:?}",
            mean,
            (var / n as f64).sqrt(),
            t0.elapsed()
        );
    }
}
// temporary instrumentation entry
