//! Single-path Taylor-consistency diagnostic for the coupled system.

use bql_core::coupled::{run_coupled, run_params_mild, GlueRun, PerturbMode};
use bql_core::problem::tp1;
use bql_core::rng::NoiseStream;

fn main() {
    let p = tp1(2);
    for steps in [1usize, 10, 100, 1000] {
        print!("steps {steps:5}:");
        for eps in [0.2, 0.1, 0.05, 0.025, 0.0125] {
            let run = GlueRun {
                params: run_params_mild(),
                eps,
                dt: 1e-4,
                t_max: steps as f64 * 1e-4,
                xi_cap: 1e9,
                stop_level: 1e-9,
                mode: PerturbMode::SecondPair,
                control: 0,
            };
            let mut noise = NoiseStream::new(77, 5);
            let out = run_coupled(&p, &run, &[0.55, 0.0], &[0.0, 1.0], &[0.0, 0.0], &mut noise)
                .unwrap();
            print!("  {:.3e}", out.sup_coupling_second);
        }
        println!();
    }
}
