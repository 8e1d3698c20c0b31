use fedtopo::convex::{self, SolverOptions};
use fedtopo::model::{sample_channels, ScenarioConfig};
use fedtopo::sca;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(5);
    let pos_seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let ch_seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(42);
    let config = ScenarioConfig::generate(k, pos_seed);
    let channels = sample_channels(&config, ch_seed).unwrap();
    let mut state = sca::init_stage1(&config, &channels);
    let opts = SolverOptions::with_tol(1e-8);
    for it in 0..40 {
        let program = sca::build_init_subproblem(&state, &config, &channels);
        let mut topts = opts.clone();
        topts.collect_trace = true;
        let sol = convex::solve_with(&program, &topts).unwrap();
        println!(
            "iter {it}: status {:?} obj {:.6e} newton {} outer {} frac {:.3e}",
            sol.status,
            sol.objective,
            sol.newton_iterations,
            sol.outer_iterations,
            sca::max_fractionality(&sol.x[..k * k])
        );
        if sol.status != convex::SolveStatus::Optimal {
            println!("--- trace:\n{}", sol.trace_csv());
            let hint = program.initial.clone().unwrap();
            let mut values: Vec<(usize, f64)> = program
                .constraints
                .iter()
                .enumerate()
                .map(|(i, c)| (i, c.value(&hint)))
                .collect();
            values.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            println!("top constraint values at hint:");
            for (i, v) in values.iter().take(8) {
                println!("  #{i}: {v:.6e}");
            }
            break;
        }
        state = sca::state_from_solution_dbg(&sol.x, &config, &channels, it + 1);
    }
}
