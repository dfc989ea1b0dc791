//! Mean-field optimal stopping: per-particle stop decisions, obstacle
//! conditions and monotonicity along the stopping order.

use mflab::mfc::{
    apply_stopping, is_dominated, obstacle_residual, solve_stopping_dp, value_monotonicity, ObstacleTolerance,
    StoppingProblemConfig,
};
use mflab::EmpiricalMeasure;

const PROBLEM: &str = r#"
horizon = 0.025
step = 0.0125
particles = 2
lattice_points = 31
drift = { x = -1.0, bound = 3.0 }
sigma = 0.5
sigma0 = 0.5
terminal = { inner = [[0.0, 1.0]], terms = [{ exponents = [2], coef = 1.0 }] }
"#;

fn main() -> mflab::Result<()> {
    let cfg: StoppingProblemConfig = toml::from_str(PROBLEM).expect("valid problem");
    let spec = cfg.build()?;
    let table = solve_stopping_dp(&spec)?;
    println!("{} configurations", table.states());

    let tol = ObstacleTolerance::default();
    let keys = table.keys(0);
    for key in keys.iter().step_by(keys.len() / 6 + 1) {
        let r = obstacle_residual(&table, &spec, 0, key, tol)?;
        println!(
            "  {:?}  V = {:+.5}  stop mask {}  min D_I V {:+.3e}  gen at optimum {:.3e}",
            key,
            table.value(0, key)?,
            table.entry(0, key)?.decision,
            r.min_stop_gradient,
            r.optimal_generator
        );
    }
    let mono = value_monotonicity(&table)?;
    println!("monotone on {} dominated pairs, {} violations", mono.pairs, mono.violations);

    let m = EmpiricalMeasure::flagged([(-1.0, true, 0.25), (0.0, true, 0.5), (1.0, false, 0.25)])?;
    let stopped = apply_stopping(&m, |x| if x > -0.5 { 0.5 } else { 0.0 })?;
    println!("partial stopping keeps alive mass {:.3}; dominated: {}", stopped.alive_mass(), is_dominated(&stopped, &m));
    Ok(())
}
