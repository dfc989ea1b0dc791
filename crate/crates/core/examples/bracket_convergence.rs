//! Partition sums of H (dX)^2 against the bracket, for a diffusion and
//! for a pure-jump system.

use mflab::ito::{bracket_convergence_check, dyadic_partition, with_jump_times};
use mflab::{simulate, Coefficient, EmpiricalMeasure, ModelSpec};

fn main() -> mflab::Result<()> {
    let mut diff = ModelSpec::new(1.0, EmpiricalMeasure::dirac(0.0));
    diff.sigma = Coefficient::Constant(1.0);
    let path = simulate(&diff, 200, 1.0 / 1024.0, 5)?;
    let grids: Vec<Vec<f64>> = (2..=10).step_by(2).map(|l| dyadic_partition(1.0, l)).collect();
    println!("diffusion, H = 1:");
    for r in bracket_convergence_check(&Coefficient::Constant(1.0), &path, &grids)? {
        println!("  {:>5} intervals  sum {:.5}  limit {:.5}  gap {:.2e}  band {:.2e}", r.intervals, r.partition_sum, r.limit, r.gap, r.band);
    }

    let jumps = ModelSpec::new(1.0, EmpiricalMeasure::dirac(0.0)).with_intensity(Coefficient::Constant(2.0));
    let mut jumps = jumps;
    jumps.gamma = Coefficient::Constant(1.0);
    let path = simulate(&jumps, 20, 0.01, 5)?;
    let coarse = dyadic_partition(1.0, 2);
    let rows = bracket_convergence_check(&Coefficient::Constant(1.0), &path, &[coarse.clone(), with_jump_times(&coarse, &path)])?;
    println!("pure jumps:");
    println!("  4 intervals           gap {:.3e}", rows[0].gap);
    println!("  with every jump time  gap {:.3e}", rows[1].gap);
    Ok(())
}
