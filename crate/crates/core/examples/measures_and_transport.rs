//! Empirical measures on the line and on the flagged space, and their
//! Wasserstein distances.

use mflab::measure::EmpiricalMeasure;
use mflab::oracle::brute_force_wasserstein;

fn main() -> mflab::Result<()> {
    let xs = [0.3, -1.2, 2.0, 0.3];
    let ys = [1.0, 0.0, -0.5, 1.5];
    let a = EmpiricalMeasure::uniform(&xs)?;
    let b = EmpiricalMeasure::uniform(&ys)?;
    println!("a has {} atoms (repeats merge), mean {:.4}", a.len(), a.mean());

    let w2 = a.wasserstein(&b, 2)?;
    let brute = brute_force_wasserstein(&xs, &ys, 2);
    println!("W2 sorted = {w2:.12}  brute force = {brute:.12}");
    println!("W1 = {:.6}", a.wasserstein(&b, 1)?);

    let mid = a.mix(&b, 0.5)?;
    println!("midpoint mixture: {} atoms, second moment {:.4}", mid.len(), mid.second_moment());

    // Alive / stopped particles live on R x {0, 1}.
    let m = EmpiricalMeasure::flagged([(0.0, true, 0.5), (1.0, false, 0.5)])?;
    let m2 = EmpiricalMeasure::flagged([(0.0, false, 0.5), (1.0, false, 0.5)])?;
    println!("alive mass {} -> {}", m.alive_mass(), m2.alive_mass());
    println!("flagged W2 = {:.6}", m.flagged_wasserstein2(&m2)?);
    Ok(())
}
