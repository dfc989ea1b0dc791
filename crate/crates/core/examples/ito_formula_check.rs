//! Pathwise Ito formula for u(m) = <x, m>^2 along a jump-diffusion flow,
//! term by term, at a coarse and a fine resolution.

use mflab::ito::{dyadic_partition, partition_decomposition, verify_ito};
use mflab::sde::{CoefficientSpec, ModelConfig};
use mflab::{simulate, CylindricalFunctional};

fn main() -> mflab::Result<()> {
    let cfg = ModelConfig {
        horizon: 1.0,
        initial: vec![1.0],
        initial_weights: None,
        drift: CoefficientSpec::Constant(0.0),
        sigma: CoefficientSpec::Constant(0.5),
        sigma0: CoefficientSpec::Constant(0.5),
        gamma: CoefficientSpec::Constant(1.0),
        gamma0: CoefficientSpec::Constant(0.0),
        intensity: CoefficientSpec::Constant(1.0),
        intensity_bound: None,
        common_intensity: CoefficientSpec::Constant(0.0),
        common_intensity_bound: None,
        jump_law: mflab::sde::DiscreteLaw::dirac(1.0),
        common_jump_law: mflab::sde::DiscreteLaw::dirac(1.0),
    };
    let spec = cfg.build()?;
    let u = CylindricalFunctional::power_of_mean(2);

    for (n, dt) in [(100, 0.01), (1600, 0.0025)] {
        let path = simulate(&spec, n, dt, 3)?;
        let b = verify_ito(&u, &path, 1.0)?;
        println!("N = {n}, dt = {dt}");
        println!("  u(m_T) - u(m_0)      {:+.6}", b.lhs);
        println!("  jump sum             {:+.6}", b.jump_sum);
        println!("  idiosyncratic jumps  {:+.6}", b.idio_jump_term);
        println!("  drift                {:+.6}", b.drift_term);
        println!("  diffusion            {:+.6}", b.diffusion_term);
        println!("  common covariation   {:+.6}", b.covariation_term);
        println!("  residual             {:+.3e}", b.residual);

        let d = partition_decomposition(&u, &path, &dyadic_partition(1.0, 6))?;
        println!("  telescoping on 64 intervals: {:.1e}", d.telescoping_check);
    }
    Ok(())
}
