//! Simulate a particle system with idiosyncratic and common noise, both
//! Brownian and Poisson, and print the flow of the empirical mean.

use mflab::sde::{integrability_monitor, simulate, ModelConfig};

const MODEL: &str = r#"
horizon = 1.0
initial = [-1.0, 0.0, 1.0]
drift = { x = -1.0, mean = 0.5, bound = 5.0 }
sigma = 0.3
sigma0 = 0.2
gamma = 0.5
gamma0 = 1.0
intensity = { base = 1.0, mean = 0.25, bound = 2.0 }
intensity_bound = 2.0
common_intensity = 2.0
jump_law = { values = [-1.0, 1.0], probs = [0.5, 0.5] }
common_jump_law = { values = [-0.5, 0.5], probs = [0.5, 0.5] }
"#;

fn main() -> mflab::Result<()> {
    let cfg: ModelConfig = toml::from_str(MODEL).expect("valid model");
    let spec = cfg.build()?;
    let path = simulate(&spec, 500, 0.01, 7)?;

    println!("{} nodes, {} common proposals", path.num_nodes(), path.common.len());
    for e in path.common.iter().filter(|e| e.accepted > 0) {
        println!("  common jump at t = {:.4}, mark {:+.2}", e.time, e.mark);
    }
    println!("{} idiosyncratic jumps", path.particles.jumps().len());
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        let (_, m) = path.empirical_flow(t)?;
        println!("t = {t:.1}  mean {:+.4}  second moment {:.4}", m.mean(), m.second_moment());
    }
    let r = integrability_monitor(&path)?;
    println!("integrability: finite = {}, quadratic variation {:.4}", r.finite, r.quadratic_variation);
    Ok(())
}
