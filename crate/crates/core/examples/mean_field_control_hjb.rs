//! Mean-field control on a particle lattice: backward recursion, HJB
//! residual and the dynamic programming principle.

use mflab::mfc::{dpp_check, max_hjb_residual, solve_mfc_dp, ControlProblemConfig, StoppingRule};

const PROBLEM: &str = r#"
horizon = 0.1
step = 0.025
particles = 3
lattice_points = 15
terminal = { inner = [[0.0, 1.0]], terms = [{ exponents = [1], coef = 1.0 }] }
controls = [{ value = -1.0, drift = -1.0 }, { value = 1.0, drift = 1.0 }]
"#;

fn main() -> mflab::Result<()> {
    let cfg: ControlProblemConfig = toml::from_str(PROBLEM).expect("valid problem");
    let spec = cfg.build()?;
    let table = solve_mfc_dp(&spec)?;
    println!("{} stored configurations over {} steps", table.states(), table.lattice.steps);

    for key in table.keys(0).into_iter().take(5) {
        let e = table.entry(0, &key)?;
        let m = table.measure(&key);
        println!(
            "  {key:?}  V = {:+.6}  mean + T = {:+.6}  control {}",
            e.value,
            m.mean() + spec.horizon,
            table.labels[e.decision as usize]
        );
    }
    for k in 0..table.lattice.steps {
        let r = max_hjb_residual(&table, &spec, k)?;
        println!("HJB residual at step {k}: {:.2e} / {:.2e}", r.sup_inside, r.uniform);
    }
    let key = table.keys(0)[0].clone();
    println!("one-step DPP gap: {:e}", dpp_check(&table, &spec, 0, &key, StoppingRule::Deterministic(1))?);

    println!("first rows of the value table:");
    let mut buf = Vec::new();
    table.write_csv(&mut buf, "example")?;
    for line in String::from_utf8_lossy(&buf).lines().take(4) {
        println!("  {line}");
    }
    Ok(())
}
