//! The flat derivative of a cylindrical functional, checked against the
//! interpolation identity and against finite differences.

use mflab::functional::{check_derivative_consistency, check_flat_identity, flat_identity_nodes, FunctionalSpec};
use mflab::measure::EmpiricalMeasure;
use mflab::oracle::midpoint_flat_identity;

const SPEC: &str = r#"
outer = "tanh"
inner = [[0.0, 1.0], [1.0, 0.0, 0.5]]
terms = [{ exponents = [2, 0], coef = 1.0 }, { exponents = [1, 1], coef = -0.3 }]
"#;

fn main() -> mflab::Result<()> {
    let spec: FunctionalSpec = toml::from_str(SPEC).expect("valid spec");
    let u = spec.build()?;
    let m0 = EmpiricalMeasure::new([(-0.5, 0.25), (0.2, 0.25), (1.1, 0.5)])?;
    let m1 = EmpiricalMeasure::new([(0.0, 0.5), (0.7, 0.5)])?;

    println!("u(m0) = {:.10}, u(m1) = {:.10}", u.value(&m0), u.value(&m1));
    let residual = check_flat_identity(&u, &m0, &m1, flat_identity_nodes(&u));
    println!("interpolation identity, Gauss-Legendre: {residual:.3e}");
    for cells in [4, 16, 64] {
        println!("  midpoint rule with {cells:>2} cells: {:.3e}", midpoint_flat_identity(&u, &m0, &m1, cells));
    }

    let f = u.at(&m0);
    println!("flat derivative at x = 0.4: {:.8}", f.flat(0.4));
    println!("its x-derivative:           {:.8}", f.dx_flat(0.4));
    for h in [1e-2, 1e-3] {
        let r = check_derivative_consistency(&u, &m0, 0.4, -0.2, h)?;
        println!("finite differences, h = {h:e}: max error {:.3e}", r.max_error());
    }
    Ok(())
}
