//! A random field driven by the common noise, evaluated along the flow.

use mflab::wentzell::{verify_wentzell, FieldTerm, FvDriver, MartDriver, RandomFieldSpec, Schedule};
use mflab::{simulate, Coefficient, CylindricalFunctional, EmpiricalMeasure, ModelSpec};

fn main() -> mflab::Result<()> {
    let mut spec = ModelSpec::new(1.0, EmpiricalMeasure::uniform(&[2.0])?);
    spec.sigma0 = Coefficient::Constant(0.5);
    spec.sigma = Coefficient::Constant(0.2);

    // U(t, m) = <x, m>^2 + int_0^t <x, m> ds + int_0^t 2 <x, m> dW0_s
    let mut field = RandomFieldSpec::constant(CylindricalFunctional::power_of_mean(2));
    field.fv_driver = FvDriver::Time;
    field.mart_driver = MartDriver::CommonBrownian;
    field.fv_terms.push(FieldTerm { schedule: Schedule::constant(1.0), functional: CylindricalFunctional::mean() });
    field.mart_terms.push(FieldTerm { schedule: Schedule::constant(2.0), functional: CylindricalFunctional::mean() });

    for (n, dt) in [(100, 0.01), (400, 0.005), (1600, 0.0025)] {
        let path = simulate(&spec, n, dt, 11)?;
        let w = verify_wentzell(&field, &path, 1.0)?;
        println!(
            "N = {n:>4}  lhs {:+.5}  driver {:+.5} {:+.5}  cross bracket {:+.5}  residual {:+.2e}",
            w.lhs, w.fv_driver_term, w.mart_driver_term, w.cross_bracket_term, w.residual
        );
    }
    Ok(())
}
