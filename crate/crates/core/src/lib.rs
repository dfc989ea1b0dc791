pub mod error;
pub mod functional;
pub mod harness;
pub mod ito;
pub mod measure;
pub mod mfc;
pub mod numeric;
pub mod oracle;
pub mod sde;
pub mod streams;
pub mod wentzell;

pub use error::{Error, Result};
pub use functional::CylindricalFunctional;
pub use measure::{Atom, EmpiricalMeasure, Space};
pub use sde::{simulate, Coefficient, ModelSpec, ScenarioPath};
