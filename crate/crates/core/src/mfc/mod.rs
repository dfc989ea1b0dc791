//! Finite-population dynamic programming for mean-field control and
//! mean-field optimal stopping.
//!
//! A measure is represented by an exchangeable configuration of `N`
//! particles on a one-dimensional lattice, keyed as a sorted vector so that
//! tables are symmetric under permutations by construction. Value tables
//! are built backward over a light-cone domain: slice `k` holds every
//! configuration whose one-step moves stay inside slice `k + 1`, so every
//! lookup of the recursion and of the residual checks lands on a stored
//! state.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

pub mod control;
pub mod stopping;

pub use control::{
    dpp_check, hjb_residual, max_hjb_residual, solve_mfc_dp, Control, ControlProblemConfig, ControlProblemSpec,
    HjbResidual, StoppingRule,
};
pub use stopping::{
    apply_stopping, is_dominated, obstacle_residual, solve_stopping_dp, value_monotonicity, MonotonicityReport,
    ObstacleReport, ObstacleTolerance, StoppingProblemConfig, StoppingProblemSpec,
};

/// Tolerance for "the step is a lattice multiple".
const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lattice {
    pub spacing: f64,
    pub step: f64,
    pub steps: usize,
    /// Terminal slice covers `[-half_width, half_width]` in lattice units.
    pub half_width: i32,
    /// Largest one-step displacement in lattice units.
    pub reach: i32,
}

impl Lattice {
    pub(crate) fn new(horizon: f64, step: f64, spacing: f64, points: usize, reach: i32) -> Result<Self> {
        if !(step > 0.0) || !(spacing > 0.0) || !(horizon >= 0.0) {
            return Err(Error::Config("horizon, step and spacing must be positive".into()));
        }
        if points % 2 == 0 {
            return Err(Error::Config(format!("lattice_points must be odd, got {points}")));
        }
        let ratio = horizon / step;
        let steps = ratio.round();
        if (ratio - steps).abs() > UNIT_TOL * ratio.max(1.0) {
            return Err(Error::Config(format!("step {step} does not divide horizon {horizon}")));
        }
        let lattice = Self { spacing, step, steps: steps as usize, half_width: (points / 2) as i32, reach: reach.max(1) };
        if lattice.range(0).0 > lattice.range(0).1 {
            return Err(Error::Config(format!(
                "{points} lattice points cannot hold {} steps of reach {}",
                lattice.steps, lattice.reach
            )));
        }
        Ok(lattice)
    }

    /// Lattice-index range of slice `k`.
    pub fn range(&self, k: usize) -> (i32, i32) {
        let shrink = (self.steps - k) as i32 * self.reach;
        (-self.half_width + shrink, self.half_width - shrink)
    }

    pub fn x(&self, i: i32) -> f64 {
        i as f64 * self.spacing
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.step
    }

    /// Nearest lattice displacement and the rounding error.
    pub(crate) fn round_units(&self, v: f64) -> (i32, f64) {
        let u = (v / self.spacing).round();
        (u as i32, (v - u * self.spacing).abs())
    }

    pub(crate) fn exact_units(spacing: f64, v: f64, what: &str) -> Result<i32> {
        let r = v / spacing;
        if (r - r.round()).abs() > UNIT_TOL * r.abs().max(1.0) {
            return Err(Error::OffLattice(format!("{what} {v} is not a multiple of the spacing {spacing}")));
        }
        Ok(r.round() as i32)
    }
}

/// Default spacing: the smallest positive diffusion step, else the time step.
pub(crate) fn default_spacing(step: f64, sigmas: impl IntoIterator<Item = f64>) -> f64 {
    sigmas
        .into_iter()
        .map(|s| s.abs() * step.sqrt())
        .filter(|&d| d > 0.0)
        .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))))
        .unwrap_or(step)
}

/// Sorted multisets of size `n` drawn from `lo..=hi`, in lexicographic order.
pub fn multisets(lo: i32, hi: i32, n: usize) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    if n == 0 || lo > hi {
        return out;
    }
    let mut cur = vec![lo; n];
    loop {
        out.push(cur.clone());
        let mut i = n;
        while i > 0 && cur[i - 1] == hi {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        let v = cur[i - 1] + 1;
        for c in &mut cur[i - 1..] {
            *c = v;
        }
    }
}

pub(crate) fn multiset_count(values: usize, n: usize) -> u128 {
    // C(values + n - 1, n)
    let mut c: u128 = 1;
    for i in 0..n as u128 {
        c = c * (values as u128 + i) / (i + 1);
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Entry {
    pub value: f64,
    /// Value of continuing from this exact configuration for one step.
    pub continuation: f64,
    /// Index of the optimal control, or the bitmask of alive particles
    /// stopped.
    pub decision: u64,
}

#[derive(Debug, Clone)]
pub struct ValueTable {
    pub lattice: Lattice,
    pub particles: usize,
    /// Keys encode `2 * index + alive` when set.
    pub flagged: bool,
    pub slices: Vec<HashMap<Vec<i32>, Entry>>,
    /// Control values, for labelling decisions.
    pub labels: Vec<f64>,
    /// Largest displacement lost to rounding drift or jump sizes.
    pub rounding_error: f64,
}

impl ValueTable {
    pub fn entry(&self, k: usize, key: &[i32]) -> Result<&Entry> {
        self.slices
            .get(k)
            .and_then(|s| s.get(key))
            .ok_or_else(|| Error::OffLattice(format!("configuration {key:?} not stored at time index {k}")))
    }

    pub fn value(&self, k: usize, key: &[i32]) -> Result<f64> {
        self.entry(k, key).map(|e| e.value)
    }

    pub fn states(&self) -> usize {
        self.slices.iter().map(HashMap::len).sum()
    }

    /// Keys of slice `k` in sorted order.
    pub fn keys(&self, k: usize) -> Vec<Vec<i32>> {
        let mut keys: Vec<_> = self.slices[k].keys().cloned().collect();
        keys.sort();
        keys
    }

    /// The configuration as a measure (flagged when the table is).
    pub fn measure(&self, key: &[i32]) -> EmpiricalMeasure {
        let w = 1.0 / key.len() as f64;
        if self.flagged {
            EmpiricalMeasure::flagged(key.iter().map(|&c| {
                let (i, alive) = decode(c);
                (self.lattice.x(i), alive, w)
            }))
            .expect("non-empty configuration")
        } else {
            EmpiricalMeasure::new(key.iter().map(|&i| (self.lattice.x(i), w))).expect("non-empty configuration")
        }
    }

    /// Columns `config_hash,time_index,configuration,value,argmax`.
    /// Configurations list locations separated by `;`, flagged entries as
    /// `x:flag`. `argmax` is the optimal control value, or the bitmask of
    /// alive particles stopped (bit `j` = `j`-th alive particle in the
    /// listed order).
    pub fn write_csv<W: Write>(&self, out: W, config_hash: &str) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["config_hash", "time_index", "configuration", "value", "argmax"])?;
        for k in 0..self.slices.len() {
            for key in self.keys(k) {
                let e = &self.slices[k][&key];
                let cfg: Vec<String> = key
                    .iter()
                    .map(|&c| {
                        if self.flagged {
                            let (i, alive) = decode(c);
                            format!("{}:{}", self.lattice.x(i), u8::from(alive))
                        } else {
                            format!("{}", self.lattice.x(c))
                        }
                    })
                    .collect();
                let argmax = if self.flagged {
                    e.decision.to_string()
                } else {
                    format!("{}", self.labels[e.decision as usize])
                };
                w.write_record([
                    config_hash.to_string(),
                    k.to_string(),
                    cfg.join(";"),
                    format!("{:e}", e.value),
                    argmax,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn encode(i: i32, alive: bool) -> i32 {
    2 * i + i32::from(alive)
}

pub(crate) fn decode(c: i32) -> (i32, bool) {
    (c.div_euclid(2), c.rem_euclid(2) == 1)
}

pub(crate) fn check_budget(states: u128, budget: usize) -> Result<()> {
    if states > budget as u128 {
        return Err(Error::BudgetExceeded { states: states.min(usize::MAX as u128) as usize, budget });
    }
    Ok(())
}
