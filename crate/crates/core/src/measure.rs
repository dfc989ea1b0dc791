//! Finitely supported probability measures on the line and on the flagged
//! space `R x {0, 1}` used by the stopping problems.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;

/// Locations closer than this are merged into one atom.
pub const MERGE_TOL: f64 = 1e-12;
/// Allowed deviation of the total mass from 1.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Line,
    Flagged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub x: f64,
    /// Always `true` on the line.
    pub alive: bool,
    pub weight: f64,
}

/// Weighted atoms in canonical order: sorted by location, then flag
/// (stopped before alive), coincident atoms merged, zero weights dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    space: Space,
    atoms: Vec<Atom>,
}

impl EmpiricalMeasure {
    /// Measure on the line from `(location, weight)` pairs.
    pub fn new(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let atoms = atoms
            .into_iter()
            .map(|(x, weight)| Atom { x, alive: true, weight })
            .collect();
        Self::from_atoms(Space::Line, atoms)
    }

    /// Measure on `R x {0, 1}` from `(location, alive, weight)` triples.
    pub fn flagged(atoms: impl IntoIterator<Item = (f64, bool, f64)>) -> Result<Self> {
        let atoms = atoms
            .into_iter()
            .map(|(x, alive, weight)| Atom { x, alive, weight })
            .collect();
        Self::from_atoms(Space::Flagged, atoms)
    }

    /// Uniform measure over the given locations (repeats add up).
    pub fn uniform(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        let w = 1.0 / xs.len() as f64;
        Self::from_atoms_unchecked_mass(
            Space::Line,
            xs.iter().map(|&x| Atom { x, alive: true, weight: w }).collect(),
        )
    }

    pub fn dirac(x: f64) -> Self {
        Self {
            space: Space::Line,
            atoms: vec![Atom { x, alive: true, weight: 1.0 }],
        }
    }

    pub fn from_atoms(space: Space, atoms: Vec<Atom>) -> Result<Self> {
        for a in &atoms {
            if !a.x.is_finite() || !a.weight.is_finite() {
                return Err(Error::InvalidMeasure(format!("non-finite atom {a:?}")));
            }
            if a.weight < 0.0 {
                return Err(Error::InvalidMeasure(format!("negative weight {}", a.weight)));
            }
        }
        let total = pairwise_sum(&atoms.iter().map(|a| a.weight).collect::<Vec<_>>());
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!("total mass {total} != 1")));
        }
        Self::from_atoms_unchecked_mass(space, atoms)
    }

    fn from_atoms_unchecked_mass(space: Space, mut atoms: Vec<Atom>) -> Result<Self> {
        if space == Space::Line {
            for a in atoms.iter_mut() {
                a.alive = true;
            }
        }
        atoms.retain(|a| a.weight > 0.0);
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("no atoms with positive weight".into()));
        }
        atoms.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.alive.cmp(&b.alive)));
        Ok(Self { space, atoms: merge_sorted(atoms) })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `sum_i w_i f(x_i)` with pairwise accumulation.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        let terms: Vec<f64> = self.atoms.iter().map(|a| a.weight * f(a.x)).collect();
        pairwise_sum(&terms)
    }

    pub fn moment(&self, k: u32) -> f64 {
        self.integrate(|x| x.powi(k as i32))
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn second_moment(&self) -> f64 {
        self.moment(2)
    }

    /// Mass carried by atoms with the alive flag set.
    pub fn alive_mass(&self) -> f64 {
        let w: Vec<f64> = self.atoms.iter().filter(|a| a.alive).map(|a| a.weight).collect();
        pairwise_sum(&w)
    }

    /// Order-1 or order-2 Wasserstein distance between two measures on the
    /// line, through the quantile coupling.
    pub fn wasserstein(&self, other: &Self, order: u32) -> Result<f64> {
        if self.space != other.space {
            return Err(Error::SupportMismatch("line vs flagged space"));
        }
        if self.space == Space::Flagged {
            return Err(Error::UnsupportedTransport(
                "quantile coupling needs measures on the line; use flagged_wasserstein2".into(),
            ));
        }
        if order != 1 && order != 2 {
            return Err(Error::InvalidArgument(format!("order {order} not in {{1, 2}}")));
        }
        let (a, b) = (&self.atoms, &other.atoms);
        let (mut i, mut j) = (0, 0);
        let (mut ca, mut cb) = (a[0].weight, b[0].weight);
        let mut prev = 0.0;
        let mut terms = Vec::with_capacity(a.len() + b.len());
        loop {
            let next = ca.min(cb);
            let d = (a[i].x - b[j].x).abs();
            let cost = if order == 1 { d } else { d * d };
            terms.push(cost * (next - prev));
            prev = next;
            // Advance whichever cumulative weight was reached; both on ties.
            let adv_a = ca <= cb && i + 1 < a.len();
            let adv_b = cb <= ca && j + 1 < b.len();
            if !adv_a && !adv_b {
                break;
            }
            if adv_a {
                i += 1;
                ca += a[i].weight;
            }
            if adv_b {
                j += 1;
                cb += b[j].weight;
            }
        }
        let cost = pairwise_sum(&terms).max(0.0);
        Ok(if order == 1 { cost } else { cost.sqrt() })
    }

    /// `(1 - lambda) self + lambda other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::MixOutOfRange(lambda));
        }
        if self.space != other.space {
            return Err(Error::SupportMismatch("mixing line and flagged measures"));
        }
        if lambda == 0.0 {
            return Ok(self.clone());
        }
        if lambda == 1.0 {
            return Ok(other.clone());
        }
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom { weight: (1.0 - lambda) * a.weight, ..*a })
            .chain(other.atoms.iter().map(|a| Atom { weight: lambda * a.weight, ..*a }))
            .collect();
        Self::from_atoms_unchecked_mass(self.space, atoms)
    }

    /// Image measure under `x -> f(x)`; flags and weights are kept.
    pub fn pushforward(&self, f: impl Fn(f64) -> f64) -> Self {
        let atoms = self.atoms.iter().map(|a| Atom { x: f(a.x), ..*a }).collect();
        Self::from_atoms_unchecked_mass(self.space, atoms)
            .expect("pushforward preserves positive mass")
    }

    /// Order-2 distance on `R x {0, 1}` with ground cost
    /// `|x - y|^2 + 1{flags differ}`.
    ///
    /// Solved as an assignment problem, so both measures must have weights
    /// on a common `1/n` grid with `n <= 64`.
    pub fn flagged_wasserstein2(&self, other: &Self) -> Result<f64> {
        if self.space != other.space {
            return Err(Error::SupportMismatch("line vs flagged space"));
        }
        let n = common_denominator(&self.atoms, &other.atoms).ok_or_else(|| {
            Error::UnsupportedTransport("weights are not multiples of a common 1/n, n <= 64".into())
        })?;
        let lhs = expand(&self.atoms, n);
        let rhs = expand(&other.atoms, n);
        let cost: Vec<Vec<f64>> = lhs
            .iter()
            .map(|a| {
                rhs.iter()
                    .map(|b| {
                        let d = a.x - b.x;
                        d * d + if a.alive != b.alive { 1.0 } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let assignment = hungarian(&cost);
        let terms: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
        Ok((pairwise_sum(&terms) / n as f64).sqrt())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        match self.space {
            Space::Line => {
                w.write_record(["location", "weight"])?;
                for a in &self.atoms {
                    w.write_record([format!("{:e}", a.x), format!("{:e}", a.weight)])?;
                }
            }
            Space::Flagged => {
                w.write_record(["location", "weight", "alive"])?;
                for a in &self.atoms {
                    w.write_record([
                        format!("{:e}", a.x),
                        format!("{:e}", a.weight),
                        (a.alive as u8).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`write_csv`](Self::write_csv); a third
    /// column selects the flagged space.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let flagged = r.headers()?.len() >= 3;
        let mut atoms = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::InvalidMeasure(format!("bad field {i} in {rec:?}")))
            };
            let alive = if flagged { field(2)? != 0.0 } else { true };
            atoms.push(Atom { x: field(0)?, weight: field(1)?, alive });
        }
        Self::from_atoms(if flagged { Space::Flagged } else { Space::Line }, atoms)
    }
}

fn merge_sorted(atoms: Vec<Atom>) -> Vec<Atom> {
    let mut out: Vec<Atom> = Vec::with_capacity(atoms.len());
    for a in atoms {
        match out.last_mut() {
            Some(last) if last.alive == a.alive && (a.x - last.x).abs() <= MERGE_TOL => {
                last.weight += a.weight;
            }
            _ => out.push(a),
        }
    }
    out
}

fn common_denominator(a: &[Atom], b: &[Atom]) -> Option<usize> {
    (1..=64).find(|&n| {
        a.iter().chain(b).all(|atom| {
            let k = atom.weight * n as f64;
            (k - k.round()).abs() < 1e-9
        })
    })
}

fn expand(atoms: &[Atom], n: usize) -> Vec<Atom> {
    atoms
        .iter()
        .flat_map(|a| {
            let k = (a.weight * n as f64).round() as usize;
            std::iter::repeat_n(Atom { weight: 1.0 / n as f64, ..*a }, k)
        })
        .collect()
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// potentials). Returns the column assigned to each row.
pub(crate) fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> EmpiricalMeasure {
        EmpiricalMeasure::new([(0.0, 0.5), (2.0, 0.5)]).unwrap()
    }

    #[test]
    fn moments() {
        let m = two_point();
        assert_eq!(m.moment(1), 1.0);
        assert_eq!(m.moment(2), 2.0);
        assert_eq!(m.moment(0), 1.0);
        let u = EmpiricalMeasure::uniform(&[1.0, 2.0, 3.0]).unwrap();
        assert!((u.moment(1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_shifts() {
        let a = EmpiricalMeasure::dirac(0.0);
        let b = EmpiricalMeasure::dirac(1.0);
        assert_eq!(a.wasserstein(&b, 2).unwrap(), 1.0);
        let c = EmpiricalMeasure::uniform(&[0.0, 2.0]).unwrap();
        let d = EmpiricalMeasure::uniform(&[1.0, 3.0]).unwrap();
        assert_eq!(c.wasserstein(&d, 2).unwrap(), 1.0);
        assert_eq!(c.wasserstein(&d, 1).unwrap(), 1.0);
        assert!(c.wasserstein(&d, 3).is_err());
    }

    #[test]
    fn wasserstein_unequal_weights() {
        // half of the mass at 0 moves to 1, the rest stays.
        let a = EmpiricalMeasure::dirac(0.0);
        let b = EmpiricalMeasure::new([(0.0, 0.5), (1.0, 0.5)]).unwrap();
        assert!((a.wasserstein(&b, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((a.wasserstein(&b, 2).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn space_mismatch_is_an_error() {
        let a = EmpiricalMeasure::dirac(0.0);
        let b = EmpiricalMeasure::flagged([(0.0, true, 1.0)]).unwrap();
        assert!(matches!(a.wasserstein(&b, 2), Err(Error::SupportMismatch(_))));
        assert!(a.mix(&b, 0.5).is_err());
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let a = EmpiricalMeasure::dirac(0.0);
        let b = EmpiricalMeasure::dirac(1.0);
        assert_eq!(a.mix(&b, 0.0).unwrap(), a);
        assert_eq!(a.mix(&b, 1.0).unwrap(), b);
        let mid = a.mix(&b, 0.5).unwrap();
        assert_eq!(mid, EmpiricalMeasure::new([(0.0, 0.5), (1.0, 0.5)]).unwrap());
        assert!(matches!(a.mix(&b, 1.5), Err(Error::MixOutOfRange(_))));
    }

    #[test]
    fn pushforward_cases() {
        let m = two_point();
        assert_eq!(m.pushforward(|x| x), m);
        assert_eq!(
            m.pushforward(|x| x + 1.0),
            EmpiricalMeasure::new([(1.0, 0.5), (3.0, 0.5)]).unwrap()
        );
        let sym = EmpiricalMeasure::uniform(&[-1.0, 1.0]).unwrap();
        assert_eq!(sym.pushforward(|x| x * x), EmpiricalMeasure::dirac(1.0));
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(EmpiricalMeasure::new([(0.0, 0.5)]).is_err());
        assert!(EmpiricalMeasure::new([(0.0, 1.5), (1.0, -0.5)]).is_err());
        assert!(EmpiricalMeasure::uniform(&[]).is_err());
    }

    #[test]
    fn canonical_order_makes_equal_measures_equal() {
        let a = EmpiricalMeasure::uniform(&[3.0, 1.0, 2.0]).unwrap();
        let b = EmpiricalMeasure::uniform(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a, b);
        let f = EmpiricalMeasure::flagged([(1.0, true, 0.5), (1.0, false, 0.5)]).unwrap();
        assert!(!f.atoms()[0].alive);
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn flagged_distance() {
        let a = EmpiricalMeasure::flagged([(0.0, true, 0.5), (1.0, true, 0.5)]).unwrap();
        let b = EmpiricalMeasure::flagged([(0.0, false, 0.5), (1.0, true, 0.5)]).unwrap();
        // one half-mass atom changes flag: cost 1 * 1/2
        assert!((a.flagged_wasserstein2(&b).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
        assert_eq!(a.flagged_wasserstein2(&a).unwrap(), 0.0);
        let odd = EmpiricalMeasure::flagged([(0.0, true, 1.0 / std::f64::consts::PI), (1.0, true, 1.0 - 1.0 / std::f64::consts::PI)]).unwrap();
        assert!(odd.flagged_wasserstein2(&a).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = EmpiricalMeasure::flagged([(0.25, true, 0.25), (-1.5, false, 0.75)]).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("location,weight,alive"));
        assert_eq!(EmpiricalMeasure::read_csv(&buf[..]).unwrap(), m);
        let line = two_point();
        let mut buf = Vec::new();
        line.write_csv(&mut buf).unwrap();
        assert_eq!(EmpiricalMeasure::read_csv(&buf[..]).unwrap(), line);
    }
}
