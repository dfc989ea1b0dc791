//! Mean-field optimal stopping with common Brownian noise. Particles carry
//! a flag (1 alive, 0 stopped); stopped particles are frozen.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::control::default_budget;
use super::{check_budget, decode, default_spacing, encode, multiset_count, multisets, Entry, Lattice, ValueTable};
use crate::error::{Error, Result};
use crate::functional::{CylindricalFunctional, FunctionalSpec};
use crate::measure::{Atom, EmpiricalMeasure, Space, MASS_TOL, MERGE_TOL};
use crate::numeric::{pairwise_mean, pairwise_sum};
use crate::sde::{Coefficient, CoefficientSpec, FlowCtx};

#[derive(Debug, Clone)]
pub struct StoppingProblemSpec {
    pub drift: Coefficient,
    pub sigma: f64,
    pub sigma0: f64,
    /// Running reward, collected by alive particles.
    pub reward: Coefficient,
    /// Terminal reward on the locations of all particles.
    pub terminal: CylindricalFunctional,
    pub horizon: f64,
    pub step: f64,
    pub spacing: Option<f64>,
    pub particles: usize,
    pub lattice_points: usize,
    pub state_budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingProblemConfig {
    pub horizon: f64,
    pub step: f64,
    #[serde(default)]
    pub spacing: Option<f64>,
    pub particles: usize,
    pub lattice_points: usize,
    #[serde(default = "default_budget")]
    pub state_budget: usize,
    pub terminal: FunctionalSpec,
    #[serde(default)]
    pub drift: CoefficientSpec,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub sigma0: f64,
    #[serde(default)]
    pub reward: CoefficientSpec,
}

impl StoppingProblemConfig {
    pub fn build(&self) -> Result<StoppingProblemSpec> {
        Ok(StoppingProblemSpec {
            drift: self.drift.build(),
            sigma: self.sigma,
            sigma0: self.sigma0,
            reward: self.reward.build(),
            terminal: self.terminal.build()?,
            horizon: self.horizon,
            step: self.step,
            spacing: self.spacing,
            particles: self.particles,
            lattice_points: self.lattice_points,
            state_budget: self.state_budget,
        })
    }
}

struct StoppingModel<'a> {
    spec: &'a StoppingProblemSpec,
    lattice: Lattice,
    diffusion: i32,
    common: i32,
}

fn alive_indices(cfg: &[i32]) -> Vec<usize> {
    (0..cfg.len()).filter(|&i| decode(cfg[i]).1).collect()
}

/// Stop the alive particles selected by `mask` (bit `j` = `j`-th alive one).
fn stop_subset(cfg: &[i32], mask: u64) -> Vec<i32> {
    let mut out = cfg.to_vec();
    for (j, &i) in alive_indices(cfg).iter().enumerate() {
        if mask >> j & 1 == 1 {
            out[i] = encode(decode(cfg[i]).0, false);
        }
    }
    out.sort_unstable();
    out
}

/// Move particle `i` by `d` lattice units, keeping its flag.
fn perturbed(cfg: &[i32], i: usize, d: i32) -> Vec<i32> {
    let mut c = cfg.to_vec();
    let (p, a) = decode(c[i]);
    c[i] = encode(p + d, a);
    c.sort_unstable();
    c
}

impl<'a> StoppingModel<'a> {
    fn new(spec: &'a StoppingProblemSpec) -> Result<Self> {
        if spec.particles == 0 {
            return Err(Error::TooFewParticles(0));
        }
        let h = spec.step;
        let spacing = spec.spacing.unwrap_or_else(|| default_spacing(h, [spec.sigma, spec.sigma0]));
        let diffusion = Lattice::exact_units(spacing, spec.sigma.abs() * h.sqrt(), "diffusion step")?;
        let common = Lattice::exact_units(spacing, spec.sigma0.abs() * h.sqrt(), "common noise step")?;
        let drift = (spec.drift.bound() * h / spacing).round() as i32;
        let lattice = Lattice::new(spec.horizon, h, spacing, spec.lattice_points, drift + diffusion + common)?;
        Ok(Self { spec, lattice, diffusion, common })
    }

    fn positions(&self, cfg: &[i32]) -> Vec<f64> {
        cfg.iter().map(|&c| self.lattice.x(decode(c).0)).collect()
    }

    /// One step of continuation from `cfg` as it stands: reward over the
    /// step and the expected value at `t + h`.
    fn continuation(&self, next: &HashMap<Vec<i32>, Entry>, k: usize, cfg: &[i32]) -> Result<(f64, f64)> {
        let spec = self.spec;
        let h = self.lattice.step;
        let t = self.lattice.time(k);
        let xs = self.positions(cfg);
        let ctx = FlowCtx::new(&xs, spec.drift.uses_measure() || spec.reward.uses_measure());
        let alive = alive_indices(cfg);
        let mut rounding: f64 = 0.0;
        let mut drift = vec![0; cfg.len()];
        let mut rewards = vec![0.0; cfg.len()];
        for &i in &alive {
            let (d, err) = self.lattice.round_units(spec.drift.checked("drift", t, &ctx, xs[i])? * h);
            rounding = rounding.max(err);
            drift[i] = d;
            rewards[i] = spec.reward.checked("reward", t, &ctx, xs[i])?;
        }
        let reward = h * pairwise_mean(&rewards);
        let commons: &[i32] = if self.common > 0 { &[-1, 1] } else { &[0] };
        let idio = if self.diffusion > 0 { 1u64 << alive.len() } else { 1 };
        let p = 1.0 / (commons.len() as u64 * idio) as f64;
        let mut terms = Vec::with_capacity(1 + commons.len() * idio as usize);
        terms.push(reward);
        for &eta in commons {
            for mask in 0..idio {
                let mut moved = cfg.to_vec();
                for (j, &i) in alive.iter().enumerate() {
                    let eps = if self.diffusion == 0 { 0 } else if mask >> j & 1 == 1 { 1 } else { -1 };
                    let (pos, _) = decode(cfg[i]);
                    moved[i] = encode(pos + drift[i] + eps * self.diffusion + eta * self.common, true);
                }
                moved.sort_unstable();
                let v = next
                    .get(&moved)
                    .ok_or_else(|| Error::OffLattice(format!("{moved:?} left the lattice")))?
                    .value;
                terms.push(p * v);
            }
        }
        Ok((pairwise_sum(&terms), rounding))
    }

    fn configs(&self, k: usize) -> Vec<Vec<i32>> {
        let (lo, hi) = self.lattice.range(k);
        multisets(encode(lo, false), encode(hi, true), self.spec.particles)
    }
}

pub fn solve_stopping_dp(spec: &StoppingProblemSpec) -> Result<ValueTable> {
    let model = StoppingModel::new(spec)?;
    let lattice = model.lattice;
    let mut total: u128 = 0;
    for k in 0..=lattice.steps {
        let (lo, hi) = lattice.range(k);
        total += multiset_count(2 * (hi - lo + 1) as usize, spec.particles);
    }
    check_budget(total, spec.state_budget)?;

    let mut slices: Vec<HashMap<Vec<i32>, Entry>> = vec![HashMap::new(); lattice.steps + 1];
    let mut rounding: f64 = 0.0;
    for k in (0..=lattice.steps).rev() {
        let configs = model.configs(k);
        if k == lattice.steps {
            for cfg in configs {
                let v = spec.terminal.value_uniform(&model.positions(&cfg));
                let all = (1u64 << alive_indices(&cfg).len()) - 1;
                slices[k].insert(cfg, Entry { value: v, continuation: v, decision: all });
            }
            continue;
        }
        let next = &slices[k + 1];
        let cont: Vec<(Vec<i32>, f64, f64)> = configs
            .into_par_iter()
            .map(|cfg| -> Result<_> {
                let (c, r) = model.continuation(next, k, &cfg)?;
                Ok((cfg, c, r))
            })
            .collect::<Result<_>>()?;
        let cont_map: HashMap<Vec<i32>, f64> = cont.iter().map(|(k, c, _)| (k.clone(), *c)).collect();
        rounding = cont.iter().fold(rounding, |acc, r| acc.max(r.2));
        let rows: Vec<(Vec<i32>, Entry)> = cont
            .into_par_iter()
            .map(|(cfg, c, _)| {
                let alive = alive_indices(&cfg).len();
                let mut best = (c, 0u64);
                for mask in 1..(1u64 << alive) {
                    let v = cont_map[&stop_subset(&cfg, mask)];
                    if v > best.0 {
                        best = (v, mask);
                    }
                }
                (cfg, Entry { value: best.0, continuation: c, decision: best.1 })
            })
            .collect();
        slices[k].extend(rows);
    }
    Ok(ValueTable { lattice, particles: spec.particles, flagged: true, slices, labels: Vec::new(), rounding_error: rounding })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleTolerance {
    pub c1: f64,
    pub c2: f64,
}

impl Default for ObstacleTolerance {
    fn default() -> Self {
        Self { c1: 1.0, c2: 1.0 }
    }
}

impl ObstacleTolerance {
    pub fn at(&self, h: f64, n: usize) -> f64 {
        self.c1 * h + self.c2 / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObstacleReport {
    pub tolerance: f64,
    /// Smallest `N [V(cfg) - V(cfg with one alive particle stopped)]`;
    /// `+inf` without alive particles.
    pub min_stop_gradient: f64,
    /// Smallest `-LV(m')` over every `m'` reachable by stopping a subset.
    pub min_neg_generator: f64,
    /// `|LV(m*)|` at the configuration chosen by the recursion.
    pub optimal_generator: f64,
    /// `|V(m*) - V(m)|`; zero when `m*` is value preserving.
    pub optimal_value_gap: f64,
    /// Transport cost from `m` to `m*` on the flagged space.
    pub distance_to_optimal: f64,
    pub dominated_checked: usize,
}

impl ObstacleReport {
    pub fn passes(&self) -> bool {
        self.min_stop_gradient >= -self.tolerance
            && self.min_neg_generator >= -self.tolerance
            && self.optimal_generator <= self.tolerance
            && self.optimal_value_gap <= 1e-12 * self.tolerance.max(1.0)
    }
}

/// `LV(t_k, cfg)`: forward time difference plus the generator of alive
/// particles, assembled from one- and two-particle perturbations of the
/// slice at `t + h`. The common-noise cross term sums over distinct alive
/// pairs.
fn generator(table: &ValueTable, spec: &StoppingProblemSpec, k: usize, cfg: &[i32]) -> Result<f64> {
    let lattice = table.lattice;
    let h = lattice.step;
    let d = lattice.spacing;
    let n = cfg.len() as f64;
    let v1 = table.value(k + 1, cfg)?;
    let dt = (v1 - table.value(k, cfg)?) / h;
    let t = lattice.time(k);
    let xs: Vec<f64> = cfg.iter().map(|&c| lattice.x(decode(c).0)).collect();
    let ctx = FlowCtx::new(&xs, spec.drift.uses_measure() || spec.reward.uses_measure());
    let alive = alive_indices(cfg);
    let var = spec.sigma * spec.sigma + spec.sigma0 * spec.sigma0;
    let mut local = vec![0.0; cfg.len()];
    for &i in &alive {
        let up = table.value(k + 1, &perturbed(cfg, i, 1))?;
        let down = table.value(k + 1, &perturbed(cfg, i, -1))?;
        let dx = n * (up - down) / (2.0 * d);
        let dxx = n * (up - 2.0 * v1 + down) / (d * d);
        local[i] = spec.reward.eval(t, &ctx, xs[i]) + spec.drift.eval(t, &ctx, xs[i]) * dx + 0.5 * var * dxx;
    }
    let mut cross = Vec::new();
    if spec.sigma0 != 0.0 {
        for (a, &i) in alive.iter().enumerate() {
            for &j in &alive[a + 1..] {
                let both = |di: i32, dj: i32| -> Result<f64> {
                    let mut c = cfg.to_vec();
                    let (pi, _) = decode(c[i]);
                    let (pj, _) = decode(c[j]);
                    c[i] = encode(pi + di, true);
                    c[j] = encode(pj + dj, true);
                    c.sort_unstable();
                    table.value(k + 1, &c)
                };
                let mixed = n * n * (both(1, 1)? - both(1, -1)? - both(-1, 1)? + both(-1, -1)?) / (4.0 * d * d);
                // Ordered pairs (i, j) and (j, i).
                cross.push(2.0 * mixed);
            }
        }
    }
    let cross_term = 0.5 * spec.sigma0 * spec.sigma0 * pairwise_sum(&cross) / (n * n);
    Ok(dt + pairwise_mean(&local) + cross_term)
}

pub fn obstacle_residual(
    table: &ValueTable,
    spec: &StoppingProblemSpec,
    k: usize,
    cfg: &[i32],
    tol: ObstacleTolerance,
) -> Result<ObstacleReport> {
    if k >= table.lattice.steps {
        return Err(Error::InvalidArgument(format!("time index {k} is not interior")));
    }
    let n = cfg.len() as f64;
    let entry = table.entry(k, cfg)?;
    let alive = alive_indices(cfg);

    let mut min_gradient = f64::INFINITY;
    for j in 0..alive.len() {
        let flipped = table.value(k, &stop_subset(cfg, 1 << j))?;
        min_gradient = min_gradient.min(n * (entry.value - flipped));
    }
    let mut min_neg = f64::INFINITY;
    let subsets = 1u64 << alive.len();
    for mask in 0..subsets {
        min_neg = min_neg.min(-generator(table, spec, k, &stop_subset(cfg, mask))?);
    }
    let optimal = stop_subset(cfg, entry.decision);
    Ok(ObstacleReport {
        tolerance: tol.at(table.lattice.step, cfg.len()),
        min_stop_gradient: min_gradient,
        min_neg_generator: min_neg,
        optimal_generator: generator(table, spec, k, &optimal)?.abs(),
        optimal_value_gap: (table.value(k, &optimal)? - entry.value).abs(),
        distance_to_optimal: table.measure(cfg).flagged_wasserstein2(&table.measure(&optimal))?,
        dominated_checked: subsets as usize,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub pairs: usize,
    pub violations: usize,
    /// Largest `V(m') - V(m)` over dominated pairs.
    pub worst: f64,
}

/// `V(t, m') <= V(t, m)` for every stored `m` and every `m'` obtained by
/// stopping a non-empty subset of its alive particles.
pub fn value_monotonicity(table: &ValueTable) -> Result<MonotonicityReport> {
    let mut report = MonotonicityReport { pairs: 0, violations: 0, worst: f64::NEG_INFINITY };
    for k in 0..table.slices.len() {
        for cfg in table.keys(k) {
            let v = table.value(k, &cfg)?;
            for mask in 1..(1u64 << alive_indices(&cfg).len()) {
                let gap = table.value(k, &stop_subset(&cfg, mask))? - v;
                report.pairs += 1;
                report.worst = report.worst.max(gap);
                if gap > 1e-12 * v.abs().max(1.0) {
                    report.violations += 1;
                }
            }
        }
    }
    Ok(report)
}

/// Keep the alive mass at `x` alive with probability `p(x)`, stop the rest.
pub fn apply_stopping(m: &EmpiricalMeasure, p: impl Fn(f64) -> f64) -> Result<EmpiricalMeasure> {
    if m.space() != Space::Flagged {
        return Err(Error::SupportMismatch("stopping acts on flagged measures"));
    }
    let mut atoms = Vec::with_capacity(2 * m.len());
    for a in m.atoms() {
        if !a.alive {
            atoms.push(*a);
            continue;
        }
        let q = p(a.x);
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::ProbabilityOutOfRange(q));
        }
        atoms.push(Atom { x: a.x, alive: true, weight: q * a.weight });
        atoms.push(Atom { x: a.x, alive: false, weight: (1.0 - q) * a.weight });
    }
    EmpiricalMeasure::from_atoms(Space::Flagged, atoms)
}

/// Alive and stopped mass per location, locations merged within `MERGE_TOL`.
fn masses(m: &EmpiricalMeasure) -> Vec<(f64, f64, f64)> {
    let mut out: Vec<(f64, f64, f64)> = Vec::new();
    for a in m.atoms() {
        match out.last_mut() {
            Some(last) if (a.x - last.0).abs() <= MERGE_TOL => {}
            _ => out.push((a.x, 0.0, 0.0)),
        }
        let last = out.last_mut().expect("pushed above");
        if a.alive {
            last.1 += a.weight;
        } else {
            last.2 += a.weight;
        }
    }
    out
}

/// Whether `m_prime` is obtained from `m` by stopping part of its alive
/// mass, location by location.
pub fn is_dominated(m_prime: &EmpiricalMeasure, m: &EmpiricalMeasure) -> bool {
    if m_prime.space() != Space::Flagged || m.space() != Space::Flagged {
        return false;
    }
    let a = masses(m);
    let b = masses(m_prime);
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let take_a = j == b.len() || (i < a.len() && a[i].0 < b[j].0 - MERGE_TOL);
        let take_b = i == a.len() || (j < b.len() && b[j].0 < a[i].0 - MERGE_TOL);
        let (alive, stopped, alive_p, stopped_p) = if take_a {
            i += 1;
            (a[i - 1].1, a[i - 1].2, 0.0, 0.0)
        } else if take_b {
            j += 1;
            (0.0, 0.0, b[j - 1].1, b[j - 1].2)
        } else {
            i += 1;
            j += 1;
            (a[i - 1].1, a[i - 1].2, b[j - 1].1, b[j - 1].2)
        };
        if alive_p > alive + MASS_TOL || (alive + stopped - alive_p - stopped_p).abs() > MASS_TOL {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drift_example(b: f64, h: f64) -> StoppingProblemSpec {
        StoppingProblemSpec {
            drift: Coefficient::Constant(b),
            sigma: 0.0,
            sigma0: 0.0,
            reward: Coefficient::Constant(0.0),
            terminal: CylindricalFunctional::mean(),
            horizon: 0.1,
            step: h,
            spacing: None,
            particles: 2,
            lattice_points: 11,
            state_budget: 100_000,
        }
    }

    fn mean_and_alive(table: &ValueTable, cfg: &[i32]) -> (f64, f64) {
        let xs: Vec<f64> = cfg.iter().map(|&c| table.lattice.x(decode(c).0)).collect();
        let alive = alive_indices(cfg).len() as f64 / cfg.len() as f64;
        (pairwise_mean(&xs), alive)
    }

    #[test]
    fn negative_drift_stops_everyone() {
        let spec = drift_example(-1.0, 0.025);
        let table = solve_stopping_dp(&spec).unwrap();
        for k in 0..table.lattice.steps {
            for cfg in table.keys(k) {
                let (mean, _) = mean_and_alive(&table, &cfg);
                let e = table.entry(k, &cfg).unwrap();
                assert!((e.value - mean).abs() < 1e-10);
                assert_eq!(e.decision, (1 << alive_indices(&cfg).len()) - 1);
                let r = obstacle_residual(&table, &spec, k, &cfg, ObstacleTolerance::default()).unwrap();
                assert!(r.passes(), "{r:?}");
                assert_eq!(r.optimal_generator, 0.0);
            }
        }
    }

    #[test]
    fn positive_drift_never_stops() {
        let spec = drift_example(1.0, 0.025);
        let table = solve_stopping_dp(&spec).unwrap();
        for k in 0..table.lattice.steps {
            let tau = 0.1 - table.lattice.time(k);
            for cfg in table.keys(k) {
                let (mean, alive) = mean_and_alive(&table, &cfg);
                let e = table.entry(k, &cfg).unwrap();
                assert!((e.value - (mean + tau * alive)).abs() < 1e-10);
                assert_eq!(e.decision, 0);
                let r = obstacle_residual(&table, &spec, k, &cfg, ObstacleTolerance::default()).unwrap();
                assert!(r.passes(), "{r:?}");
                assert!(r.optimal_generator < 1e-9);
            }
        }
        let mono = value_monotonicity(&table).unwrap();
        assert!(mono.pairs > 0 && mono.violations == 0);
    }

    #[test]
    fn constant_reward_is_degenerate() {
        let mut spec = drift_example(0.0, 0.05);
        spec.terminal = CylindricalFunctional::power_of_mean(0);
        let table = solve_stopping_dp(&spec).unwrap();
        for cfg in table.keys(0) {
            let r = obstacle_residual(&table, &spec, 0, &cfg, ObstacleTolerance::default()).unwrap();
            assert_eq!(r.min_neg_generator, 0.0);
            assert_eq!(r.min_stop_gradient.min(0.0), 0.0);
        }
    }

    #[test]
    fn common_noise_problem_is_monotone() {
        let spec = StoppingProblemSpec {
            drift: Coefficient::Affine { base: 0.0, x: -1.0, mean: 0.0, bound: 2.0 },
            sigma: 0.5,
            sigma0: 0.5,
            reward: Coefficient::Constant(0.0),
            terminal: CylindricalFunctional::power_of_mean(2),
            horizon: 0.04,
            step: 0.01,
            spacing: None,
            particles: 2,
            lattice_points: 21,
            state_budget: 100_000,
        };
        let table = solve_stopping_dp(&spec).unwrap();
        assert_eq!(value_monotonicity(&table).unwrap().violations, 0);
        let cfg = table.keys(0)[7].clone();
        let r = obstacle_residual(&table, &spec, 0, &cfg, ObstacleTolerance::default()).unwrap();
        assert!(r.optimal_value_gap <= 1e-12);
    }

    #[test]
    fn stopping_maps() {
        let m = EmpiricalMeasure::flagged([(0.0, true, 0.5), (1.0, true, 0.25), (1.0, false, 0.25)]).unwrap();
        assert_eq!(apply_stopping(&m, |_| 1.0).unwrap(), m);
        let none = apply_stopping(&m, |_| 0.0).unwrap();
        assert_eq!(none.alive_mass(), 0.0);
        assert!(is_dominated(&none, &m));
        let split = apply_stopping(&m, |x| if x >= 0.5 { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(split.alive_mass(), 0.25);
        assert!(is_dominated(&split, &m));
        assert!(!is_dominated(&m, &none));
        assert!(matches!(apply_stopping(&m, |_| 1.5), Err(Error::ProbabilityOutOfRange(_))));
    }
}
