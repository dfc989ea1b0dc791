//! Mean-field control with a finite control set and Poisson-type common
//! jumps. Controls are applied uniformly across particles.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_budget, default_spacing, multiset_count, multisets, Entry, Lattice, ValueTable};
use crate::error::{Error, Result};
use crate::functional::{CylindricalFunctional, FunctionalSpec};
use crate::numeric::{pairwise_mean, pairwise_sum};
use crate::sde::{Coefficient, CoefficientSpec, DiscreteLaw, FlowCtx};

#[derive(Debug, Clone)]
pub struct Control {
    pub value: f64,
    pub drift: Coefficient,
    pub sigma: f64,
    /// Common jump amplitude; particles move by `gamma * y`.
    pub gamma: f64,
    /// Constant common jump intensity.
    pub intensity: f64,
    pub reward: Coefficient,
}

#[derive(Debug, Clone)]
pub struct ControlProblemSpec {
    pub controls: Vec<Control>,
    pub common_jump_law: DiscreteLaw,
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
pub struct ControlConfig {
    pub value: f64,
    #[serde(default)]
    pub drift: CoefficientSpec,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub intensity: f64,
    #[serde(default)]
    pub reward: CoefficientSpec,
}

pub(crate) fn default_budget() -> usize {
    2_000_000
}

pub(crate) fn unit_law() -> DiscreteLaw {
    DiscreteLaw::dirac(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlProblemConfig {
    pub horizon: f64,
    pub step: f64,
    #[serde(default)]
    pub spacing: Option<f64>,
    pub particles: usize,
    pub lattice_points: usize,
    #[serde(default = "default_budget")]
    pub state_budget: usize,
    pub terminal: FunctionalSpec,
    #[serde(default = "unit_law")]
    pub common_jump_law: DiscreteLaw,
    pub controls: Vec<ControlConfig>,
}

impl ControlProblemConfig {
    pub fn build(&self) -> Result<ControlProblemSpec> {
        Ok(ControlProblemSpec {
            controls: self
                .controls
                .iter()
                .map(|c| Control {
                    value: c.value,
                    drift: c.drift.build(),
                    sigma: c.sigma,
                    gamma: c.gamma,
                    intensity: c.intensity,
                    reward: c.reward.build(),
                })
                .collect(),
            common_jump_law: self.common_jump_law.clone(),
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

/// One outcome of a step.
pub(crate) struct Branch {
    pub next: Vec<i32>,
    pub prob: f64,
    pub common: bool,
}

struct Moves {
    diffusion: i32,
    jumps: Vec<(i32, f64)>,
}

pub(crate) struct ControlModel<'a> {
    spec: &'a ControlProblemSpec,
    pub lattice: Lattice,
    moves: Vec<Moves>,
    jump_rounding: f64,
}

impl<'a> ControlModel<'a> {
    pub fn new(spec: &'a ControlProblemSpec) -> Result<Self> {
        if spec.controls.is_empty() {
            return Err(Error::Config("control set is empty".into()));
        }
        if spec.particles == 0 {
            return Err(Error::TooFewParticles(0));
        }
        spec.common_jump_law.validate()?;
        let h = spec.step;
        let spacing = spec.spacing.unwrap_or_else(|| default_spacing(h, spec.controls.iter().map(|c| c.sigma)));
        let mut moves = Vec::new();
        let mut reach = 1;
        let mut jump_rounding: f64 = 0.0;
        for c in &spec.controls {
            let p = c.intensity * h;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::ProbabilityOutOfRange(p));
            }
            let diffusion = Lattice::exact_units(spacing, c.sigma.abs() * h.sqrt(), "diffusion step")?;
            let mut jumps = Vec::new();
            for (&y, &q) in spec.common_jump_law.values.iter().zip(&spec.common_jump_law.probs) {
                let r = c.gamma * y / spacing;
                jump_rounding = jump_rounding.max((c.gamma * y - r.round() * spacing).abs());
                jumps.push((r.round() as i32, q));
            }
            let drift = (c.drift.bound() * h / spacing).round() as i32;
            let jmax = jumps.iter().map(|j| j.0.abs()).max().unwrap_or(0);
            reach = reach.max(drift + diffusion.max(if c.intensity > 0.0 { jmax } else { 0 }));
            moves.push(Moves { diffusion, jumps });
        }
        let lattice = Lattice::new(spec.horizon, h, spacing, spec.lattice_points, reach)?;
        Ok(Self { spec, lattice, moves, jump_rounding })
    }

    fn positions(&self, cfg: &[i32]) -> Vec<f64> {
        cfg.iter().map(|&i| self.lattice.x(i)).collect()
    }

    /// Running reward over the step and the step's outcomes under control
    /// `a`, plus the largest drift rounding error.
    pub fn branches(&self, k: usize, cfg: &[i32], a: usize) -> Result<(f64, Vec<Branch>, f64)> {
        let c = &self.spec.controls[a];
        let mv = &self.moves[a];
        let h = self.lattice.step;
        let t = self.lattice.time(k);
        let xs = self.positions(cfg);
        let ctx = FlowCtx::new(&xs, c.drift.uses_measure() || c.reward.uses_measure());
        let mut rounding: f64 = 0.0;
        let mut drift = Vec::with_capacity(cfg.len());
        let mut rewards = Vec::with_capacity(cfg.len());
        for &x in &xs {
            let (d, err) = self.lattice.round_units(c.drift.checked("drift", t, &ctx, x)? * h);
            rounding = rounding.max(err);
            drift.push(d);
            rewards.push(c.reward.checked("reward", t, &ctx, x)?);
        }
        let reward = h * pairwise_mean(&rewards);
        let shifted = |offsets: &dyn Fn(usize) -> i32| -> Vec<i32> {
            let mut next: Vec<i32> = cfg.iter().enumerate().map(|(i, &p)| p + drift[i] + offsets(i)).collect();
            next.sort_unstable();
            next
        };
        let pj = c.intensity * h;
        let mut out = Vec::new();
        if pj > 0.0 {
            for &(shift, q) in &mv.jumps {
                out.push(Branch { next: shifted(&|_| shift), prob: pj * q, common: true });
            }
        }
        if pj < 1.0 {
            if mv.diffusion == 0 {
                out.push(Branch { next: shifted(&|_| 0), prob: 1.0 - pj, common: false });
            } else {
                let n = cfg.len();
                let count = 1u64 << n;
                let p = (1.0 - pj) / count as f64;
                for mask in 0..count {
                    let s = mv.diffusion;
                    out.push(Branch {
                        next: shifted(&|i| if mask >> i & 1 == 1 { s } else { -s }),
                        prob: p,
                        common: false,
                    });
                }
            }
        }
        Ok((reward, out, rounding))
    }

    fn one_step(&self, table: &[HashMap<Vec<i32>, Entry>], k: usize, cfg: &[i32], a: usize) -> Result<(f64, f64)> {
        let (reward, branches, rounding) = self.branches(k, cfg, a)?;
        let mut terms = Vec::with_capacity(branches.len() + 1);
        terms.push(reward);
        for b in &branches {
            let v = table[k + 1]
                .get(&b.next)
                .ok_or_else(|| Error::OffLattice(format!("{:?} left the lattice", b.next)))?
                .value;
            terms.push(b.prob * v);
        }
        Ok((pairwise_sum(&terms), rounding))
    }
}

pub fn solve_mfc_dp(spec: &ControlProblemSpec) -> Result<ValueTable> {
    let model = ControlModel::new(spec)?;
    let lattice = model.lattice;
    let n = spec.particles;
    let mut total: u128 = 0;
    for k in 0..=lattice.steps {
        let (lo, hi) = lattice.range(k);
        total += multiset_count((hi - lo + 1) as usize, n);
    }
    check_budget(total, spec.state_budget)?;

    let mut slices: Vec<HashMap<Vec<i32>, Entry>> = vec![HashMap::new(); lattice.steps + 1];
    let mut rounding = model.jump_rounding;
    for k in (0..=lattice.steps).rev() {
        let (lo, hi) = lattice.range(k);
        let configs = multisets(lo, hi, n);
        let rows: Vec<(Vec<i32>, Entry, f64)> = if k == lattice.steps {
            configs
                .into_par_iter()
                .map(|cfg| {
                    let v = spec.terminal.value_uniform(&model.positions(&cfg));
                    (cfg, Entry { value: v, continuation: v, decision: 0 }, 0.0)
                })
                .collect()
        } else {
            configs
                .into_par_iter()
                .map(|cfg| -> Result<_> {
                    let mut best = (f64::NEG_INFINITY, 0usize);
                    let mut err: f64 = 0.0;
                    for a in 0..spec.controls.len() {
                        let (v, r) = model.one_step(&slices, k, &cfg, a)?;
                        err = err.max(r);
                        if v > best.0 {
                            best = (v, a);
                        }
                    }
                    Ok((cfg, Entry { value: best.0, continuation: best.0, decision: best.1 as u64 }, err))
                })
                .collect::<Result<_>>()?
        };
        for (cfg, e, r) in rows {
            rounding = rounding.max(r);
            slices[k].insert(cfg, e);
        }
    }
    Ok(ValueTable {
        lattice,
        particles: n,
        flagged: false,
        slices,
        labels: spec.controls.iter().map(|c| c.value).collect(),
        rounding_error: rounding,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HjbResidual {
    /// Pointwise supremum over controls inside the integral against the measure.
    pub sup_inside: f64,
    /// Supremum over controls applied uniformly to all particles, the form
    /// the recursion optimizes.
    pub uniform: f64,
}

fn perturbed(cfg: &[i32], i: usize, d: i32) -> Vec<i32> {
    let mut c = cfg.to_vec();
    c[i] += d;
    c.sort_unstable();
    c
}

/// `-dV/dt - int sup_a {f^a + L^a dV + J^a[V]} dm` at a stored interior
/// state. Time derivative by forward difference, spatial derivatives of
/// the flat derivative by one-particle perturbations of the slice at
/// `t + h`.
pub fn hjb_residual(table: &ValueTable, spec: &ControlProblemSpec, k: usize, cfg: &[i32]) -> Result<HjbResidual> {
    let model = ControlModel::new(spec)?;
    let lattice = table.lattice;
    if k >= lattice.steps {
        return Err(Error::InvalidArgument(format!("time index {k} is not interior")));
    }
    let h = lattice.step;
    let d = lattice.spacing;
    let n = cfg.len() as f64;
    let v0 = table.value(k, cfg)?;
    let v1 = table.value(k + 1, cfg)?;
    let dt = (v1 - v0) / h;
    let t = lattice.time(k);
    let xs = model.positions(cfg);

    let mut dx = Vec::with_capacity(cfg.len());
    let mut dxx = Vec::with_capacity(cfg.len());
    for i in 0..cfg.len() {
        let up = table.value(k + 1, &perturbed(cfg, i, 1))?;
        let down = table.value(k + 1, &perturbed(cfg, i, -1))?;
        dx.push(n * (up - down) / (2.0 * d));
        dxx.push(n * (up - 2.0 * v1 + down) / (d * d));
    }

    // local[a][i]
    let mut local = Vec::with_capacity(spec.controls.len());
    for (a, c) in spec.controls.iter().enumerate() {
        let ctx = FlowCtx::new(&xs, c.drift.uses_measure() || c.reward.uses_measure());
        let mut jump = 0.0;
        if c.intensity > 0.0 {
            let mut terms = Vec::new();
            for &(shift, q) in &model.moves[a].jumps {
                let shifted: Vec<i32> = cfg.iter().map(|&p| p + shift).collect();
                terms.push(q * (table.value(k + 1, &shifted)? - v1));
            }
            jump = c.intensity * pairwise_sum(&terms);
        }
        let mut row = Vec::with_capacity(cfg.len());
        for (i, &x) in xs.iter().enumerate() {
            let b = c.drift.eval(t, &ctx, x);
            let f = c.reward.eval(t, &ctx, x);
            row.push(f + b * dx[i] + 0.5 * c.sigma * c.sigma * dxx[i] + jump);
        }
        local.push(row);
    }
    let pointwise: Vec<f64> = (0..cfg.len())
        .map(|i| local.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let uniform = local.iter().map(|r| pairwise_mean(r)).fold(f64::NEG_INFINITY, f64::max);
    Ok(HjbResidual { sup_inside: -dt - pairwise_mean(&pointwise), uniform: -dt - uniform })
}

/// Largest `|residual|` (both forms) over every state of slice `k`.
pub fn max_hjb_residual(table: &ValueTable, spec: &ControlProblemSpec, k: usize) -> Result<HjbResidual> {
    let mut worst = HjbResidual { sup_inside: 0.0, uniform: 0.0 };
    for cfg in table.keys(k) {
        let r = hjb_residual(table, spec, k, &cfg)?;
        worst.sup_inside = worst.sup_inside.max(r.sup_inside.abs());
        worst.uniform = worst.uniform.max(r.uniform.abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    /// Stop at a fixed time index.
    Deterministic(usize),
    /// Stop at the first common jump, or at the horizon.
    FirstCommonJump,
    /// Stop at the horizon.
    Terminal,
}

/// `|V(t_k, cfg) - E[sum f h + V(tau, cfg_tau)]|` with the expectation
/// taken by forward enumeration of the chain under the table's optimal
/// feedback control.
pub fn dpp_check(
    table: &ValueTable,
    spec: &ControlProblemSpec,
    k: usize,
    cfg: &[i32],
    rule: StoppingRule,
) -> Result<f64> {
    let model = ControlModel::new(spec)?;
    let last = table.lattice.steps;
    let stop_at = match rule {
        StoppingRule::Deterministic(j) if j < k || j > last => {
            return Err(Error::InvalidArgument(format!("stopping index {j} outside [{k}, {last}]")));
        }
        StoppingRule::Deterministic(j) => j,
        StoppingRule::FirstCommonJump | StoppingRule::Terminal => last,
    };
    let mut terms = Vec::new();
    let mut dist: BTreeMap<Vec<i32>, f64> = BTreeMap::new();
    dist.insert(cfg.to_vec(), 1.0);
    for j in k..stop_at {
        let mut next: BTreeMap<Vec<i32>, f64> = BTreeMap::new();
        for (c, &p) in &dist {
            let a = table.entry(j, c)?.decision as usize;
            let (reward, branches, _) = model.branches(j, c, a)?;
            terms.push(p * reward);
            for b in branches {
                let stops = j + 1 == stop_at || (b.common && rule == StoppingRule::FirstCommonJump);
                if stops {
                    terms.push(p * b.prob * table.value(j + 1, &b.next)?);
                } else {
                    *next.entry(b.next).or_insert(0.0) += p * b.prob;
                }
            }
        }
        dist = next;
    }
    if k == stop_at {
        terms.push(table.value(k, cfg)?);
    }
    Ok((table.value(k, cfg)? - pairwise_sum(&terms)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::CylindricalFunctional;

    fn analytic(h: f64) -> ControlProblemSpec {
        let control = |a: f64| Control {
            value: a,
            drift: Coefficient::Constant(a),
            sigma: 0.0,
            gamma: 0.0,
            intensity: 0.0,
            reward: Coefficient::Constant(0.0),
        };
        ControlProblemSpec {
            controls: vec![control(-1.0), control(1.0)],
            common_jump_law: DiscreteLaw::dirac(1.0),
            terminal: CylindricalFunctional::mean(),
            horizon: 0.1,
            step: h,
            spacing: None,
            particles: 3,
            lattice_points: 15,
            state_budget: 100_000,
        }
    }

    #[test]
    fn analytic_value_and_control() {
        for h in [0.1, 0.05, 0.025] {
            let spec = analytic(h);
            let table = solve_mfc_dp(&spec).unwrap();
            for k in 0..=table.lattice.steps {
                for cfg in table.keys(k) {
                    let e = table.entry(k, &cfg).unwrap();
                    let xs: Vec<f64> = cfg.iter().map(|&i| table.lattice.x(i)).collect();
                    let exact = pairwise_mean(&xs) + 0.1 - table.lattice.time(k);
                    assert!((e.value - exact).abs() < 1e-10);
                    if k < table.lattice.steps {
                        assert_eq!(table.labels[e.decision as usize], 1.0);
                        let r = hjb_residual(&table, &spec, k, &cfg).unwrap();
                        assert!(r.sup_inside.abs() < 1e-9 && r.uniform.abs() < 1e-9, "{r:?}");
                        assert_eq!(dpp_check(&table, &spec, k, &cfg, StoppingRule::Deterministic(k + 1)).unwrap(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_horizon_is_terminal_reward() {
        let mut spec = analytic(0.05);
        spec.horizon = 0.0;
        let table = solve_mfc_dp(&spec).unwrap();
        assert_eq!(table.slices.len(), 1);
        for cfg in table.keys(0) {
            let xs: Vec<f64> = cfg.iter().map(|&i| table.lattice.x(i)).collect();
            assert_eq!(table.value(0, &cfg).unwrap(), spec.terminal.value_uniform(&xs));
        }
    }

    fn jump_diffusion() -> ControlProblemSpec {
        let mut spec = analytic(0.05);
        spec.terminal = CylindricalFunctional::power_of_mean(2);
        spec.controls = vec![
            Control {
                value: 0.0,
                drift: Coefficient::Constant(0.0),
                sigma: 1.0,
                gamma: 0.0,
                intensity: 0.0,
                reward: Coefficient::Constant(0.0),
            },
            Control {
                value: 1.0,
                drift: Coefficient::Constant(0.0),
                sigma: 0.0,
                gamma: 0.05_f64.sqrt(),
                intensity: 2.0,
                reward: Coefficient::Affine { base: 0.0, x: -1.0, mean: 0.0, bound: 5.0 },
            },
        ];
        spec.common_jump_law = DiscreteLaw { values: vec![-1.0, 1.0], probs: vec![0.5, 0.5] };
        spec.particles = 2;
        spec.lattice_points = 21;
        spec
    }

    #[test]
    fn dpp_holds_for_common_information_stopping_rules() {
        let spec = jump_diffusion();
        let table = solve_mfc_dp(&spec).unwrap();
        for cfg in table.keys(0) {
            let v = table.value(0, &cfg).unwrap();
            for rule in [StoppingRule::FirstCommonJump, StoppingRule::Terminal, StoppingRule::Deterministic(1)] {
                let gap = dpp_check(&table, &spec, 0, &cfg, rule).unwrap();
                assert!(gap <= 1e-10 * v.abs().max(1.0), "{rule:?} {gap}");
            }
        }
    }

    #[test]
    fn permutation_symmetric_keys() {
        let table = solve_mfc_dp(&jump_diffusion()).unwrap();
        assert!(table.slices.iter().all(|s| s.keys().all(|k| k.windows(2).all(|w| w[0] <= w[1]))));
    }

    #[test]
    fn budget_is_enforced() {
        let mut spec = analytic(0.025);
        spec.state_budget = 10;
        assert!(matches!(solve_mfc_dp(&spec), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn nonlinear_residual_shrinks_with_step() {
        // Terminal reward tanh(<x, m>), single diffusive control.
        let mut prev = None;
        for h in [0.04, 0.01] {
            let mut spec = analytic(h);
            spec.controls.truncate(1);
            spec.controls[0].sigma = 1.0;
            spec.controls[0].drift = Coefficient::Constant(0.0);
            spec.horizon = 0.08;
            spec.particles = 2;
            spec.lattice_points = 2 * 8 + 9;
            spec.terminal = crate::functional::FunctionalSpec {
                outer: crate::functional::OuterKind::Tanh,
                inner: vec![vec![0.0, 1.0]],
                terms: vec![crate::functional::Monomial { exponents: vec![1], coef: 1.0 }],
            }
            .build()
            .unwrap();
            let table = solve_mfc_dp(&spec).unwrap();
            let r = max_hjb_residual(&table, &spec, 0).unwrap();
            if let Some(p) = prev {
                assert!(r.uniform < p, "{} vs {p}", r.uniform);
            }
            prev = Some(r.uniform);
        }
    }
}
