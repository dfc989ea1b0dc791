//! Random fields `U_t(m) = U_0(m) + int phi_s(m) dA_s + int psi_s(m) dN_s`
//! driven by realized common-noise paths, evaluated along the empirical flow.
//!
//! Each field term is a cylindrical functional times a scalar schedule
//! `c(s)`, so `U_t` is a linear combination of functionals whose weights are
//! path integrals of the schedules against the drivers. Evaluation at a
//! measure is substitution after pathwise integration.
//!
//! Only drivers measurable with respect to the common noise are supported:
//! `A` is either `t` or the common jump counter, `N` is either `W0` or the
//! compensated common jump counter. Conditioning on the common path then
//! coincides with conditioning on `(common noise, A, N)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{CylindricalFunctional, DerivativeQuery, FunctionalSpec};
use crate::ito::{ito_terms, FieldView, ItoTermBreakdown};
use crate::numeric::{pairwise_mean, pairwise_sum};
use crate::sde::{FlowCtx, ScenarioPath};

/// Piecewise polynomial in absolute time; piece `j` covers
/// `[breakpoints[j], breakpoints[j + 1])`, the last piece extends to `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub breakpoints: Vec<f64>,
    pub pieces: Vec<Vec<f64>>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

impl Schedule {
    pub fn constant(c: f64) -> Self {
        Self { breakpoints: vec![0.0], pieces: vec![vec![c]] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.breakpoints.is_empty() || self.breakpoints.len() != self.pieces.len() {
            return Err(Error::Config("schedule needs one piece per breakpoint".into()));
        }
        if self.breakpoints[0] > 0.0 || self.breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("schedule breakpoints must start at or before 0 and increase".into()));
        }
        Ok(())
    }

    fn piece(&self, t: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= t).saturating_sub(1)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.pieces[self.piece(t)].iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }

    /// `int_a^b c(s) ds`, exact and oriented.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if a > b {
            return -self.integral(b, a);
        }
        let antiderivative = |p: &[f64], t: f64| -> f64 {
            p.iter().enumerate().rev().fold(0.0, |acc, (i, &c)| acc * t + c / (i as f64 + 1.0)) * t
        };
        let mut total = 0.0;
        let mut lo = a;
        while lo < b {
            let j = self.piece(lo);
            let hi = self.breakpoints.get(j + 1).map_or(b, |&e| e.min(b));
            let p = &self.pieces[j];
            total += antiderivative(p, hi) - antiderivative(p, lo);
            lo = hi;
        }
        total
    }
}

/// Driver names accepted in config files. The idiosyncratic ones parse but
/// are rejected when a field is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverKind {
    Time,
    CommonJumpCount,
    CommonBrownian,
    CompensatedCommonJumps,
    IdiosyncraticBrownian,
    IdiosyncraticJumpCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FvDriver {
    Time,
    CommonJumpCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MartDriver {
    CommonBrownian,
    CompensatedCommonJumps,
}

impl DriverKind {
    fn fv(self) -> Result<FvDriver> {
        match self {
            DriverKind::Time => Ok(FvDriver::Time),
            DriverKind::CommonJumpCount => Ok(FvDriver::CommonJumpCount),
            DriverKind::IdiosyncraticBrownian | DriverKind::IdiosyncraticJumpCount => {
                Err(Error::DriverNotCommon(format!("{self:?}")))
            }
            _ => Err(Error::Config(format!("{self:?} is not a finite-variation driver"))),
        }
    }

    fn mart(self) -> Result<MartDriver> {
        match self {
            DriverKind::CommonBrownian => Ok(MartDriver::CommonBrownian),
            DriverKind::CompensatedCommonJumps => Ok(MartDriver::CompensatedCommonJumps),
            DriverKind::IdiosyncraticBrownian | DriverKind::IdiosyncraticJumpCount => {
                Err(Error::DriverNotCommon(format!("{self:?}")))
            }
            _ => Err(Error::Config(format!("{self:?} is not a martingale driver"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldTerm {
    pub schedule: Schedule,
    pub functional: CylindricalFunctional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomFieldSpec {
    pub initial: CylindricalFunctional,
    pub fv_terms: Vec<FieldTerm>,
    pub mart_terms: Vec<FieldTerm>,
    pub fv_driver: FvDriver,
    pub mart_driver: MartDriver,
    /// Declared bound on `|A|_TV + [N]_T`; exceedances are reported, not
    /// truncated.
    pub variation_bound: Option<f64>,
}

impl RandomFieldSpec {
    /// The field `U_t = U_0`.
    pub fn constant(initial: CylindricalFunctional) -> Self {
        Self {
            initial,
            fv_terms: Vec::new(),
            mart_terms: Vec::new(),
            fv_driver: FvDriver::Time,
            mart_driver: MartDriver::CommonBrownian,
            variation_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldTermConfig {
    #[serde(default)]
    pub schedule: Schedule,
    pub functional: FunctionalSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFieldConfig {
    #[serde(default)]
    pub initial: Option<FunctionalSpec>,
    #[serde(default)]
    pub fv_terms: Vec<FieldTermConfig>,
    #[serde(default)]
    pub mart_terms: Vec<FieldTermConfig>,
    #[serde(default = "default_fv")]
    pub fv_driver: DriverKind,
    #[serde(default = "default_mart")]
    pub mart_driver: DriverKind,
    #[serde(default)]
    pub variation_bound: Option<f64>,
}

fn default_fv() -> DriverKind {
    DriverKind::Time
}

fn default_mart() -> DriverKind {
    DriverKind::CommonBrownian
}

impl RandomFieldConfig {
    pub fn build(&self) -> Result<RandomFieldSpec> {
        let term = |t: &FieldTermConfig| -> Result<FieldTerm> {
            t.schedule.validate()?;
            Ok(FieldTerm { schedule: t.schedule.clone(), functional: t.functional.build()? })
        };
        Ok(RandomFieldSpec {
            initial: match &self.initial {
                Some(s) => s.build()?,
                None => CylindricalFunctional::zero(),
            },
            fv_terms: self.fv_terms.iter().map(term).collect::<Result<_>>()?,
            mart_terms: self.mart_terms.iter().map(term).collect::<Result<_>>()?,
            fv_driver: self.fv_driver.fv()?,
            mart_driver: self.mart_driver.mart()?,
            variation_bound: self.variation_bound,
        })
    }
}

/// Driver increments of every field term along one path.
///
/// `cont[f][k]` is the increment of term `f` over `(t_k, t_{k+1})` without
/// jumps, `jump[f][k]` its jump at node `k`. Term `0` is `U_0` with weight 1.
struct Realized<'a> {
    fns: Vec<&'a CylindricalFunctional>,
    fv_range: std::ops::Range<usize>,
    mart_range: std::ops::Range<usize>,
    cont: Vec<Vec<f64>>,
    jump: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
    /// `|A|_TV + [N]_T` on this path.
    variation: f64,
}

impl<'a> Realized<'a> {
    fn new(field: &'a RandomFieldSpec, path: &ScenarioPath) -> Result<Self> {
        let nodes = path.num_nodes();
        let needs_counter = (field.fv_driver == FvDriver::CommonJumpCount && !field.fv_terms.is_empty())
            || (field.mart_driver == MartDriver::CompensatedCommonJumps && !field.mart_terms.is_empty());
        let rate = path.model.common_intensity.as_constant();
        if needs_counter && rate.is_none() {
            return Err(Error::DriverUnrealized(
                "common jump counter needs a constant common intensity".into(),
            ));
        }
        let rate = rate.unwrap_or(0.0);
        // Accepted common proposals; with a constant intensity every
        // particle accepts or none does.
        let mut count = vec![0.0; nodes];
        for e in &path.common {
            if e.accepted > 0 {
                count[e.node] = 1.0;
            }
        }

        let mut fns = vec![&field.initial];
        let mut cont = vec![vec![0.0; nodes]];
        let mut jump = vec![vec![0.0; nodes]];
        let fv_start = fns.len();
        for term in &field.fv_terms {
            let mut c = vec![0.0; nodes];
            let mut j = vec![0.0; nodes];
            for k in 0..nodes {
                match field.fv_driver {
                    FvDriver::Time if k + 1 < nodes => {
                        c[k] = term.schedule.integral(path.times[k], path.times[k + 1]);
                    }
                    FvDriver::CommonJumpCount => j[k] = term.schedule.eval(path.times[k]) * count[k],
                    _ => {}
                }
            }
            fns.push(&term.functional);
            cont.push(c);
            jump.push(j);
        }
        let fv_range = fv_start..fns.len();
        let mut tv_a = match field.fv_driver {
            FvDriver::Time => path.horizon(),
            FvDriver::CommonJumpCount => count.iter().sum(),
        };
        let mart_start = fns.len();
        for term in &field.mart_terms {
            let mut c = vec![0.0; nodes];
            let mut j = vec![0.0; nodes];
            for k in 0..nodes {
                let tk = path.times[k];
                match field.mart_driver {
                    MartDriver::CommonBrownian if k + 1 < nodes => {
                        c[k] = term.schedule.eval(tk) * path.dw0[k];
                    }
                    MartDriver::CompensatedCommonJumps => {
                        if k + 1 < nodes {
                            c[k] = -rate * term.schedule.integral(tk, path.times[k + 1]);
                        }
                        j[k] = term.schedule.eval(tk) * count[k];
                    }
                    _ => {}
                }
            }
            fns.push(&term.functional);
            cont.push(c);
            jump.push(j);
        }
        let mart_range = mart_start..fns.len();
        let mut qv_n = match field.mart_driver {
            MartDriver::CommonBrownian => path.horizon(),
            MartDriver::CompensatedCommonJumps => count.iter().sum(),
        };
        if field.fv_terms.is_empty() {
            tv_a = 0.0;
        }
        if field.mart_terms.is_empty() {
            qv_n = 0.0;
        }

        // Weight of every term after the events of node k.
        let mut cumulative = vec![vec![0.0; fns.len()]; nodes];
        cumulative[0][0] = 1.0;
        for f in 1..fns.len() {
            cumulative[0][f] = jump[f][0];
        }
        for k in 1..nodes {
            for f in 0..fns.len() {
                cumulative[k][f] = cumulative[k - 1][f] + cont[f][k - 1] + jump[f][k];
            }
        }
        Ok(Self { fns, fv_range, mart_range, cont, jump, cumulative, variation: tv_a + qv_n })
    }

    fn weights(&self, node: usize) -> Vec<f64> {
        self.cumulative[node].clone()
    }

    /// Weights just before the jumps of `node`.
    fn weights_pre(&self, node: usize) -> Vec<f64> {
        self.cumulative[node].iter().zip(&self.jump).map(|(w, j)| w - j[node]).collect()
    }
}

/// `U_t(m)` or one of its derivatives, with the measure argument fixed.
pub fn field_eval(field: &RandomFieldSpec, path: &ScenarioPath, t: f64, q: DerivativeQuery<'_>) -> Result<f64> {
    let r = Realized::new(field, path)?;
    let node = path.node_at(t)?;
    let w = r.weights(node);
    let mut terms = Vec::with_capacity(w.len());
    for (u, wf) in r.fns.iter().zip(&w) {
        terms.push(wf * u.eval(q)?);
    }
    Ok(pairwise_sum(&terms))
}

/// `|dx_flat U_t(m, x) - (dx_flat U_0 + sum_k dx_flat phi dA_k + dx_flat psi dN_k)|`
/// where the right side is accumulated increment by increment.
pub fn derivative_transport_gap(
    field: &RandomFieldSpec,
    path: &ScenarioPath,
    t: f64,
    m: &crate::measure::EmpiricalMeasure,
    x: f64,
) -> Result<f64> {
    let r = Realized::new(field, path)?;
    let node = path.node_at(t)?;
    let d: Vec<f64> = r.fns.iter().map(|u| u.at(m).dx_flat(x)).collect();
    let direct: f64 = r.weights(node).iter().zip(&d).map(|(w, d)| w * d).sum();
    let mut acc = d[0];
    for k in 0..=node {
        for f in 1..r.fns.len() {
            acc += d[f] * r.jump[f][k];
            if k < node {
                acc += d[f] * r.cont[f][k];
            }
        }
    }
    Ok((direct - acc).abs() / direct.abs().max(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WentzellBreakdown {
    /// Ito-type terms with the field frozen at the left node of each step.
    pub ito: ItoTermBreakdown,
    /// `int phi(m_{s-}) dA`
    pub fv_driver_term: f64,
    /// `int psi(m_{s-}) dN`
    pub mart_driver_term: f64,
    /// `avg_i sum_s dx_flat phi(m_{s-}, X_{s-}) dX_s dA_s`
    pub cross_jump_term: f64,
    /// `avg_i int dx_flat psi(m_{s-}, X_{s-}) d[X, N]_s`
    pub cross_bracket_term: f64,
    /// Second-order remainder `dA [phi(m_s) - phi(m_{s-}) - avg_i dx_flat phi dX]`
    /// at driver jumps that coincide with flow jumps; not part of the
    /// right-hand side.
    pub jump_remainder: f64,
    pub lhs: f64,
    pub residual: f64,
    pub variation: f64,
    pub variation_bound_exceeded: bool,
}

pub fn verify_wentzell(field: &RandomFieldSpec, path: &ScenarioPath, t: f64) -> Result<WentzellBreakdown> {
    let r = Realized::new(field, path)?;
    let weights = |k: usize| r.weights(k);
    let view = FieldView { fns: r.fns.clone(), weights: &weights };
    let ito = ito_terms(&view, path, t)?;
    let upto = path.node_at(t)?;
    let spec = &path.model;
    let exact = spec.uses_measure();
    let n = path.n();

    let mut fv = Vec::new();
    let mut mart = Vec::new();
    let mut cross_jump = Vec::new();
    let mut cross_bracket = Vec::new();
    let mut remainder = Vec::new();
    let mut buf = vec![0.0; n];
    for k in 0..=upto {
        let xs = path.particles.row(k);
        // Continuous driver increments over (t_k, t_{k+1}) see m_{t_k}.
        if k < upto {
            for f in r.fv_range.clone().chain(r.mart_range.clone()) {
                let inc = r.cont[f][k];
                if inc == 0.0 {
                    continue;
                }
                let v = r.fns[f].value_uniform(xs) * inc;
                if r.fv_range.contains(&f) {
                    fv.push(v);
                } else {
                    mart.push(v);
                }
            }
            if field.mart_driver == MartDriver::CommonBrownian && !spec.sigma0.is_zero() {
                let ctx = FlowCtx::new(xs, exact);
                let h = path.times[k + 1] - path.times[k];
                for f in r.mart_range.clone() {
                    let c = field.mart_terms[f - r.mart_range.start].schedule.eval(path.times[k]);
                    if c == 0.0 {
                        continue;
                    }
                    let frozen = r.fns[f].at_uniform(xs);
                    for (b, &x) in buf.iter_mut().zip(xs) {
                        *b = frozen.dx_flat(x) * spec.sigma0.eval(path.times[k], &ctx, x);
                    }
                    cross_bracket.push(pairwise_mean(&buf) * c * h);
                }
            }
        }
        // Driver jumps at node k see m_{k-}.
        if k == 0 {
            continue;
        }
        let pre = path.particles.pre_row(k);
        for f in r.fv_range.clone().chain(r.mart_range.clone()) {
            let dj = r.jump[f][k];
            if dj == 0.0 {
                continue;
            }
            let u = r.fns[f];
            let frozen = u.at_uniform(&pre);
            for (i, b) in buf.iter_mut().enumerate() {
                *b = frozen.dx_flat(pre[i]) * (xs[i] - pre[i]);
            }
            let first_order = pairwise_mean(&buf);
            let v = frozen.value() * dj;
            if r.fv_range.contains(&f) {
                fv.push(v);
                cross_jump.push(first_order * dj);
            } else {
                mart.push(v);
                // Pure-jump bracket of X with the compensated counter.
                cross_bracket.push(first_order * dj);
            }
            remainder.push(dj * (u.value_uniform(xs) - frozen.value() - first_order));
        }
    }

    let mut out = WentzellBreakdown {
        ito,
        fv_driver_term: pairwise_sum(&fv),
        mart_driver_term: pairwise_sum(&mart),
        cross_jump_term: pairwise_sum(&cross_jump),
        cross_bracket_term: pairwise_sum(&cross_bracket),
        jump_remainder: pairwise_sum(&remainder),
        lhs: ito.lhs,
        residual: 0.0,
        variation: r.variation,
        variation_bound_exceeded: field.variation_bound.is_some_and(|b| r.variation > b),
    };
    out.residual = out.lhs
        - pairwise_sum(&[
            ito.rhs(),
            out.fv_driver_term,
            out.mart_driver_term,
            out.cross_jump_term,
            out.cross_bracket_term,
        ]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldPartitionRow {
    pub intervals: usize,
    /// `avg_i sum_n {F(m_{n-1}, .)}^{t_n, X^r}_{t_{n-1}, X_{n-1}} |dX|^2`
    pub single_sum: f64,
    pub single_limit: f64,
    /// `avg_{i,j} sum_n {Fhat}^{t_n, theta^r}_{t_{n-1}, theta^0} dX dXhat`
    pub pair_sum: f64,
    pub pair_limit: f64,
}

/// Partition sums of increments of the driver part of the field, against
/// their jump-sum limits on the event grid. `F` is the second spatial
/// derivative of the flat derivative, `Fhat` the mixed derivative of the
/// second flat derivative; `r` gives the interpolation points
/// `(measure, particle, copy)`.
pub fn field_partition_diagnostic(
    field: &RandomFieldSpec,
    path: &ScenarioPath,
    grids: &[Vec<f64>],
    r: [f64; 3],
) -> Result<Vec<FieldPartitionRow>> {
    let real = Realized::new(field, path)?;
    let nf = real.fns.len();
    // Driver part only: drop U_0.
    let drive = |w: Vec<f64>| -> Vec<f64> {
        let mut w = w;
        w[0] = 0.0;
        w
    };
    let n = path.n();

    // F_w(m-projections, x)
    let f_single = |w: &[f64], ys: &[Vec<f64>], x: f64| -> f64 {
        (1..nf)
            .filter(|&f| w[f] != 0.0)
            .map(|f| w[f] * real.fns[f].at_projections(ys[f].clone()).dxx_flat(x))
            .sum()
    };
    let pair_term = |w: &[f64], ys: &[Vec<f64>], xs: &[f64], dx: &[f64], zs: &[f64], dz: &[f64]| -> f64 {
        (1..nf)
            .filter(|&f| w[f] != 0.0)
            .map(|f| w[f] * real.fns[f].at_projections(ys[f].clone()).pair_average_dxdxhat(xs, dx, zs, dz))
            .sum()
    };
    let projections = |row: &[f64]| -> Vec<Vec<f64>> { real.fns.iter().map(|u| u.projections_uniform(row)).collect() };
    let mix = |a: &[Vec<f64>], b: &[Vec<f64>], l: f64| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(p, q)| p.iter().zip(q).map(|(x, y)| x + l * (y - x)).collect())
            .collect()
    };
    let interp = |a: &[f64], b: &[f64], l: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + l * (y - x)).collect() };
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| y - x).collect() };

    // Increment of the (single and paired) driver-part fields between two
    // states, given weights and the endpoint configurations.
    let increments = |w0: &[f64], w1: &[f64], x0: &[f64], x1: &[f64], c0: &[f64], c1: &[f64]| -> (f64, f64) {
        let y0 = projections(x0);
        let y1 = projections(x1);
        let dx = diff(x0, x1);
        let dc = diff(c0, c1);
        let mut single = vec![0.0; n];
        for i in 0..n {
            if dx[i] == 0.0 {
                continue;
            }
            let xr = x0[i] + r[1] * dx[i];
            single[i] = (f_single(w1, &y0, xr) - f_single(w0, &y0, x0[i])) * dx[i] * dx[i];
        }
        let yr = mix(&y0, &y1, r[0]);
        let xr = interp(x0, x1, r[1]);
        let cr = interp(c0, c1, r[2]);
        let pair = pair_term(w1, &yr, &xr, &dx, &cr, &dc) - pair_term(w0, &y0, x0, &dx, c0, &dc);
        (pairwise_mean(&single), pair)
    };

    let mut single_lim = Vec::new();
    let mut pair_lim = Vec::new();
    for node in 1..path.num_nodes() {
        let common = path.is_common_jump(node);
        if !common && path.particles.jumps_at(node).is_empty() {
            continue;
        }
        let w1 = drive(real.weights(node));
        let w0 = drive(real.weights_pre(node));
        let (s, p) = increments(
            &w0,
            &w1,
            &path.particles.pre_row(node),
            path.particles.row(node),
            &path.copies.pre_row(node),
            path.copies.row(node),
        );
        single_lim.push(s);
        if common {
            pair_lim.push(p);
        }
    }
    let single_limit = pairwise_sum(&single_lim);
    let pair_limit = pairwise_sum(&pair_lim);

    let mut rows = Vec::with_capacity(grids.len());
    for grid in grids {
        let mut nodes = Vec::with_capacity(grid.len());
        for &t in grid {
            nodes.push(path.node_at(t)?);
        }
        let mut single = Vec::new();
        let mut pair = Vec::new();
        for w in nodes.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (s, p) = increments(
                &drive(real.weights(a)),
                &drive(real.weights(b)),
                path.particles.row(a),
                path.particles.row(b),
                path.copies.row(a),
                path.copies.row(b),
            );
            single.push(s);
            pair.push(p);
        }
        rows.push(FieldPartitionRow {
            intervals: nodes.len().saturating_sub(1),
            single_sum: pairwise_sum(&single),
            single_limit,
            pair_sum: pairwise_sum(&pair),
            pair_limit,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::QueryKind;
    use crate::ito::verify_ito;
    use crate::measure::EmpiricalMeasure;
    use crate::sde::{simulate, Coefficient, ModelSpec};

    fn common_noise_model() -> ModelSpec {
        let mut spec = ModelSpec::new(1.0, EmpiricalMeasure::uniform(&[1.0, 2.0, 3.0]).unwrap());
        spec.sigma0 = Coefficient::Constant(0.5);
        spec
    }

    fn mean_term(c: f64) -> FieldTerm {
        FieldTerm { schedule: Schedule::constant(c), functional: CylindricalFunctional::mean() }
    }

    #[test]
    fn schedule_integral_is_exact() {
        let s = Schedule { breakpoints: vec![0.0, 0.5], pieces: vec![vec![1.0], vec![0.0, 2.0]] };
        // int_0^0.5 1 + int_0.5^1 2t = 0.5 + 0.75
        assert!((s.integral(0.0, 1.0) - 1.25).abs() < 1e-15);
        assert!((s.integral(0.25, 0.75) - (0.25 + 0.3125)).abs() < 1e-15);
        assert_eq!(s.eval(0.75), 1.5);
    }

    #[test]
    fn field_eval_cases() {
        let path = simulate(&common_noise_model(), 4, 0.1, 1).unwrap();
        let m = EmpiricalMeasure::uniform(&[0.0, 4.0]).unwrap();
        let q = DerivativeQuery::value(&m);
        let u0 = CylindricalFunctional::power_of_mean(2);
        let zero = RandomFieldSpec::constant(u0.clone());
        assert_eq!(field_eval(&zero, &path, 0.7, q).unwrap(), 4.0);

        let mut timed = RandomFieldSpec::constant(u0.clone());
        timed.fv_terms.push(FieldTerm { schedule: Schedule::constant(1.0), functional: constant_one() });
        assert!((field_eval(&timed, &path, 1.0, q).unwrap() - 5.0).abs() < 1e-12);

        let mut brownian = RandomFieldSpec::constant(CylindricalFunctional::zero());
        brownian.mart_terms.push(mean_term(1.0));
        let w: f64 = path.dw0.iter().sum();
        assert!((field_eval(&brownian, &path, 1.0, q).unwrap() - 2.0 * w).abs() < 1e-12);
    }

    fn constant_one() -> CylindricalFunctional {
        FunctionalSpec {
            outer: crate::functional::OuterKind::Poly,
            inner: vec![vec![0.0, 1.0]],
            terms: vec![crate::functional::Monomial { exponents: vec![0], coef: 1.0 }],
        }
        .build()
        .unwrap()
    }

    #[test]
    fn degenerate_field_matches_ito() {
        let mut spec = common_noise_model().with_intensity(Coefficient::Constant(2.0));
        spec.gamma = Coefficient::Constant(0.5);
        spec.sigma = Coefficient::Constant(0.3);
        let path = simulate(&spec, 30, 0.05, 6).unwrap();
        let u = CylindricalFunctional::power_of_mean(2);
        let a = verify_ito(&u, &path, 1.0).unwrap();
        let b = verify_wentzell(&RandomFieldSpec::constant(u), &path, 1.0).unwrap();
        assert_eq!(a, b.ito);
        assert_eq!(a.residual, b.residual);
    }

    #[test]
    fn brownian_driver_cross_bracket() {
        let path = simulate(&common_noise_model(), 10, 0.01, 2).unwrap();
        let mut field = RandomFieldSpec::constant(CylindricalFunctional::zero());
        field.mart_terms.push(mean_term(1.0));
        let r = verify_wentzell(&field, &path, 1.0).unwrap();
        assert!((r.cross_bracket_term - 0.5).abs() < 1e-12);
        let qv: f64 = path.dw0.iter().map(|d| d * d).sum();
        assert!((r.residual - 0.5 * (qv - 1.0)).abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn counter_driver_exact() {
        let mut spec = ModelSpec::new(1.0, EmpiricalMeasure::uniform(&[0.0, 1.0]).unwrap())
            .with_common_intensity(Coefficient::Constant(4.0));
        spec.gamma0 = Coefficient::Constant(1.0);
        let path = simulate(&spec, 6, 0.1, 5).unwrap();
        let jumps = path.common_jump_nodes().len() as f64;
        assert!(jumps > 0.0);
        let mut field = RandomFieldSpec::constant(CylindricalFunctional::zero());
        field.fv_driver = FvDriver::CommonJumpCount;
        field.fv_terms.push(mean_term(1.0));
        let r = verify_wentzell(&field, &path, 1.0).unwrap();
        assert_eq!(r.cross_jump_term, jumps);
        assert!(r.residual.abs() < 1e-12, "{r:?}");
        assert!((r.lhs - (0.5 * jumps + jumps * jumps)).abs() < 1e-12);
    }

    #[test]
    fn compensated_counter_needs_constant_rate() {
        let mut spec = ModelSpec::new(1.0, EmpiricalMeasure::uniform(&[0.0, 1.0]).unwrap());
        spec.common_intensity = Coefficient::custom(1.0, false, |_, _, x| if x > 0.5 { 1.0 } else { 0.5 });
        spec.common_intensity_bound = 1.0;
        let path = simulate(&spec, 4, 0.1, 5).unwrap();
        let mut field = RandomFieldSpec::constant(CylindricalFunctional::zero());
        field.mart_driver = MartDriver::CompensatedCommonJumps;
        field.mart_terms.push(mean_term(1.0));
        assert!(matches!(verify_wentzell(&field, &path, 1.0), Err(Error::DriverUnrealized(_))));
    }

    #[test]
    fn idiosyncratic_driver_rejected() {
        let cfg = RandomFieldConfig {
            initial: None,
            fv_terms: vec![],
            mart_terms: vec![],
            fv_driver: DriverKind::IdiosyncraticJumpCount,
            mart_driver: DriverKind::CommonBrownian,
            variation_bound: None,
        };
        assert!(matches!(cfg.build(), Err(Error::DriverNotCommon(_))));
    }

    #[test]
    fn derivative_transport_identity() {
        let mut spec = common_noise_model().with_common_intensity(Coefficient::Constant(3.0));
        spec.gamma0 = Coefficient::Constant(0.2);
        let path = simulate(&spec, 5, 0.05, 9).unwrap();
        let mut field = RandomFieldSpec::constant(CylindricalFunctional::power_of_mean(2));
        field.fv_terms.push(FieldTerm {
            schedule: Schedule { breakpoints: vec![0.0, 0.4], pieces: vec![vec![1.0, 2.0], vec![-1.0]] },
            functional: CylindricalFunctional::power_of_mean(3),
        });
        field.mart_terms.push(mean_term(0.7));
        let m = EmpiricalMeasure::uniform(&[0.5, 1.5]).unwrap();
        assert!(derivative_transport_gap(&field, &path, 0.9, &m, 0.3).unwrap() < 1e-12);
        let dx = field_eval(&field, &path, 0.9, DerivativeQuery::at(QueryKind::DxFlat, &m, 0.3)).unwrap();
        assert!(dx.is_finite());
    }

    #[test]
    fn pure_common_jump_partition_sums_settle() {
        let mut spec = ModelSpec::new(1.0, EmpiricalMeasure::uniform(&[0.0, 1.0]).unwrap())
            .with_common_intensity(Coefficient::Constant(3.0));
        spec.gamma0 = Coefficient::Constant(1.0);
        let path = simulate(&spec, 6, 0.1, 5).unwrap();
        let mut field = RandomFieldSpec::constant(CylindricalFunctional::zero());
        field.fv_driver = FvDriver::CommonJumpCount;
        field.fv_terms.push(FieldTerm { schedule: Schedule::constant(1.0), functional: CylindricalFunctional::power_of_mean(3) });
        let grid = crate::ito::with_jump_times(&crate::ito::dyadic_partition(1.0, 2), &path);
        let rows = field_partition_diagnostic(&field, &path, &[grid], [0.5; 3]).unwrap();
        assert!((rows[0].single_sum - rows[0].single_limit).abs() < 1e-12, "{rows:?}");
        assert!((rows[0].pair_sum - rows[0].pair_limit).abs() < 1e-12, "{rows:?}");
    }
}
