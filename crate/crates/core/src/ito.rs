//! Term-by-term evaluation of the Ito formula along the empirical flow of a
//! simulated particle cohort, plus the partition diagnostics.
//!
//! For a functional `u` and the flow `m_t` of the particle cohort,
//!
//! ```text
//! u(m_t) - u(m_0) = sum_{s in J} [u(m_s) - u(m_{s-})]             jump_sum
//!                 + avg_i sum_{idio jumps} [flat(., X_s) - flat(., X_{s-})]
//!                 + avg_i int b dx_flat + 1/2 (sigma^2 + sigma0^2) dxx_flat ds
//!                 + avg_i int dx_flat sigma0 dW0
//!                 + 1/2 avg_{i,j} int dxdxhat_flat2(X^i, Xhat^j) sigma0 sigma0hat ds
//!                 + residual
//! ```
//!
//! where `J` is the set of common-jump nodes and the covariation average runs
//! over particle/copy pairs only.
//!
//! At finite `N` a single idiosyncratic jump moves the empirical measure by
//! `O(1/N)`. The idiosyncratic term integrates the flat derivative along the
//! segment from `m_{s-}` to `m_s`, which attributes that move exactly; the
//! left-limit version (measure frozen at `m_{s-}`) is reported alongside.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::functional::{CylindricalFunctional, Frozen};
use crate::numeric::{mean_std, pairwise_mean, pairwise_sum, GaussLegendre};
use crate::sde::{Coefficient, FlowCtx, ScenarioPath};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ItoTermBreakdown {
    pub t: f64,
    pub lhs: f64,
    pub jump_sum: f64,
    pub idio_jump_term: f64,
    /// Idiosyncratic term with the measure argument frozen at `m_{s-}`.
    pub idio_jump_term_left: f64,
    pub drift_term: f64,
    pub diffusion_term: f64,
    /// `drift_term + diffusion_term`: the `ds` and `dW0` integrals together.
    pub common_integral_term: f64,
    pub covariation_term: f64,
    pub residual: f64,
    /// Largest `|dx_flat|`, `|dxx_flat|` seen at particle locations.
    pub derivative_sup: f64,
}

impl ItoTermBreakdown {
    /// Sum of all right-hand side terms.
    pub fn rhs(&self) -> f64 {
        pairwise_sum(&[
            self.jump_sum,
            self.idio_jump_term,
            self.drift_term,
            self.diffusion_term,
            self.covariation_term,
        ])
    }
}

/// Linear combination `sum_f w_f(node) u_f` of functionals whose weights may
/// change from node to node.
pub(crate) struct FieldView<'a> {
    pub fns: Vec<&'a CylindricalFunctional>,
    pub weights: &'a dyn Fn(usize) -> Vec<f64>,
}

struct Snapshot<'a> {
    frozen: Vec<Frozen<'a>>,
}

impl<'a> Snapshot<'a> {
    fn new(fns: &[&'a CylindricalFunctional], xs: &[f64]) -> Self {
        Self { frozen: fns.iter().map(|u| u.at_uniform(xs)).collect() }
    }

    fn value(&self, w: &[f64]) -> f64 {
        self.frozen.iter().zip(w).map(|(f, w)| w * f.value()).sum()
    }

    fn dx(&self, w: &[f64], x: f64) -> f64 {
        self.frozen.iter().zip(w).map(|(f, w)| w * f.dx_flat(x)).sum()
    }

    fn dxx(&self, w: &[f64], x: f64) -> f64 {
        self.frozen.iter().zip(w).map(|(f, w)| w * f.dxx_flat(x)).sum()
    }
}

pub fn verify_ito(u: &CylindricalFunctional, path: &ScenarioPath, t: f64) -> Result<ItoTermBreakdown> {
    let weights = |_: usize| vec![1.0];
    let view = FieldView { fns: vec![u], weights: &weights };
    ito_terms(&view, path, t)
}

fn upto_node(path: &ScenarioPath, t: f64) -> Result<usize> {
    if !(t > 0.0) {
        return Err(Error::HorizonExceeded { t, horizon: path.horizon() });
    }
    path.node_at(t)
}

pub(crate) fn ito_terms(view: &FieldView<'_>, path: &ScenarioPath, t: f64) -> Result<ItoTermBreakdown> {
    let upto = upto_node(path, t)?;
    let spec = &path.model;
    let exact = spec.uses_measure();
    let n = path.n();
    let fns = &view.fns;
    let has_sigma0 = !spec.sigma0.is_zero();

    let mut drift = Vec::with_capacity(upto);
    let mut diffusion = Vec::with_capacity(upto);
    let mut covariation = Vec::with_capacity(upto);
    let mut jumps = Vec::new();
    let mut idio = Vec::new();
    let mut idio_left = Vec::new();
    let mut sup = 0.0f64;

    let mut snap = Snapshot::new(fns, path.particles.row(0));
    let lhs0 = snap.value(&(view.weights)(0));
    let mut drift_i = vec![0.0; n];
    let mut diff_i = vec![0.0; n];
    let mut s0p = vec![0.0; n];
    let mut s0c = vec![0.0; n];
    for k in 0..upto {
        let w = (view.weights)(k);
        let (tk, h) = (path.times[k], path.times[k + 1] - path.times[k]);
        let xs = path.particles.row(k);
        let ctx = FlowCtx::new(xs, exact);
        for (i, &x) in xs.iter().enumerate() {
            let b = spec.drift.eval(tk, &ctx, x);
            let s = spec.sigma.eval(tk, &ctx, x);
            let s0 = spec.sigma0.eval(tk, &ctx, x);
            let dx = snap.dx(&w, x);
            let dxx = snap.dxx(&w, x);
            sup = sup.max(dx.abs()).max(dxx.abs());
            drift_i[i] = (b * dx + 0.5 * (s * s + s0 * s0) * dxx) * h;
            diff_i[i] = dx * s0 * path.dw0[k];
            s0p[i] = s0;
        }
        drift.push(pairwise_mean(&drift_i));
        diffusion.push(pairwise_mean(&diff_i));
        if has_sigma0 {
            let ys = path.copies.row(k);
            for (j, &y) in ys.iter().enumerate() {
                s0c[j] = spec.sigma0.eval(tk, &ctx, y);
            }
            let pair: Vec<f64> = snap
                .frozen
                .iter()
                .zip(&w)
                .map(|(f, wf)| wf * f.pair_average_dxdxhat(xs, &s0p, ys, &s0c))
                .collect();
            covariation.push(0.5 * pairwise_sum(&pair) * h);
        }

        // Events at node k + 1, seen by the field of node k.
        let node = k + 1;
        let next = Snapshot::new(fns, path.particles.row(node));
        if path.is_common_jump(node) {
            let pre = Snapshot::new(fns, &path.particles.pre_row(node));
            jumps.push(next.value(&w) - pre.value(&w));
        }
        let pj = path.particles.jumps_at(node);
        if !pj.is_empty() {
            let pre_row = path.particles.pre_row(node);
            for (f, u) in fns.iter().enumerate() {
                if w[f] == 0.0 {
                    continue;
                }
                let y_pre = u.projections_uniform(&pre_row);
                let (inner, _, _) = u.inner_fns();
                let rule = u.lambda_rule(0);
                for j in pj {
                    let shift: Vec<f64> =
                        inner.iter().map(|p| (p.eval(j.post) - p.eval(j.pre)) / n as f64).collect();
                    let seg = segment_flat_increment(u, &rule, &y_pre, &shift, j.pre, j.post);
                    idio.push(w[f] * seg / n as f64);
                    let left = u.at_projections(y_pre.clone());
                    idio_left.push(w[f] * (left.flat(j.post) - left.flat(j.pre)) / n as f64);
                }
            }
        }
        snap = next;
    }
    let lhs = snap.value(&(view.weights)(upto)) - lhs0;

    let mut out = ItoTermBreakdown {
        t: path.times[upto],
        lhs,
        jump_sum: pairwise_sum(&jumps),
        idio_jump_term: pairwise_sum(&idio),
        idio_jump_term_left: pairwise_sum(&idio_left),
        drift_term: pairwise_sum(&drift),
        diffusion_term: pairwise_sum(&diffusion),
        common_integral_term: 0.0,
        covariation_term: pairwise_sum(&covariation),
        residual: 0.0,
        derivative_sup: sup,
    };
    out.common_integral_term = out.drift_term + out.diffusion_term;
    out.residual = out.lhs - out.rhs();
    Ok(out)
}

/// `int_0^1 [flat(y + l s, post) - flat(y + l s, pre)] dl`.
fn segment_flat_increment(
    u: &CylindricalFunctional,
    rule: &GaussLegendre,
    y: &[f64],
    shift: &[f64],
    pre: f64,
    post: f64,
) -> f64 {
    rule.integrate(|l| {
        let yl = y.iter().zip(shift).map(|(a, b)| a + l * b).collect();
        let f = u.at_projections(yl);
        f.flat(post) - f.flat(pre)
    })
}

/// `2^level` equal intervals of `[0, horizon]`.
pub fn dyadic_partition(horizon: f64, level: u32) -> Vec<f64> {
    let n = 1usize << level;
    (0..=n).map(|i| if i == n { horizon } else { horizon * i as f64 / n as f64 }).collect()
}

/// Union of `grid` with every node where some particle or the common noise
/// jumped.
pub fn with_jump_times(grid: &[f64], path: &ScenarioPath) -> Vec<f64> {
    let mut out = grid.to_vec();
    out.extend(path.common.iter().filter(|e| e.displaced).map(|e| e.time));
    out.extend(path.particles.jumps().iter().map(|j| path.times[j.node]));
    out.extend(path.copies.jumps().iter().map(|j| path.times[j.node]));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn partition_nodes(path: &ScenarioPath, grid: &[f64]) -> Result<Vec<usize>> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument("partition needs at least two points".into()));
    }
    let mut nodes = Vec::with_capacity(grid.len());
    for &t in grid {
        let k = path.node_at(t)?;
        if nodes.last().is_some_and(|&p| k < p) {
            return Err(Error::InvalidArgument("partition times must be non-decreasing".into()));
        }
        nodes.push(k);
    }
    Ok(nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionDecomposition {
    pub intervals: usize,
    /// `|sum_n [u(m_n) - u(m_{n-1})] - (u(m_last) - u(m_first))|`
    pub telescoping_check: f64,
    /// `sum_n avg_i [flat(m_{n-1}, X_n) - flat(m_{n-1}, X_{n-1})]`
    pub s_sum: f64,
    /// Second-order part with particle/copy pairs.
    pub t_diff_sum: f64,
    /// Second-order part with particle/particle pairs; makes the
    /// decomposition an identity.
    pub t_diff_exact_sum: f64,
    /// `|s_sum + t_diff_exact_sum - lhs|`
    pub decomposition_gap: f64,
    /// `|s_sum + t_diff_sum - lhs|`
    pub copy_gap: f64,
    pub lhs: f64,
    /// Event-grid limit of `s_sum`.
    pub s_limit: f64,
    /// Event-grid limit of `t_diff_sum`.
    pub t_limit: f64,
}

/// Splits `u(m_T) - u(m_0)` over the partition `grid` into first- and
/// second-order parts, and compares each with its event-grid limit.
pub fn partition_decomposition(
    u: &CylindricalFunctional,
    path: &ScenarioPath,
    grid: &[f64],
) -> Result<PartitionDecomposition> {
    let nodes = partition_nodes(path, grid)?;
    let k = u.arity();
    let proj = |row: &[f64]| u.projections_uniform(row);
    let yp: Vec<Vec<f64>> = nodes.iter().map(|&n| proj(path.particles.row(n))).collect();
    let yc: Vec<Vec<f64>> = nodes.iter().map(|&n| proj(path.copies.row(n))).collect();
    let values: Vec<f64> = yp.iter().map(|y| u.jet(y).value).collect();

    let increments: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let lhs = values[values.len() - 1] - values[0];
    let telescoping_check = (pairwise_sum(&increments) - lhs).abs();

    // The measure flat derivative averaged over the particles is
    // sum_j dG_j <phi_j, m>, so S_n is the gradient against the projection
    // increment.
    let rule = u.lambda_rule(1);
    let mut s = Vec::new();
    let mut tc = Vec::new();
    let mut tx = Vec::new();
    for n in 1..nodes.len() {
        let (y0, y1) = (&yp[n - 1], &yp[n]);
        let dy: Vec<f64> = y1.iter().zip(y0).map(|(a, b)| a - b).collect();
        let dyc: Vec<f64> = yc[n].iter().zip(&yc[n - 1]).map(|(a, b)| a - b).collect();
        let g = u.jet(y0);
        s.push((0..k).map(|j| g.grad[j] * dy[j]).sum());
        // int_{[0,1]^2} H(y0 + l1 l2 dy) l1 dl1 dl2; the lambda_3, lambda_4
        // integrals of dphi(X^lambda) dX collapse to phi increments.
        let h = tensor_hessian_weighted(u, &rule, y0, &dy);
        tc.push(bilinear(&h, &dy, &dyc, k));
        tx.push(bilinear(&h, &dy, &dy, k));
    }
    let s_sum = pairwise_sum(&s);
    let t_diff_sum = pairwise_sum(&tc);
    let t_diff_exact_sum = pairwise_sum(&tx);

    let t_end = path.times[*nodes.last().expect("non-empty")];
    let (s_limit, t_limit) = if t_end > 0.0 {
        let terms = verify_ito(u, path, t_end)?;
        let (s_jump, t_jump) = common_jump_limits(u, path, *nodes.last().expect("non-empty"))?;
        (
            terms.idio_jump_term_left + terms.drift_term + terms.diffusion_term + s_jump,
            terms.covariation_term + t_jump,
        )
    } else {
        (0.0, 0.0)
    };
    Ok(PartitionDecomposition {
        intervals: nodes.len() - 1,
        telescoping_check,
        s_sum,
        t_diff_sum,
        t_diff_exact_sum,
        decomposition_gap: (s_sum + t_diff_exact_sum - lhs).abs(),
        copy_gap: (s_sum + t_diff_sum - lhs).abs(),
        lhs,
        s_limit,
        t_limit,
    })
}

fn tensor_hessian_weighted(u: &CylindricalFunctional, rule: &GaussLegendre, y0: &[f64], dy: &[f64]) -> Vec<f64> {
    let k = u.arity();
    let mut acc = vec![0.0; k * k];
    for (&l1, &w1) in rule.nodes.iter().zip(&rule.weights) {
        for (&l2, &w2) in rule.nodes.iter().zip(&rule.weights) {
            let r = l1 * l2;
            let y: Vec<f64> = y0.iter().zip(dy).map(|(a, b)| a + r * b).collect();
            let jet = u.jet(&y);
            for (a, h) in acc.iter_mut().zip(&jet.hess) {
                *a += w1 * w2 * l1 * h;
            }
        }
    }
    acc
}

fn bilinear(h: &[f64], a: &[f64], b: &[f64], k: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..k {
        for l in 0..k {
            acc += h[j * k + l] * a[j] * b[l];
        }
    }
    acc
}

/// Common-jump contributions to the limits of the first- and second-order
/// partition sums, up to `upto`.
fn common_jump_limits(u: &CylindricalFunctional, path: &ScenarioPath, upto: usize) -> Result<(f64, f64)> {
    let k = u.arity();
    let rule = u.lambda_rule(1);
    let mut s = Vec::new();
    let mut t = Vec::new();
    for node in path.common_jump_nodes().into_iter().filter(|&n| n <= upto) {
        let y0 = u.projections_uniform(&path.particles.pre_row(node));
        let y1 = u.projections_uniform(path.particles.row(node));
        let c0 = u.projections_uniform(&path.copies.pre_row(node));
        let c1 = u.projections_uniform(path.copies.row(node));
        let dy: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
        let dyc: Vec<f64> = c1.iter().zip(&c0).map(|(a, b)| a - b).collect();
        let g = u.jet(&y0);
        s.push((0..k).map(|j| g.grad[j] * dy[j]).sum());
        let h = tensor_hessian_weighted(u, &rule, &y0, &dy);
        t.push(bilinear(&h, &dy, &dyc, k));
    }
    Ok((pairwise_sum(&s), pairwise_sum(&t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketRow {
    pub intervals: usize,
    /// `avg_i sum_n H(t_{n-1}, m_{t_{n-1}}, X^i_{t_{n-1}}) (dX^i_n)^2`
    pub partition_sum: f64,
    /// Event-grid value of `avg_i int H(s-) d[X^i]_s`.
    pub limit: f64,
    pub gap: f64,
    /// Three standard errors of the particle average of the per-particle gap.
    pub band: f64,
}

/// Left partition sums of `H (dX)^2` on each grid against their event-grid
/// limit.
pub fn bracket_convergence_check(
    h: &Coefficient,
    path: &ScenarioPath,
    grids: &[Vec<f64>],
) -> Result<Vec<BracketRow>> {
    let spec = &path.model;
    let exact = spec.uses_measure() || h.uses_measure();
    let n = path.n();
    let mut limit_i = vec![0.0; n];
    let last = path.num_nodes() - 1;
    for k in 0..last {
        let (tk, dt) = (path.times[k], path.times[k + 1] - path.times[k]);
        let xs = path.particles.row(k);
        let ctx = FlowCtx::new(xs, exact);
        for (i, &x) in xs.iter().enumerate() {
            let s = spec.sigma.eval(tk, &ctx, x);
            let s0 = spec.sigma0.eval(tk, &ctx, x);
            limit_i[i] += h.checked("H", tk, &ctx, x)? * (s * s + s0 * s0) * dt;
        }
        let node = k + 1;
        let jumped = path.is_common_jump(node) || !path.particles.jumps_at(node).is_empty();
        if jumped {
            let pre = path.particles.pre_row(node);
            let post = path.particles.row(node);
            let pctx = FlowCtx::new(&pre, exact);
            for i in 0..n {
                let d = post[i] - pre[i];
                if d != 0.0 {
                    limit_i[i] += h.checked("H", path.times[node], &pctx, pre[i])? * d * d;
                }
            }
        }
    }
    let limit = pairwise_mean(&limit_i);

    let mut rows = Vec::with_capacity(grids.len());
    for grid in grids {
        let nodes = partition_nodes(path, grid)?;
        let mut sum_i = vec![0.0; n];
        for w in nodes.windows(2) {
            let (a, b) = (w[0], w[1]);
            let xa = path.particles.row(a);
            let xb = path.particles.row(b);
            let ctx = FlowCtx::new(xa, exact);
            for i in 0..n {
                let d = xb[i] - xa[i];
                sum_i[i] += h.checked("H", path.times[a], &ctx, xa[i])? * d * d;
            }
        }
        let gaps: Vec<f64> = sum_i.iter().zip(&limit_i).map(|(a, b)| a - b).collect();
        let (_, sd) = mean_std(&gaps);
        let partition_sum = pairwise_mean(&sum_i);
        rows.push(BracketRow {
            intervals: nodes.len() - 1,
            partition_sum,
            limit,
            gap: (partition_sum - limit).abs(),
            band: 3.0 * sd / (n as f64).sqrt(),
        });
    }
    Ok(rows)
}

/// Number of copy jumps that share a time with some particle jump.
pub fn jump_pairing_check(path: &ScenarioPath) -> usize {
    let mut particle_nodes: Vec<usize> = path.particles.jumps().iter().map(|j| j.node).collect();
    particle_nodes.dedup();
    path.copies
        .jumps()
        .iter()
        .filter(|j| particle_nodes.binary_search(&j.node).is_ok())
        .count()
}
