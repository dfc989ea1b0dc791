//! Cylindrical functionals `u(m) = G(<phi_1, m>, ..., <phi_k, m>)` with their
//! closed-form derivative stack.
//!
//! `G` is a multivariate polynomial, optionally wrapped in `tanh`. Inner
//! functions `phi_j` are univariate polynomials. All derivatives follow from
//! the chain rule:
//!
//! * `flat(m, x)          = sum_j dG_j phi_j(x)`
//! * `flat2(m, x, y)      = sum_jl d2G_jl phi_j(x) phi_l(y)`
//! * `dxdxhat_flat2(m,x,y)= sum_jl d2G_jl phi_j'(x) phi_l'(y)`

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::numeric::{pairwise_mean, pairwise_sum, GaussLegendre};

/// Node count used for the `tanh` wrapper, where no finite rule is exact.
const TANH_NODES: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poly {
    /// `coeffs[i]` multiplies `x^i`.
    pub coeffs: Vec<f64>,
}

impl Poly {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn identity() -> Self {
        Self::new(vec![0.0, 1.0])
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn derivative(&self) -> Poly {
        if self.coeffs.len() <= 1 {
            return Poly::new(vec![0.0]);
        }
        Poly::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &c)| i as f64 * c)
                .collect(),
        )
    }

    pub fn degree(&self) -> usize {
        self.coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub exponents: Vec<u32>,
    pub coef: f64,
}

/// Polynomial in `k` variables, stored as a list of monomials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiPoly {
    pub arity: usize,
    pub terms: Vec<Monomial>,
}

impl MultiPoly {
    pub fn new(arity: usize, terms: Vec<Monomial>) -> Result<Self> {
        for t in &terms {
            if t.exponents.len() != arity {
                return Err(Error::InvalidArgument(format!(
                    "monomial with {} exponents in a {}-variable polynomial",
                    t.exponents.len(),
                    arity
                )));
            }
        }
        Ok(Self { arity, terms })
    }

    pub fn total_degree(&self) -> usize {
        self.terms
            .iter()
            .filter(|t| t.coef != 0.0)
            .map(|t| t.exponents.iter().sum::<u32>() as usize)
            .max()
            .unwrap_or(0)
    }

    /// Value, gradient and Hessian at `y`.
    pub fn jet(&self, y: &[f64]) -> Jet {
        let k = self.arity;
        let mut value = 0.0;
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        for t in &self.terms {
            let e = &t.exponents;
            let pow = |j: usize, d: u32| -> f64 {
                if e[j] < d {
                    0.0
                } else {
                    y[j].powi((e[j] - d) as i32)
                }
            };
            let falling = |j: usize, d: u32| -> f64 { (0..d).map(|i| e[j].saturating_sub(i) as f64).product() };
            let base: Vec<f64> = (0..k).map(|j| pow(j, 0)).collect();
            let prod_except = |skip: &[usize]| -> f64 {
                (0..k).filter(|j| !skip.contains(j)).map(|j| base[j]).product()
            };
            value += t.coef * prod_except(&[]);
            for j in 0..k {
                if e[j] == 0 {
                    continue;
                }
                grad[j] += t.coef * falling(j, 1) * pow(j, 1) * prod_except(&[j]);
                for l in j..k {
                    let h = if l == j {
                        falling(j, 2) * pow(j, 2) * prod_except(&[j])
                    } else if e[l] == 0 {
                        0.0
                    } else {
                        falling(j, 1) * pow(j, 1) * falling(l, 1) * pow(l, 1) * prod_except(&[j, l])
                    };
                    hess[j * k + l] += t.coef * h;
                }
            }
        }
        for j in 0..k {
            for l in 0..j {
                hess[j * k + l] = hess[l * k + j];
            }
        }
        Jet { value, grad, hess }
    }
}

/// Value, gradient and (symmetric, row-major) Hessian of the outer function.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterKind {
    Poly,
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CylindricalFunctional {
    outer: MultiPoly,
    kind: OuterKind,
    inner: Vec<Poly>,
    dinner: Vec<Poly>,
    ddinner: Vec<Poly>,
}

/// Config-file form of a functional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    #[serde(default = "default_outer_kind")]
    pub outer: OuterKind,
    /// Coefficient lists of the inner polynomials, lowest degree first.
    pub inner: Vec<Vec<f64>>,
    pub terms: Vec<Monomial>,
}

fn default_outer_kind() -> OuterKind {
    OuterKind::Poly
}

impl FunctionalSpec {
    pub fn build(&self) -> Result<CylindricalFunctional> {
        let outer = MultiPoly::new(self.inner.len(), self.terms.clone())?;
        CylindricalFunctional::new(
            outer,
            self.inner.iter().cloned().map(Poly::new).collect(),
            self.outer,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Value,
    Flat,
    Flat2,
    DxFlat,
    DxxFlat,
    DxDxhatFlat2,
}

impl QueryKind {
    fn arity(self) -> usize {
        match self {
            QueryKind::Value => 0,
            QueryKind::Flat | QueryKind::DxFlat | QueryKind::DxxFlat => 1,
            QueryKind::Flat2 | QueryKind::DxDxhatFlat2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DerivativeQuery<'a> {
    pub which: QueryKind,
    pub m: &'a EmpiricalMeasure,
    pub x: Option<f64>,
    pub xhat: Option<f64>,
}

impl<'a> DerivativeQuery<'a> {
    pub fn value(m: &'a EmpiricalMeasure) -> Self {
        Self { which: QueryKind::Value, m, x: None, xhat: None }
    }

    pub fn at(which: QueryKind, m: &'a EmpiricalMeasure, x: f64) -> Self {
        Self { which, m, x: Some(x), xhat: None }
    }

    pub fn pair(which: QueryKind, m: &'a EmpiricalMeasure, x: f64, xhat: f64) -> Self {
        Self { which, m, x: Some(x), xhat: Some(xhat) }
    }
}

impl CylindricalFunctional {
    pub fn new(outer: MultiPoly, inner: Vec<Poly>, kind: OuterKind) -> Result<Self> {
        if outer.arity != inner.len() {
            return Err(Error::InvalidArgument(format!(
                "outer polynomial has {} variables but {} inner functions given",
                outer.arity,
                inner.len()
            )));
        }
        let dinner: Vec<Poly> = inner.iter().map(Poly::derivative).collect();
        let ddinner = dinner.iter().map(Poly::derivative).collect();
        Ok(Self { outer, kind, inner, dinner, ddinner })
    }

    /// `u(m) = <x, m>`.
    pub fn mean() -> Self {
        Self::power_of_mean(1)
    }

    /// `u(m) = <x, m>^p`.
    pub fn power_of_mean(p: u32) -> Self {
        let outer = MultiPoly { arity: 1, terms: vec![Monomial { exponents: vec![p], coef: 1.0 }] };
        Self::new(outer, vec![Poly::identity()], OuterKind::Poly).expect("arity matches")
    }

    /// The zero functional.
    pub fn zero() -> Self {
        let outer = MultiPoly { arity: 1, terms: vec![] };
        Self::new(outer, vec![Poly::identity()], OuterKind::Poly).expect("arity matches")
    }

    /// Random polynomial functional with `k` inner functions of degree
    /// `inner_degree` and outer total degree at most `degree`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, k: usize, degree: u32, inner_degree: usize) -> Self {
        let inner = (0..k)
            .map(|_| Poly::new((0..=inner_degree).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let mut terms = Vec::new();
        for_each_exponent(k, degree, &mut |e| {
            terms.push(Monomial { exponents: e.to_vec(), coef: rng.random_range(-1.0..1.0) });
        });
        Self::new(MultiPoly { arity: k, terms }, inner, OuterKind::Poly).expect("arity matches")
    }

    pub fn kind(&self) -> OuterKind {
        self.kind
    }

    pub fn arity(&self) -> usize {
        self.inner.len()
    }

    pub fn outer_degree(&self) -> usize {
        self.outer.total_degree()
    }

    pub fn inner_degree(&self) -> usize {
        self.inner.iter().map(Poly::degree).max().unwrap_or(0)
    }

    /// True when every second flat derivative vanishes identically.
    pub fn is_affine(&self) -> bool {
        self.kind == OuterKind::Poly && self.outer_degree() <= 1
    }

    /// Quadrature rule in the interpolation parameter `lambda` that is exact
    /// for integrands of the form `P(u-jet along (1 - lambda) m0 + lambda m1)`
    /// with `extra` additional powers of `lambda`.
    pub fn lambda_rule(&self, extra: usize) -> GaussLegendre {
        match self.kind {
            OuterKind::Poly => GaussLegendre::for_degree(self.outer_degree() + extra),
            OuterKind::Tanh => GaussLegendre::new(TANH_NODES + extra),
        }
    }

    pub fn projections(&self, m: &EmpiricalMeasure) -> Vec<f64> {
        self.inner.iter().map(|p| m.integrate(|x| p.eval(x))).collect()
    }

    /// Projections of the uniform measure on `xs`.
    pub fn projections_uniform(&self, xs: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; xs.len()];
        self.inner
            .iter()
            .map(|p| {
                for (b, &x) in buf.iter_mut().zip(xs) {
                    *b = p.eval(x);
                }
                pairwise_mean(&buf)
            })
            .collect()
    }

    /// Outer function jet at projection vector `y`.
    pub fn jet(&self, y: &[f64]) -> Jet {
        let mut j = self.outer.jet(y);
        if self.kind == OuterKind::Tanh {
            let t = j.value.tanh();
            let s = 1.0 - t * t;
            let k = self.arity();
            for a in 0..k {
                for b in 0..k {
                    j.hess[a * k + b] = s * j.hess[a * k + b] - 2.0 * t * s * j.grad[a] * j.grad[b];
                }
            }
            for g in j.grad.iter_mut() {
                *g *= s;
            }
            j.value = t;
        }
        j
    }

    /// Freeze the measure argument: all derivatives at `m`.
    pub fn at(&self, m: &EmpiricalMeasure) -> Frozen<'_> {
        self.at_projections(self.projections(m))
    }

    pub fn at_uniform(&self, xs: &[f64]) -> Frozen<'_> {
        self.at_projections(self.projections_uniform(xs))
    }

    pub fn at_projections(&self, y: Vec<f64>) -> Frozen<'_> {
        let jet = self.jet(&y);
        Frozen { u: self, y, jet }
    }

    pub fn value(&self, m: &EmpiricalMeasure) -> f64 {
        self.jet(&self.projections(m)).value
    }

    pub fn value_uniform(&self, xs: &[f64]) -> f64 {
        self.jet(&self.projections_uniform(xs)).value
    }

    pub fn eval(&self, q: DerivativeQuery<'_>) -> Result<f64> {
        let args = q.x.is_some() as usize + q.xhat.is_some() as usize;
        let expected = q.which.arity();
        if args != expected || (q.xhat.is_some() && q.x.is_none()) {
            return Err(Error::Arity {
                query: query_name(q.which),
                expected: match expected {
                    0 => "no point arguments",
                    1 => "exactly x",
                    _ => "x and xhat",
                },
            });
        }
        let f = self.at(q.m);
        let x = q.x.unwrap_or(0.0);
        let y = q.xhat.unwrap_or(0.0);
        Ok(match q.which {
            QueryKind::Value => f.value(),
            QueryKind::Flat => f.flat(x),
            QueryKind::Flat2 => f.flat2(x, y),
            QueryKind::DxFlat => f.dx_flat(x),
            QueryKind::DxxFlat => f.dxx_flat(x),
            QueryKind::DxDxhatFlat2 => f.dxdxhat_flat2(x, y),
        })
    }

    pub(crate) fn inner_fns(&self) -> (&[Poly], &[Poly], &[Poly]) {
        (&self.inner, &self.dinner, &self.ddinner)
    }
}

fn query_name(q: QueryKind) -> &'static str {
    match q {
        QueryKind::Value => "value",
        QueryKind::Flat => "flat",
        QueryKind::Flat2 => "flat2",
        QueryKind::DxFlat => "dx_flat",
        QueryKind::DxxFlat => "dxx_flat",
        QueryKind::DxDxhatFlat2 => "dxdxhat_flat2",
    }
}

fn for_each_exponent(k: usize, degree: u32, f: &mut dyn FnMut(&[u32])) {
    fn rec(e: &mut Vec<u32>, k: usize, left: u32, f: &mut dyn FnMut(&[u32])) {
        if e.len() == k {
            f(e);
            return;
        }
        for d in 0..=left {
            e.push(d);
            rec(e, k, left - d, f);
            e.pop();
        }
    }
    rec(&mut Vec::with_capacity(k), k, degree, f);
}

/// A functional with its measure argument fixed.
#[derive(Debug, Clone)]
pub struct Frozen<'a> {
    u: &'a CylindricalFunctional,
    y: Vec<f64>,
    jet: Jet,
}

impl Frozen<'_> {
    pub fn projections(&self) -> &[f64] {
        &self.y
    }

    pub fn value(&self) -> f64 {
        self.jet.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.jet.grad
    }

    pub fn hess(&self) -> &[f64] {
        &self.jet.hess
    }

    fn contract(&self, p: &[Poly], x: f64) -> f64 {
        let mut acc = 0.0;
        for (g, phi) in self.jet.grad.iter().zip(p) {
            acc += g * phi.eval(x);
        }
        acc
    }

    fn contract2(&self, p: &[Poly], q: &[Poly], x: f64, y: f64) -> f64 {
        let k = self.u.arity();
        let px: Vec<f64> = p.iter().map(|f| f.eval(x)).collect();
        let qy: Vec<f64> = q.iter().map(|f| f.eval(y)).collect();
        let mut acc = 0.0;
        for j in 0..k {
            for l in 0..k {
                acc += self.jet.hess[j * k + l] * px[j] * qy[l];
            }
        }
        acc
    }

    pub fn flat(&self, x: f64) -> f64 {
        self.contract(&self.u.inner, x)
    }

    pub fn dx_flat(&self, x: f64) -> f64 {
        self.contract(&self.u.dinner, x)
    }

    pub fn dxx_flat(&self, x: f64) -> f64 {
        self.contract(&self.u.ddinner, x)
    }

    pub fn flat2(&self, x: f64, xhat: f64) -> f64 {
        self.contract2(&self.u.inner, &self.u.inner, x, xhat)
    }

    pub fn dxdxhat_flat2(&self, x: f64, xhat: f64) -> f64 {
        self.contract2(&self.u.dinner, &self.u.dinner, x, xhat)
    }

    /// `(1/(n m)) sum_{i,j} a_i b_j dxdxhat_flat2(x_i, y_j)` in `O((n + m) k^2)`
    /// using the separable form of the second derivative.
    pub fn pair_average_dxdxhat(&self, xs: &[f64], a: &[f64], ys: &[f64], b: &[f64]) -> f64 {
        let k = self.u.arity();
        let left = weighted_projections(&self.u.dinner, xs, a);
        let right = weighted_projections(&self.u.dinner, ys, b);
        let mut terms = Vec::with_capacity(k * k);
        for j in 0..k {
            for l in 0..k {
                terms.push(self.jet.hess[j * k + l] * left[j] * right[l]);
            }
        }
        pairwise_sum(&terms)
    }

    /// `(1/n) sum_i a_i dx_flat(x_i)` and similar one-index averages are
    /// plain loops; this helper exists for the second-order one.
    pub fn weighted_dinner(&self, xs: &[f64], a: &[f64]) -> Vec<f64> {
        weighted_projections(&self.u.dinner, xs, a)
    }
}

fn weighted_projections(p: &[Poly], xs: &[f64], a: &[f64]) -> Vec<f64> {
    let mut buf = vec![0.0; xs.len()];
    p.iter()
        .map(|f| {
            for ((b, &x), &w) in buf.iter_mut().zip(xs).zip(a) {
                *b = w * f.eval(x);
            }
            pairwise_mean(&buf)
        })
        .collect()
}

/// `|u(m0) - u(m1) - int_0^1 <flat(mu_lambda, .), m0 - m1> d lambda|` with
/// `mu_lambda = (1 - lambda) m0 + lambda m1`, integrated by a `quad_nodes`
/// point Gauss-Legendre rule.
pub fn check_flat_identity(
    u: &CylindricalFunctional,
    m0: &EmpiricalMeasure,
    m1: &EmpiricalMeasure,
    quad_nodes: usize,
) -> f64 {
    let y0 = u.projections(m0);
    let y1 = u.projections(m1);
    let lhs = u.jet(&y0).value - u.jet(&y1).value;
    let rule = GaussLegendre::new(quad_nodes);
    let rhs = rule.integrate(|lambda| {
        let y: Vec<f64> = y0.iter().zip(&y1).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect();
        let f = u.at_projections(y);
        m0.integrate(|x| f.flat(x)) - m1.integrate(|x| f.flat(x))
    });
    (lhs - rhs).abs()
}

/// Node count that makes [`check_flat_identity`] exact for a polynomial
/// outer function; `tanh` functionals get a fixed generous rule.
pub fn flat_identity_nodes(u: &CylindricalFunctional) -> usize {
    u.lambda_rule(0).len().max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivativeReport {
    /// Central difference of `flat` in `x` against `dx_flat`.
    pub dx_error: f64,
    /// Central difference of `dx_flat` in `x` against `dxx_flat`.
    pub dxx_error: f64,
    /// Mixed central difference of `flat2` against `dxdxhat_flat2`.
    pub dxdxhat_error: f64,
    /// Central difference of `eps -> flat((1 - eps) m + eps delta_xhat, x)`
    /// against `flat2(m, x, xhat) - <flat2(m, x, .), m>`.
    pub flat2_error: f64,
    /// `|dxdxhat_flat2(x, xhat) - dxdxhat_flat2(xhat, x)|`.
    pub symmetry_error: f64,
}

impl DerivativeReport {
    pub fn max_error(&self) -> f64 {
        self.dx_error
            .max(self.dxx_error)
            .max(self.dxdxhat_error)
            .max(self.flat2_error)
            .max(self.symmetry_error)
    }
}

pub fn check_derivative_consistency(
    u: &CylindricalFunctional,
    m: &EmpiricalMeasure,
    x: f64,
    xhat: f64,
    h: f64,
) -> Result<DerivativeReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h={h} must be positive")));
    }
    let f = u.at(m);
    let dx_fd = (f.flat(x + h) - f.flat(x - h)) / (2.0 * h);
    let dxx_fd = (f.dx_flat(x + h) - f.dx_flat(x - h)) / (2.0 * h);
    let mixed_fd = (f.flat2(x + h, xhat + h) - f.flat2(x + h, xhat - h) - f.flat2(x - h, xhat + h)
        + f.flat2(x - h, xhat - h))
        / (4.0 * h * h);

    // Perturb along m_eps = (1 - eps) m + eps delta_xhat in projection space,
    // which allows eps < 0 for a central difference.
    let (inner, _, _) = u.inner_fns();
    let y = f.projections().to_vec();
    let target: Vec<f64> = inner.iter().map(|p| p.eval(xhat)).collect();
    let shifted = |eps: f64| -> f64 {
        let ye = y.iter().zip(&target).map(|(a, b)| a + eps * (b - a)).collect();
        u.at_projections(ye).flat(x)
    };
    let flat2_fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    let flat2_exact = f.flat2(x, xhat) - m.integrate(|z| f.flat2(x, z));

    Ok(DerivativeReport {
        dx_error: (dx_fd - f.dx_flat(x)).abs(),
        dxx_error: (dxx_fd - f.dxx_flat(x)).abs(),
        dxdxhat_error: (mixed_fd - f.dxdxhat_flat2(x, xhat)).abs(),
        flat2_error: (flat2_fd - flat2_exact).abs(),
        symmetry_error: (f.dxdxhat_flat2(x, xhat) - f.dxdxhat_flat2(xhat, x)).abs(),
    })
}

/// Largest absolute value of the first and second spatial derivatives over
/// the given points, at a fixed measure. Used as a boundedness ledger.
pub fn derivative_sup(f: &Frozen<'_>, xs: &[f64]) -> f64 {
    let mut sup = 0.0f64;
    for &x in xs {
        sup = sup.max(f.dx_flat(x).abs()).max(f.dxx_flat(x).abs());
    }
    sup
}
