//! Slow reference computations used to cross-check the fast paths.

use crate::functional::{CylindricalFunctional, Frozen};
use crate::measure::EmpiricalMeasure;
use crate::numeric::pairwise_sum;

/// Every permutation of `0..n`, by Heap's algorithm.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    let mut c = vec![0; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            out.push(p.clone());
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// `min_sigma (1/n) sum |x_i - y_sigma(i)|^order` over all permutations,
/// returned as a distance. Both samples carry uniform weights.
pub fn brute_force_wasserstein(xs: &[f64], ys: &[f64], order: u32) -> f64 {
    assert_eq!(xs.len(), ys.len(), "samples must have equal size");
    let n = xs.len();
    let best = permutations(n)
        .iter()
        .map(|s| {
            let costs: Vec<f64> = (0..n).map(|i| (xs[i] - ys[s[i]]).abs().powi(order as i32)).collect();
            pairwise_sum(&costs) / n as f64
        })
        .fold(f64::INFINITY, f64::min);
    best.powf(1.0 / order as f64)
}

/// `(1 / (n m)) sum_{i, j} dxdxhat_flat2(x_i, y_j) a_i b_j` term by term.
pub fn brute_pair_average(f: &Frozen<'_>, xs: &[f64], a: &[f64], ys: &[f64], b: &[f64]) -> f64 {
    let mut terms = Vec::with_capacity(xs.len() * ys.len());
    for (x, ai) in xs.iter().zip(a) {
        for (y, bj) in ys.iter().zip(b) {
            terms.push(f.dxdxhat_flat2(*x, *y) * ai * bj);
        }
    }
    pairwise_sum(&terms) / (xs.len() * ys.len()) as f64
}

/// Flat-derivative identity residual with a composite midpoint rule of
/// `cells` cells in the interpolation parameter, independent of the
/// Gauss-Legendre rule used elsewhere.
pub fn midpoint_flat_identity(
    u: &CylindricalFunctional,
    m0: &EmpiricalMeasure,
    m1: &EmpiricalMeasure,
    cells: usize,
) -> f64 {
    let mut terms = Vec::with_capacity(cells);
    for c in 0..cells {
        let lambda = (c as f64 + 0.5) / cells as f64;
        let m = m0.mix(m1, lambda).expect("lambda in [0, 1]");
        let f = u.at(&m);
        terms.push(m0.integrate(|x| f.flat(x)) - m1.integrate(|x| f.flat(x)));
    }
    let rhs = pairwise_sum(&terms) / cells as f64;
    (u.value(m0) - u.value(m1) - rhs).abs()
}
