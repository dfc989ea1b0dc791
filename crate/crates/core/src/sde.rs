//! Particle simulation of one-dimensional jump-diffusions with common noise:
//!
//! ```text
//! dX = b dt + sigma dW + gamma dN + sigma0 dW0 + gamma0 dN0
//! ```
//!
//! with coefficients depending on `(t, m_t, X_t)`, `m_t` the empirical law of
//! the particle cohort. Jumps are simulated by thinning dominating Poisson
//! proposals. Proposal times are inserted into the time grid, so every jump
//! happens exactly at a grid node and the pre-jump state is available there.
//!
//! A second cohort of "copies" is driven by the same common path and the
//! particle flow `m_t`, with its own idiosyncratic noise.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::numeric::{pairwise_mean, pairwise_sum};
use crate::streams::{substream, Cohort, Purpose};

/// Particles per rayon task when stepping a cohort.
const PAR_MIN_LEN: usize = 512;

pub type CoefficientFn = dyn Fn(f64, &EmpiricalMeasure, f64) -> f64 + Send + Sync;

/// A coefficient `(t, m, x) -> value` with a declared bound on its modulus.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// `clip(base + x * x_coef + mean * mean(m), -bound, bound)`
    Affine { base: f64, x: f64, mean: f64, bound: f64 },
    /// Arbitrary function. When `uses_measure` is false the function is
    /// handed a Dirac mass at the mean instead of the full empirical measure.
    Custom { f: Arc<CoefficientFn>, bound: f64, uses_measure: bool },
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Affine { base, x, mean, bound } => {
                write!(f, "Affine {{ base: {base}, x: {x}, mean: {mean}, bound: {bound} }}")
            }
            Coefficient::Custom { bound, uses_measure, .. } => {
                write!(f, "Custom {{ bound: {bound}, uses_measure: {uses_measure} }}")
            }
        }
    }
}

impl Default for Coefficient {
    fn default() -> Self {
        Coefficient::Constant(0.0)
    }
}

impl Coefficient {
    pub fn custom(
        bound: f64,
        uses_measure: bool,
        f: impl Fn(f64, &EmpiricalMeasure, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Coefficient::Custom { f: Arc::new(f), bound, uses_measure }
    }

    pub fn bound(&self) -> f64 {
        match self {
            Coefficient::Constant(c) => c.abs(),
            Coefficient::Affine { bound, .. } | Coefficient::Custom { bound, .. } => *bound,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coefficient::Constant(c) => *c == 0.0,
            _ => self.bound() == 0.0,
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Coefficient::Constant(c) => Some(*c),
            Coefficient::Affine { base, x, mean, bound } if *x == 0.0 && *mean == 0.0 => {
                Some(base.clamp(-bound, *bound))
            }
            _ => None,
        }
    }

    pub fn uses_measure(&self) -> bool {
        matches!(self, Coefficient::Custom { uses_measure: true, .. })
    }

    /// Value without bound checking.
    pub fn eval(&self, t: f64, ctx: &FlowCtx, x: f64) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Affine { base, x: cx, mean, bound } => {
                (base + cx * x + mean * ctx.mean).clamp(-bound, *bound)
            }
            Coefficient::Custom { f, .. } => f(t, &ctx.measure, x),
        }
    }

    /// Value, failing if a custom function leaves its declared bound.
    pub fn checked(&self, name: &'static str, t: f64, ctx: &FlowCtx, x: f64) -> Result<f64> {
        let v = self.eval(t, ctx, x);
        if let Coefficient::Custom { bound, .. } = self {
            if !(v.abs() <= *bound) {
                return Err(Error::BoundViolation { name, value: v, bound: *bound, x });
            }
        }
        Ok(v)
    }
}

/// Config-file form: a bare number or an affine table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoefficientSpec {
    Constant(f64),
    Affine {
        #[serde(default)]
        base: f64,
        #[serde(default)]
        x: f64,
        #[serde(default)]
        mean: f64,
        bound: f64,
    },
}

impl Default for CoefficientSpec {
    fn default() -> Self {
        CoefficientSpec::Constant(0.0)
    }
}

impl CoefficientSpec {
    pub fn build(&self) -> Coefficient {
        match *self {
            CoefficientSpec::Constant(c) => Coefficient::Constant(c),
            CoefficientSpec::Affine { base, x, mean, bound } => Coefficient::Affine { base, x, mean, bound },
        }
    }
}

/// Measure argument handed to coefficients.
#[derive(Debug, Clone)]
pub struct FlowCtx {
    pub mean: f64,
    pub measure: EmpiricalMeasure,
}

impl FlowCtx {
    /// Uniform measure over `xs`; the full measure is only built when
    /// `exact` is set, otherwise a Dirac mass at the mean stands in.
    pub fn new(xs: &[f64], exact: bool) -> Self {
        let mean = pairwise_mean(xs);
        let measure = if exact {
            EmpiricalMeasure::uniform(xs).expect("non-empty cohort")
        } else {
            EmpiricalMeasure::dirac(mean)
        };
        Self { mean, measure }
    }

    pub fn from_measure(m: &EmpiricalMeasure) -> Self {
        Self { mean: m.mean(), measure: m.clone() }
    }
}

/// Finite jump-size law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteLaw {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl DiscreteLaw {
    pub fn dirac(v: f64) -> Self {
        Self { values: vec![v], probs: vec![1.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.len() != self.probs.len() {
            return Err(Error::InvalidArgument("jump law needs matching non-empty values and probs".into()));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0)) || self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("jump law has negative or non-finite entries".into()));
        }
        let total = pairwise_sum(&self.probs);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("jump law probabilities sum to {total}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (v, p) in self.values.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *v;
            }
        }
        *self.values.last().expect("validated non-empty")
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * v * p).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Coefficients, intensities, jump laws, horizon and initial law.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub drift: Coefficient,
    pub sigma: Coefficient,
    pub sigma0: Coefficient,
    pub gamma: Coefficient,
    pub gamma0: Coefficient,
    pub intensity: Coefficient,
    /// Dominating rate of the idiosyncratic proposals.
    pub intensity_bound: f64,
    pub common_intensity: Coefficient,
    /// Dominating rate of the common proposals.
    pub common_intensity_bound: f64,
    pub jump_law: DiscreteLaw,
    pub common_jump_law: DiscreteLaw,
    pub horizon: f64,
    pub initial: EmpiricalMeasure,
}

impl ModelSpec {
    /// Frozen dynamics started from `initial`; set fields to taste.
    pub fn new(horizon: f64, initial: EmpiricalMeasure) -> Self {
        Self {
            drift: Coefficient::default(),
            sigma: Coefficient::default(),
            sigma0: Coefficient::default(),
            gamma: Coefficient::default(),
            gamma0: Coefficient::default(),
            intensity: Coefficient::default(),
            intensity_bound: 0.0,
            common_intensity: Coefficient::default(),
            common_intensity_bound: 0.0,
            jump_law: DiscreteLaw::dirac(1.0),
            common_jump_law: DiscreteLaw::dirac(1.0),
            horizon,
            initial,
        }
    }

    /// Dominating rates default to the declared intensity bounds.
    pub fn with_intensity(mut self, intensity: Coefficient) -> Self {
        self.intensity_bound = intensity.bound();
        self.intensity = intensity;
        self
    }

    pub fn with_common_intensity(mut self, intensity: Coefficient) -> Self {
        self.common_intensity_bound = intensity.bound();
        self.common_intensity = intensity;
        self
    }

    fn coefficients(&self) -> [(&'static str, &Coefficient); 5] {
        [
            ("drift", &self.drift),
            ("sigma", &self.sigma),
            ("sigma0", &self.sigma0),
            ("gamma", &self.gamma),
            ("gamma0", &self.gamma0),
        ]
    }

    pub fn uses_measure(&self) -> bool {
        self.coefficients().iter().any(|(_, c)| c.uses_measure())
            || self.intensity.uses_measure()
            || self.common_intensity.uses_measure()
    }

    /// Checks the declared bounds on a sample of times and locations around
    /// the initial support.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon {} must be positive", self.horizon)));
        }
        for (name, rate) in [("intensity_bound", self.intensity_bound), ("common_intensity_bound", self.common_intensity_bound)] {
            if !(rate >= 0.0) || !rate.is_finite() {
                return Err(Error::InvalidArgument(format!("{name}={rate} must be finite and >= 0")));
            }
        }
        self.jump_law.validate()?;
        self.common_jump_law.validate()?;
        let ctx = FlowCtx::from_measure(&self.initial);
        let atoms = self.initial.atoms();
        let lo = atoms.first().map_or(0.0, |a| a.x) - 1.0;
        let hi = atoms.last().map_or(0.0, |a| a.x) + 1.0;
        for ti in 0..=4 {
            let t = self.horizon * ti as f64 / 4.0;
            for xi in 0..=8 {
                let x = lo + (hi - lo) * xi as f64 / 8.0;
                for (name, c) in self.coefficients() {
                    c.checked(name, t, &ctx, x)?;
                }
                self.check_intensity(&self.intensity, self.intensity_bound, t, &ctx, x)?;
                self.check_intensity(&self.common_intensity, self.common_intensity_bound, t, &ctx, x)?;
            }
        }
        Ok(())
    }

    fn check_intensity(&self, c: &Coefficient, bound: f64, t: f64, ctx: &FlowCtx, x: f64) -> Result<f64> {
        let v = c.eval(t, ctx, x);
        if !(v >= 0.0) || v > bound {
            return Err(Error::IntensityDomination { t, mean: ctx.mean, x, value: v, bound });
        }
        Ok(v)
    }
}

/// Config-file form of [`ModelSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub horizon: f64,
    /// Initial atoms; uniform weights unless `initial_weights` is given.
    pub initial: Vec<f64>,
    #[serde(default)]
    pub initial_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub drift: CoefficientSpec,
    #[serde(default)]
    pub sigma: CoefficientSpec,
    #[serde(default)]
    pub sigma0: CoefficientSpec,
    #[serde(default)]
    pub gamma: CoefficientSpec,
    #[serde(default)]
    pub gamma0: CoefficientSpec,
    #[serde(default)]
    pub intensity: CoefficientSpec,
    #[serde(default)]
    pub intensity_bound: Option<f64>,
    #[serde(default)]
    pub common_intensity: CoefficientSpec,
    #[serde(default)]
    pub common_intensity_bound: Option<f64>,
    #[serde(default = "unit_law")]
    pub jump_law: DiscreteLaw,
    #[serde(default = "unit_law")]
    pub common_jump_law: DiscreteLaw,
}

fn unit_law() -> DiscreteLaw {
    DiscreteLaw::dirac(1.0)
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let initial = match &self.initial_weights {
            None => EmpiricalMeasure::uniform(&self.initial)?,
            Some(w) if w.len() == self.initial.len() => {
                EmpiricalMeasure::new(self.initial.iter().copied().zip(w.iter().copied()))?
            }
            Some(_) => return Err(Error::Config("initial_weights length differs from initial".into())),
        };
        let intensity = self.intensity.build();
        let common_intensity = self.common_intensity.build();
        let spec = ModelSpec {
            drift: self.drift.build(),
            sigma: self.sigma.build(),
            sigma0: self.sigma0.build(),
            gamma: self.gamma.build(),
            gamma0: self.gamma0.build(),
            intensity_bound: self.intensity_bound.unwrap_or(intensity.bound()),
            intensity,
            common_intensity_bound: self.common_intensity_bound.unwrap_or(common_intensity.bound()),
            common_intensity,
            jump_law: self.jump_law.clone(),
            common_jump_law: self.common_jump_law.clone(),
            horizon: self.horizon,
            initial,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Drive the copy cohort with the particles' idiosyncratic streams.
    /// Breaks conditional independence; only useful as a negative control.
    pub share_copy_streams: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub time: f64,
    pub mark: f64,
    pub theta: f64,
}

/// A common-noise jump proposal and what the particle cohort did with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommonEvent {
    pub node: usize,
    pub time: f64,
    pub mark: f64,
    pub theta: f64,
    /// Number of particles that accepted the proposal.
    pub accepted: usize,
    /// Whether some particle actually moved.
    pub displaced: bool,
}

/// An accepted idiosyncratic jump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdioJump {
    pub index: usize,
    pub node: usize,
    pub pre: f64,
    pub post: f64,
}

/// Stored trajectories of one cohort.
#[derive(Debug, Clone)]
pub struct CohortPath {
    n: usize,
    /// Row-major `(node, particle)` values after any jump at the node.
    values: Vec<f64>,
    /// Pre-jump rows at common-proposal nodes.
    common_pre: BTreeMap<usize, Vec<f64>>,
    /// Accepted idiosyncratic jumps, sorted by node.
    jumps: Vec<IdioJump>,
}

impl CohortPath {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.n..(node + 1) * self.n]
    }

    pub fn jumps(&self) -> &[IdioJump] {
        &self.jumps
    }

    pub fn jumps_at(&self, node: usize) -> &[IdioJump] {
        let lo = self.jumps.partition_point(|j| j.node < node);
        let hi = self.jumps.partition_point(|j| j.node <= node);
        &self.jumps[lo..hi]
    }

    /// Values just before the events of `node`.
    pub fn pre_row(&self, node: usize) -> Cow<'_, [f64]> {
        if let Some(row) = self.common_pre.get(&node) {
            return Cow::Borrowed(row);
        }
        let jumps = self.jumps_at(node);
        if jumps.is_empty() {
            return Cow::Borrowed(self.row(node));
        }
        let mut row = self.row(node).to_vec();
        for j in jumps {
            row[j.index] = j.pre;
        }
        Cow::Owned(row)
    }

    /// Value of one particle before the events of `node`.
    pub fn pre_value(&self, node: usize, index: usize) -> f64 {
        if let Some(row) = self.common_pre.get(&node) {
            return row[index];
        }
        self.jumps_at(node)
            .iter()
            .find(|j| j.index == index)
            .map_or(self.row(node)[index], |j| j.pre)
    }
}

/// One common-noise path with a particle cohort and a copy cohort.
#[derive(Debug, Clone)]
pub struct ScenarioPath {
    pub model: ModelSpec,
    pub seed: u64,
    pub dt: f64,
    /// Event-driven grid `0 = t_0 < ... < t_K = T`.
    pub times: Vec<f64>,
    /// Common Brownian increments over `[t_k, t_{k+1}]`.
    pub dw0: Vec<f64>,
    pub common: Vec<CommonEvent>,
    pub particles: CohortPath,
    pub copies: CohortPath,
}

/// Quantile placement of `n` particles: particle `i` sits at the
/// `(i + 1/2)/n` quantile of `m`.
pub fn quantile_positions(m: &EmpiricalMeasure, n: usize) -> Vec<f64> {
    let atoms = m.atoms();
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    let mut cum = atoms[0].weight;
    for i in 0..n {
        let level = (i as f64 + 0.5) / n as f64;
        while level > cum && k + 1 < atoms.len() {
            k += 1;
            cum += atoms[k].weight;
        }
        out.push(atoms[k].x);
    }
    out
}

fn exponential_proposals(rng: &mut ChaCha8Rng, rate: f64, horizon: f64, law: &DiscreteLaw) -> Vec<Proposal> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t >= horizon {
            break;
        }
        let mark = law.sample(rng);
        let theta: f64 = rng.random();
        out.push(Proposal { time: t, mark, theta });
    }
    out
}

struct CohortState {
    x: Vec<f64>,
    diff_rngs: Vec<ChaCha8Rng>,
    proposals: Vec<Vec<Proposal>>,
}

impl CohortState {
    fn new(spec: &ModelSpec, n: usize, seed: u64, cohort: Cohort) -> Self {
        let x = quantile_positions(&spec.initial, n);
        let diff_rngs = if spec.sigma.is_zero() {
            Vec::new()
        } else {
            (0..n).map(|i| substream(seed, Purpose::IdioDiffusion, cohort, i as u64)).collect()
        };
        let proposals = (0..n)
            .map(|i| {
                let mut rng = substream(seed, Purpose::IdioProposals, cohort, i as u64);
                exponential_proposals(&mut rng, spec.intensity_bound, spec.horizon, &spec.jump_law)
            })
            .collect();
        Self { x, diff_rngs, proposals }
    }

    /// Euler step from `t` to `t + h` with the common increment `dw0`.
    fn euler(&mut self, spec: &ModelSpec, t: f64, h: f64, dw0: f64, ctx: &FlowCtx) -> Result<()> {
        let sqrt_h = h.sqrt();
        let step = |x: &mut f64, rng: Option<&mut ChaCha8Rng>| -> Result<()> {
            let b = spec.drift.checked("drift", t, ctx, *x)?;
            let s0 = spec.sigma0.checked("sigma0", t, ctx, *x)?;
            let mut dx = b * h + s0 * dw0;
            if let Some(rng) = rng {
                let s = spec.sigma.checked("sigma", t, ctx, *x)?;
                let z: f64 = StandardNormal.sample(rng);
                dx += s * sqrt_h * z;
            }
            *x += dx;
            Ok(())
        };
        if self.diff_rngs.is_empty() {
            self.x.par_iter_mut().with_min_len(PAR_MIN_LEN).try_for_each(|x| step(x, None))
        } else {
            self.x
                .par_iter_mut()
                .zip(self.diff_rngs.par_iter_mut())
                .with_min_len(PAR_MIN_LEN)
                .try_for_each(|(x, rng)| step(x, Some(rng)))
        }
    }
}

/// Simulate with default options.
pub fn simulate(spec: &ModelSpec, n_particles: usize, dt: f64, seed: u64) -> Result<ScenarioPath> {
    simulate_with(spec, n_particles, dt, seed, SimOptions::default())
}

pub fn simulate_with(
    spec: &ModelSpec,
    n_particles: usize,
    dt: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<ScenarioPath> {
    if n_particles < 2 {
        return Err(Error::TooFewParticles(n_particles));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt={dt} must be positive")));
    }
    spec.validate()?;
    let n = n_particles;
    let horizon = spec.horizon;

    let mut common_rng = substream(seed, Purpose::CommonJumps, Cohort::Particles, 0);
    let common_props =
        exponential_proposals(&mut common_rng, spec.common_intensity_bound, horizon, &spec.common_jump_law);
    let mut parts = CohortState::new(spec, n, seed, Cohort::Particles);
    let copy_cohort = if opts.share_copy_streams { Cohort::Particles } else { Cohort::Copies };
    let mut copies = CohortState::new(spec, n, seed, copy_cohort);

    // Event-driven grid.
    let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..steps).map(|k| k as f64 * dt).collect();
    times.push(horizon);
    times.extend(common_props.iter().map(|p| p.time));
    for cohort in [&parts, &copies] {
        for props in &cohort.proposals {
            times.extend(props.iter().map(|p| p.time));
        }
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let node_of = |t: f64| times.binary_search_by(|s| s.total_cmp(&t)).expect("proposal time on grid");

    // Per-node event lists: (cohort 0/1, particle, proposal).
    let nodes = times.len();
    let mut idio_events: BTreeMap<usize, Vec<(u8, usize, Proposal)>> = BTreeMap::new();
    for (c, cohort) in [&parts, &copies].into_iter().enumerate() {
        for (i, props) in cohort.proposals.iter().enumerate() {
            for p in props {
                idio_events.entry(node_of(p.time)).or_default().push((c as u8, i, *p));
            }
        }
    }
    let mut common_at: BTreeMap<usize, Proposal> = BTreeMap::new();
    for p in &common_props {
        common_at.insert(node_of(p.time), *p);
    }

    let mut bm = substream(seed, Purpose::CommonBrownian, Cohort::Particles, 0);
    let dw0: Vec<f64> = times
        .windows(2)
        .map(|w| {
            let z: f64 = StandardNormal.sample(&mut bm);
            z * (w[1] - w[0]).sqrt()
        })
        .collect();

    let exact = spec.uses_measure();
    let mut pv = Vec::with_capacity(nodes * n);
    let mut cv = Vec::with_capacity(nodes * n);
    pv.extend_from_slice(&parts.x);
    cv.extend_from_slice(&copies.x);
    let mut p_pre = BTreeMap::new();
    let mut c_pre = BTreeMap::new();
    let mut p_jumps = Vec::new();
    let mut c_jumps = Vec::new();
    let mut common = Vec::new();

    for k in 0..nodes - 1 {
        let (t, h) = (times[k], times[k + 1] - times[k]);
        let ctx = FlowCtx::new(&parts.x, exact);
        parts.euler(spec, t, h, dw0[k], &ctx)?;
        copies.euler(spec, t, h, dw0[k], &ctx)?;

        let node = k + 1;
        let s = times[node];
        let has_common = common_at.get(&node).copied();
        let idio = idio_events.get(&node);
        if has_common.is_none() && idio.is_none() {
            pv.extend_from_slice(&parts.x);
            cv.extend_from_slice(&copies.x);
            continue;
        }
        // Coefficients of the jump parts see the pre-jump flow.
        let pre_ctx = FlowCtx::new(&parts.x, exact);
        let p_before = parts.x.clone();
        let c_before = copies.x.clone();

        if let Some(prop) = has_common {
            let mut accepted = 0;
            let mut displaced = false;
            for (c, state) in [&mut parts, &mut copies].into_iter().enumerate() {
                for (i, x) in state.x.iter_mut().enumerate() {
                    let pre = if c == 0 { p_before[i] } else { c_before[i] };
                    let lam = spec.check_intensity(&spec.common_intensity, spec.common_intensity_bound, s, &pre_ctx, pre)?;
                    if prop.theta * spec.common_intensity_bound < lam {
                        let g = spec.gamma0.checked("gamma0", s, &pre_ctx, pre)?;
                        *x = pre + g * prop.mark;
                        if c == 0 {
                            accepted += 1;
                            displaced |= g * prop.mark != 0.0;
                        }
                    }
                }
            }
            p_pre.insert(node, p_before.clone());
            c_pre.insert(node, c_before.clone());
            common.push(CommonEvent { node, time: s, mark: prop.mark, theta: prop.theta, accepted, displaced });
        }
        if let Some(events) = idio {
            for &(c, i, prop) in events {
                let (state, before, ledger) = if c == 0 {
                    (&mut parts, &p_before, &mut p_jumps)
                } else {
                    (&mut copies, &c_before, &mut c_jumps)
                };
                let pre = before[i];
                let lam = spec.check_intensity(&spec.intensity, spec.intensity_bound, s, &pre_ctx, pre)?;
                if prop.theta * spec.intensity_bound < lam {
                    let g = spec.gamma.checked("gamma", s, &pre_ctx, pre)?;
                    state.x[i] += g * prop.mark;
                    ledger.push(IdioJump { index: i, node, pre, post: state.x[i] });
                }
            }
        }
        pv.extend_from_slice(&parts.x);
        cv.extend_from_slice(&copies.x);
    }

    Ok(ScenarioPath {
        model: spec.clone(),
        seed,
        dt,
        times,
        dw0,
        common,
        particles: CohortPath { n, values: pv, common_pre: p_pre, jumps: p_jumps },
        copies: CohortPath { n, values: cv, common_pre: c_pre, jumps: c_jumps },
    })
}

impl ScenarioPath {
    pub fn n(&self) -> usize {
        self.particles.n
    }

    pub fn num_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn horizon(&self) -> f64 {
        self.model.horizon
    }

    /// Nodes of common proposals accepted with a non-zero displacement.
    pub fn common_jump_nodes(&self) -> Vec<usize> {
        self.common.iter().filter(|e| e.displaced).map(|e| e.node).collect()
    }

    pub fn is_common_jump(&self, node: usize) -> bool {
        self.common.iter().any(|e| e.node == node && e.displaced)
    }

    /// Last node at or before `t`. Times within `1e-9 T` of a node snap to it.
    pub fn node_at(&self, t: f64) -> Result<usize> {
        let horizon = self.horizon();
        let tol = 1e-9 * horizon;
        if !(t >= -tol) || t > horizon + tol {
            return Err(Error::HorizonExceeded { t, horizon });
        }
        let idx = self.times.partition_point(|&s| s <= t + tol);
        Ok(idx.saturating_sub(1))
    }

    /// Particle flow after the events of `node`.
    pub fn flow(&self, node: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.particles.row(node)).expect("non-empty cohort")
    }

    /// Particle flow before the events of `node`.
    pub fn flow_pre(&self, node: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(&self.particles.pre_row(node)).expect("non-empty cohort")
    }

    /// `(m_{t-}, m_t)`; the scheme is piecewise constant between nodes.
    pub fn empirical_flow(&self, t: f64) -> Result<(EmpiricalMeasure, EmpiricalMeasure)> {
        let node = self.node_at(t)?;
        let on_node = (self.times[node] - t).abs() <= 1e-9 * self.horizon();
        let post = self.flow(node);
        if on_node && node > 0 {
            Ok((self.flow_pre(node), post))
        } else {
            Ok((post.clone(), post))
        }
    }

    /// Writes `time,cohort,particle,value,pre_value,event` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "cohort", "particle", "value", "pre_value", "event"])?;
        let common_nodes: BTreeMap<usize, bool> = self.common.iter().map(|e| (e.node, e.displaced)).collect();
        for (name, cohort) in [("particle", &self.particles), ("copy", &self.copies)] {
            for node in 0..self.num_nodes() {
                let row = cohort.row(node);
                for (i, &v) in row.iter().enumerate() {
                    let pre = cohort.pre_value(node, i);
                    let event = if cohort.jumps_at(node).iter().any(|j| j.index == i) {
                        "idio"
                    } else if common_nodes.get(&node).is_some_and(|_| pre != v) {
                        "common"
                    } else {
                        ""
                    };
                    w.write_record([
                        format!("{:e}", self.times[node]),
                        name.to_string(),
                        i.to_string(),
                        format!("{v:e}"),
                        format!("{pre:e}"),
                        event.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Particle averages of the quantities that control the integrability of the
/// semimartingale decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrabilityReport {
    /// `E[(int |b| ds)^2]`
    pub drift_variation: f64,
    /// `E[int (sigma^2 + sigma0^2) ds]`
    pub quadratic_variation: f64,
    /// `E[(sum |dX|)^2]` over all jumps.
    pub jump_variation: f64,
    /// `2 E[(sum_idio |dX|)^2] + 2 E[(sum_common |dX|)^2]`, an upper bound of
    /// `jump_variation`.
    pub jump_bound: f64,
    pub finite: bool,
}

pub fn integrability_monitor(path: &ScenarioPath) -> Result<IntegrabilityReport> {
    let spec = &path.model;
    let n = path.n();
    let exact = spec.uses_measure();
    let mut drift_var = vec![0.0; n];
    let mut qv = vec![0.0; n];
    for k in 0..path.num_nodes() - 1 {
        let (t, h) = (path.times[k], path.times[k + 1] - path.times[k]);
        let row = path.particles.row(k);
        let ctx = FlowCtx::new(row, exact);
        for i in 0..n {
            let x = row[i];
            drift_var[i] += spec.drift.checked("drift", t, &ctx, x)?.abs() * h;
            let s = spec.sigma.checked("sigma", t, &ctx, x)?;
            let s0 = spec.sigma0.checked("sigma0", t, &ctx, x)?;
            qv[i] += (s * s + s0 * s0) * h;
        }
    }
    let mut idio = vec![0.0; n];
    for j in path.particles.jumps() {
        idio[j.index] += (j.post - j.pre).abs();
    }
    let mut com = vec![0.0; n];
    for e in &path.common {
        let pre = path.particles.pre_row(e.node);
        let post = path.particles.row(e.node);
        for i in 0..n {
            com[i] += (post[i] - pre[i]).abs();
        }
    }
    let sq = |v: &[f64]| pairwise_mean(&v.iter().map(|a| a * a).collect::<Vec<_>>());
    let total: Vec<f64> = idio.iter().zip(&com).map(|(a, b)| a + b).collect();
    let report = IntegrabilityReport {
        drift_variation: sq(&drift_var),
        quadratic_variation: pairwise_mean(&qv),
        jump_variation: sq(&total),
        jump_bound: 2.0 * sq(&idio) + 2.0 * sq(&com),
        finite: false,
    };
    Ok(IntegrabilityReport {
        finite: report.drift_variation.is_finite()
            && report.quadratic_variation.is_finite()
            && report.jump_variation.is_finite(),
        ..report
    })
}
