//! Experiment configuration, suite execution and report emission.
//!
//! A run reads one TOML experiment, executes its suite over the refinement
//! ladder and the seeds, and produces raw rows (CSV) plus a summary (JSON).
//! Gates are computed from the CSV text alone, so a summary can always be
//! recomputed from the rows it ships with.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{check_derivative_consistency, check_flat_identity, flat_identity_nodes, CylindricalFunctional, FunctionalSpec};
use crate::ito::{bracket_convergence_check, dyadic_partition, partition_decomposition, verify_ito, with_jump_times};
use crate::measure::EmpiricalMeasure;
use crate::mfc::{
    config_hash, dpp_check, hjb_residual, obstacle_residual, solve_mfc_dp, solve_stopping_dp, value_monotonicity,
    ControlProblemConfig, ObstacleTolerance, StoppingProblemConfig, StoppingRule, ValueTable,
};
use crate::numeric::{mean_std, pairwise_mean, rms};
use crate::oracle::{brute_force_wasserstein, brute_pair_average};
use crate::sde::{simulate, CoefficientSpec, ModelConfig, ModelSpec, ScenarioPath};
use crate::streams::{substream, Cohort, Purpose};
use crate::wentzell::{field_partition_diagnostic, verify_wentzell, FvDriver, RandomFieldConfig, RandomFieldSpec};

/// Version of the CSV and JSON layouts.
pub const REPORT_VERSION: u32 = 1;

/// Absolute slack added to statistical gates so that exact zeros pass.
const STAT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Ito,
    Wentzell,
    LemmaBracket,
    LemmaField,
    Mfc,
    Stopping,
    TransportOracle,
    FunctionalOracle,
}

pub const SUITES: [Suite; 8] = [
    Suite::Ito,
    Suite::Wentzell,
    Suite::LemmaBracket,
    Suite::LemmaField,
    Suite::Mfc,
    Suite::Stopping,
    Suite::TransportOracle,
    Suite::FunctionalOracle,
];

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Ito => "ito",
            Suite::Wentzell => "wentzell",
            Suite::LemmaBracket => "lemma_bracket",
            Suite::LemmaField => "lemma_field",
            Suite::Mfc => "mfc",
            Suite::Stopping => "stopping",
            Suite::TransportOracle => "transport_oracle",
            Suite::FunctionalOracle => "functional_oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SUITES.into_iter().find(|x| x.name() == s)
    }

    fn simulates(self) -> bool {
        matches!(self, Suite::Ito | Suite::Wentzell | Suite::LemmaBracket | Suite::LemmaField)
    }

    fn about(self) -> &'static str {
        match self {
            Suite::Ito => "pathwise Ito residual of a cylindrical functional along the simulated flow",
            Suite::Wentzell => "pathwise residual of a random field driven by common noise",
            Suite::LemmaBracket => "partition sums of H (dX)^2 against their bracket limit",
            Suite::LemmaField => "partition sums of random-field increments against their jump limits",
            Suite::Mfc => "mean-field control recursion, HJB residual and DPP gaps",
            Suite::Stopping => "mean-field stopping recursion and obstacle conditions",
            Suite::TransportOracle => "sorted-coupling distances against brute-force assignment",
            Suite::FunctionalOracle => "flat-derivative identity and finite-difference consistency",
        }
    }
}

/// One rung of the refinement ladder. Simulation suites use `n` and `dt`,
/// dynamic programming suites use `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub h: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleParams {
    #[serde(default = "d_cases")]
    pub cases: usize,
    #[serde(default = "d_atoms")]
    pub max_atoms: usize,
    #[serde(default = "d_degree")]
    pub degree: u32,
    #[serde(default = "d_arity")]
    pub arity: usize,
    #[serde(default = "d_inner")]
    pub inner_degree: usize,
    /// Coarse and fine finite-difference steps.
    #[serde(default = "d_fd")]
    pub fd_steps: [f64; 2],
}

fn d_cases() -> usize {
    100
}
fn d_atoms() -> usize {
    10
}
fn d_degree() -> u32 {
    4
}
fn d_arity() -> usize {
    2
}
fn d_inner() -> usize {
    2
}
fn d_fd() -> [f64; 2] {
    [1e-2, 1e-3]
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            cases: d_cases(),
            max_atoms: d_atoms(),
            degree: d_degree(),
            arity: d_arity(),
            inner_degree: d_inner(),
            fd_steps: d_fd(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionParams {
    #[serde(default = "d_dyadic")]
    pub dyadic_levels: Vec<u32>,
    #[serde(default)]
    pub include_jump_times: bool,
    /// Weight `H` of the bracket sums.
    #[serde(default = "d_weight")]
    pub weight: CoefficientSpec,
    /// Interpolation points `(measure, particle, copy)` of the field sums.
    #[serde(default = "d_interp")]
    pub interpolation: [f64; 3],
    /// Dyadic level of the telescoping check run on every scenario.
    #[serde(default = "d_tele")]
    pub telescoping_level: u32,
}

fn d_dyadic() -> Vec<u32> {
    vec![2, 4, 6, 8]
}
fn d_weight() -> CoefficientSpec {
    CoefficientSpec::Constant(1.0)
}
fn d_interp() -> [f64; 3] {
    [0.5; 3]
}
fn d_tele() -> u32 {
    6
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            dyadic_levels: d_dyadic(),
            include_jump_times: false,
            weight: d_weight(),
            interpolation: d_interp(),
            telescoping_level: d_tele(),
        }
    }
}

/// Pass/fail thresholds. Unset gates are not evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gates {
    /// RMS residual at the first level over RMS at the last level.
    pub rms_ratio_min: Option<f64>,
    /// RMS residual at the last level over RMS of `u` at the horizon.
    pub rms_rel_max: Option<f64>,
    /// `|mean residual|` at the last level, in standard errors.
    pub mean_se_max: Option<f64>,
    /// Expected drift rate of the particle mean; checked at the last level.
    pub moment_rate: Option<f64>,
    pub moment_se_max: Option<f64>,
    pub telescoping_max: Option<f64>,
    pub residual_abs_max: Option<f64>,
    /// Term-by-term distance between the field run and the plain Ito run.
    pub ito_gap_max: Option<f64>,
    /// Distance between the jump cross term and the hand-counted increments.
    pub cross_gap_max: Option<f64>,
    /// Every seed inside its three-standard-error band at the finest grid.
    pub within_band: Option<bool>,
    /// Largest gap at the finest grid.
    pub gap_abs_max: Option<f64>,
    pub flat_identity_max: Option<f64>,
    pub fd_ratio_min: Option<f64>,
    pub pair_gap_max: Option<f64>,
    pub transport_max: Option<f64>,
    /// Analytic value `mean + rate (T - t) alive_fraction`.
    pub analytic_rate: Option<f64>,
    pub analytic_max: Option<f64>,
    pub hjb_order_min: Option<f64>,
    pub hjb_constant: Option<f64>,
    /// Residuals below this count as exact when measuring the order.
    pub hjb_floor: Option<f64>,
    pub dpp_max: Option<f64>,
    /// Obstacle conditions with tolerance `c1 h + c2 / N`.
    pub obstacle: Option<ObstacleTolerance>,
    pub monotone: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: Suite,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub levels: Vec<Level>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub functional: Option<FunctionalSpec>,
    #[serde(default)]
    pub field: Option<RandomFieldConfig>,
    #[serde(default)]
    pub control: Option<ControlProblemConfig>,
    #[serde(default)]
    pub stopping: Option<StoppingProblemConfig>,
    #[serde(default)]
    pub oracle: OracleParams,
    #[serde(default)]
    pub partition: PartitionParams,
    #[serde(default)]
    pub gates: Gates,
    /// Write every value table next to the rows.
    #[serde(default)]
    pub export_values: bool,
}

fn d_seed() -> u64 {
    1
}
fn d_replicates() -> usize {
    1
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.suite.name())
    }

    pub fn hash(&self) -> String {
        config_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|r| self.seed + r).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let need = |present: bool, section: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("suite {} needs a [{section}] section", self.suite.name())))
            }
        };
        match self.suite {
            Suite::Ito | Suite::LemmaBracket => {
                need(self.model.is_some(), "model")?;
            }
            Suite::Wentzell | Suite::LemmaField => {
                need(self.model.is_some(), "model")?;
                need(self.field.is_some(), "field")?;
            }
            Suite::Mfc => need(self.control.is_some(), "control")?,
            Suite::Stopping => need(self.stopping.is_some(), "stopping")?,
            Suite::TransportOracle | Suite::FunctionalOracle => {}
        }
        if self.suite == Suite::Ito {
            need(self.functional.is_some(), "functional")?;
        }
        if self.suite.simulates() {
            if self.levels.is_empty() || self.replicates == 0 {
                return Err(Error::Config("levels and replicates must be non-empty".into()));
            }
            let mut prev: Option<(usize, f64)> = None;
            for (i, l) in self.levels.iter().enumerate() {
                let (Some(n), Some(dt)) = (l.n, l.dt) else {
                    return Err(Error::Config(format!("levels[{i}] needs n and dt")));
                };
                if let Some((pn, pdt)) = prev {
                    if n < pn || dt > pdt || (n == pn && dt == pdt) {
                        return Err(Error::Config(format!("levels[{i}] does not refine levels[{}]", i - 1)));
                    }
                }
                prev = Some((n, dt));
            }
        }
        if matches!(self.suite, Suite::Mfc | Suite::Stopping) {
            if self.levels.is_empty() {
                return Err(Error::Config("levels must be non-empty".into()));
            }
            let mut prev: Option<f64> = None;
            for (i, l) in self.levels.iter().enumerate() {
                let Some(h) = l.h else {
                    return Err(Error::Config(format!("levels[{i}] needs h")));
                };
                if prev.is_some_and(|p| h >= p) {
                    return Err(Error::Config(format!("levels[{i}] does not refine levels[{}]", i - 1)));
                }
                prev = Some(h);
            }
        }
        Ok(())
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Indices into the ladder to keep.
    pub levels: Option<Vec<usize>>,
    pub jobs: Option<usize>,
    /// Multiplies every upper-bound threshold.
    pub tol_scale: f64,
}

impl Default for Overrides {
    fn default() -> Self {
        Self { seed: None, levels: None, jobs: None, tol_scale: 1.0 }
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = cfg.clone();
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(idx) = &self.levels {
            let mut kept = Vec::new();
            for &i in idx {
                kept.push(*cfg.levels.get(i).ok_or_else(|| {
                    Error::Config(format!("level index {i} out of range (ladder has {})", cfg.levels.len()))
                })?);
            }
            cfg.levels = kept;
            cfg.validate()?;
        }
        if !(self.tol_scale > 0.0) {
            return Err(Error::Config(format!("tol-scale must be positive, got {}", self.tol_scale)));
        }
        Ok(cfg)
    }
}

/// Raw rows as text; every value goes through the same formatter so the
/// CSV is a pure function of the computation.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

impl RowTable {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(Self { header, rows })
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column {name} missing from rows")))
    }

    /// Numeric column over the rows accepted by `keep`.
    pub fn column(&self, name: &str, keep: impl Fn(&[String]) -> bool) -> Result<Vec<f64>> {
        let i = self.index(name)?;
        self.rows
            .iter()
            .filter(|r| keep(r))
            .map(|r| r[i].parse::<f64>().map_err(|e| Error::Config(format!("column {name}: {e}"))))
            .collect()
    }

    fn all(&self, name: &str) -> Result<Vec<f64>> {
        self.column(name, |_| true)
    }

    fn at(&self, name: &str, key: &str, value: &str) -> Result<Vec<f64>> {
        let k = self.index(key)?;
        self.column(name, |r| r[k] == value)
    }

    fn distinct(&self, key: &str) -> Result<Vec<String>> {
        let k = self.index(key)?;
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r[k]) {
                out.push(r[k].clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    /// `"<="` or `">="`.
    pub op: String,
    pub threshold: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Gate {
    fn upper(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, op: "<=".into(), threshold, pass: value <= threshold, note: None }
    }

    fn lower(name: &str, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, op: ">=".into(), threshold, pass: value >= threshold, note: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub suite: Suite,
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub levels: Vec<Level>,
    pub tol_scale: f64,
    /// Per-level statistics and ratios between consecutive levels.
    pub convergence: BTreeMap<String, f64>,
    pub gates: Vec<Gate>,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub csv: String,
    pub summary: Summary,
    /// Extra files (name, contents), such as exported value tables.
    pub extra: Vec<(String, String)>,
}

impl RunOutput {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let name = &self.summary.name;
        let mut written = Vec::new();
        let rows = dir.join(format!("{name}_rows.csv"));
        fs::write(&rows, &self.csv)?;
        written.push(rows);
        let summary = dir.join(format!("{name}_summary.json"));
        fs::write(&summary, serde_json::to_string_pretty(&self.summary).expect("summary serializes") + "\n")?;
        written.push(summary);
        for (file, text) in &self.extra {
            let p = dir.join(file);
            fs::write(&p, text)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Process exit code for a run result: 0 all gates pass, 1 a gate fails,
/// 2 configuration error, 3 runtime error.
pub fn exit_code(result: &Result<RunOutput>) -> i32 {
    match result {
        Ok(out) if out.summary.pass => 0,
        Ok(_) => 1,
        Err(Error::Config(_)) => 2,
        Err(_) => 3,
    }
}

macro_rules! bundle {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../configs/", $name, ".toml")))),*]
    };
}

/// Bundled experiment configs by name.
pub const BUNDLED: &[(&str, &str)] = bundle!(
    "functional_oracle",
    "transport_oracle",
    "ito",
    "ito_jumps",
    "ito_mixed",
    "wentzell",
    "wentzell_degenerate",
    "wentzell_counter",
    "lemma_bracket",
    "lemma_bracket_jumps",
    "lemma_field",
    "mfc",
    "mfc_jumps",
    "stopping",
    "stopping_positive_drift",
);

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// `bundled:NAME` or a file path.
pub fn load_config(source: &str) -> Result<ExperimentConfig> {
    let text = match source.strip_prefix("bundled:") {
        Some(name) => bundled(name)
            .ok_or_else(|| Error::Config(format!("no bundled config named {name}")))?
            .to_string(),
        None => fs::read_to_string(source).map_err(|e| Error::Config(format!("{source}: {e}")))?,
    };
    ExperimentConfig::parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{source}: {m}")),
        other => other,
    })
}

pub fn list_suites() -> Vec<String> {
    SUITES.iter().map(|s| format!("{:<18} {}", s.name(), s.about())).collect()
}

pub fn describe(section: &str) -> Result<&'static str> {
    Ok(match section {
        "experiment" => DESCRIBE_EXPERIMENT,
        "model" => DESCRIBE_MODEL,
        "functional" => DESCRIBE_FUNCTIONAL,
        "field" => DESCRIBE_FIELD,
        "control" => DESCRIBE_CONTROL,
        "stopping" => DESCRIBE_STOPPING,
        "gates" => DESCRIBE_GATES,
        "reports" => DESCRIBE_REPORTS,
        _ => {
            return Err(Error::Config(format!(
                "unknown section {section}; try experiment, model, functional, field, control, stopping, gates, reports"
            )))
        }
    })
}

const DESCRIBE_EXPERIMENT: &str = "\
suite         one of the suite names
name          report file prefix (default: suite name)
seed          base seed; replicate r uses seed + r
replicates    number of seeds
levels        array of tables: {n, dt} for simulation suites, {h} for dp suites;
              each level must refine the previous one
model, functional, field, control, stopping   spec sections used by the suite
oracle        cases, max_atoms, degree, arity, inner_degree, fd_steps
partition     dyadic_levels, include_jump_times, weight, interpolation, telescoping_level
gates         pass/fail thresholds (see `describe gates`)
export_values write value tables of dp suites";

const DESCRIBE_MODEL: &str = "\
horizon                   final time T
initial                   initial atom locations
initial_weights           optional atom weights (default uniform)
drift, sigma, sigma0      coefficients: number, or {base, x, mean, bound} meaning
                          clip(base + x * x + mean * mean(m), -bound, bound)
gamma, gamma0             idiosyncratic and common jump amplitudes
intensity                 idiosyncratic jump intensity lambda(t, m, x)
intensity_bound           dominating rate Lambda; lambda <= Lambda is checked at every
                          evaluation and a violation is a runtime error
common_intensity          common jump intensity lambda0
common_intensity_bound    dominating rate Lambda0 for common proposals
jump_law, common_jump_law {values, probs} finite mark laws (default: unit jumps)";

const DESCRIBE_FUNCTIONAL: &str = "\
outer   \"poly\" or \"tanh\" (tanh applied to the polynomial)
inner   list of coefficient lists; inner[j] = [c0, c1, ...] is phi_j(x) = sum c_i x^i
terms   list of {exponents, coef}; the outer polynomial sum coef * prod y_j^exponents[j]
        with y_j = <phi_j, m>";

const DESCRIBE_FIELD: &str = "\
initial          functional U_0 (default: zero)
fv_terms         list of {schedule, functional}; integrated against fv_driver
mart_terms       list of {schedule, functional}; integrated against mart_driver
fv_driver        \"time\" or \"common_jump_count\"
mart_driver      \"common_brownian\" or \"compensated_common_jumps\"
variation_bound  optional bound on |A|_TV + [N]_T; exceedances are reported
schedule         {breakpoints, pieces}: pieces[j] are polynomial coefficients in t
                 on [breakpoints[j], breakpoints[j+1]); default constant 1
Idiosyncratic driver names parse but are rejected.";

const DESCRIBE_CONTROL: &str = "\
horizon, step         T and the time step (levels override step)
spacing               lattice spacing (default: smallest sigma sqrt(h), else h)
particles             N
lattice_points        points of the terminal slice (odd); slice k shrinks by the reach
state_budget          maximum number of stored configurations
terminal              functional g
common_jump_law       {values, probs} law of common jump marks
controls              list of {value, drift, sigma, gamma, intensity, reward}; intensity
                      is constant per control, so common jumps move every particle";

const DESCRIBE_STOPPING: &str = "\
horizon, step, spacing, particles, lattice_points, state_budget, terminal   as for control
drift, sigma, sigma0   dynamics of alive particles; stopped particles are frozen
reward                 running reward collected by alive particles";

const DESCRIBE_GATES: &str = "\
rms_ratio_min     rms(residual, first level) / rms(residual, last level) >= value
rms_rel_max       rms(residual, last) / rms(u_final, last) <= value
mean_se_max       |mean(residual, last)| <= value * se + 1e-12
moment_rate, moment_se_max
                  |mean(mean_final, last) - (mean_initial + rate T)| <= value * se + 1e-12
telescoping_max   max telescoping <= value
residual_abs_max  max |residual| <= value
ito_gap_max       max ito_gap <= value
cross_gap_max     max cross_gap <= value
within_band       max(gap - band) at the finest dyadic level <= 0
gap_abs_max       max gap at the finest dyadic level <= value
flat_identity_max max flat_residual <= value
fd_ratio_min      median fd_ratio >= value
pair_gap_max      max pair_gap <= value
transport_max     max(w2_gap, w1_gap) <= value
analytic_rate, analytic_max
                  max analytic_error <= value
hjb_constant      max(hjb / h) <= value
hjb_order_min     least-squares slope of log max(hjb, floor) against log h >= value,
                  or every hjb <= floor
dpp_max           max dpp gap <= value
obstacle          {c1, c2}: min_stop_gradient + tol >= 0, min_neg_generator + tol >= 0,
                  max_optimal_generator - tol <= 0, max_optimal_value_gap <= 1e-12
monotone          sum monotone_violations <= 0
Upper thresholds are multiplied by --tol-scale.";

const DESCRIBE_REPORTS: &str = "\
{name}_rows.csv      raw rows, one per (level, seed) or per case; floats in shortest
                     round-trip scientific notation; no timing columns
{name}_summary.json  version, suite, config hash, seeds, levels, convergence, gates, pass
{name}_values_L{i}.csv  value tables (export_values): config_hash, time_index,
                     configuration, value, argmax
Gates are functions of the CSV rows only (see `describe gates`).
Byte-identical rows across machines assume IEEE-754 doubles with round-to-nearest.";

/// Run one experiment.
pub fn run(cfg: &ExperimentConfig, ov: &Overrides) -> Result<RunOutput> {
    let cfg = ov.apply(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = ov.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (table, extra) = pool.install(|| execute(&cfg))?;
    let csv = table.to_csv()?;
    let (gates, convergence) = evaluate_gates(&cfg, &csv, ov.tol_scale)?;
    let pass = gates.iter().all(|g| g.pass);
    Ok(RunOutput {
        csv,
        summary: Summary {
            version: REPORT_VERSION,
            suite: cfg.suite,
            name: cfg.name().to_string(),
            config_hash: cfg.hash(),
            seeds: if cfg.suite.simulates() { cfg.seeds() } else { vec![cfg.seed] },
            levels: cfg.levels.clone(),
            tol_scale: ov.tol_scale,
            convergence,
            gates,
            pass,
        },
        extra,
    })
}

type Rows = Vec<Vec<String>>;

fn execute(cfg: &ExperimentConfig) -> Result<(RowTable, Vec<(String, String)>)> {
    match cfg.suite {
        Suite::Ito => simulation_suite(cfg, ITO_HEADER, ito_job).map(|t| (t, vec![])),
        Suite::Wentzell => simulation_suite(cfg, WENTZELL_HEADER, wentzell_job).map(|t| (t, vec![])),
        Suite::LemmaBracket => simulation_suite(cfg, BRACKET_HEADER, bracket_job).map(|t| (t, vec![])),
        Suite::LemmaField => simulation_suite(cfg, FIELD_HEADER, field_job).map(|t| (t, vec![])),
        Suite::Mfc => mfc_suite(cfg),
        Suite::Stopping => stopping_suite(cfg),
        Suite::TransportOracle => transport_suite(cfg).map(|t| (t, vec![])),
        Suite::FunctionalOracle => functional_suite(cfg).map(|t| (t, vec![])),
    }
}

struct Job<'a> {
    cfg: &'a ExperimentConfig,
    spec: &'a ModelSpec,
    level: usize,
    seed: u64,
    n: usize,
    dt: f64,
}

impl Job<'_> {
    fn prefix(&self) -> Vec<String> {
        vec![self.level.to_string(), self.seed.to_string(), self.n.to_string(), fmt(self.dt)]
    }

    /// Telescoping check of `u` on a dyadic grid of this path.
    fn telescoping(&self, u: &CylindricalFunctional, path: &ScenarioPath) -> Result<f64> {
        let grid = dyadic_partition(path.horizon(), self.cfg.partition.telescoping_level);
        Ok(partition_decomposition(u, path, &grid)?.telescoping_check)
    }

    fn grids(&self, path: &ScenarioPath) -> Vec<Vec<f64>> {
        self.cfg
            .partition
            .dyadic_levels
            .iter()
            .map(|&l| {
                let g = dyadic_partition(path.horizon(), l);
                if self.cfg.partition.include_jump_times {
                    with_jump_times(&g, path)
                } else {
                    g
                }
            })
            .collect()
    }
}

fn simulation_suite(
    cfg: &ExperimentConfig,
    header: &[&str],
    job: fn(&Job<'_>, &ScenarioPath) -> Result<Rows>,
) -> Result<RowTable> {
    let spec = cfg.model.as_ref().expect("validated").build()?;
    let seeds = cfg.seeds();
    let mut jobs = Vec::new();
    for (level, l) in cfg.levels.iter().enumerate() {
        for &seed in &seeds {
            jobs.push(Job { cfg, spec: &spec, level, seed, n: l.n.expect("validated"), dt: l.dt.expect("validated") });
        }
    }
    let chunks: Vec<Rows> = jobs
        .par_iter()
        .map(|j| {
            let path = simulate(j.spec, j.n, j.dt, j.seed)?;
            job(j, &path)
        })
        .collect::<Result<_>>()?;
    let mut table = RowTable::new(header);
    table.rows = chunks.into_iter().flatten().collect();
    Ok(table)
}

const ITO_HEADER: &[&str] = &[
    "level",
    "seed",
    "n",
    "dt",
    "lhs",
    "jump_sum",
    "idio_jump_term",
    "idio_jump_term_left",
    "drift_term",
    "diffusion_term",
    "covariation_term",
    "residual",
    "derivative_sup",
    "u_final",
    "mean_initial",
    "mean_final",
    "telescoping",
];

fn flow_stats(path: &ScenarioPath) -> (f64, f64) {
    (pairwise_mean(path.particles.row(0)), pairwise_mean(path.particles.row(path.num_nodes() - 1)))
}

fn ito_job(j: &Job<'_>, path: &ScenarioPath) -> Result<Rows> {
    let u = j.cfg.functional.as_ref().expect("validated").build()?;
    let b = verify_ito(&u, path, path.horizon())?;
    let (m0, m1) = flow_stats(path);
    let mut row = j.prefix();
    row.extend(
        [
            b.lhs,
            b.jump_sum,
            b.idio_jump_term,
            b.idio_jump_term_left,
            b.drift_term,
            b.diffusion_term,
            b.covariation_term,
            b.residual,
            b.derivative_sup,
            u.value_uniform(path.particles.row(path.num_nodes() - 1)),
            m0,
            m1,
            j.telescoping(&u, path)?,
        ]
        .map(fmt),
    );
    Ok(vec![row])
}

const WENTZELL_HEADER: &[&str] = &[
    "level",
    "seed",
    "n",
    "dt",
    "lhs",
    "jump_sum",
    "idio_jump_term",
    "idio_jump_term_left",
    "drift_term",
    "diffusion_term",
    "covariation_term",
    "fv_driver_term",
    "mart_driver_term",
    "cross_jump_term",
    "cross_bracket_term",
    "jump_remainder",
    "residual",
    "u_final",
    "variation",
    "variation_exceeded",
    "ito_gap",
    "hand_cross",
    "cross_gap",
    "telescoping",
];

/// `sum_s dA_s [phi(m_s) - phi(m_{s-})]` over accepted common jumps, read
/// straight off the path.
fn hand_counted_cross(field: &RandomFieldSpec, path: &ScenarioPath) -> f64 {
    if field.fv_driver != FvDriver::CommonJumpCount {
        return 0.0;
    }
    let mut total = 0.0;
    for e in path.common.iter().filter(|e| e.accepted > 0) {
        let post = path.particles.row(e.node);
        let pre = path.particles.pre_row(e.node);
        for term in &field.fv_terms {
            let da = term.schedule.eval(path.times[e.node]);
            total += da * (term.functional.value_uniform(post) - term.functional.value_uniform(&pre));
        }
    }
    total
}

fn wentzell_job(j: &Job<'_>, path: &ScenarioPath) -> Result<Rows> {
    let field = j.cfg.field.as_ref().expect("validated").build()?;
    let t = path.horizon();
    let w = verify_wentzell(&field, path, t)?;
    let plain = verify_ito(&field.initial, path, t)?;
    let b = w.ito;
    let pairs = [
        (b.lhs, plain.lhs),
        (b.jump_sum, plain.jump_sum),
        (b.idio_jump_term, plain.idio_jump_term),
        (b.idio_jump_term_left, plain.idio_jump_term_left),
        (b.drift_term, plain.drift_term),
        (b.diffusion_term, plain.diffusion_term),
        (b.covariation_term, plain.covariation_term),
        (w.residual, plain.residual),
    ];
    let ito_gap = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let hand = hand_counted_cross(&field, path);
    let final_value = crate::wentzell::field_eval(
        &field,
        path,
        t,
        crate::functional::DerivativeQuery::value(&EmpiricalMeasure::uniform(path.particles.row(path.num_nodes() - 1))?),
    )?;
    let mut row = j.prefix();
    row.extend(
        [
            w.lhs,
            b.jump_sum,
            b.idio_jump_term,
            b.idio_jump_term_left,
            b.drift_term,
            b.diffusion_term,
            b.covariation_term,
            w.fv_driver_term,
            w.mart_driver_term,
            w.cross_jump_term,
            w.cross_bracket_term,
            w.jump_remainder,
            w.residual,
            final_value,
            w.variation,
            if w.variation_bound_exceeded { 1.0 } else { 0.0 },
            ito_gap,
            hand,
            (w.cross_jump_term + w.jump_remainder - hand).abs(),
            j.telescoping(&field.initial, path)?,
        ]
        .map(fmt),
    );
    Ok(vec![row])
}

const BRACKET_HEADER: &[&str] =
    &["level", "seed", "n", "dt", "dyadic", "intervals", "partition_sum", "limit", "gap", "band", "telescoping"];

fn bracket_job(j: &Job<'_>, path: &ScenarioPath) -> Result<Rows> {
    let weight = j.cfg.partition.weight.build();
    let rows = bracket_convergence_check(&weight, path, &j.grids(path))?;
    let tele = j.telescoping(&CylindricalFunctional::power_of_mean(2), path)?;
    Ok(rows
        .iter()
        .zip(&j.cfg.partition.dyadic_levels)
        .map(|(r, d)| {
            let mut row = j.prefix();
            row.push(d.to_string());
            row.push(r.intervals.to_string());
            row.extend([r.partition_sum, r.limit, r.gap, r.band, tele].map(fmt));
            row
        })
        .collect())
}

const FIELD_HEADER: &[&str] = &[
    "level",
    "seed",
    "n",
    "dt",
    "dyadic",
    "intervals",
    "single_sum",
    "single_limit",
    "pair_sum",
    "pair_limit",
    "gap",
    "telescoping",
];

fn field_job(j: &Job<'_>, path: &ScenarioPath) -> Result<Rows> {
    let field = j.cfg.field.as_ref().expect("validated").build()?;
    let rows = field_partition_diagnostic(&field, path, &j.grids(path), j.cfg.partition.interpolation)?;
    let tele = j.telescoping(&field.initial, path)?;
    Ok(rows
        .iter()
        .zip(&j.cfg.partition.dyadic_levels)
        .map(|(r, d)| {
            let mut row = j.prefix();
            row.push(d.to_string());
            row.push(r.intervals.to_string());
            let gap = (r.single_sum - r.single_limit).abs().max((r.pair_sum - r.pair_limit).abs());
            row.extend([r.single_sum, r.single_limit, r.pair_sum, r.pair_limit, gap, tele].map(fmt));
            row
        })
        .collect())
}

/// `max |V - (mean + rate (T - t) alive_fraction)|` over every stored state.
fn analytic_error(table: &ValueTable, horizon: f64, rate: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..table.slices.len() {
        let remaining = horizon - table.lattice.time(k);
        for (key, e) in &table.slices[k] {
            let m = table.measure(key);
            let exact = m.mean() + rate * remaining * m.alive_mass();
            worst = worst.max((e.value - exact).abs());
        }
    }
    worst
}

const MFC_HEADER: &[&str] = &[
    "level",
    "h",
    "states",
    "rounding_error",
    "analytic_error",
    "hjb_sup_inside",
    "hjb_uniform",
    "dpp_one_step",
    "dpp_first_jump",
    "dpp_terminal",
];

fn mfc_suite(cfg: &ExperimentConfig) -> Result<(RowTable, Vec<(String, String)>)> {
    let base = cfg.control.as_ref().expect("validated");
    let mut table = RowTable::new(MFC_HEADER);
    let mut extra = Vec::new();
    for (level, l) in cfg.levels.iter().enumerate() {
        let h = l.h.expect("validated");
        let mut pc = base.clone();
        pc.step = h;
        let spec = pc.build()?;
        let vt = solve_mfc_dp(&spec)?;
        let steps = vt.lattice.steps;
        let analytic = cfg.gates.analytic_rate.map_or(f64::NAN, |r| analytic_error(&vt, spec.horizon, r));
        let interior: Vec<(usize, Vec<i32>)> =
            (0..steps).flat_map(|k| vt.keys(k).into_iter().map(move |c| (k, c))).collect();
        let per_state: Vec<[f64; 3]> = interior
            .par_iter()
            .map(|(k, c)| -> Result<[f64; 3]> {
                let r = hjb_residual(&vt, &spec, *k, c)?;
                let one = dpp_check(&vt, &spec, *k, c, StoppingRule::Deterministic(k + 1))?;
                Ok([r.sup_inside.abs(), r.uniform.abs(), one])
            })
            .collect::<Result<_>>()?;
        let maxcol = |i: usize| per_state.iter().map(|r| r[i]).fold(0.0, f64::max);
        let start = vt.keys(0);
        let mut first_jump: f64 = 0.0;
        let mut terminal = if spec.controls.len() == 1 { 0.0 } else { f64::NAN };
        for c in &start {
            first_jump = first_jump.max(dpp_check(&vt, &spec, 0, c, StoppingRule::FirstCommonJump)?);
            if spec.controls.len() == 1 {
                terminal = terminal.max(dpp_check(&vt, &spec, 0, c, StoppingRule::Terminal)?);
            }
        }
        table.rows.push(vec![
            level.to_string(),
            fmt(h),
            vt.states().to_string(),
            fmt(vt.rounding_error),
            fmt(analytic),
            fmt(maxcol(0)),
            fmt(maxcol(1)),
            fmt(maxcol(2)),
            fmt(first_jump),
            fmt(terminal),
        ]);
        if cfg.export_values {
            let mut buf = Vec::new();
            vt.write_csv(&mut buf, &cfg.hash())?;
            extra.push((format!("{}_values_L{level}.csv", cfg.name()), String::from_utf8(buf).expect("utf-8")));
        }
    }
    Ok((table, extra))
}

const STOPPING_HEADER: &[&str] = &[
    "level",
    "h",
    "states",
    "analytic_error",
    "tolerance",
    "min_stop_gradient",
    "min_neg_generator",
    "max_optimal_generator",
    "max_optimal_value_gap",
    "max_distance_to_optimal",
    "dominated_checked",
    "monotone_pairs",
    "monotone_violations",
];

fn stopping_suite(cfg: &ExperimentConfig) -> Result<(RowTable, Vec<(String, String)>)> {
    let base = cfg.stopping.as_ref().expect("validated");
    let tol = cfg.gates.obstacle.unwrap_or_default();
    let mut table = RowTable::new(STOPPING_HEADER);
    let mut extra = Vec::new();
    for (level, l) in cfg.levels.iter().enumerate() {
        let h = l.h.expect("validated");
        let mut pc = base.clone();
        pc.step = h;
        let spec = pc.build()?;
        let vt = solve_stopping_dp(&spec)?;
        let analytic = cfg.gates.analytic_rate.map_or(f64::NAN, |r| analytic_error(&vt, spec.horizon, r));
        let interior: Vec<(usize, Vec<i32>)> =
            (0..vt.lattice.steps).flat_map(|k| vt.keys(k).into_iter().map(move |c| (k, c))).collect();
        let reports = interior
            .par_iter()
            .map(|(k, c)| obstacle_residual(&vt, &spec, *k, c, tol))
            .collect::<Result<Vec<_>>>()?;
        let fold = |f: &dyn Fn(&crate::mfc::ObstacleReport) -> f64, init: f64, op: fn(f64, f64) -> f64| {
            reports.iter().map(f).fold(init, op)
        };
        let mono = value_monotonicity(&vt)?;
        table.rows.push(vec![
            level.to_string(),
            fmt(h),
            vt.states().to_string(),
            fmt(analytic),
            fmt(tol.at(h, spec.particles)),
            fmt(fold(&|r| r.min_stop_gradient, f64::INFINITY, f64::min)),
            fmt(fold(&|r| r.min_neg_generator, f64::INFINITY, f64::min)),
            fmt(fold(&|r| r.optimal_generator, 0.0, f64::max)),
            fmt(fold(&|r| r.optimal_value_gap, 0.0, f64::max)),
            fmt(fold(&|r| r.distance_to_optimal, 0.0, f64::max)),
            reports.iter().map(|r| r.dominated_checked).sum::<usize>().to_string(),
            mono.pairs.to_string(),
            mono.violations.to_string(),
        ]);
        if cfg.export_values {
            let mut buf = Vec::new();
            vt.write_csv(&mut buf, &cfg.hash())?;
            extra.push((format!("{}_values_L{level}.csv", cfg.name()), String::from_utf8(buf).expect("utf-8")));
        }
    }
    Ok((table, extra))
}

fn transport_suite(cfg: &ExperimentConfig) -> Result<RowTable> {
    let p = &cfg.oracle;
    let mut table =
        RowTable::new(&["case", "atoms", "w2_sorted", "w2_brute", "w2_gap", "w1_sorted", "w1_brute", "w1_gap"]);
    let rows: Vec<Vec<String>> = (0..p.cases)
        .into_par_iter()
        .map(|case| -> Result<Vec<String>> {
            let mut rng = substream(cfg.seed, Purpose::Oracle, Cohort::Particles, case as u64);
            let n = rng.random_range(1..=p.max_atoms.clamp(1, 8));
            // Half of the samples sit on a coarse grid so that ties occur.
            let coarse = rng.random_bool(0.5);
            let mut draw = || {
                let v: f64 = rng.random_range(-2.0..2.0);
                if coarse { (v * 2.0).round() / 2.0 } else { v }
            };
            let xs: Vec<f64> = (0..n).map(|_| draw()).collect();
            let ys: Vec<f64> = (0..n).map(|_| draw()).collect();
            let a = EmpiricalMeasure::uniform(&xs)?;
            let b = EmpiricalMeasure::uniform(&ys)?;
            let w2 = a.wasserstein(&b, 2)?;
            let w1 = a.wasserstein(&b, 1)?;
            let b2 = brute_force_wasserstein(&xs, &ys, 2);
            let b1 = brute_force_wasserstein(&xs, &ys, 1);
            let mut row = vec![case.to_string(), n.to_string()];
            row.extend([w2, b2, (w2 - b2).abs(), w1, b1, (w1 - b1).abs()].map(fmt));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    table.rows = rows;
    Ok(table)
}

fn random_measure<R: Rng>(rng: &mut R, max_atoms: usize) -> Result<EmpiricalMeasure> {
    let n = rng.random_range(1..=max_atoms.max(1));
    let raw: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0))).collect();
    let total: f64 = raw.iter().map(|r| r.1).sum();
    EmpiricalMeasure::new(raw.into_iter().map(|(x, w)| (x, w / total)))
}

fn functional_suite(cfg: &ExperimentConfig) -> Result<RowTable> {
    let p = &cfg.oracle;
    let mut table = RowTable::new(&[
        "case",
        "atoms0",
        "atoms1",
        "degree",
        "flat_residual",
        "fd_error_coarse",
        "fd_error_fine",
        "fd_ratio",
        "pair_gap",
    ]);
    let rows: Vec<Vec<String>> = (0..p.cases)
        .into_par_iter()
        .map(|case| -> Result<Vec<String>> {
            let mut rng = substream(cfg.seed, Purpose::Oracle, Cohort::Copies, case as u64);
            let u = CylindricalFunctional::random(&mut rng, p.arity, p.degree, p.inner_degree);
            let m0 = random_measure(&mut rng, p.max_atoms)?;
            let m1 = random_measure(&mut rng, p.max_atoms)?;
            let flat = check_flat_identity(&u, &m0, &m1, flat_identity_nodes(&u));
            let x: f64 = rng.random_range(-1.0..1.0);
            let xhat: f64 = rng.random_range(-1.0..1.0);
            let coarse = check_derivative_consistency(&u, &m0, x, xhat, p.fd_steps[0])?.max_error();
            let fine = check_derivative_consistency(&u, &m0, x, xhat, p.fd_steps[1])?.max_error();
            let xs: Vec<f64> = m0.atoms().iter().map(|a| a.x).collect();
            let ys: Vec<f64> = m1.atoms().iter().map(|a| a.x).collect();
            let a: Vec<f64> = (0..xs.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..ys.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = u.at(&m0);
            let pair_gap = (f.pair_average_dxdxhat(&xs, &a, &ys, &b) - brute_pair_average(&f, &xs, &a, &ys, &b)).abs();
            let mut row = vec![case.to_string(), m0.len().to_string(), m1.len().to_string(), u.outer_degree().to_string()];
            row.extend([flat, coarse, fine, coarse / fine, pair_gap].map(fmt));
            Ok(row)
        })
        .collect::<Result<_>>()?;
    table.rows = rows;
    Ok(table)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().filter(|x| !x.is_nan()).fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().filter(|x| !x.is_nan()).fold(f64::INFINITY, f64::min)
}

fn standard_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    mean_std(v).1 / (v.len() as f64).sqrt()
}

/// Gates and convergence statistics recomputed from CSV text.
pub fn evaluate_gates(
    cfg: &ExperimentConfig,
    csv: &str,
    tol_scale: f64,
) -> Result<(Vec<Gate>, BTreeMap<String, f64>)> {
    let t = RowTable::from_csv(csv)?;
    let g = &cfg.gates;
    let s = tol_scale;
    let mut gates = Vec::new();
    let mut conv = BTreeMap::new();
    if t.rows.is_empty() {
        return Ok((gates, conv));
    }
    if let Some(v) = g.telescoping_max {
        gates.push(Gate::upper("telescoping", max_of(&t.all("telescoping")?), v * s));
    }
    match cfg.suite {
        Suite::Ito | Suite::Wentzell => {
            let levels = t.distinct("level")?;
            let mut level_rms = Vec::new();
            for l in &levels {
                let r = rms(&t.at("residual", "level", l)?);
                conv.insert(format!("rms_residual_L{l}"), r);
                level_rms.push(r);
            }
            for (i, w) in level_rms.windows(2).enumerate() {
                conv.insert(format!("rms_ratio_L{}_L{}", levels[i], levels[i + 1]), w[0] / w[1]);
            }
            let last = levels.last().expect("non-empty");
            let first_rms = level_rms[0];
            let last_rms = *level_rms.last().expect("non-empty");
            if let Some(v) = g.rms_ratio_min {
                gates.push(Gate::lower("rms_ratio", first_rms / last_rms, v));
            }
            if let Some(v) = g.rms_rel_max {
                let scale = rms(&t.at("u_final", "level", last)?);
                conv.insert("u_final_rms".into(), scale);
                gates.push(Gate::upper("rms_rel", last_rms / scale, v * s));
            }
            if let Some(v) = g.mean_se_max {
                let r = t.at("residual", "level", last)?;
                gates.push(Gate::upper("mean_residual", pairwise_mean(&r).abs(), v * standard_error(&r) * s + STAT_FLOOR));
            }
            if let (Some(rate), Some(v)) = (g.moment_rate, g.moment_se_max) {
                let horizon = cfg.model.as_ref().map_or(0.0, |m| m.horizon);
                let m1 = t.at("mean_final", "level", last)?;
                let m0 = pairwise_mean(&t.at("mean_initial", "level", last)?);
                let expected = m0 + rate * horizon;
                conv.insert("mean_final".into(), pairwise_mean(&m1));
                conv.insert("mean_expected".into(), expected);
                gates.push(Gate::upper("moment", (pairwise_mean(&m1) - expected).abs(), v * standard_error(&m1) * s + STAT_FLOOR));
            }
            if let Some(v) = g.residual_abs_max {
                let r = t.all("residual")?;
                gates.push(Gate::upper("residual_abs", max_of(&r.iter().map(|x| x.abs()).collect::<Vec<_>>()), v * s));
            }
            if let Some(v) = g.ito_gap_max {
                gates.push(Gate::upper("ito_gap", max_of(&t.all("ito_gap")?), v * s));
            }
            if let Some(v) = g.cross_gap_max {
                gates.push(Gate::upper("cross_gap", max_of(&t.all("cross_gap")?), v * s));
            }
        }
        Suite::LemmaBracket | Suite::LemmaField => {
            let finest = t.distinct("dyadic")?.into_iter().max_by_key(|d| d.parse::<u32>().unwrap_or(0)).expect("rows");
            let gaps = t.at("gap", "dyadic", &finest)?;
            conv.insert("max_gap_finest".into(), max_of(&gaps));
            if g.within_band == Some(true) {
                let bands = t.at("band", "dyadic", &finest)?;
                let excess: Vec<f64> = gaps.iter().zip(&bands).map(|(g, b)| g - b * s).collect();
                gates.push(Gate::upper("within_band", max_of(&excess), 0.0));
            }
            if let Some(v) = g.gap_abs_max {
                gates.push(Gate::upper("gap_finest", max_of(&gaps), v * s));
            }
        }
        Suite::Mfc => {
            let h = t.all("h")?;
            if let Some(v) = g.analytic_max {
                gates.push(Gate::upper("analytic", max_of(&t.all("analytic_error")?), v * s));
            }
            let hjb: Vec<f64> = t.all("hjb_sup_inside")?.iter().zip(t.all("hjb_uniform")?).map(|(a, b)| a.max(b)).collect();
            for (hi, r) in h.iter().zip(&hjb) {
                conv.insert(format!("hjb_h{hi:e}"), *r);
            }
            if let Some(c) = g.hjb_constant {
                let scaled: Vec<f64> = hjb.iter().zip(&h).map(|(r, h)| r / h).collect();
                gates.push(Gate::upper("hjb_over_h", max_of(&scaled), c * s));
            }
            if let Some(v) = g.hjb_order_min {
                let floor = g.hjb_floor.unwrap_or(0.0);
                let order = slope(&h, &hjb.iter().map(|r| r.max(floor)).collect::<Vec<_>>());
                let floored = hjb.iter().all(|r| *r <= floor);
                let mut gate = Gate::lower("hjb_order", order, v);
                if floored {
                    gate.pass = true;
                    gate.note = Some(format!("every residual <= floor {floor:e}"));
                }
                conv.insert("hjb_order".into(), order);
                gates.push(gate);
            }
            if let Some(v) = g.dpp_max {
                let mut all = t.all("dpp_one_step")?;
                all.extend(t.all("dpp_first_jump")?);
                all.extend(t.all("dpp_terminal")?);
                gates.push(Gate::upper("dpp", max_of(&all), v * s));
            }
        }
        Suite::Stopping => {
            if let Some(v) = g.analytic_max {
                gates.push(Gate::upper("analytic", max_of(&t.all("analytic_error")?), v * s));
            }
            if g.obstacle.is_some() {
                let tol: Vec<f64> = t.all("tolerance")?.iter().map(|x| x * s).collect();
                let grad = t.all("min_stop_gradient")?;
                let neg = t.all("min_neg_generator")?;
                let opt = t.all("max_optimal_generator")?;
                let slack = |v: &[f64]| -> Vec<f64> { v.iter().zip(&tol).map(|(a, b)| a + b).collect() };
                gates.push(Gate::lower("stop_gradient_slack", min_of(&slack(&grad)), 0.0));
                gates.push(Gate::lower("generator_slack", min_of(&slack(&neg)), 0.0));
                let excess: Vec<f64> = opt.iter().zip(&tol).map(|(a, b)| a - b).collect();
                gates.push(Gate::upper("optimal_generator_excess", max_of(&excess), 0.0));
                gates.push(Gate::upper("optimal_value_gap", max_of(&t.all("max_optimal_value_gap")?), 1e-12 * s));
            }
            if g.monotone == Some(true) {
                gates.push(Gate::upper("monotone_violations", t.all("monotone_violations")?.iter().sum(), 0.0));
            }
        }
        Suite::TransportOracle => {
            if let Some(v) = g.transport_max {
                let mut all = t.all("w2_gap")?;
                all.extend(t.all("w1_gap")?);
                gates.push(Gate::upper("transport_gap", max_of(&all), v * s));
            }
        }
        Suite::FunctionalOracle => {
            if let Some(v) = g.flat_identity_max {
                gates.push(Gate::upper("flat_identity", max_of(&t.all("flat_residual")?), v * s));
            }
            if let Some(v) = g.fd_ratio_min {
                let mut r = t.all("fd_ratio")?;
                r.sort_by(f64::total_cmp);
                let median = r[r.len() / 2];
                conv.insert("fd_ratio_median".into(), median);
                gates.push(Gate::lower("fd_ratio_median", median, v));
            }
            if let Some(v) = g.pair_gap_max {
                gates.push(Gate::upper("pair_gap", max_of(&t.all("pair_gap")?), v * s));
            }
        }
    }
    Ok((gates, conv))
}

/// Least-squares slope of `log y` against `log x`.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = pairwise_mean(&lx);
    let my = pairwise_mean(&ly);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Recompute the pass/fail gates of a summary from its rows.
pub fn recompute_gates_from_csv(cfg: &ExperimentConfig, csv: &str, tol_scale: f64) -> Result<Vec<Gate>> {
    evaluate_gates(cfg, csv, tol_scale).map(|(g, _)| g)
}
