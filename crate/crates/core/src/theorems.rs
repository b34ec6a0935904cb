//! Monte Carlo harness for the limit theorems.
//!
//! Conditioning on survival is done by rejection: replicates are run under
//! the original law and only survivors are kept. One [`SurvivalRun`] feeds
//! the survival curve and the three conditional laws, so their denominators
//! agree exactly on shared seeds.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::model::EnvironmentModel;
use crate::parallel::{self, BATCH};
use crate::rng::{stream, PathRng, StreamModule, Substream};
use crate::simulate::{evolve, Population};
use crate::spectral::{self, CRITICAL_DEAD_BAND};
use crate::stats::{self, binomial_se, Summary};

/// Conditional laws need at least this many samples.
pub const MIN_CONDITIONED: usize = 1000;
pub const KS_THRESHOLD: f64 = 0.05;
/// Sample size at which the KS threshold is meant to apply.
pub const KS_SAMPLES: usize = 10_000;
pub const MEDIAN_TOLERANCE: f64 = 0.05;
pub const NEGATIVE_MASS_BOUND: f64 = 0.01;
pub const ATOM_BOUND: f64 = 0.01;
pub const COUPLING_EPS: f64 = 0.25;
pub const LAPLACE_ARGS: [f64; 3] = [0.5, 1.0, 2.0];
pub const ATOM_LEVELS: [f64; 3] = [1e-3, 1e-2, 1e-1];
pub const EXIT_LEVELS: [f64; 3] = [2.0, 4.0, 6.0];

/// `Φ⁺(t) = (1 − e^{−t²/2}) 1{t ≥ 0}`.
pub fn rayleigh_cdf(t: f64) -> f64 {
    if t < 0.0 {
        0.0
    } else {
        -(-0.5 * t * t).exp_m1()
    }
}

/// Median of `Φ⁺`.
pub fn rayleigh_median() -> f64 {
    (2.0 * std::f64::consts::LN_2).sqrt()
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoremError {
    #[error("only {got} conditioned samples at n = {n}; at least {need} are needed")]
    TooFewSurvivors { n: usize, got: usize, need: usize },
    #[error("environment is not critical: nu(rho) = {drift:e}")]
    NotCritical { drift: f64 },
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TheoremId {
    Survival,
    NormalizedPopulation,
    ConditionalClt,
    Yaglom,
    ConditionedWalk,
}

impl TheoremId {
    pub const ALL: [TheoremId; 5] =
        [TheoremId::Survival, TheoremId::NormalizedPopulation, TheoremId::ConditionalClt, TheoremId::Yaglom, TheoremId::ConditionedWalk];

    pub fn as_str(&self) -> &'static str {
        match self {
            TheoremId::Survival => "1.1",
            TheoremId::NormalizedPopulation => "1.2",
            TheoremId::ConditionalClt => "1.3",
            TheoremId::Yaglom => "1.4",
            TheoremId::ConditionedWalk => "P2.3",
        }
    }
}

impl fmt::Display for TheoremId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TheoremId {
    type Err = TheoremError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TheoremId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TheoremError::Invalid(format!("unknown theorem '{s}' (expected 1.1, 1.2, 1.3, 1.4 or P2.3)")))
    }
}

impl Serialize for TheoremId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

/// Settings shared by every experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremConfig {
    pub i: usize,
    pub z: u64,
    /// Restrict to `X_n = j`; `None` marginalises.
    pub j: Option<usize>,
    /// Starting level of the killed walk.
    pub y: f64,
    pub n_list: Vec<usize>,
    /// Replicates are added in batches until this many survive at the last horizon...
    pub min_survivors: usize,
    /// ...or this many replicates have been run.
    pub max_replicates: u64,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            i: 0,
            z: 1,
            j: None,
            y: 1.0,
            n_list: vec![256, 1024, 4096],
            min_survivors: KS_SAMPLES,
            max_replicates: 10_000_000,
            bootstrap: 200,
            seed: 42,
        }
    }
}

impl TheoremConfig {
    fn validate(&self, model: &EnvironmentModel) -> Result<(), TheoremError> {
        if self.i >= model.dim() || self.j.is_some_and(|j| j >= model.dim()) {
            return Err(TheoremError::Invalid(format!("states must be below {}", model.dim())));
        }
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[0] >= w[1]) || self.n_list[0] == 0 {
            return Err(TheoremError::Invalid("horizons must be positive and increasing".into()));
        }
        if self.max_replicates == 0 {
            return Err(TheoremError::Invalid("replicate cap must be at least 1".into()));
        }
        Ok(())
    }

    fn last_two(&self) -> (usize, usize) {
        let k = self.n_list.len();
        (self.n_list[k.saturating_sub(2)], self.n_list[k - 1])
    }
}

fn require_critical(model: &EnvironmentModel) -> Result<(), TheoremError> {
    let drift = model.drift();
    if drift.abs() > CRITICAL_DEAD_BAND {
        return Err(TheoremError::NotCritical { drift });
    }
    if !spectral::nonlattice_check(model, &spectral::default_t_grid()).nonlattice {
        log::warn!("the walk is lattice; the limit laws are not expected to hold");
    }
    Ok(())
}

fn sigma(model: &EnvironmentModel) -> f64 {
    spectral::sigma2(model, spectral::SIGMA2_TAIL_TOL).sqrt()
}

/// One table cell; CSV rows are these in order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub n: usize,
    pub j: Option<usize>,
    pub t: Option<f64>,
    pub quantity: &'static str,
    pub estimate: f64,
    pub se: f64,
    pub reference: Option<f64>,
}

/// `statistic ≤ bound`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, statistic: f64, bound: f64) -> Self {
        Self { name: name.into(), statistic, bound, passed: statistic <= bound }
    }

    /// `|estimate − reference| ≤ tolerance`.
    pub fn close(name: impl Into<String>, estimate: f64, reference: f64, tolerance: f64) -> Self {
        Self::at_most(name, (estimate - reference).abs(), tolerance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub theorem: TheoremId,
    pub n_list: Vec<usize>,
    pub replicates: u64,
    /// Conditioned sample size per horizon.
    pub samples: Vec<usize>,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<Check>,
    /// Wall time; kept out of serialised output so reruns are byte-identical.
    #[serde(skip)]
    pub runtime: Duration,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn row(&self, quantity: &str, n: usize, j: Option<usize>, t: Option<f64>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.quantity == quantity && r.n == n && r.j == j && r.t == t)
    }
}

/// A replicate alive at a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Survivor {
    pub x: usize,
    pub log_z: f64,
    pub z_is_one: bool,
    pub s: f64,
    /// `min_{1≤k≤n} S_k`
    pub min_s: f64,
}

impl Survivor {
    /// `log(Z_n / e^{S_n})`
    pub fn log_w(&self) -> f64 {
        self.log_z - self.s
    }
}

/// Survivors of the joint chain at each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalRun {
    pub i: usize,
    pub z: u64,
    pub n_list: Vec<usize>,
    pub replicates: u64,
    pub seed: u64,
    pub survivors: Vec<Vec<Survivor>>,
}

fn one_replicate(model: &EnvironmentModel, i: usize, z: u64, n_list: &[usize], seed: u64, r: u64) -> Vec<Option<Survivor>> {
    let mut rng = PathRng::new(seed, StreamModule::Survival, r);
    let mut out = vec![None; n_list.len()];
    let n_max = *n_list.last().unwrap();
    let mut min_s = f64::INFINITY;
    let mut slot = 0;
    evolve(model, i, z, n_max, &mut rng, |st| {
        if st.step > 0 {
            min_s = min_s.min(st.s);
        }
        if st.z.is_extinct() {
            return false;
        }
        if slot < n_list.len() && st.step == n_list[slot] {
            let (log_z, z_is_one) = match st.z {
                Population::Exact(v) => ((v as f64).ln(), v == 1),
                Population::Large(v) => (v.ln(), false),
            };
            out[slot] = Some(Survivor { x: st.x, log_z, z_is_one, s: st.s, min_s });
            slot += 1;
        }
        true
    });
    out
}

impl SurvivalRun {
    /// Exactly `replicates` replicates.
    pub fn simulate(model: &EnvironmentModel, i: usize, z: u64, n_list: &[usize], replicates: u64, seed: u64) -> Self {
        let mut run = Self { i, z, n_list: n_list.to_vec(), replicates: 0, seed, survivors: vec![Vec::new(); n_list.len()] };
        run.extend(model, replicates);
        run
    }

    /// Batches of replicates until `min_survivors` survive at the last
    /// horizon or `max_replicates` have run. Batch boundaries are fixed, so
    /// the result does not depend on the thread count.
    pub fn until(
        model: &EnvironmentModel,
        i: usize,
        z: u64,
        n_list: &[usize],
        min_survivors: usize,
        max_replicates: u64,
        seed: u64,
    ) -> Self {
        let mut run = Self::simulate(model, i, z, n_list, 0, seed);
        while run.survivors.last().unwrap().len() < min_survivors && run.replicates < max_replicates {
            let batch = BATCH.min(max_replicates - run.replicates);
            run.extend(model, batch);
        }
        run
    }

    fn extend(&mut self, model: &EnvironmentModel, count: u64) {
        let start = self.replicates;
        let results = parallel::map_range(start..start + count, |r| one_replicate(model, self.i, self.z, &self.n_list, self.seed, r));
        for rep in results {
            for (k, s) in rep.into_iter().enumerate() {
                if let Some(s) = s {
                    self.survivors[k].push(s);
                }
            }
        }
        self.replicates += count;
    }

    fn index(&self, n: usize) -> usize {
        self.n_list.iter().position(|&m| m == n).expect("horizon is part of the run")
    }

    pub fn at(&self, n: usize) -> &[Survivor] {
        &self.survivors[self.index(n)]
    }

    /// Survivors at `n`, restricted to `X_n = j` when given.
    pub fn conditioned(&self, n: usize, j: Option<usize>) -> Vec<Survivor> {
        self.at(n).iter().filter(|s| j.is_none_or(|j| s.x == j)).copied().collect()
    }

    /// `√n P̂(Z_n > 0, X_n = j)` and its binomial standard error.
    pub fn scaled_survival(&self, n: usize, j: Option<usize>) -> (f64, f64) {
        if self.replicates == 0 {
            return (0.0, 0.0);
        }
        let count = self.at(n).iter().filter(|s| j.is_none_or(|j| s.x == j)).count();
        let p = count as f64 / self.replicates as f64;
        let root = (n as f64).sqrt();
        (root * p, root * binomial_se(p, self.replicates))
    }

    fn denominator_rows(&self, rows: &mut Vec<ReportRow>, j: Option<usize>) {
        for &n in &self.n_list {
            let (estimate, se) = self.scaled_survival(n, j);
            rows.push(ReportRow { n, j, t: None, quantity: "sqrt_n_survival", estimate, se, reference: None });
        }
    }

    fn sample_sizes(&self, j: Option<usize>) -> Vec<usize> {
        self.n_list.iter().map(|&n| self.conditioned(n, j).len()).collect()
    }
}

fn bootstrap_rng(seed: u64, tag: u64) -> rand_chacha::ChaCha8Rng {
    stream(seed, StreamModule::Bootstrap, Substream::Auxiliary, tag)
}

fn combined(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Survival curve `√n P̂(Z_n > 0, X_n = j)` with flatness, the comparison with
/// `ν(j) û` when an estimate `(û, se)` is supplied, the split over `j`, and
/// the exit-then-survive diagnostic `√n P̂(Z_n > 0, τ_y ≤ n) e^y / (z(1+y))`.
pub fn survival_curve(model: &EnvironmentModel, run: &SurvivalRun, u_hat: Option<(f64, f64)>) -> ExperimentReport {
    let started = Instant::now();
    let d = model.dim();
    let (n_prev, n_last) = {
        let k = run.n_list.len();
        (run.n_list[k.saturating_sub(2)], run.n_list[k - 1])
    };
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let states: Vec<Option<usize>> = std::iter::once(None).chain((0..d).map(Some)).collect();
    for &j in &states {
        let reference = u_hat.map(|(u, _)| j.map_or(u, |j| model.nu()[j] * u));
        for &n in &run.n_list {
            let (estimate, se) = run.scaled_survival(n, j);
            rows.push(ReportRow { n, j, t: None, quantity: "sqrt_n_survival", estimate, se, reference });
        }
        let label = j.map_or("all".to_string(), |j| j.to_string());
        let (a, sa) = run.scaled_survival(n_prev, j);
        let (b, sb) = run.scaled_survival(n_last, j);
        if n_prev != n_last {
            checks.push(Check::close(format!("flat j={label}"), b, a, 4.0 * combined(sa, sb)));
        }
        if let Some((u, su)) = u_hat {
            let weight = j.map_or(1.0, |j| model.nu()[j]);
            let reference = weight * u;
            let tol = (0.05 * reference).max(4.0 * combined(sb, weight * su));
            checks.push(Check::close(format!("matches u j={label}"), b, reference, tol));
        }
    }
    let base = run.at(n_last).iter().filter(|s| s.x == 0).count() as f64;
    for j in 1..d {
        let count = run.at(n_last).iter().filter(|s| s.x == j).count() as f64;
        if base == 0.0 || count == 0.0 {
            continue;
        }
        let ratio = count / base;
        let se = ratio * (1.0 / count + 1.0 / base).sqrt();
        let reference = model.nu()[j] / model.nu()[0];
        rows.push(ReportRow { n: n_last, j: Some(j), t: None, quantity: "split_ratio", estimate: ratio, se, reference: Some(reference) });
        checks.push(Check::close(format!("split ratio j={j}"), ratio, reference, 4.0 * se));
    }
    if run.z > 0 && run.replicates > 0 {
        let root = (n_last as f64).sqrt();
        for y in EXIT_LEVELS {
            let hits = run.at(n_last).iter().filter(|s| y + s.min_s <= 0.0).count();
            let p = hits as f64 / run.replicates as f64;
            let scale = root * y.exp() / (run.z as f64 * (1.0 + y));
            rows.push(ReportRow {
                n: n_last,
                j: None,
                t: Some(y),
                quantity: "exit_survival_scaled",
                estimate: scale * p,
                se: scale * binomial_se(p, run.replicates),
                reference: None,
            });
        }
    }
    ExperimentReport {
        theorem: TheoremId::Survival,
        n_list: run.n_list.clone(),
        replicates: run.replicates,
        samples: run.sample_sizes(None),
        seed: run.seed,
        rows,
        checks,
        runtime: started.elapsed(),
    }
}

fn require_samples(n: usize, got: usize) -> Result<(), TheoremError> {
    if got < MIN_CONDITIONED {
        return Err(TheoremError::TooFewSurvivors { n, got, need: MIN_CONDITIONED });
    }
    Ok(())
}

fn laplace(sample: &[f64], a: f64) -> f64 {
    sample.iter().map(|w| (-a * w).exp()).sum::<f64>() / sample.len() as f64
}

/// Two-sample KS between the `label` group and the rest, with a permutation
/// null; returns `(D, null mean, null sd)`.
fn factorization_ks(values: &[f64], labels: &[bool], permutations: usize, seed: u64, tag: u64) -> (f64, f64, f64) {
    let split = |labels: &[bool]| {
        let mut a: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| l).map(|(v, _)| *v).collect();
        let mut b: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| !l).map(|(v, _)| *v).collect();
        stats::sort(&mut a);
        stats::sort(&mut b);
        stats::ks_two_sample(&a, &b)
    };
    let observed = split(labels);
    let mut rng = bootstrap_rng(seed, tag);
    let mut shuffled = labels.to_vec();
    let null: Summary = (0..permutations)
        .map(|_| {
            shuffled.shuffle(&mut rng);
            split(&shuffled)
        })
        .collect();
    (observed, null.mean(), null.variance().sqrt())
}

/// Conditional law of `W_n = Z_n / e^{S_n}` given survival (and `X_n = j`):
/// Laplace transform, factorisation over `X_n`, and the mass near zero.
pub fn normalized_population_law(
    model: &EnvironmentModel,
    run: &SurvivalRun,
    cfg: &TheoremConfig,
) -> Result<ExperimentReport, TheoremError> {
    let started = Instant::now();
    let (n_prev, n_last) = cfg.last_two();
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    run.denominator_rows(&mut rows, cfg.j);
    let mut laplace_at = Vec::new();
    let mut atom_at = Vec::new();
    for (k, &n) in [n_prev, n_last].iter().enumerate() {
        let sample: Vec<f64> = run.conditioned(n, cfg.j).iter().map(|s| s.log_w().exp()).collect();
        require_samples(n, sample.len())?;
        let mut rng = bootstrap_rng(cfg.seed, 10 + k as u64);
        let mut lap = Vec::new();
        for a in LAPLACE_ARGS {
            let estimate = laplace(&sample, a);
            let se = stats::bootstrap_se(&sample, cfg.bootstrap, &mut rng, |s| laplace(s, a));
            rows.push(ReportRow { n, j: cfg.j, t: Some(a), quantity: "laplace", estimate, se, reference: None });
            lap.push((estimate, se));
        }
        laplace_at.push(lap);
        let mut sorted = sample.clone();
        stats::sort(&mut sorted);
        let mut atoms = Vec::new();
        for eps in ATOM_LEVELS {
            let p = stats::ecdf(&sorted, eps);
            let se = binomial_se(p, sorted.len() as u64);
            rows.push(ReportRow { n, j: cfg.j, t: Some(eps), quantity: "mass_below", estimate: p, se, reference: None });
            atoms.push((p, se));
        }
        atom_at.push(atoms);
    }
    if n_prev != n_last {
        for (k, a) in LAPLACE_ARGS.iter().enumerate() {
            let ((x, sx), (y, sy)) = (laplace_at[0][k], laplace_at[1][k]);
            checks.push(Check::close(format!("laplace stable t={a}"), y, x, 4.0 * combined(sx, sy)));
        }
        for (k, eps) in ATOM_LEVELS.iter().enumerate() {
            let ((x, sx), (y, sy)) = (atom_at[0][k], atom_at[1][k]);
            checks.push(Check::at_most(format!("mass below {eps} nonincreasing"), y, x + 4.0 * combined(sx, sy)));
        }
    }
    checks.push(Check::at_most("mass below 0.001", atom_at[1][0].0, ATOM_BOUND));
    // factorisation over the final state, always on the marginal sample
    let all = run.at(n_last);
    let values: Vec<f64> = all.iter().map(|s| s.log_w()).collect();
    for j in 0..model.dim() {
        let labels: Vec<bool> = all.iter().map(|s| s.x == j).collect();
        let inside = labels.iter().filter(|&&l| l).count();
        if inside < 100 || values.len() - inside < 100 {
            continue;
        }
        let (d, mean0, sd0) = factorization_ks(&values, &labels, cfg.bootstrap, cfg.seed, 100 + j as u64);
        rows.push(ReportRow { n: n_last, j: Some(j), t: None, quantity: "factorization_ks", estimate: d, se: sd0, reference: Some(mean0) });
        checks.push(Check::at_most(format!("factorization j={j}"), d, mean0 + 4.0 * sd0));
    }
    Ok(ExperimentReport {
        theorem: TheoremId::NormalizedPopulation,
        n_list: run.n_list.clone(),
        replicates: run.replicates,
        samples: run.sample_sizes(cfg.j),
        seed: run.seed,
        rows,
        checks,
        runtime: started.elapsed(),
    })
}

/// KS distance to `Φ⁺` with a bootstrap standard error.
fn ks_rayleigh(sample: &[f64], resamples: usize, seed: u64, tag: u64) -> (f64, f64) {
    let mut sorted = sample.to_vec();
    stats::sort(&mut sorted);
    let d = stats::ks_one_sample(&sorted, rayleigh_cdf);
    let mut rng = bootstrap_rng(seed, tag);
    let se = stats::bootstrap_se(sample, resamples, &mut rng, |s| {
        let mut s = s.to_vec();
        stats::sort(&mut s);
        stats::ks_one_sample(&s, rayleigh_cdf)
    });
    (d, se)
}

/// Rows and checks comparing a scaled conditional sample against `Φ⁺`.
#[allow(clippy::too_many_arguments)]
fn rayleigh_block(
    rows: &mut Vec<ReportRow>,
    checks: &mut Vec<Check>,
    sample: &[f64],
    n: usize,
    j: Option<usize>,
    cfg: &TheoremConfig,
    tag: u64,
    final_horizon: bool,
) {
    let (d, se) = ks_rayleigh(sample, cfg.bootstrap, cfg.seed, tag);
    rows.push(ReportRow { n, j, t: None, quantity: "ks_rayleigh", estimate: d, se, reference: Some(0.0) });
    let mut sorted = sample.to_vec();
    stats::sort(&mut sorted);
    let median = stats::quantile(&sorted, 0.5);
    rows.push(ReportRow { n, j, t: Some(0.5), quantity: "median", estimate: median, se: f64::NAN, reference: Some(rayleigh_median()) });
    let negative = stats::ecdf(&sorted, -0.1);
    rows.push(ReportRow {
        n,
        j,
        t: Some(-0.1),
        quantity: "negative_mass",
        estimate: negative,
        se: binomial_se(negative, sorted.len() as u64),
        reference: Some(0.0),
    });
    for t in [0.5, 1.0, 1.5, 2.0, 3.0] {
        let p = stats::ecdf(&sorted, t);
        rows.push(ReportRow {
            n,
            j,
            t: Some(t),
            quantity: "cdf",
            estimate: p,
            se: binomial_se(p, sorted.len() as u64),
            reference: Some(rayleigh_cdf(t)),
        });
    }
    if final_horizon {
        checks.push(Check::at_most("samples at least 10000", KS_SAMPLES as f64, sample.len() as f64));
        checks.push(Check::at_most("ks", d, KS_THRESHOLD));
        checks.push(Check::close("median", median / rayleigh_median(), 1.0, MEDIAN_TOLERANCE));
        checks.push(Check::at_most("negative mass", negative, NEGATIVE_MASS_BOUND));
    }
}

/// `P̂(X_n = j | conditioning event)` against `ν(j)` for every `j`.
fn marginal_block(
    rows: &mut Vec<ReportRow>,
    checks: &mut Vec<Check>,
    model: &EnvironmentModel,
    states: &[usize],
    n: usize,
    final_horizon: bool,
) {
    let total = states.len() as u64;
    for j in 0..model.dim() {
        let p = states.iter().filter(|&&x| x == j).count() as f64 / total as f64;
        let se = binomial_se(p, total);
        let nu = model.nu()[j];
        rows.push(ReportRow { n, j: Some(j), t: None, quantity: "marginal", estimate: p, se, reference: Some(nu) });
        if final_horizon {
            checks.push(Check::close(format!("marginal j={j}"), p, nu, 4.0 * se));
        }
    }
}

/// `S_n / (σ√n)` given survival (and `X_n = j`), against `Φ⁺`.
pub fn conditional_clt(model: &EnvironmentModel, run: &SurvivalRun, cfg: &TheoremConfig) -> Result<ExperimentReport, TheoremError> {
    let started = Instant::now();
    let sigma = sigma(model);
    let n_last = *run.n_list.last().unwrap();
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    run.denominator_rows(&mut rows, cfg.j);
    for (k, &n) in run.n_list.iter().enumerate() {
        let conditioned = run.conditioned(n, cfg.j);
        if n == n_last {
            require_samples(n, conditioned.len())?;
        } else if conditioned.len() < MIN_CONDITIONED {
            continue;
        }
        let scale = sigma * (n as f64).sqrt();
        let sample: Vec<f64> = conditioned.iter().map(|s| s.s / scale).collect();
        rayleigh_block(&mut rows, &mut checks, &sample, n, cfg.j, cfg, 200 + k as u64, n == n_last);
        let states: Vec<usize> = run.at(n).iter().map(|s| s.x).collect();
        marginal_block(&mut rows, &mut checks, model, &states, n, n == n_last);
    }
    Ok(ExperimentReport {
        theorem: TheoremId::ConditionalClt,
        n_list: run.n_list.clone(),
        replicates: run.replicates,
        samples: run.sample_sizes(cfg.j),
        seed: run.seed,
        rows,
        checks,
        runtime: started.elapsed(),
    })
}

/// `log Z_n / (σ√n)` given survival, against `Φ⁺`, with the coupling
/// `P̂(|log Z_n − S_n| / (σ√n) ≥ ε)` and the boundary mass `P̂(Z_n = 1)`.
pub fn yaglom_law(model: &EnvironmentModel, run: &SurvivalRun, cfg: &TheoremConfig) -> Result<ExperimentReport, TheoremError> {
    let started = Instant::now();
    let sigma = sigma(model);
    let n_last = *run.n_list.last().unwrap();
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    run.denominator_rows(&mut rows, cfg.j);
    let mut coupling = Vec::new();
    for (k, &n) in run.n_list.iter().enumerate() {
        let conditioned = run.conditioned(n, cfg.j);
        if n == n_last {
            require_samples(n, conditioned.len())?;
        } else if conditioned.len() < MIN_CONDITIONED {
            continue;
        }
        let scale = sigma * (n as f64).sqrt();
        let sample: Vec<f64> = conditioned.iter().map(|s| s.log_z / scale).collect();
        rayleigh_block(&mut rows, &mut checks, &sample, n, cfg.j, cfg, 300 + k as u64, n == n_last);
        let total = conditioned.len() as u64;
        let far = conditioned.iter().filter(|s| (s.log_z - s.s).abs() / scale >= COUPLING_EPS).count() as f64 / total as f64;
        let far_se = binomial_se(far, total);
        rows.push(ReportRow { n, j: cfg.j, t: Some(COUPLING_EPS), quantity: "coupling", estimate: far, se: far_se, reference: Some(0.0) });
        coupling.push((far, far_se));
        let ones = conditioned.iter().filter(|s| s.z_is_one).count() as f64 / total as f64;
        rows.push(ReportRow {
            n,
            j: cfg.j,
            t: Some(0.0),
            quantity: "boundary_mass",
            estimate: ones,
            se: binomial_se(ones, total),
            reference: None,
        });
        let states: Vec<usize> = run.at(n).iter().map(|s| s.x).collect();
        marginal_block(&mut rows, &mut checks, model, &states, n, n == n_last);
    }
    if coupling.len() >= 2 {
        let ((a, sa), (b, sb)) = (coupling[coupling.len() - 2], coupling[coupling.len() - 1]);
        checks.push(Check::at_most("coupling nonincreasing", b, a + 4.0 * combined(sa, sb)));
    }
    Ok(ExperimentReport {
        theorem: TheoremId::Yaglom,
        n_list: run.n_list.clone(),
        replicates: run.replicates,
        samples: run.sample_sizes(cfg.j),
        seed: run.seed,
        rows,
        checks,
        runtime: started.elapsed(),
    })
}

/// `(y + S_n, X_n)` for replicates with `τ_y > n`, one list per horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KilledWalkRun {
    pub i: usize,
    pub y: f64,
    pub n_list: Vec<usize>,
    pub replicates: u64,
    pub alive: Vec<Vec<(f64, usize)>>,
}

impl KilledWalkRun {
    pub fn until(model: &EnvironmentModel, i: usize, y: f64, n_list: &[usize], min_alive: usize, max_replicates: u64, seed: u64) -> Self {
        let n_max = *n_list.last().unwrap();
        let mut run = Self { i, y, n_list: n_list.to_vec(), replicates: 0, alive: vec![Vec::new(); n_list.len()] };
        while run.alive.last().unwrap().len() < min_alive && run.replicates < max_replicates {
            let count = BATCH.min(max_replicates - run.replicates);
            let start = run.replicates;
            let batch = parallel::map_range(start..start + count, |r| {
                let mut rng = stream(seed, StreamModule::ConditionedWalk, Substream::Environment, r);
                let mut out = vec![None; n_list.len()];
                let (mut x, mut level, mut slot) = (i, y, 0);
                for k in 1..=n_max {
                    x = model.kernel().sample_next(x, &mut rng);
                    level += model.rho()[x];
                    if level <= 0.0 {
                        break;
                    }
                    if k == n_list[slot] {
                        out[slot] = Some((level, x));
                        slot += 1;
                    }
                }
                out
            });
            for rep in batch {
                for (k, v) in rep.into_iter().enumerate() {
                    if let Some(v) = v {
                        run.alive[k].push(v);
                    }
                }
            }
            run.replicates += count;
        }
        run
    }
}

/// `(y + S_n) / (σ√n)` given `τ_y > n` (and `X_n = j`), against `Φ⁺`.
pub fn conditioned_clt_walk(model: &EnvironmentModel, cfg: &TheoremConfig) -> Result<ExperimentReport, TheoremError> {
    cfg.validate(model)?;
    require_critical(model)?;
    let started = Instant::now();
    let sigma = sigma(model);
    let run = KilledWalkRun::until(model, cfg.i, cfg.y, &cfg.n_list, cfg.min_survivors, cfg.max_replicates, cfg.seed);
    let n_last = *cfg.n_list.last().unwrap();
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let mut samples = Vec::new();
    for (k, &n) in cfg.n_list.iter().enumerate() {
        let alive = &run.alive[k];
        let p = alive.len() as f64 / run.replicates as f64;
        let root = (n as f64).sqrt();
        rows.push(ReportRow {
            n,
            j: None,
            t: None,
            quantity: "sqrt_n_alive",
            estimate: root * p,
            se: root * binomial_se(p, run.replicates),
            reference: None,
        });
        let conditioned: Vec<f64> = alive.iter().filter(|(_, x)| cfg.j.is_none_or(|j| *x == j)).map(|(l, _)| *l).collect();
        samples.push(conditioned.len());
        if n == n_last {
            require_samples(n, conditioned.len())?;
        } else if conditioned.len() < MIN_CONDITIONED {
            continue;
        }
        let scale = sigma * root;
        let sample: Vec<f64> = conditioned.iter().map(|l| l / scale).collect();
        rayleigh_block(&mut rows, &mut checks, &sample, n, cfg.j, cfg, 400 + k as u64, n == n_last);
        if n == n_last {
            let nonpositive = conditioned.iter().filter(|&&l| l <= 0.0).count();
            checks.push(Check::at_most("negative support empty", nonpositive as f64, 0.0));
            for j in 0..model.dim() {
                let split: Vec<f64> = alive.iter().filter(|(_, x)| *x == j).map(|(l, _)| l / scale).collect();
                if split.len() >= MIN_CONDITIONED {
                    let (d, se) = ks_rayleigh(&split, cfg.bootstrap, cfg.seed, 500 + j as u64);
                    rows.push(ReportRow { n, j: Some(j), t: None, quantity: "ks_rayleigh_split", estimate: d, se, reference: Some(0.0) });
                }
            }
        }
        let states: Vec<usize> = alive.iter().map(|(_, x)| *x).collect();
        marginal_block(&mut rows, &mut checks, model, &states, n, n == n_last);
    }
    Ok(ExperimentReport {
        theorem: TheoremId::ConditionedWalk,
        n_list: cfg.n_list.clone(),
        replicates: run.replicates,
        samples,
        seed: cfg.seed,
        rows,
        checks,
        runtime: started.elapsed(),
    })
}

/// Runs the shared survival simulation for `cfg`.
pub fn survival_run(model: &EnvironmentModel, cfg: &TheoremConfig) -> Result<SurvivalRun, TheoremError> {
    cfg.validate(model)?;
    require_critical(model)?;
    Ok(SurvivalRun::until(model, cfg.i, cfg.z, &cfg.n_list, cfg.min_survivors, cfg.max_replicates, cfg.seed))
}

/// One experiment from scratch. `u_hat` is only used by the survival curve.
pub fn run_theorem(
    model: &EnvironmentModel,
    id: TheoremId,
    cfg: &TheoremConfig,
    u_hat: Option<(f64, f64)>,
) -> Result<ExperimentReport, TheoremError> {
    if id == TheoremId::ConditionedWalk {
        return conditioned_clt_walk(model, cfg);
    }
    let run = survival_run(model, cfg)?;
    let mut report = match id {
        TheoremId::Survival => survival_curve(model, &run, u_hat),
        TheoremId::NormalizedPopulation => normalized_population_law(model, &run, cfg)?,
        TheoremId::ConditionalClt => conditional_clt(model, &run, cfg)?,
        TheoremId::Yaglom => yaglom_law(model, &run, cfg)?,
        TheoremId::ConditionedWalk => unreachable!(),
    };
    report.seed = cfg.seed;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rayleigh_examples() {
        assert_eq!(rayleigh_cdf(0.0), 0.0);
        assert_eq!(rayleigh_cdf(-1.0), 0.0);
        assert_abs_diff_eq!(rayleigh_cdf(rayleigh_median()), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rayleigh_median(), 1.17741, epsilon = 1e-5);
        assert!(rayleigh_cdf(40.0) == 1.0);
    }

    #[test]
    fn theorem_ids_round_trip() {
        for id in TheoremId::ALL {
            assert_eq!(id.as_str().parse::<TheoremId>().unwrap(), id);
        }
        assert!("p2.3".parse::<TheoremId>().is_ok());
        assert!("2.1".parse::<TheoremId>().is_err());
    }

    #[test]
    fn zero_population_gives_flat_zero_curve() {
        let m = presets::three_state_nonlattice();
        let run = SurvivalRun::simulate(&m, 0, 0, &[4, 16], 500, 1);
        let r = survival_curve(&m, &run, None);
        assert!(r.rows.iter().filter(|r| r.quantity == "sqrt_n_survival").all(|r| r.estimate == 0.0));
    }

    #[test]
    fn growing_a_run_keeps_earlier_replicates() {
        let m = presets::three_state_nonlattice();
        let small = SurvivalRun::simulate(&m, 0, 3, &[8, 32], 300, 9);
        let large = SurvivalRun::simulate(&m, 0, 3, &[8, 32], 600, 9);
        let k = small.at(32).len();
        assert_eq!(&large.at(32)[..k], small.at(32));
    }

    #[test]
    fn denominators_agree_across_theorems() {
        let m = presets::three_state_nonlattice();
        let cfg =
            TheoremConfig { z: 5, n_list: vec![16, 64], min_survivors: 1500, max_replicates: 200_000, bootstrap: 20, ..Default::default() };
        let run = survival_run(&m, &cfg).unwrap();
        let curve = survival_curve(&m, &run, None);
        for report in [
            normalized_population_law(&m, &run, &cfg).unwrap(),
            conditional_clt(&m, &run, &cfg).unwrap(),
            yaglom_law(&m, &run, &cfg).unwrap(),
        ] {
            for n in [16, 64] {
                assert_eq!(
                    report.row("sqrt_n_survival", n, None, None).unwrap().estimate,
                    curve.row("sqrt_n_survival", n, None, None).unwrap().estimate
                );
            }
        }
    }

    #[test]
    fn conditional_probabilities_are_probabilities() {
        let m = presets::three_state_nonlattice();
        let cfg =
            TheoremConfig { n_list: vec![32, 128], min_survivors: 1200, max_replicates: 400_000, bootstrap: 20, ..Default::default() };
        let run = survival_run(&m, &cfg).unwrap();
        let r = conditional_clt(&m, &run, &cfg).unwrap();
        let marg: f64 = r.rows.iter().filter(|r| r.quantity == "marginal" && r.n == 128).map(|r| r.estimate).sum();
        assert_abs_diff_eq!(marg, 1.0, epsilon = 1e-12);
        for row in &r.rows {
            if ["marginal", "cdf", "negative_mass"].contains(&row.quantity) {
                assert!((0.0..=1.0).contains(&row.estimate));
            }
        }
    }

    #[test]
    fn too_few_survivors_is_reported() {
        let m = presets::three_state_nonlattice();
        let cfg = TheoremConfig { n_list: vec![64, 256], min_survivors: 10, max_replicates: 500, ..Default::default() };
        let run = survival_run(&m, &cfg).unwrap();
        assert!(matches!(conditional_clt(&m, &run, &cfg), Err(TheoremError::TooFewSurvivors { .. })));
        assert!(matches!(normalized_population_law(&m, &run, &cfg), Err(TheoremError::TooFewSurvivors { .. })));
    }

    #[test]
    fn killed_walk_never_leaves_the_half_line() {
        let m = presets::three_state_nonlattice();
        let run = KilledWalkRun::until(&m, 1, 0.5, &[10, 40], 100, 5000, 3);
        assert!(run.alive.iter().flatten().all(|(l, _)| *l > 0.0));
        assert!(run.alive[1].len() <= run.alive[0].len());
    }
}
