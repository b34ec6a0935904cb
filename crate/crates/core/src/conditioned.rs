//! Killed walks and the conditioned measure.
//!
//! * `τ_y`, the first `k ≥ 1` with `y + S_k ≤ 0`;
//! * the harmonic function `V(i,y)`, estimated as `E_i[(y + S_n); τ_y > n]`;
//! * the change of measure `P⁺`, realised by reweighting plain paths with
//!   `V(X_n, y + S_n) 1{τ_y > n} / V(i,y)`;
//! * `U(i,y,z) = E⁺[q_{∞,z}(0)]` and the survival constant
//!   `u(i,z) = lim_y 2 V(i,y) U(i,y,z) / (√(2π) σ)`.

use std::f64::consts::PI;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::agresti::{q_infinity_terms, EnvPath};
use crate::model::EnvironmentModel;
use crate::parallel;
use crate::rng::{stream, PathRng, StreamModule, Substream};
use crate::simulate::{check_state, simulate, simulate_given_environment, SimulateError, Trajectory};
use crate::spectral::{self, CRITICAL_DEAD_BAND};
use crate::stats::Summary;

/// Drift between `n/2` and `n` below this relative size is never reported.
pub const DRIFT_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConditionedError {
    #[error("environment is not critical: nu(rho) = {drift:e}")]
    NotCritical { drift: f64 },
    #[error("horizon too short: V({state}, {y}) moved by {change:.4} between n/2 and n (se {se:.4})")]
    HorizonTooShort { state: usize, y: f64, change: f64, se: f64 },
    #[error("({state}, {y}) is outside the estimated support of V")]
    OutsideSupport { state: usize, y: f64 },
    #[error("q_inf truncation bias bound {bias:e} exceeds a quarter of the standard error {se:e}")]
    TailNotConverged { bias: f64, se: f64 },
    #[error("V*U has not settled: last two levels differ by {diff:.4} (se {se:.4})")]
    NoPlateau { diff: f64, se: f64 },
    #[error("invalid level grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
}

/// Exit time of `y + S` from `(0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExitTime {
    At(usize),
    NotYet,
}

/// `τ_y` for a walk `S_0..S_n`.
pub fn tau(s: &[f64], y: f64) -> ExitTime {
    match s.iter().skip(1).position(|&v| y + v <= 0.0) {
        Some(k) => ExitTime::At(k + 1),
        None => ExitTime::NotYet,
    }
}

/// `τ_y` for a trajectory.
pub fn tau_of(t: &Trajectory, y: f64) -> ExitTime {
    tau(&t.s, y)
}

/// Monte Carlo table of `V(i,y)` on a level grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarmonicTable {
    /// Sorted levels: the requested ones plus the one-step images `y + ρ(j)`.
    pub y_grid: Vec<f64>,
    pub requested: Vec<f64>,
    /// `values[i][k] ≈ V(i, y_grid[k])`
    pub values: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    /// Estimates at `n/2` from the same paths, and the paired standard error
    /// of the change.
    pub half_values: Vec<Vec<f64>>,
    pub drift_se: Vec<Vec<f64>>,
    pub horizon: usize,
    pub replicates: u64,
}

/// One-step harmonicity check at a requested level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    pub state: usize,
    pub y: f64,
    /// `Σ_j P(i,j) V̂(j, y + ρ(j)) 1{y + ρ(j) > 0} − V̂(i,y)`
    pub residual: f64,
    pub se: f64,
}

impl HarmonicTable {
    fn locate(&self, y: f64) -> Result<usize, usize> {
        self.y_grid.binary_search_by(|g| g.total_cmp(&y))
    }

    fn interpolate(&self, row: &[f64], y: f64) -> f64 {
        let top = *self.y_grid.last().unwrap();
        match self.locate(y) {
            Ok(k) => row[k],
            Err(0) => row[0],
            Err(k) if k == self.y_grid.len() => row[k - 1] + (y - top),
            Err(k) => {
                let (y0, y1) = (self.y_grid[k - 1], self.y_grid[k]);
                let w = (y - y0) / (y1 - y0);
                row[k - 1] * (1.0 - w) + row[k] * w
            }
        }
    }

    /// `V̂(i,y)`: linear between grid levels, `V̂(i,top) + (y − top)` above the grid.
    pub fn value(&self, i: usize, y: f64) -> f64 {
        self.interpolate(&self.values[i], y)
    }

    pub fn stderr_at(&self, i: usize, y: f64) -> f64 {
        let row = &self.stderr[i];
        match self.locate(y) {
            Ok(k) => row[k],
            Err(0) => row[0],
            Err(k) if k == self.y_grid.len() => row[k - 1],
            Err(k) => row[k - 1].max(row[k]),
        }
    }

    /// `(i,y)` is in the support when `V̂(i,y) > 3·SE`.
    pub fn in_support(&self, i: usize, y: f64) -> bool {
        self.value(i, y) > 3.0 * self.stderr_at(i, y)
    }

    /// Harmonicity residuals at every requested level, evaluated on exact grid nodes.
    pub fn residuals(&self, model: &EnvironmentModel) -> Vec<Residual> {
        let mut out = Vec::new();
        for i in 0..model.dim() {
            for &y in &self.requested {
                let k = self.locate(y).expect("requested level is a node");
                let mut image = 0.0;
                let mut var = self.stderr[i][k].powi(2);
                for j in 0..model.dim() {
                    let p = model.kernel().get(i, j);
                    let level = y + model.rho()[j];
                    if p == 0.0 || level <= 0.0 {
                        continue;
                    }
                    let kj = self.locate(level).expect("one-step image is a node");
                    image += p * self.values[j][kj];
                    var += (p * self.stderr[j][kj]).powi(2);
                }
                out.push(Residual { state: i, y, residual: image - self.values[i][k], se: var.sqrt() });
            }
        }
        out
    }

    /// `(state, y, V, stderr)` rows over the full grid.
    pub fn rows(&self) -> Vec<(usize, f64, f64, f64)> {
        let mut rows = Vec::new();
        for (i, (v, e)) in self.values.iter().zip(&self.stderr).enumerate() {
            for (k, &y) in self.y_grid.iter().enumerate() {
                rows.push((i, y, v[k], e[k]));
            }
        }
        rows
    }

    /// Largest paired drift between `n/2` and `n` at the requested levels,
    /// as `(state, y, change, se)`.
    pub fn worst_drift(&self) -> Option<(usize, f64, f64, f64)> {
        let mut worst: Option<(usize, f64, f64, f64)> = None;
        for i in 0..self.values.len() {
            for &y in &self.requested {
                let k = self.locate(y).unwrap();
                let change = self.values[i][k] - self.half_values[i][k];
                let se = self.drift_se[i][k];
                let score = if se > 0.0 { change.abs() / se } else { 0.0 };
                let prev = worst.map(|w| if w.3 > 0.0 { w.2.abs() / w.3 } else { 0.0 }).unwrap_or(-1.0);
                if score > prev {
                    worst = Some((i, y, change, se));
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct WalkSummary {
    min_full: f64,
    s_full: f64,
    min_half: f64,
    s_half: f64,
    x_full: usize,
}

fn walk_summary<R: Rng + ?Sized>(model: &EnvironmentModel, i: usize, n: usize, rng: &mut R) -> WalkSummary {
    let half = n / 2;
    let (mut x, mut s, mut min) = (i, 0.0f64, f64::INFINITY);
    let mut out = WalkSummary { min_half: f64::INFINITY, ..Default::default() };
    for k in 1..=n {
        x = model.kernel().sample_next(x, rng);
        s += model.rho()[x];
        min = min.min(s);
        if k == half {
            out.min_half = min;
            out.s_half = s;
        }
    }
    out.min_full = min;
    out.s_full = s;
    out.x_full = x;
    out
}

fn build_grid(model: &EnvironmentModel, requested: &[f64]) -> Result<Vec<f64>, ConditionedError> {
    if requested.is_empty() {
        return Err(ConditionedError::InvalidGrid("no levels".into()));
    }
    if requested.windows(2).any(|w| !(w[0] < w[1])) || requested[0] < 0.0 || !requested.iter().all(|y| y.is_finite()) {
        return Err(ConditionedError::InvalidGrid("levels must be finite, nonnegative and increasing".into()));
    }
    let mut grid: Vec<f64> = requested.to_vec();
    for &y in requested {
        for &r in model.rho() {
            let level = y + r;
            if level > 0.0 {
                grid.push(level);
            }
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Estimates `V(i,y) ≈ E_i[(y + S_n); τ_y > n]` for every state on `y_grid`.
///
/// One set of paths per starting state serves every level, so the estimates
/// along `y` are coupled; different starting states use independent streams.
pub fn estimate_v(
    model: &EnvironmentModel,
    y_grid: &[f64],
    horizon: usize,
    replicates: u64,
    seed: u64,
) -> Result<HarmonicTable, ConditionedError> {
    let drift = model.drift();
    if drift.abs() > CRITICAL_DEAD_BAND {
        return Err(ConditionedError::NotCritical { drift });
    }
    if !spectral::nonlattice_check(model, &spectral::default_t_grid()).nonlattice {
        log::warn!("the walk is lattice; V is still estimated but the limit theorems do not apply");
    }
    let horizon = horizon.max(2);
    let grid = build_grid(model, y_grid)?;
    let d = model.dim();
    let mut table = HarmonicTable {
        y_grid: grid.clone(),
        requested: y_grid.to_vec(),
        values: vec![vec![0.0; grid.len()]; d],
        stderr: vec![vec![0.0; grid.len()]; d],
        half_values: vec![vec![0.0; grid.len()]; d],
        drift_se: vec![vec![0.0; grid.len()]; d],
        horizon,
        replicates,
    };
    for i in 0..d {
        let paths = parallel::map_range(0..replicates, |r| {
            let mut rng = stream(seed, StreamModule::Harmonic, Substream::Environment, r * d as u64 + i as u64);
            walk_summary(model, i, horizon, &mut rng)
        });
        for (k, &y) in grid.iter().enumerate() {
            let mut full = Summary::new();
            let mut half = Summary::new();
            let mut change = Summary::new();
            for p in &paths {
                let a = if y + p.min_full > 0.0 { y + p.s_full } else { 0.0 };
                let b = if y + p.min_half > 0.0 { y + p.s_half } else { 0.0 };
                full.push(a);
                half.push(b);
                change.push(a - b);
            }
            table.values[i][k] = full.mean();
            table.stderr[i][k] = full.se();
            table.half_values[i][k] = half.mean();
            table.drift_se[i][k] = change.se();
        }
    }
    if let Some((state, y, change, se)) = table.worst_drift() {
        let v = table.value(state, y);
        if change.abs() > 3.0 * se && change.abs() > DRIFT_FLOOR * v {
            return Err(ConditionedError::HorizonTooShort { state, y, change, se });
        }
    }
    Ok(table)
}

/// Deterministic alternative: iterate `V_{k+1}(i,y) = Σ_j P(i,j) V_k(j, y+ρ(j)) 1{y+ρ(j) > 0}`
/// from `V_0(i,y) = y` on a uniform grid, so that `V_n` is the same
/// `E_i[(y+S_n); τ_y > n]` up to interpolation error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointTable {
    pub dy: f64,
    pub values: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl FixedPointTable {
    pub fn value(&self, i: usize, y: f64) -> f64 {
        interpolate_uniform(&self.values[i], self.dy, y)
    }
}

fn interpolate_uniform(row: &[f64], dy: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return row[0];
    }
    let pos = y / dy;
    let k = pos.floor() as usize;
    if k + 1 >= row.len() {
        let top = (row.len() - 1) as f64 * dy;
        return row[row.len() - 1] + (y - top);
    }
    let w = pos - k as f64;
    row[k] * (1.0 - w) + row[k + 1] * w
}

pub fn fixed_point_v(model: &EnvironmentModel, y_max: f64, dy: f64, iterations: usize) -> FixedPointTable {
    let d = model.dim();
    let len = (y_max / dy).ceil() as usize + 1;
    let levels: Vec<f64> = (0..len).map(|k| k as f64 * dy).collect();
    let mut values = vec![levels.clone(); d];
    for _ in 0..iterations {
        let next: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                levels
                    .iter()
                    .map(|&y| {
                        (0..d)
                            .map(|j| {
                                let p = model.kernel().get(i, j);
                                let level = y + model.rho()[j];
                                if p == 0.0 || level <= 0.0 {
                                    0.0
                                } else {
                                    p * interpolate_uniform(&values[j], dy, level)
                                }
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect();
        values = next;
    }
    FixedPointTable { dy, values, iterations }
}

/// One comparison point between the two constructions of `V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossCheckPoint {
    pub state: usize,
    pub y: f64,
    pub monte_carlo: f64,
    pub fixed_point: f64,
    pub se: f64,
    pub agrees: bool,
}

/// Compares the two constructions at the requested levels; disagreements
/// beyond `3·SE` are flagged, not resolved.
pub fn cross_check(table: &HarmonicTable, fixed: &FixedPointTable) -> Vec<CrossCheckPoint> {
    let mut out = Vec::new();
    for i in 0..table.values.len() {
        for &y in &table.requested {
            let mc = table.value(i, y);
            let fp = fixed.value(i, y);
            let se = table.stderr_at(i, y);
            out.push(CrossCheckPoint { state: i, y, monte_carlo: mc, fixed_point: fp, se, agrees: (mc - fp).abs() <= 3.0 * se });
        }
    }
    out
}

/// A plain trajectory with its `P⁺` weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedSample {
    pub trajectory: Trajectory,
    pub weight: f64,
}

/// Simulates under the original law and attaches `V(X_n, y+S_n) 1{τ_y > n} / V(i,y)`.
pub fn sample_plus(
    model: &EnvironmentModel,
    table: &HarmonicTable,
    i: usize,
    y: f64,
    z: u64,
    n: usize,
    rng: &mut PathRng,
) -> Result<WeightedSample, ConditionedError> {
    check_state(model, i)?;
    if !table.in_support(i, y) {
        return Err(ConditionedError::OutsideSupport { state: i, y });
    }
    let trajectory = simulate(model, i, z, n, rng)?;
    if let Some(index) = trajectory.censored_at {
        return Err(SimulateError::Censored { index }.into());
    }
    let weight = plus_weight(model, table, i, y, &trajectory.x, &trajectory.s);
    let mut trajectory = trajectory;
    trajectory.weight = weight;
    Ok(WeightedSample { trajectory, weight })
}

fn plus_weight(model: &EnvironmentModel, table: &HarmonicTable, i: usize, y: f64, x: &[usize], s: &[f64]) -> f64 {
    let _ = model;
    match tau(s, y) {
        ExitTime::At(_) => 0.0,
        ExitTime::NotYet => {
            let n = s.len() - 1;
            table.value(x[n], y + s[n]) / table.value(i, y)
        }
    }
}

/// Mean `P⁺` weight over `replicates` paths, as `(mean, se)`; equal to 1 by harmonicity.
pub fn mean_plus_weight(
    model: &EnvironmentModel,
    table: &HarmonicTable,
    i: usize,
    y: f64,
    n: usize,
    replicates: u64,
    seed: u64,
) -> Result<(f64, f64), ConditionedError> {
    check_state(model, i)?;
    if !table.in_support(i, y) {
        return Err(ConditionedError::OutsideSupport { state: i, y });
    }
    let weights = parallel::map_range(0..replicates, |r| {
        let mut rng = stream(seed, StreamModule::PlusMeasure, Substream::Environment, r);
        let (x, s) = crate::simulate::simulate_walk(model, i, n, &mut rng);
        plus_weight(model, table, i, y, &x, &s)
    });
    let s: Summary = weights.into_iter().collect();
    Ok((s.mean(), s.se()))
}

/// Path length and extension rules for the `q_∞` functionals under `P⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlusConfig {
    pub horizon: usize,
    /// Paths are extended at most to `cap_factor · horizon`.
    pub cap_factor: usize,
    /// A path is extended until `y + S_m ≥ climb · (y + min_k S_k)`, so that
    /// a later dip below its running minimum has become unlikely.
    pub climb: f64,
}

impl Default for PlusConfig {
    fn default() -> Self {
        Self { horizon: 4096, cap_factor: 8, climb: 10.0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct PlusPath {
    x_end: usize,
    s_end: f64,
    min_s: f64,
    q: f64,
    tail_converged: bool,
    survived: bool,
}

/// One plain path from `i`, extended by doubling until the `q_∞` truncation
/// settles, the walk has climbed, or the cap is reached. Paths already killed
/// at level `y_ref` stop at once, since they carry zero weight for every
/// level up to `y_ref`. The extension rule is a stopping time, so the
/// reweighting at the final step stays exact.
fn plus_path(model: &EnvironmentModel, i: usize, z: u64, y_ref: f64, cfg: &PlusConfig, seed: u64, r: u64) -> PlusPath {
    let mut env = stream(seed, StreamModule::PlusMeasure, Substream::Environment, r);
    let cap = cfg.horizon.max(1) * cfg.cap_factor.max(1);
    let mut x = vec![i];
    let (mut state, mut s, mut min_s) = (i, 0.0f64, f64::INFINITY);
    let mut target = cfg.horizon.max(1);
    loop {
        while x.len() <= target {
            state = model.kernel().sample_next(state, &mut env);
            s += model.rho()[state];
            min_s = min_s.min(s);
            x.push(state);
        }
        if y_ref + min_s <= 0.0 {
            return PlusPath { x_end: state, s_end: s, min_s, q: 0.0, tail_converged: true, survived: false };
        }
        let path = EnvPath::new(model, x[1..].to_vec()).expect("simulated states are valid");
        let q = q_infinity_terms(model, &path, z, 0.0).expect("z ≥ 1 and s = 0 are admissible");
        let climbed = y_ref + s >= cfg.climb * (y_ref + min_s.min(0.0));
        if (q.converged && climbed) || target >= cap {
            let mut off = stream(seed, StreamModule::PlusMeasure, Substream::Offspring, r);
            let survived = simulate_given_environment(model, path.states(), z, &mut off).is_none_or(|zm| zm > 0);
            return PlusPath { x_end: state, s_end: s, min_s, q: q.q(), tail_converged: q.converged, survived };
        }
        target = (target * 2).min(cap);
    }
}

/// `U(i,y,z)` with its standard error and the cross-check by direct survival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UEstimate {
    pub y: f64,
    pub z: u64,
    pub u: f64,
    pub se: f64,
    /// Weighted frequency of `Z_m > 0` on the same paths.
    pub direct: f64,
    pub direct_se: f64,
    /// Paths whose `q_∞` tail was still above tolerance at the cap.
    pub unconverged: u64,
    /// Upper bound on the bias those paths can cause.
    pub bias_bound: f64,
    pub replicates: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_u_plus(
    model: &EnvironmentModel,
    table: &HarmonicTable,
    i: usize,
    y: f64,
    z: u64,
    cfg: &PlusConfig,
    replicates: u64,
    seed: u64,
) -> Result<UEstimate, ConditionedError> {
    check_state(model, i)?;
    if !table.in_support(i, y) {
        return Err(ConditionedError::OutsideSupport { state: i, y });
    }
    let paths = parallel::map_range(0..replicates, |r| plus_path(model, i, z, y, cfg, seed, r));
    let v0 = table.value(i, y);
    let mut est = Summary::new();
    let mut direct = Summary::new();
    let mut unconverged = 0;
    let mut bias = 0.0;
    for p in &paths {
        let w = if y + p.min_s > 0.0 { table.value(p.x_end, y + p.s_end) / v0 } else { 0.0 };
        est.push(w * p.q);
        direct.push(if p.survived { w } else { 0.0 });
        if w > 0.0 && !p.tail_converged {
            unconverged += 1;
            bias += w * p.q;
        }
    }
    let bias_bound = bias / replicates as f64;
    if bias_bound > 0.25 * est.se() {
        return Err(ConditionedError::TailNotConverged { bias: bias_bound, se: est.se() });
    }
    Ok(UEstimate { y, z, u: est.mean(), se: est.se(), direct: direct.mean(), direct_se: direct.se(), unconverged, bias_bound, replicates })
}

/// `V(i,y) U(i,y,z)` at one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProductPoint {
    pub y: f64,
    pub product: f64,
    pub se: f64,
}

/// The survival constant with its plateau diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalConstant {
    pub i: usize,
    pub z: u64,
    pub u: f64,
    pub se: f64,
    pub sigma: f64,
    pub products: Vec<ProductPoint>,
    /// Difference of the last two products and its combined standard error.
    pub plateau_diff: f64,
    pub plateau_se: f64,
    /// No decrease beyond `3·SE` between successive levels.
    pub monotone: bool,
    pub unconverged: u64,
}

/// `u(i,z) = 2 V(i,y) U(i,y,z) / (√(2π) σ)` at the largest level of `y_list`.
///
/// The product is estimated directly as the mean of
/// `V̂(X_m, y + S_m) 1{τ_y > m} q̂_∞`, sharing paths across levels.
#[allow(clippy::too_many_arguments)]
pub fn estimate_survival_constant(
    model: &EnvironmentModel,
    table: &HarmonicTable,
    i: usize,
    z: u64,
    y_list: &[f64],
    cfg: &PlusConfig,
    replicates: u64,
    seed: u64,
) -> Result<SurvivalConstant, ConditionedError> {
    check_state(model, i)?;
    if y_list.is_empty() || y_list.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ConditionedError::InvalidGrid("levels must be increasing".into()));
    }
    let sigma = spectral::sigma2(model, spectral::SIGMA2_TAIL_TOL).sqrt();
    let y_ref = *y_list.last().unwrap();
    let paths = parallel::map_range(0..replicates, |r| plus_path(model, i, z, y_ref, cfg, seed, r));
    let terms = |y: f64| -> Vec<f64> {
        paths.iter().map(|p| if y + p.min_s > 0.0 { table.value(p.x_end, y + p.s_end) * p.q } else { 0.0 }).collect()
    };
    let per_level: Vec<Vec<f64>> = y_list.iter().map(|&y| terms(y)).collect();
    let products: Vec<ProductPoint> = y_list
        .iter()
        .zip(&per_level)
        .map(|(&y, t)| {
            let s: Summary = t.iter().copied().collect();
            ProductPoint { y, product: s.mean(), se: s.se() }
        })
        .collect();
    let combined = |a: &ProductPoint, b: &ProductPoint| (b.product - a.product, a.se.hypot(b.se));
    let monotone = products.windows(2).all(|w| {
        let (diff, se) = combined(&w[0], &w[1]);
        diff >= -3.0 * se
    });
    let (plateau_diff, plateau_se) = match products.len() {
        0 | 1 => (0.0, 0.0),
        k => combined(&products[k - 2], &products[k - 1]),
    };
    let unconverged = paths.iter().filter(|p| !p.tail_converged && y_ref + p.min_s > 0.0).count() as u64;
    let scale = 2.0 / ((2.0 * PI).sqrt() * sigma);
    let last = products.last().unwrap();
    let out = SurvivalConstant {
        i,
        z,
        u: scale * last.product,
        se: scale * last.se,
        sigma,
        products,
        plateau_diff,
        plateau_se,
        monotone,
        unconverged,
    };
    if out.products.len() >= 2 && plateau_diff.abs() > 3.0 * plateau_se {
        log::warn!("no plateau in V*U: {:?}", out.products);
        return Err(ConditionedError::NoPlateau { diff: plateau_diff, se: plateau_se });
    }
    Ok(out)
}

/// `√n P̂_i(X_n = j, τ_y > n)` along `n_list`, against `2 V̂(i,y) ν(j) / (√(2π) σ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitTimeLaw {
    pub i: usize,
    pub y: f64,
    pub n_list: Vec<usize>,
    /// `scaled[k][j]` with its standard error
    pub scaled: Vec<Vec<f64>>,
    pub scaled_se: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
    /// Last horizon within `max(5%, 4·SE)` of the reference in every state.
    pub converged: bool,
}

pub fn exit_time_law(
    model: &EnvironmentModel,
    table: &HarmonicTable,
    i: usize,
    y: f64,
    n_list: &[usize],
    replicates: u64,
    seed: u64,
) -> Result<ExitTimeLaw, ConditionedError> {
    check_state(model, i)?;
    let d = model.dim();
    let sigma = spectral::sigma2(model, spectral::SIGMA2_TAIL_TOL).sqrt();
    let n_max = n_list.iter().copied().max().unwrap_or(0);
    // for each replicate: the state at each horizon, or None once killed
    let alive = parallel::map_range(0..replicates, |r| {
        let mut rng = stream(seed, StreamModule::ConditionedWalk, Substream::Environment, r);
        let mut out = vec![None; n_list.len()];
        let (mut x, mut s) = (i, 0.0);
        for k in 1..=n_max {
            x = model.kernel().sample_next(x, &mut rng);
            s += model.rho()[x];
            if y + s <= 0.0 {
                break;
            }
            for (slot, &n) in out.iter_mut().zip(n_list) {
                if n == k {
                    *slot = Some(x);
                }
            }
        }
        out
    });
    let mut scaled = vec![vec![0.0; d]; n_list.len()];
    let mut scaled_se = vec![vec![0.0; d]; n_list.len()];
    for (k, &n) in n_list.iter().enumerate() {
        for j in 0..d {
            let hits = alive.iter().filter(|a| a[k] == Some(j)).count() as u64;
            let p = hits as f64 / replicates as f64;
            scaled[k][j] = (n as f64).sqrt() * p;
            scaled_se[k][j] = (n as f64).sqrt() * crate::stats::binomial_se(p, replicates);
        }
    }
    let v = table.value(i, y);
    let reference: Vec<f64> = (0..d).map(|j| 2.0 * v * model.nu()[j] / ((2.0 * PI).sqrt() * sigma)).collect();
    let converged = n_list.last().is_some_and(|_| {
        let last = scaled.len() - 1;
        (0..d).all(|j| {
            let tol = (0.05 * reference[j]).max(4.0 * scaled_se[last][j]);
            (scaled[last][j] - reference[j]).abs() <= tol
        })
    });
    Ok(ExitTimeLaw { i, y, n_list: n_list.to_vec(), scaled, scaled_se, reference, converged })
}

/// Upper-bound shape check: `√n P̂_i(X_n = j, τ_y > n) ≤ C (1 + y)` with one
/// fitted `C`. Returns the per-level maxima over `j` and the fitted constant.
pub fn exit_time_bound(
    model: &EnvironmentModel,
    table: &HarmonicTable,
    i: usize,
    y_list: &[f64],
    n: usize,
    replicates: u64,
    seed: u64,
) -> Result<(Vec<(f64, f64)>, f64), ConditionedError> {
    let mut points = Vec::new();
    for &y in y_list {
        let law = exit_time_law(model, table, i, y, &[n], replicates, seed)?;
        let top = law.scaled[0].iter().copied().fold(0.0, f64::max);
        points.push((y, top));
    }
    let c = points.iter().map(|&(y, v)| v / (1.0 + y.max(0.0))).fold(0.0, f64::max);
    Ok((points, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn tau_examples() {
        assert_eq!(tau(&[0.0, -0.693, 0.0], 0.0), ExitTime::At(1));
        assert_eq!(tau(&[0.0, 1.0, 2.0, 3.0], 10.0), ExitTime::NotYet);
        assert_eq!(tau(&[0.0, -0.7, 1.0], 0.5), ExitTime::At(1));
        assert_eq!(tau(&[0.0, 0.3, -0.2, -1.0], 0.2), ExitTime::At(2));
    }

    #[test]
    fn grid_contains_one_step_images() {
        let m = presets::two_state_iid();
        let g = build_grid(&m, &[0.0, 1.0]).unwrap();
        for y in [0.0, 1.0] {
            for r in m.rho() {
                if y + r > 0.0 {
                    assert!(g.contains(&(y + r)));
                }
            }
        }
        assert!(build_grid(&m, &[1.0, 0.5]).is_err());
        assert!(build_grid(&m, &[]).is_err());
    }

    #[test]
    fn not_critical_is_rejected() {
        let m = presets::two_state_iid().calibrate(0).unwrap();
        assert!(estimate_v(&m, &[1.0], 10, 10, 1).is_ok());
        let kernel = crate::MarkovKernel::new(&[vec![1.0]]).unwrap();
        let sup = EnvironmentModel::new(kernel, vec![crate::OffspringLaw::poisson(1.5).unwrap()]).unwrap();
        assert!(matches!(estimate_v(&sup, &[1.0], 10, 10, 1), Err(ConditionedError::NotCritical { .. })));
    }

    #[test]
    fn small_table_is_harmonic_and_monotone() {
        let m = presets::three_state_nonlattice();
        let grid = [0.0, 0.5, 1.0, 2.0, 4.0];
        let t = estimate_v(&m, &grid, 256, 20_000, 3).unwrap();
        for r in t.residuals(&m) {
            assert!(r.residual.abs() <= 4.0 * r.se, "{r:?}");
        }
        for i in 0..3 {
            for w in t.values[i].windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
        }
        // extrapolation beyond the table has unit slope
        let top = *t.y_grid.last().unwrap();
        assert!((t.value(0, top + 3.0) - t.value(0, top) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_matches_monte_carlo_on_lattice_grid() {
        // ρ = ±ln 2 keeps the walk on ln2·Z, so a grid of step ln2/4 is exact
        let m = presets::two_state_iid();
        let a = std::f64::consts::LN_2;
        let n = 64;
        let fp = fixed_point_v(&m, 200.0 * a, a / 4.0, n);
        let grid: Vec<f64> = (0..8).map(|k| k as f64 * a).collect();
        let t = estimate_v(&m, &grid, n, 40_000, 11).unwrap();
        let checks = cross_check(&t, &fp);
        let bad = checks.iter().filter(|c| !c.agrees).count();
        assert!(bad <= 1, "{checks:?}");
    }

    #[test]
    fn weights_vanish_after_exit() {
        let m = presets::three_state_nonlattice();
        let t = estimate_v(&m, &[0.0, 0.5, 1.0, 2.0], 128, 5_000, 4).unwrap();
        for r in 0..200 {
            let mut rng = PathRng::new(4, StreamModule::PlusMeasure, r);
            let w = sample_plus(&m, &t, 0, 1.0, 1, 40, &mut rng).unwrap();
            match tau_of(&w.trajectory, 1.0) {
                ExitTime::At(_) => assert_eq!(w.weight, 0.0),
                ExitTime::NotYet => assert!(w.weight > 0.0),
            }
        }
    }
}
