//! Transfer operator `P_λ g = P(e^{λρ} g)`, its Perron root `k(λ)`, the
//! criticality classification, the asymptotic variance `σ²` of the Markov
//! walk, and the non-lattice test on the Fourier operator.

use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::model::EnvironmentModel;
use crate::parallel;

/// `|k′(0)|` at or below this is treated as critical.
pub const CRITICAL_DEAD_BAND: f64 = 1e-10;
/// Step of the central-difference cross-check of `k′(0)`.
pub const DIFF_STEP: f64 = 1e-5;
/// Allowed gap between `ν(ρ)` and the central difference.
pub const DIFF_TOLERANCE: f64 = 1e-8;
/// Default bound on the neglected tail of the `σ²` series.
pub const SIGMA2_TAIL_TOL: f64 = 1e-12;
/// Hard cap on the number of `σ²` series terms.
pub const SIGMA2_MAX_TERMS: usize = 100_000;
/// A Fourier radius above `1 − NONLATTICE_MARGIN` is read as lattice.
pub const NONLATTICE_MARGIN: f64 = 1e-9;

const PERRON_MAX_ITER: usize = 1_000_000;
const SQUARINGS: u32 = 48;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("k'(0) cross-check failed: nu(rho) = {exact:e}, central difference = {numeric:e}")]
    SpectralMismatch { exact: f64, numeric: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Subcritical,
    Critical,
    Supercritical,
}

impl Classification {
    pub fn from_slope(k_prime0: f64) -> Self {
        if k_prime0.abs() <= CRITICAL_DEAD_BAND {
            Self::Critical
        } else if k_prime0 > 0.0 {
            Self::Supercritical
        } else {
            Self::Subcritical
        }
    }
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Subcritical => "subcritical",
            Self::Critical => "critical",
            Self::Supercritical => "supercritical",
        })
    }
}

/// Outcome of the non-lattice test over a grid of frequencies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonlatticeVerdict {
    pub nonlattice: bool,
    /// `1 − max_t r(t)` over every tested frequency.
    pub min_margin: f64,
    pub worst_t: f64,
    /// Every tested frequency, grid points first, then refined maxima.
    pub t_grid: Vec<f64>,
    pub radii: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub nu: Vec<f64>,
    pub rho_vec: Vec<f64>,
    pub k_prime0: f64,
    pub k_prime0_numeric: f64,
    pub sigma2: f64,
    pub classification: Classification,
    pub nonlattice: NonlatticeVerdict,
}

/// `M(i,j) = P(i,j) e^{λρ(j)}`.
pub fn transfer_matrix(model: &EnvironmentModel, lambda: f64) -> Vec<Vec<f64>> {
    let tilt: Vec<f64> = model.rho().iter().map(|r| (lambda * r).exp()).collect();
    model.kernel().rows().into_iter().map(|row| row.iter().zip(&tilt).map(|(p, e)| p * e).collect()).collect()
}

/// Spectral radius `k(λ)` of the transfer operator.
pub fn k(model: &EnvironmentModel, lambda: f64) -> f64 {
    let m: Vec<f64> = transfer_matrix(model, lambda).concat();
    perron_root(&m, model.dim())
}

/// `(λ, k(λ))` along a grid.
pub fn k_curve(model: &EnvironmentModel, lambdas: &[f64]) -> Vec<(f64, f64)> {
    lambdas.iter().map(|&l| (l, k(model, l))).collect()
}

/// Perron root of a nonnegative primitive matrix by power iteration, stopped
/// when the Collatz–Wielandt bracket `min (Mv)_i/v_i ≤ r ≤ max (Mv)_i/v_i`
/// reaches rounding level or stops shrinking.
fn perron_root(m: &[f64], d: usize) -> f64 {
    let mut v = vec![1.0; d];
    let mut w = vec![0.0; d];
    let mut best = (0.0, f64::INFINITY);
    let mut stale = 0;
    for _ in 0..PERRON_MAX_ITER {
        for i in 0..d {
            w[i] = m[i * d..(i + 1) * d].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..d {
            let r = w[i] / v[i];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        if hi - lo < best.1 - best.0 {
            best = (lo, hi);
            stale = 0;
        } else {
            stale += 1;
        }
        if hi - lo <= 2.0 * f64::EPSILON * hi || stale > 200 {
            break;
        }
        let top = w.iter().copied().fold(0.0, f64::max);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / top;
        }
    }
    0.5 * (best.0 + best.1)
}

/// `k′(0) = ν(ρ)`, confirmed against a central difference of `k`.
pub fn k_prime0(model: &EnvironmentModel) -> Result<f64, SpectralError> {
    let exact = model.drift();
    let numeric = k_prime0_numeric(model);
    if (exact - numeric).abs() > DIFF_TOLERANCE {
        return Err(SpectralError::SpectralMismatch { exact, numeric });
    }
    Ok(exact)
}

pub fn k_prime0_numeric(model: &EnvironmentModel) -> f64 {
    (k(model, DIFF_STEP) - k(model, -DIFF_STEP)) / (2.0 * DIFF_STEP)
}

/// Asymptotic variance `σ² = ν(ρ̃²) + 2 Σ_{n≥1} ν(ρ̃ Pⁿρ̃)` with `ρ̃ = ρ − ν(ρ)`.
///
/// The series stops once a rigorous bound on its tail falls below `tail_tol`.
/// The bound comes from submultiplicativity of `Dₙ = ‖Pⁿ − 𝟙ν‖∞`: with `n₀`
/// the first index where `D_{n₀} = β ≤ 1/2`, every `Dₙ ≤ A β^{⌊n/n₀⌋}`.
pub fn sigma2(model: &EnvironmentModel, tail_tol: f64) -> f64 {
    let nu = model.nu();
    let mean = model.drift();
    let centred: Vec<f64> = model.rho().iter().map(|r| r - mean).collect();
    let sup = centred.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let abs_mass: f64 = nu.weights().iter().zip(&centred).map(|(w, r)| w * r.abs()).sum();
    let scale = 2.0 * abs_mass * sup;

    let (n0, beta, a) = contraction_block(model);
    let mut sum = nu.weights().iter().zip(&centred).map(|(w, r)| w * r * r).sum::<f64>();
    let mut w = centred.clone();
    for n in 1..=SIGMA2_MAX_TERMS {
        w = model.kernel().apply(&w);
        let term: f64 = nu.weights().iter().zip(&centred).zip(&w).map(|((p, r), v)| p * r * v).sum();
        sum += 2.0 * term;
        let q0 = ((n + 1) / n0) as i32;
        let tail = if beta == 0.0 && q0 > 0 { 0.0 } else { scale * n0 as f64 * a * beta.powi(q0) / (1.0 - beta) };
        if tail < tail_tol {
            break;
        }
    }
    sum.max(0.0)
}

/// `(n₀, β, A)` of the tail bound used by [`sigma2`].
fn contraction_block(model: &EnvironmentModel) -> (usize, f64, f64) {
    let mut n_max = 64;
    loop {
        let norms = model.kernel().deviation_norms(model.nu(), n_max);
        if let Some(n0) = norms.iter().skip(1).position(|&v| v <= 0.5).map(|p| p + 1) {
            let a = norms[..n0].iter().copied().fold(0.0, f64::max);
            return (n0, norms[n0], a);
        }
        if n_max >= SIGMA2_MAX_TERMS {
            // a primitive kernel always contracts eventually; this is a guard only
            return (n_max, norms[n_max].min(1.0 - 1e-12), 2.0);
        }
        n_max = (n_max * 4).min(SIGMA2_MAX_TERMS);
    }
}

/// Spectral radius of `P(i,j) e^{itρ(j)}` via Gelfand's formula on repeated
/// squares, with the logarithm of the norm carried separately.
///
/// The value is an upper bound converging to the radius as `2⁻⁴⁸`.
pub fn fourier_radius(model: &EnvironmentModel, t: f64) -> f64 {
    let d = model.dim();
    let phase: Vec<Complex64> = model.rho().iter().map(|r| Complex64::from_polar(1.0, t * r)).collect();
    let mut a: Vec<Complex64> = (0..d * d).map(|idx| phase[idx % d] * model.kernel().get(idx / d, idx % d)).collect();
    let norm = inf_norm(&a, d);
    a.iter_mut().for_each(|x| *x /= norm);
    let mut log_norm = norm.ln();
    for _ in 0..SQUARINGS {
        let mut b = vec![Complex64::new(0.0, 0.0); d * d];
        for i in 0..d {
            for l in 0..d {
                let ail = a[i * d + l];
                for j in 0..d {
                    b[i * d + j] += ail * a[l * d + j];
                }
            }
        }
        let nb = inf_norm(&b, d);
        if nb == 0.0 {
            return 0.0;
        }
        b.iter_mut().for_each(|x| *x /= nb);
        log_norm = 2.0 * log_norm + nb.ln();
        a = b;
    }
    (log_norm / 2f64.powi(SQUARINGS as i32)).exp()
}

fn inf_norm(a: &[Complex64], d: usize) -> f64 {
    a.chunks(d).map(|row| row.iter().map(|x| x.norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// 200 log-spaced frequencies from `1e−3` to `50`.
pub fn default_t_grid() -> Vec<f64> {
    let (lo, hi, n) = (1e-3f64.ln(), 50f64.ln(), 200);
    (0..n).map(|k| (lo + (hi - lo) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// Condition-3 test: every Fourier radius on the grid, refined at interior
/// local maxima, must stay at most `1 − 1e−9`.
pub fn nonlattice_check(model: &EnvironmentModel, t_grid: &[f64]) -> NonlatticeVerdict {
    assert!(t_grid.iter().all(|&t| t != 0.0), "t = 0 is not a valid frequency");
    let mut ts: Vec<f64> = t_grid.to_vec();
    let mut radii = parallel::map_range(0..ts.len() as u64, |k| fourier_radius(model, t_grid[k as usize]));
    for k in 1..t_grid.len().saturating_sub(1) {
        if radii[k] >= radii[k - 1] && radii[k] >= radii[k + 1] && radii[k] > 0.0 {
            let (t, r) = golden_max(|t| fourier_radius(model, t), t_grid[k - 1], t_grid[k + 1]);
            ts.push(t);
            radii.push(r);
        }
    }
    let (worst, &max_r) = radii.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap_or((0, &0.0));
    NonlatticeVerdict {
        nonlattice: max_r <= 1.0 - NONLATTICE_MARGIN,
        min_margin: 1.0 - max_r,
        worst_t: ts.get(worst).copied().unwrap_or(f64::NAN),
        t_grid: ts,
        radii,
    }
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-12 * b.abs() {
            break;
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Full spectral summary with the default grid and tail tolerance.
pub fn analyze(model: &EnvironmentModel) -> Result<SpectralReport, SpectralError> {
    analyze_with(model, &default_t_grid(), SIGMA2_TAIL_TOL)
}

pub fn analyze_with(model: &EnvironmentModel, t_grid: &[f64], tail_tol: f64) -> Result<SpectralReport, SpectralError> {
    let k_prime0_value = k_prime0(model)?;
    Ok(SpectralReport {
        nu: model.nu().weights().to_vec(),
        rho_vec: model.rho().to_vec(),
        k_prime0: k_prime0_value,
        k_prime0_numeric: k_prime0_numeric(model),
        sigma2: sigma2(model, tail_tol),
        classification: Classification::from_slope(k_prime0_value),
        nonlattice: nonlattice_check(model, t_grid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::MarkovKernel;
    use crate::model::presets;
    use crate::offspring::OffspringLaw;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{LN_2, PI};

    fn single(mean: f64) -> EnvironmentModel {
        EnvironmentModel::new(MarkovKernel::new(&[vec![1.0]]).unwrap(), vec![OffspringLaw::geometric_with_mean(mean).unwrap()]).unwrap()
    }

    fn two_state_mixing() -> EnvironmentModel {
        // ρ = (a, −3a) with a = ln 2, balanced against ν = (3/4, 1/4)
        let kernel = MarkovKernel::new(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        let laws = vec![OffspringLaw::geometric_with_mean(2.0).unwrap(), OffspringLaw::geometric_with_mean(0.125).unwrap()];
        EnvironmentModel::new(kernel, laws).unwrap()
    }

    #[test]
    fn transfer_matrix_examples() {
        let m = presets::two_state_iid();
        assert_eq!(transfer_matrix(&m, 0.0), m.kernel().rows());
        let t = transfer_matrix(&m, 1.0);
        for row in &t {
            assert_abs_diff_eq!(row[0], 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(row[1], 0.25, epsilon = 1e-14);
        }
        assert_eq!(transfer_matrix(&single(1.0), 3.7), vec![vec![1.0]]);
    }

    #[test]
    fn k_examples() {
        let m = presets::two_state_iid();
        assert_abs_diff_eq!(k(&m, 0.0), 1.0, epsilon = 1e-15);
        for l in [-2.0, -0.5, 0.3, 1.0, 2.5] {
            assert_abs_diff_eq!(k(&m, l), (l * LN_2).cosh(), epsilon = 1e-13 * (l * LN_2).cosh());
        }
        assert_abs_diff_eq!(k(&m, 1.0), 1.25, epsilon = 1e-14);
        let s = single(3.0);
        assert_abs_diff_eq!(k(&s, 0.7), 3f64.powf(0.7), epsilon = 1e-14);
        for model in [presets::three_state_nonlattice(), two_state_mixing()] {
            assert_abs_diff_eq!(k(&model, 0.0), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn k_is_log_convex() {
        for model in [presets::three_state_nonlattice(), two_state_mixing(), presets::two_state_iid()] {
            let grid = [-1.0, -0.5, 0.0, 0.5, 1.0];
            let logs: Vec<f64> = grid.iter().map(|&l| k(&model, l).ln()).collect();
            for w in logs.windows(3) {
                assert!(w[1] <= 0.5 * (w[0] + w[2]) + 1e-10);
            }
        }
    }

    #[test]
    fn k_prime0_examples() {
        assert_abs_diff_eq!(k_prime0(&presets::two_state_iid()).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k_prime0(&single(1.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(k_prime0(&single(2.0)).unwrap(), LN_2, epsilon = 1e-15);
        for model in [presets::three_state_nonlattice(), two_state_mixing()] {
            let exact = k_prime0(&model).unwrap();
            assert!((exact - k_prime0_numeric(&model)).abs() <= DIFF_TOLERANCE);
        }
    }

    #[test]
    fn sigma2_examples() {
        assert_abs_diff_eq!(sigma2(&presets::two_state_iid(), 1e-12), LN_2 * LN_2, epsilon = 1e-12);
        assert_eq!(sigma2(&single(2.0), 1e-12), 0.0);
        // ρ is the 0.6-eigenvector of P: σ² = ν(ρ²)(1 + 2·0.6/0.4) = 12a²
        assert_abs_diff_eq!(sigma2(&two_state_mixing(), 1e-12), 12.0 * LN_2 * LN_2, epsilon = 1e-10);
    }

    #[test]
    fn sigma2_matches_brute_force_series() {
        // oracle: long direct summation of the centred autocovariances
        let model = presets::three_state_nonlattice();
        let nu = model.nu().weights().to_vec();
        let rho = model.rho().to_vec();
        let mut w = rho.clone();
        let mut total: f64 = nu.iter().zip(&rho).map(|(p, r)| p * r * r).sum();
        for _ in 0..2000 {
            w = model.kernel().apply(&w);
            total += 2.0 * nu.iter().zip(&rho).zip(&w).map(|((p, r), v)| p * r * v).sum::<f64>();
        }
        assert_abs_diff_eq!(sigma2(&model, 1e-12), total, epsilon = 1e-11);
    }

    #[test]
    fn nonlattice_examples() {
        let iid = presets::two_state_iid();
        assert_abs_diff_eq!(fourier_radius(&iid, 1.0), LN_2.cos().abs(), epsilon = 1e-12);
        assert_abs_diff_eq!(fourier_radius(&iid, PI / LN_2), 1.0, epsilon = 1e-12);
        let v = nonlattice_check(&iid, &[1.0, PI / LN_2]);
        assert!(!v.nonlattice);
        for mean in [0.5, 1.0, 2.0, 5.0] {
            let s = single(mean);
            let v = nonlattice_check(&s, &default_t_grid());
            assert!(!v.nonlattice);
            assert!(v.radii.iter().all(|r| (r - 1.0).abs() < 1e-12));
        }
        let v = nonlattice_check(&presets::three_state_nonlattice(), &default_t_grid());
        assert!(v.nonlattice, "margin {} at t = {}", v.min_margin, v.worst_t);
    }

    #[test]
    fn fourier_radius_matches_eigenvalues_of_small_matrix() {
        // oracle: closed-form eigenvalues of the 2×2 complex matrix
        let model = two_state_mixing();
        for t in [0.3, 1.1, 2.9] {
            let m: Vec<Complex64> =
                (0..4).map(|idx| Complex64::from_polar(model.kernel().get(idx / 2, idx % 2), t * model.rho()[idx % 2])).collect();
            let tr = m[0] + m[3];
            let det = m[0] * m[3] - m[1] * m[2];
            let disc = (tr * tr - 4.0 * det).sqrt();
            let r = ((tr + disc) / 2.0).norm().max(((tr - disc) / 2.0).norm());
            assert_abs_diff_eq!(fourier_radius(&model, t), r, epsilon = 1e-10);
        }
    }

    #[test]
    fn analyze_examples() {
        let r = analyze(&presets::two_state_iid()).unwrap();
        assert_eq!(r.classification, Classification::Critical);
        assert_abs_diff_eq!(r.sigma2, LN_2 * LN_2, epsilon = 1e-10);
        assert!(!r.nonlattice.nonlattice);
        assert_eq!(analyze(&single(2.0)).unwrap().classification, Classification::Supercritical);
        assert_eq!(analyze(&single(0.5)).unwrap().classification, Classification::Subcritical);
        let r = analyze(&presets::three_state_nonlattice()).unwrap();
        assert_eq!(r.classification, Classification::Critical);
        assert!(r.nonlattice.nonlattice && r.sigma2 > 0.0);
    }
}
