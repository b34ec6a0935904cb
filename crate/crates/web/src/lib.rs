//! WebAssembly bindings for the interactive demo in `www/`.
//!
//! Models are restricted to geometric offspring laws so the page only needs a
//! kernel and one mean per state.

use bpme::offspring::OffspringLaw;
use bpme::spectral;
use bpme::theorems::{rayleigh_cdf, SurvivalRun};
use bpme::{EnvironmentModel, MarkovKernel};
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Model {
    inner: EnvironmentModel,
    means: Vec<f64>,
}

#[wasm_bindgen]
impl Model {
    /// `kernel` is row-major `d×d`; `means` holds one geometric mean per state.
    #[wasm_bindgen(constructor)]
    pub fn new(kernel: Vec<f64>, means: Vec<f64>) -> Result<Model, String> {
        let d = means.len();
        if d == 0 || kernel.len() != d * d {
            return Err(format!("kernel needs {} entries for {d} states, got {}", d * d, kernel.len()));
        }
        let rows: Vec<Vec<f64>> = kernel.chunks(d).map(<[f64]>::to_vec).collect();
        let kernel = MarkovKernel::new(&rows).map_err(|e| e.to_string())?;
        let laws = means.iter().map(|&m| OffspringLaw::geometric_with_mean(m)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
        let inner = EnvironmentModel::new(kernel, laws).map_err(|e| e.to_string())?;
        Ok(Model { inner, means })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn means(&self) -> Vec<f64> {
        self.means.clone()
    }

    pub fn stationary(&self) -> Vec<f64> {
        self.inner.nu().weights().to_vec()
    }

    pub fn drift(&self) -> f64 {
        self.inner.drift()
    }

    pub fn sigma(&self) -> f64 {
        spectral::sigma2(&self.inner, spectral::SIGMA2_TAIL_TOL).sqrt()
    }

    pub fn classification(&self) -> String {
        let slope = spectral::k_prime0(&self.inner).unwrap_or_else(|_| spectral::k_prime0_numeric(&self.inner));
        format!("{:?}", spectral::Classification::from_slope(slope)).to_lowercase()
    }

    /// Same model with `state`'s mean rescaled so the drift vanishes.
    pub fn calibrated(&self, state: usize) -> Result<Model, String> {
        if state >= self.dim() {
            return Err(format!("no state {state}"));
        }
        let inner = self.inner.calibrate(state).map_err(|e| e.to_string())?;
        let means = inner.laws().iter().map(OffspringLaw::mean).collect();
        Ok(Model { inner, means })
    }

    /// `k(λ)` at `points` evenly spaced `λ` in `[lo, hi]`.
    pub fn k_curve(&self, lo: f64, hi: f64, points: usize) -> Vec<f64> {
        let lambdas = grid(lo, hi, points);
        spectral::k_curve(&self.inner, &lambdas).into_iter().map(|(_, k)| k).collect()
    }

    /// Flattened `(n, √n P̂(Z_n>0), se)` triples over a doubling grid of
    /// horizons from 8 up to `n_max`.
    pub fn survival_curve(&self, state: usize, n_max: usize, replicates: u32, seed: u64) -> Result<Vec<f64>, String> {
        self.check_state(state)?;
        let n_list = doubling(n_max);
        let run = SurvivalRun::simulate(&self.inner, state, 1, &n_list, replicates.into(), seed);
        Ok(n_list
            .iter()
            .flat_map(|&n| {
                let (p, se) = run.scaled_survival(n, None);
                [n as f64, p, se]
            })
            .collect())
    }

    /// Histogram of `S_n / (σ√n)` over survivors at `n` on `[0, 4]`, as
    /// densities, followed by the Rayleigh bin masses divided by the bin
    /// width, then the survivor count.
    pub fn conditioned_histogram(&self, state: usize, n: usize, replicates: u32, seed: u64, bins: usize) -> Result<Vec<f64>, String> {
        self.check_state(state)?;
        let bins = bins.max(1);
        let run = SurvivalRun::simulate(&self.inner, state, 1, &[n], replicates.into(), seed);
        let scale = self.sigma() * (n as f64).sqrt();
        Ok(histogram(run.at(n).iter().map(|s| s.s / scale), bins, 4.0))
    }

    fn check_state(&self, state: usize) -> Result<(), String> {
        if state < self.dim() {
            Ok(())
        } else {
            Err(format!("no state {state}"))
        }
    }
}

fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect(),
    }
}

fn doubling(n_max: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut n = 8;
    while n <= n_max.max(8) {
        v.push(n);
        n *= 2;
    }
    v
}

fn histogram(values: impl Iterator<Item = f64>, bins: usize, top: f64) -> Vec<f64> {
    let width = top / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for v in values {
        total += 1;
        let b = (v / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    let mut out: Vec<f64> = counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / (total as f64 * width) }).collect();
    out.extend((0..bins).map(|b| (rayleigh_cdf((b + 1) as f64 * width) - rayleigh_cdf(b as f64 * width)) / width));
    out.push(total as f64);
    out
}
