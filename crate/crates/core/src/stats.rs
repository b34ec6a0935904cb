//! Small statistics toolkit: running moments, KS distances, bootstrap errors.

use rand::Rng;
use serde::Serialize;

/// Running mean and variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Summary {
    pub count: u64,
    mean: f64,
    m2: f64,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for Summary {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Summary::new();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

/// `(mean, standard error)` of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let s: Summary = xs.iter().copied().collect();
    (s.mean(), s.se())
}

/// Binomial standard error of a frequency `p` estimated from `n` trials.
pub fn binomial_se(p: f64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (p * (1.0 - p) / n as f64).max(0.0).sqrt()
}

pub fn sort(xs: &mut [f64]) {
    xs.sort_by(f64::total_cmp);
}

/// `sup_t |F_n(t) − F(t)|` for a sorted sample.
pub fn ks_one_sample<F: Fn(f64) -> f64>(sorted: &[f64], cdf: F) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((k + 1) as f64 / n - f).max(f - k as f64 / n);
    }
    d
}

/// `sup_t |F_a(t) − F_b(t)|` for two sorted samples.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Empirical quantile by linear interpolation of a sorted sample.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fraction of a sorted sample that is `≤ t`.
pub fn ecdf(sorted: &[f64], t: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    sorted.partition_point(|&x| x <= t) as f64 / sorted.len() as f64
}

/// Bootstrap standard deviation of `stat` over `resamples` resamples with replacement.
pub fn bootstrap_se<R, F>(sample: &[f64], resamples: usize, rng: &mut R, stat: F) -> f64
where
    R: Rng + ?Sized,
    F: Fn(&[f64]) -> f64,
{
    if sample.is_empty() || resamples < 2 {
        return 0.0;
    }
    let n = sample.len();
    let mut buf = vec![0.0; n];
    let mut s = Summary::new();
    for _ in 0..resamples {
        for b in buf.iter_mut() {
            *b = sample[rng.random_range(0..n)];
        }
        s.push(stat(&buf));
    }
    s.variance().sqrt()
}
