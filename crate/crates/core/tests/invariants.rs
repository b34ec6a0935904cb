use bpme::agresti::{q_decomposed, q_direct, EnvPath};
use bpme::conditioned::{tau, ExitTime};
use bpme::identities::random_model;
use bpme::rng::{seeded, stream, StreamModule, Substream};
use bpme::stats::{ks_one_sample, quantile, sort};
use bpme::theorems::rayleigh_cdf;
use bpme::{spectral, EnvironmentModel, OffspringLaw};
use proptest::prelude::*;
use rand::{Rng, RngCore};

fn model(seed: u64) -> EnvironmentModel {
    random_model(&mut seeded(seed), 4)
}

fn path(model: &EnvironmentModel, seed: u64, n: usize) -> EnvPath {
    let mut rng = seeded(seed ^ 0x9e37_79b9);
    let states = (0..n).map(|_| rng.random_range(0..model.dim())).collect();
    EnvPath::new(model, states).unwrap()
}

fn law() -> impl Strategy<Value = OffspringLaw> {
    prop_oneof![
        (0.05f64..0.95).prop_map(|p| OffspringLaw::geometric(p).unwrap()),
        (0.1f64..5.0).prop_map(|l| OffspringLaw::poisson(l).unwrap()),
        prop::collection::vec(0.01f64..1.0, 3..8).prop_map(|w| {
            let sum: f64 = w.iter().sum();
            OffspringLaw::explicit(w.iter().map(|v| v / sum).collect()).unwrap()
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pgf_is_monotone_with_unit_value_at_one(law in law(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (flo, fhi) = (law.pgf(lo).unwrap(), law.pgf(hi).unwrap());
        prop_assert!(flo <= fhi + 1e-15);
        prop_assert!((0.0..=1.0).contains(&flo));
        prop_assert!((law.pgf(1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn complement_matches_pgf_and_is_bounded_by_the_mean(law in law(), t in 0.0f64..1.0) {
        let c = law.pgf_complement(t);
        prop_assert!((c - (1.0 - law.pgf(1.0 - t).unwrap())).abs() < 1e-12);
        prop_assert!(c >= 0.0 && c <= law.mean() * t + 1e-12);
    }

    #[test]
    fn q_lies_in_unit_interval_and_survival_decreases_along_the_path(seed in any::<u64>(), n in 1usize..30, z in 1u64..6, s in 0.0f64..0.95) {
        let m = model(seed);
        let p = path(&m, seed, n);
        let mut last = 1.0;
        for k in 1..=n {
            prop_assert!((0.0..=1.0).contains(&q_direct(&m, &p.prefix(k), z, s).unwrap()));
            let survival = q_direct(&m, &p.prefix(k), z, 0.0).unwrap();
            prop_assert!(survival <= last + 1e-14);
            last = survival;
        }
    }

    #[test]
    fn q_grows_with_z_and_falls_with_s(seed in any::<u64>(), n in 1usize..20, s in 0.0f64..0.9) {
        let m = model(seed);
        let p = path(&m, seed, n);
        let q1 = q_direct(&m, &p, 1, s).unwrap();
        prop_assert!(q1 <= q_direct(&m, &p, 3, s).unwrap() + 1e-15);
        prop_assert!(q_direct(&m, &p, 1, s + 0.05).unwrap() <= q1 + 1e-15);
    }

    #[test]
    fn decomposition_reproduces_q(seed in any::<u64>(), n in 1usize..30, z in 1u64..6, s in 0.0f64..0.95) {
        let m = model(seed);
        let p = path(&m, seed, n);
        let a = q_direct(&m, &p, z, s).unwrap();
        let b = q_decomposed(&m, &p, z, s).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300));
    }

    #[test]
    fn stationary_law_is_invariant(seed in any::<u64>()) {
        let m = model(seed);
        let nu = m.nu().weights().to_vec();
        let moved = m.kernel().left_apply(&nu);
        prop_assert!(nu.iter().zip(&moved).all(|(a, b)| (a - b).abs() < 1e-13));
        prop_assert!((nu.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn dual_kernel_is_stochastic_and_an_involution(seed in any::<u64>()) {
        let m = model(seed);
        let dual = m.kernel().dual_kernel(m.nu()).unwrap();
        for i in 0..m.dim() {
            prop_assert!((dual.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let back = dual.dual_kernel(m.nu()).unwrap();
        for i in 0..m.dim() {
            for j in 0..m.dim() {
                prop_assert!((back.get(i, j) - m.kernel().get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn k_is_log_convex_with_unit_value_at_zero(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let m = model(seed);
        prop_assert!((spectral::k(&m, 0.0) - 1.0).abs() < 1e-12);
        let mid = spectral::k(&m, 0.5 * (a + b)).ln();
        prop_assert!(mid <= 0.5 * (spectral::k(&m, a).ln() + spectral::k(&m, b).ln()) + 1e-9);
    }

    #[test]
    fn calibration_zeroes_the_drift(seed in any::<u64>()) {
        let m = model(seed);
        if let Ok(c) = m.calibrate(0) {
            prop_assert!(c.drift().abs() < 1e-12);
            prop_assert_eq!(c.kernel(), m.kernel());
        }
    }

    #[test]
    fn rayleigh_cdf_is_a_distribution_function(a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rayleigh_cdf(lo) <= rayleigh_cdf(hi));
        prop_assert!((0.0..=1.0).contains(&rayleigh_cdf(lo)));
        prop_assert_eq!(rayleigh_cdf(0.0), 0.0);
    }

    #[test]
    fn tau_is_the_first_nonpositive_level(s in prop::collection::vec(-3.0f64..3.0, 1..50), y in 0.0f64..5.0) {
        match tau(&s, y) {
            ExitTime::At(k) => {
                prop_assert!(y + s[k] <= 0.0);
                prop_assert!(s[1..k].iter().all(|v| y + v > 0.0));
            }
            ExitTime::NotYet => prop_assert!(s[1..].iter().all(|v| y + v > 0.0)),
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct(seed in any::<u64>(), r in 0u64..1_000_000) {
        let draw = |m, sub, r| stream(seed, m, sub, r).next_u64();
        let base = draw(StreamModule::Simulate, Substream::Environment, r);
        prop_assert_eq!(base, draw(StreamModule::Simulate, Substream::Environment, r));
        prop_assert_ne!(base, draw(StreamModule::Simulate, Substream::Environment, r + 1));
        prop_assert_ne!(base, draw(StreamModule::Simulate, Substream::Offspring, r));
        prop_assert_ne!(base, draw(StreamModule::Harmonic, Substream::Environment, r));
    }

    #[test]
    fn ks_distance_is_bounded_and_quantiles_are_ordered(mut xs in prop::collection::vec(0.0f64..5.0, 1..200)) {
        sort(&mut xs);
        let d = ks_one_sample(&xs, rayleigh_cdf);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!(d >= 0.5 / xs.len() as f64 - 1e-12);
        prop_assert!(quantile(&xs, 0.25) <= quantile(&xs, 0.75));
    }
}
