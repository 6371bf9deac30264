use linattn_core::linalg::dot;
use linattn_core::rng::{stream, Purpose};
use linattn_core::tasks::{gamma_radial_scale, sample_batch, CovariateLaw, TaskSpec};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// One-sample Kolmogorov–Smirnov statistic against a continuous CDF.
fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn squared_radii(law: CovariateLaw, prompts: usize, seed: u64) -> Vec<f64> {
    let spec = TaskSpec::new(5, 20, law).unwrap();
    let batch = sample_batch(&spec, prompts, &mut stream(seed, Purpose::Misc)).unwrap();
    batch
        .prompts
        .iter()
        .flat_map(|p| (0..=p.n()).map(move |i| p.covariate(i)))
        .map(|x| dot(&x, &x))
        .collect()
}

#[test]
fn prompts_hold_linear_responses() {
    for law in [
        CovariateLaw::Gaussian,
        CovariateLaw::Sphere,
        CovariateLaw::GammaScaledSphere { shape: 0.1, scale: 10.0 },
    ] {
        let spec = TaskSpec::new(5, 20, law).unwrap();
        let batch = sample_batch(&spec, 8, &mut stream(3, Purpose::Misc)).unwrap();
        for ((p, w), y) in batch.prompts.iter().zip(&batch.weights).zip(&batch.targets) {
            for (j, r) in p.responses().iter().enumerate() {
                assert!((r - dot(w, &p.covariate(j))).abs() < 1e-12);
            }
            assert!((y - dot(w, &p.covariate(p.n()))).abs() < 1e-12);
            assert_eq!(p.matrix().get(p.d(), p.n()), 0.0);
        }
    }
}

#[test]
fn gaussian_squared_norm_has_mean_d() {
    let r = squared_radii(CovariateLaw::Gaussian, 5000, 1);
    let (m, _) = mean_var(&r);
    let se = (10.0 / r.len() as f64).sqrt();
    assert!((m - 5.0).abs() < 4.0 * se, "mean {m}");
}

#[test]
fn sphere_covariates_have_unit_norm() {
    for r in squared_radii(CovariateLaw::Sphere, 200, 2) {
        assert!((r - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gamma_radii_match_moments() {
    // excess kurtosis of Gamma(k, θ) is 6/k, which sets the spread of the sample variance
    for (k, theta, prompts) in [(0.1, 10.0, 20_000), (2.5, 2.0, 5_000)] {
        let r = squared_radii(CovariateLaw::GammaScaledSphere { shape: k, scale: theta }, prompts, 4);
        let n = r.len() as f64;
        let (m, v) = mean_var(&r);
        let var = k * theta * theta;
        let mu4 = var * var * (3.0 + 6.0 / k);
        assert!((m - k * theta).abs() < 4.0 * (var / n).sqrt(), "({k},{theta}) mean {m}");
        assert!((v - var).abs() < 4.0 * ((mu4 - var * var) / n).sqrt(), "({k},{theta}) var {v}");
        assert!((var - 10.0).abs() < 1e-12);
    }
}

#[test]
fn gamma_radial_scale_direct_variance() {
    let mut rng = stream(5, Purpose::Misc);
    for (k, theta) in [(0.1, 10.0), (2.5, 2.0)] {
        let g: Vec<f64> = (0..200_000).map(|_| gamma_radial_scale(k, theta, &mut rng).unwrap().powi(2)).collect();
        let (m, v) = mean_var(&g);
        let n = g.len() as f64;
        let mu4 = 100.0 * (3.0 + 6.0 / k);
        assert!((m - k * theta).abs() < 4.0 * (10.0 / n).sqrt());
        assert!((v - 10.0).abs() < 4.0 * ((mu4 - 100.0) / n).sqrt(), "({k},{theta}) var {v}");
    }
    assert!(gamma_radial_scale(0.0, 1.0, &mut rng).is_err());
    assert!(gamma_radial_scale(1.0, -1.0, &mut rng).is_err());
}

#[test]
fn gamma_2_5_2_radii_follow_chi_squared_5() {
    let mut rng = stream(6, Purpose::Misc);
    let g: Vec<f64> = (0..10_000).map(|_| gamma_radial_scale(2.5, 2.0, &mut rng).unwrap().powi(2)).collect();
    let chi = ChiSquared::new(5.0).unwrap();
    let d = ks_one_sample(&g, |x| chi.cdf(x));
    // asymptotic 1% critical value of the one-sample statistic
    let critical = 1.6276 / (g.len() as f64).sqrt();
    assert!(d < critical, "KS {d} vs {critical}");
}

#[test]
fn covariates_are_isotropic() {
    for (law, scale) in [
        (CovariateLaw::Gaussian, 1.0),
        (CovariateLaw::Sphere, 0.2),
        (CovariateLaw::GammaScaledSphere { shape: 0.1, scale: 10.0 }, 0.2),
    ] {
        let spec = TaskSpec::new(5, 20, law).unwrap();
        let batch = sample_batch(&spec, 5000, &mut stream(7, Purpose::Misc)).unwrap();
        let mut cov = [[0.0; 5]; 5];
        let mut count = 0.0;
        for p in &batch.prompts {
            for i in 0..=p.n() {
                let x = p.covariate(i);
                for a in 0..5 {
                    for b in 0..5 {
                        cov[a][b] += x[a] * x[b];
                    }
                }
                count += 1.0;
            }
        }
        for (a, row) in cov.iter().enumerate() {
            for (b, c) in row.iter().enumerate() {
                let expected = if a == b { scale } else { 0.0 };
                assert!((c / count - expected).abs() < 0.05, "{law:?} [{a}][{b}] = {}", c / count);
            }
        }
    }
}

#[test]
fn bad_specs_are_rejected() {
    assert!(TaskSpec::new(0, 20, CovariateLaw::Gaussian).is_err());
    assert!(TaskSpec::new(5, 0, CovariateLaw::Gaussian).is_err());
    assert!(TaskSpec::new(5, 20, CovariateLaw::GammaScaledSphere { shape: -1.0, scale: 1.0 }).is_err());
    let spec = TaskSpec::new(5, 20, CovariateLaw::Gaussian).unwrap();
    assert!(sample_batch(&spec, 0, &mut stream(0, Purpose::Misc)).is_err());
}
