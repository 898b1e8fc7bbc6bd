#![allow(dead_code)]

use latent_update::model::{BiopsyObs, PatientRecord, PopulationParams, PsaObs};

pub fn toy_params() -> PopulationParams {
    PopulationParams {
        rho: 0.3,
        beta_age: 0.1,
        mu: [[1.0, 0.05], [1.5, 0.2]],
        tau2: [[0.25, 0.01], [0.3, 0.02]],
        sigma2: 0.09,
        gamma0: -2.0,
        gamma1: 1.5,
    }
}

pub fn toy_record() -> PatientRecord {
    PatientRecord {
        id: "toy".into(),
        age_std: 0.4,
        psa: vec![
            PsaObs {
                time: 0.0,
                value: 1.3,
            },
            PsaObs {
                time: 0.5,
                value: 1.25,
            },
            PsaObs {
                time: 1.1,
                value: 1.6,
            },
        ],
        biopsies: vec![BiopsyObs {
            time: 1.0,
            result: 0,
        }],
        observed_class: None,
    }
}

/// Trapezoid rule on `[lo, hi]` with `n` points, integrand supplied on the
/// log scale.
pub fn trapezoid_1d(lo: f64, hi: f64, n: usize, log_f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            w * log_f(lo + h * i as f64).exp()
        })
        .sum::<f64>()
        * h
}

/// Tensor trapezoid rule over a rectangle; returns `ln` of the integral
/// together with the first two moments of the normalized integrand.
pub struct Quad2 {
    pub log_integral: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

pub fn trapezoid_2d(
    lo: [f64; 2],
    hi: [f64; 2],
    n: usize,
    log_f: impl Fn(f64, f64) -> f64,
) -> Quad2 {
    let h = [
        (hi[0] - lo[0]) / (n - 1) as f64,
        (hi[1] - lo[1]) / (n - 1) as f64,
    ];
    let mut vals = Vec::with_capacity(n * n);
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for k in 0..n {
            let x = lo[0] + h[0] * i as f64;
            let y = lo[1] + h[1] * k as f64;
            let w = (if i == 0 || i == n - 1 { 0.5 } else { 1.0 })
                * (if k == 0 || k == n - 1 { 0.5 } else { 1.0 });
            let lv = log_f(x, y);
            max = max.max(lv);
            vals.push((x, y, w, lv));
        }
    }
    let mut z = 0.0;
    let mut m = [0.0; 2];
    let mut s = [[0.0; 2]; 2];
    for &(x, y, w, lv) in &vals {
        let p = w * (lv - max).exp();
        z += p;
        m[0] += p * x;
        m[1] += p * y;
        s[0][0] += p * x * x;
        s[0][1] += p * x * y;
        s[1][1] += p * y * y;
    }
    let mean = [m[0] / z, m[1] / z];
    let c01 = s[0][1] / z - mean[0] * mean[1];
    let cov = [
        [s[0][0] / z - mean[0] * mean[0], c01],
        [c01, s[1][1] / z - mean[1] * mean[1]],
    ];
    Quad2 {
        log_integral: max + (z * h[0] * h[1]).ln(),
        mean,
        cov,
    }
}

/// Two-sample-free KS statistic of `draws` against a CDF.
pub fn ks_statistic(draws: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// `j` parameter draws scattered around [`toy_params`], as a patient-free
/// store.
pub fn toy_store(j: usize, seed: u64) -> latent_update::store::PosteriorSample {
    use rand::RngExt;
    let mut rng = latent_update::rng::rng_from(seed, &[]);
    let base = toy_params();
    let params = (0..j)
        .map(|_| {
            let mut jitter = |s: f64| s * (rng.random::<f64>() - 0.5);
            let mut p = base;
            p.rho += jitter(0.1);
            p.beta_age += jitter(0.05);
            for c in 0..2 {
                p.mu[c][0] += jitter(0.2);
                p.mu[c][1] += jitter(0.05);
                p.tau2[c][0] *= 1.0 + jitter(0.4);
            }
            p.sigma2 *= 1.0 + jitter(0.3);
            p.gamma0 += jitter(0.4);
            p.gamma1 += jitter(0.4);
            p
        })
        .collect();
    latent_update::store::PosteriorSample::from_params(params).unwrap()
}
