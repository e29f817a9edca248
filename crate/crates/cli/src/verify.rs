//! Oracle suite: Monte Carlo against the closed-form risk and moment identity,
//! finite differences against analytic gradients, and the optimal-Q checks.

use std::time::Instant;

use icl_core::numerics::{mean_and_std_error, spectral_norm, symmetrize, Mat, Rng, SpdMatrix};
use icl_core::risk::{
    closed_form_gradient, closed_form_risk, expected_cov_product, optimal_q_for_sample, risk_gradient,
};
use icl_core::training::sample_training_set;
use icl_core::{
    empirical_risk, monte_carlo_risk, CovariateDistribution, RiskContext, Rotation, TaskDistribution, TaskSample, Theta,
};
use rayon::prelude::*;

use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn random_spd(rng: &mut Rng, d: usize) -> SpdMatrix {
    let g = rng.normal_matrix(d, d);
    let m = &g * g.transpose() / d as f64 + Mat::identity(d, d) * 0.5;
    let scale = m.trace() / d as f64;
    SpdMatrix::new(m / scale).expect("shifted Gram matrix is SPD")
}

/// Random eigenbasis with eigenvalues uniform in `[lo, hi]`.
fn bounded_spd(rng: &mut Rng, d: usize, lo: f64, hi: f64) -> SpdMatrix {
    let u = icl_core::numerics::haar_orthogonal(rng, d);
    let diag = icl_core::numerics::Vector::from_fn(d, |_, _| rng.uniform(lo, hi));
    SpdMatrix::new(symmetrize(&(&u * Mat::from_diagonal(&diag) * u.transpose()))).expect("positive spectrum")
}

fn random_family(rng: &mut Rng, d: usize, k: usize) -> TaskDistribution {
    let built = match k % 4 {
        0 => TaskDistribution::rotated_diagonal(d, 1.0, 2.0, Rotation::Fresh),
        1 => {
            let u = icl_core::numerics::haar_orthogonal(rng, d);
            TaskDistribution::rotated_diagonal(d, 0.5, 2.0, Rotation::Fixed(u))
        }
        2 => TaskDistribution::constant_multiple(d, 1.0, 3.0),
        _ => {
            let atoms = (0..3)
                .map(|_| rng.normal_matrix(d, d) * (0.3 / (d as f64).sqrt()) + Mat::identity(d, d) * 1.5)
                .collect();
            TaskDistribution::atomic(atoms)
        }
    };
    built.expect("well-conditioned family")
}

fn random_theta(rng: &mut Rng, d: usize) -> Theta {
    let scale = 0.4 / (d as f64).sqrt();
    Theta::new(
        Mat::identity(d, d) + rng.normal_matrix(d, d) * scale,
        Mat::identity(d, d) + rng.normal_matrix(d, d) * scale,
        100.0,
    )
    .expect("square")
}

/// Monte-Carlo population risk against the closed form, within `sigmas` combined standard errors.
pub fn closed_form_vs_monte_carlo(
    configs: usize,
    d: usize,
    n: usize,
    episodes: usize,
    sigmas: f64,
) -> Result<CheckReport> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut fails = 0;
    for k in 0..configs {
        let mut rng = Rng::new(1000 + k as u64, 0);
        let tasks = random_family(&mut rng, d, k);
        let cov = random_spd(&mut rng, d);
        let theta = random_theta(&mut rng, d);
        let ctx = RiskContext::new(tasks, CovariateDistribution::new(cov), n)?;
        let sample = TaskSample::for_distribution(&ctx.tasks, 20_000)?;
        let cf = closed_form_risk(&theta, &ctx, &sample);
        let mc = monte_carlo_risk(&theta, &ctx, episodes, &rng.child(7))?;
        let z = (mc.value - cf.value).abs() / (mc.std_error.powi(2) + cf.std_error.powi(2)).sqrt();
        worst = worst.max(z);
        if z > sigmas {
            fails += 1;
        }
    }
    Ok(CheckReport {
        name: "closed-form risk vs Monte Carlo".into(),
        passed: fails == 0,
        detail: format!("{configs} configs, d={d}, n={n}, {episodes} episodes, worst |z| = {worst:.2}"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `E[XₙKXₙ]` entrywise against Monte Carlo.
pub fn moment_identity(configs: usize, samples: usize, sigmas: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    let mut fails = 0;
    for k in 0..configs {
        let mut rng = Rng::new(2000 + k as u64, 0);
        let d = 1 + rng.index(6);
        let n = 1 + rng.index(16);
        let cov = random_spd(&mut rng, d);
        let kmat = symmetrize(&rng.normal_matrix(d, d));
        let exact = expected_cov_product(&cov, &kmat, n)?;
        let covs = CovariateDistribution::new(cov.clone());
        let base = rng.child(1);
        let draws: Vec<Mat> = (0..samples)
            .into_par_iter()
            .map(|i| {
                let mut r = base.child(i as u64);
                let xs = covs.sample_columns(n, &mut r);
                let x = &xs * xs.transpose() / n as f64;
                &x * &kmat * &x
            })
            .collect();
        for i in 0..d {
            for j in 0..d {
                let vals: Vec<f64> = draws.iter().map(|m| m[(i, j)]).collect();
                let (mean, se) = mean_and_std_error(&vals);
                let z = (mean - exact[(i, j)]).abs() / se.max(f64::MIN_POSITIVE);
                worst = worst.max(z);
                if z > sigmas {
                    fails += 1;
                }
            }
        }
    }
    Ok(CheckReport {
        name: "moment identity".into(),
        passed: fails == 0,
        detail: format!("{configs} configs, {samples} samples, worst |z| = {worst:.2}, {fails} entries outside"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn central_difference(f: &dyn Fn(&Theta) -> f64, theta: &Theta, h: f64) -> (Mat, Mat) {
    let d = theta.dim();
    let mut gp = Mat::zeros(d, d);
    let mut gq = Mat::zeros(d, d);
    for which in 0..2 {
        for i in 0..d {
            for j in 0..d {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                let (tp, tm, out) = if which == 0 {
                    (&mut plus.p, &mut minus.p, &mut gp)
                } else {
                    (&mut plus.q, &mut minus.q, &mut gq)
                };
                tp[(i, j)] += h;
                tm[(i, j)] -= h;
                out[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
        }
    }
    (gp, gq)
}

fn relative_gap(a: &(Mat, Mat), b: &(Mat, Mat)) -> f64 {
    let num = ((&a.0 - &b.0).norm_squared() + (&a.1 - &b.1).norm_squared()).sqrt();
    let den = (b.0.norm_squared() + b.1.norm_squared()).sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

/// Empirical and closed-form gradients against central differences.
pub fn gradient_check(configs: usize, tol: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for k in 0..configs {
        let mut rng = Rng::new(3000 + k as u64, 0);
        let d = 1 + rng.index(6);
        let n = 2 + rng.index(20);
        let tasks = random_family(&mut rng, d, k);
        let cov = random_spd(&mut rng, d);
        let theta = random_theta(&mut rng, d);
        let ctx = RiskContext::new(tasks, CovariateDistribution::new(cov), n)?;
        let prompts = sample_training_set(&ctx, 64, n, &rng.child(1))?;
        let analytic = risk_gradient(&theta, &prompts)?;
        let emp = |t: &Theta| empirical_risk(t, &prompts).expect("nonempty").value;
        worst = worst.max(relative_gap(&analytic, &central_difference(&emp, &theta, 1e-5)));
        let sample = TaskSample::for_distribution(&ctx.tasks, 50)?;
        let analytic = closed_form_gradient(&theta, &ctx, &sample);
        let cf = |t: &Theta| closed_form_risk(t, &ctx, &sample).value;
        worst = worst.max(relative_gap(&analytic, &central_difference(&cf, &theta, 1e-5)));
    }
    Ok(CheckReport {
        name: "gradient vs central differences".into(),
        passed: worst <= tol,
        detail: format!("{configs} configs, worst relative gap {worst:.2e}"),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Stationarity of `Q ↦ R_n(I, Q)` at `Q_n` and the `1/n` approach to `Σ⁻¹`.
pub fn optimal_q_check(configs: usize) -> Result<CheckReport> {
    let start = Instant::now();
    let mut worst_grad = 0.0_f64;
    let mut worst_spread = 0.0_f64;
    for k in 0..configs {
        let mut rng = Rng::new(4000 + k as u64, 0);
        let d = 2 + rng.index(4);
        let atoms = (0..4)
            .map(|_| rng.normal_matrix(d, d) * (0.5 / (d as f64).sqrt()) + Mat::identity(d, d) * 1.5)
            .collect();
        let tasks = TaskDistribution::atomic(atoms)?;
        let cov = bounded_spd(&mut rng, d, 0.5, 1.5);
        let sample = TaskSample::for_distribution(&tasks, 1)?;
        let mut scaled = Vec::new();
        for n in [100usize, 1000, 10_000] {
            let ctx = RiskContext::new(tasks.clone(), CovariateDistribution::new(cov.clone()), n)?;
            let q = optimal_q_for_sample(&ctx, &sample)?;
            let theta = Theta::new(Mat::identity(d, d), q.q.clone(), 100.0)?;
            let (_, gq) = closed_form_gradient(&theta, &ctx, &sample);
            worst_grad = worst_grad.max(gq.norm());
            scaled.push(n as f64 * spectral_norm(&(&q.q - cov.inverse())));
        }
        let hi = scaled.iter().cloned().fold(f64::MIN, f64::max);
        let lo = scaled.iter().cloned().fold(f64::MAX, f64::min);
        worst_spread = worst_spread.max((hi - lo) / hi);
    }
    Ok(CheckReport {
        name: "optimal Q stationarity and 1/n perturbation".into(),
        passed: worst_grad < 1e-8 && worst_spread < 0.2,
        detail: format!(
            "{configs} atomic configs, max |grad_Q| = {worst_grad:.2e}, max spread of n|Q_n - inv(Sigma)| = {:.1}%",
            100.0 * worst_spread
        ),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Full suite at the default sizes.
pub fn oracle_suite() -> Result<Vec<CheckReport>> {
    Ok(vec![
        closed_form_vs_monte_carlo(20, 5, 16, 100_000, 4.0)?,
        moment_identity(20, 100_000, 4.0)?,
        gradient_check(50, 1e-6)?,
        optimal_q_check(10)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        assert!(closed_form_vs_monte_carlo(4, 3, 8, 20_000, 4.0).unwrap().passed);
        assert!(moment_identity(4, 20_000, 4.0).unwrap().passed);
        assert!(gradient_check(8, 1e-6).unwrap().passed);
        assert!(optimal_q_check(3).unwrap().passed);
    }

    #[test]
    fn report_line_format() {
        let r = CheckReport {
            name: "x".into(),
            passed: false,
            detail: "d".into(),
            seconds: 1.5,
        };
        assert_eq!(r.line(), "FAIL x: d (1.5s)");
    }
}
