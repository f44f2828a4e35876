//! Test-user sampling gated by a two-sample Kolmogorov–Smirnov test.
//!
//! A sample is only accepted when the per-user reference metric on the sample
//! is indistinguishable from the same metric on the whole test population.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitDataset;
use crate::error::{Error, Result};
use crate::ids::UserId;
use crate::seed;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    pub alpha: f64,
    pub accepted: bool,
    pub attempts: u32,
}

/// Survival function of the Kolmogorov distribution, `P(K > λ)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-transformed series converges fast for small λ.
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let x = (-pi2 / (8.0 * lambda * lambda)).exp();
        let mut cdf = 0.0;
        let mut k = 1i32;
        loop {
            let term = x.powi((2 * k - 1) * (2 * k - 1));
            cdf += term;
            if term < 1e-16 {
                break;
            }
            k += 1;
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * cdf;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sum = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * lambda * lambda).exp();
            sum += if k % 2 == 1 { term } else { -term };
            if term < 1e-16 {
                break;
            }
        }
        (2.0 * sum).clamp(0.0, 1.0)
    }
}

/// Largest vertical gap between the two empirical CDFs. Ties are handled by
/// evaluating both ECDFs only after all copies of a value have been consumed.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Two-sample K-S test with the asymptotic p-value at effective size
/// `n_e = n_a · n_b / (n_a + n_b)`, using Stephens' finite-sample scaling
/// `λ = (√n_e + 0.12 + 0.11/√n_e) · D`.
pub fn ks_two_sample(a: &[f64], b: &[f64], alpha: f64) -> Result<KsReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("K-S test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::invalid("K-S test input contains NaN"));
    }
    let statistic = ks_statistic(a, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let effective = na * nb / (na + nb);
    let root = effective.sqrt();
    let p_value = kolmogorov_survival((root + 0.12 + 0.11 / root) * statistic);
    Ok(KsReport {
        statistic,
        p_value,
        alpha,
        accepted: p_value >= alpha,
        attempts: 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSample {
    pub user_ids: Vec<UserId>,
    pub seed: u64,
    pub gate: KsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
    pub max_attempts: u32,
}

impl SampleConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            alpha: DEFAULT_ALPHA,
            seed,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

/// Draw `n` distinct users from the population for attempt `attempt`.
pub fn draw_users(population: &[UserId], n: usize, seed: u64, attempt: u32) -> Vec<UserId> {
    let mut rng = seed::rng_for(seed, &format!("sample-attempt-{attempt}"));
    let mut picked: Vec<usize> = index::sample(&mut rng, population.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| population[i].clone()).collect()
}

/// General form of the gate: the population's scores and the scores used for
/// a sampled user may come from different sources.
pub fn sample_until_accepted_by<F>(
    population: &[UserId],
    full_scores: &[f64],
    sample_score: F,
    cfg: SampleConfig,
) -> Result<UserSample>
where
    F: Fn(&UserId) -> Result<f64>,
{
    if cfg.n == 0 || cfg.n > population.len() {
        return Err(Error::invalid(format!(
            "sample size {} must be in 1..={}",
            cfg.n,
            population.len()
        )));
    }
    if cfg.max_attempts == 0 {
        return Err(Error::invalid("max_attempts must be positive"));
    }
    let mut last = None;
    for attempt in 0..cfg.max_attempts {
        let users = draw_users(population, cfg.n, cfg.seed, attempt);
        let scores = users.iter().map(&sample_score).collect::<Result<Vec<f64>>>()?;
        let mut report = ks_two_sample(&scores, full_scores, cfg.alpha)?;
        report.attempts = attempt + 1;
        if report.accepted {
            return Ok(UserSample {
                user_ids: users,
                seed: cfg.seed,
                gate: report,
            });
        }
        last = Some(report);
    }
    Err(Error::GateExhausted(last.expect("at least one attempt")))
}

/// Sample test users until the per-user reference metric on the sample passes
/// the K-S gate against the full test population.
pub fn sample_until_accepted(
    split: &SplitDataset,
    reference: &BTreeMap<UserId, f64>,
    cfg: SampleConfig,
) -> Result<UserSample> {
    let population: Vec<UserId> = split.test_users().cloned().collect();
    let full = population
        .iter()
        .map(|u| reference.get(u).copied().ok_or_else(|| Error::MissingReference(u.clone())))
        .collect::<Result<Vec<f64>>>()?;
    sample_until_accepted_by(
        &population,
        &full,
        |u| reference.get(u).copied().ok_or_else(|| Error::MissingReference(u.clone())),
        cfg,
    )
}
