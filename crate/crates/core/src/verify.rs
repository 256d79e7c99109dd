//! Randomized agreement check between the recurrent and convolutional views
//! of an SSM channel.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::rng::{self, Rng};
use crate::ssm::{
    compute_kernel, convolve, run_recurrence, Complex, Discretization, KernelCache, SsmChannelParams,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityConfig {
    pub trials: usize,
    pub max_n_half: usize,
    pub max_length: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates every convolution kernel. Exists to prove the check can fail.
    pub inject_fault: bool,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            max_n_half: 8,
            max_length: 512,
            tolerance: 1e-6,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityTrial {
    pub trial: usize,
    pub rule: String,
    pub n_half: usize,
    pub length: usize,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub trials: Vec<DualityTrial>,
    pub worst_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `‖a - b‖∞ / ‖b‖∞`, or the plain difference when `b` is identically zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

/// A random strictly stable channel with `n_half` stored poles.
pub fn random_channel(r: &mut Rng, n_half: usize) -> Result<SsmChannelParams> {
    let a = (0..n_half)
        .map(|_| Complex::new(-r.gen_range(0.01..1.0), r.gen_range(-10.0..10.0)))
        .collect();
    let c = (0..n_half)
        .map(|_| Complex::new(normal(r), normal(r)) * std::f64::consts::FRAC_1_SQRT_2)
        .collect();
    let log_dt = r.gen_range(1e-3f64.ln()..1e-1f64.ln());
    SsmChannelParams::new(a, c, normal(r), log_dt)
}

pub fn duality_sweep(cfg: &DualityConfig) -> Result<DualityReport> {
    let mut r = rng::substream(cfg.seed, "kernel-check");
    let mut trials = Vec::with_capacity(2 * cfg.trials);
    for trial in 0..cfg.trials {
        let n_half = r.gen_range(1..=cfg.max_n_half.max(1));
        let length = r.gen_range(1..=cfg.max_length.max(1));
        let params = random_channel(&mut r, n_half)?;
        let u: Vec<f64> = (0..length).map(|_| normal(&mut r)).collect();
        for rule in [Discretization::Bilinear, Discretization::Zoh] {
            let disc = params.discretize(rule)?;
            let recurrent = run_recurrence(&disc, params.c(), params.d(), &u)?;
            let mut kernel = compute_kernel(&disc, params.c(), length)?.into_values();
            if cfg.inject_fault {
                kernel.iter_mut().for_each(|k| *k = -*k);
            }
            let conv = convolve(&KernelCache::from_values(kernel)?, &u, params.d())?;
            trials.push(DualityTrial {
                trial,
                rule: rule.to_string(),
                n_half,
                length,
                relative_error: relative_error(&conv, &recurrent),
            });
        }
    }
    let worst = trials.iter().map(|t| t.relative_error).fold(0.0, f64::max);
    Ok(DualityReport {
        passed: trials.iter().all(|t| t.relative_error <= cfg.tolerance),
        worst_relative_error: worst,
        tolerance: cfg.tolerance,
        trials,
    })
}
