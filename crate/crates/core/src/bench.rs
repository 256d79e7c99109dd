//! Forward-pass timing on a random bag.
//!
//! Only the forward pass is timed; model construction and data generation
//! happen before the clock starts.

use std::time::Instant;

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::model::{MilModel, ModelConfig, PoolKind, PoolingBaseline, Trainable};
use crate::ops::{self, SsmMode};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub length: usize,
    pub dim: usize,
    pub repeats: usize,
    pub hidden_dim: usize,
    pub state_dim: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            length: 30_000,
            dim: 1024,
            repeats: 100,
            hidden_dim: 512,
            state_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timing {
    pub mean_ms: f64,
    /// Population standard deviation; zero for a single repeat.
    pub std_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn from_samples(samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len() as f64;
        let mean_ms = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean_ms).powi(2)).sum::<f64>() / n;
        Self {
            mean_ms,
            std_ms: var.sqrt(),
            samples_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub length: usize,
    pub dim: usize,
    pub repeats: usize,
    /// Whole-sequence model forward with FFT convolution.
    pub convolution: Timing,
    /// Token-by-token model forward with recurrent state.
    pub recurrence: Timing,
    /// SSM layer alone, convolution view.
    pub ssm_convolution: Timing,
    /// SSM layer alone, recurrence view.
    pub ssm_recurrence: Timing,
    pub mean_pool: Timing,
    pub max_pool: Timing,
    /// Largest absolute difference between the two model outputs.
    pub max_abs_disagreement: f64,
}

impl BenchReport {
    /// How many times faster the convolution forward is than the recurrent one.
    pub fn speedup(&self) -> f64 {
        self.recurrence.mean_ms / self.convolution.mean_ms
    }

    pub fn ssm_speedup(&self) -> f64 {
        self.ssm_recurrence.mean_ms / self.ssm_convolution.mean_ms
    }
}

pub fn random_bag(length: usize, dim: usize, seed: u64) -> Result<Bag> {
    let mut r = rng::substream(seed, "bench");
    let f = Array2::from_shape_fn((length, dim), |_| {
        let v: f64 = StandardNormal.sample(&mut r);
        v as f32
    });
    Bag::new("bench", f, 0)
}

fn time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(Timing, T)> {
    let mut samples = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let start = Instant::now();
        let out = f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        last = Some(out);
    }
    Ok((Timing::from_samples(samples), last.expect("at least one repeat")))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats == 0 || cfg.length == 0 || cfg.dim == 0 {
        return Err(Error::InvalidConfig("bench length, dim and repeats must be positive".into()));
    }
    let model = MilModel::init(
        ModelConfig {
            input_dim: cfg.dim,
            hidden_dim: cfg.hidden_dim,
            state_dim: cfg.state_dim,
            ..ModelConfig::default()
        },
        cfg.seed,
    )?;
    let bag = random_bag(cfg.length, cfg.dim, cfg.seed)?;
    let mean = PoolingBaseline::init(PoolKind::Mean, cfg.dim, 2, cfg.seed)?;
    let max = PoolingBaseline::init(PoolKind::Max, cfg.dim, 2, cfg.seed)?;

    let (convolution, conv_out) = time(cfg.repeats, || model.forward_with(&bag, SsmMode::Convolution))?;
    let (recurrence, rec_out) = time(cfg.repeats, || model.forward_streaming(&bag))?;
    let max_abs_disagreement = conv_out
        .probs
        .iter()
        .zip(&rec_out.probs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let hidden = Array2::from_shape_fn((cfg.length, cfg.hidden_dim), |(t, h)| {
        f64::from(bag.features[[t, h % cfg.dim]])
    });
    let weights = model.ssm_weights(0);
    let rule = model.config().discretization;
    let (ssm_convolution, _) = time(cfg.repeats, || ops::ssm_layer(hidden.view(), weights, rule, SsmMode::Convolution))?;
    let (ssm_recurrence, _) = time(cfg.repeats, || ops::ssm_layer(hidden.view(), weights, rule, SsmMode::Recurrence))?;
    let (mean_pool, _) = time(cfg.repeats, || mean.predict(&bag))?;
    let (max_pool, _) = time(cfg.repeats, || max.predict(&bag))?;

    Ok(BenchReport {
        length: cfg.length,
        dim: cfg.dim,
        repeats: cfg.repeats,
        convolution,
        recurrence,
        ssm_convolution,
        ssm_recurrence,
        mean_pool,
        max_pool,
        max_abs_disagreement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(length: usize, repeats: usize) -> BenchConfig {
        BenchConfig {
            length,
            dim: 8,
            repeats,
            hidden_dim: 4,
            state_dim: 4,
            seed: 1,
        }
    }

    #[test]
    fn single_repeat_has_zero_spread() {
        let r = run_bench(&small(50, 1)).unwrap();
        for t in [&r.convolution, &r.recurrence, &r.mean_pool, &r.max_pool] {
            assert_eq!(t.std_ms, 0.0);
            assert_eq!(t.samples_ms.len(), 1);
        }
    }

    #[test]
    fn length_one_modes_agree() {
        let r = run_bench(&small(1, 2)).unwrap();
        assert!(r.max_abs_disagreement < 1e-12);
    }

    #[test]
    fn timing_statistics() {
        let t = Timing::from_samples(vec![1.0, 3.0]);
        assert_eq!((t.mean_ms, t.std_ms), (2.0, 1.0));
        assert!(run_bench(&small(5, 0)).is_err());
    }
}
