//! Synthetic bag generators.
//!
//! * `needle`: a bag is positive iff it contains signal tokens. Positive bags
//!   carry `⌈signal_rate · L⌉` of them.
//! * `majority`: a bag is positive iff more than half of its tokens are signal.
//!
//! Noise tokens are `N(0, σ²)` per feature; signal tokens add `signal_shift`
//! to every feature. Patch labels mark the signal tokens. Labels are exactly
//! balanced (positives get the extra bag for odd counts) and shuffled.
//! Tokens are laid out row-major on a grid `⌈√L⌉` cells wide.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Needle,
    Majority,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needle" => Ok(Self::Needle),
            "majority" => Ok(Self::Majority),
            other => Err(Error::InvalidConfig(format!("unknown synthetic task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub num_bags: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub feature_dim: usize,
    pub signal_rate: f64,
    pub noise_sigma: f64,
    pub signal_shift: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            task: SyntheticTask::Needle,
            num_bags: 200,
            length_min: 128,
            length_max: 512,
            feature_dim: 16,
            signal_rate: 0.05,
            noise_sigma: 1.0,
            signal_shift: 1.0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length_min < 1 || self.length_min > self.length_max {
            return Err(Error::InvalidConfig(format!(
                "length range [{}, {}] is invalid",
                self.length_min, self.length_max
            )));
        }
        if !(self.signal_rate > 0.0 && self.signal_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!("signal_rate {} outside (0, 1]", self.signal_rate)));
        }
        if !(self.noise_sigma >= 0.0) || !self.signal_shift.is_finite() {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0 and signal_shift finite".into()));
        }
        if self.num_bags == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("num_bags and feature_dim must be positive".into()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec, seed: u64) -> Result<Vec<Bag>> {
    spec.validate()?;
    let mut r = rng::substream(seed, "synth");
    let positives = spec.num_bags.div_ceil(2);
    let mut labels: Vec<usize> = (0..spec.num_bags).map(|i| usize::from(i < positives)).collect();
    labels.shuffle(&mut r);

    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let len = r.gen_range(spec.length_min..=spec.length_max);
            let signal = match (spec.task, label) {
                (SyntheticTask::Needle, 0) => 0,
                (SyntheticTask::Needle, _) => ((spec.signal_rate * len as f64).ceil() as usize).clamp(1, len),
                (SyntheticTask::Majority, 0) => r.gen_range(0..=(len - 1) / 2),
                (SyntheticTask::Majority, _) => r.gen_range(len / 2 + 1..=len),
            };
            let mut patch = vec![0usize; len];
            for t in index::sample(&mut r, len, signal) {
                patch[t] = 1;
            }
            let features = Array2::from_shape_fn((len, spec.feature_dim), |(t, _)| {
                let noise: f64 = StandardNormal.sample(&mut r);
                (spec.noise_sigma * noise + spec.signal_shift * patch[t] as f64) as f32
            });
            let width = (len as f64).sqrt().ceil() as usize;
            let coords = (0..len).map(|t| ((t / width) as i64, (t % width) as i64)).collect();
            Bag::new(format!("bag{i:04}"), features, label)?
                .with_patch_labels(patch)?
                .with_coords(coords)
        })
        .collect()
}
