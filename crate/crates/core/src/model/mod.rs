//! The SSM aggregator, its optional per-patch head, and pooling baselines.
//!
//! Pipeline per bag:
//!
//! ```text
//! tokens (L × D_in)
//!   → affine D_in→H → layer norm
//!   → [ SSM per feature (+ D skip) → affine H→2H → GLU 2H→H ] × layers
//!   → (per-token patch head)
//!   → max-pool over tokens → affine H→classes → softmax
//! ```

mod baseline;
mod checkpoint;
mod forward;
mod record;

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::ops::SsmWeights;
use crate::rng;
use crate::ssm::Discretization;

pub use baseline::{PoolKind, PoolingBaseline};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{MilOutput, StreamingMil};
pub use record::{Objective, Recorded};

/// Lower and upper bounds of the initial timestep.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub state_dim: usize,
    pub num_classes: usize,
    pub num_ssm_layers: usize,
    pub multitask: bool,
    pub num_patch_classes: usize,
    pub discretization: Discretization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 1024,
            hidden_dim: 512,
            state_dim: 32,
            num_classes: 2,
            num_ssm_layers: 1,
            multitask: false,
            num_patch_classes: 2,
            discretization: Discretization::Bilinear,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("state_dim", self.state_dim),
            ("num_classes", self.num_classes),
            ("num_ssm_layers", self.num_ssm_layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.state_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "state_dim must be even (poles come in conjugate pairs), got {}",
                self.state_dim
            )));
        }
        if self.multitask && self.num_patch_classes == 0 {
            return Err(Error::InvalidConfig("num_patch_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn n_half(&self) -> usize {
        self.state_dim / 2
    }

    /// `(name, rows, cols)` of every parameter in declaration order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let (d, h, nh) = (self.input_dim, self.hidden_dim, self.n_half());
        let mut out = vec![
            ("projection.weight".to_string(), d, h),
            ("projection.bias".to_string(), 1, h),
            ("norm.gamma".to_string(), 1, h),
            ("norm.beta".to_string(), 1, h),
        ];
        for l in 0..self.num_ssm_layers {
            for (name, r, c) in [
                ("ssm.a_re", h, nh),
                ("ssm.a_im", h, nh),
                ("ssm.c_re", h, nh),
                ("ssm.c_im", h, nh),
                ("ssm.d", 1, h),
                ("ssm.log_dt", 1, h),
                ("mixing.weight", h, 2 * h),
                ("mixing.bias", 1, 2 * h),
            ] {
                out.push((format!("layer{l}.{name}"), r, c));
            }
        }
        out.push(("classifier.weight".to_string(), h, self.num_classes));
        out.push(("classifier.bias".to_string(), 1, self.num_classes));
        if self.multitask {
            out.push(("patch_head.weight".to_string(), h, self.num_patch_classes));
            out.push(("patch_head.bias".to_string(), 1, self.num_patch_classes));
        }
        out
    }
}

/// Closed-form trainable-parameter count.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let (d, h, n) = (config.input_dim, config.hidden_dim, config.state_dim);
    let projection = d * h + h;
    let norm = 2 * h;
    let ssm = 2 * h * n + h + h;
    let mixing = h * 2 * h + 2 * h;
    let classifier = h * config.num_classes + config.num_classes;
    let patch_head = if config.multitask {
        h * config.num_patch_classes + config.num_patch_classes
    } else {
        0
    };
    projection + norm + config.num_ssm_layers * (ssm + mixing) + classifier + patch_head
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Anything the training loop can optimize.
pub trait Trainable: Sync {
    fn params(&self) -> &[Param];
    fn params_mut(&mut self) -> &mut [Param];
    /// Slide-level class probabilities.
    fn predict(&self, bag: &Bag) -> Result<Vec<f64>>;
    /// Loss of one bag and its gradient for every parameter, in order.
    fn loss_and_grads(&self, bag: &Bag, objective: Objective) -> Result<(f64, Vec<Array2<f64>>)>;
    /// Re-imposes parameter constraints after an update.
    fn project(&mut self) {}
}

/// Offsets of one layer's parameters in the flat list.
const PER_LAYER: usize = 8;
const HEAD: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Largest real part allowed for a pole after an optimizer step. Keeps every
/// trained channel strictly stable.
pub const MAX_POLE_REAL: f64 = -1e-4;

impl MilModel {
    /// S4D-Lin poles, circular-normal output weights, log-uniform timesteps
    /// and fan-in scaled affine layers.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::substream(seed, "init");
        let c_dist = Normal::new(0.0, 0.5f64.sqrt()).expect("valid std");
        let log_dt = Uniform::new_inclusive(DT_MIN.ln(), DT_MAX.ln());
        let params = config
            .layout()
            .into_iter()
            .map(|(name, rows, cols)| {
                let field = name.rsplit('.').next().unwrap_or_default().to_string();
                let value = match (name.contains("ssm."), field.as_str()) {
                    (true, "a_re") => Array2::from_elem((rows, cols), -0.5),
                    (true, "a_im") => Array2::from_shape_fn((rows, cols), |(_, k)| PI * k as f64),
                    (true, "c_re" | "c_im") => Array2::from_shape_fn((rows, cols), |_| c_dist.sample(&mut r)),
                    (true, "d") => Array2::ones((rows, cols)),
                    (true, "log_dt") => Array2::from_shape_fn((rows, cols), |_| log_dt.sample(&mut r)),
                    (_, "gamma") => Array2::ones((rows, cols)),
                    (_, "beta") => Array2::zeros((rows, cols)),
                    _ => {
                        let fan_in = if field == "bias" {
                            Self::fan_in_of(&config, &name)
                        } else {
                            rows
                        };
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        Array2::from_shape_fn((rows, cols), |_| r.gen_range(-bound..=bound))
                    }
                };
                Param { name, value }
            })
            .collect();
        Ok(Self { config, params })
    }

    fn fan_in_of(config: &ModelConfig, bias_name: &str) -> usize {
        if bias_name.starts_with("projection") {
            config.input_dim
        } else {
            config.hidden_dim
        }
    }

    /// Builds a model from explicit parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                got: params.len(),
            });
        }
        for ((name, r, c), p) in layout.iter().zip(&params) {
            if &p.name != name || p.value.dim() != (*r, *c) {
                return Err(Error::InvalidParameters(format!(
                    "expected {name} {r}×{c}, found {} {:?}",
                    p.name,
                    p.value.dim()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub(crate) fn projection(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.params[0].value, &self.params[1].value)
    }

    pub(crate) fn norm(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.params[2].value, &self.params[3].value)
    }

    fn layer_base(&self, layer: usize) -> usize {
        HEAD + layer * PER_LAYER
    }

    pub(crate) fn ssm_weights(&self, layer: usize) -> SsmWeights<'_> {
        let b = self.layer_base(layer);
        let p = &self.params;
        SsmWeights {
            a_re: p[b].value.view(),
            a_im: p[b + 1].value.view(),
            c_re: p[b + 2].value.view(),
            c_im: p[b + 3].value.view(),
            d: p[b + 4].value.view(),
            log_dt: p[b + 5].value.view(),
        }
    }

    pub(crate) fn mixing(&self, layer: usize) -> (&Array2<f64>, &Array2<f64>) {
        let b = self.layer_base(layer);
        (&self.params[b + 6].value, &self.params[b + 7].value)
    }

    fn classifier_base(&self) -> usize {
        HEAD + self.config.num_ssm_layers * PER_LAYER
    }

    pub(crate) fn classifier(&self) -> (&Array2<f64>, &Array2<f64>) {
        let b = self.classifier_base();
        (&self.params[b].value, &self.params[b + 1].value)
    }

    pub(crate) fn patch_head(&self) -> Option<(&Array2<f64>, &Array2<f64>)> {
        let b = self.classifier_base() + 2;
        self.config
            .multitask
            .then(|| (&self.params[b].value, &self.params[b + 1].value))
    }

    /// Rounds every parameter through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub(crate) fn check_bag(&self, bag: &Bag) -> Result<()> {
        bag.validate()?;
        if bag.dim() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: bag.dim(),
            });
        }
        Ok(())
    }
}

impl Trainable for MilModel {
    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn predict(&self, bag: &Bag) -> Result<Vec<f64>> {
        Ok(self.forward(bag)?.probs)
    }

    fn loss_and_grads(&self, bag: &Bag, objective: Objective) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut rec = self.record(bag, objective)?;
        let loss = rec.tape.forward()?;
        rec.tape.backward()?;
        let grads = rec.params.iter().map(|&id| rec.tape.grad(id).clone()).collect();
        Ok((loss, grads))
    }

    fn project(&mut self) {
        for l in 0..self.config.num_ssm_layers {
            let b = self.layer_base(l);
            self.params[b].value.mapv_inplace(|v| v.min(MAX_POLE_REAL));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, h: usize, n: usize) -> ModelConfig {
        ModelConfig {
            input_dim: d,
            hidden_dim: h,
            state_dim: n,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn published_parameter_counts() {
        assert_eq!(count_parameters(&cfg(1024, 512, 32)), 1_085_954);
        assert_eq!(count_parameters(&cfg(1024, 512, 128)), 1_184_258);
        assert_eq!(
            count_parameters(&cfg(1024, 512, 128)) - count_parameters(&cfg(1024, 512, 32)),
            2 * 512 * 96
        );
    }

    #[test]
    fn tiny_count_by_hand() {
        // projection 4·2+2, norm 4, ssm 2·2·2+2+2, mixing 2·4+4, classifier 2·2+2
        assert_eq!(count_parameters(&cfg(4, 2, 2)), 10 + 4 + 12 + 12 + 6);
    }

    #[test]
    fn closed_form_matches_instantiated_walk() {
        for (d, h, n, layers, multitask) in [(4, 2, 2, 1, false), (7, 3, 4, 2, true), (16, 8, 8, 3, false)] {
            let c = ModelConfig {
                num_ssm_layers: layers,
                multitask,
                num_patch_classes: 3,
                ..cfg(d, h, n)
            };
            let m = MilModel::init(c, 1).unwrap();
            assert_eq!(m.num_parameters(), count_parameters(&c));
        }
    }

    #[test]
    fn patch_head_adds_h_p_plus_p() {
        let base = cfg(10, 6, 4);
        let mt = ModelConfig {
            multitask: true,
            num_patch_classes: 3,
            ..base
        };
        assert_eq!(count_parameters(&mt) - count_parameters(&base), 6 * 3 + 3);
    }

    #[test]
    fn init_is_s4d_lin_and_deterministic() {
        let c = cfg(5, 3, 8);
        let m = MilModel::init(c, 42).unwrap();
        let w = m.ssm_weights(0);
        for h in 0..3 {
            assert_eq!((w.a_re[[h, 0]], w.a_im[[h, 0]]), (-0.5, 0.0));
            for k in 0..4 {
                assert_eq!(w.a_im[[h, k]], PI * k as f64);
                assert!(w.a_re[[h, k]] < 0.0);
            }
            assert_eq!(w.d[[0, h]], 1.0);
            let dt = w.log_dt[[0, h]].exp();
            assert!((DT_MIN..=DT_MAX * (1.0 + 1e-12)).contains(&dt));
        }
        assert_eq!(m, MilModel::init(c, 42).unwrap());
        assert_ne!(m, MilModel::init(c, 43).unwrap());
    }

    #[test]
    fn config_rules() {
        assert!(cfg(4, 2, 3).validate().is_err());
        assert!(cfg(0, 2, 2).validate().is_err());
        assert!(MilModel::init(cfg(4, 2, 3), 0).is_err());
    }

    #[test]
    fn projection_keeps_poles_strictly_stable() {
        let mut m = MilModel::init(cfg(3, 2, 2), 0).unwrap();
        let b = m.layer_base(0);
        m.params[b].value.fill(0.3);
        m.project();
        assert!(m.ssm_weights(0).a_re.iter().all(|&v| v == MAX_POLE_REAL));
    }
}
