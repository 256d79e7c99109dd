//! The training forward pass, recorded on a tape.

use ndarray::Array2;

use super::{MilModel, Trainable};
use crate::autograd::{NodeId, SsmConvInputs, Tape};
use crate::data::Bag;
use crate::error::{Error, Result};

/// What a bag's loss is made of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Negative log-probability of the slide label.
    Slide,
    /// Slide term plus `lambda` times the mean per-patch negative
    /// log-probability.
    Multitask { lambda: f64 },
}

/// A recorded bag: the tape, the leaf of every parameter in declaration
/// order, and the nodes of interest.
pub struct Recorded {
    pub tape: Tape,
    pub params: Vec<NodeId>,
    pub input: NodeId,
    pub logits: NodeId,
    pub patch_logits: Option<NodeId>,
}

impl MilModel {
    pub fn record(&self, bag: &Bag, objective: Objective) -> Result<Recorded> {
        self.check_bag(bag)?;
        let cfg = self.config;
        let mut t = Tape::new();
        let p: Vec<NodeId> = self.params().iter().map(|p| t.leaf(p.value.clone())).collect();
        let input = t.leaf(bag.features.mapv(f64::from));

        let x = t.matmul(input, p[0])?;
        let x = t.add_row(x, p[1])?;
        let mut x = t.layer_norm(x, p[2], p[3])?;
        let h = cfg.hidden_dim;
        for l in 0..cfg.num_ssm_layers {
            let b = self.layer_base(l);
            let y = t.ssm_conv(SsmConvInputs {
                x,
                a_re: p[b],
                a_im: p[b + 1],
                c_re: p[b + 2],
                c_im: p[b + 3],
                d: p[b + 4],
                log_dt: p[b + 5],
                rule: cfg.discretization,
            })?;
            let z = t.matmul(y, p[b + 6])?;
            let z = t.add_row(z, p[b + 7])?;
            let value = t.slice_cols(z, 0, h)?;
            let gate = t.slice_cols(z, h, 2 * h)?;
            let gate = t.sigmoid(gate);
            x = t.mul(value, gate)?;
        }

        let cb = self.classifier_base();
        let patch_logits = if cfg.multitask {
            let z = t.matmul(x, p[cb + 2])?;
            Some(t.add_row(z, p[cb + 3])?)
        } else {
            None
        };
        let pooled = t.max_pool(x)?;
        let logits = t.matmul(pooled, p[cb])?;
        let logits = t.add_row(logits, p[cb + 1])?;

        let slide = t.softmax_log_loss(logits, vec![bag.slide_label])?;
        if let Objective::Multitask { lambda } = objective {
            let patch = patch_logits
                .ok_or_else(|| Error::InvalidConfig("multitask objective needs a model with a patch head".into()))?;
            let labels = bag
                .patch_labels
                .clone()
                .ok_or_else(|| Error::ContractViolation(format!("bag `{}` has no patch labels", bag.id)))?;
            let patch_loss = t.softmax_log_loss(patch, labels)?;
            let weighted = t.scale(patch_loss, lambda);
            t.add(slide, weighted)?;
        }
        Ok(Recorded {
            tape: t,
            params: p,
            input,
            logits,
            patch_logits,
        })
    }
}

impl Recorded {
    /// Logits of the latest forward pass as a plain vector.
    pub fn logits(&self) -> Vec<f64> {
        self.tape.value(self.logits).iter().copied().collect()
    }

    pub fn grads(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|&id| self.tape.grad(id).clone()).collect()
    }
}
