use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Objective, Param, Trainable};
use crate::autograd::Tape;
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::ops;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Max,
}

impl std::fmt::Display for PoolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolKind::Mean => "mean",
            PoolKind::Max => "max",
        })
    }
}

/// Feature-wise pooling over the bag followed by an affine softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingBaseline {
    kind: PoolKind,
    params: Vec<Param>,
}

impl PoolingBaseline {
    pub fn init(kind: PoolKind, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidConfig("baseline dimensions must be positive".into()));
        }
        let mut r = rng::substream(seed, "init");
        let bound = 1.0 / (input_dim as f64).sqrt();
        let mut draw = |rows, cols| Array2::from_shape_fn((rows, cols), |_| r.gen_range(-bound..=bound));
        let params = vec![
            Param {
                name: "head.weight".into(),
                value: draw(input_dim, num_classes),
            },
            Param {
                name: "head.bias".into(),
                value: draw(1, num_classes),
            },
        ];
        Ok(Self { kind, params })
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    /// Pooled features as `f64`. The mean is summed in value order so any
    /// permutation of the tokens yields the same bits.
    pub fn pool(&self, bag: &Bag) -> Result<Vec<f64>> {
        bag.validate()?;
        let x = bag.features.mapv(f64::from);
        Ok(match self.kind {
            PoolKind::Mean => ops::mean_pool_rows_ordered(x.view()),
            PoolKind::Max => ops::max_pool_rows(x.view()).0,
        })
    }

    fn check(&self, bag: &Bag) -> Result<()> {
        let expected = self.params[0].value.nrows();
        if bag.dim() != expected {
            return Err(Error::DimensionMismatch { expected, got: bag.dim() });
        }
        Ok(())
    }
}

impl Trainable for PoolingBaseline {
    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn predict(&self, bag: &Bag) -> Result<Vec<f64>> {
        self.check(bag)?;
        let pooled = self.pool(bag)?;
        let (w, b) = (&self.params[0].value, &self.params[1].value);
        let logits: Vec<f64> = (0..w.ncols())
            .map(|c| b[[0, c]] + pooled.iter().enumerate().map(|(j, v)| v * w[[j, c]]).sum::<f64>())
            .collect();
        Ok(ops::softmax(&logits))
    }

    fn loss_and_grads(&self, bag: &Bag, objective: Objective) -> Result<(f64, Vec<Array2<f64>>)> {
        if objective != Objective::Slide {
            return Err(Error::InvalidConfig("pooling baselines have no patch head".into()));
        }
        self.check(bag)?;
        let pooled = self.pool(bag)?;
        let mut t = Tape::new();
        let w = t.leaf(self.params[0].value.clone());
        let b = t.leaf(self.params[1].value.clone());
        let x = t.leaf(Array2::from_shape_vec((1, pooled.len()), pooled).expect("row"));
        let z = t.matmul(x, w)?;
        let z = t.add_row(z, b)?;
        t.softmax_log_loss(z, vec![bag.slide_label])?;
        let loss = t.forward()?;
        t.backward()?;
        Ok((loss, vec![t.grad(w).clone(), t.grad(b).clone()]))
    }
}
