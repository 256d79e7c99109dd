//! Bag-level log losses evaluated on probabilities.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// How many referenced probabilities had to be clamped.
    pub floor_events: usize,
}

fn log_prob(probs: &[f64], label: usize, floor_events: &mut usize) -> Result<f64> {
    let p = *probs.get(label).ok_or_else(|| {
        Error::ContractViolation(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    if p < PROB_FLOOR {
        *floor_events += 1;
        Ok(PROB_FLOOR.ln())
    } else {
        Ok(p.ln())
    }
}

/// Shared by both losses so the slide term is computed identically.
/// `patch_term(m)` returns the already weighted per-bag patch contribution.
fn bag_mean(
    slide_probs: &[Vec<f64>],
    slide_labels: &[usize],
    mut patch_term: impl FnMut(usize, &mut usize) -> Result<f64>,
) -> Result<LossValue> {
    if slide_probs.is_empty() {
        return Err(Error::EmptyInput("loss over zero bags"));
    }
    if slide_probs.len() != slide_labels.len() {
        return Err(Error::DimensionMismatch {
            expected: slide_probs.len(),
            got: slide_labels.len(),
        });
    }
    let mut floor_events = 0;
    let mut total = 0.0;
    for (m, (probs, &label)) in slide_probs.iter().zip(slide_labels).enumerate() {
        let slide = log_prob(probs, label, &mut floor_events)?;
        total += slide + patch_term(m, &mut floor_events)?;
    }
    Ok(LossValue {
        value: (0.0 - total) / slide_probs.len() as f64,
        floor_events,
    })
}

/// Mean negative log-probability of each bag's label.
pub fn mil_loss(slide_probs: &[Vec<f64>], slide_labels: &[usize]) -> Result<LossValue> {
    bag_mean(slide_probs, slide_labels, |_, _| Ok(0.0))
}

/// Slide loss plus, per bag, `lambda / L` times the summed patch
/// log-probabilities. `patch_probs[m]` is `L_m × patch classes`.
pub fn multitask_loss(
    slide_probs: &[Vec<f64>],
    slide_labels: &[usize],
    patch_probs: &[Array2<f64>],
    patch_labels: &[Vec<usize>],
    lambda: f64,
) -> Result<LossValue> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
    }
    for (name, n) in [("patch probabilities", patch_probs.len()), ("patch labels", patch_labels.len())] {
        if n != slide_probs.len() {
            return Err(Error::ContractViolation(format!(
                "{n} {name} for {} bags",
                slide_probs.len()
            )));
        }
    }
    bag_mean(slide_probs, slide_labels, |m, floor_events| {
        let (probs, labels) = (&patch_probs[m], &patch_labels[m]);
        if probs.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: probs.nrows(),
                got: labels.len(),
            });
        }
        let mut sum = 0.0;
        for (row, &c) in probs.outer_iter().zip(labels) {
            sum += log_prob(row.as_slice().expect("standard layout"), c, floor_events)?;
        }
        Ok(lambda / labels.len() as f64 * sum)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::LN_2;

    #[test]
    fn hand_values() {
        assert_eq!(mil_loss(&[vec![0.0, 1.0]], &[1]).unwrap().value, 0.0);
        assert!((mil_loss(&[vec![0.5, 0.5]], &[0]).unwrap().value - LN_2).abs() < 1e-15);
        let two = mil_loss(&[vec![1.0, 0.0], vec![0.5, 0.5]], &[0, 1]).unwrap().value;
        assert!((two - LN_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn multitask_hand_value() {
        let v = multitask_loss(&[vec![0.0, 1.0]], &[1], &[array![[0.0, 1.0], [0.5, 0.5]]], &[vec![1, 0]], 5.0)
            .unwrap()
            .value;
        assert!((v - 2.5 * LN_2).abs() < 1e-15, "{v}");
        let perfect = multitask_loss(&[vec![1.0]], &[0], &[array![[1.0], [1.0]]], &[vec![0, 0]], 3.0).unwrap();
        assert_eq!(perfect.value, 0.0);
    }

    #[test]
    fn zero_lambda_is_bitwise_mil() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let m = rng.gen_range(1..8);
            let mut probs = Vec::new();
            let mut patches = Vec::new();
            let mut patch_labels = Vec::new();
            for _ in 0..m {
                let p = rng.gen_range(0.0..1.0);
                probs.push(vec![p, 1.0 - p]);
                let l = rng.gen_range(1..6);
                patches.push(Array2::from_shape_fn((l, 2), |(_, j)| if j == 0 { 0.3 } else { 0.7 }));
                patch_labels.push((0..l).map(|_| rng.gen_range(0..2)).collect());
            }
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..2)).collect();
            let a = mil_loss(&probs, &labels).unwrap().value;
            let b = multitask_loss(&probs, &labels, &patches, &patch_labels, 0.0).unwrap().value;
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn floor_is_counted() {
        let v = mil_loss(&[vec![1.0, 0.0]], &[1]).unwrap();
        assert_eq!(v.floor_events, 1);
        assert!((v.value + PROB_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(mil_loss(&[vec![0.4, 0.6]], &[1]).unwrap().floor_events, 0);
    }

    #[test]
    fn contract_errors() {
        assert!(mil_loss(&[], &[]).is_err());
        assert!(mil_loss(&[vec![1.0]], &[1]).is_err());
        assert!(multitask_loss(&[vec![1.0]], &[0], &[array![[1.0]]], &[vec![0, 0]], 1.0).is_err());
        assert!(multitask_loss(&[vec![1.0]], &[0], &[array![[1.0]]], &[vec![0]], -1.0).is_err());
    }
}
