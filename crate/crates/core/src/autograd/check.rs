//! Central finite-difference verification of tape gradients.

use super::{NodeId, Tape};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Analytic gradients smaller than this are judged by `abs_tol` instead.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            abs_floor: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        if analytic.abs() < self.abs_floor {
            diff <= self.abs_tol
        } else {
            diff <= self.rel_tol * analytic.abs().max(numeric.abs())
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

impl GradCheckEntry {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    /// Worst relative error among entries judged relatively.
    pub fn worst_relative_error(&self, cfg: &GradCheckConfig) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.analytic.abs() >= cfg.abs_floor)
            .map(GradCheckEntry::relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst_absolute_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| (e.analytic - e.numeric).abs())
            .fold(0.0, f64::max)
    }
}

/// Compares the tape's analytic gradient for every scalar in `leaves` with a
/// central difference of the final scalar node. Leaves are restored exactly
/// afterwards.
pub fn check_gradients(tape: &mut Tape, leaves: &[(String, NodeId)], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    tape.forward()?;
    tape.backward()?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|(_, id)| tape.grad(*id).iter().copied().collect()).collect();

    let mut report = GradCheckReport::default();
    for ((name, id), grads) in leaves.iter().zip(analytic) {
        for (index, analytic) in grads.into_iter().enumerate() {
            let original = tape.leaf_value_mut(*id).as_slice_mut().expect("standard layout")[index];
            tape.leaf_value_mut(*id).as_slice_mut().expect("standard layout")[index] = original + cfg.step;
            let plus = tape.forward()?;
            tape.leaf_value_mut(*id).as_slice_mut().expect("standard layout")[index] = original - cfg.step;
            let minus = tape.forward()?;
            tape.leaf_value_mut(*id).as_slice_mut().expect("standard layout")[index] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.entries.push(GradCheckEntry {
                name: name.clone(),
                index,
                analytic,
                numeric,
                passed: cfg.accepts(analytic, numeric),
            });
        }
    }
    tape.forward()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::{SsmConvInputs, Tensor};
    use super::*;
    use crate::ssm::Discretization;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
    }

    /// Reduces `out` to a scalar with fixed random weights so every output
    /// entry receives a distinct upstream gradient.
    fn weighted_sum(tape: &mut Tape, rng: &mut ChaCha8Rng, out: NodeId) {
        let (r, c) = tape.shape(out);
        let w = tape.leaf(random(rng, r, c, -1.0, 1.0));
        let m = tape.mul(out, w).unwrap();
        tape.sum(m);
    }

    fn assert_check(tape: &mut Tape, leaves: &[(String, NodeId)]) {
        let cfg = GradCheckConfig::default();
        let report = check_gradients(tape, leaves, &cfg).unwrap();
        let bad: Vec<_> = report.failures().collect();
        assert!(bad.is_empty(), "failures: {bad:?}");
    }

    fn unary(build: impl Fn(&mut Tape, NodeId) -> NodeId, lo: f64, hi: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, 3, 4, lo, hi));
        let y = build(&mut tape, x);
        weighted_sum(&mut tape, &mut rng, y);
        assert_check(&mut tape, &[("x".into(), x)]);
    }

    #[test]
    fn elementwise_ops() {
        unary(|t, x| t.sigmoid(x), -3.0, 3.0);
        unary(|t, x| t.exp(x), -2.0, 2.0);
        unary(|t, x| t.log(x), 0.5, 3.0);
        unary(|t, x| t.scale(x, -2.5), -1.0, 1.0);
        unary(|t, x| t.slice_cols(x, 1, 3).unwrap(), -1.0, 1.0);
        unary(|t, x| t.max_pool(x).unwrap(), -1.0, 1.0);
        unary(|t, x| t.mean_pool(x).unwrap(), -1.0, 1.0);
        unary(|t, x| t.sum(x), -1.0, 1.0);
    }

    #[test]
    fn binary_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, 5, 3, -1.0, 1.0));
        let w = tape.leaf(random(&mut rng, 3, 4, -1.0, 1.0));
        let b = tape.leaf(random(&mut rng, 1, 4, -1.0, 1.0));
        let y = tape.leaf(random(&mut rng, 5, 4, -1.0, 1.0));
        let xw = tape.matmul(x, w).unwrap();
        let xwb = tape.add_row(xw, b).unwrap();
        let prod = tape.mul(xwb, y).unwrap();
        let total = tape.add(prod, xwb).unwrap();
        weighted_sum(&mut tape, &mut rng, total);
        assert_check(&mut tape, &[("x".into(), x), ("w".into(), w), ("b".into(), b), ("y".into(), y)]);
    }

    #[test]
    fn layer_norm_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, 4, 6, -2.0, 2.0));
        let g = tape.leaf(random(&mut rng, 1, 6, 0.5, 1.5));
        let b = tape.leaf(random(&mut rng, 1, 6, -0.5, 0.5));
        let y = tape.layer_norm(x, g, b).unwrap();
        weighted_sum(&mut tape, &mut rng, y);
        assert_check(&mut tape, &[("x".into(), x), ("gamma".into(), g), ("beta".into(), b)]);
    }

    #[test]
    fn softmax_log_loss_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut tape = Tape::new();
        let z = tape.leaf(random(&mut rng, 5, 3, -2.0, 2.0));
        tape.softmax_log_loss(z, vec![0, 2, 1, 1, 0]).unwrap();
        assert_check(&mut tape, &[("z".into(), z)]);
    }

    fn ssm_case(rule: Discretization, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (len, h, n_half) = (12, 3, 2);
        let mut tape = Tape::new();
        let x = tape.leaf(random(&mut rng, len, h, -1.0, 1.0));
        let a_re = tape.leaf(random(&mut rng, h, n_half, -1.0, -0.2));
        let a_im = tape.leaf(random(&mut rng, h, n_half, -3.0, 3.0));
        let c_re = tape.leaf(random(&mut rng, h, n_half, -1.0, 1.0));
        let c_im = tape.leaf(random(&mut rng, h, n_half, -1.0, 1.0));
        let d = tape.leaf(random(&mut rng, 1, h, -1.0, 1.0));
        let log_dt = tape.leaf(random(&mut rng, 1, h, -3.0, -0.5));
        let y = tape
            .ssm_conv(SsmConvInputs {
                x,
                a_re,
                a_im,
                c_re,
                c_im,
                d,
                log_dt,
                rule,
            })
            .unwrap();
        weighted_sum(&mut tape, &mut rng, y);
        let leaves: Vec<(String, NodeId)> = [
            ("x", x),
            ("a_re", a_re),
            ("a_im", a_im),
            ("c_re", c_re),
            ("c_im", c_im),
            ("d", d),
            ("log_dt", log_dt),
        ]
        .into_iter()
        .map(|(n, id)| (n.to_string(), id))
        .collect();
        assert_check(&mut tape, &leaves);
    }

    #[test]
    fn ssm_conv_op() {
        ssm_case(Discretization::Bilinear, 21);
        ssm_case(Discretization::Zoh, 22);
    }

    #[test]
    fn check_restores_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut tape = Tape::new();
        let before = random(&mut rng, 2, 2, -1.0, 1.0);
        let x = tape.leaf(before.clone());
        let e = tape.exp(x);
        tape.sum(e);
        check_gradients(&mut tape, &[("x".into(), x)], &GradCheckConfig::default()).unwrap();
        assert_eq!(tape.value(x), &before);
    }

    #[test]
    fn detects_wrong_gradient() {
        let cfg = GradCheckConfig::default();
        assert!(cfg.accepts(1.0, 1.00001));
        assert!(!cfg.accepts(1.0, 1.001));
        assert!(cfg.accepts(1e-6, 1e-6 + 5e-8));
        assert!(!cfg.accepts(1e-6, 1e-6 + 5e-7));
    }
}
