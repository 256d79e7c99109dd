use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

use super::{Complex, KernelCache};
use crate::error::{Error, Result};

/// Planned real FFTs for causal convolution and correlation of length-`len`
/// sequences. The transform size is the next power of two at or above
/// `2 * len`, so circular wrap-around never reaches the first `len` outputs.
///
/// Plans are shared (`Arc`) and the convolver is `Send + Sync`; scratch
/// buffers are allocated per call.
#[derive(Clone)]
pub struct FftConvolver {
    len: usize,
    fft_len: usize,
    forward: Arc<dyn RealToComplex<f64>>,
    inverse: Arc<dyn ComplexToReal<f64>>,
}

impl std::fmt::Debug for FftConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftConvolver")
            .field("len", &self.len)
            .field("fft_len", &self.fft_len)
            .finish()
    }
}

impl FftConvolver {
    pub fn new(len: usize) -> Self {
        let fft_len = (2 * len.max(1)).next_power_of_two();
        let mut planner = RealFftPlanner::<f64>::new();
        Self {
            len,
            fft_len,
            forward: planner.plan_fft_forward(fft_len),
            inverse: planner.plan_fft_inverse(fft_len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fft_len(&self) -> usize {
        self.fft_len
    }

    /// Spectrum of `x` zero-padded to the transform size.
    pub fn spectrum(&self, x: &[f64]) -> Vec<Complex> {
        debug_assert!(x.len() <= self.len);
        let mut buf = vec![0.0; self.fft_len];
        buf[..x.len()].copy_from_slice(x);
        let mut out = self.forward.make_output_vec();
        self.forward
            .process(&mut buf, &mut out)
            .expect("buffer sizes come from the plan");
        out
    }

    fn invert(&self, mut spec: Vec<Complex>) -> Vec<f64> {
        // The first and last bins of a real signal's spectrum are real.
        spec[0].im = 0.0;
        let last = spec.len() - 1;
        spec[last].im = 0.0;
        let mut out = self.inverse.make_output_vec();
        self.inverse
            .process(&mut spec, &mut out)
            .expect("buffer sizes come from the plan");
        let scale = 1.0 / self.fft_len as f64;
        out.truncate(self.len);
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    /// `y_t = Σ_{s<=t} k_s u_{t-s}` for `t < len`.
    pub fn causal_conv(&self, kernel: &[f64], u: &[f64]) -> Vec<f64> {
        let ks = self.spectrum(kernel);
        self.causal_conv_spectrum(&ks, u)
    }

    /// Convolution with a precomputed kernel spectrum.
    pub fn causal_conv_spectrum(&self, kernel_spectrum: &[Complex], u: &[f64]) -> Vec<f64> {
        let mut us = self.spectrum(u);
        us.iter_mut().zip(kernel_spectrum).for_each(|(a, b)| *a *= b);
        self.invert(us)
    }

    /// `r_ℓ = Σ_t g_{t+ℓ} x_t` for `ℓ < len`.
    pub fn correlate(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let gs = self.spectrum(g);
        self.correlate_spectrum(&gs, x)
    }

    /// Correlation with a precomputed spectrum of the leading sequence.
    pub fn correlate_spectrum(&self, g_spectrum: &[Complex], x: &[f64]) -> Vec<f64> {
        let mut xs = self.spectrum(x);
        xs.iter_mut().zip(g_spectrum).for_each(|(a, b)| *a = b * a.conj());
        self.invert(xs)
    }
}

fn check_lengths(kernel: &KernelCache, u: &[f64]) -> Result<()> {
    if kernel.len() != u.len() {
        return Err(Error::ContractViolation(format!(
            "kernel length {} does not match input length {}",
            kernel.len(),
            u.len()
        )));
    }
    Ok(())
}

/// `y = K ∗ u + d u` through zero-padded FFTs.
pub fn convolve(kernel: &KernelCache, u: &[f64], d: f64) -> Result<Vec<f64>> {
    check_lengths(kernel, u)?;
    let conv = FftConvolver::new(u.len());
    let mut y = conv.causal_conv(kernel.values(), u);
    y.iter_mut().zip(u).for_each(|(y, &u)| *y += d * u);
    Ok(y)
}

/// Direct O(L²) form of [`convolve`].
pub fn convolve_direct(kernel: &KernelCache, u: &[f64], d: f64) -> Result<Vec<f64>> {
    check_lengths(kernel, u)?;
    let k = kernel.values();
    Ok((0..u.len())
        .map(|t| (0..=t).map(|s| k[s] * u[t - s]).sum::<f64>() + d * u[t])
        .collect())
}

/// Direct O(L²) form of [`FftConvolver::correlate`].
pub fn correlate_direct(g: &[f64], x: &[f64]) -> Vec<f64> {
    let len = g.len();
    (0..len)
        .map(|l| (0..len - l).map(|t| g[t + l] * x[t]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn impulse_returns_kernel() {
        let k = KernelCache::from_values(vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        let y = convolve(&k, &[1.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        assert!(max_rel(&y, k.values()) < 1e-14);
    }

    #[test]
    fn hand_convolution_with_skip() {
        let k = KernelCache::from_values(vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let u = [1.0; 4];
        assert_eq!(convolve_direct(&k, &u, 1.0).unwrap(), vec![2.0, 3.0, 3.0, 3.0]);
        assert!(max_rel(&convolve(&k, &u, 1.0).unwrap(), &[2.0, 3.0, 3.0, 3.0]) < 1e-14);
    }

    #[test]
    fn length_mismatch_is_contract_violation() {
        let k = KernelCache::from_values(vec![1.0, 2.0]).unwrap();
        assert!(matches!(convolve(&k, &[1.0], 0.0), Err(Error::ContractViolation(_))));
        assert!(matches!(convolve_direct(&k, &[1.0, 2.0, 3.0], 0.0), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn fft_path_matches_direct_at_padding_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [1, 2, 3, 127, 128, 129, 257, 1000] {
            let k = KernelCache::from_values(random(&mut rng, len)).unwrap();
            let u = random(&mut rng, len);
            let fast = convolve(&k, &u, 0.25).unwrap();
            let slow = convolve_direct(&k, &u, 0.25).unwrap();
            assert!(max_rel(&fast, &slow) <= 1e-6, "len {len}");
        }
    }

    #[test]
    fn correlation_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for len in [1, 2, 5, 64, 129] {
            let g = random(&mut rng, len);
            let x = random(&mut rng, len);
            let fast = FftConvolver::new(len).correlate(&g, &x);
            assert!(max_rel(&fast, &correlate_direct(&g, &x)) < 1e-12, "len {len}");
        }
    }

    proptest! {
        #[test]
        fn convolution_is_linear(seed in any::<u64>(), len in 1usize..200, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = KernelCache::from_values(random(&mut rng, len)).unwrap();
            let u = random(&mut rng, len);
            let v = random(&mut rng, len);
            let d = rng.gen_range(-1.0..1.0);
            let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = convolve(&k, &mix, d).unwrap();
            let yu = convolve(&k, &u, d).unwrap();
            let yv = convolve(&k, &v, d).unwrap();
            let rhs: Vec<f64> = yu.iter().zip(&yv).map(|(a, b)| alpha * a + beta * b).collect();
            prop_assert!(max_rel(&lhs, &rhs) < 1e-10);
        }
    }
}
