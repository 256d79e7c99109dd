//! Diagonal state space mathematics.
//!
//! A channel is a single-input single-output system with a diagonal complex
//! state matrix. Poles come in conjugate pairs; only one member of each pair
//! is stored, and outputs take twice the real part so that real inputs give
//! real outputs. The input matrix is fixed to all ones.
//!
//! Two evaluation routes are provided and must agree:
//!
//! * the recurrence `x_t = Ā x_{t-1} + B̄ u_t`, `y_t = 2 Re(C x_t) + D u_t`
//!   ([`run_recurrence`]);
//! * the causal convolution `y = K ∗ u + D u` with the kernel
//!   `K_ℓ = 2 Re Σ_k C_k Ā_k^ℓ B̄_k` ([`compute_kernel`], [`convolve`]).

mod conv;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{convolve, convolve_direct, correlate_direct, FftConvolver};
pub use num_complex::Complex64 as Complex;

/// Pivot magnitude below which the bilinear map is treated as singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;

/// Rule used to map continuous-time poles to discrete time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// Tustin / bilinear transform.
    #[default]
    Bilinear,
    /// Zero-order hold.
    Zoh,
}

impl std::fmt::Display for Discretization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Discretization::Bilinear => f.write_str("bilinear"),
            Discretization::Zoh => f.write_str("zoh"),
        }
    }
}

/// How the complex state is read out to a real output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Each stored pole stands for a conjugate pair: `y = 2 Re(C x)`.
    ConjugatePairs,
    /// Each stored pole stands alone: `y = Re(C x)`. Used to exercise
    /// scalar systems in tests.
    Single,
}

impl Readout {
    fn scale(self) -> f64 {
        match self {
            Readout::ConjugatePairs => 2.0,
            Readout::Single => 1.0,
        }
    }
}

/// Continuous-time parameters of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmChannelParams {
    a: Vec<Complex>,
    c: Vec<Complex>,
    d: f64,
    log_dt: f64,
}

impl SsmChannelParams {
    /// Validates and builds a channel.
    ///
    /// Poles must satisfy `Re(a) <= 0`; the marginal case `Re(a) = 0` is
    /// admitted because the zero pole is the identity limit of both
    /// discretization rules. The timestep `exp(log_dt)` must be finite and
    /// strictly positive.
    pub fn new(a: Vec<Complex>, c: Vec<Complex>, d: f64, log_dt: f64) -> Result<Self> {
        if a.len() != c.len() {
            return Err(Error::InvalidParameters(format!(
                "{} poles but {} output weights",
                a.len(),
                c.len()
            )));
        }
        let dt = log_dt.exp();
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidParameters(format!(
                "timestep exp({log_dt}) = {dt} is not a positive finite number"
            )));
        }
        if !d.is_finite() {
            return Err(Error::InvalidParameters("feedthrough d is not finite".into()));
        }
        for (k, ak) in a.iter().enumerate() {
            if !(ak.re.is_finite() && ak.im.is_finite()) || ak.re > 0.0 {
                return Err(Error::InvalidParameters(format!(
                    "pole {k} = {ak} is unstable or non-finite"
                )));
            }
        }
        if c.iter().any(|ck| !(ck.re.is_finite() && ck.im.is_finite())) {
            return Err(Error::InvalidParameters("output weights contain non-finite values".into()));
        }
        Ok(Self { a, c, d, log_dt })
    }

    /// Same as [`SsmChannelParams::new`] with the timestep given directly.
    pub fn with_timestep(a: Vec<Complex>, c: Vec<Complex>, d: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameters(format!("timestep {dt} must be positive")));
        }
        Self::new(a, c, d, dt.ln())
    }

    pub fn a(&self) -> &[Complex] {
        &self.a
    }

    pub fn c(&self) -> &[Complex] {
        &self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn log_dt(&self) -> f64 {
        self.log_dt
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }

    /// Number of stored poles (half the state dimension).
    pub fn n_half(&self) -> usize {
        self.a.len()
    }

    pub fn is_strictly_stable(&self) -> bool {
        self.a.iter().all(|a| a.re < 0.0)
    }

    pub fn discretize(&self, rule: Discretization) -> Result<DiscretizedChannel> {
        match rule {
            Discretization::Bilinear => discretize_bilinear(self),
            Discretization::Zoh => Ok(discretize_zoh(self)),
        }
    }
}

/// Discrete-time diagonal system: `Ā` and `B̄` per stored pole.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedChannel {
    pub a_bar: Vec<Complex>,
    pub b_bar: Vec<Complex>,
}

impl DiscretizedChannel {
    pub fn new(a_bar: Vec<Complex>, b_bar: Vec<Complex>) -> Result<Self> {
        if a_bar.len() != b_bar.len() {
            return Err(Error::ContractViolation(format!(
                "a_bar has {} entries, b_bar has {}",
                a_bar.len(),
                b_bar.len()
            )));
        }
        Ok(Self { a_bar, b_bar })
    }

    pub fn n_half(&self) -> usize {
        self.a_bar.len()
    }

    /// Largest pole modulus, the decay rate of the kernel.
    pub fn spectral_radius(&self) -> f64 {
        self.a_bar.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// Bilinear map of a single pole. `None` when the pivot `1 - dt a / 2` is
/// numerically zero.
pub fn bilinear_pole(a: Complex, dt: f64) -> Option<(Complex, Complex)> {
    let half = a * (dt / 2.0);
    let pivot = Complex::new(1.0, 0.0) - half;
    if pivot.norm() < SINGULAR_PIVOT {
        return None;
    }
    let inv = pivot.inv();
    Some((inv * (Complex::new(1.0, 0.0) + half), inv * dt))
}

/// Below this `|dt·a|`, ZOH quantities are evaluated by Taylor series to
/// avoid cancellation in `exp(dt a) - 1`.
pub(crate) const ZOH_SERIES_RADIUS: f64 = 1e-3;

/// Zero-order-hold map of a single pole, with the `a -> 0` limit `B̄ = dt`.
pub fn zoh_pole(a: Complex, dt: f64) -> (Complex, Complex) {
    let z = a * dt;
    let a_bar = z.exp();
    let b_bar = if a.norm() < SINGULAR_PIVOT {
        Complex::new(dt, 0.0)
    } else if z.norm() < ZOH_SERIES_RADIUS {
        // (e^z - 1)/z = 1 + z/2 + z²/6 + z³/24 + z⁴/120 + ...
        let series = 1.0 + z * (1.0 / 2.0 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0)));
        series * dt
    } else {
        (a_bar - 1.0) / a
    };
    (a_bar, b_bar)
}

pub fn discretize_bilinear(params: &SsmChannelParams) -> Result<DiscretizedChannel> {
    let dt = params.dt();
    let mut a_bar = Vec::with_capacity(params.n_half());
    let mut b_bar = Vec::with_capacity(params.n_half());
    for (index, &a) in params.a.iter().enumerate() {
        let (ab, bb) = bilinear_pole(a, dt).ok_or(Error::NumericalSingularity {
            channel: 0,
            index,
            pivot: (Complex::new(1.0, 0.0) - a * (dt / 2.0)).norm(),
        })?;
        a_bar.push(ab);
        b_bar.push(bb);
    }
    Ok(DiscretizedChannel { a_bar, b_bar })
}

pub fn discretize_zoh(params: &SsmChannelParams) -> DiscretizedChannel {
    let dt = params.dt();
    let (a_bar, b_bar) = params.a.iter().map(|&a| zoh_pole(a, dt)).unzip();
    DiscretizedChannel { a_bar, b_bar }
}

/// Materialized convolution kernel of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCache {
    values: Vec<f64>,
}

impl KernelCache {
    /// Wraps explicit kernel values (length must be at least one).
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::ContractViolation("kernel length must be >= 1".into()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn compute_kernel(disc: &DiscretizedChannel, c: &[Complex], length: usize) -> Result<KernelCache> {
    compute_kernel_with(disc, c, length, Readout::ConjugatePairs)
}

/// Tokens per block in [`compute_kernel_with`].
const KERNEL_BLOCK: usize = 64;

/// Vandermonde evaluation `K_ℓ = s Re Σ_k (C_k B̄_k) Ā_k^ℓ`, O(n_half · L).
///
/// Writing `ℓ = jB + r`, the kernel is `Re(P W)` with `P[j,k] = Ā_k^{jB}`
/// and `W[k,r] = C_k B̄_k Ā_k^r`, so the bulk of the work is two real
/// matrix products. Powers come from running products of at most
/// `max(B, L/B)` factors.
pub fn compute_kernel_with(
    disc: &DiscretizedChannel,
    c: &[Complex],
    length: usize,
    readout: Readout,
) -> Result<KernelCache> {
    if length == 0 {
        return Err(Error::ContractViolation("kernel length must be >= 1".into()));
    }
    if c.len() != disc.n_half() {
        return Err(Error::ContractViolation(format!(
            "{} output weights for {} poles",
            c.len(),
            disc.n_half()
        )));
    }
    let n = disc.n_half();
    let block = KERNEL_BLOCK.min(length);
    let blocks = length.div_ceil(block);

    let mut w_re = Array2::<f64>::zeros((n, block));
    let mut w_im = Array2::<f64>::zeros((n, block));
    let mut stride = Vec::with_capacity(n);
    for k in 0..n {
        let a = disc.a_bar[k];
        let mut s = c[k] * disc.b_bar[k];
        for r in 0..block {
            w_re[[k, r]] = s.re;
            w_im[[k, r]] = s.im;
            s *= a;
        }
        stride.push(a.powu(block as u32));
    }
    let mut p_re = Array2::<f64>::zeros((blocks, n));
    let mut p_im = Array2::<f64>::zeros((blocks, n));
    for (k, &step) in stride.iter().enumerate() {
        let mut p = Complex::new(1.0, 0.0);
        for j in 0..blocks {
            p_re[[j, k]] = p.re;
            p_im[[j, k]] = p.im;
            p *= step;
        }
    }
    let mut grid = p_re.dot(&w_re);
    grid.scaled_add(-1.0, &p_im.dot(&w_im));
    let scale = readout.scale();
    let mut values: Vec<f64> = grid.into_iter().take(length).collect();
    values.iter_mut().for_each(|v| *v *= scale);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalOverflow(format!(
            "kernel of length {length} contains non-finite values"
        )));
    }
    Ok(KernelCache { values })
}

pub fn run_recurrence(disc: &DiscretizedChannel, c: &[Complex], d: f64, u: &[f64]) -> Result<Vec<f64>> {
    run_recurrence_with(disc, c, d, u, Readout::ConjugatePairs)
}

/// Unrolls `x_t = Ā x_{t-1} + B̄ u_t` from a zero state.
pub fn run_recurrence_with(
    disc: &DiscretizedChannel,
    c: &[Complex],
    d: f64,
    u: &[f64],
    readout: Readout,
) -> Result<Vec<f64>> {
    if c.len() != disc.n_half() {
        return Err(Error::ContractViolation(format!(
            "{} output weights for {} poles",
            c.len(),
            disc.n_half()
        )));
    }
    let mut state = RecurrentState::new(disc.n_half());
    Ok(u.iter()
        .map(|&ut| state.step(disc, c, d, ut, readout))
        .collect())
}

/// Hidden state of one channel for token-by-token evaluation.
#[derive(Debug, Clone)]
pub struct RecurrentState {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl RecurrentState {
    pub fn new(n_half: usize) -> Self {
        Self {
            re: vec![0.0; n_half],
            im: vec![0.0; n_half],
        }
    }

    pub fn state(&self) -> Vec<Complex> {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex::new(r, i)).collect()
    }

    /// Advances by one input sample and returns the output sample.
    #[inline]
    pub fn step(&mut self, disc: &DiscretizedChannel, c: &[Complex], d: f64, u: f64, readout: Readout) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.re.len() {
            let a = disc.a_bar[k];
            let b = disc.b_bar[k];
            let re = a.re * self.re[k] - a.im * self.im[k] + b.re * u;
            let im = a.re * self.im[k] + a.im * self.re[k] + b.im * u;
            self.re[k] = re;
            self.im[k] = im;
            acc += c[k].re * re - c[k].im * im;
        }
        readout.scale() * acc + d * u
    }
}
