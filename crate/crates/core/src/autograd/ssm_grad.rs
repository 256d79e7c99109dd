//! Gradients of one SSM channel's causal convolution.
//!
//! Complex gradients use the convention `G_z = ∂L/∂Re z + i ∂L/∂Im z`. For a
//! holomorphic intermediate `q = φ(z)` this gives `G_z = G_q · conj(φ'(z))`,
//! which is all the chain rule needs here.

use crate::error::Result;
use crate::ops::in_channel;
use crate::ssm::{
    compute_kernel, Complex, Discretization, DiscretizedChannel, FftConvolver, Readout, SsmChannelParams,
    ZOH_SERIES_RADIUS,
};

/// Gradients with respect to every input of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmConvGrads {
    pub a: Vec<Complex>,
    pub c: Vec<Complex>,
    pub d: f64,
    pub log_dt: f64,
    pub u: Vec<f64>,
}

/// Derivatives of `(Ā, B̄)` with respect to `a` (holomorphic) and `dt` (real).
struct DiscretizationJacobian {
    da_bar_da: Complex,
    db_bar_da: Complex,
    da_bar_ddt: Complex,
    db_bar_ddt: Complex,
}

fn jacobian(a: Complex, dt: f64, rule: Discretization) -> DiscretizationJacobian {
    match rule {
        Discretization::Bilinear => {
            let pivot = Complex::new(1.0, 0.0) - a * (dt / 2.0);
            let inv_sq = (pivot * pivot).inv();
            DiscretizationJacobian {
                da_bar_da: inv_sq * dt,
                db_bar_da: inv_sq * (dt * dt / 2.0),
                da_bar_ddt: a * inv_sq,
                db_bar_ddt: inv_sq,
            }
        }
        Discretization::Zoh => {
            let z = a * dt;
            let a_bar = z.exp();
            let db_bar_da = if z.norm() < ZOH_SERIES_RADIUS {
                // d/da [(e^{dt a} - 1)/a] = dt² Σ (n+1) zⁿ / (n+2)!
                let s = 0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z * (1.0 / 30.0 + z / 144.0)));
                s * (dt * dt)
            } else {
                (z * a_bar - (a_bar - 1.0)) / (a * a)
            };
            DiscretizationJacobian {
                da_bar_da: a_bar * dt,
                db_bar_da,
                da_bar_ddt: a * a_bar,
                db_bar_ddt: a_bar,
            }
        }
    }
}

/// Pulls `(G_Ā, G_B̄)` back to `(G_a, ∂L/∂log_dt)`.
fn chain_discretization(
    params: &SsmChannelParams,
    rule: Discretization,
    g_a_bar: &[Complex],
    g_b_bar: &[Complex],
) -> (Vec<Complex>, f64) {
    let dt = params.dt();
    let mut d_dt = 0.0;
    let g_a = params
        .a()
        .iter()
        .zip(g_a_bar.iter().zip(g_b_bar))
        .map(|(&a, (&ga, &gb))| {
            let j = jacobian(a, dt, rule);
            d_dt += (ga.conj() * j.da_bar_ddt).re + (gb.conj() * j.db_bar_ddt).re;
            ga * j.da_bar_da.conj() + gb * j.db_bar_da.conj()
        })
        .collect();
    (g_a, d_dt * dt)
}

/// Backward pass of `y = K ∗ u + d u` through correlations.
///
/// `∂L/∂K_ℓ` is the correlation of the upstream gradient with `u`; it is
/// then pushed through `K_ℓ = 2 Re Σ_k C_k B̄_k Ā_k^ℓ` with running powers
/// and finally through the discretization map.
pub fn grad_ssm_conv(
    params: &SsmChannelParams,
    rule: Discretization,
    u: &[f64],
    upstream: &[f64],
    conv: &FftConvolver,
) -> Result<SsmConvGrads> {
    let len = u.len();
    let disc = params.discretize(rule)?;
    let kernel = compute_kernel(&disc, params.c(), len)?;

    let g_spec = conv.spectrum(upstream);
    let g_kernel = conv.correlate_spectrum(&g_spec, u);
    let mut g_u = conv.correlate_spectrum(&g_spec, kernel.values());
    g_u.iter_mut().zip(upstream).for_each(|(gu, &g)| *gu += params.d() * g);
    let g_d = upstream.iter().zip(u).map(|(g, u)| g * u).sum();

    let (g_a_bar, g_b_bar, g_c) = kernel_pullback(&disc, params.c(), &g_kernel, Readout::ConjugatePairs);
    let (g_a, g_log_dt) = chain_discretization(params, rule, &g_a_bar, &g_b_bar);
    Ok(SsmConvGrads {
        a: g_a,
        c: g_c,
        d: g_d,
        log_dt: g_log_dt,
        u: g_u,
    })
}

/// `(G_Ā, G_B̄, G_C)` given `∂L/∂K`.
fn kernel_pullback(
    disc: &DiscretizedChannel,
    c: &[Complex],
    g_kernel: &[f64],
    readout: Readout,
) -> (Vec<Complex>, Vec<Complex>, Vec<Complex>) {
    let scale = match readout {
        Readout::ConjugatePairs => 2.0,
        Readout::Single => 1.0,
    };
    let n = disc.n_half();
    let mut g_a_bar = Vec::with_capacity(n);
    let mut g_b_bar = Vec::with_capacity(n);
    let mut g_c = Vec::with_capacity(n);
    for k in 0..n {
        let z = disc.a_bar[k];
        let w = c[k] * disc.b_bar[k];
        // s1 = Σ_ℓ gK_ℓ z^ℓ, s2 = Σ_ℓ ℓ gK_ℓ z^{ℓ-1}
        let mut s1 = Complex::new(0.0, 0.0);
        let mut s2 = Complex::new(0.0, 0.0);
        let mut prev = Complex::new(0.0, 0.0);
        let mut pow = Complex::new(1.0, 0.0);
        for (l, &g) in g_kernel.iter().enumerate() {
            s1 += pow * g;
            s2 += prev * (g * l as f64);
            prev = pow;
            pow *= z;
        }
        let g_w = s1.conj() * scale;
        g_a_bar.push((w * s2).conj() * scale);
        g_c.push(g_w * disc.b_bar[k].conj());
        g_b_bar.push(g_w * c[k].conj());
    }
    (g_a_bar, g_b_bar, g_c)
}

/// Backward pass obtained by differentiating the unrolled recurrence with a
/// reverse-time adjoint. Independent of the kernel route above except for
/// the shared discretization Jacobian.
pub fn grad_ssm_recurrent(
    params: &SsmChannelParams,
    rule: Discretization,
    u: &[f64],
    upstream: &[f64],
) -> Result<SsmConvGrads> {
    let len = u.len();
    let disc = params.discretize(rule)?;
    let n = disc.n_half();
    let c = params.c();

    // Forward states x_t, t = 0..L-1.
    let mut states = vec![Complex::new(0.0, 0.0); len * n];
    let mut x = vec![Complex::new(0.0, 0.0); n];
    for t in 0..len {
        for k in 0..n {
            x[k] = disc.a_bar[k] * x[k] + disc.b_bar[k] * u[t];
        }
        states[t * n..(t + 1) * n].copy_from_slice(&x);
    }

    let mut g_c = vec![Complex::new(0.0, 0.0); n];
    let mut g_a_bar = vec![Complex::new(0.0, 0.0); n];
    let mut g_b_bar = vec![Complex::new(0.0, 0.0); n];
    let mut g_u = vec![0.0; len];
    let mut lambda = vec![Complex::new(0.0, 0.0); n];
    for t in (0..len).rev() {
        let g = upstream[t];
        let mut gu = params.d() * g;
        for k in 0..n {
            let xt = states[t * n + k];
            lambda[k] = c[k].conj() * (2.0 * g) + disc.a_bar[k].conj() * lambda[k];
            g_c[k] += xt.conj() * (2.0 * g);
            if t > 0 {
                g_a_bar[k] += lambda[k] * states[(t - 1) * n + k].conj();
            }
            g_b_bar[k] += lambda[k] * u[t];
            gu += (lambda[k].conj() * disc.b_bar[k]).re;
        }
        g_u[t] = gu;
    }
    let g_d = upstream.iter().zip(u).map(|(g, u)| g * u).sum();
    let (g_a, g_log_dt) = chain_discretization(params, rule, &g_a_bar, &g_b_bar);
    Ok(SsmConvGrads {
        a: g_a,
        c: g_c,
        d: g_d,
        log_dt: g_log_dt,
        u: g_u,
    })
}

/// Channel-indexed wrapper used by the tape.
pub(crate) fn grad_channel(
    params: &SsmChannelParams,
    rule: Discretization,
    u: &[f64],
    upstream: &[f64],
    conv: &FftConvolver,
    channel: usize,
) -> Result<SsmConvGrads> {
    grad_ssm_conv(params, rule, u, upstream, conv).map_err(|e| in_channel(e, channel))
}
