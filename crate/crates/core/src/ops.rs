//! Numeric kernels shared by the inference path and the tape.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ssm::{compute_kernel, run_recurrence, Complex, Discretization, FftConvolver, SsmChannelParams};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How SSM channels are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsmMode {
    /// Kernel materialization plus FFT convolution.
    #[default]
    Convolution,
    /// Step-by-step state recurrence.
    Recurrence,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out_i = v_i · σ(v_{H+i})` for a vector of length `2H`.
pub fn gated_linear_unit(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::ContractViolation(format!(
            "gated linear unit needs an even-length input, got {}",
            v.len()
        )));
    }
    let h = v.len() / 2;
    Ok((0..h).map(|i| v[i] * sigmoid(v[h + i])).collect())
}

/// Row-wise gated linear unit over an `L × 2H` matrix.
pub fn glu_rows(v: ArrayView2<f64>) -> Result<Array2<f64>> {
    let cols = v.ncols();
    if cols % 2 != 0 {
        return Err(Error::ContractViolation(format!(
            "gated linear unit needs an even number of columns, got {cols}"
        )));
    }
    let h = cols / 2;
    let mut out = Array2::zeros((v.nrows(), h));
    for (mut o, row) in out.outer_iter_mut().zip(v.outer_iter()) {
        for i in 0..h {
            o[i] = row[i] * sigmoid(row[h + i]);
        }
    }
    Ok(out)
}

/// Per-row mean and reciprocal standard deviation (biased variance).
pub fn row_moments(x: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.ncols() as f64;
    x.outer_iter()
        .map(|row| {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
        })
        .unzip()
}

/// Layer normalization over features, per token.
pub fn layer_norm_rows(x: ArrayView2<f64>, gamma: ArrayView2<f64>, beta: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    layer_norm_in_place(&mut out, gamma, beta);
    out
}

pub fn layer_norm_in_place(x: &mut Array2<f64>, gamma: ArrayView2<f64>, beta: ArrayView2<f64>) {
    let (mean, rstd) = row_moments(x.view());
    for (r, mut row) in x.outer_iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[r]) * rstd[r] * gamma[[0, j]] + beta[[0, j]];
        }
    }
}

/// Column-wise maximum with its row index; ties go to the lowest row.
pub fn max_pool_rows(x: ArrayView2<f64>) -> (Vec<f64>, Vec<usize>) {
    let mut best: Vec<f64> = x.row(0).to_vec();
    let mut arg = vec![0usize; x.ncols()];
    for (r, row) in x.outer_iter().enumerate().skip(1) {
        for (j, &v) in row.iter().enumerate() {
            if v > best[j] {
                best[j] = v;
                arg[j] = r;
            }
        }
    }
    (best, arg)
}

/// Column-wise mean in plain row order.
pub fn mean_pool_rows(x: ArrayView2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).expect("non-empty").to_vec()
}

/// Column-wise mean whose summation order depends only on the multiset of
/// values, so any permutation of the rows gives a bitwise-identical result.
pub fn mean_pool_rows_ordered(x: ArrayView2<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.axis_iter(Axis(1))
        .map(|col| {
            let mut v = col.to_vec();
            v.sort_unstable_by(f64::total_cmp);
            v.iter().sum::<f64>() / n
        })
        .collect()
}

/// Row-wise softmax.
pub fn softmax_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-channel SSM parameters laid out as matrices: poles and output weights
/// are `H × n_half`, feedthrough and log-timestep are `1 × H`.
#[derive(Debug, Clone, Copy)]
pub struct SsmWeights<'a> {
    pub a_re: ArrayView2<'a, f64>,
    pub a_im: ArrayView2<'a, f64>,
    pub c_re: ArrayView2<'a, f64>,
    pub c_im: ArrayView2<'a, f64>,
    pub d: ArrayView2<'a, f64>,
    pub log_dt: ArrayView2<'a, f64>,
}

impl SsmWeights<'_> {
    pub fn channels(&self) -> usize {
        self.a_re.nrows()
    }

    pub fn n_half(&self) -> usize {
        self.a_re.ncols()
    }

    pub fn channel(&self, h: usize) -> Result<SsmChannelParams> {
        let a = self
            .a_re
            .row(h)
            .iter()
            .zip(self.a_im.row(h))
            .map(|(&re, &im)| Complex::new(re, im))
            .collect();
        let c = self
            .c_re
            .row(h)
            .iter()
            .zip(self.c_im.row(h))
            .map(|(&re, &im)| Complex::new(re, im))
            .collect();
        SsmChannelParams::new(a, c, self.d[[0, h]], self.log_dt[[0, h]])
            .map_err(|e| Error::InvalidParameters(format!("channel {h}: {e}")))
    }
}

pub(crate) fn in_channel(err: Error, h: usize) -> Error {
    match err {
        Error::NumericalSingularity { index, pivot, .. } => Error::NumericalSingularity {
            channel: h,
            index,
            pivot,
        },
        other => other,
    }
}

/// One channel through the convolution view.
pub fn ssm_channel_conv(
    params: &SsmChannelParams,
    rule: Discretization,
    u: &[f64],
    conv: &FftConvolver,
) -> Result<Vec<f64>> {
    let disc = params.discretize(rule)?;
    let kernel = compute_kernel(&disc, params.c(), u.len())?;
    let mut y = conv.causal_conv(kernel.values(), u);
    y.iter_mut().zip(u).for_each(|(y, &u)| *y += params.d() * u);
    Ok(y)
}

/// One channel through the recurrence view.
pub fn ssm_channel_recurrent(params: &SsmChannelParams, rule: Discretization, u: &[f64]) -> Result<Vec<f64>> {
    let disc = params.discretize(rule)?;
    run_recurrence(&disc, params.c(), params.d(), u)
}

/// Cache-blocked transpose into a new standard-layout matrix.
pub fn transpose(x: ArrayView2<f64>) -> Array2<f64> {
    const TILE: usize = 32;
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((cols, rows));
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[[c, r]] = x[[r, c]];
                }
            }
        }
    }
    out
}

/// Applies every channel to its own column of `x` (`L × H`).
///
/// Channels run in parallel; results are written back in channel order, so
/// the output does not depend on the number of worker threads.
pub fn ssm_layer(x: ArrayView2<f64>, w: SsmWeights<'_>, rule: Discretization, mode: SsmMode) -> Result<Array2<f64>> {
    let (len, h) = x.dim();
    if w.channels() != h {
        return Err(Error::DimensionMismatch {
            expected: w.channels(),
            got: h,
        });
    }
    if len == 0 {
        return Ok(Array2::zeros((0, h)));
    }
    let conv = match mode {
        SsmMode::Convolution => Some(FftConvolver::new(len)),
        SsmMode::Recurrence => None,
    };
    // Channel-major copy so every channel reads and writes contiguous memory.
    let mut channels = transpose(x);
    channels
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(len)
        .enumerate()
        .try_for_each(|(ch, row)| {
            let params = w.channel(ch)?;
            let u: &[f64] = row;
            let y = match &conv {
                Some(conv) => ssm_channel_conv(&params, rule, u, conv),
                None => ssm_channel_recurrent(&params, rule, u),
            }
            .map_err(|e| in_channel(e, ch))?;
            row.copy_from_slice(&y);
            Ok::<_, Error>(())
        })?;
    Ok(transpose(channels.view()))
}
