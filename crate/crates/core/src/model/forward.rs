//! Inference without a tape.

use ndarray::{Array2, ArrayView2, Axis};

use super::MilModel;
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::ops::{self, in_channel, SsmMode};
use crate::ssm::{Complex, DiscretizedChannel, Readout, RecurrentState};

/// Rows converted from `f32` and pushed through an affine map at a time.
/// Bounds the temporary copies to a fixed size independent of `L`.
const ROW_CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct MilOutput {
    /// Slide-level class probabilities.
    pub probs: Vec<f64>,
    /// Per-token patch probabilities (`L × patch classes`) for multitask models.
    pub patch_probs: Option<Array2<f64>>,
}

fn affine_chunked(x: ArrayView2<f32>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    for (src, mut dst) in x
        .axis_chunks_iter(Axis(0), ROW_CHUNK)
        .zip(out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK))
    {
        let z = src.mapv(f64::from).dot(w) + b;
        dst.assign(&z);
    }
    out
}

/// Mixing followed by the gate, chunk by chunk, so the `L × 2H`
/// intermediate never exists in full.
fn mix_and_gate(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), w.ncols() / 2));
    for (src, mut dst) in x
        .axis_chunks_iter(Axis(0), ROW_CHUNK)
        .zip(out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK))
    {
        let z = src.dot(w) + b;
        dst.assign(&ops::glu_rows(z.view())?);
    }
    Ok(out)
}

impl MilModel {
    pub fn forward(&self, bag: &Bag) -> Result<MilOutput> {
        self.forward_with(bag, SsmMode::Convolution)
    }

    /// Whole-sequence forward pass. `mode` picks how the SSM channels are
    /// evaluated; everything else is shared.
    pub fn forward_with(&self, bag: &Bag, mode: SsmMode) -> Result<MilOutput> {
        self.check_bag(bag)?;
        let tokens = self.token_features(bag.features.view(), mode)?;
        Ok(self.head(&tokens))
    }

    /// Per-token features after the last gated unit (`L × H`).
    pub fn token_features(&self, x: ArrayView2<f32>, mode: SsmMode) -> Result<Array2<f64>> {
        let (pw, pb) = self.projection();
        let mut h = affine_chunked(x, pw, pb);
        let (gamma, beta) = self.norm();
        ops::layer_norm_in_place(&mut h, gamma.view(), beta.view());
        for layer in 0..self.config.num_ssm_layers {
            let y = ops::ssm_layer(h.view(), self.ssm_weights(layer), self.config.discretization, mode)?;
            drop(h);
            let (mw, mb) = self.mixing(layer);
            h = mix_and_gate(&y, mw, mb)?;
        }
        Ok(h)
    }

    fn head(&self, tokens: &Array2<f64>) -> MilOutput {
        let patch_probs = self
            .patch_head()
            .map(|(w, b)| ops::softmax_rows((tokens.dot(w) + b).view()));
        let (pooled, _) = ops::max_pool_rows(tokens.view());
        MilOutput {
            probs: self.classify(&pooled),
            patch_probs,
        }
    }

    fn classify(&self, pooled: &[f64]) -> Vec<f64> {
        let (cw, cb) = self.classifier();
        let logits: Vec<f64> = (0..cw.ncols())
            .map(|c| cb[[0, c]] + pooled.iter().enumerate().map(|(j, v)| v * cw[[j, c]]).sum::<f64>())
            .collect();
        ops::softmax(&logits)
    }

    /// Token-by-token evaluation with recurrent SSM state.
    pub fn forward_streaming(&self, bag: &Bag) -> Result<MilOutput> {
        self.check_bag(bag)?;
        let mut stream = StreamingMil::new(self)?;
        let mut patch_rows = Vec::new();
        for token in bag.features.outer_iter() {
            let patch = stream.push(token.as_slice().expect("standard layout"))?;
            if let Some(p) = patch {
                patch_rows.extend(p);
            }
        }
        let patch_probs = self.patch_head().map(|(w, _)| {
            Array2::from_shape_vec((bag.len(), w.ncols()), patch_rows).expect("one row per token")
        });
        Ok(MilOutput {
            probs: stream.probs()?,
            patch_probs,
        })
    }
}

struct StreamingLayer {
    disc: Vec<DiscretizedChannel>,
    c: Vec<Vec<Complex>>,
    d: Vec<f64>,
    state: Vec<RecurrentState>,
}

/// Online inference: feed tokens one at a time and read the slide prediction
/// at any point. Memory is independent of the sequence length.
pub struct StreamingMil<'m> {
    model: &'m MilModel,
    layers: Vec<StreamingLayer>,
    pooled: Vec<f64>,
    seen: usize,
    buf: Vec<f64>,
    wide: Vec<f64>,
}

/// `out = b + x · W` with `W` stored row-major as `x.len() × out.len()`.
fn gemv(x: &[f64], w: &Array2<f64>, b: &Array2<f64>, out: &mut [f64]) {
    out.copy_from_slice(b.as_slice().expect("standard layout"));
    let w = w.as_slice().expect("standard layout");
    let n = out.len();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wij;
        }
    }
}

impl<'m> StreamingMil<'m> {
    pub fn new(model: &'m MilModel) -> Result<Self> {
        let cfg = &model.config;
        let layers = (0..cfg.num_ssm_layers)
            .map(|l| {
                let w = model.ssm_weights(l);
                let mut layer = StreamingLayer {
                    disc: Vec::with_capacity(cfg.hidden_dim),
                    c: Vec::with_capacity(cfg.hidden_dim),
                    d: Vec::with_capacity(cfg.hidden_dim),
                    state: Vec::with_capacity(cfg.hidden_dim),
                };
                for ch in 0..cfg.hidden_dim {
                    let p = w.channel(ch)?;
                    layer.disc.push(p.discretize(cfg.discretization).map_err(|e| in_channel(e, ch))?);
                    layer.c.push(p.c().to_vec());
                    layer.d.push(p.d());
                    layer.state.push(RecurrentState::new(p.n_half()));
                }
                Ok(layer)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model,
            layers,
            pooled: vec![f64::NEG_INFINITY; cfg.hidden_dim],
            seen: 0,
            buf: vec![0.0; cfg.hidden_dim],
            wide: vec![0.0; 2 * cfg.hidden_dim],
        })
    }

    /// Consumes one token. Returns its patch probabilities for multitask
    /// models.
    pub fn push(&mut self, token: &[f32]) -> Result<Option<Vec<f64>>> {
        let m = self.model;
        if token.len() != m.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: m.config.input_dim,
                got: token.len(),
            });
        }
        let x: Vec<f64> = token.iter().map(|&v| f64::from(v)).collect();
        let (pw, pb) = m.projection();
        gemv(&x, pw, pb, &mut self.buf);

        let (gamma, beta) = m.norm();
        let row = ArrayView2::from_shape((1, self.buf.len()), &self.buf[..]).expect("row");
        let (mean, rstd) = ops::row_moments(row);
        for (j, v) in self.buf.iter_mut().enumerate() {
            *v = (*v - mean[0]) * rstd[0] * gamma[[0, j]] + beta[[0, j]];
        }

        let h = self.buf.len();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for ch in 0..h {
                let u = self.buf[ch];
                self.buf[ch] = layer.state[ch].step(
                    &layer.disc[ch],
                    &layer.c[ch],
                    layer.d[ch],
                    u,
                    Readout::ConjugatePairs,
                );
            }
            let (mw, mb) = m.mixing(l);
            gemv(&self.buf, mw, mb, &mut self.wide);
            for j in 0..h {
                self.buf[j] = self.wide[j] * ops::sigmoid(self.wide[h + j]);
            }
        }

        for (p, &v) in self.pooled.iter_mut().zip(&self.buf) {
            if self.seen == 0 || v > *p {
                *p = v;
            }
        }
        self.seen += 1;

        Ok(m.patch_head().map(|(w, b)| {
            let mut logits = vec![0.0; w.ncols()];
            gemv(&self.buf, w, b, &mut logits);
            ops::softmax(&logits)
        }))
    }

    pub fn tokens_seen(&self) -> usize {
        self.seen
    }

    /// Slide probabilities for the tokens consumed so far.
    pub fn probs(&self) -> Result<Vec<f64>> {
        if self.seen == 0 {
            return Err(Error::EmptyBag);
        }
        Ok(self.model.classify(&self.pooled))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ssm::Discretization;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(multitask: bool, rule: Discretization) -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 5,
            state_dim: 4,
            num_classes: 3,
            num_ssm_layers: 2,
            multitask,
            num_patch_classes: 2,
            discretization: rule,
        }
    }

    fn bag(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Bag {
        let f = Array2::from_shape_fn((len, dim), |_| rng.gen_range(-1.0f32..1.0));
        Bag::new("b", f, 0).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn outputs_lie_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MilModel::init(config(true, Discretization::Bilinear), 3).unwrap();
        for len in [1, 7, 40] {
            let out = m.forward(&bag(&mut rng, len, 6)).unwrap();
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(out.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            let patches = out.patch_probs.unwrap();
            assert_eq!(patches.dim(), (len, 2));
            for row in patches.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_bag_pools_to_its_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = MilModel::init(config(false, Discretization::Bilinear), 4).unwrap();
        let b = bag(&mut rng, 1, 6);
        let tokens = m.token_features(b.features.view(), SsmMode::Convolution).unwrap();
        let (pooled, _) = ops::max_pool_rows(tokens.view());
        assert_eq!(pooled, tokens.row(0).to_vec());
    }

    #[test]
    fn three_evaluation_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for rule in [Discretization::Bilinear, Discretization::Zoh] {
            let m = MilModel::init(config(true, rule), 5).unwrap();
            let b = bag(&mut rng, 64, 6);
            let conv = m.forward_with(&b, SsmMode::Convolution).unwrap();
            let rec = m.forward_with(&b, SsmMode::Recurrence).unwrap();
            let stream = m.forward_streaming(&b).unwrap();
            for other in [&rec, &stream] {
                for (x, y) in conv.probs.iter().zip(&other.probs) {
                    assert!(rel(*x, *y) < 1e-9, "{x} vs {y}");
                }
                let (p, q) = (conv.patch_probs.as_ref().unwrap(), other.patch_probs.as_ref().unwrap());
                for (x, y) in p.iter().zip(q) {
                    assert!(rel(*x, *y) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rejects_wrong_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = MilModel::init(config(false, Discretization::Bilinear), 6).unwrap();
        assert!(matches!(
            m.forward(&bag(&mut rng, 3, 5)),
            Err(Error::DimensionMismatch { expected: 6, got: 5 })
        ));
        let mut s = StreamingMil::new(&m).unwrap();
        assert!(matches!(s.probs(), Err(Error::EmptyBag)));
        assert!(s.push(&[0.0; 4]).is_err());
    }

    #[test]
    fn patch_head_does_not_touch_slide_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mt = MilModel::init(config(true, Discretization::Bilinear), 7).unwrap();
        let base_cfg = config(false, Discretization::Bilinear);
        let n = base_cfg.layout().len();
        let base = MilModel::from_params(base_cfg, mt.params[..n].to_vec()).unwrap();
        let b = bag(&mut rng, 20, 6);
        assert_eq!(mt.forward(&b).unwrap().probs, base.forward(&b).unwrap().probs);
    }

    #[test]
    fn chunking_spans_several_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = MilModel::init(config(false, Discretization::Bilinear), 8).unwrap();
        let b = bag(&mut rng, 2 * ROW_CHUNK + 17, 6);
        let (pw, pb) = m.projection();
        let chunked = affine_chunked(b.features.view(), pw, pb);
        let whole = b.features.mapv(f64::from).dot(pw) + pb;
        for (x, y) in chunked.iter().zip(&whole) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(chunked.slice(ndarray::s![..3, ..]).dim(), (3, 5));
    }
}
