use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

use super::edmd::snapshot_pairs;
use super::{lifted_predict, step_rows, LiftedModel, LossHistory, Predictor};
use crate::dataset::{window_sequences, NormalizedEpisode, TrainingBatch};
use crate::error::{invalid, Result};
use crate::neuralnet::{chain, Activation, MlpGrads, MlpParams};
use crate::numkit::{gemm, lstsq_right, Matrix};
use crate::training::{run, TrainConfig, TrainData, Trainable};

/// Layer widths of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeepArch {
    /// Width of the (concatenated) state, `nτ`.
    pub state_dim: usize,
    pub control_dim: usize,
    /// Learned observables appended to the raw state.
    pub k: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Width of an extra encoder layer inserted after the first hidden one
    /// and redrawn every batch.
    #[serde(default)]
    pub random_layer: Option<usize>,
    #[serde(default = "default_random_std")]
    pub random_layer_std: f64,
}

fn default_random_std() -> f64 {
    0.1
}

impl DeepArch {
    pub fn new(state_dim: usize, control_dim: usize, k: usize) -> Self {
        Self {
            state_dim,
            control_dim,
            k,
            encoder_hidden: vec![32, 64],
            decoder_hidden: vec![128, 64, 32],
            random_layer: None,
            random_layer_std: default_random_std(),
        }
    }

    pub fn lifted_dim(&self) -> usize {
        self.state_dim + self.k
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.state_dim];
        for (i, &h) in self.encoder_hidden.iter().enumerate() {
            d.push(h);
            if i == 0 {
                d.extend(self.random_layer);
            }
        }
        d.push(self.k);
        d
    }

    /// Encoder layer index of the random layer.
    pub fn random_layer_index(&self) -> Option<usize> {
        self.random_layer.map(|_| if self.encoder_hidden.is_empty() { 0 } else { 1 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.control_dim == 0 || self.k == 0 {
            return Err(invalid("state_dim, control_dim and k must be positive"));
        }
        if self.encoder_hidden.iter().chain(&self.decoder_hidden).chain(&self.random_layer).any(|&h| h == 0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if !(self.random_layer_std >= 0.0 && self.random_layer_std.is_finite()) {
            return Err(invalid("random_layer_std must be nonnegative"));
        }
        Ok(())
    }
}

/// Weights `α₁…α₆` of the reconstruction, prediction, linearity, max-norm
/// and two regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub pred: f64,
    pub linear: f64,
    pub inf: f64,
    pub reg_encoder: f64,
    pub reg_decoder: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon: 1.0, pred: 1.0, linear: 0.3, inf: 1e-9, reg_encoder: 1e-9, reg_decoder: 1e-9 }
    }
}

/// Deep EDMD: `φ_e(z) = [z; f(z)]`, `φ⁺ = 𝒜φ + ℬu`, `ẑ = g(φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepKoopmanModel {
    pub arch: DeepArch,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub a: Matrix,
    pub b: Matrix,
}

impl DeepKoopmanModel {
    /// Uniform-initialized networks with `𝒜 = I`, `ℬ = 0`.
    pub fn new(arch: DeepArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.lifted_dim();
        let enc = chain(&arch.encoder_dims(), Activation::Relu, Activation::Linear, false);
        let mut dec_dims = vec![l];
        dec_dims.extend(&arch.decoder_hidden);
        dec_dims.push(arch.state_dim);
        let dec = chain(&dec_dims, Activation::Relu, Activation::Sigmoid, true);
        let mut m = Self {
            encoder: MlpParams::init_uniform(&enc, seed)?,
            decoder: MlpParams::init_uniform(&dec, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?,
            a: Matrix::identity(l),
            b: Matrix::zeros(l, arch.control_dim),
            arch,
        };
        m.redraw_random_layer(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x00ff_00ff));
        Ok(m)
    }

    /// Redraws the random layer from `N(0, σ²)`; no-op without one.
    pub fn redraw_random_layer(&mut self, rng: &mut ChaCha8Rng) {
        let Some(l) = self.arch.random_layer_index() else { return };
        let Ok(dist) = Normal::new(0.0, self.arch.random_layer_std) else { return };
        for w in self.encoder.weights[l].as_mut_slice() {
            *w = dist.sample(rng);
        }
        for b in &mut self.encoder.biases[l] {
            *b = dist.sample(rng);
        }
    }

    fn flat_len(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.a.as_slice().len() + self.b.as_slice().len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.to_flat();
        v.extend(self.decoder.to_flat());
        v.extend_from_slice(self.a.as_slice());
        v.extend_from_slice(self.b.as_slice());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(invalid(format!("expected {} parameters, got {}", self.flat_len(), flat.len())));
        }
        let (ne, nd, na) = (self.encoder.param_count(), self.decoder.param_count(), self.a.as_slice().len());
        self.encoder.set_flat(&flat[..ne])?;
        self.decoder.set_flat(&flat[ne..ne + nd])?;
        self.a.as_mut_slice().copy_from_slice(&flat[ne + nd..ne + nd + na]);
        self.b.as_mut_slice().copy_from_slice(&flat[ne + nd + na..]);
        Ok(())
    }

    fn ab_range(&self) -> Range<usize> {
        let start = self.encoder.param_count() + self.decoder.param_count();
        start..self.flat_len()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.a.is_finite() && self.b.is_finite()
    }

    /// `‖θ_e‖²` without the random layer.
    fn encoder_norm_sq(&self) -> f64 {
        let skip = self.arch.random_layer_index();
        (0..self.encoder.specs.len())
            .filter(|&l| Some(l) != skip)
            .map(|l| {
                self.encoder.weights[l].as_slice().iter().chain(&self.encoder.biases[l]).map(|v| v * v).sum::<f64>()
            })
            .sum()
    }
}

impl Predictor for DeepKoopmanModel {
    fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    fn control_dim(&self) -> usize {
        self.arch.control_dim
    }

    fn predict_batch(&self, x0: &Matrix, u_seq: &[Matrix]) -> Result<Vec<Matrix>> {
        lifted_predict(self, x0, u_seq)
    }
}

impl LiftedModel for DeepKoopmanModel {
    fn lifted_dim(&self) -> usize {
        self.arch.lifted_dim()
    }

    fn transition(&self) -> &Matrix {
        &self.a
    }

    fn input_matrix(&self) -> &Matrix {
        &self.b
    }

    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        let f = self.encoder.predict(x)?;
        Matrix::hstack(&[x, &f])
    }

    fn decode(&self, phi: &Matrix) -> Result<Matrix> {
        self.decoder.predict(phi)
    }
}

/// Loss terms of one batch (already weighted sum in `total`, raw terms
/// otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DeepLosses {
    pub total: f64,
    pub recon: f64,
    pub pred: f64,
    pub linear: f64,
    pub inf: f64,
    pub reg_encoder: f64,
    pub reg_decoder: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
    pub a: Matrix,
    pub b: Matrix,
}

impl DeepGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.to_flat();
        v.extend(self.decoder.to_flat());
        v.extend_from_slice(self.a.as_slice());
        v.extend_from_slice(self.b.as_slice());
        v
    }
}

/// Squared error, max-abs error and its first argmax for one row.
fn row_errors(y: &[f64], t: &[f64]) -> (f64, f64, usize) {
    let mut sq = 0.0;
    let mut worst = (0.0, 0);
    for (j, (a, b)) in y.iter().zip(t).enumerate() {
        let e = a - b;
        sq += e * e;
        if e.abs() > worst.0 {
            worst = (e.abs(), j);
        }
    }
    (sq, worst.0, worst.1)
}

/// Batch-mean loss over a window batch and its exact gradient (backprop
/// through the full `p`-step latent rollout).
pub fn deep_losses(model: &DeepKoopmanModel, batch: &TrainingBatch, w: &LossWeights) -> Result<(DeepLosses, DeepGrads)> {
    let bs = batch.batch_size();
    let p = batch.horizon();
    let n = model.arch.state_dim;
    let l = model.lifted_dim();
    if bs == 0 || p == 0 || batch.x_seq.len() != p {
        return Err(invalid("batch needs at least one window and one step"));
    }
    if batch.x0.cols() != n {
        return Err(invalid(format!("model expects states of width {n}, batch has {}", batch.x0.cols())));
    }
    let mut parts = vec![&batch.x0];
    parts.extend(batch.x_seq.iter());
    let xs = Matrix::vstack(&parts)?;
    let enc_cache = model.encoder.forward(&xs)?;
    let phi = Matrix::hstack(&[&xs, enc_cache.output()])?;

    let mut ks = Vec::with_capacity(p + 1);
    ks.push(phi.block(0, 0, bs, l));
    for i in 0..p {
        ks.push(step_rows(&ks[i], &batch.u_seq[i], &model.a, &model.b));
    }
    let pb = p * bs;
    let k_future = Matrix::vstack(&ks[1..].iter().collect::<Vec<_>>())?;
    let dec_in = Matrix::vstack(&[&phi.block(bs, 0, pb, l), &k_future])?;
    let dec_cache = model.decoder.forward(&dec_in)?;
    let out = dec_cache.output();

    let scale = 1.0 / pb as f64;
    let mut losses = DeepLosses::default();
    let mut d_out = Matrix::zeros(2 * pb, n);
    for r in 0..2 * pb {
        let t = xs.row(bs + r % pb);
        let y = out.row(r);
        let (sq, mx, j) = row_errors(y, t);
        let alpha = if r < pb {
            losses.recon += sq;
            w.recon
        } else {
            losses.pred += sq;
            w.pred
        };
        losses.inf += mx;
        let d = d_out.row_mut(r);
        for c in 0..n {
            d[c] = 2.0 * alpha * scale * (y[c] - t[c]);
        }
        let e = y[j] - t[j];
        if e != 0.0 {
            d[j] += w.inf * scale * e.signum();
        }
    }

    // Linearity term and its gradient wrt encoder outputs and rollout.
    let mut d_phi = Matrix::zeros((p + 1) * bs, l);
    let mut d_k = vec![Matrix::zeros(bs, l); p + 1];
    for i in 1..=p {
        for r in 0..bs {
            let pr = phi.row(i * bs + r);
            let kr = ks[i].row(r);
            let dp = d_phi.row_mut(i * bs + r);
            let dk = d_k[i].row_mut(r);
            for c in 0..l {
                let e = pr[c] - kr[c];
                losses.linear += e * e;
                dp[c] += 2.0 * w.linear * scale * e;
                dk[c] -= 2.0 * w.linear * scale * e;
            }
        }
    }
    losses.recon *= scale;
    losses.pred *= scale;
    losses.linear *= scale;
    losses.inf *= scale;

    let (mut dec_grads, d_dec_in) = model.decoder.backward(&dec_cache, &d_out)?;
    for r in 0..pb {
        d_phi.row_mut(bs + r).iter_mut().zip(d_dec_in.row(r)).for_each(|(a, b)| *a += b);
        let (i, rr) = (1 + r / bs, r % bs);
        d_k[i].row_mut(rr).iter_mut().zip(d_dec_in.row(pb + r)).for_each(|(a, b)| *a += b);
    }

    // Backprop through φ_i = φ_{i−1}𝒜ᵀ + u_{i−1}ℬᵀ.
    let mut da = Matrix::zeros(l, l);
    let mut db = Matrix::zeros(l, model.arch.control_dim);
    let mut carry = Matrix::zeros(bs, l);
    for i in (1..=p).rev() {
        let g = d_k[i].add(&carry)?;
        gemm(1.0, &g, true, &ks[i - 1], false, 1.0, &mut da);
        gemm(1.0, &g, true, &batch.u_seq[i - 1], false, 1.0, &mut db);
        gemm(1.0, &g, false, &model.a, false, 0.0, &mut carry);
    }
    for r in 0..bs {
        d_phi.row_mut(r).iter_mut().zip(carry.row(r)).for_each(|(a, b)| *a += b);
    }

    let d_net = d_phi.block(0, n, (p + 1) * bs, model.arch.k);
    let (mut enc_grads, _) = model.encoder.backward(&enc_cache, &d_net)?;

    losses.reg_encoder = model.encoder_norm_sq();
    losses.reg_decoder = model.decoder.norm_sq();
    enc_grads.add_scaled_params(2.0 * w.reg_encoder, &model.encoder);
    dec_grads.add_scaled_params(2.0 * w.reg_decoder, &model.decoder);
    if let Some(rl) = model.arch.random_layer_index() {
        enc_grads.zero_layer(rl);
    }
    losses.total = w.recon * losses.recon
        + w.pred * losses.pred
        + w.linear * losses.linear
        + w.inf * losses.inf
        + w.reg_encoder * losses.reg_encoder
        + w.reg_decoder * losses.reg_decoder;
    Ok((losses, DeepGrads { encoder: enc_grads, decoder: dec_grads, a: da, b: db }))
}

/// Mean `‖z − g(φ_e(z))‖²` over every concatenated state of `episodes`.
pub fn recon_loss(model: &DeepKoopmanModel, episodes: &[NormalizedEpisode], tau: usize) -> Result<f64> {
    const CHUNK: usize = 4096;
    let mut total = 0.0;
    let mut count = 0usize;
    for e in episodes {
        let z = e.concat_states(tau);
        let mut r0 = 0;
        while r0 < z.rows() {
            let rows = CHUNK.min(z.rows() - r0);
            let zb = z.block(r0, 0, rows, z.cols());
            let zh = model.decode(&model.encode(&zb)?)?;
            total += zb.sub(&zh)?.as_slice().iter().map(|v| v * v).sum::<f64>();
            count += rows;
            r0 += rows;
        }
    }
    if count == 0 {
        return Err(invalid("no states to evaluate"));
    }
    Ok(total / count as f64)
}

/// Refits `𝒜, ℬ` by least squares on one-step pairs, keeping the encoder.
pub fn refit_transition(model: &mut DeepKoopmanModel, episodes: &[NormalizedEpisode], tau: usize) -> Result<()> {
    let (x, y, u) = snapshot_pairs(episodes, tau)?;
    let l = model.lifted_dim();
    let w = Matrix::hstack(&[&model.encode(&x)?, &u])?.transpose();
    let v = model.encode(&y)?.transpose();
    let ab = lstsq_right(&v, &w)?;
    model.a = ab.block(0, 0, l, l);
    model.b = ab.block(0, l, l, u.cols());
    Ok(())
}

struct DeepTrainee<'a> {
    model: DeepKoopmanModel,
    weights: &'a LossWeights,
}

impl Trainable for DeepTrainee<'_> {
    fn params(&self) -> Vec<f64> {
        self.model.to_flat()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.model.set_flat(flat)
    }

    fn loss_and_grad(&self, batch: &TrainingBatch) -> Result<(f64, Vec<f64>)> {
        let (l, g) = deep_losses(&self.model, batch, self.weights)?;
        Ok((l.total, g.to_flat()))
    }

    fn metrics(&self, data: &TrainData, cfg: &TrainConfig) -> Result<(f64, f64)> {
        let train = recon_loss(&self.model, &data.train, cfg.tau)?;
        let val = if data.validation.is_empty() { f64::NAN } else { recon_loss(&self.model, &data.validation, cfg.tau)? };
        Ok((train, val))
    }

    fn before_batch(&mut self, rng: &mut ChaCha8Rng) {
        self.model.redraw_random_layer(rng);
    }

    fn warmup_frozen(&self) -> Range<usize> {
        self.model.ab_range()
    }
}

/// Mini-batch Adam on the Deep EDMD loss. History rows hold the mean
/// reconstruction error on the training and validation states.
pub fn train_deep(
    model: DeepKoopmanModel,
    data: &TrainData,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(DeepKoopmanModel, LossHistory)> {
    if cfg.tau * crate::dataset::STATE_DIM != model.arch.state_dim {
        return Err(invalid(format!(
            "model state width {} does not match tau = {} concatenation",
            model.arch.state_dim, cfg.tau
        )));
    }
    let mut t = DeepTrainee { model, weights };
    let history = run(&mut t, data, cfg)?;
    Ok((t.model, history))
}

/// Multi-step mean squared error on all windows of `episodes` at offset 0.
pub fn multistep_loss<P: Predictor + ?Sized>(
    model: &P,
    episodes: &[NormalizedEpisode],
    p: usize,
    tau: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for e in episodes {
        let Some(b) = window_sequences(e, p, tau, 0) else { continue };
        let pred = model.predict_batch(&b.x0, &b.u_seq)?;
        for (i, x) in b.x_seq.iter().enumerate() {
            total += pred[i + 1].sub(x)?.as_slice().iter().map(|v| v * v).sum::<f64>();
        }
        count += p * b.batch_size();
    }
    if count == 0 {
        return Err(invalid("no windows to evaluate"));
    }
    Ok(total / count as f64)
}
