//! Self-fed MLP one-step predictor used as the comparison baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::TrainingBatch;
use crate::error::{invalid, Result};
use crate::koopman::{multistep_loss, LossHistory, Predictor};
use crate::neuralnet::{chain, Activation, ForwardCache, MlpGrads, MlpParams};
use crate::numkit::Matrix;
use crate::training::{run, TrainConfig, TrainData, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub state_dim: usize,
    pub control_dim: usize,
    pub hidden: Vec<usize>,
    /// Width of an extra layer after the first hidden one, redrawn every batch.
    #[serde(default)]
    pub random_layer: Option<usize>,
    #[serde(default = "default_random_std")]
    pub random_layer_std: f64,
}

fn default_random_std() -> f64 {
    0.1
}

impl MlpArch {
    pub fn new(state_dim: usize, control_dim: usize) -> Self {
        Self {
            state_dim,
            control_dim,
            hidden: vec![32, 64, 128, 128, 64, 32],
            random_layer: None,
            random_layer_std: default_random_std(),
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.state_dim + self.control_dim];
        for (i, &h) in self.hidden.iter().enumerate() {
            d.push(h);
            if i == 0 {
                d.extend(self.random_layer);
            }
        }
        d.push(self.state_dim);
        d
    }

    pub fn random_layer_index(&self) -> Option<usize> {
        self.random_layer.map(|_| if self.hidden.is_empty() { 0 } else { 1 })
    }

    fn specs(&self) -> Result<Vec<crate::neuralnet::LayerSpec>> {
        if self.state_dim == 0 || self.control_dim == 0 {
            return Err(invalid("state_dim and control_dim must be positive"));
        }
        if self.hidden.iter().chain(&self.random_layer).any(|&h| h == 0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        if !(self.random_layer_std >= 0.0 && self.random_layer_std.is_finite()) {
            return Err(invalid("random_layer_std must be nonnegative"));
        }
        Ok(chain(&self.dims(), Activation::Relu, Activation::Sigmoid, true))
    }
}

/// `β₁…β₃` of the multi-step, max-norm and regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpLossWeights {
    pub pred: f64,
    pub inf: f64,
    pub reg: f64,
}

impl Default for MlpLossWeights {
    fn default() -> Self {
        Self { pred: 1.0, inf: 1e-9, reg: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub arch: MlpArch,
    pub net: MlpParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MlpLosses {
    pub total: f64,
    pub pred: f64,
    pub inf: f64,
    pub reg: f64,
}

impl MlpModel {
    pub fn new(arch: MlpArch, seed: u64) -> Result<Self> {
        let net = MlpParams::init_uniform(&arch.specs()?, seed)?;
        let mut m = Self { arch, net };
        m.redraw_random_layer(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x00ff_00ff));
        Ok(m)
    }

    pub fn zeros(arch: MlpArch) -> Result<Self> {
        let net = MlpParams::zeros(&arch.specs()?)?;
        Ok(Self { arch, net })
    }

    pub fn redraw_random_layer(&mut self, rng: &mut ChaCha8Rng) {
        let Some(l) = self.arch.random_layer_index() else { return };
        let Ok(dist) = Normal::new(0.0, self.arch.random_layer_std) else { return };
        for w in self.net.weights[l].as_mut_slice() {
            *w = dist.sample(rng);
        }
        for b in &mut self.net.biases[l] {
            *b = dist.sample(rng);
        }
    }

    /// One step `x⁺ = M([x; u])`.
    pub fn predict_next(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.state_dim || u.len() != self.arch.control_dim {
            return Err(invalid("state or control width disagrees with the model"));
        }
        let mut inp = x.to_vec();
        inp.extend_from_slice(u);
        self.net.predict_one(&inp)
    }

    fn reg_norm_sq(&self) -> f64 {
        let skip = self.arch.random_layer_index();
        (0..self.net.specs.len())
            .filter(|&l| Some(l) != skip)
            .map(|l| self.net.weights[l].as_slice().iter().chain(&self.net.biases[l]).map(|v| v * v).sum::<f64>())
            .sum()
    }
}

impl Predictor for MlpModel {
    fn state_dim(&self) -> usize {
        self.arch.state_dim
    }

    fn control_dim(&self) -> usize {
        self.arch.control_dim
    }

    fn predict_batch(&self, x0: &Matrix, u_seq: &[Matrix]) -> Result<Vec<Matrix>> {
        let mut out = Vec::with_capacity(u_seq.len() + 1);
        out.push(x0.clone());
        for u in u_seq {
            let inp = Matrix::hstack(&[out.last().unwrap(), u])?;
            out.push(self.net.predict(&inp)?);
        }
        Ok(out)
    }
}

/// Batch-mean self-fed loss and its gradient.
pub fn mlp_loss(model: &MlpModel, batch: &TrainingBatch, w: &MlpLossWeights) -> Result<(MlpLosses, MlpGrads)> {
    let bs = batch.batch_size();
    let p = batch.horizon();
    let n = model.arch.state_dim;
    if bs == 0 || p == 0 || batch.x_seq.len() != p {
        return Err(invalid("batch needs at least one window and one step"));
    }
    if batch.x0.cols() != n {
        return Err(invalid(format!("model expects states of width {n}, batch has {}", batch.x0.cols())));
    }
    let scale = 1.0 / (p * bs) as f64;
    let mut caches: Vec<ForwardCache> = Vec::with_capacity(p);
    let mut cur = batch.x0.clone();
    let mut losses = MlpLosses::default();
    // Direct loss gradient wrt each predicted state x̂_1…x̂_p.
    let mut direct = Vec::with_capacity(p);
    for i in 0..p {
        let inp = Matrix::hstack(&[&cur, &batch.u_seq[i]])?;
        let cache = model.net.forward(&inp)?;
        cur = cache.output().clone();
        let target = &batch.x_seq[i];
        let mut d = Matrix::zeros(bs, n);
        for r in 0..bs {
            let (y, t) = (cur.row(r), target.row(r));
            let mut worst = (0.0, 0);
            let dr = d.row_mut(r);
            for c in 0..n {
                let e = y[c] - t[c];
                losses.pred += e * e;
                dr[c] = 2.0 * w.pred * scale * e;
                if e.abs() > worst.0 {
                    worst = (e.abs(), c);
                }
            }
            losses.inf += worst.0;
            let e = y[worst.1] - t[worst.1];
            if e != 0.0 {
                dr[worst.1] += w.inf * scale * e.signum();
            }
        }
        direct.push(d);
        caches.push(cache);
    }
    losses.pred *= scale;
    losses.inf *= scale;

    let mut grads = MlpGrads::zeros_like(&model.net);
    let mut g = direct.pop().expect("p ≥ 1");
    for i in (0..p).rev() {
        let (gi, d_in) = model.net.backward(&caches[i], &g)?;
        grads.accumulate(&gi);
        if i > 0 {
            g = direct.pop().expect("one direct gradient per step");
            g.as_mut_slice()
                .chunks_mut(n)
                .zip(d_in.as_slice().chunks(n + model.arch.control_dim))
                .for_each(|(a, b)| a.iter_mut().zip(&b[..n]).for_each(|(x, y)| *x += y));
        }
    }
    losses.reg = model.reg_norm_sq();
    grads.add_scaled_params(2.0 * w.reg, &model.net);
    if let Some(rl) = model.arch.random_layer_index() {
        grads.zero_layer(rl);
    }
    losses.total = w.pred * losses.pred + w.inf * losses.inf + w.reg * losses.reg;
    Ok((losses, grads))
}

struct MlpTrainee<'a> {
    model: MlpModel,
    weights: &'a MlpLossWeights,
}

impl Trainable for MlpTrainee<'_> {
    fn params(&self) -> Vec<f64> {
        self.model.net.to_flat()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.model.net.set_flat(flat)
    }

    fn loss_and_grad(&self, batch: &TrainingBatch) -> Result<(f64, Vec<f64>)> {
        let (l, g) = mlp_loss(&self.model, batch, self.weights)?;
        Ok((l.total, g.to_flat()))
    }

    fn metrics(&self, data: &TrainData, cfg: &TrainConfig) -> Result<(f64, f64)> {
        let train = multistep_loss(&self.model, &data.train, cfg.p, cfg.tau)?;
        let val = if data.validation.is_empty() {
            f64::NAN
        } else {
            multistep_loss(&self.model, &data.validation, cfg.p, cfg.tau)?
        };
        Ok((train, val))
    }

    fn before_batch(&mut self, rng: &mut ChaCha8Rng) {
        self.model.redraw_random_layer(rng);
    }
}

/// Mini-batch Adam on the self-fed loss. History rows hold the multi-step
/// mean squared error on training and validation windows.
pub fn train_mlp(
    model: MlpModel,
    data: &TrainData,
    cfg: &TrainConfig,
    weights: &MlpLossWeights,
) -> Result<(MlpModel, LossHistory)> {
    if cfg.tau * crate::dataset::STATE_DIM != model.arch.state_dim {
        return Err(invalid(format!(
            "model state width {} does not match tau = {} concatenation",
            model.arch.state_dim, cfg.tau
        )));
    }
    let mut t = MlpTrainee { model, weights };
    let history = run(&mut t, data, cfg)?;
    Ok((t.model, history))
}
