//! Fully connected networks on row-per-sample batches with exact
//! backpropagation, uniform initialization and Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::numkit::{gemm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Linear => 1.0,
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Linear => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, has_bias: bool) -> Self {
        Self { in_dim, out_dim, activation, has_bias }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.has_bias { self.out_dim } else { 0 }
    }
}

/// Specs for a chain `dims[0] → dims[1] → …` with `hidden` activations (and
/// biases) everywhere except the last layer.
pub fn chain(dims: &[usize], hidden: Activation, output: Activation, output_bias: bool) -> Vec<LayerSpec> {
    let n = dims.len().saturating_sub(1);
    (0..n)
        .map(|l| {
            let last = l + 1 == n;
            LayerSpec::new(
                dims[l],
                dims[l + 1],
                if last { output } else { hidden },
                if last { output_bias } else { true },
            )
        })
        .collect()
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(invalid("network needs at least one layer"));
    }
    for (l, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(invalid(format!("layer {l} has a zero dimension")));
        }
        if l > 0 && specs[l - 1].out_dim != s.in_dim {
            return Err(invalid(format!(
                "layer {l} expects {} inputs but layer {} produces {}",
                s.in_dim,
                l - 1,
                specs[l - 1].out_dim
            )));
        }
    }
    Ok(())
}

/// Weights `W⁽ˡ⁾` (out × in) and biases `b⁽ˡ⁾` (empty when the layer has none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub specs: Vec<LayerSpec>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Activations recorded by [`MlpParams::forward`]; `values[0]` is the input
/// and `values[l + 1]` the output of layer `l`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    fingerprint: u64,
    pub values: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.values.last().expect("cache holds at least the input")
    }
}

impl MlpParams {
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        validate_specs(specs)?;
        Ok(Self {
            specs: specs.to_vec(),
            weights: specs.iter().map(|s| Matrix::zeros(s.out_dim, s.in_dim)).collect(),
            biases: specs.iter().map(|s| vec![0.0; if s.has_bias { s.out_dim } else { 0 }]).collect(),
        })
    }

    /// Every weight and bias drawn from `U[−1/√a, 1/√a]`, `a` the layer's
    /// input dimension.
    pub fn init_uniform(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut p = Self::zeros(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..specs.len() {
            let f = 1.0 / (specs[l].in_dim as f64).sqrt();
            for w in p.weights[l].as_mut_slice() {
                *w = rng.random_range(-f..=f);
            }
            for b in &mut p.biases[l] {
                *b = rng.random_range(-f..=f);
            }
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs.last().map(|s| s.out_dim).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(LayerSpec::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Hash of the parameter bits; changes whenever any parameter does.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (w, b) in self.weights.iter().zip(&self.biases) {
            w.as_slice().iter().for_each(|x| eat(x.to_bits()));
            b.iter().for_each(|x| eat(x.to_bits()));
        }
        h
    }

    /// `Σ‖W‖² + Σ‖b‖²`.
    pub fn norm_sq(&self) -> f64 {
        self.weights.iter().flat_map(|w| w.as_slice()).chain(self.biases.iter().flatten()).map(|v| v * v).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(invalid(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
            let nb = b.len();
            b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(invalid(format!("network expects {} inputs, got {}", self.input_dim(), x.cols())));
        }
        let mut values = Vec::with_capacity(self.specs.len() + 1);
        values.push(x.clone());
        for l in 0..self.specs.len() {
            let y = self.layer_forward(l, values.last().unwrap());
            values.push(y);
        }
        Ok(ForwardCache { fingerprint: self.fingerprint(), values })
    }

    /// Forward pass without keeping intermediate activations.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(invalid(format!("network expects {} inputs, got {}", self.input_dim(), x.cols())));
        }
        let mut cur = self.layer_forward(0, x);
        for l in 1..self.specs.len() {
            cur = self.layer_forward(l, &cur);
        }
        Ok(cur)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(&Matrix::from_vec(1, x.len(), x.to_vec())?)?.into_vec())
    }

    fn layer_forward(&self, l: usize, input: &Matrix) -> Matrix {
        let s = &self.specs[l];
        let mut y = Matrix::zeros(input.rows(), s.out_dim);
        gemm(1.0, input, false, &self.weights[l], true, 0.0, &mut y);
        let b = &self.biases[l];
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            if !b.is_empty() {
                row.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
            }
            if s.activation != Activation::Linear {
                row.iter_mut().for_each(|v| *v = s.activation.apply(*v));
            }
        }
        y
    }

    /// Gradients of a scalar loss given `∂loss/∂output`, plus `∂loss/∂input`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.fingerprint != self.fingerprint() || cache.values.len() != self.specs.len() + 1 {
            return Err(invalid("forward cache does not belong to these parameters"));
        }
        let out = cache.output();
        if grad_out.shape() != out.shape() {
            return Err(invalid("output gradient shape does not match the forward output"));
        }
        let mut grads = MlpGrads {
            weights: self.specs.iter().map(|s| Matrix::zeros(s.out_dim, s.in_dim)).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let mut delta = grad_out.clone();
        for l in (0..self.specs.len()).rev() {
            let s = &self.specs[l];
            let y = &cache.values[l + 1];
            if s.activation != Activation::Linear {
                for (d, &yv) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *d *= s.activation.derivative_from_output(yv);
                }
            }
            let input = &cache.values[l];
            gemm(1.0, &delta, true, input, false, 0.0, &mut grads.weights[l]);
            if s.has_bias {
                let gb = &mut grads.biases[l];
                for r in 0..delta.rows() {
                    gb.iter_mut().zip(delta.row(r)).for_each(|(g, d)| *g += d);
                }
            }
            let mut next = Matrix::zeros(delta.rows(), s.in_dim);
            gemm(1.0, &delta, false, &self.weights[l], false, 0.0, &mut next);
            delta = next;
        }
        Ok((grads, delta))
    }

    /// Flat binary layout: layer count, then `(in, out, activation, bias)` per
    /// layer as little-endian u32, then every weight (row-major) and bias as
    /// little-endian f64, layer by layer.
    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.specs.len() as u32).to_le_bytes())?;
        for s in &self.specs {
            for v in [s.in_dim as u32, s.out_dim as u32, s.activation.code(), s.has_bias as u32] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32buf).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let n = read_u32(r)? as usize;
        if n == 0 || n > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n}")));
        }
        let mut specs = Vec::with_capacity(n);
        for _ in 0..n {
            let (i, o, a, b) = (read_u32(r)?, read_u32(r)?, read_u32(r)?, read_u32(r)?);
            let activation = Activation::from_code(a).ok_or_else(|| Error::Checkpoint(format!("unknown activation {a}")))?;
            specs.push(LayerSpec::new(i as usize, o as usize, activation, b != 0));
        }
        let mut p = Self::zeros(&specs).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut flat = vec![0.0; p.param_count()];
        let mut buf = [0u8; 8];
        for v in &mut flat {
            r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated parameters: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        p.set_flat(&flat)?;
        Ok(p)
    }
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p.specs.iter().map(|s| Matrix::zeros(s.out_dim, s.in_dim)).collect(),
            biases: p.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    /// `self += alpha · p`, used for the `‖θ‖²` regularizer gradient.
    pub fn add_scaled_params(&mut self, alpha: f64, p: &MlpParams) {
        for (g, w) in self.weights.iter_mut().zip(&p.weights) {
            g.as_mut_slice().iter_mut().zip(w.as_slice()).for_each(|(g, w)| *g += alpha * w);
        }
        for (g, b) in self.biases.iter_mut().zip(&p.biases) {
            g.iter_mut().zip(b).for_each(|(g, b)| *g += alpha * b);
        }
    }

    pub fn accumulate(&mut self, other: &MlpGrads) {
        for (g, o) in self.weights.iter_mut().zip(&other.weights) {
            g.as_mut_slice().iter_mut().zip(o.as_slice()).for_each(|(g, o)| *g += o);
        }
        for (g, o) in self.biases.iter_mut().zip(&other.biases) {
            g.iter_mut().zip(o).for_each(|(g, o)| *g += o);
        }
    }

    pub fn zero_layer(&mut self, l: usize) {
        self.weights[l].as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        self.biases[l].iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, rate: f64) -> Self {
        Self { rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid(format!(
                "adam state has {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}
