//! Fixed observable dictionaries: thin-plate-spline RBFs and frozen random
//! (extreme learning machine) feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::neuralnet::{chain, Activation, MlpParams};
use crate::numkit::Matrix;

/// A map from (possibly concatenated) states to lifted observables.
pub trait Dictionary {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Lifts every row of `x`.
    fn lift_batch(&self, x: &Matrix) -> Result<Matrix>;

    fn lift(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.lift_batch(&Matrix::from_vec(1, x.len(), x.to_vec())?)?.into_vec())
    }
}

/// `r² ln r` with `r = ‖x − c‖`, extended by its limit 0 at `r = 0`.
pub fn tps_rbf(x: &[f64], c: &[f64]) -> f64 {
    let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// `Ψ = [φ; u]`.
pub fn assemble_psi(phi: &[f64], u: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(phi.len() + u.len());
    v.extend_from_slice(phi);
    v.extend_from_slice(u);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpsDictionary {
    pub centers: Vec<Vec<f64>>,
    /// Prepends the raw state to the RBF features.
    pub includes_state: bool,
}

impl TpsDictionary {
    pub fn new(centers: Vec<Vec<f64>>, includes_state: bool) -> Result<Self> {
        let d = Self { centers, includes_state };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.centers.first() else {
            return Err(invalid("tps dictionary needs at least one center"));
        };
        let n = first.len();
        if n == 0 || self.centers.iter().any(|c| c.len() != n || c.iter().any(|v| !v.is_finite())) {
            return Err(invalid("tps centers must be finite and of equal, nonzero length"));
        }
        for i in 0..self.centers.len() {
            for j in 0..i {
                if self.centers[i] == self.centers[j] {
                    return Err(invalid(format!("tps centers {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }

    /// `k` centers drawn i.i.d. from `N(mean, std²)` per channel.
    pub fn sample_centers(mean: &[f64], std: &[f64], k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(invalid("need at least one center"));
        }
        if mean.len() != std.len() || mean.is_empty() {
            return Err(invalid("mean and std must have the same nonzero length"));
        }
        if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid("center spread must be positive in every channel (std = 0 would repeat centers)"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dists: Vec<Normal<f64>> =
            mean.iter().zip(std).map(|(&m, &s)| Normal::new(m, s)).collect::<std::result::Result<_, _>>()
                .map_err(|e| invalid(e.to_string()))?;
        let centers = (0..k).map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect()).collect();
        Self::new(centers, true)
    }
}

impl Dictionary for TpsDictionary {
    fn input_dim(&self) -> usize {
        self.centers[0].len()
    }

    fn output_dim(&self) -> usize {
        self.centers.len() + if self.includes_state { self.input_dim() } else { 0 }
    }

    fn lift_batch(&self, x: &Matrix) -> Result<Matrix> {
        let n = self.input_dim();
        if x.cols() != n {
            return Err(invalid(format!("tps dictionary expects {n} inputs, got {}", x.cols())));
        }
        let off = if self.includes_state { n } else { 0 };
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let o = out.row_mut(r);
            o[..off].copy_from_slice(&xr[..off]);
            for (k, c) in self.centers.iter().enumerate() {
                o[off + k] = tps_rbf(xr, c);
            }
        }
        Ok(out)
    }
}

/// Frozen random ReLU network with the raw state prepended to its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElmFeatureMap {
    pub net: MlpParams,
    pub append_state: bool,
}

impl ElmFeatureMap {
    /// Layers `[input, hidden…, k]` with ReLU hidden units and a bias-free
    /// linear output, drawn like a fresh encoder.
    pub fn random(input: usize, hidden: &[usize], k: usize, seed: u64) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(k);
        let specs = chain(&dims, Activation::Relu, Activation::Linear, false);
        Ok(Self { net: MlpParams::init_uniform(&specs, seed)?, append_state: true })
    }

    pub fn fingerprint(&self) -> u64 {
        self.net.fingerprint()
    }
}

impl Dictionary for ElmFeatureMap {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim() + if self.append_state { self.input_dim() } else { 0 }
    }

    fn lift_batch(&self, x: &Matrix) -> Result<Matrix> {
        let feats = self.net.predict(x)?;
        if self.append_state {
            Matrix::hstack(&[x, &feats])
        } else {
            Ok(feats)
        }
    }
}

/// The raw state as its own dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityDictionary {
    pub dim: usize,
}

impl Dictionary for IdentityDictionary {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn lift_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(invalid(format!("identity dictionary expects {} inputs, got {}", self.dim, x.cols())));
        }
        Ok(x.clone())
    }
}

/// Per-column mean and (population) standard deviation of the rows of `x`.
pub fn column_mean_std(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows().max(1) as f64;
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (j, v) in x.row(r).iter().enumerate() {
            var[j] += (v - mean[j]).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}
