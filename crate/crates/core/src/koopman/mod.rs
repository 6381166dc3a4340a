//! Lifted linear predictors: EDMD / ELM-EDMD least-squares fits and the
//! Deep EDMD autoencoder with its multi-step training loop.

mod deep;
mod edmd;

pub use deep::{
    deep_losses, multistep_loss, recon_loss, refit_transition, train_deep, DeepArch, DeepGrads, DeepKoopmanModel,
    DeepLosses, LossWeights,
};
pub use edmd::{edmd_fit, elm_edmd_fit, snapshot_pairs, AnyDictionary, LinearLiftedModel};

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{invalid, Result};
use crate::numkit::{eigvals, gemm, modulus, Complex, Matrix};

/// Anything that can roll a batch of start states forward under a control
/// sequence. `predict_batch` returns `u_seq.len() + 1` matrices; entry 0 is
/// the model's reading of the start state itself.
pub trait Predictor {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn predict_batch(&self, x0: &Matrix, u_seq: &[Matrix]) -> Result<Vec<Matrix>>;

    fn predict_multistep(&self, x0: &[f64], u_seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = Matrix::from_vec(1, x0.len(), x0.to_vec())?;
        let us = u_seq
            .iter()
            .map(|u| Matrix::from_vec(1, u.len(), u.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.predict_batch(&x, &us)?.into_iter().map(Matrix::into_vec).collect())
    }
}

/// A predictor whose latent state evolves as `φ⁺ = 𝒜φ + ℬu`.
pub trait LiftedModel: Predictor {
    fn lifted_dim(&self) -> usize;
    fn transition(&self) -> &Matrix;
    fn input_matrix(&self) -> &Matrix;
    /// Lifts every row of `x`.
    fn encode(&self, x: &Matrix) -> Result<Matrix>;
    /// Maps lifted rows back to states.
    fn decode(&self, phi: &Matrix) -> Result<Matrix>;
}

/// Shared rollout for lifted models, batched over rows.
pub(crate) fn lifted_predict<M: LiftedModel + ?Sized>(m: &M, x0: &Matrix, u_seq: &[Matrix]) -> Result<Vec<Matrix>> {
    let mut phi = m.encode(x0)?;
    let mut lifted = Vec::with_capacity(u_seq.len() + 1);
    lifted.push(phi.clone());
    for u in u_seq {
        if u.rows() != x0.rows() || u.cols() != m.control_dim() {
            return Err(invalid("control batch does not match the start states"));
        }
        phi = step_rows(&phi, u, m.transition(), m.input_matrix());
        lifted.push(phi.clone());
    }
    let stacked = Matrix::vstack(&lifted.iter().collect::<Vec<_>>())?;
    let decoded = m.decode(&stacked)?;
    let b = x0.rows();
    Ok((0..lifted.len()).map(|i| decoded.block(i * b, 0, b, decoded.cols())).collect())
}

/// `Φ Aᵀ + U Bᵀ` for row-stacked lifted states and controls.
pub(crate) fn step_rows(phi: &Matrix, u: &Matrix, a: &Matrix, b: &Matrix) -> Matrix {
    let mut next = Matrix::zeros(phi.rows(), a.rows());
    gemm(1.0, phi, false, a, true, 0.0, &mut next);
    gemm(1.0, u, false, b, true, 1.0, &mut next);
    next
}

/// Lifted states `φ_1 … φ_p` from the recursion `φ_i = 𝒜φ_{i−1} + ℬu_{i−1}`.
pub fn rollout_lifted(a: &Matrix, b: &Matrix, phi0: &[f64], u_seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let l = phi0.len();
    if a.shape() != (l, l) || b.rows() != l {
        return Err(invalid("rollout dimensions disagree"));
    }
    let mut out = Vec::with_capacity(u_seq.len());
    let mut phi = phi0.to_vec();
    for u in u_seq {
        if u.len() != b.cols() {
            return Err(invalid("control length disagrees with the input matrix"));
        }
        let mut next = a.matvec(&phi)?;
        let bu = b.matvec(u)?;
        next.iter_mut().zip(&bu).for_each(|(x, y)| *x += y);
        out.push(next.clone());
        phi = next;
    }
    Ok(out)
}

/// Eigenvalues of a lifted transition matrix sorted by modulus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumReport {
    pub eigenvalues: Vec<Complex>,
    pub spectral_radius: f64,
    /// All `|μ| ≤ 1 + 1e-6`.
    pub stable: bool,
}

pub fn spectrum(a: &Matrix) -> Result<SpectrumReport> {
    let mut ev = eigvals(a)?;
    ev.sort_by(|x, y| modulus(*y).total_cmp(&modulus(*x)).then(y.0.total_cmp(&x.0)).then(y.1.total_cmp(&x.1)));
    let spectral_radius = ev.first().map(|&c| modulus(c)).unwrap_or(0.0);
    Ok(SpectrumReport { stable: spectral_radius <= 1.0 + 1e-6, spectral_radius, eigenvalues: ev })
}

/// One logged training point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub batch: usize,
    pub train_recon: f64,
    pub val_recon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub rows: Vec<HistoryRow>,
    /// Total loss of every optimizer step.
    pub batch_loss: Vec<f64>,
    pub epochs: usize,
}

impl LossHistory {
    pub fn batches(&self) -> usize {
        self.batch_loss.len()
    }

    pub fn first(&self) -> Option<&HistoryRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&HistoryRow> {
        self.rows.last()
    }

    /// Mean of the last `n` batch losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.batch_loss.len()).max(1);
        self.batch_loss.iter().rev().take(k).sum::<f64>() / k as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["batch", "train_recon", "val_recon"])?;
        for r in &self.rows {
            out.write_record([r.batch.to_string(), r.train_recon.to_string(), r.val_recon.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}
