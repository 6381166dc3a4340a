use serde::{Deserialize, Serialize};

use super::{lifted_predict, LiftedModel, Predictor};
use crate::dataset::NormalizedEpisode;
use crate::error::{invalid, Result};
use crate::lifting::{Dictionary, ElmFeatureMap, IdentityDictionary, TpsDictionary};
use crate::numkit::{lstsq_right, Matrix};

/// Serializable choice of fixed dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnyDictionary {
    Tps(TpsDictionary),
    Elm(ElmFeatureMap),
    Identity(IdentityDictionary),
}

impl Dictionary for AnyDictionary {
    fn input_dim(&self) -> usize {
        match self {
            Self::Tps(d) => d.input_dim(),
            Self::Elm(d) => d.input_dim(),
            Self::Identity(d) => d.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Self::Tps(d) => d.output_dim(),
            Self::Elm(d) => d.output_dim(),
            Self::Identity(d) => d.output_dim(),
        }
    }

    fn lift_batch(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Self::Tps(d) => d.lift_batch(x),
            Self::Elm(d) => d.lift_batch(x),
            Self::Identity(d) => d.lift_batch(x),
        }
    }
}

/// `φ⁺ = 𝒜φ + ℬu`, `x̂ = 𝒞φ` over a fixed dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLiftedModel {
    pub dictionary: AnyDictionary,
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// `‖Φ(Y) − [𝒜 ℬ]W‖_F / ‖Φ(Y)‖_F` on the fitting data.
    pub transition_residual: f64,
    /// `‖X − 𝒞Φ(X)‖_F / ‖X‖_F` on the fitting data.
    pub output_residual: f64,
}

/// Snapshot rows `(z_k, z_{k+1}, u_{k+τ−1})` of every episode.
pub fn snapshot_pairs(episodes: &[NormalizedEpisode], tau: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let (mut xs, mut ys, mut us) = (Vec::new(), Vec::new(), Vec::new());
    for e in episodes {
        let z = e.concat_states(tau);
        let n = z.rows();
        if n < 2 {
            continue;
        }
        xs.push(z.block(0, 0, n - 1, z.cols()));
        ys.push(z.block(1, 0, n - 1, z.cols()));
        us.push(e.controls.block(tau - 1, 0, n - 1, e.controls.cols()));
    }
    if xs.is_empty() {
        return Err(invalid("no snapshot pairs: every episode is shorter than tau + 1"));
    }
    let st = |v: &Vec<Matrix>| Matrix::vstack(&v.iter().collect::<Vec<_>>());
    Ok((st(&xs)?, st(&ys)?, st(&us)?))
}

fn rel_residual(target: &Matrix, fit: &Matrix) -> Result<f64> {
    let denom = target.frobenius_norm();
    let r = target.sub(fit)?.frobenius_norm();
    Ok(if denom > 0.0 { r / denom } else { r })
}

/// Least-squares fit of `𝒜, ℬ, 𝒞` from snapshot rows `x → y` under `u`.
pub fn edmd_fit(dictionary: AnyDictionary, x: &Matrix, y: &Matrix, u: &Matrix) -> Result<LinearLiftedModel> {
    let m = x.rows();
    if y.rows() != m || u.rows() != m || m == 0 {
        return Err(invalid("snapshot matrices need the same nonzero number of rows"));
    }
    if x.cols() != dictionary.input_dim() || y.cols() != x.cols() {
        return Err(invalid("snapshot width disagrees with the dictionary"));
    }
    let l = dictionary.output_dim();
    if m < l + u.cols() {
        log::warn!("{m} snapshots for {} unknowns per row: the fit is underdetermined", l + u.cols());
    }
    let phi_x = dictionary.lift_batch(x)?;
    let phi_y = dictionary.lift_batch(y)?;
    // W = [Φ(X) U]ᵀ, V = Φ(Y)ᵀ, [𝒜 ℬ] = V W†.
    let w = Matrix::hstack(&[&phi_x, u])?.transpose();
    let v = phi_y.transpose();
    let ab = lstsq_right(&v, &w)?;
    let a = ab.block(0, 0, l, l);
    let b = ab.block(0, l, l, u.cols());
    let phi_t = phi_x.transpose();
    let c = lstsq_right(&x.transpose(), &phi_t)?;
    let transition_residual = rel_residual(&v, &ab.matmul(&w)?)?;
    let output_residual = rel_residual(&x.transpose(), &c.matmul(&phi_t)?)?;
    Ok(LinearLiftedModel { dictionary, a, b, c, transition_residual, output_residual })
}

/// EDMD over a frozen random network.
pub fn elm_edmd_fit(map: ElmFeatureMap, x: &Matrix, y: &Matrix, u: &Matrix) -> Result<LinearLiftedModel> {
    edmd_fit(AnyDictionary::Elm(map), x, y, u)
}

impl Predictor for LinearLiftedModel {
    fn state_dim(&self) -> usize {
        self.c.rows()
    }

    fn control_dim(&self) -> usize {
        self.b.cols()
    }

    fn predict_batch(&self, x0: &Matrix, u_seq: &[Matrix]) -> Result<Vec<Matrix>> {
        lifted_predict(self, x0, u_seq)
    }
}

impl LiftedModel for LinearLiftedModel {
    fn lifted_dim(&self) -> usize {
        self.a.rows()
    }

    fn transition(&self) -> &Matrix {
        &self.a
    }

    fn input_matrix(&self) -> &Matrix {
        &self.b
    }

    fn encode(&self, x: &Matrix) -> Result<Matrix> {
        self.dictionary.lift_batch(x)
    }

    fn decode(&self, phi: &Matrix) -> Result<Matrix> {
        phi.matmul_tr(&self.c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_dictionary_recovers_linear_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_rows(&[[0.9, 0.1, 0.0], [0.0, 0.8, 0.2], [0.1, 0.0, 0.7]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.5], [0.3, -0.2]]).unwrap();
        let x = random(&mut rng, 50, 3);
        let u = random(&mut rng, 50, 2);
        let y = x.matmul_tr(&a).unwrap().add(&u.matmul_tr(&b).unwrap()).unwrap();
        let m = edmd_fit(AnyDictionary::Identity(IdentityDictionary { dim: 3 }), &x, &y, &u).unwrap();
        assert!(m.a.sub(&a).unwrap().max_abs() < 1e-12);
        assert!(m.b.sub(&b).unwrap().max_abs() < 1e-12);
        assert!(m.c.sub(&Matrix::identity(3)).unwrap().max_abs() < 1e-12);
        assert!(m.transition_residual < 1e-12 && m.output_residual < 1e-12);
    }

    #[test]
    fn predictions_start_with_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 40, 2);
        let y = random(&mut rng, 40, 2);
        let u = random(&mut rng, 40, 1);
        let m = edmd_fit(AnyDictionary::Identity(IdentityDictionary { dim: 2 }), &x, &y, &u).unwrap();
        let out = m.predict_multistep(&[0.3, -0.1], &[]).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0][0] - 0.3).abs() < 1e-12 && (out[0][1] + 0.1).abs() < 1e-12);
        let out = m.predict_multistep(&[0.3, -0.1], &[vec![0.2]]).unwrap();
        let expect = m.a.matvec(&[0.3, -0.1]).unwrap();
        assert!((out[1][0] - expect[0] - m.b[(0, 0)] * 0.2).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_snapshots() {
        let x = Matrix::zeros(5, 2);
        let r = edmd_fit(AnyDictionary::Identity(IdentityDictionary { dim: 2 }), &x, &Matrix::zeros(4, 2), &Matrix::zeros(5, 1));
        assert!(r.is_err());
    }

    #[test]
    fn snapshot_pairs_follow_concatenation() {
        let states = Matrix::from_vec(4, 3, (0..12).map(f64::from).collect()).unwrap();
        let controls = Matrix::from_vec(4, 2, (0..8).map(|v| -f64::from(v)).collect()).unwrap();
        let e = NormalizedEpisode { states, controls };
        let (x, y, u) = snapshot_pairs(&[e], 2).unwrap();
        assert_eq!(x.shape(), (2, 6));
        assert_eq!(x.row(1), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(y.row(0), x.row(1));
        assert_eq!(u.row(0), &[-2.0, -3.0]);
    }
}
