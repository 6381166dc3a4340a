//! Model archive: magic, format version, length-prefixed JSON metadata, then
//! little-endian binary parameter blocks.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::NormalizationStats;
use crate::error::{Error, Result};
use crate::koopman::{DeepArch, DeepKoopmanModel, LiftedModel, LinearLiftedModel, Predictor};
use crate::mlp_baseline::{MlpArch, MlpModel};
use crate::neuralnet::MlpParams;
use crate::numkit::Matrix;

const MAGIC: &[u8; 8] = b"DEDMDCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    /// EDMD or ELM-EDMD.
    Linear(LinearLiftedModel),
    Deep(DeepKoopmanModel),
    Mlp(MlpModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Linear(m) => match m.dictionary {
                crate::koopman::AnyDictionary::Elm(_) => "elm-edmd",
                _ => "edmd",
            },
            Self::Deep(_) => "deep-edmd",
            Self::Mlp(_) => "mlp",
        }
    }

    pub fn as_lifted(&self) -> Option<&dyn LiftedModel> {
        match self {
            Self::Linear(m) => Some(m),
            Self::Deep(m) => Some(m),
            Self::Mlp(_) => None,
        }
    }

    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            Self::Linear(m) => m,
            Self::Deep(m) => m,
            Self::Mlp(m) => m,
        }
    }
}

/// A trained model with the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub stats: NormalizationStats,
    pub tau: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Meta {
    Linear { model: LinearLiftedModel },
    Deep { arch: DeepArch },
    Mlp { arch: MlpArch },
}

#[derive(Serialize, Deserialize)]
struct Header {
    tau: usize,
    stats: NormalizationStats,
    model: Meta,
}

fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let mut b4 = [0u8; 4];
    let mut dim = |r: &mut dyn Read| -> Result<usize> {
        r.read_exact(&mut b4).map_err(|e| Error::Checkpoint(format!("truncated matrix header: {e}")))?;
        Ok(u32::from_le_bytes(b4) as usize)
    };
    let (rows, cols) = (dim(r)?, dim(r)?);
    if rows.saturating_mul(cols) > 1 << 24 {
        return Err(Error::Checkpoint(format!("implausible matrix shape {rows}x{cols}")));
    }
    let mut data = vec![0.0; rows * cols];
    let mut b8 = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut b8).map_err(|e| Error::Checkpoint(format!("truncated matrix: {e}")))?;
        *v = f64::from_le_bytes(b8);
    }
    Matrix::from_vec(rows, cols, data)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let meta = match &self.model {
            AnyModel::Linear(m) => Meta::Linear { model: m.clone() },
            AnyModel::Deep(m) => Meta::Deep { arch: m.arch.clone() },
            AnyModel::Mlp(m) => Meta::Mlp { arch: m.arch.clone() },
        };
        let header = serde_json::to_vec(&Header { tau: self.tau, stats: self.stats.clone(), model: meta })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        match &self.model {
            AnyModel::Linear(_) => {}
            AnyModel::Deep(m) => {
                m.encoder.write_binary(w)?;
                m.decoder.write_binary(w)?;
                write_matrix(w, &m.a)?;
                write_matrix(w, &m.b)?;
            }
            AnyModel::Mlp(m) => m.net.write_binary(w)?,
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes, not a checkpoint".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let len = u64::from_le_bytes(b8);
        if len > 1 << 30 {
            return Err(Error::Checkpoint(format!("implausible metadata length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(|e| Error::Checkpoint(format!("truncated metadata: {e}")))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let model = match header.model {
            Meta::Linear { model } => AnyModel::Linear(model),
            Meta::Deep { arch } => {
                let encoder = MlpParams::read_binary(r)?;
                let decoder = MlpParams::read_binary(r)?;
                let a = read_matrix(r)?;
                let b = read_matrix(r)?;
                let l = arch.lifted_dim();
                if a.shape() != (l, l) || b.shape() != (l, arch.control_dim) {
                    return Err(Error::Checkpoint("transition matrices do not match the architecture".into()));
                }
                if encoder.input_dim() != arch.state_dim || decoder.output_dim() != arch.state_dim {
                    return Err(Error::Checkpoint("networks do not match the architecture".into()));
                }
                AnyModel::Deep(DeepKoopmanModel { arch, encoder, decoder, a, b })
            }
            Meta::Mlp { arch } => {
                let net = MlpParams::read_binary(r)?;
                if net.input_dim() != arch.state_dim + arch.control_dim || net.output_dim() != arch.state_dim {
                    return Err(Error::Checkpoint("network does not match the architecture".into()));
                }
                AnyModel::Mlp(MlpModel { arch, net })
            }
        };
        Ok(Self { model, stats: header.stats, tau: header.tau })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }
}
