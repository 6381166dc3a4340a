use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dempc::MpcConfig;
use crate::error::{Error, Result};
use crate::koopman::LossWeights;
use crate::mlp_baseline::MlpLossWeights;
use crate::plant::{ExcitationPolicy, VehicleParams};
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 5 episodes of 2000 steps; finishes in minutes.
    Desk,
    /// 40 episodes of 10 000 steps, batch 64.
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Edmd,
    ElmEdmd,
    DeepEdmd,
    Mlp,
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edmd" => Ok(Self::Edmd),
            "elm-edmd" => Ok(Self::ElmEdmd),
            "deep-edmd" => Ok(Self::DeepEdmd),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!(
                "unknown model kind `{other}` (expected edmd, elm-edmd, deep-edmd or mlp)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Edmd => "edmd",
            Self::ElmEdmd => "elm-edmd",
            Self::DeepEdmd => "deep-edmd",
            Self::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    /// Vehicle parameter file; built-in values when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
    pub dt: f64,
    pub excitation: ExcitationPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub episodes: usize,
    pub steps: usize,
    /// Episode `i` is simulated with seed `seed + i`.
    pub seed: u64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Learned observables (Deep EDMD), RBF centers (EDMD) or ELM features.
    pub k: usize,
    pub seed: u64,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub mlp_hidden: Vec<usize>,
    pub elm_hidden: Vec<usize>,
    pub random_layer_width: usize,
    pub random_layer_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub horizons: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    pub repeats: usize,
    /// Training budget of each random-layer variant.
    pub max_batches: usize,
}

/// Closed-loop reference: the opening `episode_steps` of the first test
/// episode, a linear blend to straight driving at `hold_speed`, then a
/// constant hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub episode_steps: usize,
    pub blend_steps: usize,
    pub hold_steps: usize,
    /// m/s; defaults to the speed at the end of the episode segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub plant: PlantSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub mlp_loss: MlpLossWeights,
    pub mpc: MpcConfig,
    pub evaluate: EvaluateSection,
    pub robustness: RobustnessSection,
    pub reference: ReferenceSection,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            schema_version: SCHEMA_VERSION,
            out_dir: PathBuf::from("runs/desk"),
            plant: PlantSection { params: None, dt: 0.01, excitation: ExcitationPolicy::default() },
            data: DataSection { episodes: 5, steps: 2000, seed: 100, split_seed: 7 },
            model: ModelSection {
                kind: ModelKind::DeepEdmd,
                k: 10,
                seed: 1,
                encoder_hidden: vec![32, 64],
                decoder_hidden: vec![128, 64, 32],
                mlp_hidden: vec![32, 64, 128, 128, 64, 32],
                elm_hidden: vec![32, 64],
                random_layer_width: 32,
                random_layer_std: 0.1,
            },
            train: TrainConfig { batch_size: 32, max_epochs: 100_000, seed: 1, ..TrainConfig::default() },
            loss: LossWeights::default(),
            mlp_loss: MlpLossWeights::default(),
            mpc: MpcConfig::default(),
            evaluate: EvaluateSection { horizons: vec![1, 10, 41] },
            robustness: RobustnessSection { repeats: 20, max_batches: 10_000 },
            reference: ReferenceSection { episode_steps: 1000, blend_steps: 200, hold_steps: 800, hold_speed: None },
        };
        if preset == Preset::Paper {
            c.out_dir = PathBuf::from("runs/paper");
            c.data.episodes = 40;
            c.data.steps = 10_000;
            c.train.batch_size = 64;
            c.train.max_epochs = 1000;
            c.robustness.repeats = 100;
            c.robustness.max_batches = 30_000;
        }
        c
    }

    /// The preset overlaid with the keys of `path` (when given). Relative
    /// paths inside the file resolve against the file's directory.
    pub fn load(path: Option<&Path>, preset: Preset) -> Result<Self> {
        let base = Self::preset(preset);
        let Some(path) = path else {
            base.validate()?;
            return Ok(base);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::overlay(base, &text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if let Some(p) = &cfg.plant.params {
            if p.is_relative() {
                cfg.plant.params = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Merges a TOML document over `base`. The document must declare
    /// `schema_version`. A top-level `preset` key is accepted and ignored
    /// here; callers pick the base.
    pub fn overlay(base: Self, text: &str) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match doc.get("schema_version").and_then(toml::Value::as_integer) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Config(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")))
            }
            None => return Err(Error::Config(format!("missing `schema_version = {SCHEMA_VERSION}`"))),
        }
        doc.remove("preset");
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, doc);
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Preset named by a top-level `preset` key of the file, if any.
    pub fn preset_in_file(path: &Path) -> Result<Option<Preset>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        match doc.get("preset") {
            None => Ok(None),
            Some(toml::Value::String(s)) => s.parse().map(Some),
            Some(_) => Err(Error::Config("`preset` must be a string".into())),
        }
    }

    /// Sets every seed (data, model initialization, batch order) from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn vehicle_params(&self) -> Result<VehicleParams> {
        match &self.plant.params {
            Some(p) => VehicleParams::load(p),
            None => Ok(VehicleParams::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version must be {SCHEMA_VERSION}"));
        }
        if let Some(p) = &self.plant.params {
            if !p.exists() {
                return bad(format!("plant.params: {} does not exist", p.display()));
            }
        }
        self.vehicle_params()?;
        if !(self.plant.dt > 0.0 && self.plant.dt <= 0.1) {
            return bad(format!("plant.dt must be in (0, 0.1] s, got {}", self.plant.dt));
        }
        self.plant.excitation.validate()?;
        if self.data.episodes == 0 || self.data.steps < 2 {
            return bad("data needs at least one episode of two or more steps".into());
        }
        let t = &self.train;
        t.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if !(t.learning_rate <= 1.0) {
            return bad(format!("train.learning_rate must be at most 1, got {}", t.learning_rate));
        }
        let m = &self.model;
        if m.k == 0 {
            return bad("model.k must be positive".into());
        }
        let widths = m.encoder_hidden.iter().chain(&m.decoder_hidden).chain(&m.mlp_hidden).chain(&m.elm_hidden);
        if widths.chain([&m.random_layer_width]).any(|&w| w == 0) {
            return bad("model layer widths must be positive".into());
        }
        if !(m.random_layer_std >= 0.0 && m.random_layer_std.is_finite()) {
            return bad("model.random_layer_std must be nonnegative".into());
        }
        let l = &self.loss;
        let deep = [l.recon, l.pred, l.linear, l.inf, l.reg_encoder, l.reg_decoder];
        let mlp = [self.mlp_loss.pred, self.mlp_loss.inf, self.mlp_loss.reg];
        if deep.iter().chain(&mlp).any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("loss weights must be positive and finite".into());
        }
        self.mpc.validate()?;
        if (self.mpc.dt - self.plant.dt).abs() > 1e-12 {
            return bad(format!("mpc.dt ({}) must equal plant.dt ({})", self.mpc.dt, self.plant.dt));
        }
        if self.evaluate.horizons.is_empty() || self.evaluate.horizons.contains(&0) {
            return bad("evaluate.horizons must be a nonempty list of positive steps".into());
        }
        if self.robustness.repeats < 2 {
            return bad(format!("robustness.repeats must be at least 2, got {}", self.robustness.repeats));
        }
        if self.robustness.max_batches == 0 {
            return bad("robustness.max_batches must be positive".into());
        }
        let r = &self.reference;
        if r.episode_steps + r.blend_steps + r.hold_steps == 0 {
            return bad("reference must contain at least one step".into());
        }
        if let Some(v) = r.hold_speed {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("reference.hold_speed must be a nonnegative speed, got {v}"));
            }
        }
        Ok(())
    }
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}
