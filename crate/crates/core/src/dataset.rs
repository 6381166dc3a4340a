//! Normalization, episode splits, training windows and the episode CSV format.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::numkit::Matrix;
use crate::plant::{ControlInput, Episode, VehicleState};

pub const STATE_DIM: usize = VehicleState::DIM;
pub const CONTROL_DIM: usize = ControlInput::DIM;

/// Per-channel min/max used to map data onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub state_min: [f64; STATE_DIM],
    pub state_max: [f64; STATE_DIM],
    pub control_min: [f64; CONTROL_DIM],
    pub control_max: [f64; CONTROL_DIM],
}

#[inline]
pub fn normalize(x: f64, min: f64, max: f64) -> f64 {
    (x - min) / (max - min)
}

#[inline]
pub fn denormalize(x: f64, min: f64, max: f64) -> f64 {
    x * (max - min) + min
}

impl NormalizationStats {
    pub fn new(
        state_min: [f64; STATE_DIM],
        state_max: [f64; STATE_DIM],
        control_min: [f64; CONTROL_DIM],
        control_max: [f64; CONTROL_DIM],
    ) -> Result<Self> {
        let s = Self { state_min, state_max, control_min, control_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = self
            .state_min
            .iter()
            .zip(&self.state_max)
            .chain(self.control_min.iter().zip(&self.control_max));
        for (k, (lo, hi)) in pairs.enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(invalid(format!("normalization channel {k} has min {lo} and max {hi}")));
            }
        }
        Ok(())
    }

    /// Channel extremes over every sample of `episodes`.
    pub fn from_episodes(episodes: &[Episode]) -> Result<Self> {
        let mut s = Self {
            state_min: [f64::INFINITY; STATE_DIM],
            state_max: [f64::NEG_INFINITY; STATE_DIM],
            control_min: [f64::INFINITY; CONTROL_DIM],
            control_max: [f64::NEG_INFINITY; CONTROL_DIM],
        };
        for e in episodes {
            for (x, u) in e.states.iter().zip(&e.controls) {
                for (k, v) in x.to_array().into_iter().enumerate() {
                    s.state_min[k] = s.state_min[k].min(v);
                    s.state_max[k] = s.state_max[k].max(v);
                }
                for (k, v) in u.to_array().into_iter().enumerate() {
                    s.control_min[k] = s.control_min[k].min(v);
                    s.control_max[k] = s.control_max[k].max(v);
                }
            }
        }
        s.validate().map_err(|e| invalid(format!("cannot normalize constant data: {e}")))?;
        Ok(s)
    }

    pub fn normalize_state(&self, x: &[f64]) -> [f64; STATE_DIM] {
        std::array::from_fn(|k| normalize(x[k], self.state_min[k], self.state_max[k]))
    }

    pub fn denormalize_state(&self, x: &[f64]) -> [f64; STATE_DIM] {
        std::array::from_fn(|k| denormalize(x[k], self.state_min[k], self.state_max[k]))
    }

    pub fn normalize_control(&self, u: &[f64]) -> [f64; CONTROL_DIM] {
        std::array::from_fn(|k| normalize(u[k], self.control_min[k], self.control_max[k]))
    }

    pub fn denormalize_control(&self, u: &[f64]) -> [f64; CONTROL_DIM] {
        std::array::from_fn(|k| denormalize(u[k], self.control_min[k], self.control_max[k]))
    }

    pub fn state_range(&self, k: usize) -> f64 {
        self.state_max[k] - self.state_min[k]
    }

    pub fn control_range(&self, k: usize) -> f64 {
        self.control_max[k] - self.control_min[k]
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

/// Train / validation / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffled index split with 5 % (at least one) each for validation and test.
pub fn split_indices(n: usize, seed: u64) -> Result<Split<usize>> {
    if n < 5 {
        return Err(invalid(format!("need at least 5 episodes to split, got {n}")));
    }
    let held = ((0.05 * n as f64).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx[..held].to_vec();
    let validation = idx[held..2 * held].to_vec();
    let train = idx[2 * held..].to_vec();
    Ok(Split { train, validation, test })
}

pub fn split_episodes(episodes: Vec<Episode>, seed: u64) -> Result<Split<Episode>> {
    let s = split_indices(episodes.len(), seed)?;
    let mut slots: Vec<Option<Episode>> = episodes.into_iter().map(Some).collect();
    let mut take = |ix: &[usize]| ix.iter().map(|&i| slots[i].take().expect("indices are disjoint")).collect();
    let train = take(&s.train);
    let validation = take(&s.validation);
    let test = take(&s.test);
    Ok(Split { train, validation, test })
}

/// An episode mapped through [`NormalizationStats`], stored as row-per-sample
/// matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEpisode {
    pub states: Matrix,
    pub controls: Matrix,
}

impl NormalizedEpisode {
    pub fn new(e: &Episode, stats: &NormalizationStats) -> Self {
        let n = e.len();
        let mut states = Matrix::zeros(n, STATE_DIM);
        let mut controls = Matrix::zeros(n, CONTROL_DIM);
        for k in 0..n {
            states.row_mut(k).copy_from_slice(&stats.normalize_state(&e.states[k].to_array()));
            controls.row_mut(k).copy_from_slice(&stats.normalize_control(&e.controls[k].to_array()));
        }
        Self { states, controls }
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `z_k = [x_k; …; x_{k+τ−1}]`.
    pub fn concat_state(&self, k: usize, tau: usize) -> Vec<f64> {
        (k..k + tau).flat_map(|i| self.states.row(i).iter().copied()).collect()
    }

    /// Number of concatenated states `len − τ + 1`.
    pub fn concat_len(&self, tau: usize) -> usize {
        (self.len() + 1).saturating_sub(tau)
    }

    /// Control driving `z_k → z_{k+1}`, i.e. `u_{k+τ−1}`.
    pub fn transition_control(&self, k: usize, tau: usize) -> &[f64] {
        self.controls.row(k + tau - 1)
    }

    /// All concatenated states as rows.
    pub fn concat_states(&self, tau: usize) -> Matrix {
        let n = self.concat_len(tau);
        let mut m = Matrix::zeros(n, STATE_DIM * tau);
        for k in 0..n {
            m.row_mut(k).copy_from_slice(&self.concat_state(k, tau));
        }
        m
    }
}

/// A multi-step training sample batch. Row `b` of `x0`, `u_seq[i]` and
/// `x_seq[i]` belong to the same window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub x0: Matrix,
    pub u_seq: Vec<Matrix>,
    pub x_seq: Vec<Matrix>,
}

impl TrainingBatch {
    pub fn batch_size(&self) -> usize {
        self.x0.rows()
    }

    pub fn horizon(&self) -> usize {
        self.u_seq.len()
    }
}

/// Location of one window inside a set of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub episode: usize,
    pub start: usize,
}

/// Window starts `offset + j·p` that leave room for `p` transitions.
pub fn window_starts(len: usize, p: usize, tau: usize, offset: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if p == 0 || tau == 0 || len < tau {
        return out;
    }
    let last = len - tau;
    let mut s = offset;
    while s + p <= last {
        out.push(s);
        s += p;
    }
    out
}

/// Offset drawn uniformly from `0..=p`.
pub fn draw_offset(rng: &mut impl Rng, p: usize) -> usize {
    rng.random_range(0..=p)
}

/// Windows of every episode for one epoch with a shared offset. Episodes
/// too short for a single window are skipped with a warning.
pub fn epoch_windows(episodes: &[NormalizedEpisode], p: usize, tau: usize, offset: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        let starts = window_starts(e.len(), p, tau, offset);
        if starts.is_empty() {
            log::warn!("episode {i} ({} samples) is too short for p = {p}, tau = {tau}; skipped", e.len());
        }
        out.extend(starts.into_iter().map(|start| Window { episode: i, start }));
    }
    out
}

pub fn gather_batch(episodes: &[NormalizedEpisode], windows: &[Window], p: usize, tau: usize) -> TrainingBatch {
    let b = windows.len();
    let d = STATE_DIM * tau;
    let mut x0 = Matrix::zeros(b, d);
    let mut u_seq = vec![Matrix::zeros(b, CONTROL_DIM); p];
    let mut x_seq = vec![Matrix::zeros(b, d); p];
    for (r, w) in windows.iter().enumerate() {
        let e = &episodes[w.episode];
        x0.row_mut(r).copy_from_slice(&e.concat_state(w.start, tau));
        for i in 0..p {
            u_seq[i].row_mut(r).copy_from_slice(e.transition_control(w.start + i, tau));
            x_seq[i].row_mut(r).copy_from_slice(&e.concat_state(w.start + 1 + i, tau));
        }
    }
    TrainingBatch { x0, u_seq, x_seq }
}

/// All windows of one episode at the given offset as a single batch, or
/// `None` (with a warning) when the episode is too short.
pub fn window_sequences(e: &NormalizedEpisode, p: usize, tau: usize, offset: usize) -> Option<TrainingBatch> {
    let windows = epoch_windows(std::slice::from_ref(e), p, tau, offset);
    if windows.is_empty() {
        return None;
    }
    Some(gather_batch(std::slice::from_ref(e), &windows, p, tau))
}

const CSV_HEADER: [&str; 6] = ["t", "v_x", "v_y", "yaw_rate", "steer", "engine"];

pub fn write_csv(e: &Episode, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    write_csv_to(e, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv_to<W: std::io::Write>(e: &Episode, w: &mut csv::Writer<W>) -> Result<()> {
    w.write_record(CSV_HEADER)?;
    for (k, (x, u)) in e.states.iter().zip(&e.controls).enumerate() {
        // `Display` for f64 prints the shortest string that parses back exactly.
        let t = k as f64 * e.dt;
        w.write_record(
            [t, x.v_x, x.v_y, x.yaw_rate, u.steer, u.engine].iter().map(|v| v.to_string()),
        )?;
    }
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Episode> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv_from(file).map_err(|e| match e {
        Error::EmptyEpisode(_) => Error::EmptyEpisode(path.display().to_string()),
        other => other,
    })
}

pub fn read_csv_from<R: std::io::Read>(reader: R) -> Result<Episode> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut records = r.records();
    let header = match records.next() {
        None => return Err(Error::Parse { line: 1, message: "empty file, expected a header row".into() }),
        Some(h) => h.map_err(csv_parse_error)?,
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        return Err(Error::Parse { line: 1, message: format!("expected header {}", CSV_HEADER.join(",")) });
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_parse_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected 6 fields, found {}", rec.len()) });
        }
        let mut v = [0.0; 6];
        for (k, field) in rec.iter().enumerate() {
            v[k] = field.trim().parse::<f64>().map_err(|e| Error::Parse {
                line,
                message: format!("column {}: {e} ({field:?})", CSV_HEADER[k]),
            })?;
            if !v[k].is_finite() {
                return Err(Error::Parse { line, message: format!("column {} is not finite", CSV_HEADER[k]) });
            }
        }
        times.push(v[0]);
        states.push(VehicleState::new(v[1], v[2], v[3]));
        controls.push(ControlInput::new(v[4], v[5]));
    }
    if states.is_empty() {
        return Err(Error::EmptyEpisode("csv has a header but no samples".into()));
    }
    if states.len() < 2 {
        return Err(invalid("episode csv needs at least two samples"));
    }
    let dt = times[1] - times[0];
    Episode::new(dt, states, controls)
}

fn csv_parse_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { line, message: e.to_string() }
}
