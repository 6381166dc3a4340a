//! Experiment orchestration behind the command-line front end: corpus
//! generation, training, evaluation, the random-layer robustness study and
//! closed-loop MPC runs. Every command writes CSVs plus a JSON summary.

mod checkpoint;
mod config;

pub use checkpoint::{AnyModel, Checkpoint};
pub use config::{
    DataSection, EvaluateSection, ExperimentConfig, ModelKind, ModelSection, PlantSection, Preset, ReferenceSection,
    RobustnessSection, SCHEMA_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::dataset::{
    read_csv, split_episodes, window_sequences, write_csv, NormalizationStats, NormalizedEpisode, STATE_DIM,
};
use crate::dempc::{run_closed_loop, DeMpc, MpcConfig, TrackingLog};
use crate::error::{Error, Result};
use crate::koopman::{
    edmd_fit, elm_edmd_fit, snapshot_pairs, spectrum, train_deep, AnyDictionary, DeepArch, DeepKoopmanModel,
    LossHistory, Predictor,
};
use crate::lifting::{column_mean_std, ElmFeatureMap, TpsDictionary};
use crate::mlp_baseline::{train_mlp, MlpArch, MlpModel};
use crate::numkit::Matrix;
use crate::plant::{generate_episode, Episode, VehicleParams, VehicleState};
use crate::training::{TrainConfig, TrainData};

/// `f(0), …, f(n−1)` spread over the available cores; output order is fixed.
fn par_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut chunks: Vec<Vec<T>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..n).step_by(workers).map(f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    let mut iters: Vec<_> = chunks.iter_mut().map(|c| c.drain(..)).collect();
    for i in 0..n {
        out.push(iters[i % workers].next().expect("chunk length"));
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

// ---------------------------------------------------------------- corpus

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub rows: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dt: f64,
    pub episodes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub episodes: usize,
    pub steps: usize,
    pub manifest_sha256: String,
}

/// The configured corpus, simulated in memory.
pub fn simulate_episodes(cfg: &ExperimentConfig) -> Result<Vec<Episode>> {
    let params = cfg.vehicle_params()?;
    par_map(cfg.data.episodes, |i| {
        generate_episode(&cfg.plant.excitation, cfg.data.steps, cfg.data.seed + i as u64, &params, cfg.plant.dt)
    })
    .into_iter()
    .collect()
}

/// Writes `episode_NNN.csv` files and `manifest.json` into `out`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<SimulateSummary> {
    std::fs::create_dir_all(out)?;
    let episodes = simulate_episodes(cfg)?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, e) in episodes.iter().enumerate() {
        let file = format!("episode_{i:03}.csv");
        let path = out.join(&file);
        write_csv(e, &path)?;
        entries.push(ManifestEntry { file, seed: cfg.data.seed + i as u64, rows: e.len(), sha256: sha256_file(&path)? });
    }
    let manifest = Manifest { schema_version: SCHEMA_VERSION, dt: cfg.plant.dt, episodes: entries };
    let path = out.join("manifest.json");
    write_json(&path, &manifest)?;
    let summary = SimulateSummary { episodes: episodes.len(), steps: cfg.data.steps, manifest_sha256: sha256_file(&path)? };
    write_json(&out.join("simulate_summary.json"), &summary)?;
    Ok(summary)
}

/// Reads a directory written by [`cmd_simulate`], checking every file hash.
pub fn load_corpus(dir: &Path) -> Result<Vec<Episode>> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut out = Vec::with_capacity(manifest.episodes.len());
    for m in &manifest.episodes {
        let p = dir.join(&m.file);
        let digest = sha256_file(&p)?;
        if digest != m.sha256 {
            return Err(Error::Config(format!("{} does not match its manifest hash", p.display())));
        }
        out.push(read_csv(&p)?);
    }
    Ok(out)
}

fn corpus(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<Vec<Episode>> {
    match data_dir {
        Some(d) => load_corpus(d),
        None => simulate_episodes(cfg),
    }
}

/// Normalized split of a corpus.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub stats: NormalizationStats,
    pub data: TrainData,
    pub test: Vec<NormalizedEpisode>,
    pub test_raw: Vec<Episode>,
}

/// Min/max statistics come from the whole corpus; the split uses
/// `data.split_seed`.
pub fn prepare(cfg: &ExperimentConfig, episodes: Vec<Episode>) -> Result<Prepared> {
    let stats = NormalizationStats::from_episodes(&episodes)?;
    prepare_with(cfg, episodes, stats)
}

fn prepare_with(cfg: &ExperimentConfig, episodes: Vec<Episode>, stats: NormalizationStats) -> Result<Prepared> {
    let split = split_episodes(episodes, cfg.data.split_seed)?;
    let norm = |v: &[Episode]| v.iter().map(|e| NormalizedEpisode::new(e, &stats)).collect::<Vec<_>>();
    Ok(Prepared {
        data: TrainData { train: norm(&split.train), validation: norm(&split.validation) },
        test: norm(&split.test),
        test_raw: split.test,
        stats,
    })
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub history: Option<LossHistory>,
    pub seconds: f64,
}

fn deep_arch(cfg: &ExperimentConfig, random_layer: bool) -> DeepArch {
    DeepArch {
        encoder_hidden: cfg.model.encoder_hidden.clone(),
        decoder_hidden: cfg.model.decoder_hidden.clone(),
        random_layer: random_layer.then_some(cfg.model.random_layer_width),
        random_layer_std: cfg.model.random_layer_std,
        ..DeepArch::new(STATE_DIM * cfg.train.tau, 2, cfg.model.k)
    }
}

fn mlp_arch(cfg: &ExperimentConfig, random_layer: bool) -> MlpArch {
    MlpArch {
        hidden: cfg.model.mlp_hidden.clone(),
        random_layer: random_layer.then_some(cfg.model.random_layer_width),
        random_layer_std: cfg.model.random_layer_std,
        ..MlpArch::new(STATE_DIM * cfg.train.tau, 2)
    }
}

/// Fits one model kind on the prepared split. `random_layer` adds the
/// per-batch random layer to the neural models.
pub fn fit(cfg: &ExperimentConfig, prep: &Prepared, kind: ModelKind, random_layer: bool, train: &TrainConfig) -> Result<Trained> {
    let start = Instant::now();
    let tau = train.tau;
    let (model, history) = match kind {
        ModelKind::Edmd | ModelKind::ElmEdmd => {
            let (x, y, u) = snapshot_pairs(&prep.data.train, tau)?;
            let m = if kind == ModelKind::Edmd {
                let (mean, std) = column_mean_std(&x);
                let tps = TpsDictionary::sample_centers(&mean, &std, cfg.model.k, cfg.model.seed)?;
                edmd_fit(AnyDictionary::Tps(tps), &x, &y, &u)?
            } else {
                let map = ElmFeatureMap::random(x.cols(), &cfg.model.elm_hidden, cfg.model.k, cfg.model.seed)?;
                elm_edmd_fit(map, &x, &y, &u)?
            };
            (AnyModel::Linear(m), None)
        }
        ModelKind::DeepEdmd => {
            let init = DeepKoopmanModel::new(deep_arch(cfg, random_layer), cfg.model.seed)?;
            let (m, h) = train_deep(init, &prep.data, train, &cfg.loss)?;
            (AnyModel::Deep(m), Some(h))
        }
        ModelKind::Mlp => {
            let init = MlpModel::new(mlp_arch(cfg, random_layer), cfg.model.seed)?;
            let (m, h) = train_mlp(init, &prep.data, train, &cfg.mlp_loss)?;
            (AnyModel::Mlp(m), Some(h))
        }
    };
    Ok(Trained {
        checkpoint: Checkpoint { model, stats: prep.stats.clone(), tau },
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub batches: usize,
    pub epochs: usize,
    pub initial_val: Option<f64>,
    pub final_val: Option<f64>,
    pub final_train: Option<f64>,
    /// Largest eigenvalue modulus of the lifted transition matrix.
    pub spectral_radius: Option<f64>,
    pub seconds: f64,
}

/// Trains `cfg.model.kind` and writes `model.ckpt`, `history.csv` (neural
/// models), `config.toml` and `train_summary.json`.
pub fn cmd_train(cfg: &ExperimentConfig, data_dir: Option<&Path>, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let prep = prepare(cfg, corpus(cfg, data_dir)?)?;
    let t = fit(cfg, &prep, cfg.model.kind, false, &cfg.train)?;
    t.checkpoint.save(out.join("model.ckpt"))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    if let Some(h) = &t.history {
        h.write_csv(std::fs::File::create(out.join("history.csv"))?)?;
    }
    let spectral_radius = match t.checkpoint.model.as_lifted() {
        Some(m) => Some(spectrum(m.transition())?.spectral_radius),
        None => None,
    };
    let h = t.history.as_ref();
    let summary = TrainSummary {
        model: t.checkpoint.model.kind().into(),
        batches: h.map_or(0, |h| h.batches()),
        epochs: h.map_or(0, |h| h.epochs),
        initial_val: h.and_then(|h| h.first()).map(|r| r.val_recon),
        final_val: h.and_then(|h| h.last()).map(|r| r.val_recon),
        final_train: h.and_then(|h| h.last()).map(|r| r.train_recon),
        spectral_radius,
        seconds: t.seconds,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- evaluation

/// Columns of the most recent state inside a τ-concatenated row.
fn current_block(tau: usize) -> std::ops::Range<usize> {
    (tau - 1) * STATE_DIM..tau * STATE_DIM
}

/// Normalized per-channel RMSE of the current state over steps `1..=h` of
/// every `p_eval`-step window, for each `h` in `horizons` (all `≤ p_eval`).
pub fn horizon_rmse(
    model: &dyn Predictor,
    episodes: &[NormalizedEpisode],
    tau: usize,
    p_eval: usize,
    horizons: &[usize],
) -> Result<Vec<[f64; STATE_DIM]>> {
    if p_eval == 0 || horizons.iter().any(|&h| h == 0 || h > p_eval) {
        return Err(Error::InvalidArgument(format!("horizons must lie in 1..={p_eval}")));
    }
    let cols = current_block(tau);
    // Squared error per step and channel, summed over windows.
    let mut per_step = vec![[0.0; STATE_DIM]; p_eval];
    let mut windows = 0usize;
    for e in episodes {
        let Some(b) = window_sequences(e, p_eval, tau, 0) else { continue };
        let pred = model.predict_batch(&b.x0, &b.u_seq)?;
        for (i, truth) in b.x_seq.iter().enumerate() {
            for r in 0..truth.rows() {
                for (j, c) in cols.clone().enumerate() {
                    per_step[i][j] += (pred[i + 1][(r, c)] - truth[(r, c)]).powi(2);
                }
            }
        }
        windows += b.batch_size();
    }
    if windows == 0 {
        return Err(Error::InvalidArgument(format!("no test window of {p_eval} steps")));
    }
    Ok(horizons
        .iter()
        .map(|&h| {
            let mut s = [0.0; STATE_DIM];
            for step in &per_step[..h] {
                for j in 0..STATE_DIM {
                    s[j] += step[j];
                }
            }
            s.map(|v| (v / (h * windows) as f64).sqrt())
        })
        .collect())
}

/// Absolute normalized error of an open-loop rollout over a whole episode,
/// one entry per step (entry 0 is the start state).
pub fn error_curve(model: &dyn Predictor, e: &NormalizedEpisode, tau: usize) -> Result<Vec<[f64; STATE_DIM]>> {
    let n = e.concat_len(tau);
    if n < 2 {
        return Err(Error::InvalidArgument("episode too short for a rollout".into()));
    }
    let x0 = Matrix::from_vec(1, STATE_DIM * tau, e.concat_state(0, tau))?;
    let us = (0..n - 1)
        .map(|k| Matrix::from_vec(1, e.controls.cols(), e.transition_control(k, tau).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let pred = model.predict_batch(&x0, &us)?;
    let cols = current_block(tau);
    Ok(pred
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let truth = e.concat_state(k, tau);
            let mut err = [0.0; STATE_DIM];
            for (j, c) in cols.clone().enumerate() {
                err[j] = (p[(0, c)] - truth[c]).abs();
            }
            err
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub checkpoint: PathBuf,
    pub horizons: Vec<usize>,
    /// `rmse[i]` is `[v_x, v_y, yaw_rate]` at `horizons[i]`.
    pub rmse: Vec<[f64; STATE_DIM]>,
    /// Mean absolute error of the full-episode rollout.
    pub rollout_mae: [f64; STATE_DIM],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSummary {
    pub p_eval: usize,
    pub test_episodes: usize,
    pub models: Vec<ModelMetrics>,
}

/// Evaluates each checkpoint on the held-out test episodes. Writes
/// `metrics.csv`, `error_curve.csv` and `evaluate_summary.json`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    data_dir: Option<&Path>,
    p_eval: usize,
    out: &Path,
) -> Result<EvaluateSummary> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoint to evaluate".into()));
    }
    let loaded = checkpoints.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out)?;
    let episodes = corpus(cfg, data_dir)?;
    let horizons: Vec<usize> = cfg.evaluate.horizons.iter().copied().filter(|&h| h <= p_eval).collect();
    let horizons = if horizons.is_empty() { vec![p_eval] } else { horizons };

    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;
    metrics.write_record(["model", "horizon", "rmse_v_x", "rmse_v_y", "rmse_yaw_rate"])?;
    let mut curve = csv::Writer::from_path(out.join("error_curve.csv"))?;
    curve.write_record(["model", "episode", "step", "err_v_x", "err_v_y", "err_yaw_rate"])?;
    let mut models = Vec::new();
    let mut test_episodes = 0;
    for (ck, path) in loaded.iter().zip(checkpoints) {
        // Each model sees the data through its own normalization.
        let prep = prepare_with(cfg, episodes.clone(), ck.stats.clone())?;
        test_episodes = prep.test.len();
        let model = ck.model.as_predictor();
        let rmse = horizon_rmse(model, &prep.test, ck.tau, p_eval, &horizons)?;
        let name = ck.model.kind().to_string();
        for (h, r) in horizons.iter().zip(&rmse) {
            metrics.write_record([name.clone(), h.to_string(), r[0].to_string(), r[1].to_string(), r[2].to_string()])?;
        }
        let mut mae = [0.0; STATE_DIM];
        let mut count = 0usize;
        for (ei, e) in prep.test.iter().enumerate() {
            for (k, err) in error_curve(model, e, ck.tau)?.iter().enumerate() {
                curve.write_record([
                    name.clone(),
                    ei.to_string(),
                    k.to_string(),
                    err[0].to_string(),
                    err[1].to_string(),
                    err[2].to_string(),
                ])?;
                for j in 0..STATE_DIM {
                    mae[j] += err[j];
                }
                count += 1;
            }
        }
        models.push(ModelMetrics {
            model: name,
            checkpoint: path.clone(),
            horizons: horizons.clone(),
            rmse,
            rollout_mae: mae.map(|v| v / count.max(1) as f64),
        });
    }
    metrics.flush()?;
    curve.flush()?;
    let summary = EvaluateSummary { p_eval, test_episodes, models };
    write_json(&out.join("evaluate_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- robustness

/// Statistics of one random-layer variant over the repeated predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub model: String,
    /// Mean over repeats of the per-channel `p`-step RMSE.
    pub rmse_mean: [f64; STATE_DIM],
    /// Variance over repeats of the per-channel `p`-step RMSE.
    pub rmse_variance: [f64; STATE_DIM],
    /// Variance of the predicted state across repeats, averaged over every
    /// predicted step of every test window.
    pub prediction_variance: [f64; STATE_DIM],
    /// Mean training loss over the last tenth of the batches.
    pub train_loss_tail: f64,
    pub train_loss_first: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub repeats: usize,
    pub batches: usize,
    pub deep: VariantStats,
    pub mlp: VariantStats,
}

/// Prediction band of one test episode: truth plus mean and standard
/// deviation across repeats, per step.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub step: usize,
    pub truth: [f64; STATE_DIM],
    pub mean: [f64; STATE_DIM],
    pub std: [f64; STATE_DIM],
}

pub struct RobustnessReport {
    pub summary: RobustnessSummary,
    pub deep_bands: Vec<BandRow>,
    pub mlp_bands: Vec<BandRow>,
    /// Per-repeat RMSE, `[deep, mlp]`.
    pub traces: [Vec<[f64; STATE_DIM]>; 2],
    pub histories: [LossHistory; 2],
}

fn redrawn(model: &AnyModel, seed: u64) -> AnyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = model.clone();
    match &mut m {
        AnyModel::Deep(d) => d.redraw_random_layer(&mut rng),
        AnyModel::Mlp(n) => n.redraw_random_layer(&mut rng),
        AnyModel::Linear(_) => {}
    }
    m
}

fn variant_stats(
    t: &Trained,
    prep: &Prepared,
    repeats: usize,
    p: usize,
    seed: u64,
) -> Result<(VariantStats, Vec<BandRow>, Vec<[f64; STATE_DIM]>)> {
    let tau = t.checkpoint.tau;
    let cols = current_block(tau);
    let passes = par_map(repeats, |r| -> Result<(Vec<Matrix>, [f64; STATE_DIM])> {
        let m = redrawn(&t.checkpoint.model, seed.wrapping_add(r as u64));
        let model = m.as_predictor();
        let mut preds = Vec::new();
        for e in &prep.test {
            let Some(b) = window_sequences(e, p, tau, 0) else { continue };
            let out = model.predict_batch(&b.x0, &b.u_seq)?;
            preds.extend(out.into_iter().skip(1));
        }
        let rmse = horizon_rmse(model, &prep.test, tau, p, &[p])?[0];
        Ok((preds, rmse))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let n = repeats as f64;
    let mut pv = [0.0; STATE_DIM];
    let mut cells = 0usize;
    let first = &passes[0].0;
    for (s, m0) in first.iter().enumerate() {
        for row in 0..m0.rows() {
            for (j, c) in cols.clone().enumerate() {
                let vals: Vec<f64> = passes.iter().map(|(pr, _)| pr[s][(row, c)]).collect();
                let mean = vals.iter().sum::<f64>() / n;
                pv[j] += vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            }
            cells += 1;
        }
    }
    let prediction_variance = pv.map(|v| v / cells.max(1) as f64);
    let traces: Vec<[f64; STATE_DIM]> = passes.iter().map(|(_, r)| *r).collect();
    let mut rmse_mean = [0.0; STATE_DIM];
    let mut rmse_variance = [0.0; STATE_DIM];
    for j in 0..STATE_DIM {
        rmse_mean[j] = traces.iter().map(|r| r[j]).sum::<f64>() / n;
        rmse_variance[j] = traces.iter().map(|r| (r[j] - rmse_mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
    }

    // Bands over the first test episode, window after window.
    let mut bands = Vec::new();
    if let Some(b) = prep.test.first().and_then(|e| window_sequences(e, p, tau, 0)) {
        for w in 0..b.batch_size() {
            for i in 0..p {
                let mut row = BandRow { step: w * p + i + 1, truth: [0.0; 3], mean: [0.0; 3], std: [0.0; 3] };
                for (j, c) in cols.clone().enumerate() {
                    row.truth[j] = b.x_seq[i][(w, c)];
                    let vals: Vec<f64> = passes.iter().map(|(pr, _)| pr[i][(w, c)]).collect();
                    let mean = vals.iter().sum::<f64>() / n;
                    row.mean[j] = mean;
                    row.std[j] = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                }
                bands.push(row);
            }
        }
    }

    let losses = t.history.as_ref().map(|h| h.batch_loss.clone()).unwrap_or_default();
    let tail = (losses.len() / 10).max(1).min(losses.len().max(1));
    let train_loss_tail = if losses.is_empty() { f64::NAN } else { losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64 };
    let stats = VariantStats {
        model: t.checkpoint.model.kind().into(),
        rmse_mean,
        rmse_variance,
        prediction_variance,
        train_loss_tail,
        train_loss_first: losses.first().copied().unwrap_or(f64::NAN),
        seconds: t.seconds,
    };
    Ok((stats, bands, traces))
}

/// Trains Deep EDMD and the MLP with the per-batch random layer, then
/// predicts the test windows `repeats` times with fresh random layers.
pub fn robustness_study(cfg: &ExperimentConfig, prep: &Prepared, repeats: usize) -> Result<RobustnessReport> {
    if repeats < 2 {
        return Err(Error::InvalidArgument(format!("repeats must be at least 2, got {repeats}")));
    }
    let train = TrainConfig { max_batches: cfg.robustness.max_batches, ..cfg.train.clone() };
    let p = train.p;
    let seed = cfg.model.seed.wrapping_mul(1_000_003).wrapping_add(17);
    let deep = fit(cfg, prep, ModelKind::DeepEdmd, true, &train)?;
    let (ds, db, dt) = variant_stats(&deep, prep, repeats, p, seed)?;
    let mlp = fit(cfg, prep, ModelKind::Mlp, true, &train)?;
    let (ms, mb, mt) = variant_stats(&mlp, prep, repeats, p, seed)?;
    let batches = deep.history.as_ref().map_or(0, |h| h.batches());
    Ok(RobustnessReport {
        summary: RobustnessSummary { repeats, batches, deep: ds, mlp: ms },
        deep_bands: db,
        mlp_bands: mb,
        traces: [dt, mt],
        histories: [deep.history.unwrap_or_default(), mlp.history.unwrap_or_default()],
    })
}

/// Writes `robustness_repeats.csv`, `robustness_bands.csv`,
/// `robustness_loss.csv` and `robustness_summary.json`.
pub fn cmd_robustness(cfg: &ExperimentConfig, data_dir: Option<&Path>, repeats: usize, out: &Path) -> Result<RobustnessSummary> {
    std::fs::create_dir_all(out)?;
    let prep = prepare(cfg, corpus(cfg, data_dir)?)?;
    let report = robustness_study(cfg, &prep, repeats)?;
    let names = ["deep-edmd", "mlp"];

    let mut w = csv::Writer::from_path(out.join("robustness_repeats.csv"))?;
    w.write_record(["model", "repeat", "rmse_v_x", "rmse_v_y", "rmse_yaw_rate"])?;
    for (name, trace) in names.iter().zip(&report.traces) {
        for (r, v) in trace.iter().enumerate() {
            w.write_record([name.to_string(), r.to_string(), v[0].to_string(), v[1].to_string(), v[2].to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("robustness_bands.csv"))?;
    w.write_record([
        "model", "step", "true_v_x", "true_v_y", "true_yaw_rate", "mean_v_x", "mean_v_y", "mean_yaw_rate", "std_v_x",
        "std_v_y", "std_yaw_rate",
    ])?;
    for (name, bands) in names.iter().zip([&report.deep_bands, &report.mlp_bands]) {
        for b in bands {
            let mut rec = vec![name.to_string(), b.step.to_string()];
            rec.extend(b.truth.iter().chain(&b.mean).chain(&b.std).map(|v| v.to_string()));
            w.write_record(rec)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("robustness_loss.csv"))?;
    w.write_record(["model", "batch", "loss"])?;
    for (name, h) in names.iter().zip(&report.histories) {
        for (b, l) in h.batch_loss.iter().enumerate() {
            w.write_record([name.to_string(), (b + 1).to_string(), l.to_string()])?;
        }
    }
    w.flush()?;

    write_json(&out.join("robustness_summary.json"), &report.summary)?;
    Ok(report.summary)
}

// ---------------------------------------------------------------- MPC

/// Reference built from the first test episode per [`ReferenceSection`].
pub fn build_reference(r: &ReferenceSection, segment: &[VehicleState]) -> Vec<VehicleState> {
    let mut out: Vec<VehicleState> = segment.iter().take(r.episode_steps).copied().collect();
    let from = out.last().copied().unwrap_or_default();
    let target = VehicleState::new(r.hold_speed.unwrap_or(from.v_x), 0.0, 0.0);
    for k in 1..=r.blend_steps {
        let a = k as f64 / r.blend_steps as f64;
        let (f, t) = (from.to_array(), target.to_array());
        out.push(VehicleState::from_slice(&[0, 1, 2].map(|j| f[j] + a * (t[j] - f[j]))));
    }
    out.extend(std::iter::repeat_n(target, r.hold_steps));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSummary {
    pub model: String,
    pub np: usize,
    pub nc: usize,
    pub steps: usize,
    pub rmse: [f64; STATE_DIM],
    /// `RMS‖x − r‖ / RMS‖r‖` over the whole run.
    pub relative_error: f64,
    /// Same ratio over the closing `steady_rows` rows.
    pub steady_state_error: f64,
    pub steady_rows: usize,
    pub qp_ms_mean: f64,
    pub qp_ms_p95: f64,
    pub faults: usize,
    pub max_slack: f64,
    /// Largest `|u_t − u_{t−1}|` per channel, the first step measured from rest.
    pub max_increment: [f64; 2],
    pub max_abs_control: [f64; 2],
}

pub fn summarize_tracking(model: &str, mpc: &MpcConfig, log: &TrackingLog, steady_rows: usize) -> MpcSummary {
    let n = log.rows.len();
    let steady_rows = steady_rows.clamp(1, n.max(1));
    let mut max_increment = [0.0f64; 2];
    let mut max_abs_control = [0.0f64; 2];
    let mut prev = [0.0; 2];
    for r in &log.rows {
        let u = r.control.to_array();
        for j in 0..2 {
            max_increment[j] = max_increment[j].max((u[j] - prev[j]).abs());
            max_abs_control[j] = max_abs_control[j].max(u[j].abs());
        }
        prev = u;
    }
    MpcSummary {
        model: model.into(),
        np: mpc.np,
        nc: mpc.nc,
        steps: n,
        rmse: log.rmse(),
        relative_error: log.relative_error_from(0),
        steady_state_error: log.relative_error_from(n.saturating_sub(steady_rows)),
        steady_rows,
        qp_ms_mean: log.qp_ms_mean(),
        qp_ms_p95: log.qp_ms_percentile(0.95),
        faults: log.faults,
        max_slack: log.max_slack(),
        max_increment,
        max_abs_control,
    }
}

/// Closed loop from rest along `reference`; the steady-state window is the
/// last quarter of the hold segment (or last tenth of the run).
pub fn run_mpc(
    ck: &Checkpoint,
    mpc: &MpcConfig,
    params: &VehicleParams,
    reference: &[VehicleState],
    hold_steps: usize,
) -> Result<(TrackingLog, MpcSummary)> {
    let model = ck.model.as_lifted().ok_or_else(|| {
        Error::Config(format!("{} checkpoints cannot drive the MPC; use a lifted linear model", ck.model.kind()))
    })?;
    let mut ctrl = DeMpc::new(model, ck.stats.clone(), mpc.clone(), ck.tau)?;
    let log = run_closed_loop(&mut ctrl, params, reference, reference.len())?;
    let steady = if hold_steps > 0 { hold_steps / 4 } else { reference.len() / 10 };
    let summary = summarize_tracking(ck.model.kind(), mpc, &log, steady);
    Ok((log, summary))
}

/// Tracks either the states of `reference_csv` or the configured reference.
/// Writes `tracking.csv` and `mpc_summary.json`.
pub fn cmd_mpc(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data_dir: Option<&Path>,
    reference_csv: Option<&Path>,
    out: &Path,
) -> Result<MpcSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    std::fs::create_dir_all(out)?;
    let (reference, hold) = match reference_csv {
        Some(p) => (read_csv(p)?.states, 0),
        None => {
            let prep = prepare_with(cfg, corpus(cfg, data_dir)?, ck.stats.clone())?;
            let first = prep.test_raw.first().map(|e| e.states.as_slice()).unwrap_or(&[]);
            (build_reference(&cfg.reference, first), cfg.reference.hold_steps)
        }
    };
    let (log, summary) = run_mpc(&ck, &cfg.mpc, &cfg.vehicle_params()?, &reference, hold)?;
    log.write_csv(std::fs::File::create(out.join("tracking.csv"))?)?;
    write_json(&out.join("mpc_summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests;
