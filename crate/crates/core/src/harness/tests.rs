use super::*;
use crate::koopman::LinearLiftedModel;
use crate::lifting::IdentityDictionary;
use crate::plant::ControlInput;

fn tiny(kind: ModelKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.data.episodes = 5;
    c.data.steps = 120;
    c.model.kind = kind;
    c.model.k = 4;
    c.model.encoder_hidden = vec![8];
    c.model.decoder_hidden = vec![8];
    c.model.mlp_hidden = vec![8, 8];
    c.model.elm_hidden = vec![8];
    c.model.random_layer_width = 4;
    c.train.p = 5;
    c.train.batch_size = 8;
    c.train.max_batches = 20;
    c.train.log_every = 10;
    c.evaluate.horizons = vec![1, 5];
    c.robustness.max_batches = 10;
    c.reference = ReferenceSection { episode_steps: 20, blend_steps: 10, hold_steps: 20, hold_speed: None };
    c
}

/// Exact linear dynamics `z⁺ = A z + B u` with an identity dictionary.
fn linear_truth() -> (LinearLiftedModel, NormalizedEpisode) {
    let a = Matrix::from_rows(&[[0.9, 0.05, 0.0], [0.0, 0.8, 0.1], [0.02, 0.0, 0.7]]).unwrap();
    let b = Matrix::from_rows(&[[0.1, 0.0], [0.0, 0.2], [0.05, 0.05]]).unwrap();
    let model = LinearLiftedModel {
        dictionary: AnyDictionary::Identity(IdentityDictionary { dim: 3 }),
        a: a.clone(),
        b: b.clone(),
        c: Matrix::identity(3),
        transition_residual: 0.0,
        output_residual: 0.0,
    };
    let n = 60;
    let mut states = Matrix::zeros(n, 3);
    let mut controls = Matrix::zeros(n, 2);
    let mut x = vec![0.3, 0.5, 0.1];
    for k in 0..n {
        let u = [(k as f64 * 0.3).sin() * 0.5 + 0.5, (k as f64 * 0.7).cos() * 0.5 + 0.5];
        states.row_mut(k).copy_from_slice(&x);
        controls.row_mut(k).copy_from_slice(&u);
        let ax = a.matvec(&x).unwrap();
        let bu = b.matvec(&u).unwrap();
        x = ax.iter().zip(&bu).map(|(p, q)| p + q).collect();
    }
    (model, NormalizedEpisode { states, controls })
}

#[test]
fn preset_defaults_validate() {
    for p in [Preset::Desk, Preset::Paper] {
        ExperimentConfig::preset(p).validate().unwrap();
    }
    let paper = ExperimentConfig::preset(Preset::Paper);
    assert_eq!((paper.data.episodes, paper.data.steps, paper.train.batch_size), (40, 10_000, 64));
    assert_eq!(paper.train.learning_rate, 1e-4);
    assert_eq!(paper.model.k, 10);
    assert_eq!(paper.train.p, 41);
    assert_eq!(paper.train.tau, 2);
}

#[test]
fn overlay_merges_nested_keys() {
    let base = ExperimentConfig::preset(Preset::Desk);
    let cfg = ExperimentConfig::overlay(
        base.clone(),
        "schema_version = 1\npreset = \"desk\"\n[train]\nbatch_size = 16\n[mpc]\nnp = 60\nnc = 50\n",
    )
    .unwrap();
    assert_eq!(cfg.train.batch_size, 16);
    assert_eq!(cfg.train.learning_rate, base.train.learning_rate);
    assert_eq!((cfg.mpc.np, cfg.mpc.nc), (60, 50));
    assert_eq!(cfg.mpc.q_weight, 1000.0);
}

#[test]
fn overlay_requires_schema_version() {
    let base = ExperimentConfig::preset(Preset::Desk);
    let err = ExperimentConfig::overlay(base.clone(), "[train]\nbatch_size = 16\n").unwrap_err();
    assert!(err.to_string().contains("schema_version"), "{err}");
    let err = ExperimentConfig::overlay(base.clone(), "schema_version = 9\n").unwrap_err();
    assert!(err.to_string().contains("not supported"), "{err}");
    let err = ExperimentConfig::overlay(base, "schema_version = 1\n[train]\nbach_size = 3\n").unwrap_err();
    assert!(err.to_string().contains("bach_size"), "{err}");
}

#[test]
fn toml_round_trip() {
    let c = ExperimentConfig::preset(Preset::Paper);
    let back = ExperimentConfig::overlay(ExperimentConfig::preset(Preset::Desk), &c.to_toml().unwrap()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn validation_rejects_bad_values() {
    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.mpc.nc = c.mpc.np;
    let e = c.validate().unwrap_err().to_string();
    assert!(e.contains("N_c") || e.contains("nc"), "{e}");

    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.loss.linear = 0.0;
    assert!(c.validate().unwrap_err().to_string().contains("loss weights"));

    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.mpc.u_max[0] = 900.0;
    assert!(c.validate().is_err());

    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.robustness.repeats = 1;
    assert!(c.validate().unwrap_err().to_string().contains("repeats"));

    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.plant.params = Some("/nonexistent/vehicle.toml".into());
    assert!(c.validate().unwrap_err().to_string().contains("does not exist"));
}

#[test]
fn load_resolves_params_relative_to_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("vehicle.toml"), toml::to_string(&VehicleParams::default()).unwrap()).unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "schema_version = 1\npreset = \"paper\"\n[plant]\nparams = \"vehicle.toml\"\n").unwrap();
    assert_eq!(ExperimentConfig::preset_in_file(&path).unwrap(), Some(Preset::Paper));
    let c = ExperimentConfig::load(Some(&path), Preset::Paper).unwrap();
    assert_eq!(c.plant.params.as_deref(), Some(dir.path().join("vehicle.toml").as_path()));
    assert_eq!(c.vehicle_params().unwrap(), VehicleParams::default());
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, preset) in [("desk.toml", Preset::Desk), ("paper.toml", Preset::Paper)] {
        let path = root.join(file);
        assert_eq!(ExperimentConfig::preset_in_file(&path).unwrap(), Some(preset));
        let mut c = ExperimentConfig::load(Some(&path), preset).unwrap();
        c.vehicle_params().unwrap();
        c.plant.params = None;
        assert_eq!(c, ExperimentConfig::preset(preset), "{file}");
    }
}

#[test]
fn seed_override_reaches_every_stage() {
    let mut c = ExperimentConfig::preset(Preset::Desk);
    c.set_seed(42);
    assert_eq!((c.data.seed, c.model.seed, c.train.seed), (42, 42, 42));
}

#[test]
fn par_map_keeps_order() {
    assert_eq!(par_map(11, |i| i * i), (0..11).map(|i| i * i).collect::<Vec<_>>());
    assert!(par_map(0, |i| i).is_empty());
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let cfg = tiny(ModelKind::DeepEdmd);
    let prep = prepare(&cfg, simulate_episodes(&cfg).unwrap()).unwrap();
    let (linear, _) = linear_truth();
    let models = [
        AnyModel::Linear(linear),
        AnyModel::Deep(DeepKoopmanModel::new(deep_arch(&cfg, true), 3).unwrap()),
        AnyModel::Mlp(MlpModel::new(mlp_arch(&cfg, false), 4).unwrap()),
    ];
    for model in models {
        let ck = Checkpoint { model, stats: prep.stats.clone(), tau: 2 };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        // Truncation anywhere in the parameter block is an error.
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 1]).is_err() || matches!(ck.model, AnyModel::Linear(_)));
    }
}

#[test]
fn checkpoint_errors() {
    assert!(matches!(Checkpoint::read_from(&mut &b"NOTACKPT\x01\0\0\0"[..]), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::load("/nonexistent/model.ckpt"), Err(Error::Checkpoint(_))));
}

#[test]
fn perfect_model_has_zero_error() {
    let (model, e) = linear_truth();
    let r = horizon_rmse(&model, std::slice::from_ref(&e), 1, 10, &[1, 5, 10]).unwrap();
    for row in r {
        assert!(row.iter().all(|v| *v < 1e-12), "{row:?}");
    }
    let curve = error_curve(&model, &e, 1).unwrap();
    assert_eq!(curve.len(), e.len());
    assert!(curve.iter().flatten().all(|v| *v < 1e-10));
}

#[test]
fn one_step_horizon_matches_direct_error() {
    let (mut model, e) = linear_truth();
    model.a[(0, 0)] += 0.03;
    model.b[(1, 1)] -= 0.02;
    let r = horizon_rmse(&model, std::slice::from_ref(&e), 1, 1, &[1]).unwrap()[0];
    let mut s = [0.0; 3];
    let n = e.len() - 1;
    for k in 0..n {
        let x = e.states.row(k);
        let u = e.controls.row(k);
        let pred: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| model.a[(i, j)] * x[j]).sum::<f64>() + (0..2).map(|j| model.b[(i, j)] * u[j]).sum::<f64>())
            .collect();
        for j in 0..3 {
            s[j] += (pred[j] - e.states[(k + 1, j)]).powi(2);
        }
    }
    for j in 0..3 {
        assert!((r[j] - (s[j] / n as f64).sqrt()).abs() < 1e-14);
    }
}

#[test]
fn horizons_beyond_window_are_rejected() {
    let (model, e) = linear_truth();
    assert!(horizon_rmse(&model, std::slice::from_ref(&e), 1, 5, &[6]).is_err());
}

#[test]
fn reference_layout() {
    let seg: Vec<VehicleState> = (0..30).map(|k| VehicleState::new(k as f64 * 0.1, 0.01, -0.02)).collect();
    let r = ReferenceSection { episode_steps: 10, blend_steps: 4, hold_steps: 5, hold_speed: Some(2.0) };
    let out = build_reference(&r, &seg);
    assert_eq!(out.len(), 19);
    assert_eq!(out[9], seg[9]);
    assert_eq!(out[13], VehicleState::new(2.0, 0.0, 0.0));
    assert!(out[14..].iter().all(|s| *s == VehicleState::new(2.0, 0.0, 0.0)));
    let mid = out[11];
    assert!((mid.v_x - (0.9 + 0.5 * 1.1)).abs() < 1e-12);
}

#[test]
fn tracking_summary_measures_increments_from_rest() {
    let mut log = TrackingLog::default();
    for (k, s) in [1.0, 3.0, 2.5].into_iter().enumerate() {
        log.rows.push(crate::dempc::TrackingRow {
            t: k as f64,
            state: VehicleState::new(1.0, 0.0, 0.0),
            reference: VehicleState::new(1.0, 0.0, 0.0),
            control: ControlInput::new(s, -0.001 * k as f64),
            qp_ms: 1.0,
            slack: 0.0,
        });
    }
    let s = summarize_tracking("x", &MpcConfig::default(), &log, 2);
    assert_eq!(s.max_increment, [2.0, 0.001]);
    assert_eq!(s.max_abs_control, [3.0, 0.002]);
    assert_eq!(s.steady_state_error, 0.0);
}

#[test]
fn simulate_smoke_and_reproducible_manifest() {
    let mut cfg = tiny(ModelKind::Edmd);
    cfg.data.episodes = 1;
    cfg.data.steps = 10;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = cmd_simulate(&cfg, a.path()).unwrap();
    let sb = cmd_simulate(&cfg, b.path()).unwrap();
    assert_eq!(sa.manifest_sha256, sb.manifest_sha256);
    let eps = load_corpus(a.path()).unwrap();
    assert_eq!(eps.len(), 1);
    assert_eq!(eps[0].len(), 10);

    // Tampering is detected.
    let f = a.path().join("episode_000.csv");
    let mut text = std::fs::read_to_string(&f).unwrap();
    text.push_str("0.1,0,0,0,0,0\n");
    std::fs::write(&f, text).unwrap();
    assert!(load_corpus(a.path()).unwrap_err().to_string().contains("manifest"));
}

#[test]
fn train_evaluate_mpc_end_to_end_is_reproducible() {
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let data = dir.path().join("data");
            let cfg = tiny(ModelKind::Edmd);
            cmd_simulate(&cfg, &data).unwrap();
            let mut ckpts = Vec::new();
            for kind in [ModelKind::Edmd, ModelKind::DeepEdmd, ModelKind::Mlp] {
                let cfg = tiny(kind);
                let out = dir.path().join(kind.to_string());
                let s = cmd_train(&cfg, Some(&data), &out).unwrap();
                assert_eq!(s.model, kind.to_string());
                ckpts.push(out.join("model.ckpt"));
            }
            let cfg = tiny(ModelKind::Edmd);
            let ev = cmd_evaluate(&cfg, &ckpts, Some(&data), 5, &dir.path().join("eval")).unwrap();
            assert_eq!(ev.models.len(), 3);
            assert_eq!(ev.models[0].horizons, vec![1, 5]);
            let m = cmd_mpc(&cfg, &ckpts[0], Some(&data), None, &dir.path().join("mpc")).unwrap();
            assert_eq!(m.steps, 50);
            assert!(m.max_increment[0] <= cfg.mpc.du_max[0] + 1e-12);
            assert!(cmd_mpc(&cfg, &ckpts[2], Some(&data), None, &dir.path().join("mpc2")).is_err());
            let metrics = std::fs::read(dir.path().join("eval/metrics.csv")).unwrap();
            let curve = std::fs::read(dir.path().join("eval/error_curve.csv")).unwrap();
            let history = std::fs::read(dir.path().join("deep-edmd/history.csv")).unwrap();
            (dir, metrics, curve, history)
        })
        .collect();
    assert_eq!(runs[0].1, runs[1].1);
    assert_eq!(runs[0].2, runs[1].2);
    assert_eq!(runs[0].3, runs[1].3);
}

#[test]
fn robustness_smoke_gives_distinct_traces() {
    let cfg = tiny(ModelKind::DeepEdmd);
    let prep = prepare(&cfg, simulate_episodes(&cfg).unwrap()).unwrap();
    let r = robustness_study(&cfg, &prep, 2).unwrap();
    for trace in &r.traces {
        assert_eq!(trace.len(), 2);
        assert_ne!(trace[0], trace[1]);
    }
    assert!(r.summary.deep.prediction_variance.iter().all(|v| *v > 0.0));
    assert!(r.summary.mlp.prediction_variance.iter().all(|v| *v > 0.0));
    assert!(robustness_study(&cfg, &prep, 1).is_err());
}
