use super::*;
use crate::dataset::NormalizedEpisode;
use crate::koopman::{edmd_fit, snapshot_pairs, AnyDictionary, LinearLiftedModel};
use crate::lifting::{column_mean_std, IdentityDictionary, TpsDictionary};
use crate::numkit::spd_inverse;
use crate::plant::{generate_episode, ExcitationPolicy};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-s..s)).collect()).unwrap()
}

fn vec_of(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-s..s)).collect()
}

fn loose_bounds(m: usize, du: f64) -> IncrementBounds {
    IncrementBounds {
        du_min: vec![-du; m],
        du_max: vec![du; m],
        u_min: vec![-1e3; m],
        u_max: vec![1e3; m],
        u_prev: vec![0.0; m],
    }
}

#[test]
fn augment_scalar_example() {
    let aug = augment(&Matrix::from_rows(&[[2.0]]).unwrap(), &Matrix::from_rows(&[[3.0]]).unwrap()).unwrap();
    assert_eq!(aug.a_bar, Matrix::from_rows(&[[2.0, 3.0], [0.0, 1.0]]).unwrap());
    assert_eq!(aug.b_bar, Matrix::from_rows(&[[3.0], [1.0]]).unwrap());
    assert_eq!(aug.c, Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
}

#[test]
fn augmented_step_with_zero_increment() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, 4, 4, 1.0), random(&mut rng, 4, 2, 1.0));
    let aug = augment(&a, &b).unwrap();
    let phi = vec_of(&mut rng, 4, 1.0);
    let u = vec_of(&mut rng, 2, 1.0);
    let xi: Vec<f64> = phi.iter().chain(&u).copied().collect();
    assert_eq!(aug.c.matvec(&xi).unwrap(), phi);
    let next = aug.step(&xi, &[0.0, 0.0]).unwrap();
    let expect: Vec<f64> = a.matvec(&phi).unwrap().iter().zip(b.matvec(&u).unwrap()).map(|(x, y)| x + y).collect();
    assert!(aug.c.matvec(&next).unwrap().iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-14));
    assert_eq!(&next[4..], &u[..]);
}

#[test]
fn single_step_prediction_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let aug = augment(&random(&mut rng, 3, 3, 1.0), &random(&mut rng, 3, 2, 1.0)).unwrap();
    let (g, t) = build_prediction(&aug, 1, 1).unwrap();
    assert_eq!(g, aug.c.matmul(&aug.a_bar).unwrap());
    assert_eq!(t, aug.c.matmul(&aug.b_bar).unwrap());
}

#[test]
fn identity_transition_prediction_matrices() {
    let aug = AugmentedModel {
        a_bar: Matrix::identity(3),
        b_bar: Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap(),
        c: Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap(),
    };
    let (g, t) = build_prediction(&aug, 4, 2).unwrap();
    let cb = aug.c.matmul(&aug.b_bar).unwrap();
    for i in 0..4 {
        assert_eq!(g.block(2 * i, 0, 2, 3), aug.c);
        for j in 0..2 {
            let expect = if j <= i { cb.clone() } else { Matrix::zeros(2, 1) };
            assert_eq!(t.block(2 * i, j, 2, 1), expect);
        }
    }
    assert!(build_prediction(&aug, 1, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn prediction_matches_simulation(seed in 0u64..1_000_000, l in 1usize..6, m in 1usize..3, np in 1usize..=8, nc_frac in 0.0f64..1.0) {
        let nc = 1 + ((np - 1) as f64 * nc_frac) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aug = augment(&random(&mut rng, l, l, 0.7), &random(&mut rng, l, m, 1.0)).unwrap();
        let (g, t) = build_prediction(&aug, np, nc).unwrap();
        let xi = vec_of(&mut rng, l + m, 1.0);
        let du = vec_of(&mut rng, m * nc, 1.0);
        let mut y = g.matvec(&xi).unwrap();
        y.iter_mut().zip(t.matvec(&du).unwrap()).for_each(|(a, b)| *a += b);
        let mut state = xi.clone();
        for i in 0..np {
            let inc: Vec<f64> = if i < nc { du[i * m..(i + 1) * m].to_vec() } else { vec![0.0; m] };
            state = aug.step(&state, &inc).unwrap();
            let out = aug.c.matvec(&state).unwrap();
            for (a, b) in out.iter().zip(&y[i * l..(i + 1) * l]) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            }
        }
    }
}

fn small_condenser(seed: u64, q: f64) -> (AugmentedModel, Condenser, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug = augment(&random(&mut rng, 3, 3, 0.5), &random(&mut rng, 3, 2, 0.5)).unwrap();
    let c = Condenser::new(&aug, 4, 2, &[q; 3], 5.0, 10.0).unwrap();
    let xi = vec_of(&mut rng, 5, 1.0);
    (aug, c, xi)
}

#[test]
fn tracking_state_needs_no_increment() {
    let (_, c, xi) = small_condenser(3, 1000.0);
    let y_ref = c.gamma.matvec(&xi).unwrap();
    let qp = c.condense(&xi, &y_ref, &loose_bounds(2, 0.1)).unwrap();
    let s = ActiveSetSolver::new(&qp.hessian).unwrap().solve(&qp, 100, 1e-10).unwrap();
    assert!(s.decision.iter().all(|v| v.abs() < 1e-12));
    assert_eq!(s.slack, 0.0);
    assert!(s.objective.abs() < 1e-12);
    assert_eq!(qp.constant, 0.0);
}

#[test]
fn zero_output_weight_ignores_reference() {
    let (_, c, xi) = small_condenser(4, 0.0);
    let y_ref = vec![5.0; 12];
    let qp = c.condense(&xi, &y_ref, &loose_bounds(2, 0.1)).unwrap();
    let s = ActiveSetSolver::new(&qp.hessian).unwrap().solve(&qp, 100, 1e-10).unwrap();
    assert!(s.decision.iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn condense_rejects_bad_dimensions() {
    let (_, c, xi) = small_condenser(5, 1.0);
    assert!(c.condense(&xi[..4], &[0.0; 12], &loose_bounds(2, 0.1)).is_err());
    assert!(c.condense(&xi, &[0.0; 11], &loose_bounds(2, 0.1)).is_err());
}

/// `ΔUᵀH₀ΔU + g₀ᵀΔU + c + ρε²` with the smallest slack that makes `ΔU`
/// satisfy the widened increment bounds; `None` when a cumulative bound fails.
fn oracle_objective(qp: &QpProblem, x: &[f64]) -> Option<f64> {
    let d = x.len();
    let mut eps: f64 = 0.0;
    for i in 0..d {
        eps = eps.max(x[i] - qp.upper[i]).max(qp.lower[i] - x[i]);
    }
    let cb = qp.cumulative.as_ref().unwrap();
    let mut run = cb.start.clone();
    for (i, v) in x.iter().enumerate() {
        let j = i % cb.channels;
        run[j] += v;
        if run[j] < cb.lower[j] - 1e-12 || run[j] > cb.upper[j] + 1e-12 {
            return None;
        }
    }
    let mut z = x.to_vec();
    z.push(eps);
    Some(qp.objective(&z))
}

/// Zooming grid search over the increments.
fn grid_oracle(qp: &QpProblem, half_width: f64) -> f64 {
    let d = qp.decision_dim();
    let mut center = vec![0.0; d];
    let mut h = half_width;
    let pts = 9usize;
    let mut best = f64::INFINITY;
    for _ in 0..60 {
        let mut best_x = center.clone();
        for code in 0..pts.pow(d as u32) {
            let mut c = code;
            let x: Vec<f64> = (0..d)
                .map(|k| {
                    let i = c % pts;
                    c /= pts;
                    center[k] + h * (2.0 * i as f64 / (pts - 1) as f64 - 1.0)
                })
                .collect();
            if let Some(f) = oracle_objective(qp, &x) {
                if f < best {
                    best = f;
                    best_x = x;
                }
            }
        }
        center = best_x;
        h *= 0.5;
    }
    best
}

#[test]
fn small_instance_matches_grid_oracle() {
    for seed in 0..4 {
        let (_, c, xi) = small_condenser(10 + seed, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y_ref = vec_of(&mut rng, 12, 1.0);
        let bounds = IncrementBounds {
            du_min: vec![-0.05, -0.1],
            du_max: vec![0.05, 0.1],
            u_min: vec![-0.08, -1.0],
            u_max: vec![0.08, 1.0],
            u_prev: vec![0.02, 0.0],
        };
        let qp = c.condense(&xi, &y_ref, &bounds).unwrap();
        let s = ActiveSetSolver::new(&qp.hessian).unwrap().solve(&qp, 200, 1e-12).unwrap();
        assert!(qp.violation(&s.decision, s.slack) < 1e-9);
        let oracle = grid_oracle(&qp, 1.0);
        assert!((s.objective - oracle).abs() <= 1e-4 * (1.0 + oracle.abs()), "{} vs {oracle}", s.objective);
        assert!(s.objective <= oracle + 1e-9);
    }
}

#[test]
fn slack_stays_inactive_inside_bounds() {
    let (_, c, xi) = small_condenser(20, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let y_ref: Vec<f64> = c.gamma.matvec(&xi).unwrap().iter().map(|v| v + rng.random_range(-0.01..0.01)).collect();
    let qp = c.condense(&xi, &y_ref, &loose_bounds(2, 10.0)).unwrap();
    let s = ActiveSetSolver::new(&qp.hessian).unwrap().solve(&qp, 100, 1e-12).unwrap();
    assert!(s.slack <= 1e-8);
    // Unconstrained optimum −(2H₀)⁻¹g₀.
    let d = 4;
    let h0 = qp.hessian.block(0, 0, d, d).scale(2.0);
    let x = spd_inverse(&h0).unwrap().matvec(&qp.linear[..d]).unwrap();
    for (a, b) in s.decision.iter().zip(&x) {
        assert!((a + b).abs() < 1e-8);
    }
}

#[test]
fn one_step_horizon_is_least_squares_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let aug = augment(&random(&mut rng, 3, 3, 0.8), &random(&mut rng, 3, 2, 1.0)).unwrap();
    let q = [2.0, 1.0, 3.0];
    let c = Condenser::new(&aug, 1, 1, &q, 0.5, 10.0).unwrap();
    let xi = vec_of(&mut rng, 5, 1.0);
    let y_ref = vec_of(&mut rng, 3, 1.0);
    let inf = IncrementBounds {
        du_min: vec![f64::NEG_INFINITY; 2],
        du_max: vec![f64::INFINITY; 2],
        u_min: vec![f64::NEG_INFINITY; 2],
        u_max: vec![f64::INFINITY; 2],
        u_prev: vec![0.0; 2],
    };
    let qp = c.condense(&xi, &y_ref, &inf).unwrap();
    let s = ActiveSetSolver::new(&qp.hessian).unwrap().solve(&qp, 50, 1e-12).unwrap();
    // (ΘᵀQΘ + R)⁻¹ΘᵀQ(Y − Γξ)
    let th = &c.theta;
    let qm = Matrix::from_diag(&q);
    let lhs = th.tr_matmul(&qm.matmul(th).unwrap()).unwrap().add(&Matrix::identity(2).scale(0.5)).unwrap();
    let mut err = y_ref.clone();
    err.iter_mut().zip(c.gamma.matvec(&xi).unwrap()).for_each(|(a, b)| *a -= b);
    let rhs = th.tr_matvec(&qm.matvec(&err).unwrap()).unwrap();
    let expect = spd_inverse(&lhs).unwrap().matvec(&rhs).unwrap();
    for (a, b) in s.decision.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

/// Unit normalization so physical and model coordinates coincide.
fn unit_stats() -> NormalizationStats {
    NormalizationStats::new([0.0; 3], [1.0; 3], [0.0; 2], [1.0; 2]).unwrap()
}

/// `x⁺ = 0.9x + Gu` as an identity-dictionary lifted model.
fn linear_model() -> LinearLiftedModel {
    LinearLiftedModel {
        dictionary: AnyDictionary::Identity(IdentityDictionary { dim: 3 }),
        a: Matrix::identity(3).scale(0.9),
        b: Matrix::from_rows(&[[0.1, 0.0], [0.0, 0.1], [0.05, 0.05]]).unwrap(),
        c: Matrix::identity(3),
        transition_residual: 0.0,
        output_residual: 0.0,
    }
}

fn linear_plant(x: &VehicleState, u: &ControlInput) -> VehicleState {
    VehicleState::new(
        0.9 * x.v_x + 0.1 * u.steer,
        0.9 * x.v_y + 0.1 * u.engine,
        0.9 * x.yaw_rate + 0.05 * (u.steer + u.engine),
    )
}

#[test]
fn equilibrium_reference_gives_zero_control() {
    let mut m = linear_model();
    m.a = Matrix::identity(3);
    let mut ctrl = DeMpc::new(&m, unit_stats(), MpcConfig::default(), 1).unwrap();
    let x = VehicleState::new(0.3, 0.2, 0.1);
    let s = ctrl.step(&x, &vec![x; 10]).unwrap();
    assert_eq!(s.control, ControlInput::default());
    assert!(s.slack <= 1e-12);
}

#[test]
fn applied_increment_respects_bound() {
    let m = linear_model();
    let cfg = MpcConfig::default();
    let mut ctrl = DeMpc::new(&m, unit_stats(), cfg.clone(), 1).unwrap();
    let far = VehicleState::new(50.0, 5.0, 30.0);
    let mut prev = [0.0; 2];
    for _ in 0..5 {
        let s = ctrl.step(&VehicleState::default(), &vec![far; 10]).unwrap();
        let u = s.control.to_array();
        for j in 0..2 {
            assert!((u[j] - prev[j]).abs() <= cfg.du_max[j] * (1.0 + 1e-12));
            assert!(u[j] >= cfg.u_min[j] && u[j] <= cfg.u_max[j]);
        }
        prev = u;
    }
    // The unconstrained move is far larger, so the bound is active.
    assert!((prev[0] - 5.0 * cfg.du_max[0]).abs() < 1e-9);
}

#[test]
fn closed_loop_linear_model_reaches_step_reference() {
    let m = linear_model();
    let mut ctrl = DeMpc::new(&m, unit_stats(), MpcConfig::default(), 1).unwrap();
    // Steady state of the plant for u = [0.1, 0.05].
    let target = VehicleState::new(0.1, 0.05, 0.075);
    let log = run_loop_with(&mut ctrl, VehicleState::default(), &vec![target; 80], 80, linear_plant).unwrap();
    assert_eq!(log.faults, 0);
    for r in &log.rows[50..] {
        let e = r.state.to_array().iter().zip(target.to_array()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(e < 1e-3, "offset {e} at t = {}", r.t);
    }
}

#[test]
fn qp_failure_holds_previous_control() {
    let m = linear_model();
    let cfg = MpcConfig { max_qp_iterations: 1, ..MpcConfig::default() };
    let mut ctrl = DeMpc::new(&m, unit_stats(), cfg, 1).unwrap();
    ctrl.reset(ControlInput::new(1.0, 0.01));
    let s = ctrl.step(&VehicleState::default(), &vec![VehicleState::new(50.0, 5.0, 30.0); 10]).unwrap();
    assert!(s.fault.is_some());
    assert_eq!(s.control, ControlInput::new(1.0, 0.01));
    assert_eq!(ctrl.faults, 1);
}

#[test]
fn zero_reference_from_rest_stays_near_zero() {
    let p = VehicleParams::default();
    let eps: Vec<_> = (0..2).map(|i| generate_episode(&ExcitationPolicy::default(), 600, i, &p, 0.01).unwrap()).collect();
    let stats = NormalizationStats::from_episodes(&eps).unwrap();
    let ne: Vec<_> = eps.iter().map(|e| NormalizedEpisode::new(e, &stats)).collect();
    let (x, y, u) = snapshot_pairs(&ne, 2).unwrap();
    let (mean, std) = column_mean_std(&x);
    let tps = TpsDictionary::sample_centers(&mean, &std, 20, 1).unwrap();
    let m = edmd_fit(AnyDictionary::Tps(tps), &x, &y, &u).unwrap();
    let mut ctrl = DeMpc::new(&m, stats, MpcConfig::default(), 2).unwrap();
    let log = run_closed_loop(&mut ctrl, &p, &[VehicleState::default(); 100], 100).unwrap();
    assert_eq!(log.faults, 0);
    // Rest is not the origin in normalized coordinates. Without the RBF
    // features (identity dictionary, no constant observable) the model
    // predicts a drift at rest and the controller answers with full throttle.
    for r in &log.rows {
        assert!(r.state.to_array().iter().all(|v| v.abs() < 0.05), "{:?}", r.state);
        assert!(r.control.steer.abs() < 0.025 * STEER_LIMIT_DEG, "{:?}", r.control);
        assert!(r.control.engine.abs() < 0.1 * ENGINE_LIMIT, "{:?}", r.control);
    }
}

#[test]
fn config_validation_messages() {
    let bad = [
        MpcConfig { nc: 10, ..MpcConfig::default() },
        MpcConfig { r_weight: 0.0, ..MpcConfig::default() },
        MpcConfig { u_max: [500.0, 0.2], ..MpcConfig::default() },
        MpcConfig { du_max: [0.0, 0.001], ..MpcConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    assert!(MpcConfig::default().validate().is_ok());
    assert!((MpcConfig::default().du_max[1] - 0.18 / 45.5).abs() < 1e-15);
}

#[test]
fn tracking_log_csv_and_metrics() {
    let row = |t: f64, vx: f64| TrackingRow {
        t,
        state: VehicleState::new(vx, 0.0, 0.0),
        reference: VehicleState::new(1.0, 0.0, 0.0),
        control: ControlInput::new(0.5, 0.1),
        qp_ms: t,
        slack: 0.0,
    };
    let log = TrackingLog { rows: vec![row(0.0, 0.0), row(1.0, 1.0), row(2.0, 1.0)], faults: 0 };
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t,v_x,v_y,yaw_rate,ref_v_x,ref_v_y,ref_yaw_rate,steer,engine,qp_ms,slack\n"));
    assert_eq!(text.lines().count(), 4);
    assert!((log.rmse()[0] - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(log.relative_error_from(1), 0.0);
    assert_eq!(log.qp_ms_mean(), 1.0);
    assert_eq!(log.qp_ms_percentile(0.95), 2.0);
}
