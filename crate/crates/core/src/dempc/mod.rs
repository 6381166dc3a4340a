//! Linear MPC on a lifted model: incremental (augmented) form, condensed
//! prediction matrices, slack-relaxed QP and the receding-horizon loop.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

use crate::dataset::{NormalizationStats, CONTROL_DIM, STATE_DIM};
use crate::error::{invalid, Error, Result};
use crate::koopman::LiftedModel;
use crate::numkit::{gemm, ActiveSetSolver, CumulativeBounds, Matrix, QpProblem, QpSolution};
use crate::plant::{self, ControlInput, VehicleParams, VehicleState, ENGINE_LIMIT, STEER_LIMIT_DEG};

/// Steering wheel increment per 10 ms step, degrees.
pub const STEER_INCREMENT_DEG: f64 = 2.25;
/// Throttle increment per step.
pub const THROTTLE_INCREMENT: f64 = 0.004;
/// Brake pressure increment per step, MPa.
pub const BRAKE_INCREMENT_MPA: f64 = 0.18;

/// `𝒜̄ = [[𝒜, ℬ], [0, I]]`, `ℬ̄ = [[ℬ], [I]]`, `𝒞 = [I, 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedModel {
    pub a_bar: Matrix,
    pub b_bar: Matrix,
    pub c: Matrix,
}

impl AugmentedModel {
    pub fn lifted_dim(&self) -> usize {
        self.c.rows()
    }

    pub fn control_dim(&self) -> usize {
        self.b_bar.cols()
    }

    /// `ξ⁺ = 𝒜̄ξ + ℬ̄Δu`.
    pub fn step(&self, xi: &[f64], du: &[f64]) -> Result<Vec<f64>> {
        let mut next = self.a_bar.matvec(xi)?;
        let bu = self.b_bar.matvec(du)?;
        next.iter_mut().zip(&bu).for_each(|(a, b)| *a += b);
        Ok(next)
    }
}

pub fn augment(a: &Matrix, b: &Matrix) -> Result<AugmentedModel> {
    let l = a.rows();
    if !a.is_square() || b.rows() != l || b.cols() == 0 {
        return Err(invalid("augment needs square A and B with matching rows"));
    }
    let m = b.cols();
    let mut a_bar = Matrix::zeros(l + m, l + m);
    a_bar.set_block(0, 0, a);
    a_bar.set_block(0, l, b);
    a_bar.set_block(l, l, &Matrix::identity(m));
    let b_bar = Matrix::vstack(&[b, &Matrix::identity(m)])?;
    let mut c = Matrix::zeros(l, l + m);
    c.set_block(0, 0, &Matrix::identity(l));
    Ok(AugmentedModel { a_bar, b_bar, c })
}

/// `Γ` (`L·N_p × (L+m)`) and `Θ` (`L·N_p × m·N_c`) with `𝒴 = Γξ + ΘΔU`.
pub fn build_prediction(aug: &AugmentedModel, np: usize, nc: usize) -> Result<(Matrix, Matrix)> {
    if nc == 0 || np < nc {
        return Err(invalid(format!("need N_p >= N_c >= 1, got N_p = {np}, N_c = {nc}")));
    }
    let l = aug.lifted_dim();
    let m = aug.control_dim();
    let n = aug.a_bar.rows();
    let mut gamma = Matrix::zeros(l * np, n);
    let mut theta = Matrix::zeros(l * np, m * nc);
    // cab[k] = 𝒞𝒜̄^k ℬ̄, ca = 𝒞𝒜̄^i.
    let mut ca = aug.c.clone();
    let mut cab = Vec::with_capacity(np);
    for i in 1..=np {
        cab.push(ca.matmul(&aug.b_bar)?);
        ca = ca.matmul(&aug.a_bar)?;
        gamma.set_block((i - 1) * l, 0, &ca);
        for j in 1..=i.min(nc) {
            theta.set_block((i - 1) * l, (j - 1) * m, &cab[i - j]);
        }
    }
    Ok((gamma, theta))
}

/// Physical-unit MPC settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub np: usize,
    pub nc: usize,
    /// `Q = q_weight·I` on the lifted output.
    pub q_weight: f64,
    /// `R = r_weight·I` on the increments.
    pub r_weight: f64,
    pub rho: f64,
    /// Weight only the raw-state block of the lifted output.
    #[serde(default)]
    pub weight_raw_only: bool,
    /// `[steer °, engine]`.
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
    /// Symmetric per-step increment bound `[steer °, engine]`.
    pub du_max: [f64; 2],
    pub dt: f64,
    pub max_qp_iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            np: 10,
            nc: 7,
            q_weight: 1000.0,
            r_weight: 5.0,
            rho: 10.0,
            weight_raw_only: false,
            u_min: [-STEER_LIMIT_DEG, -ENGINE_LIMIT],
            u_max: [STEER_LIMIT_DEG, ENGINE_LIMIT],
            du_max: [STEER_INCREMENT_DEG, default_engine_increment(&VehicleParams::default())],
            dt: 0.01,
            max_qp_iterations: 500,
        }
    }
}

/// The tighter of the throttle and brake increment limits, in engine units.
pub fn default_engine_increment(p: &VehicleParams) -> f64 {
    THROTTLE_INCREMENT.min(BRAKE_INCREMENT_MPA / p.brake_pressure_per_unit)
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nc == 0 || self.np <= self.nc {
            return bad(format!("mpc horizons need N_p > N_c >= 1 (got N_p = {}, N_c = {})", self.np, self.nc));
        }
        for (name, v) in [("q_weight", self.q_weight), ("r_weight", self.r_weight), ("rho", self.rho), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("mpc {name} must be positive (got {v})"));
            }
        }
        let limits = [STEER_LIMIT_DEG, ENGINE_LIMIT];
        for j in 0..2 {
            if !(self.u_min[j] < self.u_max[j]) || self.u_min[j] < -limits[j] || self.u_max[j] > limits[j] {
                return bad(format!(
                    "mpc control bounds for channel {j} must satisfy -{l} <= u_min < u_max <= {l} (got {} .. {})",
                    self.u_min[j],
                    self.u_max[j],
                    l = limits[j]
                ));
            }
            if !(self.du_max[j] > 0.0) || self.du_max[j] > self.u_max[j] - self.u_min[j] {
                return bad(format!("mpc increment bound for channel {j} must lie in (0, u_max - u_min]"));
            }
        }
        if self.max_qp_iterations == 0 {
            return bad("mpc max_qp_iterations must be positive".into());
        }
        Ok(())
    }
}

/// Bounds of one QP in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementBounds {
    pub du_min: Vec<f64>,
    pub du_max: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub u_prev: Vec<f64>,
}

/// Time-invariant parts of the condensed problem.
#[derive(Debug, Clone)]
pub struct Condenser {
    pub gamma: Matrix,
    pub theta: Matrix,
    /// Diagonal of `Q_𝒴`.
    pub q_diag: Vec<f64>,
    /// `diag{ΘᵀQ_𝒴Θ + R_𝒴, ρ}`.
    pub hessian: Matrix,
    nc: usize,
    m: usize,
}

impl Condenser {
    /// `q_block` is the diagonal of `Q` for one lifted output.
    pub fn new(aug: &AugmentedModel, np: usize, nc: usize, q_block: &[f64], r: f64, rho: f64) -> Result<Self> {
        let l = aug.lifted_dim();
        if q_block.len() != l {
            return Err(invalid("Q diagonal must match the lifted dimension"));
        }
        let (gamma, theta) = build_prediction(aug, np, nc)?;
        let m = aug.control_dim();
        let q_diag: Vec<f64> = (0..np).flat_map(|_| q_block.iter().copied()).collect();
        let d = m * nc;
        let mut qt = theta.clone();
        for r_ in 0..qt.rows() {
            let q = q_diag[r_];
            qt.row_mut(r_).iter_mut().for_each(|v| *v *= q);
        }
        let mut h = Matrix::zeros(d + 1, d + 1);
        let mut top = Matrix::zeros(d, d);
        gemm(1.0, &theta, true, &qt, false, 0.0, &mut top);
        for i in 0..d {
            top[(i, i)] += r;
        }
        top.symmetrize();
        h.set_block(0, 0, &top);
        h[(d, d)] = rho;
        Ok(Self { gamma, theta, q_diag, hessian: h, nc, m })
    }

    /// QP for state `ξ_t` and stacked lifted reference `y_ref` (`L·N_p`).
    pub fn condense(&self, xi: &[f64], y_ref: &[f64], bounds: &IncrementBounds) -> Result<QpProblem> {
        if xi.len() != self.gamma.cols() || y_ref.len() != self.gamma.rows() {
            return Err(invalid(format!(
                "condense expects xi of length {} and a reference of length {}",
                self.gamma.cols(),
                self.gamma.rows()
            )));
        }
        let m = self.m;
        for v in [&bounds.du_min, &bounds.du_max, &bounds.u_min, &bounds.u_max, &bounds.u_prev] {
            if v.len() != m {
                return Err(invalid("bounds must have one entry per control channel"));
            }
        }
        let mut e = self.gamma.matvec(xi)?;
        e.iter_mut().zip(y_ref).for_each(|(a, r)| *a -= r);
        let qe: Vec<f64> = e.iter().zip(&self.q_diag).map(|(a, q)| a * q).collect();
        let mut linear = self.theta.tr_matvec(&qe)?;
        linear.iter_mut().for_each(|v| *v *= 2.0);
        linear.push(0.0);
        let constant = e.iter().zip(&qe).map(|(a, b)| a * b).sum();
        let d = m * self.nc;
        Ok(QpProblem {
            hessian: self.hessian.clone(),
            linear,
            constant,
            lower: (0..d).map(|i| bounds.du_min[i % m]).collect(),
            upper: (0..d).map(|i| bounds.du_max[i % m]).collect(),
            slack_widens_bounds: true,
            cumulative: Some(CumulativeBounds {
                channels: m,
                start: bounds.u_prev.clone(),
                lower: bounds.u_min.clone(),
                upper: bounds.u_max.clone(),
            }),
        })
    }
}

/// Result of one receding-horizon step.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcStep {
    pub control: ControlInput,
    pub slack: f64,
    pub qp_ms: f64,
    pub iterations: usize,
    /// Set when the QP failed and the previous control was reused.
    pub fault: Option<String>,
}

/// DE-MPC controller bound to one lifted model.
pub struct DeMpc<'m, M: LiftedModel + ?Sized> {
    model: &'m M,
    stats: NormalizationStats,
    cfg: MpcConfig,
    tau: usize,
    condenser: Condenser,
    solver: ActiveSetSolver,
    u_prev: [f64; 2],
    pub faults: usize,
}

impl<'m, M: LiftedModel + ?Sized> DeMpc<'m, M> {
    pub fn new(model: &'m M, stats: NormalizationStats, cfg: MpcConfig, tau: usize) -> Result<Self> {
        cfg.validate()?;
        stats.validate()?;
        if model.state_dim() != STATE_DIM * tau || model.control_dim() != CONTROL_DIM {
            return Err(invalid("model dimensions do not match the vehicle state and tau"));
        }
        let aug = augment(model.transition(), model.input_matrix())?;
        let l = model.lifted_dim();
        let raw = STATE_DIM * tau;
        let q_block: Vec<f64> =
            (0..l).map(|i| if cfg.weight_raw_only && i >= raw { 0.0 } else { cfg.q_weight }).collect();
        let condenser = Condenser::new(&aug, cfg.np, cfg.nc, &q_block, cfg.r_weight, cfg.rho)?;
        let solver = ActiveSetSolver::new(&condenser.hessian)?;
        Ok(Self { model, stats, cfg, tau, condenser, solver, u_prev: [0.0; 2], faults: 0 })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn previous_control(&self) -> ControlInput {
        ControlInput::from_slice(&self.u_prev)
    }

    pub fn reset(&mut self, u_prev: ControlInput) {
        self.u_prev = u_prev.to_array();
        self.faults = 0;
    }

    /// `φ_e([x̄; …; x̄])` for each state, one row each.
    fn encode_states(&self, xs: &[VehicleState]) -> Result<Matrix> {
        let mut z = Matrix::zeros(xs.len(), STATE_DIM * self.tau);
        for (r, x) in xs.iter().enumerate() {
            let n = self.stats.normalize_state(&x.to_array());
            for k in 0..self.tau {
                z.row_mut(r)[k * STATE_DIM..(k + 1) * STATE_DIM].copy_from_slice(&n);
            }
        }
        self.model.encode(&z)
    }

    fn bounds(&self) -> IncrementBounds {
        let range = |j| self.stats.control_range(j);
        let u_prev = self.stats.normalize_control(&self.u_prev).to_vec();
        IncrementBounds {
            du_min: (0..2).map(|j| -self.cfg.du_max[j] / range(j)).collect(),
            du_max: (0..2).map(|j| self.cfg.du_max[j] / range(j)).collect(),
            u_min: self.stats.normalize_control(&self.cfg.u_min).to_vec(),
            u_max: self.stats.normalize_control(&self.cfg.u_max).to_vec(),
            u_prev,
        }
    }

    /// The QP for state `x` and the next `N_p` reference states.
    pub fn problem(&self, x: &VehicleState, reference: &[VehicleState]) -> Result<QpProblem> {
        if reference.len() < self.cfg.np {
            return Err(invalid(format!("reference window needs {} states, got {}", self.cfg.np, reference.len())));
        }
        let mut xi = self.encode_states(std::slice::from_ref(x))?.into_vec();
        xi.extend(self.stats.normalize_control(&self.u_prev));
        let y_ref = self.encode_states(&reference[..self.cfg.np])?.into_vec();
        self.condenser.condense(&xi, &y_ref, &self.bounds())
    }

    /// Solves, applies the first increment (clamped to the increment and
    /// absolute bounds) and remembers the result as `u_{t−1}`.
    pub fn step(&mut self, x: &VehicleState, reference: &[VehicleState]) -> Result<MpcStep> {
        let qp = self.problem(x, reference)?;
        let start = Instant::now();
        let solved = self.solver.solve(&qp, self.cfg.max_qp_iterations, 1e-9);
        let qp_ms = start.elapsed().as_secs_f64() * 1e3;
        let (du, slack, iterations, fault) = match solved {
            Ok(QpSolution { decision, slack, iterations, .. }) => {
                let du: Vec<f64> = (0..2).map(|j| decision[j] * self.stats.control_range(j)).collect();
                (du, slack, iterations, None)
            }
            Err(e) => {
                self.faults += 1;
                log::warn!("qp failed, holding the previous control: {e}");
                (vec![0.0; 2], 0.0, 0, Some(e.to_string()))
            }
        };
        let mut u = [0.0; 2];
        for j in 0..2 {
            let inc = du[j].clamp(-self.cfg.du_max[j], self.cfg.du_max[j]);
            let lo = self.cfg.u_min[j].max(self.u_prev[j] - self.cfg.du_max[j]);
            let hi = self.cfg.u_max[j].min(self.u_prev[j] + self.cfg.du_max[j]);
            u[j] = (self.u_prev[j] + inc).clamp(lo.min(hi), hi);
        }
        self.u_prev = u;
        Ok(MpcStep { control: ControlInput::from_slice(&u), slack, qp_ms, iterations, fault })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub t: f64,
    pub state: VehicleState,
    pub reference: VehicleState,
    pub control: ControlInput,
    pub qp_ms: f64,
    pub slack: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingLog {
    pub rows: Vec<TrackingRow>,
    pub faults: usize,
}

impl TrackingLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "t",
            "v_x",
            "v_y",
            "yaw_rate",
            "ref_v_x",
            "ref_v_y",
            "ref_yaw_rate",
            "steer",
            "engine",
            "qp_ms",
            "slack",
        ])?;
        for r in &self.rows {
            let (s, f) = (r.state, r.reference);
            out.write_record(
                [
                    r.t,
                    s.v_x,
                    s.v_y,
                    s.yaw_rate,
                    f.v_x,
                    f.v_y,
                    f.yaw_rate,
                    r.control.steer,
                    r.control.engine,
                    r.qp_ms,
                    r.slack,
                ]
                .map(|v| v.to_string()),
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Per-channel tracking RMSE over rows `from..`.
    pub fn rmse_from(&self, from: usize) -> [f64; 3] {
        let rows = &self.rows[from.min(self.rows.len())..];
        let mut s = [0.0; 3];
        for r in rows {
            let (x, y) = (r.state.to_array(), r.reference.to_array());
            for j in 0..3 {
                s[j] += (x[j] - y[j]).powi(2);
            }
        }
        s.map(|v| (v / rows.len().max(1) as f64).sqrt())
    }

    pub fn rmse(&self) -> [f64; 3] {
        self.rmse_from(0)
    }

    /// `RMS‖x − r‖ / RMS‖r‖` over rows `from..`.
    pub fn relative_error_from(&self, from: usize) -> f64 {
        let rows = &self.rows[from.min(self.rows.len())..];
        let (mut num, mut den) = (0.0, 0.0);
        for r in rows {
            let (x, y) = (r.state.to_array(), r.reference.to_array());
            num += (0..3).map(|j| (x[j] - y[j]).powi(2)).sum::<f64>();
            den += y.iter().map(|v| v * v).sum::<f64>();
        }
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        }
    }

    pub fn qp_ms_mean(&self) -> f64 {
        self.rows.iter().map(|r| r.qp_ms).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn qp_ms_percentile(&self, q: f64) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.qp_ms).collect();
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        let k = ((q.clamp(0.0, 1.0) * (v.len() - 1) as f64).round()) as usize;
        v[k]
    }

    pub fn max_slack(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.slack))
    }
}

/// `reference[t+1 ..= t+N_p]`, repeating the last sample past the end.
pub fn reference_window(reference: &[VehicleState], t: usize, np: usize) -> Vec<VehicleState> {
    let last = reference.len() - 1;
    (1..=np).map(|i| reference[(t + i).min(last)]).collect()
}

/// Receding-horizon loop against an arbitrary plant step function.
pub fn run_loop_with<M, F>(
    ctrl: &mut DeMpc<M>,
    x0: VehicleState,
    reference: &[VehicleState],
    steps: usize,
    mut plant_step: F,
) -> Result<TrackingLog>
where
    M: LiftedModel + ?Sized,
    F: FnMut(&VehicleState, &ControlInput) -> VehicleState,
{
    if reference.is_empty() {
        return Err(invalid("empty reference"));
    }
    let dt = ctrl.cfg.dt;
    let np = ctrl.cfg.np;
    let mut log = TrackingLog::default();
    let mut x = x0;
    for t in 0..steps {
        let window = reference_window(reference, t, np);
        let s = ctrl.step(&x, &window)?;
        if s.fault.is_some() {
            log.faults += 1;
        }
        log.rows.push(TrackingRow {
            t: t as f64 * dt,
            state: x,
            reference: reference[t.min(reference.len() - 1)],
            control: s.control,
            qp_ms: s.qp_ms,
            slack: s.slack,
        });
        x = plant_step(&x, &s.control);
        if !x.is_finite() || x.to_array().iter().any(|v| v.abs() > 1e3) {
            return Err(Error::PlantDiverged { step: t, log: Box::new(log) });
        }
    }
    Ok(log)
}

/// Closed loop on the vehicle plant from rest.
pub fn run_closed_loop<M: LiftedModel + ?Sized>(
    ctrl: &mut DeMpc<M>,
    params: &VehicleParams,
    reference: &[VehicleState],
    steps: usize,
) -> Result<TrackingLog> {
    let dt = ctrl.cfg.dt;
    run_loop_with(ctrl, VehicleState::default(), reference, steps, |x, u| plant::step(x, u, params, dt))
}

#[cfg(test)]
mod tests;
