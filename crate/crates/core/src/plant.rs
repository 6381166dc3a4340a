//! Single-track vehicle model with a Pacejka longitudinal tire force, RK4
//! integration and a randomized excitation policy for data collection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Steering-wheel angle limit in degrees.
pub const STEER_LIMIT_DEG: f64 = 450.0;
/// `|η|` limit: throttle fraction 0.2, or brake demand 0.2 ↦ 9.1 MPa.
pub const ENGINE_LIMIT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal velocity (m/s).
    pub v_x: f64,
    /// Lateral velocity (m/s).
    pub v_y: f64,
    /// Yaw rate (rad/s).
    pub yaw_rate: f64,
}

impl VehicleState {
    pub const DIM: usize = 3;

    pub fn new(v_x: f64, v_y: f64, yaw_rate: f64) -> Self {
        Self { v_x, v_y, yaw_rate }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.v_x, self.v_y, self.yaw_rate]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { v_x: v[0], v_y: v[1], yaw_rate: v[2] }
    }

    pub fn is_finite(&self) -> bool {
        self.v_x.is_finite() && self.v_y.is_finite() && self.yaw_rate.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    /// Steering-wheel angle ζ (deg).
    pub steer: f64,
    /// η: throttle fraction when nonnegative, brake demand otherwise.
    pub engine: f64,
}

impl ControlInput {
    pub const DIM: usize = 2;

    pub fn new(steer: f64, engine: f64) -> Self {
        Self { steer, engine }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.steer, self.engine]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { steer: v[0], engine: v[1] }
    }

    pub fn throttle(&self) -> f64 {
        self.engine.max(0.0)
    }

    /// Brake pressure in MPa.
    pub fn brake_pressure(&self, p: &VehicleParams) -> f64 {
        (-self.engine).max(0.0) * p.brake_pressure_per_unit
    }
}

/// Plant configuration. These are representative passenger-car values, not
/// measured data for any particular vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    /// Front axle to center of gravity (m).
    pub a1: f64,
    /// Rear axle to center of gravity (m).
    pub a2: f64,
    pub cornering_front: f64,
    pub cornering_rear: f64,
    /// Λ in `A = Λ·F_z`.
    pub friction_scale: f64,
    pub gravity: f64,
    pub shape_b: f64,
    pub shape_c: f64,
    pub shape_d: f64,
    pub air_density: f64,
    pub frontal_area: f64,
    pub drag_x: f64,
    pub drag_y: f64,
    /// Steering-wheel to road-wheel ratio.
    pub steering_ratio: f64,
    /// Slip per unit throttle at zero speed.
    pub throttle_slip_gain: f64,
    /// Speed (m/s) at which throttle slip has halved.
    pub throttle_ref_speed: f64,
    /// MPa per unit of negative η.
    pub brake_pressure_per_unit: f64,
    /// Slip per MPa of brake pressure.
    pub brake_slip_gain: f64,
    /// Speed scale (m/s) of the brake fade-out near standstill.
    pub brake_speed_scale: f64,
    /// Below this speed the `1/v_x` terms are evaluated at this speed.
    pub min_speed: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            yaw_inertia: 2500.0,
            a1: 1.2,
            a2: 1.5,
            cornering_front: 80_000.0,
            cornering_rear: 80_000.0,
            friction_scale: 0.9,
            gravity: 9.81,
            shape_b: 1.65,
            shape_c: 10.0,
            shape_d: 0.5,
            air_density: 1.2,
            frontal_area: 2.2,
            drag_x: 0.3,
            drag_y: 0.0,
            steering_ratio: 17.0,
            throttle_slip_gain: 0.1,
            throttle_ref_speed: 10.0,
            brake_pressure_per_unit: 45.5,
            brake_slip_gain: 0.008,
            brake_speed_scale: 0.5,
            min_speed: 0.5,
        }
    }
}

impl VehicleParams {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read vehicle params {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("a1", self.a1),
            ("a2", self.a2),
            ("cornering_front", self.cornering_front),
            ("cornering_rear", self.cornering_rear),
            ("friction_scale", self.friction_scale),
            ("gravity", self.gravity),
            ("shape_b", self.shape_b),
            ("shape_c", self.shape_c),
            ("shape_d", self.shape_d),
            ("air_density", self.air_density),
            ("frontal_area", self.frontal_area),
            ("drag_x", self.drag_x),
            ("steering_ratio", self.steering_ratio),
            ("throttle_slip_gain", self.throttle_slip_gain),
            ("throttle_ref_speed", self.throttle_ref_speed),
            ("brake_pressure_per_unit", self.brake_pressure_per_unit),
            ("brake_slip_gain", self.brake_slip_gain),
            ("brake_speed_scale", self.brake_speed_scale),
            ("min_speed", self.min_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("vehicle parameter `{name}` must be positive, got {v}")));
            }
        }
        if !(self.drag_y >= 0.0 && self.drag_y.is_finite()) {
            return Err(Error::Config(format!("vehicle parameter `drag_y` must be >= 0, got {}", self.drag_y)));
        }
        Ok(())
    }

    /// `A = Λ·F_z` with `F_z = m·g`.
    pub fn load_scale(&self) -> f64 {
        self.friction_scale * self.mass * self.gravity
    }

    /// Road-wheel angle δ (rad) for a steering-wheel angle ζ (deg).
    pub fn wheel_angle(&self, steer_deg: f64) -> f64 {
        steer_deg.to_radians() / self.steering_ratio
    }

    /// Longitudinal slip produced by the engine demand at speed `v_x`.
    pub fn slip(&self, v_x: f64, engine: f64) -> f64 {
        if engine >= 0.0 {
            self.throttle_slip_gain * engine * self.throttle_ref_speed / (self.throttle_ref_speed + v_x.abs())
        } else {
            let pressure = -engine * self.brake_pressure_per_unit;
            -self.brake_slip_gain * pressure * (v_x / self.brake_speed_scale).tanh()
        }
    }
}

/// Pacejka magic formula `A·sin(B·atan(C·s − D(C·s − atan(C·s))))`.
pub fn magic_formula(slip: f64, p: &VehicleParams) -> f64 {
    let cs = p.shape_c * slip;
    p.load_scale() * (p.shape_b * (cs - p.shape_d * (cs - cs.atan())).atan()).sin()
}

/// Body-frame forces `(F_x, F_y)` in newtons.
pub fn tire_and_body_forces(s: &VehicleState, u: &ControlInput, p: &VehicleParams) -> (f64, f64) {
    let delta = p.wheel_angle(u.steer);
    let drag = 0.5 * p.air_density * p.frontal_area * (s.v_x * s.v_x + s.v_y * s.v_y);
    let f_x = magic_formula(p.slip(s.v_x, u.engine), p) * delta.cos() - drag * p.drag_x;

    let vx = s.v_x.max(p.min_speed);
    let alpha_f = delta - (s.v_y + p.a1 * s.yaw_rate) / vx;
    let alpha_r = -(s.v_y - p.a2 * s.yaw_rate) / vx;
    let f_y = p.cornering_front * alpha_f + p.cornering_rear * alpha_r - drag * p.drag_y;
    (f_x, f_y)
}

/// `(v̇_x, v̇_y, ψ̈)` of the single-track model.
pub fn derivatives(s: &VehicleState, u: &ControlInput, p: &VehicleParams) -> [f64; 3] {
    let (f_x, _) = tire_and_body_forces(s, u, p);
    let delta = p.wheel_angle(u.steer);
    let (m, iz, a1, a2) = (p.mass, p.yaw_inertia, p.a1, p.a2);
    let (cf, cr) = (p.cornering_front, p.cornering_rear);
    let vx = s.v_x.max(p.min_speed);
    let r = s.yaw_rate;

    let dvx = f_x / m + r * s.v_y;
    let dvy = (-a1 * cf + a2 * cr) * r / (m * vx) + cf * delta / m - r * s.v_x - (cf + cr) * s.v_y / (m * vx);
    let dr = (-a1 * a1 * cf - a2 * a2 * cr) * r / (iz * vx) + a1 * cf * delta / iz
        - (a1 * cf - a2 * cr) * s.v_y / (iz * vx);
    [dvx, dvy, dr]
}

/// One classical RK4 step with `u` held over `dt`. Forward driving only, so
/// `v_x` is clamped at zero.
pub fn step(s: &VehicleState, u: &ControlInput, p: &VehicleParams, dt: f64) -> VehicleState {
    let x0 = s.to_array();
    let at = |k: &[f64; 3], h: f64| {
        VehicleState::new(x0[0] + h * k[0], x0[1] + h * k[1], x0[2] + h * k[2])
    };
    let k1 = derivatives(s, u, p);
    let k2 = derivatives(&at(&k1, dt / 2.0), u, p);
    let k3 = derivatives(&at(&k2, dt / 2.0), u, p);
    let k4 = derivatives(&at(&k3, dt), u, p);
    let mut next = [0.0; 3];
    for i in 0..3 {
        next[i] = x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    next[0] = next[0].max(0.0);
    VehicleState::from_slice(&next)
}

/// A time-indexed record. `controls[k]` is applied between `states[k]` and
/// `states[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub dt: f64,
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
}

impl Episode {
    pub fn new(dt: f64, states: Vec<VehicleState>, controls: Vec<ControlInput>) -> Result<Self> {
        let e = Self { dt, states, controls };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("episode dt must be positive, got {}", self.dt)));
        }
        if self.states.len() != self.controls.len() {
            return Err(invalid("episode states and controls differ in length"));
        }
        if self.states.len() < 2 {
            return Err(invalid("episode needs at least two samples"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Randomized driver stand-in: low-pass steering toward random targets and
/// piecewise-constant throttle / brake / coast segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothedExcitation {
    /// Largest steering target (deg) at standstill.
    pub steer_max_deg: f64,
    /// Speed (m/s) at which the steering envelope has halved.
    pub steer_speed_scale: f64,
    /// Time constant (s) of the steering low-pass filter.
    pub steer_time_constant: f64,
    /// Range of hold times (s) for steering targets.
    pub steer_hold: [f64; 2],
    pub throttle_max: f64,
    /// Largest brake demand as |η|.
    pub brake_max: f64,
    /// Range of engine segment durations (s).
    pub segment: [f64; 2],
    /// Time constant (s) of the engine low-pass filter.
    pub engine_time_constant: f64,
    /// Below this speed segments are throttle or coast only.
    pub low_speed: f64,
    /// Above this speed braking becomes the most likely segment.
    pub high_speed: f64,
}

impl Default for SmoothedExcitation {
    fn default() -> Self {
        Self {
            steer_max_deg: 450.0,
            steer_speed_scale: 8.0,
            steer_time_constant: 0.4,
            steer_hold: [0.5, 2.0],
            throttle_max: ENGINE_LIMIT,
            brake_max: 0.06,
            segment: [0.5, 2.5],
            engine_time_constant: 0.15,
            low_speed: 5.0,
            high_speed: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExcitationPolicy {
    /// All controls zero.
    Zero,
    Smoothed(SmoothedExcitation),
}

impl Default for ExcitationPolicy {
    fn default() -> Self {
        Self::Smoothed(SmoothedExcitation::default())
    }
}

impl ExcitationPolicy {
    pub fn validate(&self) -> Result<()> {
        let Self::Smoothed(e) = self else { return Ok(()) };
        let ok = e.steer_max_deg >= 0.0
            && e.steer_max_deg <= STEER_LIMIT_DEG
            && e.steer_speed_scale > 0.0
            && e.steer_time_constant > 0.0
            && e.engine_time_constant > 0.0
            && (0.0..=ENGINE_LIMIT).contains(&e.throttle_max)
            && (0.0..=ENGINE_LIMIT).contains(&e.brake_max)
            && e.steer_hold[0] > 0.0
            && e.steer_hold[0] <= e.steer_hold[1]
            && e.segment[0] > 0.0
            && e.segment[0] <= e.segment[1]
            && e.low_speed <= e.high_speed;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "excitation policy out of range (steer within ±{STEER_LIMIT_DEG} deg, engine within ±{ENGINE_LIMIT}, positive times): {e:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Throttle(f64),
    Brake(f64),
    Coast,
}

/// Simulates `length` samples from rest. Deterministic for a fixed seed.
pub fn generate_episode(
    policy: &ExcitationPolicy,
    length: usize,
    seed: u64,
    p: &VehicleParams,
    dt: f64,
) -> Result<Episode> {
    if length < 2 {
        return Err(invalid("episode length must be at least 2"));
    }
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    policy.validate()?;
    let mut states = Vec::with_capacity(length);
    let mut controls = Vec::with_capacity(length);
    let mut s = VehicleState::default();

    match policy {
        ExcitationPolicy::Zero => {
            for _ in 0..length {
                let u = ControlInput::default();
                states.push(s);
                controls.push(u);
                s = step(&s, &u, p, dt);
            }
        }
        ExcitationPolicy::Smoothed(e) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut steer = 0.0;
            let mut engine = 0.0;
            let mut steer_target = 0.0;
            let mut steer_left = 0.0;
            let mut segment = Segment::Coast;
            let mut segment_left = 0.0;
            let a_steer = dt / (e.steer_time_constant + dt);
            let a_engine = dt / (e.engine_time_constant + dt);
            for _ in 0..length {
                if steer_left <= 0.0 {
                    let envelope = e.steer_max_deg / (1.0 + (s.v_x / e.steer_speed_scale).powi(2));
                    steer_target = if envelope > 0.0 { rng.random_range(-envelope..=envelope) } else { 0.0 };
                    steer_left = rng.random_range(e.steer_hold[0]..=e.steer_hold[1]);
                }
                if segment_left <= 0.0 {
                    segment = draw_segment(&mut rng, e, s.v_x);
                    segment_left = rng.random_range(e.segment[0]..=e.segment[1]);
                }
                steer_left -= dt;
                segment_left -= dt;

                let engine_target = match segment {
                    Segment::Throttle(t) => t,
                    Segment::Brake(b) => -b,
                    Segment::Coast => 0.0,
                };
                steer += a_steer * (steer_target - steer);
                engine += a_engine * (engine_target - engine);
                let u = ControlInput::new(
                    steer.clamp(-STEER_LIMIT_DEG, STEER_LIMIT_DEG),
                    engine.clamp(-ENGINE_LIMIT, ENGINE_LIMIT),
                );
                states.push(s);
                controls.push(u);
                s = step(&s, &u, p, dt);
            }
        }
    }
    Episode::new(dt, states, controls)
}

fn draw_segment(rng: &mut ChaCha8Rng, e: &SmoothedExcitation, v_x: f64) -> Segment {
    let (p_throttle, p_brake) = if v_x < e.low_speed {
        (0.8, 0.0)
    } else if v_x > e.high_speed {
        (0.2, 0.5)
    } else {
        (0.45, 0.25)
    };
    let r: f64 = rng.random();
    if r < p_throttle {
        Segment::Throttle(rng.random_range(0.0..=e.throttle_max))
    } else if r < p_throttle + p_brake {
        Segment::Brake(rng.random_range(0.0..=e.brake_max))
    } else {
        Segment::Coast
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn checked_in_params_match_defaults() {
        let text = include_str!("../../../configs/vehicle.toml");
        assert_eq!(VehicleParams::from_toml_str(text).unwrap(), params());
    }

    #[test]
    fn zero_everything_gives_zero_force() {
        let f = tire_and_body_forces(&VehicleState::default(), &ControlInput::default(), &params());
        assert_eq!(f, (0.0, 0.0));
    }

    #[test]
    fn magic_formula_is_linear_near_zero() {
        let p = params();
        let s = 1e-7;
        let slope = p.load_scale() * p.shape_b * p.shape_c;
        assert!((magic_formula(s, &p) - slope * s).abs() < 1e-9 * slope * s + 1e-12);
    }

    #[test]
    fn magic_formula_at_five_percent_slip() {
        // Offline evaluation of the formula with the default parameters.
        let expected = 8938.261099107152;
        assert!((magic_formula(0.05, &params()) - expected).abs() < 1e-9);
    }

    #[test]
    fn steady_coast_has_zero_derivative_without_drag() {
        let mut p = params();
        p.air_density = 0.0;
        let d = derivatives(&VehicleState::new(10.0, 0.0, 0.0), &ControlInput::default(), &p);
        assert!(d.iter().all(|v| v.abs() < 1e-12), "{d:?}");
    }

    #[test]
    fn steering_only_terms() {
        let p = params();
        let u = ControlInput::new(34.0, 0.0);
        let delta = p.wheel_angle(u.steer);
        let mut p0 = p.clone();
        p0.air_density = 0.0;
        let d = derivatives(&VehicleState::new(10.0, 0.0, 0.0), &u, &p0);
        assert!((d[1] - p.cornering_front * delta / p.mass).abs() < 1e-12);
        assert!((d[2] - p.a1 * p.cornering_front * delta / p.yaw_inertia).abs() < 1e-12);
        assert!(d[1] > 0.0 && d[2] > 0.0);
    }

    /// Independent term-by-term transcription of the equations of motion.
    fn oracle_derivatives(s: [f64; 3], u: [f64; 2], p: &VehicleParams) -> [f64; 3] {
        let [vx_raw, vy, r] = s;
        let vx = if vx_raw < p.min_speed { p.min_speed } else { vx_raw };
        let delta = u[0] * std::f64::consts::PI / 180.0 / p.steering_ratio;
        let slip = if u[1] >= 0.0 {
            p.throttle_slip_gain * u[1] * p.throttle_ref_speed / (p.throttle_ref_speed + vx_raw.abs())
        } else {
            -p.brake_slip_gain * (-u[1] * p.brake_pressure_per_unit) * (vx_raw / p.brake_speed_scale).tanh()
        };
        let a = p.friction_scale * p.mass * p.gravity;
        let cs = p.shape_c * slip;
        let tire = a * (p.shape_b * (cs - p.shape_d * (cs - cs.atan())).atan()).sin();
        let v2 = vx_raw * vx_raw + vy * vy;
        let fx = tire * delta.cos() - 0.5 * p.air_density * p.frontal_area * v2 * p.drag_x;
        let (m, iz, a1, a2, cf, cr) = (p.mass, p.yaw_inertia, p.a1, p.a2, p.cornering_front, p.cornering_rear);
        let t1 = fx / m;
        let t2 = r * vy;
        let dvx = t1 + t2;
        let u1 = 1.0 / (m * vx) * (-a1 * cf + a2 * cr) * r;
        let u2 = 1.0 / m * cf * delta;
        let u3 = -r * vx_raw;
        let u4 = -1.0 / (m * vx) * (cf + cr) * vy;
        let dvy = u1 + u2 + u3 + u4;
        let w1 = 1.0 / (iz * vx) * (-a1 * a1 * cf - a2 * a2 * cr) * r;
        let w2 = 1.0 / iz * a1 * cf * delta;
        let w3 = -1.0 / (iz * vx) * (a1 * cf - a2 * cr) * vy;
        [dvx, dvy, w1 + w2 + w3]
    }

    proptest! {
        #[test]
        fn derivatives_match_transcription(
            vx in 0.0f64..40.0, vy in -3.0f64..3.0, r in -1.0f64..1.0,
            steer in -450.0f64..450.0, engine in -0.2f64..0.2,
        ) {
            let p = params();
            let got = derivatives(&VehicleState::new(vx, vy, r), &ControlInput::new(steer, engine), &p);
            let want = oracle_derivatives([vx, vy, r], [steer, engine], &p);
            for i in 0..3 {
                prop_assert!((got[i] - want[i]).abs() <= 1e-9 * (1.0 + want[i].abs()));
            }
        }
    }

    #[test]
    fn rest_is_an_equilibrium() {
        let s = step(&VehicleState::default(), &ControlInput::default(), &params(), 0.01);
        assert_eq!(s, VehicleState::default());
    }

    #[test]
    fn constant_throttle_matches_fine_euler() {
        let p = params();
        let u = ControlInput::new(0.0, 0.1);
        let mut rk = VehicleState::default();
        let mut eu = VehicleState::default();
        let mut prev = 0.0;
        for _ in 0..100 {
            rk = step(&rk, &u, &p, 0.01);
            assert!(rk.v_x > prev);
            assert_eq!((rk.v_y, rk.yaw_rate), (0.0, 0.0));
            prev = rk.v_x;
            for _ in 0..100 {
                let d = oracle_derivatives(eu.to_array(), u.to_array(), &p);
                eu.v_x += 1e-4 * d[0];
            }
        }
        assert!((rk.v_x - eu.v_x).abs() < 1e-4, "{} vs {}", rk.v_x, eu.v_x);
    }

    #[test]
    fn positive_steer_turns_left() {
        let s = step(&VehicleState::new(10.0, 0.0, 0.0), &ControlInput::new(30.0, 0.0), &params(), 0.01);
        assert!(s.yaw_rate > 0.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let p = params();
        let s0 = VehicleState::new(12.0, 0.3, 0.1);
        let u = ControlInput::new(60.0, 0.08);
        let reference = |h: f64| {
            let n = 1000;
            let mut s = s0;
            for _ in 0..n {
                s = step(&s, &u, &p, h / n as f64);
            }
            s
        };
        let err = |h: f64| {
            let a = step(&s0, &u, &p, h).to_array();
            let b = reference(h).to_array();
            (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
        };
        let ratio = err(0.2) / err(0.1);
        assert!(ratio >= 8.0, "ratio {ratio}");
    }

    #[test]
    fn zero_policy_short_episode() {
        let e = generate_episode(&ExcitationPolicy::Zero, 2, 0, &params(), 0.01).unwrap();
        assert_eq!(e.states, vec![VehicleState::default(); 2]);
    }

    #[test]
    fn episodes_are_deterministic_per_seed() {
        let p = params();
        let pol = ExcitationPolicy::default();
        let a = generate_episode(&pol, 500, 7, &p, 0.01).unwrap();
        let b = generate_episode(&pol, 500, 7, &p, 0.01).unwrap();
        let c = generate_episode(&pol, 500, 8, &p, 0.01).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn long_episode_stays_bounded() {
        let p = params();
        for seed in 0..3 {
            let e = generate_episode(&ExcitationPolicy::default(), 10_000, seed, &p, 0.01).unwrap();
            for (s, u) in e.states.iter().zip(&e.controls) {
                assert!(s.is_finite());
                assert!(s.v_x >= 0.0 && s.v_x <= 70.0);
                assert!(s.v_y.abs() < s.v_x + 5.0);
                assert!(u.steer.abs() <= STEER_LIMIT_DEG && u.engine.abs() <= ENGINE_LIMIT);
                // One scalar carries both pedals, so throttle and brake never overlap.
                assert!(u.throttle() == 0.0 || u.brake_pressure(&p) == 0.0);
                assert!(u.brake_pressure(&p) <= 9.1 + 1e-12);
            }
        }
    }

    #[test]
    fn bad_params_are_rejected() {
        let mut p = params();
        p.mass = -1.0;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }
}
