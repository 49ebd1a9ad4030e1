//! Hybrid discrete-time vehicle dynamics.
//!
//! The parametric part is a planar two-track model: linear tires with a
//! friction-circle limit, first-order actuator lags, and a drag/slope/Coriolis
//! term. A learned residual (a body-frame force/moment) is added before the
//! mass matrix inversion. Everything is generic over [`Real`] so the same code
//! runs in plain `f64`, in forward mode for Jacobians, and on the reverse tape.

use std::f64::consts::PI;

use metadapt_autodiff::{Dual, Real};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integration step [s].
pub const DT: f64 = 0.02;
pub const STATE_DIM: usize = 10;
pub const CONTROL_DIM: usize = 3;
pub const TERRAIN_DIM: usize = 14;
pub const GRAVITY: f64 = 9.81;
/// Floor on longitudinal wheel speed in slip denominators [m/s].
pub const SLIP_VELOCITY_FLOOR: f64 = 0.1;
/// Speed scale smoothing the sign of rolling resistance and brake force [m/s].
const SIGN_SMOOTHING: f64 = 0.3;

/// Indices into the flat state vector `[p, v, z]`.
pub mod idx {
    pub const PX: usize = 0;
    pub const PY: usize = 1;
    pub const YAW: usize = 2;
    pub const VX: usize = 3;
    pub const VY: usize = 4;
    pub const YAW_RATE: usize = 5;
    pub const BRAKE: usize = 6;
    pub const STEER: usize = 7;
    pub const STEER_RATE: usize = 8;
    pub const ENGINE: usize = 9;
    /// The measured velocity block.
    pub const VELOCITY: [usize; 3] = [VX, VY, YAW_RATE];
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Wrap by a value-dependent constant offset; the derivative passes through.
pub fn wrap_angle_s<S: Real>(a: S) -> S {
    let w = wrap_angle(a.value());
    let shift = w - a.value();
    if shift == 0.0 {
        a
    } else {
        a + shift
    }
}

/// Vehicle state: global pose, body-frame velocity, actuator states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleState<S = f64> {
    /// Global position [m].
    pub px: S,
    pub py: S,
    /// Heading [rad], kept in `(-pi, pi]`.
    pub yaw: S,
    /// Body-frame forward / lateral velocity [m/s] and yaw rate [rad/s].
    pub vx: S,
    pub vy: S,
    pub yaw_rate: S,
    /// Brake position in `[0, 1]`.
    pub brake: S,
    /// Steering column angle [rad] and its rate [rad/s].
    pub steer: S,
    pub steer_rate: S,
    /// Engine speed [rad/s].
    pub engine: S,
}

impl<S: Real> VehicleState<S> {
    pub fn from_array(a: [S; STATE_DIM]) -> Self {
        Self {
            px: a[0],
            py: a[1],
            yaw: a[2],
            vx: a[3],
            vy: a[4],
            yaw_rate: a[5],
            brake: a[6],
            steer: a[7],
            steer_rate: a[8],
            engine: a[9],
        }
    }

    pub fn to_array(&self) -> [S; STATE_DIM] {
        [
            self.px,
            self.py,
            self.yaw,
            self.vx,
            self.vy,
            self.yaw_rate,
            self.brake,
            self.steer,
            self.steer_rate,
            self.engine,
        ]
    }

    pub fn values(&self) -> VehicleState<f64> {
        VehicleState::from_array(self.to_array().map(|v| v.value()))
    }

    pub fn velocity(&self) -> [S; 3] {
        [self.vx, self.vy, self.yaw_rate]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl VehicleState<f64> {
    pub fn zero() -> Self {
        Self::from_array([0.0; STATE_DIM])
    }

    pub fn lift<S: Real>(&self) -> VehicleState<S> {
        VehicleState::from_array(self.to_array().map(S::cst))
    }

    pub fn speed_sq(&self) -> f64 {
        self.vx * self.vx + self.vy * self.vy + self.yaw_rate * self.yaw_rate
    }
}

impl Default for VehicleState<f64> {
    fn default() -> Self {
        Self::zero()
    }
}

/// Throttle, brake and normalized steering command.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub throttle: f64,
    pub brake: f64,
    pub steering: f64,
}

impl ControlInput {
    pub const LOWER: [f64; 3] = [0.0, 0.0, -1.0];
    pub const UPPER: [f64; 3] = [1.0, 1.0, 1.0];

    pub fn new(throttle: f64, brake: f64, steering: f64) -> Self {
        Self {
            throttle,
            brake,
            steering,
        }
    }

    /// Project onto the admissible box.
    pub fn clamped(mut self) -> Self {
        self.throttle = self.throttle.clamp(0.0, 1.0);
        self.brake = self.brake.clamp(0.0, 1.0);
        self.steering = self.steering.clamp(-1.0, 1.0);
        self
    }

    pub fn is_admissible(&self) -> bool {
        self.to_array()
            .iter()
            .zip(Self::LOWER.iter().zip(Self::UPPER))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= hi)
    }

    pub fn to_array(&self) -> [f64; CONTROL_DIM] {
        [self.throttle, self.brake, self.steering]
    }

    pub fn from_array(a: [f64; CONTROL_DIM]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn full_brake() -> Self {
        Self::new(0.0, 1.0, 0.0)
    }
}

/// Sensed terrain: roll, pitch and surface normals under the four wheels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainInput {
    pub roll: f64,
    pub pitch: f64,
    /// Unit normals, wheel order FL, FR, RL, RR.
    pub normals: [[f64; 3]; 4],
}

impl TerrainInput {
    pub fn flat() -> Self {
        Self {
            roll: 0.0,
            pitch: 0.0,
            normals: [[0.0, 0.0, 1.0]; 4],
        }
    }

    pub fn to_array(&self) -> [f64; TERRAIN_DIM] {
        let mut a = [0.0; TERRAIN_DIM];
        a[0] = self.roll;
        a[1] = self.pitch;
        for (w, n) in self.normals.iter().enumerate() {
            a[2 + 3 * w..5 + 3 * w].copy_from_slice(n);
        }
        a
    }

    pub fn from_array(a: [f64; TERRAIN_DIM]) -> Self {
        let mut normals = [[0.0; 3]; 4];
        for (w, n) in normals.iter_mut().enumerate() {
            n.copy_from_slice(&a[2 + 3 * w..5 + 3 * w]);
        }
        Self {
            roll: a[0],
            pitch: a[1],
            normals,
        }
    }

    pub fn is_valid(&self) -> bool {
        let half = PI / 2.0;
        self.roll.abs() < half
            && self.pitch.abs() < half
            && self.normals.iter().all(|n| {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                (len - 1.0).abs() < 1e-9
            })
    }
}

impl Default for TerrainInput {
    fn default() -> Self {
        Self::flat()
    }
}

/// Parameters of the parametric vehicle model. All entries are strictly
/// positive; meta-learning optimizes them in log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametricParams<S = f64> {
    /// [kg]
    pub mass: S,
    /// [kg m^2]
    pub yaw_inertia: S,
    /// CG to front / rear axle [m].
    pub front_axle: S,
    pub rear_axle: S,
    /// [m]
    pub track_width: S,
    /// [m]
    pub cg_height: S,
    /// Per-wheel longitudinal stiffness [N per unit slip].
    pub long_stiffness: S,
    /// Per-wheel cornering stiffness [N/rad].
    pub lat_stiffness: S,
    /// Friction coefficient limiting the tire force magnitude.
    pub friction: S,
    /// Rolling resistance coefficient (fraction of weight).
    pub rolling_resistance: S,
    /// Aerodynamic drag [N / (m/s)^2].
    pub aero_drag: S,
    /// Full-brake total force [N].
    pub brake_force: S,
    /// Actuator time constants [s].
    pub brake_tau: S,
    pub steer_tau: S,
    pub steer_rate_tau: S,
    pub engine_tau: S,
    /// Engine speed added at full throttle above the wheel-matched speed [rad/s].
    pub engine_gain: S,
    /// Ground speed per engine revolution [m/rad].
    pub drive_ratio: S,
    /// Steering column angle at full command [rad].
    pub column_range: S,
    /// Road wheel angle per column angle.
    pub steer_ratio: S,
}

pub const PSI_DIM: usize = 20;

impl Default for ParametricParams<f64> {
    fn default() -> Self {
        Self {
            mass: 700.0,
            yaw_inertia: 900.0,
            front_axle: 1.2,
            rear_axle: 1.3,
            track_width: 1.5,
            cg_height: 0.6,
            long_stiffness: 2600.0,
            lat_stiffness: 15000.0,
            friction: 0.9,
            rolling_resistance: 0.03,
            aero_drag: 0.8,
            brake_force: 6000.0,
            brake_tau: 0.15,
            steer_tau: 0.12,
            steer_rate_tau: 0.05,
            engine_tau: 0.3,
            engine_gain: 40.0,
            drive_ratio: 0.05,
            column_range: 6.0,
            steer_ratio: 0.06,
        }
    }
}

impl<S: Real> ParametricParams<S> {
    pub const NAMES: [&'static str; PSI_DIM] = [
        "mass",
        "yaw_inertia",
        "front_axle",
        "rear_axle",
        "track_width",
        "cg_height",
        "long_stiffness",
        "lat_stiffness",
        "friction",
        "rolling_resistance",
        "aero_drag",
        "brake_force",
        "brake_tau",
        "steer_tau",
        "steer_rate_tau",
        "engine_tau",
        "engine_gain",
        "drive_ratio",
        "column_range",
        "steer_ratio",
    ];

    pub fn to_vec(&self) -> Vec<S> {
        vec![
            self.mass,
            self.yaw_inertia,
            self.front_axle,
            self.rear_axle,
            self.track_width,
            self.cg_height,
            self.long_stiffness,
            self.lat_stiffness,
            self.friction,
            self.rolling_resistance,
            self.aero_drag,
            self.brake_force,
            self.brake_tau,
            self.steer_tau,
            self.steer_rate_tau,
            self.engine_tau,
            self.engine_gain,
            self.drive_ratio,
            self.column_range,
            self.steer_ratio,
        ]
    }

    pub fn from_slice(v: &[S]) -> Self {
        assert_eq!(v.len(), PSI_DIM, "parametric parameter vector length");
        Self {
            mass: v[0],
            yaw_inertia: v[1],
            front_axle: v[2],
            rear_axle: v[3],
            track_width: v[4],
            cg_height: v[5],
            long_stiffness: v[6],
            lat_stiffness: v[7],
            friction: v[8],
            rolling_resistance: v[9],
            aero_drag: v[10],
            brake_force: v[11],
            brake_tau: v[12],
            steer_tau: v[13],
            steer_rate_tau: v[14],
            engine_tau: v[15],
            engine_gain: v[16],
            drive_ratio: v[17],
            column_range: v[18],
            steer_ratio: v[19],
        }
    }

    pub fn wheelbase(&self) -> S {
        self.front_axle + self.rear_axle
    }

    /// Body-frame wheel positions, order FL, FR, RL, RR.
    pub fn wheel_positions(&self) -> [(S, S); 4] {
        let half = self.track_width * 0.5;
        [
            (self.front_axle, half),
            (self.front_axle, -half),
            (-self.rear_axle, half),
            (-self.rear_axle, -half),
        ]
    }

    /// Road wheel angle of the front axle for a given column angle.
    pub fn wheel_angle(&self, column: S) -> S {
        column * self.steer_ratio
    }
}

impl ParametricParams<f64> {
    pub fn lift<S: Real>(&self) -> ParametricParams<S> {
        ParametricParams::from_slice(&self.to_vec().into_iter().map(S::cst).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.to_vec()) {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("parametric parameter {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-wheel forces in each wheel's own frame, order FL, FR, RL, RR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WheelForces<S = f64> {
    pub longitudinal: [S; 4],
    pub lateral: [S; 4],
}

impl<S: Real> WheelForces<S> {
    /// Flattened as `[long_FL, lat_FL, long_FR, lat_FR, ...]`.
    pub fn to_array(&self) -> [S; 8] {
        let mut a = [S::zero(); 8];
        for w in 0..4 {
            a[2 * w] = self.longitudinal[w];
            a[2 * w + 1] = self.lateral[w];
        }
        a
    }
}

/// Actuator rates `[brake, steer, steer_rate, engine]` from first-order lags.
pub fn actuator_rates<S: Real>(x: &VehicleState<S>, u: &ControlInput, p: &ParametricParams<S>) -> [S; 4] {
    let brake_rate = (S::cst(u.brake) - x.brake) / p.brake_tau;
    let column_target = p.column_range * u.steering;
    let commanded_rate = (column_target - x.steer) / p.steer_tau;
    let steer_accel = (commanded_rate - x.steer_rate) / p.steer_rate_tau;
    let engine_target = x.vx / p.drive_ratio + p.engine_gain * u.throttle;
    let engine_rate = (engine_target - x.engine) / p.engine_tau;
    [brake_rate, x.steer_rate, steer_accel, engine_rate]
}

/// Static normal load per wheel [N], order FL, FR, RL, RR.
pub fn static_loads<S: Real>(p: &ParametricParams<S>) -> [S; 4] {
    let weight = p.mass * GRAVITY;
    let wb = p.wheelbase();
    let front = weight * p.rear_axle / wb * 0.5;
    let rear = weight * p.front_axle / wb * 0.5;
    [front, front, rear, rear]
}

/// Wheel-frame velocity `(longitudinal, lateral)` of each wheel.
pub fn wheel_velocities<S: Real>(x: &VehicleState<S>, p: &ParametricParams<S>) -> [(S, S); 4] {
    let delta = p.wheel_angle(x.steer);
    let (sd, cd) = (delta.sin(), delta.cos());
    let pos = p.wheel_positions();
    let mut out = [(S::zero(), S::zero()); 4];
    for (w, (wx, wy)) in pos.iter().enumerate() {
        let vxw = x.vx - x.yaw_rate * *wy;
        let vyw = x.vy + x.yaw_rate * *wx;
        out[w] = if w < 2 {
            (S::lin2(cd, vxw, sd, vyw), S::lin2(cd, vyw, -sd, vxw))
        } else {
            (vxw, vyw)
        };
    }
    out
}

/// Tire forces: linear in slip, limited by the friction circle, and never
/// large enough to reverse a wheel's lateral velocity within one step.
pub fn tire_forces<S: Real>(x: &VehicleState<S>, p: &ParametricParams<S>) -> WheelForces<S> {
    let loads = static_loads(p);
    let wheel_speed = x.engine * p.drive_ratio;
    let brake_total = p.brake_force * x.brake * 0.25;
    let vels = wheel_velocities(x, p);
    let mut longitudinal = [S::zero(); 4];
    let mut lateral = [S::zero(); 4];
    for w in 0..4 {
        let (vl, vt) = vels[w];
        let denom = vl.abs().max(S::cst(SLIP_VELOCITY_FLOOR));
        let slip = (wheel_speed - vl) / denom;
        let alpha = (vt / denom).atan();
        let brake = brake_total * (vl / SIGN_SMOOTHING).tanh();
        let mut fl = p.long_stiffness * slip - brake;
        let mut ft = -(p.lat_stiffness * alpha);

        let mass_share = loads[w] / GRAVITY;
        let no_reversal = mass_share * vt.abs() / DT;
        if ft.abs().value() > no_reversal.value() {
            ft = if ft.value() > 0.0 { no_reversal } else { -no_reversal };
        }

        let limit = p.friction * loads[w];
        let mag_sq = fl * fl + ft * ft;
        if mag_sq.value() > limit.value() * limit.value() {
            let scale = limit / mag_sq.sqrt();
            fl = fl * scale;
            ft = ft * scale;
        }
        longitudinal[w] = fl;
        lateral[w] = ft;
    }
    WheelForces { longitudinal, lateral }
}

/// `X(x) F`: rotate wheel forces into the body frame and sum into
/// `(Fx, Fy, Mz)`.
pub fn body_wrench<S: Real>(x: &VehicleState<S>, f: &WheelForces<S>, p: &ParametricParams<S>) -> [S; 3] {
    let delta = p.wheel_angle(x.steer);
    let (sd, cd) = (delta.sin(), delta.cos());
    let pos = p.wheel_positions();
    let mut fx = S::zero();
    let mut fy = S::zero();
    let mut mz = S::zero();
    for w in 0..4 {
        let (l, t) = (f.longitudinal[w], f.lateral[w]);
        let (bx, by) = if w < 2 {
            (S::lin2(cd, l, -sd, t), S::lin2(sd, l, cd, t))
        } else {
            (l, t)
        };
        fx += bx;
        fy += by;
        mz += S::lin2(pos[w].0, by, -pos[w].1, bx);
    }
    [fx, fy, mz]
}

/// Coriolis, drag, rolling resistance and slope gravity accelerations `D`.
pub fn drift_acceleration<S: Real>(x: &VehicleState<S>, y: &TerrainInput, p: &ParametricParams<S>) -> [S; 3] {
    let drag = p.aero_drag * x.vx * x.vx.abs() / p.mass;
    let rolling = p.rolling_resistance * GRAVITY * (x.vx / SIGN_SMOOTHING).tanh();
    let ax = x.yaw_rate * x.vy - drag - rolling - S::cst(GRAVITY * y.pitch.sin());
    let ay = -(x.yaw_rate * x.vx) - S::cst(GRAVITY * y.roll.sin() * y.pitch.cos());
    [ax, ay, S::zero()]
}

/// Body acceleration `M^-1 (X F + zeta) + D` with a physical residual wrench.
pub fn acceleration<S: Real>(
    x: &VehicleState<S>,
    y: &TerrainInput,
    forces: &WheelForces<S>,
    residual: [S; 3],
    p: &ParametricParams<S>,
) -> [S; 3] {
    let wrench = body_wrench(x, forces, p);
    let d = drift_acceleration(x, y, p);
    [
        (wrench[0] + residual[0]) / p.mass + d[0],
        (wrench[1] + residual[1]) / p.mass + d[1],
        (wrench[2] + residual[2]) / p.yaw_inertia + d[2],
    ]
}

/// Euler update from precomputed body acceleration and actuator rates.
pub fn integrate<S: Real>(x: &VehicleState<S>, accel: [S; 3], zdot: [S; 4]) -> VehicleState<S> {
    let (s, c) = (x.yaw.sin(), x.yaw.cos());
    VehicleState {
        px: x.px + S::lin2(c, x.vx, -s, x.vy) * DT,
        py: x.py + S::lin2(s, x.vx, c, x.vy) * DT,
        yaw: wrap_angle_s(x.yaw + x.yaw_rate * DT),
        vx: x.vx + accel[0] * DT,
        vy: x.vy + accel[1] * DT,
        yaw_rate: x.yaw_rate + accel[2] * DT,
        brake: (x.brake + zdot[0] * DT).clamp_cst(0.0, 1.0),
        steer: x.steer + zdot[1] * DT,
        steer_rate: x.steer_rate + zdot[2] * DT,
        engine: x.engine + zdot[3] * DT,
    }
}

/// One step of the parametric dynamics with a given physical residual wrench.
pub fn step_with_residual<S: Real>(
    x: &VehicleState<S>,
    u: &ControlInput,
    y: &TerrainInput,
    residual: [S; 3],
    p: &ParametricParams<S>,
) -> VehicleState<S> {
    let forces = tire_forces(x, p);
    let accel = acceleration(x, y, &forces, residual, p);
    let zdot = actuator_rates(x, u, p);
    integrate(x, accel, zdot)
}

/// Fail with the first non-finite entry.
pub fn check_finite<S: Real>(x: &VehicleState<S>) -> Result<()> {
    match x.to_array().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFiniteState { index }),
        None => Ok(()),
    }
}

/// `d step / d x` with the residual wrench held fixed.
pub fn state_jacobian<S: Real>(
    x: &VehicleState<S>,
    u: &ControlInput,
    y: &TerrainInput,
    residual: [S; 3],
    p: &ParametricParams<S>,
) -> [[S; STATE_DIM]; STATE_DIM] {
    type D<S> = Dual<S, STATE_DIM>;
    let xs = x.to_array();
    let mut seeded = [D::<S>::constant(S::zero()); STATE_DIM];
    for (k, v) in xs.iter().enumerate() {
        seeded[k] = D::seeded(*v, k);
    }
    let xd = VehicleState::from_array(seeded);
    let pd = ParametricParams::from_slice(&p.to_vec().into_iter().map(D::constant).collect::<Vec<_>>());
    let rd = residual.map(D::constant);
    let next = step_with_residual(&xd, u, y, rd, &pd).to_array();
    let mut jac = [[S::zero(); STATE_DIM]; STATE_DIM];
    for (r, out) in next.iter().enumerate() {
        jac[r] = out.d;
    }
    jac
}
