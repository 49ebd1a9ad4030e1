//! Ground-truth simulator: procedural maps, terrain sensing and a
//! kinematic-dynamic bicycle model that differs from the learned model.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{idx, wrap_angle, ControlInput, ParametricParams, TerrainInput, VehicleState, DT, GRAVITY};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mppi::TerrainSource;

pub const MAP_SIZE: f64 = 200.0;
pub const MAP_CELL: f64 = 0.5;
pub const FRICTION_RANGE: (f64, f64) = (0.2, 1.2);
const MAP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapCategory {
    ShallowSparse,
    ShallowDense,
    SteepSparse,
    SteepDense,
}

impl MapCategory {
    pub const ALL: [MapCategory; 4] = [
        MapCategory::ShallowSparse,
        MapCategory::ShallowDense,
        MapCategory::SteepSparse,
        MapCategory::SteepDense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MapCategory::ShallowSparse => "shallow-sparse",
            MapCategory::ShallowDense => "shallow-dense",
            MapCategory::SteepSparse => "steep-sparse",
            MapCategory::SteepDense => "steep-dense",
        }
    }

    pub fn is_steep(self) -> bool {
        matches!(self, MapCategory::SteepSparse | MapCategory::SteepDense)
    }

    pub fn is_dense(self) -> bool {
        matches!(self, MapCategory::ShallowDense | MapCategory::SteepDense)
    }

    /// Target maximum slope of the generated heightmap [deg].
    pub fn max_slope_deg(self) -> f64 {
        if self.is_steep() {
            22.0
        } else {
            8.0
        }
    }

    pub fn obstacle_count(self) -> usize {
        if self.is_dense() {
            36
        } else {
            12
        }
    }
}

impl fmt::Display for MapCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for MapCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown map category '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainMap {
    pub height: Grid,
    pub friction: Grid,
    /// 1 on obstacle nodes, 0 elsewhere.
    pub obstacles: Grid,
    pub category: MapCategory,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MapHeader {
    version: u32,
    rows: usize,
    cols: usize,
    cell: f64,
    category: MapCategory,
    seed: u64,
}

/// Figure-eight course through the map centre; the last waypoint is the
/// start.
pub fn figure_eight(center: (f64, f64), half_width: f64, half_height: f64, count: usize) -> Vec<(f64, f64)> {
    (1..=count)
        .map(|k| {
            let s = std::f64::consts::TAU * k as f64 / count as f64;
            (center.0 + half_width * s.sin(), center.1 + 2.0 * half_height * s.sin() * s.cos())
        })
        .collect()
}

/// The default evaluation course.
pub fn default_course() -> Vec<(f64, f64)> {
    figure_eight((MAP_SIZE / 2.0, MAP_SIZE / 2.0), 34.0, 24.0, 24)
}

fn fbm(seed: u32, octaves: usize, frequency: f64) -> Fbm<Perlin> {
    Fbm::<Perlin>::new(seed).set_octaves(octaves).set_frequency(frequency).set_persistence(0.5)
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Distance from a point to the closed polyline through `waypoints`.
pub fn course_distance(p: (f64, f64), waypoints: &[(f64, f64)]) -> f64 {
    let n = waypoints.len();
    (0..n)
        .map(|i| point_segment_distance(p, waypoints[i], waypoints[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Node-wise slope angles [rad] from central differences.
pub fn slope_angles(height: &Grid) -> Vec<f64> {
    let mut out = Vec::with_capacity(height.data.len());
    for r in 0..height.rows {
        for c in 0..height.cols {
            let (gx, gy) = node_gradient(height, r, c);
            out.push(gx.hypot(gy).atan());
        }
    }
    out
}

fn node_gradient(h: &Grid, r: usize, c: usize) -> (f64, f64) {
    let (c0, c1) = (c.saturating_sub(1), (c + 1).min(h.cols - 1));
    let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h.rows - 1));
    let gx = (h.get(r, c1) - h.get(r, c0)) / ((c1 - c0) as f64 * h.cell);
    let gy = (h.get(r1, c) - h.get(r0, c)) / ((r1 - r0) as f64 * h.cell);
    (gx, gy)
}

/// Procedural map: fBm heights scaled to the category's steepness, fBm
/// friction and disc obstacles kept off the default course.
pub fn generate_map(category: MapCategory, seed: u64) -> TerrainMap {
    generate_map_with(category, seed, MAP_SIZE, MAP_CELL, &default_course())
}

pub fn generate_map_with(category: MapCategory, seed: u64, size: f64, cell: f64, keep_clear: &[(f64, f64)]) -> TerrainMap {
    let n = (size / cell).round() as usize + 1;
    let s32 = (seed as u32) ^ ((seed >> 32) as u32);
    let relief = fbm(s32, 3, 1.0 / 60.0);
    let mut height = Grid::from_fn(n, n, cell, |r, c| relief.get([c as f64 * cell, r as f64 * cell]));
    let max_slope = slope_angles(&height).into_iter().fold(0.0, f64::max).tan();
    let target = category.max_slope_deg().to_radians().tan();
    if max_slope > 0.0 {
        height.data.iter_mut().for_each(|h| *h *= target / max_slope);
    }

    let grip = fbm(s32.wrapping_add(7919), 2, 1.0 / 40.0);
    let friction = Grid::from_fn(n, n, cell, |r, c| {
        (0.8 + 0.5 * grip.get([c as f64 * cell, r as f64 * cell])).clamp(FRICTION_RANGE.0, FRICTION_RANGE.1)
    });

    let mut obstacles = Grid::filled(n, n, cell, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b57_ac1e);
    let mut placed = 0;
    let mut attempts = 0;
    while placed < category.obstacle_count() && attempts < 10_000 {
        attempts += 1;
        let centre = (rng.gen_range(0.0..size), rng.gen_range(0.0..size));
        let radius = rng.gen_range(1.5..4.0);
        if !keep_clear.is_empty() && course_distance(centre, keep_clear) < radius + 5.0 {
            continue;
        }
        placed += 1;
        let lo_c = ((centre.0 - radius) / cell).floor().max(0.0) as usize;
        let hi_c = (((centre.0 + radius) / cell).ceil() as usize).min(n - 1);
        let lo_r = ((centre.1 - radius) / cell).floor().max(0.0) as usize;
        let hi_r = (((centre.1 + radius) / cell).ceil() as usize).min(n - 1);
        for r in lo_r..=hi_r {
            for c in lo_c..=hi_c {
                let (x, y) = obstacles.position(r, c);
                if (x - centre.0).hypot(y - centre.1) <= radius {
                    obstacles.set(r, c, 1.0);
                }
            }
        }
    }
    TerrainMap {
        height,
        friction,
        obstacles,
        category,
        seed,
    }
}

impl TerrainMap {
    pub fn flat(size: f64, cell: f64, friction: f64) -> Self {
        let n = (size / cell).round() as usize + 1;
        Self {
            height: Grid::filled(n, n, cell, 0.0),
            friction: Grid::filled(n, n, cell, friction),
            obstacles: Grid::filled(n, n, cell, 0.0),
            category: MapCategory::ShallowSparse,
            seed: 0,
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        self.height.contains(px, py)
    }

    pub fn obstacle_cells(&self) -> usize {
        self.obstacles.data.iter().filter(|v| **v > 0.0).count()
    }

    pub fn friction_at(&self, px: f64, py: f64) -> f64 {
        self.friction.bilinear_clamped(px, py)
    }

    /// World-frame height gradient, bilinear in the node gradients.
    pub fn gradient(&self, px: f64, py: f64) -> (f64, f64) {
        let h = &self.height;
        let gx = (px / h.cell).clamp(0.0, (h.cols - 1) as f64);
        let gy = (py / h.cell).clamp(0.0, (h.rows - 1) as f64);
        let c0 = (gx.floor() as usize).min(h.cols - 2);
        let r0 = (gy.floor() as usize).min(h.rows - 2);
        let (fx, fy) = (gx - c0 as f64, gy - r0 as f64);
        let g00 = node_gradient(h, r0, c0);
        let g01 = node_gradient(h, r0, c0 + 1);
        let g10 = node_gradient(h, r0 + 1, c0);
        let g11 = node_gradient(h, r0 + 1, c0 + 1);
        let lerp = |a: f64, b: f64, c: f64, d: f64| {
            let top = a + (b - a) * fx;
            top + (c + (d - c) * fx - top) * fy
        };
        (lerp(g00.0, g01.0, g10.0, g11.0), lerp(g00.1, g01.1, g10.1, g11.1))
    }

    /// Body-frame unit normal of the local surface at a world point.
    pub fn normal_at(&self, px: f64, py: f64, yaw: f64) -> [f64; 3] {
        let (gx, gy) = self.gradient(px, py);
        let (s, c) = yaw.sin_cos();
        let (bx, by) = (c * gx + s * gy, -s * gx + c * gy);
        let len = (bx * bx + by * by + 1.0).sqrt();
        [-bx / len, -by / len, 1.0 / len]
    }

    /// Roll, pitch and wheel normals at a pose. The flag is `false` off the
    /// map, where flat terrain is returned.
    pub fn sense(&self, px: f64, py: f64, yaw: f64, geometry: &ParametricParams) -> (TerrainInput, bool) {
        if !self.contains(px, py) {
            return (TerrainInput::flat(), false);
        }
        let (gx, gy) = self.gradient(px, py);
        let (s, c) = yaw.sin_cos();
        let pitch = (c * gx + s * gy).atan();
        let roll = (-s * gx + c * gy).atan();
        let mut normals = [[0.0; 3]; 4];
        for (n, (wx, wy)) in normals.iter_mut().zip(geometry.wheel_positions()) {
            let (qx, qy) = (px + c * wx - s * wy, py + s * wx + c * wy);
            *n = self.normal_at(qx, qy, yaw);
        }
        (TerrainInput { roll, pitch, normals }, true)
    }

    /// Planning costmap: 1 on flat free ground, growing with slope, and
    /// infinite on obstacles.
    pub fn costmap(&self) -> Grid {
        let slopes = slope_angles(&self.height);
        let mut g = Grid::filled(self.height.rows, self.height.cols, self.height.cell, 1.0);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = if self.obstacles.data[i] > 0.0 {
                f64::INFINITY
            } else {
                1.0 + 4.0 * slopes[i].tan().powi(2)
            };
        }
        g
    }

    /// Write `<stem>.json` (header) and `<stem>.bin` (heights, friction,
    /// obstacles as little-endian f64).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = MapHeader {
            version: MAP_FORMAT_VERSION,
            rows: self.height.rows,
            cols: self.height.cols,
            cell: self.height.cell,
            category: self.category,
            seed: self.seed,
        };
        let hp = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
        let mut bytes = Vec::with_capacity(3 * 8 * self.height.data.len());
        for g in [&self.height, &self.friction, &self.obstacles] {
            for v in &g.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bp = dir.join(format!("{stem}.bin"));
        fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let hp = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: MapHeader = serde_json::from_str(&text).map_err(|e| Error::json(&hp, e))?;
        if header.version != MAP_FORMAT_VERSION {
            return Err(Error::Version {
                path: hp,
                found: header.version,
                expected: MAP_FORMAT_VERSION,
            });
        }
        let bp: PathBuf = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        let n = header.rows * header.cols;
        if bytes.len() != 3 * 8 * n {
            return Err(Error::Format {
                path: bp,
                msg: format!("expected {} bytes, found {}", 3 * 8 * n, bytes.len()),
            });
        }
        let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        let grid = |k: usize| Grid {
            rows: header.rows,
            cols: header.cols,
            cell: header.cell,
            data: values[k * n..(k + 1) * n].to_vec(),
        };
        Ok(Self {
            height: grid(0),
            friction: grid(1),
            obstacles: grid(2),
            category: header.category,
            seed: header.seed,
        })
    }
}

/// A map seen through a fixed vehicle geometry, for planner rollouts.
pub struct MapTerrain<'a> {
    pub map: &'a TerrainMap,
    pub geometry: ParametricParams,
}

impl TerrainSource for MapTerrain<'_> {
    fn terrain_at(&self, px: f64, py: f64, yaw: f64) -> TerrainInput {
        self.map.sense(px, py, yaw, &self.geometry).0
    }
}

/// Physics of the simulated vehicle: a bicycle model with saturating
/// magic-formula tires and its own actuator lags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimPhysics {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub front_axle: f64,
    pub rear_axle: f64,
    pub track_width: f64,
    pub cg_height: f64,
    /// Magic-formula `(B, C)` for lateral and longitudinal slip.
    pub lateral_tire: (f64, f64),
    pub long_tire: (f64, f64),
    /// Multiplier on the map friction.
    pub friction_scale: f64,
    pub aero_drag: f64,
    pub rolling_resistance: f64,
    pub brake_force: f64,
    pub brake_tau: f64,
    pub steer_tau: f64,
    pub steer_rate_tau: f64,
    pub engine_tau: f64,
    pub engine_gain: f64,
    pub drive_ratio: f64,
    pub column_range: f64,
    pub steer_ratio: f64,
    /// Below this speed the model is purely kinematic; fully dynamic at
    /// twice the speed.
    pub kinematic_speed: f64,
    pub substeps: usize,
}

impl SimPhysics {
    /// Physics that generates the training data.
    pub fn data_generation() -> Self {
        Self {
            mass: 720.0,
            yaw_inertia: 950.0,
            front_axle: 1.2,
            rear_axle: 1.3,
            track_width: 1.5,
            cg_height: 0.6,
            lateral_tire: (7.0, 1.5),
            long_tire: (9.0, 1.6),
            friction_scale: 1.0,
            aero_drag: 1.0,
            rolling_resistance: 0.035,
            brake_force: 6500.0,
            brake_tau: 0.15,
            steer_tau: 0.12,
            steer_rate_tau: 0.05,
            engine_tau: 0.3,
            engine_gain: 38.0,
            drive_ratio: 0.05,
            column_range: 6.0,
            steer_ratio: 0.06,
            kinematic_speed: 1.5,
            substeps: 2,
        }
    }

    /// Held-out deployment physics: heavier, draggier, slipperier and with
    /// slower actuators.
    pub fn deployment() -> Self {
        Self {
            mass: 850.0,
            yaw_inertia: 1250.0,
            lateral_tire: (5.0, 1.7),
            long_tire: (7.0, 1.7),
            friction_scale: 0.8,
            aero_drag: 2.0,
            rolling_resistance: 0.06,
            steer_tau: 0.2,
            engine_tau: 0.45,
            engine_gain: 30.0,
            ..Self::data_generation()
        }
    }

    pub fn wheelbase(&self) -> f64 {
        self.front_axle + self.rear_axle
    }

    /// Geometry in the learned model's parameter layout, for sensing and
    /// rollover metrics.
    pub fn geometry(&self) -> ParametricParams {
        ParametricParams {
            mass: self.mass,
            yaw_inertia: self.yaw_inertia,
            front_axle: self.front_axle,
            rear_axle: self.rear_axle,
            track_width: self.track_width,
            cg_height: self.cg_height,
            column_range: self.column_range,
            steer_ratio: self.steer_ratio,
            drive_ratio: self.drive_ratio,
            ..ParametricParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.mass,
            self.yaw_inertia,
            self.front_axle,
            self.rear_axle,
            self.friction_scale,
            self.brake_tau,
            self.steer_tau,
            self.steer_rate_tau,
            self.engine_tau,
            self.drive_ratio,
            self.kinematic_speed,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.substeps == 0 {
            return Err(Error::Config(format!("invalid simulator physics {self:?}")));
        }
        Ok(())
    }
}

fn magic(b: f64, c: f64, slip: f64) -> f64 {
    (c * (b * slip).atan()).sin()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimState {
    pub vehicle: VehicleState,
    pub t: f64,
}

/// Per-axle planar forces `(Fx, Fy)` in the wheel frame.
fn axle_forces(x: &VehicleState, mu: f64, loads: [f64; 2], brake: f64, ph: &SimPhysics) -> [(f64, f64); 2] {
    let delta = ph.steer_ratio * x.steer;
    let (sd, cd) = delta.sin_cos();
    let wheel_speed = x.engine * ph.drive_ratio;
    let front_lat_body = x.vy + ph.front_axle * x.yaw_rate;
    let vel = [
        (cd * x.vx + sd * front_lat_body, -sd * x.vx + cd * front_lat_body),
        (x.vx, x.vy - ph.rear_axle * x.yaw_rate),
    ];
    let mut out = [(0.0, 0.0); 2];
    for a in 0..2 {
        let (vl, vt) = vel[a];
        let denom = vl.abs().max(0.5);
        let kappa = (wheel_speed - vl) / denom;
        let alpha = (vt / denom).atan();
        let limit = mu * loads[a];
        let mut fx = limit * magic(ph.long_tire.0, ph.long_tire.1, kappa) - 0.5 * brake * (vl / 0.3).tanh();
        let mut fy = -limit * magic(ph.lateral_tire.0, ph.lateral_tire.1, alpha);
        let mag = fx.hypot(fy);
        if mag > limit {
            fx *= limit / mag;
            fy *= limit / mag;
        }
        out[a] = (fx, fy);
    }
    out
}

/// Advance the simulator by `dt` with the given control, local friction
/// coefficient and terrain.
pub fn sim_step(s: &SimState, u: &ControlInput, mu_map: f64, y: &TerrainInput, ph: &SimPhysics, dt: f64) -> SimState {
    let mut x = s.vehicle;
    let h = dt / ph.substeps as f64;
    let mu = (mu_map * ph.friction_scale).max(0.0);
    let l = ph.wheelbase();
    let normal = GRAVITY * ph.mass * y.pitch.cos() * y.roll.cos();
    let loads = [normal * ph.rear_axle / l, normal * ph.front_axle / l];
    for _ in 0..ph.substeps {
        let brake = ph.brake_force * x.brake;
        let f = axle_forces(&x, mu, loads, brake, ph);
        let delta = ph.steer_ratio * x.steer;
        let (sd, cd) = delta.sin_cos();
        let fx = f[1].0 + cd * f[0].0 - sd * f[0].1;
        let fy = f[1].1 + sd * f[0].0 + cd * f[0].1;
        let mz = ph.front_axle * (sd * f[0].0 + cd * f[0].1) - ph.rear_axle * f[1].1;

        let drag = ph.aero_drag * x.vx * x.vx.abs() / ph.mass;
        let rolling = ph.rolling_resistance * GRAVITY * (x.vx / 0.3).tanh();
        let ax = fx / ph.mass + x.yaw_rate * x.vy - drag - rolling - GRAVITY * y.pitch.sin();
        let ay = fy / ph.mass - x.yaw_rate * x.vx - GRAVITY * y.roll.sin() * y.pitch.cos();
        let rdot = mz / ph.yaw_inertia;

        let column_target = ph.column_range * u.steering;
        let steer_accel = ((column_target - x.steer) / ph.steer_tau - x.steer_rate) / ph.steer_rate_tau;
        let engine_target = x.vx / ph.drive_ratio + ph.engine_gain * u.throttle;

        let (sy, cy) = x.yaw.sin_cos();
        x.px += h * (cy * x.vx - sy * x.vy);
        x.py += h * (sy * x.vx + cy * x.vy);
        x.yaw = wrap_angle(x.yaw + h * x.yaw_rate);
        let vx = x.vx + h * ax;
        let vy_dyn = x.vy + h * ay;
        let r_dyn = x.yaw_rate + h * rdot;
        let blend = ((vx.abs() - ph.kinematic_speed) / ph.kinematic_speed).clamp(0.0, 1.0);
        let r_kin = vx * delta.tan() / l;
        x.yaw_rate = blend * r_dyn + (1.0 - blend) * r_kin;
        x.vy = blend * vy_dyn + (1.0 - blend) * ph.rear_axle * r_kin;
        x.vx = vx;
        x.brake += h * (u.brake - x.brake) / ph.brake_tau;
        x.steer += h * x.steer_rate;
        x.steer_rate += h * steer_accel;
        x.engine += h * (engine_target - x.engine) / ph.engine_tau;
    }
    SimState { vehicle: x, t: s.t + dt }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementNoise {
    pub position: f64,
    pub yaw: f64,
    pub velocity: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            position: 0.05,
            yaw: 0.01,
            velocity: 0.05,
        }
    }
}

impl MeasurementNoise {
    pub fn none() -> Self {
        Self {
            position: 0.0,
            yaw: 0.0,
            velocity: 0.0,
        }
    }
}

/// Additive Gaussian noise on pose and body velocities.
pub fn measure(x: &VehicleState, noise: &MeasurementNoise, rng: &mut ChaCha8Rng) -> VehicleState {
    let mut draw = |std: f64| {
        if std > 0.0 {
            Normal::new(0.0, std).expect("finite std").sample(rng)
        } else {
            0.0
        }
    };
    let mut a = x.to_array();
    a[idx::PX] += draw(noise.position);
    a[idx::PY] += draw(noise.position);
    a[idx::YAW] = wrap_angle(a[idx::YAW] + draw(noise.yaw));
    for i in idx::VELOCITY {
        a[i] += draw(noise.velocity);
    }
    VehicleState::from_array(a)
}

/// Kinetic energy including yaw.
pub fn kinetic_energy(x: &VehicleState, ph: &SimPhysics) -> f64 {
    0.5 * ph.mass * (x.vx * x.vx + x.vy * x.vy) + 0.5 * ph.yaw_inertia * x.yaw_rate * x.yaw_rate
}

/// Convenience: one simulator step of `DT` on a map.
pub fn sim_step_on_map(s: &SimState, u: &ControlInput, map: &TerrainMap, ph: &SimPhysics) -> SimState {
    let x = &s.vehicle;
    let (y, _) = map.sense(x.px, x.py, x.yaw, &ph.geometry());
    sim_step(s, u, map.friction_at(x.px, x.py), &y, ph, DT)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::tilted_normal;

    fn moving(speed: f64, ph: &SimPhysics) -> SimState {
        let mut x = VehicleState::zero();
        x.vx = speed;
        x.engine = speed / ph.drive_ratio;
        SimState { vehicle: x, t: 0.0 }
    }

    #[test]
    fn category_names_round_trip() {
        for c in MapCategory::ALL {
            assert_eq!(c.name().parse::<MapCategory>().unwrap(), c);
        }
        assert!("muddy".parse::<MapCategory>().is_err());
    }

    #[test]
    fn sensing_flat_map() {
        let map = TerrainMap::flat(20.0, 0.5, 0.9);
        let (y, ok) = map.sense(10.0, 10.0, 0.7, &ParametricParams::default());
        assert!(ok);
        assert_eq!((y.roll, y.pitch), (0.0, 0.0));
        for n in y.normals {
            assert_eq!(n, [0.0, 0.0, 1.0]);
        }
        let (off, ok) = map.sense(-3.0, 10.0, 0.0, &ParametricParams::default());
        assert!(!ok);
        assert_eq!(off, TerrainInput::flat());
    }

    #[test]
    fn ramp_along_x_gives_pitch() {
        let g = 0.2;
        let mut map = TerrainMap::flat(30.0, 0.5, 0.9);
        map.height = Grid::from_fn(61, 61, 0.5, |_, c| g * c as f64 * 0.5);
        let (y, _) = map.sense(15.0, 15.0, 0.0, &ParametricParams::default());
        assert!((y.pitch - g.atan()).abs() < 1e-12);
        assert!(y.roll.abs() < 1e-12);
        let (side, _) = map.sense(15.0, 15.0, -std::f64::consts::FRAC_PI_2, &ParametricParams::default());
        assert!((side.roll - g.atan()).abs() < 1e-12);
        let expect = tilted_normal(0.0, g.atan());
        for k in 0..3 {
            assert!((y.normals[0][k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_surface_normals_match_analytic() {
        let (a, b, c) = (0.01, -0.004, 0.006);
        let mut map = TerrainMap::flat(40.0, 0.5, 0.9);
        map.height = Grid::from_fn(81, 81, 0.5, |r, col| {
            let (x, y) = (col as f64 * 0.5, r as f64 * 0.5);
            a * x * x + b * x * y + c * y * y
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let (px, py, yaw) = (rng.gen_range(5.0..35.0), rng.gen_range(5.0..35.0), rng.gen_range(-3.0..3.0));
            let (gx, gy) = (2.0 * a * px + b * py, b * px + 2.0 * c * py);
            let (s, cs) = f64::sin_cos(yaw);
            let (bx, by) = (cs * gx + s * gy, -s * gx + cs * gy);
            let len = (bx * bx + by * by + 1.0).sqrt();
            let expect = [-bx / len, -by / len, 1.0 / len];
            let got = map.normal_at(px, py, yaw);
            for k in 0..3 {
                assert!((got[k] - expect[k]).abs() < 1e-3);
            }
            let norm: f64 = got.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn map_slopes_match_category() {
        for (cat, seed) in [(MapCategory::ShallowSparse, 1), (MapCategory::SteepDense, 2)] {
            let map = generate_map_with(cat, seed, 100.0, 0.5, &[]);
            let mut slopes: Vec<f64> = slope_angles(&map.height).into_iter().map(f64::to_degrees).collect();
            slopes.sort_by(f64::total_cmp);
            let max = *slopes.last().unwrap();
            let p90 = slopes[slopes.len() * 9 / 10];
            if cat.is_steep() {
                assert!(max <= 30.0 && p90 > 10.0, "{cat}: max {max} p90 {p90}");
            } else {
                assert!(max <= 10.0, "{cat}: max {max}");
            }
        }
    }

    #[test]
    fn maps_are_deterministic_and_dense_has_more_obstacles() {
        let a = generate_map_with(MapCategory::SteepSparse, 5, 60.0, 0.5, &[]);
        let b = generate_map_with(MapCategory::SteepSparse, 5, 60.0, 0.5, &[]);
        assert_eq!(a, b);
        let d = generate_map_with(MapCategory::SteepDense, 5, 60.0, 0.5, &[]);
        assert!(d.obstacle_cells() > a.obstacle_cells());
        assert!(a.friction.data.iter().all(|m| (0.2..=1.2).contains(m)));
    }

    #[test]
    fn map_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = generate_map_with(MapCategory::ShallowDense, 3, 30.0, 0.5, &[]);
        map.save(dir.path(), "m").unwrap();
        assert_eq!(TerrainMap::load(dir.path(), "m").unwrap(), map);
    }

    #[test]
    fn straight_line_on_flat_ground() {
        let ph = SimPhysics::data_generation();
        let mut s = moving(5.0, &ph);
        let u = ControlInput::new(0.2, 0.0, 0.0);
        for _ in 0..200 {
            s = sim_step(&s, &u, 0.9, &TerrainInput::flat(), &ph, DT);
        }
        assert!(s.vehicle.py.abs() < 1e-12 && s.vehicle.yaw.abs() < 1e-12);
        assert!(s.vehicle.px > 15.0);
    }

    #[test]
    fn kinematic_circle_at_low_speed() {
        let ph = SimPhysics::data_generation();
        let mut s = moving(1.0, &ph);
        let u = ControlInput::new(0.0, 0.0, 0.5);
        s.vehicle.steer = ph.column_range * u.steering;
        let delta = ph.steer_ratio * s.vehicle.steer;
        let radius = ph.wheelbase() / delta.tan();
        let rear = |x: &VehicleState| (x.px - ph.rear_axle * x.yaw.cos(), x.py - ph.rear_axle * x.yaw.sin());
        let start = rear(&s.vehicle);
        let centre = (start.0, start.1 + radius);
        for _ in 0..100 {
            s = sim_step(&s, &u, 0.9, &TerrainInput::flat(), &ph, DT);
            assert!(s.vehicle.vx < ph.kinematic_speed && s.vehicle.vx > 0.2);
            let p = rear(&s.vehicle);
            let d = (p.0 - centre.0).hypot(p.1 - centre.1);
            assert!((d - radius).abs() < 0.02 * radius, "{d} vs {radius}");
        }
    }

    #[test]
    fn acceleration_saturates_at_friction_limit() {
        let ph = SimPhysics {
            aero_drag: 0.0,
            rolling_resistance: 0.0,
            ..SimPhysics::data_generation()
        };
        let mu = 0.3;
        let mut s = moving(3.0, &ph);
        s.vehicle.engine += 10.0;
        let before = s.vehicle.vx;
        let next = sim_step(&s, &ControlInput::new(1.0, 0.0, 0.0), mu, &TerrainInput::flat(), &ph, DT);
        let accel = (next.vehicle.vx - before) / DT;
        assert!(accel <= mu * ph.friction_scale * GRAVITY + 1e-9);
        assert!(accel > 0.9 * mu * GRAVITY);
    }

    #[test]
    fn coasting_never_gains_energy() {
        for ph in [SimPhysics::data_generation(), SimPhysics::deployment()] {
            let mut s = moving(8.0, &ph);
            let u = ControlInput::new(0.0, 0.0, 0.0);
            let mut e = kinetic_energy(&s.vehicle, &ph);
            for _ in 0..1000 {
                s = sim_step(&s, &u, 0.9, &TerrainInput::flat(), &ph, DT);
                let e2 = kinetic_energy(&s.vehicle, &ph);
                assert!(e2 <= e + 1e-9);
                e = e2;
            }
        }
    }

    #[test]
    fn measurement_noise_has_configured_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = VehicleState::zero();
        let n = 20_000;
        let samples: Vec<VehicleState> = (0..n).map(|_| measure(&x, &MeasurementNoise::default(), &mut rng)).collect();
        let std = |f: fn(&VehicleState) -> f64| (samples.iter().map(|s| f(s).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((std(|s| s.px) - 0.05).abs() < 0.002);
        assert!((std(|s| s.yaw) - 0.01).abs() < 0.0004);
        assert!((std(|s| s.vy) - 0.05).abs() < 0.002);
        assert!(samples.iter().all(|s| s.engine == 0.0 && s.steer == 0.0));
    }
}
