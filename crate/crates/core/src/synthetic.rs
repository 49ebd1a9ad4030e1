//! Synthetic driving data generated by a model itself. Used by the oracle
//! tests and for quick experiments without the simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{ControlInput, TerrainInput, VehicleState};
use crate::error::Result;
use crate::meta::RunLog;
use crate::model::HybridModel;
use crate::network::NetShape;

/// The small network used by the gradient checks: `n_theta = 6`.
pub fn tiny_shape() -> NetShape {
    NetShape {
        hidden: [8, 8],
        ensemble: 3,
        ..NetShape::default()
    }
}

/// Body-frame unit normal of a plane rising by `tan(pitch)` along the
/// heading and `tan(roll)` towards the left.
pub fn tilted_normal(roll: f64, pitch: f64) -> [f64; 3] {
    let n = [-pitch.tan(), -roll.tan(), 1.0];
    let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
    [n[0] / len, n[1] / len, n[2] / len]
}

/// Sum of a few random sinusoids, deterministic in the seed.
fn wave(rng: &mut ChaCha8Rng, terms: usize, max_freq: f64) -> impl Fn(f64) -> f64 {
    let parts: Vec<(f64, f64, f64)> = (0..terms)
        .map(|_| (rng.gen_range(0.2..1.0), rng.gen_range(0.05..max_freq), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let norm: f64 = parts.iter().map(|p| p.0).sum();
    move |t| parts.iter().map(|(a, f, ph)| a * (std::f64::consts::TAU * f * t + ph).sin()).sum::<f64>() / norm
}

/// Smooth admissible controls with moderate throttle and no braking.
pub fn smooth_controls(n: usize, seed: u64) -> Vec<ControlInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thr = wave(&mut rng, 3, 0.3);
    let steer = wave(&mut rng, 3, 0.4);
    (0..n)
        .map(|k| {
            let t = k as f64 * crate::dynamics::DT;
            ControlInput::new(0.35 + 0.15 * thr(t), 0.0, 0.4 * steer(t)).clamped()
        })
        .collect()
}

/// Gently rolling terrain (roll and pitch below about 6 degrees).
pub fn rolling_terrain(n: usize, seed: u64) -> Vec<TerrainInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roll = wave(&mut rng, 2, 0.2);
    let pitch = wave(&mut rng, 2, 0.2);
    (0..n)
        .map(|k| {
            let t = k as f64 * crate::dynamics::DT;
            let (r, p) = (0.1 * roll(t), 0.1 * pitch(t));
            TerrainInput {
                roll: r,
                pitch: p,
                normals: [tilted_normal(r, p); 4],
            }
        })
        .collect()
}

/// Cruising initial state at `speed` with the engine matched to it.
pub fn cruise_state(model: &HybridModel, speed: f64) -> VehicleState {
    let mut x = VehicleState::zero();
    x.vx = speed;
    x.engine = speed / model.params.drive_ratio;
    x
}

/// Roll the model forward with a fixed `theta`.
pub fn simulate(
    model: &HybridModel,
    theta: &[f64],
    x0: VehicleState,
    controls: &[ControlInput],
    terrains: &[TerrainInput],
) -> Result<Vec<VehicleState>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0);
    for (u, y) in controls.iter().zip(terrains) {
        let next = model.step(states.last().expect("non-empty"), u, y, theta)?;
        states.push(next);
    }
    Ok(states)
}

/// Add zero-mean Gaussian noise to pose (`pos_std`, `yaw_std`) and body
/// velocity (`vel_std`); actuator states are left untouched.
pub fn add_measurement_noise(states: &[VehicleState], pos_std: f64, yaw_std: f64, vel_std: f64, seed: u64) -> Vec<VehicleState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |std: f64| if std > 0.0 { Normal::new(0.0, std).expect("std").sample(&mut rng) } else { 0.0 };
    states
        .iter()
        .map(|x| {
            let mut m = *x;
            m.px += sample(pos_std);
            m.py += sample(pos_std);
            m.yaw = crate::dynamics::wrap_angle(m.yaw + sample(yaw_std));
            m.vx += sample(vel_std);
            m.vy += sample(vel_std);
            m.yaw_rate += sample(vel_std);
            m
        })
        .collect()
}

/// A complete synthetic run of `n` steps from a model with parameters
/// `theta_true`, measured with the default noise levels scaled by `noise`.
pub fn synthetic_run(model: &HybridModel, theta_true: &[f64], n: usize, seed: u64, noise: f64) -> Result<RunLog> {
    let controls = smooth_controls(n, seed);
    let terrains = rolling_terrain(n, seed.wrapping_add(1));
    let truth = simulate(model, theta_true, cruise_state(model, 5.0), &controls, &terrains)?;
    let states = add_measurement_noise(&truth, 0.05 * noise, 0.01 * noise, 0.05 * noise, seed.wrapping_add(2));
    Ok(RunLog {
        run_id: seed as usize,
        states,
        controls,
        terrains,
    })
}
