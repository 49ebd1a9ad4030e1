//! Closed-loop episodes: simulator at 50 Hz, planner at 30 Hz and parameter
//! adaptation every `h` simulator steps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptTraceRecord, AdapterKind, FilterParams, OnlineAdapter};
use crate::dynamics::{wrap_angle, ControlInput, TerrainInput, VehicleState, DT, STATE_DIM};
use crate::error::{Error, Result};
use crate::meta::RunLog;
use crate::model::HybridModel;
use crate::mppi::{self, CostConfig, CostToGoField, MppiConfig, PlanRecord};
use crate::sim::{measure, sim_step, MapTerrain, MeasurementNoise, SimPhysics, SimState, TerrainMap};

/// Waypoints with one cost-to-go field each and a start pose.
#[derive(Clone, Debug)]
pub struct Course {
    pub start: (f64, f64, f64),
    pub waypoints: Vec<(f64, f64)>,
    pub fields: Vec<CostToGoField>,
}

impl Course {
    /// Starts at the last waypoint (closed loop) facing the first one.
    pub fn closed_loop(map: &TerrainMap, waypoints: &[(f64, f64)]) -> Result<Self> {
        let last = *waypoints.last().ok_or_else(|| Error::Config("empty waypoint list".into()))?;
        let first = waypoints[0];
        let yaw = (first.1 - last.1).atan2(first.0 - last.0);
        Self::new(map, (last.0, last.1, yaw), waypoints)
    }

    pub fn new(map: &TerrainMap, start: (f64, f64, f64), waypoints: &[(f64, f64)]) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::Config("empty waypoint list".into()));
        }
        let costmap = map.costmap();
        let fields = waypoints
            .iter()
            .map(|&(x, y)| {
                let node = costmap.node_of(x, y).ok_or_else(|| Error::Config(format!("waypoint ({x}, {y}) off the map")))?;
                mppi::build_cost_to_go(&costmap, node)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            start,
            waypoints: waypoints.to_vec(),
            fields,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeLimits {
    pub max_time: f64,
    /// Intermediate waypoints count as passed within this distance.
    pub pass_radius: f64,
    pub goal_radius: f64,
    /// An intermediate waypoint also counts as passed once the vehicle is
    /// within this distance and beyond it along the incoming leg.
    pub pass_window: f64,
    /// The planner steers towards the waypoint this many beyond the next
    /// one.
    pub lookahead: usize,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        Self {
            max_time: 90.0,
            pass_radius: 6.0,
            goal_radius: 4.0,
            pass_window: 15.0,
            lookahead: 1,
        }
    }
}

/// Scripted driver used to collect training data: pursuit of the next
/// waypoint with a randomly changing speed target and steering dither.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PursuitConfig {
    pub speed_range: (f64, f64),
    pub speed_hold: f64,
    pub steer_gain: f64,
    pub speed_gain: f64,
    pub dither: f64,
}

impl Default for PursuitConfig {
    fn default() -> Self {
        Self {
            speed_range: (3.0, 10.0),
            speed_hold: 3.0,
            steer_gain: 1.2,
            speed_gain: 0.4,
            dither: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Driver {
    Mppi,
    Pursuit(PursuitConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub driver: Driver,
    pub mppi: MppiConfig,
    pub cost: CostConfig,
    pub physics: SimPhysics,
    pub noise: MeasurementNoise,
    pub limits: EpisodeLimits,
    pub adapter: AdapterKind,
    pub filter: FilterParams,
    pub control_seed: u64,
    pub noise_seed: u64,
    pub prediction_horizon: f64,
    pub prediction_every: f64,
    pub debug_planner: bool,
}

impl EpisodeConfig {
    pub fn new(filter: FilterParams) -> Self {
        Self {
            driver: Driver::Mppi,
            mppi: MppiConfig::default(),
            cost: CostConfig::default(),
            physics: SimPhysics::deployment(),
            noise: MeasurementNoise::default(),
            limits: EpisodeLimits::default(),
            adapter: AdapterKind::None,
            filter,
            control_seed: 0,
            noise_seed: 1,
            prediction_horizon: 5.0,
            prediction_every: 1.0,
            debug_planner: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub true_state: [f64; STATE_DIM],
    pub measured: [f64; STATE_DIM],
    pub control: ControlInput,
    /// Terrain sensed at the measured pose.
    pub terrain: TerrainInput,
    pub theta: Vec<f64>,
    pub plan_cost: f64,
    /// Minimum side loading of the true vehicle.
    pub rollover_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub completed: bool,
    /// Time to the final waypoint, or the time limit if not reached.
    pub completion_time: f64,
    pub average_speed: f64,
    pub prediction_error: f64,
    pub prediction_count: usize,
    pub rollover_crossings: usize,
    pub time_exceeding_limit: f64,
    pub rollover_cost: f64,
    pub left_map: bool,
    pub planner_fallbacks: usize,
    pub adapter_resets: usize,
    pub final_theta_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub records: Vec<StepRecord>,
    pub summary: EpisodeSummary,
    pub adapt_trace: Vec<AdaptTraceRecord>,
    pub plans: Vec<PlanRecord>,
}

/// Derive an independent stream seed.
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k.wrapping_mul(0xBF58_476D_1CE4_E5B9).rotate_left(17)
}

struct PursuitState {
    rng: ChaCha8Rng,
    speed: f64,
    hold_left: f64,
    dither: f64,
}

fn pursuit_control(x: &VehicleState, target: (f64, f64), cfg: &PursuitConfig, st: &mut PursuitState, dt: f64) -> ControlInput {
    st.hold_left -= dt;
    if st.hold_left <= 0.0 {
        st.speed = st.rng.gen_range(cfg.speed_range.0..cfg.speed_range.1);
        st.hold_left = cfg.speed_hold;
    }
    if cfg.dither > 0.0 {
        let n = Normal::new(0.0, cfg.dither).expect("finite std").sample(&mut st.rng);
        st.dither += 0.2 * (n - st.dither);
    }
    let heading = (target.1 - x.py).atan2(target.0 - x.px);
    let err = wrap_angle(heading - x.yaw);
    let steering = cfg.steer_gain * err + st.dither;
    let dv = st.speed - x.vx;
    let (throttle, brake) = if dv >= 0.0 {
        (cfg.speed_gain * dv + 0.25, 0.0)
    } else {
        (0.0, -0.5 * cfg.speed_gain * dv)
    };
    ControlInput::new(throttle, brake, steering).clamped()
}

fn passed(course: &Course, target: usize, x: &VehicleState) -> bool {
    if target + 1 == course.waypoints.len() {
        return false;
    }
    let wp = course.waypoints[target];
    let prev = if target == 0 {
        (course.start.0, course.start.1)
    } else {
        course.waypoints[target - 1]
    };
    (x.px - wp.0) * (wp.0 - prev.0) + (x.py - wp.1) * (wp.1 - prev.1) > 0.0
}

/// Endpoint distance between a predicted and realized trajectory.
pub fn endpoint_error(predicted: &[VehicleState], realized: &[VehicleState]) -> f64 {
    match (predicted.last(), realized.last()) {
        (Some(p), Some(r)) => (p.px - r.px).hypot(p.py - r.py),
        _ => 0.0,
    }
}

/// Open-loop prediction from `x0` with the logged controls, sensing the
/// terrain at the predicted poses.
pub fn predict_open_loop(
    model: &HybridModel,
    theta: &[f64],
    x0: &VehicleState,
    controls: &[ControlInput],
    terrain: &MapTerrain<'_>,
) -> Vec<VehicleState> {
    let rm = model.rollout_model(theta);
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(*x0);
    let mut x = *x0;
    for u in controls {
        let y = mppi::TerrainSource::terrain_at(terrain, x.px, x.py, x.yaw);
        x = rm.step(&x, u, &y);
        out.push(x);
    }
    out
}

/// Rollover statistics over a sequence of side-loading ratios sampled every
/// `dt`.
pub fn rollover_metrics(ratios: &[f64], dt: f64, cc: &CostConfig) -> (usize, f64, f64) {
    let mut crossings = 0;
    let mut below = 0usize;
    let mut cost = 0.0;
    let mut was_below = false;
    for &r in ratios {
        let now_below = r < cc.r_limit;
        if now_below {
            below += 1;
            if !was_below {
                crossings += 1;
            }
        }
        was_below = now_below;
        cost += mppi::rollover_penalty(r, cc);
    }
    (crossings, below as f64 * dt, cost)
}

/// Run one closed-loop episode. Deterministic given the seeds.
pub fn run_episode(map: &TerrainMap, course: &Course, model: &HybridModel, cfg: &EpisodeConfig) -> Result<EpisodeLog> {
    if course.waypoints.is_empty() {
        return Err(Error::Config("empty waypoint list".into()));
    }
    cfg.mppi.validate()?;
    cfg.cost.validate()?;
    cfg.physics.validate()?;
    let geometry_true = cfg.physics.geometry();
    let terrain_model = MapTerrain {
        map,
        geometry: model.params.clone(),
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let mut adapter = OnlineAdapter::new(cfg.adapter.clone(), cfg.filter.clone(), model.net.shape.ensemble);
    let mut pursuit = PursuitState {
        rng: ChaCha8Rng::seed_from_u64(cfg.control_seed),
        speed: 0.0,
        hold_left: 0.0,
        dither: 0.0,
    };

    let mut x = VehicleState::zero();
    x.px = course.start.0;
    x.py = course.start.1;
    x.yaw = course.start.2;
    let mut sim = SimState { vehicle: x, t: 0.0 };

    let horizon = cfg.mppi.horizon;
    let mut nominal = vec![ControlInput::new(0.3, 0.0, 0.0); horizon];
    let mut u = ControlInput::new(0.0, 0.0, 0.0);
    let mut plan_cost = 0.0;
    let mut plan_index = 0u64;
    let mut next_plan = 0.0;
    let mut since_plan = 0usize;
    let control_period = 1.0 / cfg.mppi.replan_hz;

    let mut records = Vec::new();
    let mut plans = Vec::new();
    let mut fallbacks = 0;
    let mut target = 0;
    let mut completed_at = None;
    let mut left_map = false;
    let max_steps = (cfg.limits.max_time / DT).round() as usize;

    for step in 0..=max_steps {
        let t = step as f64 * DT;
        let truth = sim.vehicle;
        loop {
            let wp = course.waypoints[target];
            let radius = if target + 1 == course.waypoints.len() {
                cfg.limits.goal_radius
            } else {
                cfg.limits.pass_radius
            };
            let dist = (truth.px - wp.0).hypot(truth.py - wp.1);
            if dist > radius && !(dist < cfg.limits.pass_window && passed(course, target, &truth)) {
                break;
            }
            target += 1;
            if target == course.waypoints.len() {
                completed_at = Some(t);
                break;
            }
        }
        if completed_at.is_some() || step == max_steps {
            break;
        }
        if !map.contains(truth.px, truth.py) {
            left_map = true;
            break;
        }

        let measured = measure(&truth, &cfg.noise, &mut noise_rng);
        let (y_meas, _) = map.sense(measured.px, measured.py, measured.yaw, &model.params);
        let theta = adapter.theta().to_vec();

        if t + 1e-9 >= next_plan {
            match &cfg.driver {
                Driver::Mppi => {
                    for _ in 0..since_plan {
                        mppi::shift(&mut nominal);
                    }
                    let rm = model.rollout_model(&theta);
                    let field = &course.fields[(target + cfg.limits.lookahead).min(course.fields.len() - 1)];
                    let out = mppi::plan(
                        &measured,
                        &nominal,
                        field,
                        &terrain_model,
                        &rm,
                        &cfg.mppi,
                        &cfg.cost,
                        mix_seed(cfg.control_seed, plan_index),
                    );
                    fallbacks += out.fallback as usize;
                    plan_cost = out.min_cost;
                    if cfg.debug_planner {
                        plans.push(PlanRecord {
                            t,
                            chosen_cost: mppi::trajectory_cost(&measured, &out.controls, field, &terrain_model, &rm, &cfg.cost),
                            sample_costs: out.sample_costs.clone(),
                            theta: theta.clone(),
                        });
                    }
                    nominal = out.controls;
                    u = nominal[0];
                }
                Driver::Pursuit(pc) => {
                    u = pursuit_control(&measured, course.waypoints[target], pc, &mut pursuit, control_period);
                }
            }
            plan_index += 1;
            since_plan = 0;
            next_plan += control_period;
        }

        adapter.observe(t, &measured, &u, &y_meas, model);

        let (y_true, _) = map.sense(truth.px, truth.py, truth.yaw, &geometry_true);
        records.push(StepRecord {
            t,
            true_state: truth.to_array(),
            measured: measured.to_array(),
            control: u,
            terrain: y_meas,
            theta,
            plan_cost,
            rollover_ratio: mppi::rollover_ratio(&truth, &y_true, &geometry_true),
        });
        sim = sim_step(&sim, &u, map.friction_at(truth.px, truth.py), &y_true, &cfg.physics, DT);
        since_plan += 1;
    }

    let summary = summarize(&records, map, model, cfg, completed_at, left_map, fallbacks, &adapter);
    Ok(EpisodeLog {
        records,
        summary,
        adapt_trace: adapter.trace.clone(),
        plans,
    })
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    records: &[StepRecord],
    map: &TerrainMap,
    model: &HybridModel,
    cfg: &EpisodeConfig,
    completed_at: Option<f64>,
    left_map: bool,
    fallbacks: usize,
    adapter: &OnlineAdapter,
) -> EpisodeSummary {
    let n = records.len();
    let average_speed = if n > 0 {
        records.iter().map(|r| r.true_state[3].hypot(r.true_state[4])).sum::<f64>() / n as f64
    } else {
        0.0
    };
    let horizon = (cfg.prediction_horizon / DT).round() as usize;
    let every = ((cfg.prediction_every / DT).round() as usize).max(1);
    let terrain = MapTerrain {
        map,
        geometry: model.params.clone(),
    };
    let mut errors = Vec::new();
    let mut k = 0;
    while horizon > 0 && k + horizon < n {
        let x0 = VehicleState::from_array(records[k].measured);
        let controls: Vec<ControlInput> = records[k..k + horizon].iter().map(|r| r.control).collect();
        let pred = predict_open_loop(model, &records[k].theta, &x0, &controls, &terrain);
        let real = [VehicleState::from_array(records[k + horizon].true_state)];
        let e = endpoint_error(&pred, &real);
        errors.push(if e.is_finite() { e } else { f64::MAX.sqrt() });
        k += every;
    }
    let ratios: Vec<f64> = records.iter().map(|r| r.rollover_ratio).collect();
    let (rollover_crossings, time_exceeding_limit, rollover_cost) = rollover_metrics(&ratios, DT, &cfg.cost);
    EpisodeSummary {
        completed: completed_at.is_some(),
        completion_time: completed_at.unwrap_or(cfg.limits.max_time),
        average_speed,
        prediction_error: if errors.is_empty() { 0.0 } else { errors.iter().sum::<f64>() / errors.len() as f64 },
        prediction_count: errors.len(),
        rollover_crossings,
        time_exceeding_limit,
        rollover_cost,
        left_map,
        planner_fallbacks: fallbacks,
        adapter_resets: adapter.resets,
        final_theta_norm: adapter.theta().iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

impl EpisodeLog {
    /// Measured states, applied controls and sensed terrain as a training
    /// run.
    pub fn to_run_log(&self, run_id: usize) -> RunLog {
        RunLog {
            run_id,
            states: self.records.iter().map(|r| VehicleState::from_array(r.measured)).collect(),
            controls: self.records.iter().map(|r| r.control).collect(),
            terrains: self.records.iter().map(|r| r.terrain).collect(),
        }
    }

    /// `<stem>.jsonl` with one step per line and `<stem>.summary.json`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{stem}.jsonl"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::json(&path, e))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let sp = dir.join(format!("{stem}.summary.json"));
        let text = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::json(&sp, e))?;
        std::fs::write(&sp, text).map_err(|e| Error::io(&sp, e))?;
        if !self.plans.is_empty() {
            let pp = dir.join(format!("{stem}.plans.jsonl"));
            let mut w = BufWriter::new(File::create(&pp).map_err(|e| Error::io(&pp, e))?);
            for p in &self.plans {
                serde_json::to_writer(&mut w, p).map_err(|e| Error::json(&pp, e))?;
                w.write_all(b"\n").map_err(|e| Error::io(&pp, e))?;
            }
            w.flush().map_err(|e| Error::io(&pp, e))?;
        }
        Ok(())
    }
}
