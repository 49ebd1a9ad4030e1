//! Sampling-based receding-horizon control: stage costs, a Dijkstra
//! cost-to-go field and the exponentially weighted sample average.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, ParametricParams, TerrainInput, VehicleState, CONTROL_DIM, GRAVITY};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::RolloutModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    /// Power `n` of the rollover penalty.
    pub rollover_power: i32,
    pub r_limit: f64,
    pub rollover_weight: f64,
    pub track_weight: f64,
    /// Scale on every `V` term of the trajectory cost.
    pub value_weight: f64,
    pub boundary_penalty: f64,
    pub control_weights: [f64; CONTROL_DIM],
    pub slip_weight: f64,
    /// Quadratic penalty on forward speed above `speed_limit`.
    pub speed_limit: f64,
    pub speed_weight: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            rollover_power: 2,
            r_limit: 0.25,
            rollover_weight: 5e3,
            track_weight: 5.0,
            value_weight: 1.0,
            boundary_penalty: 1e3,
            control_weights: [0.0, 0.0, 0.5],
            slip_weight: 2.0,
            speed_limit: 7.0,
            speed_weight: 20.0,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.rollover_weight,
            self.track_weight,
            self.value_weight,
            self.boundary_penalty,
            self.slip_weight,
            self.speed_weight,
        ];
        if self.rollover_power < 1
            || !(self.r_limit > 0.0 && self.r_limit < 1.0)
            || weights.iter().chain(&self.control_weights).any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config(format!("invalid cost config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    pub samples: usize,
    pub horizon: usize,
    pub lambda: f64,
    /// Per-channel noise std `[throttle, brake, steering]`.
    pub noise_std: [f64; CONTROL_DIM],
    /// Each noise draw is held for this many consecutive steps.
    pub noise_hold: usize,
    pub replan_hz: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            horizon: 60,
            lambda: 20.0,
            noise_std: [0.3, 0.15, 0.5],
            noise_hold: 5,
            replan_hz: 30.0,
        }
    }
}

impl MppiConfig {
    /// Larger sampling budget closer to a full-size deployment.
    pub fn full_scale() -> Self {
        Self {
            samples: 1024,
            horizon: 250,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0
            || self.horizon == 0
            || self.noise_hold == 0
            || !(self.lambda > 0.0)
            || self.noise_std.iter().any(|s| !(*s >= 0.0))
            || !(self.replan_hz > 0.0)
        {
            return Err(Error::Config(format!("invalid MPPI config {self:?}")));
        }
        Ok(())
    }
}

/// Mass-normalized side loadings `(F^L, F^R)` from ground roll and the
/// lateral acceleration implied by forward speed and steering.
pub fn side_loads(x: &VehicleState, y: &TerrainInput, p: &ParametricParams) -> (f64, f64) {
    let delta = p.wheel_angle(x.steer);
    let a_lat = x.vx * x.vx * delta.tan() / p.wheelbase();
    let shift = p.cg_height / p.track_width * (a_lat / GRAVITY + y.roll.tan());
    ((0.5 - shift).clamp(0.0, 1.0), (0.5 + shift).clamp(0.0, 1.0))
}

pub fn rollover_ratio(x: &VehicleState, y: &TerrainInput, p: &ParametricParams) -> f64 {
    let (l, r) = side_loads(x, y, p);
    l.min(r)
}

/// `P_n(ratio; r_limit)`.
pub fn rollover_penalty(ratio: f64, cc: &CostConfig) -> f64 {
    let d = cc.r_limit - ratio;
    if d > 0.0 {
        cc.rollover_weight * d.powi(cc.rollover_power)
    } else {
        0.0
    }
}

pub fn rollover_cost(x: &VehicleState, y: &TerrainInput, p: &ParametricParams, cc: &CostConfig) -> f64 {
    rollover_penalty(rollover_ratio(x, y, p), cc)
}

/// Cost-to-go `V` towards a goal node together with the traversal costs it
/// was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostToGoField {
    /// Shortest-path cost; `inf` where the goal is unreachable.
    pub values: Grid,
    /// Per-node traversal cost (>= 1, `inf` for blocked nodes).
    pub costmap: Grid,
    pub goal: (usize, usize),
    /// Copy of `values` with unreachable nodes capped, used for queries.
    capped: Grid,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Edge weight between neighbouring nodes: length times mean node cost.
pub fn edge_cost(costmap: &Grid, a: (usize, usize), b: (usize, usize), steps: f64) -> f64 {
    steps * costmap.cell * 0.5 * (costmap.get(a.0, a.1) + costmap.get(b.0, b.1))
}

/// Dijkstra over the 8-connected node graph.
pub fn build_cost_to_go(costmap: &Grid, goal: (usize, usize)) -> Result<CostToGoField> {
    if goal.0 >= costmap.rows || goal.1 >= costmap.cols {
        return Err(Error::OutOfGrid {
            row: goal.0,
            col: goal.1,
            rows: costmap.rows,
            cols: costmap.cols,
        });
    }
    if !costmap.get(goal.0, goal.1).is_finite() {
        return Err(Error::GoalBlocked { row: goal.0, col: goal.1 });
    }
    let mut values = Grid::filled(costmap.rows, costmap.cols, costmap.cell, f64::INFINITY);
    let mut heap = BinaryHeap::new();
    let g = costmap.index(goal.0, goal.1);
    values.data[g] = 0.0;
    heap.push(Entry(0.0, g));
    while let Some(Entry(d, i)) = heap.pop() {
        if d > values.data[i] {
            continue;
        }
        let (r, c) = (i / costmap.cols, i % costmap.cols);
        for (nr, nc, len) in costmap.neighbours(r, c) {
            if !costmap.get(nr, nc).is_finite() {
                continue;
            }
            let j = costmap.index(nr, nc);
            let nd = d + edge_cost(costmap, (r, c), (nr, nc), len);
            if nd < values.data[j] {
                values.data[j] = nd;
                heap.push(Entry(nd, j));
            }
        }
    }
    let max_finite = values.data.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let cap = max_finite + 10.0 * costmap.cell;
    let mut capped = values.clone();
    capped.data.iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = cap);
    Ok(CostToGoField {
        values,
        costmap: costmap.clone(),
        goal,
        capped,
    })
}

impl CostToGoField {
    /// Bilinear `V` at a world position; off-grid queries clamp onto it.
    pub fn value_at(&self, px: f64, py: f64) -> f64 {
        self.capped.bilinear_clamped(px, py)
    }

    /// Track cost: interpolated excess traversal cost over a free node, or
    /// the boundary penalty off the map or on blocked nodes.
    pub fn track_cost(&self, px: f64, py: f64, cc: &CostConfig) -> f64 {
        match self.costmap.bilinear(px, py) {
            Some(v) if v.is_finite() => cc.track_weight * (v - 1.0),
            _ => cc.boundary_penalty,
        }
    }
}

/// Control effort, body sideslip and overspeed.
pub fn other_cost(x: &VehicleState, u: &ControlInput, cc: &CostConfig) -> f64 {
    let effort: f64 = u.to_array().iter().zip(&cc.control_weights).map(|(v, w)| w * v * v).sum();
    let slip = x.vy / x.vx.abs().max(1.0);
    let over = (x.vx - cc.speed_limit).max(0.0);
    effort + cc.slip_weight * slip * slip + cc.speed_weight * over * over
}

pub fn stage_cost(
    x: &VehicleState,
    u: &ControlInput,
    y: &TerrainInput,
    field: &CostToGoField,
    p: &ParametricParams,
    cc: &CostConfig,
) -> f64 {
    field.track_cost(x.px, x.py, cc) + rollover_cost(x, y, p, cc) + other_cost(x, u, cc)
}

/// Terrain seen by rollouts at a predicted pose.
pub trait TerrainSource: Sync {
    fn terrain_at(&self, px: f64, py: f64, yaw: f64) -> TerrainInput;
}

pub struct FlatTerrain;

impl TerrainSource for FlatTerrain {
    fn terrain_at(&self, _: f64, _: f64, _: f64) -> TerrainInput {
        TerrainInput::flat()
    }
}

/// One-step dynamics used for rollouts.
pub trait Rollout: Sync {
    fn step(&self, x: &VehicleState, u: &ControlInput, y: &TerrainInput) -> VehicleState;
    fn params(&self) -> &ParametricParams;
}

impl Rollout for RolloutModel<'_> {
    fn step(&self, x: &VehicleState, u: &ControlInput, y: &TerrainInput) -> VehicleState {
        RolloutModel::step(self, x, u, y)
    }

    fn params(&self) -> &ParametricParams {
        RolloutModel::params(self)
    }
}

/// Trajectory cost `V(x_T) + sum_t [l(x_t, u_t, y_t) + V(x_t)]`.
pub fn trajectory_cost<R: Rollout, T: TerrainSource>(
    x0: &VehicleState,
    controls: &[ControlInput],
    field: &CostToGoField,
    terrain: &T,
    model: &R,
    cc: &CostConfig,
) -> f64 {
    let p = model.params();
    let mut x = *x0;
    let mut j = 0.0;
    for u in controls {
        let y = terrain.terrain_at(x.px, x.py, x.yaw);
        j += stage_cost(&x, u, &y, field, p, cc) + cc.value_weight * field.value_at(x.px, x.py);
        x = model.step(&x, u, &y);
        if !x.is_finite() {
            return f64::NAN;
        }
    }
    j + cc.value_weight * field.value_at(x.px, x.py)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutput {
    pub controls: Vec<ControlInput>,
    pub sample_costs: Vec<f64>,
    pub min_cost: f64,
    /// Set when every sample was non-finite and braking was returned.
    pub fallback: bool,
}

/// Per-call debug record of the planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub t: f64,
    pub sample_costs: Vec<f64>,
    pub chosen_cost: f64,
    pub theta: Vec<f64>,
}

/// `w_i = exp(-(J_i - min J) / lambda)`, zero for non-finite costs.
pub fn sample_weights(costs: &[f64], lambda: f64) -> Vec<f64> {
    let min = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    costs
        .iter()
        .map(|&c| if c.is_finite() { (-(c - min) / lambda).exp() } else { 0.0 })
        .collect()
}

/// Gaussian perturbations of `nominal`, held piecewise constant over
/// `noise_hold` steps. Throttle and brake noise act on the signed pedal
/// `throttle - brake`, which is split back so only one of them is active;
/// this keeps the clamp at zero from biasing either pedal upwards.
pub fn sample_sequences(nominal: &[ControlInput], cfg: &MppiConfig, seed: u64) -> Vec<Vec<ControlInput>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Option<Normal<f64>>> = cfg
        .noise_std
        .iter()
        .map(|&s| (s > 0.0).then(|| Normal::new(0.0, s).expect("finite std")))
        .collect();
    (0..cfg.samples)
        .map(|_| {
            let mut eps = [0.0; CONTROL_DIM];
            nominal
                .iter()
                .enumerate()
                .map(|(t, u)| {
                    if t % cfg.noise_hold == 0 {
                        for (e, d) in eps.iter_mut().zip(&dists) {
                            *e = d.map_or(0.0, |d| d.sample(&mut rng));
                        }
                    }
                    let pedal = (u.throttle - u.brake + eps[0] - eps[1]).clamp(-1.0, 1.0);
                    ControlInput::new(pedal.max(0.0), (-pedal).max(0.0), u.steering + eps[2]).clamped()
                })
                .collect()
        })
        .collect()
}

/// Braking with the steering held straight.
pub fn braking_sequence(len: usize) -> Vec<ControlInput> {
    vec![ControlInput::full_brake(); len]
}

/// Core MPPI update for an arbitrary sequence cost.
pub fn plan_with<F>(nominal: &[ControlInput], cfg: &MppiConfig, seed: u64, score: F) -> PlanOutput
where
    F: Fn(&[ControlInput]) -> f64 + Sync,
{
    let samples = sample_sequences(nominal, cfg, seed);
    let costs: Vec<f64> = samples.par_iter().map(|s| score(s)).collect();
    let weights = sample_weights(&costs, cfg.lambda);
    let total: f64 = weights.iter().sum();
    let min_cost = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    if !(total > 0.0) {
        return PlanOutput {
            controls: braking_sequence(nominal.len()),
            sample_costs: costs,
            min_cost,
            fallback: true,
        };
    }
    let mut acc = vec![[0.0; CONTROL_DIM]; nominal.len()];
    for (seq, w) in samples.iter().zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        for (a, u) in acc.iter_mut().zip(seq) {
            for (ai, ui) in a.iter_mut().zip(u.to_array()) {
                *ai += w * ui;
            }
        }
    }
    let controls = acc
        .into_iter()
        .map(|a| ControlInput::from_array(a.map(|v| v / total)).clamped())
        .collect();
    PlanOutput {
        controls,
        sample_costs: costs,
        min_cost,
        fallback: false,
    }
}

/// Plan from `x0` on the rollout model; deterministic given `seed`.
#[allow(clippy::too_many_arguments)]
pub fn plan<R: Rollout, T: TerrainSource>(
    x0: &VehicleState,
    nominal: &[ControlInput],
    field: &CostToGoField,
    terrain: &T,
    model: &R,
    cfg: &MppiConfig,
    cc: &CostConfig,
    seed: u64,
) -> PlanOutput {
    plan_with(nominal, cfg, seed, |seq| trajectory_cost(x0, seq, field, terrain, model, cc))
}

/// Receding horizon: drop the applied control and repeat the last one.
pub fn shift(seq: &mut Vec<ControlInput>) {
    if seq.len() > 1 {
        seq.remove(0);
        let last = *seq.last().expect("non-empty");
        seq.push(last);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ParametricParams;
    use proptest::prelude::*;
    use rand::Rng;

    fn free_field(n: usize) -> CostToGoField {
        build_cost_to_go(&Grid::filled(n, n, 1.0, 1.0), (n / 2, n / 2)).unwrap()
    }

    /// Label-correcting relaxation until nothing changes.
    fn relaxation_oracle(costmap: &Grid, goal: (usize, usize)) -> Vec<f64> {
        let mut v = vec![f64::INFINITY; costmap.data.len()];
        v[costmap.index(goal.0, goal.1)] = 0.0;
        loop {
            let mut changed = false;
            for r in 0..costmap.rows {
                for c in 0..costmap.cols {
                    if !costmap.get(r, c).is_finite() {
                        continue;
                    }
                    for (nr, nc, len) in costmap.neighbours(r, c) {
                        if !costmap.get(nr, nc).is_finite() {
                            continue;
                        }
                        let cand = v[costmap.index(nr, nc)] + edge_cost(costmap, (r, c), (nr, nc), len);
                        if cand < v[costmap.index(r, c)] - 1e-12 {
                            v[costmap.index(r, c)] = cand;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return v;
            }
        }
    }

    fn random_costmap(rng: &mut ChaCha8Rng, n: usize) -> Grid {
        Grid::from_fn(n, n, 0.5, |_, _| {
            if rng.gen_bool(0.15) {
                f64::INFINITY
            } else {
                1.0 + 3.0 * rng.gen::<f64>()
            }
        })
    }

    #[test]
    fn value_is_zero_at_goal() {
        let f = free_field(9);
        assert_eq!(f.values.get(4, 4), 0.0);
    }

    #[test]
    fn uniform_grid_gives_octile_distance() {
        let f = free_field(11);
        let oracle = relaxation_oracle(&f.costmap, f.goal);
        for r in 0..11 {
            for c in 0..11 {
                let (dr, dc) = ((r as f64 - 5.0).abs(), (c as f64 - 5.0).abs());
                let octile = dr.max(dc) - dr.min(dc) + std::f64::consts::SQRT_2 * dr.min(dc);
                assert!((f.values.get(r, c) - octile).abs() < 1e-9);
                assert!((oracle[f.values.index(r, c)] - octile).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dijkstra_matches_relaxation_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let mut map = random_costmap(&mut rng, 15);
            map.set(7, 7, 1.0);
            let f = build_cost_to_go(&map, (7, 7)).unwrap();
            let oracle = relaxation_oracle(&map, (7, 7));
            for (a, b) in f.values.data.iter().zip(&oracle) {
                assert!(a == b || (a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn walled_off_node_is_unreachable() {
        let mut map = Grid::filled(7, 7, 1.0, 1.0);
        for (r, c) in [(0, 1), (1, 0), (1, 1)] {
            map.set(r, c, f64::INFINITY);
        }
        let f = build_cost_to_go(&map, (5, 5)).unwrap();
        assert!(f.values.get(0, 0).is_infinite());
        assert!(f.value_at(0.0, 0.0).is_finite());
    }

    #[test]
    fn blocked_goal_is_rejected() {
        let mut map = Grid::filled(4, 4, 1.0, 1.0);
        map.set(2, 2, f64::INFINITY);
        assert!(matches!(build_cost_to_go(&map, (2, 2)), Err(Error::GoalBlocked { .. })));
        assert!(matches!(build_cost_to_go(&map, (4, 0)), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn flat_straight_driving_loads_sides_equally() {
        let p = ParametricParams::default();
        let mut x = VehicleState::zero();
        x.vx = 8.0;
        let (l, r) = side_loads(&x, &TerrainInput::flat(), &p);
        assert_eq!((l, r), (0.5, 0.5));
        assert_eq!(rollover_cost(&x, &TerrainInput::flat(), &p, &CostConfig::default()), 0.0);
    }

    #[test]
    fn penalty_vanishes_at_the_limit() {
        let cc = CostConfig::default();
        assert_eq!(rollover_penalty(cc.r_limit, &cc), 0.0);
        assert!(rollover_penalty(cc.r_limit - 1e-6, &cc) > 0.0);
    }

    #[test]
    fn rollover_cost_matches_load_transfer_recomputation() {
        let p = ParametricParams::default();
        let cc = CostConfig {
            rollover_power: 3,
            ..CostConfig::default()
        };
        let mut x = VehicleState::zero();
        x.vx = 7.0;
        x.steer = 4.0;
        let y = TerrainInput {
            roll: 0.15,
            ..TerrainInput::flat()
        };
        // Independent: lateral acceleration from the bicycle turn radius.
        let delta = p.steer_ratio * x.steer;
        let radius = (p.front_axle + p.rear_axle) / delta.tan();
        let a_lat = x.vx * x.vx / radius;
        let k = p.cg_height / p.track_width;
        let left = 0.5 - k * (a_lat / 9.81 + 0.15f64.tan());
        let d = cc.r_limit - left;
        assert!(d > 0.0 && left > 0.0);
        let expect = cc.rollover_weight * d.powi(3);
        let got = rollover_cost(&x, &y, &p, &cc);
        assert!((got - expect).abs() <= 1e-10 * expect, "{got} vs {expect}");
    }

    #[test]
    fn stage_cost_is_zero_when_idle_on_free_ground() {
        let f = free_field(9);
        let p = ParametricParams::default();
        let mut x = VehicleState::zero();
        x.px = 2.0;
        x.py = 3.0;
        x.vx = 3.0;
        let u = ControlInput::new(0.0, 0.0, 0.0);
        assert_eq!(stage_cost(&x, &u, &TerrainInput::flat(), &f, &p, &CostConfig::default()), 0.0);
    }

    #[test]
    fn leaving_the_map_costs_the_boundary_penalty() {
        let f = free_field(9);
        let cc = CostConfig::default();
        let mut x = VehicleState::zero();
        x.px = -1.0;
        let c = stage_cost(&x, &ControlInput::new(0.0, 0.0, 0.0), &TerrainInput::flat(), &f, &ParametricParams::default(), &cc);
        assert!(c >= cc.boundary_penalty);
    }

    #[test]
    fn stage_cost_is_the_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = Grid::from_fn(20, 20, 0.5, |_, _| 1.0 + rng.gen::<f64>());
        let f = build_cost_to_go(&map, (3, 3)).unwrap();
        let p = ParametricParams::default();
        let cc = CostConfig::default();
        for _ in 0..20 {
            let mut x = VehicleState::zero();
            x.px = rng.gen_range(0.0..9.5);
            x.py = rng.gen_range(0.0..9.5);
            x.vx = rng.gen_range(1.0..10.0);
            x.vy = rng.gen_range(-1.0..1.0);
            x.steer = rng.gen_range(-5.0..5.0);
            let u = ControlInput::new(rng.gen(), rng.gen(), rng.gen_range(-1.0..1.0));
            let y = TerrainInput {
                roll: rng.gen_range(-0.3..0.3),
                ..TerrainInput::flat()
            };
            let track = cc.track_weight * (map.bilinear(x.px, x.py).unwrap() - 1.0);
            let effort = 0.5 * u.steering * u.steering;
            let slip = 2.0 * (x.vy / x.vx).powi(2);
            let over = if x.vx > 7.0 { 20.0 * (x.vx - 7.0).powi(2) } else { 0.0 };
            let expect = track + rollover_cost(&x, &y, &p, &cc) + effort + slip + over;
            let got = stage_cost(&x, &u, &y, &f, &p, &cc);
            assert!((got - expect).abs() < 1e-9 * (1.0 + expect));
        }
    }

    #[test]
    fn bellman_inequality_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut map = random_costmap(&mut rng, 25);
        map.set(12, 12, 1.0);
        let f = build_cost_to_go(&map, (12, 12)).unwrap();
        for r in 0..25 {
            for c in 0..25 {
                if !map.get(r, c).is_finite() {
                    continue;
                }
                for (nr, nc, len) in map.neighbours(r, c) {
                    if map.get(nr, nc).is_finite() {
                        let bound = edge_cost(&map, (r, c), (nr, nc), len) + f.values.get(nr, nc);
                        assert!(f.values.get(r, c) <= bound + 1e-9);
                    }
                }
            }
        }
    }

    fn one_step_cfg(samples: usize) -> MppiConfig {
        MppiConfig {
            samples,
            horizon: 1,
            lambda: 1e-3,
            noise_std: [0.2, 0.0, 0.5],
            noise_hold: 1,
            replan_hz: 30.0,
        }
    }

    #[test]
    fn single_sample_is_returned_as_is() {
        let cfg = one_step_cfg(1);
        let nominal = vec![ControlInput::new(0.5, 0.0, 0.0); 4];
        let out = plan_with(&nominal, &cfg, 3, |s| s[0].steering.powi(2));
        let expect = sample_sequences(&nominal, &cfg, 3).remove(0);
        assert_eq!(out.controls, expect);
    }

    #[test]
    fn tied_costs_give_the_arithmetic_mean() {
        let cfg = one_step_cfg(16);
        let nominal = vec![ControlInput::new(0.5, 0.0, 0.0); 3];
        let out = plan_with(&nominal, &cfg, 9, |_| 7.0);
        let samples = sample_sequences(&nominal, &cfg, 9);
        for t in 0..3 {
            let mean: f64 = samples.iter().map(|s| s[t].steering).sum::<f64>() / 16.0;
            assert!((out.controls[t].steering - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_cost_shift_leaves_plan_unchanged() {
        let cfg = MppiConfig {
            lambda: 0.5,
            ..one_step_cfg(256)
        };
        let nominal = vec![ControlInput::new(0.5, 0.0, 0.0); 5];
        let cost = |s: &[ControlInput]| s.iter().map(|u| (u.steering - 0.3).powi(2)).sum::<f64>();
        let a = plan_with(&nominal, &cfg, 2, cost);
        let b = plan_with(&nominal, &cfg, 2, |s| cost(s) + 1234.5);
        for (ua, ub) in a.controls.iter().zip(&b.controls) {
            for (va, vb) in ua.to_array().iter().zip(ub.to_array()) {
                assert!((va - vb).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_finite_samples_fall_back_to_braking() {
        let cfg = one_step_cfg(8);
        let out = plan_with(&[ControlInput::new(0.5, 0.0, 0.0); 3], &cfg, 1, |_| f64::NAN);
        assert!(out.fallback);
        assert_eq!(out.controls, braking_sequence(3));
    }

    #[test]
    fn shift_keeps_length() {
        let mut seq: Vec<ControlInput> = (0..4).map(|i| ControlInput::new(0.1 * i as f64, 0.0, 0.0)).collect();
        shift(&mut seq);
        assert_eq!(seq.len(), 4);
        assert_eq!(seq[0].throttle, 0.1);
        assert_eq!(seq[3], seq[2]);
    }

    proptest! {
        #[test]
        fn rollover_cost_non_increasing_in_ratio(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cc = CostConfig::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(rollover_penalty(hi, &cc) <= rollover_penalty(lo, &cc));
        }

        #[test]
        fn planned_controls_respect_bounds(seed in 0u64..1000, shift in -3.0f64..3.0) {
            let cfg = MppiConfig { noise_std: [2.0, 2.0, 2.0], ..one_step_cfg(32) };
            let nominal = vec![ControlInput::new(0.9, 0.9, 0.9); 3];
            let out = plan_with(&nominal, &cfg, seed, |s| (s[0].steering - shift).powi(2));
            prop_assert!(out.controls.iter().all(|u| u.is_admissible()));
        }
    }
}
