//! Acceptance checks shared by the focused integration tests and the
//! `acceptance` target. Each check returns its measured value, threshold and
//! runtime instead of asserting, so the acceptance report can list them all.
#![allow(dead_code)]

use std::io::Write;
use std::time::Instant;

use metadapt::adaptation::{adapt_window, gating, kalman_update, multi_step_jacobian, AdaptModel, FilterParams, KalmanState};
use metadapt::dynamics::{idx, step_with_residual, ControlInput, ParametricParams, TerrainInput, VehicleState, DT, STATE_DIM};
use metadapt::episode::{run_episode, Course, EpisodeConfig};
use metadapt::grid::Grid;
use metadapt::model::HybridModel;
use metadapt::mppi::{build_cost_to_go, edge_cost, plan_with, MppiConfig};
use metadapt::network::{FeatureStats, NetShape, ResidualNet, ETA_DIM};
use metadapt::sim::TerrainMap;
use metadapt::meta::{fit_feature_stats, meta_gradient, segment_loss, slice_dataset, LossConfig, MetaParams, TrajectorySegment};
use metadapt::synthetic::{synthetic_run, tilted_normal, tiny_shape};
use metadapt_autodiff::Mat;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget: f64,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:<34} {}  ({:.2} s, budget {:.0} s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds,
            self.budget
        )
    }

    /// Write the line past the test harness' output capture.
    pub fn report(&self) {
        let mut err = std::io::stderr();
        let _ = writeln!(err, "{}", self.line());
    }

    pub fn assert(&self) {
        self.report();
        assert!(self.pass, "{}", self.line());
    }
}

fn timed(name: &'static str, budget: f64, f: impl FnOnce() -> (bool, String)) -> Check {
    let t = Instant::now();
    let (ok, detail) = f();
    let seconds = t.elapsed().as_secs_f64();
    Check {
        name,
        pass: ok && seconds < budget,
        detail,
        seconds,
        budget,
    }
}

// ------------------------------------------------------------- instances

/// A hybrid model with random network weights and feature statistics.
pub fn random_model(rng: &mut ChaCha8Rng) -> HybridModel {
    let shape = NetShape::default();
    let mut net = ResidualNet::init(shape, rng);
    net.basis.iter_mut().for_each(|w| *w *= 3.0);
    let stats = FeatureStats {
        mean: (0..ETA_DIM).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        inv_scale: (0..ETA_DIM).map(|_| rng.gen_range(0.2..1.0)).collect(),
    };
    HybridModel::new(ParametricParams::default(), net, stats)
}

pub fn random_state(rng: &mut ChaCha8Rng) -> VehicleState {
    let mut x = VehicleState::zero();
    x.px = rng.gen_range(-5.0..5.0);
    x.py = rng.gen_range(-5.0..5.0);
    x.yaw = rng.gen_range(-1.0..1.0);
    x.vx = rng.gen_range(2.0..9.0);
    x.vy = rng.gen_range(-0.5..0.5);
    x.yaw_rate = rng.gen_range(-0.4..0.4);
    x.brake = rng.gen_range(0.0..0.3);
    x.steer = rng.gen_range(-2.0..2.0);
    x.steer_rate = rng.gen_range(-1.0..1.0);
    x.engine = rng.gen_range(60.0..160.0);
    x
}

pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> (Vec<ControlInput>, Vec<TerrainInput>) {
    let controls = (0..n)
        .map(|_| ControlInput::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..0.3), rng.gen_range(-0.6..0.6)).clamped())
        .collect();
    let terrains = (0..n)
        .map(|_| {
            let (r, p) = (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15));
            let mut normals = [tilted_normal(r, p); 4];
            for n in normals.iter_mut() {
                let t = tilted_normal(r + rng.gen_range(-0.03..0.03), p + rng.gen_range(-0.03..0.03));
                *n = t;
            }
            TerrainInput { roll: r, pitch: p, normals }
        })
        .collect();
    (controls, terrains)
}

/// h-step propagation with the network features frozen along a nominal
/// trajectory, so only `theta` and the parametric dynamics respond to a
/// perturbation. This is the propagation the multi-step Jacobian
/// differentiates.
fn frozen_feature_rollout(
    model: &HybridModel,
    x0: &VehicleState,
    us: &[ControlInput],
    ys: &[TerrainInput],
    phis: &[Vec<f64>],
    theta: &[f64],
) -> [f64; STATE_DIM] {
    let p = &model.params;
    let mut x = *x0;
    for ((u, y), phi) in us.iter().zip(ys).zip(phis) {
        let z = model.net.residual_from_features(phi, theta);
        let wrench = [z[0] * p.mass, z[1] * p.mass, z[2] * p.yaw_inertia];
        x = step_with_residual(&x, u, y, wrench, p);
    }
    x.to_array()
}

fn full_rollout(model: &HybridModel, x0: &VehicleState, us: &[ControlInput], ys: &[TerrainInput], theta: &[f64]) -> [f64; STATE_DIM] {
    let mut x = *x0;
    for (u, y) in us.iter().zip(ys) {
        x = model.step(&x, u, y, theta).expect("finite step");
    }
    x.to_array()
}

fn rel_fd_error(jac: &Mat<f64>, theta: &[f64], f: impl Fn(&[f64]) -> [f64; STATE_DIM]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..theta.len() {
        let step = 1e-5 * (1.0 + theta[c].abs());
        let mut a = theta.to_vec();
        let mut b = theta.to_vec();
        a[c] += step;
        b[c] -= step;
        let (fa, fb) = (f(&a), f(&b));
        for r in 0..STATE_DIM {
            let fd = (fa[r] - fb[r]) / (2.0 * step);
            num += (jac[(r, c)] - fd).powi(2);
            den += fd * fd;
        }
    }
    (num / den).sqrt()
}

// ----------------------------------------------------------- criterion 1

/// Worst relative Frobenius error of the multi-step Jacobian against
/// central differences of the h-step propagation. `F^x` holds the residual
/// fixed, so the propagation freezes the network features along the nominal
/// trajectory; the gap to the fully coupled propagation is reported too.
pub fn jacobian_oracle() -> Check {
    timed("1 multi-step Jacobian vs FD", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 10;
        let mut worst: f64 = 0.0;
        let mut coupled: f64 = 0.0;
        for _ in 0..50 {
            let model = random_model(&mut rng);
            let n = model.n_theta();
            assert_eq!(n, 11);
            let x0 = random_state(&mut rng);
            let (us, ys) = random_inputs(&mut rng, h);
            let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let mut states = vec![x0];
            let mut phis = Vec::with_capacity(h);
            for (u, y) in us.iter().zip(&ys) {
                let ev = model.step_eval(states.last().unwrap(), u, y, &theta);
                phis.push(ev.phi);
                states.push(ev.next);
            }
            let jac = multi_step_jacobian(&model, &states, &us, &ys, &theta);
            worst = worst.max(rel_fd_error(&jac, &theta, |t| frozen_feature_rollout(&model, &x0, &us, &ys, &phis, t)));
            coupled = coupled.max(rel_fd_error(&jac, &theta, |t| full_rollout(&model, &x0, &us, &ys, t)));
        }
        (
            worst < 1e-4,
            format!("max rel err {worst:.2e} over 50 instances (tol 1e-4); with feature state-dependence {coupled:.1e} (info)"),
        )
    })
}

// ----------------------------------------------------------- criterion 2

/// Velocity dynamics `v+ = a v + dt Phi(k) theta` with time-varying
/// regressors; every other state component is constant.
pub struct LinearInTheta {
    pub decay: f64,
    pub n: usize,
}

impl LinearInTheta {
    /// Regressor row `i` at the control `u`: smooth in the inputs so the
    /// problem is well excited.
    fn regressor(&self, u: &ControlInput) -> Mat<f64> {
        let s = [u.throttle, u.brake, u.steering];
        Mat::from_fn(3, self.n, |i, j| ((1 + i + 2 * j) as f64 * (s[0] + 0.5) + (j as f64 + 1.0) * s[2] * (i as f64 - 1.0)).sin() + 0.3 * s[1])
    }
}

impl AdaptModel<f64> for LinearInTheta {
    fn n_theta(&self) -> usize {
        self.n
    }

    fn step_sensitivities(
        &self,
        x: &VehicleState,
        u: &ControlInput,
        _y: &TerrainInput,
        theta: &[f64],
    ) -> (VehicleState, [[f64; STATE_DIM]; STATE_DIM], Mat<f64>) {
        let phi = self.regressor(u);
        let drive = phi.matvec(theta);
        let mut a = x.to_array();
        for (k, &i) in idx::VELOCITY.iter().enumerate() {
            a[i] = self.decay * a[i] + DT * drive[k];
        }
        let mut fx = [[0.0; STATE_DIM]; STATE_DIM];
        for (i, row) in fx.iter_mut().enumerate() {
            row[i] = if idx::VELOCITY.contains(&i) { self.decay } else { 1.0 };
        }
        let ft = Mat::from_fn(STATE_DIM, self.n, |r, c| match idx::VELOCITY.iter().position(|&i| i == r) {
            Some(k) => DT * phi[(k, c)],
            None => 0.0,
        });
        (VehicleState::from_array(a), fx, ft)
    }
}

pub fn kalman_identification() -> Check {
    timed("2 Kalman identification", 5.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 11;
        let sys = LinearInTheta { decay: 0.9, n };
        let theta_star: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h = 10;
        let updates = 500;
        let steps = updates * h;
        let controls: Vec<ControlInput> = (0..steps)
            .map(|_| ControlInput::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let terrains = vec![TerrainInput::flat(); steps];
        let noise_std = 0.02;
        let noise = Normal::new(0.0, noise_std).unwrap();
        let mut x = VehicleState::zero();
        x.vx = 5.0;
        let mut measured = Vec::with_capacity(steps + 1);
        for k in 0..=steps {
            let mut m = x;
            m.vx += noise.sample(&mut rng);
            m.vy += noise.sample(&mut rng);
            m.yaw_rate += noise.sample(&mut rng);
            measured.push(m);
            if k < steps {
                x = sys.step_sensitivities(&x, &controls[k], &terrains[k], &theta_star).0;
            }
        }
        let fp = FilterParams {
            p_init: vec![1.0; n],
            q: vec![1e-8; n],
            // Start noise propagated over h steps plus end noise.
            r: [noise_std.powi(2) * (1.0 + 0.9f64.powi(2 * h as i32)); 3],
            eps: 1e-6,
            beta: 1.0,
            h,
        };
        let out = adapt_window(KalmanState::initial(&fp), &measured, &controls, &terrains, &sys, &fp, false).expect("window");
        let err: f64 = out.state.theta.iter().zip(&theta_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rel = err / theta_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        (
            rel < 0.05 && out.resets == 0,
            format!("|theta - theta*| / |theta*| = {rel:.4} after {updates} updates (tol 0.05)"),
        )
    })
}

// ----------------------------------------------------------- criterion 3

/// Tiny meta-learning problem: `tau = 20`, `T = 10`, `n_theta = 6`, with a
/// parametric truth that differs from the learner's parameters.
pub fn tiny_problem() -> (MetaParams, FeatureStats, Vec<TrajectorySegment>) {
    let shape = tiny_shape();
    let truth = HybridModel::parametric(
        ParametricParams {
            mass: 780.0,
            aero_drag: 1.4,
            lat_stiffness: 12000.0,
            ..Default::default()
        },
        shape,
    );
    let run = synthetic_run(&truth, &[0.0; 6], 120, 3, 1.0).unwrap();
    let stats = fit_feature_stats(std::slice::from_ref(&run), &ParametricParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = ResidualNet::init(shape, &mut rng);
    net.basis.iter_mut().for_each(|v| *v *= 5.0);
    let model = HybridModel::new(ParametricParams::default(), net, stats.clone());
    let mut fp = FilterParams::new(shape.n_theta());
    fp.h = 10;
    fp.eps = 4.0;
    let (segs, _) = slice_dataset(&[run], 20, 10, 40);
    (MetaParams::from_parts(&model, &fp), stats, segs)
}

/// Per-group relative error of the reverse-mode meta-gradient against
/// central differences of the segment loss.
pub fn meta_gradient_oracle() -> Check {
    timed("3 meta-gradient vs FD", 60.0, || {
        let (params, stats, segs) = tiny_problem();
        let seg = &segs[1];
        let loss = LossConfig::default();
        let g = meta_gradient(&[seg], &params, &stats, &loss, true).expect("gradient");
        let flat = params.to_flat();
        let loss_at = |x: &[f64]| {
            let (model, fp) = params.build(x, &stats);
            segment_loss(seg, &model, &fp, &loss, true).unwrap().loss
        };
        let mut ok = g.capped == 0;
        let mut parts = Vec::new();
        for (group, range) in params.ranges() {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in range {
                let h = 1e-5 * (1.0 + flat[i].abs());
                let mut a = flat.clone();
                let mut b = flat.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
                num += (g.grad[i] - fd).powi(2);
                den += fd * fd;
            }
            let rel = (num / den.max(1e-300)).sqrt();
            ok &= rel < 1e-3 && den > 0.0;
            parts.push(format!("{} {rel:.1e}", group.name()));
        }
        (ok, format!("rel err per group: {} (tol 1e-3)", parts.join(", ")))
    })
}

// ----------------------------------------------------------- criterion 4

/// One-step quadratic `J(u) = sum_i k_i (u_i - u*_i)^2` over pedal and
/// steering. With sampling std `s` and temperature `lambda` the exact MPPI
/// fixed point is the precision-weighted mean of nominal and optimum; the
/// check compares the N = 4096 plan against the optimum.
pub fn mppi_oracle() -> Check {
    timed("4 MPPI quadratic surrogate", 5.0, || {
        let cfg = MppiConfig {
            samples: 4096,
            horizon: 1,
            lambda: 1e-3,
            noise_std: [0.25, 0.0, 0.3],
            noise_hold: 1,
            replan_hz: 30.0,
        };
        let target = (0.6, -0.35);
        let k = (1.0, 2.0);
        let nominal = vec![ControlInput::new(0.4, 0.0, 0.0)];
        let cost = |s: &[ControlInput]| k.0 * (s[0].throttle - s[0].brake - target.0).powi(2) + k.1 * (s[0].steering - target.1).powi(2);
        let out = plan_with(&nominal, &cfg, 12, cost);
        let u = out.controls[0];
        let rel_pedal = ((u.throttle - u.brake) - target.0).abs() / target.0.abs();
        let rel_steer = (u.steering - target.1).abs() / target.1.abs();
        let shifted = plan_with(&nominal, &cfg, 12, |s| cost(s) + 987.65);
        let shift: f64 = out.controls[0]
            .to_array()
            .iter()
            .zip(shifted.controls[0].to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (
            rel_pedal < 0.05 && rel_steer < 0.05 && shift < 1e-10,
            format!("rel dist to optimum pedal {rel_pedal:.4}, steer {rel_steer:.4} (tol 0.05); cost shift moves u* by {shift:.1e} (tol 1e-10)"),
        )
    })
}

// ----------------------------------------------------------- criterion 7

pub fn step_linearity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let model = random_model(&mut rng);
        let n = model.n_theta();
        let x = random_state(&mut rng);
        let (us, ys) = random_inputs(&mut rng, 1);
        let t1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = rng.gen_range(-2.0..2.0);
        let mix: Vec<f64> = t1.iter().zip(&t2).map(|(p, q)| a * p + (1.0 - a) * q).collect();
        let f = |t: &[f64]| model.step(&x, &us[0], &ys[0], t).unwrap().to_array();
        let (f1, f2, fm) = (f(&t1), f(&t2), f(&mix));
        for i in 0..STATE_DIM {
            worst = worst.max((fm[i] - (a * f1[i] + (1.0 - a) * f2[i])).abs());
        }
    }
    (worst < 1e-10, format!("affine in theta to {worst:.1e}"))
}

pub fn covariance_psd() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 11;
    let mut fp = FilterParams::new(n);
    fp.q = (0..n).map(|_| rng.gen_range(1e-6..1e-3)).collect();
    let mut ks = KalmanState::initial(&fp);
    let mut min_eig = f64::INFINITY;
    let mut asym: f64 = 0.0;
    for k in 0..10_000 {
        let scale = 10f64.powf(rng.gen_range(-3.0..1.0));
        let h = Mat::from_fn(STATE_DIM, n, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let mut innov = [0.0; STATE_DIM];
        innov.iter_mut().for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
        let gamma = rng.gen_range(0.0..1.0);
        if let Ok(next) = kalman_update(&ks, &h, &innov, gamma, &fp) {
            ks = next;
        }
        if k % 100 == 99 {
            let p = DMatrix::from_fn(n, n, |r, c| ks.p[(r, c)]);
            asym = asym.max((&p - p.transpose()).abs().max());
            min_eig = min_eig.min(p.symmetric_eigenvalues().min());
        }
    }
    (asym <= 1e-9 && min_eig > -1e-8, format!("min eig {min_eig:.2e}, asym {asym:.1e}"))
}

pub fn gating_properties() -> (bool, String) {
    let zero = gating([0.0; 3], 1.0) == 0.0;
    let mut monotone = true;
    let mut prev = 0.0;
    for k in 1..2000 {
        let s = k as f64 * 0.01;
        let g = gating([s, 0.3 * s, -0.1 * s], 2.0);
        monotone &= g >= prev && g < 1.0;
        prev = g;
    }
    (zero && monotone, format!("gamma(0) = 0: {zero}, monotone in |v|: {monotone}"))
}

pub fn theta_fixed_point() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 11;
    let fp = FilterParams::new(n);
    let mut ks = KalmanState::initial(&fp);
    ks.theta = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let h = Mat::from_fn(STATE_DIM, n, |_, _| rng.gen_range(-1.0..1.0));
    let mut innov = [0.0; STATE_DIM];
    innov.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let next = kalman_update(&ks, &h, &innov, 0.0, &fp).expect("update");
    let same = next.theta == ks.theta;
    (same, format!("theta unchanged under gamma = 0: {same}"))
}

pub fn bellman_random_maps() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..10 {
        let n = 30;
        let mut map = Grid::from_fn(n, n, 0.5, |_, _| if rng.gen_bool(0.15) { f64::INFINITY } else { rng.gen_range(1.0..5.0) });
        let goal = (rng.gen_range(0..n), rng.gen_range(0..n));
        map.set(goal.0, goal.1, 1.0);
        let f = build_cost_to_go(&map, goal).expect("goal traversable");
        if f.values.get(goal.0, goal.1) != 0.0 {
            return (false, "V(goal) != 0".into());
        }
        for r in 0..n {
            for c in 0..n {
                if !map.get(r, c).is_finite() {
                    continue;
                }
                for (nr, nc, len) in map.neighbours(r, c) {
                    let (v, w) = (f.values.get(r, c), f.values.get(nr, nc));
                    if map.get(nr, nc).is_finite() && w.is_finite() {
                        worst = worst.max(v - (edge_cost(&map, (r, c), (nr, nc), len) + w));
                    }
                }
            }
        }
    }
    (worst <= 1e-9, format!("max V(s) - [c(s,s') + V(s')] = {worst:.1e} on 10 maps"))
}

pub fn episode_determinism() -> (bool, String) {
    let map = TerrainMap::flat(60.0, 0.5, 0.9);
    let model = HybridModel::parametric(ParametricParams::default(), NetShape::default());
    let mut cfg = EpisodeConfig::new(FilterParams::new(model.n_theta()));
    cfg.adapter = metadapt::adaptation::AdapterKind::Kalman;
    cfg.mppi.samples = 32;
    cfg.mppi.horizon = 30;
    cfg.limits.max_time = 4.0;
    cfg.prediction_horizon = 1.0;
    cfg.control_seed = 5;
    cfg.noise_seed = 6;
    let course = Course::new(&map, (10.0, 30.0, 0.0), &[(40.0, 30.0), (50.0, 40.0)]).expect("course");
    let a = run_episode(&map, &course, &model, &cfg).expect("episode");
    let b = run_episode(&map, &course, &model, &cfg).expect("episode");
    let same = a == b && !a.records.is_empty();
    (same, format!("identical logs over {} steps: {same}", a.records.len()))
}

pub fn property_suite() -> Check {
    timed("7 property suite", 60.0, || {
        let parts = [
            ("linearity", step_linearity()),
            ("P PSD", covariance_psd()),
            ("gating", gating_properties()),
            ("fixed point", theta_fixed_point()),
            ("Bellman", bellman_random_maps()),
            ("determinism", episode_determinism()),
        ];
        let ok = parts.iter().all(|(_, (p, _))| *p);
        let detail = parts
            .iter()
            .map(|(n, (p, d))| format!("{n}: {} ({d})", if *p { "ok" } else { "FAILED" }))
            .collect::<Vec<_>>()
            .join("; ");
        (ok, detail)
    })
}
