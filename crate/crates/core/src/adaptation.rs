//! Online adaptation of the last-layer parameters `theta`.
//!
//! Every `h` steps the model is propagated open loop from the last measured
//! state, the sensitivity `H = d x_hat / d theta` is accumulated along the way,
//! and a Kalman update on the velocity innovation corrects `theta`. The code is
//! generic over [`Real`] so the meta-learner can differentiate through it.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, RwLock};

use metadapt_autodiff::{Mat, Real};
use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{idx, ControlInput, TerrainInput, VehicleState, STATE_DIM};
use crate::error::{Error, Result};
use crate::model::HybridModel;

pub const MEAS_DIM: usize = 3;
/// `theta` norm beyond which the filter is considered diverged.
pub const DIVERGENCE_NORM: f64 = 1e3;
/// Innovation covariances with a larger condition estimate are rejected.
const MAX_CONDITION: f64 = 1e12;

/// Filter hyperparameters. `p_init`, `q` and `r` are covariance diagonals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams<S = f64> {
    pub p_init: Vec<S>,
    pub q: Vec<S>,
    pub r: [S; MEAS_DIM],
    /// Gating constant [m^2/s^2].
    pub eps: S,
    /// Per-cycle decay applied to `theta` in training mode.
    pub beta: f64,
    /// Update interval [steps].
    pub h: usize,
}

impl FilterParams<f64> {
    pub fn new(n_theta: usize) -> Self {
        Self {
            p_init: vec![0.25; n_theta],
            q: vec![1e-4; n_theta],
            r: [0.02; MEAS_DIM],
            eps: 1.0,
            beta: 0.995,
            h: 10,
        }
    }

    pub fn n_theta(&self) -> usize {
        self.p_init.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: &f64| *v > 0.0 && v.is_finite();
        if self.q.len() != self.p_init.len() {
            return Err(Error::Shape(format!("Q has {} entries, P_s has {}", self.q.len(), self.p_init.len())));
        }
        if !(self.p_init.iter().all(positive) && self.q.iter().all(positive) && self.r.iter().all(positive) && positive(&self.eps)) {
            return Err(Error::Config("filter covariances and eps must be strictly positive".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if self.h == 0 {
            return Err(Error::Config("update interval h must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lift<S: Real>(&self) -> FilterParams<S> {
        FilterParams {
            p_init: self.p_init.iter().map(|v| S::cst(*v)).collect(),
            q: self.q.iter().map(|v| S::cst(*v)).collect(),
            r: self.r.map(S::cst),
            eps: S::cst(self.eps),
            beta: self.beta,
            h: self.h,
        }
    }
}

/// `C`: selects the body velocity block of the state.
pub fn measurement_matrix() -> Mat<f64> {
    Mat::from_fn(MEAS_DIM, STATE_DIM, |r, c| if idx::VELOCITY[r] == c { 1.0 } else { 0.0 })
}

fn select_rows<S: Real>(h: &Mat<S>) -> Mat<S> {
    Mat::from_fn(MEAS_DIM, h.cols(), |r, c| h[(idx::VELOCITY[r], c)])
}

/// Velocity gating `gamma = |v|^2 / (|v|^2 + eps)`.
pub fn gating<S: Real>(v: [S; 3], eps: S) -> S {
    let sq = S::dot(&v, &v);
    sq / (sq + eps)
}

/// Parameter estimate and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState<S = f64> {
    pub theta: Vec<S>,
    pub p: Mat<S>,
}

impl<S: Real> KalmanState<S> {
    pub fn initial(fp: &FilterParams<S>) -> Self {
        Self {
            theta: vec![S::zero(); fp.p_init.len()],
            p: Mat::from_diag(&fp.p_init),
        }
    }

    pub fn theta_values(&self) -> Vec<f64> {
        self.theta.iter().map(|v| v.value()).collect()
    }

    pub fn theta_norm(&self) -> f64 {
        self.theta.iter().map(|v| v.value().powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_diverged(&self) -> bool {
        !(self.theta.iter().all(|v| v.is_finite()) && self.p.is_finite()) || self.theta_norm() > DIVERGENCE_NORM
    }
}

fn condition_estimate(s: &Mat<f64>) -> f64 {
    let m = Matrix3::from_fn(|r, c| s[(r, c)]);
    let eig = m.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// One Kalman correction. `innovation` is the full-state residual
/// `x - x_hat`; only its velocity block is used.
pub fn kalman_update<S: Real>(
    ks: &KalmanState<S>,
    h: &Mat<S>,
    innovation: &[S; STATE_DIM],
    gamma: S,
    fp: &FilterParams<S>,
) -> Result<KalmanState<S>> {
    let n = ks.theta.len();
    assert_eq!(h.cols(), n, "H column count must equal n_theta");
    let p_bar = ks.p.add_diag(&fp.q);
    let ch = select_rows(h);
    let ch_p = ch.matmul(&p_bar); // C H P_bar, 3 x n
    let s = ch_p.matmul_t(&ch).add_diag(&fp.r).symmetrize();
    let cond = condition_estimate(&s.values());
    if cond > MAX_CONDITION {
        return Err(Error::SingularInnovation { condition: cond });
    }
    // K^T = S^-1 (C H P_bar), using symmetry of P_bar and S
    let kt = s
        .cholesky_solve(&ch_p)
        .map_err(|_| Error::SingularInnovation { condition: f64::INFINITY })?;
    let e: Vec<S> = idx::VELOCITY.iter().map(|&i| innovation[i]).collect();
    let correction = kt.transpose().matvec(&e);
    let theta = ks.theta.iter().zip(&correction).map(|(t, c)| *t + gamma * *c).collect();
    let p = p_bar.sub(&kt.transpose().matmul(&ch_p)).symmetrize();
    Ok(KalmanState { theta, p })
}

/// A model the filter can adapt: one step plus `F^x` and `F^theta`.
pub trait AdaptModel<S: Real>: Sync {
    fn n_theta(&self) -> usize;

    fn step_sensitivities(
        &self,
        x: &VehicleState<S>,
        u: &ControlInput,
        y: &TerrainInput,
        theta: &[S],
    ) -> (VehicleState<S>, [[S; STATE_DIM]; STATE_DIM], Mat<S>);
}

impl<S: Real> AdaptModel<S> for HybridModel<S> {
    fn n_theta(&self) -> usize {
        HybridModel::n_theta(self)
    }

    fn step_sensitivities(
        &self,
        x: &VehicleState<S>,
        u: &ControlInput,
        y: &TerrainInput,
        theta: &[S],
    ) -> (VehicleState<S>, [[S; STATE_DIM]; STATE_DIM], Mat<S>) {
        HybridModel::step_sensitivities(self, x, u, y, theta)
    }
}

/// `F^x H + F^theta`.
fn chain_jacobian<S: Real>(fx: &[[S; STATE_DIM]; STATE_DIM], h: &Mat<S>, ft: &Mat<S>) -> Mat<S> {
    let ht = h.transpose();
    Mat::from_fn(STATE_DIM, h.cols(), |r, c| S::dot(&fx[r], ht.row(c)) + ft[(r, c)])
}

/// Predicted states `x_hat_{t..t+h}` and `H_{t+h}`.
#[derive(Clone, Debug)]
pub struct Propagation<S> {
    pub states: Vec<VehicleState<S>>,
    pub jacobian: Mat<S>,
}

/// Propagate `controls.len()` steps from `x0` with fixed `theta`, accumulating
/// the multi-step Jacobian along the way.
pub fn propagate<S: Real, M: AdaptModel<S>>(
    model: &M,
    x0: &VehicleState<S>,
    controls: &[ControlInput],
    terrains: &[TerrainInput],
    theta: &[S],
) -> Propagation<S> {
    assert!(!controls.is_empty() && terrains.len() >= controls.len());
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(*x0);
    let mut h: Option<Mat<S>> = None;
    for (u, y) in controls.iter().zip(terrains) {
        let x = states.last().expect("non-empty");
        let (next, fx, ft) = model.step_sensitivities(x, u, y, theta);
        h = Some(match h {
            None => ft,
            Some(prev) => chain_jacobian(&fx, &prev, &ft),
        });
        states.push(next);
    }
    Propagation {
        states,
        jacobian: h.expect("at least one step"),
    }
}

/// `H_{t+h}` for an already propagated trajectory `states = x_hat_{t..t+h}`.
/// `F^x` and `F^theta` of each step are evaluated at the predecessor state.
pub fn multi_step_jacobian<S: Real, M: AdaptModel<S>>(
    model: &M,
    states: &[VehicleState<S>],
    controls: &[ControlInput],
    terrains: &[TerrainInput],
    theta: &[S],
) -> Mat<S> {
    assert!(states.len() >= 2 && controls.len() + 1 >= states.len());
    let mut h: Option<Mat<S>> = None;
    for i in 0..states.len() - 1 {
        let (_, fx, ft) = model.step_sensitivities(&states[i], &controls[i], &terrains[i], theta);
        h = Some(match h {
            None => ft,
            Some(prev) => chain_jacobian(&fx, &prev, &ft),
        });
    }
    h.expect("at least one step")
}

/// Per-update diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptTraceRecord {
    pub t: f64,
    pub theta_norm: f64,
    pub gamma: f64,
    pub innovation_norm: f64,
    pub trace_p: f64,
}

pub fn write_trace_csv(path: &Path, records: &[AdaptTraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of one filter cycle.
#[derive(Clone, Debug)]
pub struct CycleOutcome<S> {
    pub state: KalmanState<S>,
    pub gamma: S,
    pub innovation: [S; STATE_DIM],
    pub skipped: bool,
    pub reset: bool,
}

/// Propagate, linearize and update once. `measured` holds `h + 1` measured
/// states starting at the propagation origin.
pub fn adaptation_cycle<S: Real, M: AdaptModel<S>>(
    ks: &KalmanState<S>,
    measured: &[VehicleState<S>],
    controls: &[ControlInput],
    terrains: &[TerrainInput],
    model: &M,
    fp: &FilterParams<S>,
) -> CycleOutcome<S> {
    let h = controls.len();
    let prop = propagate(model, &measured[0], controls, terrains, &ks.theta);
    let predicted = prop.states[h].to_array();
    let actual = measured[h].to_array();
    let mut innovation = [S::zero(); STATE_DIM];
    for i in 0..STATE_DIM {
        innovation[i] = actual[i] - predicted[i];
    }
    let gamma = gating(measured[h].velocity(), fp.eps);
    let finite = prop.jacobian.is_finite() && innovation.iter().all(|v| v.is_finite());
    let updated = if finite {
        kalman_update(ks, &prop.jacobian, &innovation, gamma, fp)
    } else {
        Err(Error::Divergence {
            reason: "non-finite prediction".into(),
        })
    };
    match updated {
        Ok(next) if !next.is_diverged() => CycleOutcome {
            state: next,
            gamma,
            innovation,
            skipped: false,
            reset: false,
        },
        Err(Error::SingularInnovation { condition }) => {
            log::warn!("skipping adaptation update: innovation covariance condition {condition:e}");
            CycleOutcome {
                state: ks.clone(),
                gamma,
                innovation,
                skipped: true,
                reset: false,
            }
        }
        _ => {
            log::warn!("adaptation diverged; resetting theta and P");
            CycleOutcome {
                state: KalmanState::initial(fp),
                gamma,
                innovation,
                skipped: false,
                reset: true,
            }
        }
    }
}

/// Final filter state after a window plus bookkeeping.
#[derive(Clone, Debug)]
pub struct WindowOutcome<S> {
    pub state: KalmanState<S>,
    pub resets: usize,
    pub skipped: usize,
    pub trace: Vec<AdaptTraceRecord>,
}

/// Run the filter over a logged window: `states` has `tau + 1` entries and
/// `tau` must be a multiple of `h`. In training mode `theta` decays by `beta`
/// after every cycle.
pub fn adapt_window<S: Real, M: AdaptModel<S>>(
    initial: KalmanState<S>,
    states: &[VehicleState<S>],
    controls: &[ControlInput],
    terrains: &[TerrainInput],
    model: &M,
    fp: &FilterParams<S>,
    training: bool,
) -> Result<WindowOutcome<S>> {
    let tau = states.len().saturating_sub(1);
    if fp.h == 0 || tau % fp.h != 0 {
        return Err(Error::Config(format!("window length {tau} is not a multiple of h = {}", fp.h)));
    }
    if controls.len() < tau || terrains.len() < tau {
        return Err(Error::Shape(format!(
            "window of {tau} steps needs as many controls ({}) and terrains ({})",
            controls.len(),
            terrains.len()
        )));
    }
    let mut ks = initial;
    let mut out = WindowOutcome {
        state: ks.clone(),
        resets: 0,
        skipped: 0,
        trace: Vec::with_capacity(tau / fp.h.max(1)),
    };
    for start in (0..tau).step_by(fp.h) {
        let end = start + fp.h;
        let c = adaptation_cycle(&ks, &states[start..=end], &controls[start..end], &terrains[start..end], model, fp);
        ks = c.state;
        out.resets += c.reset as usize;
        out.skipped += c.skipped as usize;
        if training && fp.beta != 1.0 {
            for t in ks.theta.iter_mut() {
                *t = *t * fp.beta;
            }
        }
        out.trace.push(AdaptTraceRecord {
            t: end as f64 * crate::dynamics::DT,
            theta_norm: ks.theta_norm(),
            gamma: c.gamma.value(),
            innovation_norm: idx::VELOCITY.iter().map(|&i| c.innovation[i].value().powi(2)).sum::<f64>().sqrt(),
            trace_p: ks.p.trace().value(),
        });
    }
    out.state = ks;
    Ok(out)
}

/// One regression pair of the sliding-window baseline: `a` is the `3 x n_w`
/// block `C H[:, theta_w]` (row-major) and `target` the velocity innovation
/// re-expressed relative to `theta_w = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LsqPair {
    pub a: Vec<f64>,
    pub target: [f64; MEAS_DIM],
}

/// Ridge solution `argmin sum |target - A theta_w|^2 + lambda |theta_w|^2`.
pub fn sliding_lsq_update(window: &[LsqPair], n_w: usize, lambda: f64) -> Vec<f64> {
    assert!(lambda > 0.0, "ridge weight must be positive");
    let mut ata = DMatrix::<f64>::identity(n_w, n_w) * lambda;
    let mut atb = DVector::<f64>::zeros(n_w);
    for pair in window {
        let a = DMatrix::from_row_slice(MEAS_DIM, n_w, &pair.a);
        ata += a.transpose() * &a;
        atb += a.transpose() * DVector::from_column_slice(&pair.target);
    }
    let sol = ata
        .cholesky()
        .expect("ridge-regularized normal matrix is positive definite")
        .solve(&atb);
    sol.iter().copied().collect()
}

/// Sliding-window regularized least squares on `theta_w`; `theta_b` stays 0.
#[derive(Clone, Debug)]
pub struct SlidingLsq {
    window: VecDeque<LsqPair>,
    len: usize,
    lambda: f64,
    n_w: usize,
}

impl SlidingLsq {
    pub fn new(n_w: usize, len: usize, lambda: f64) -> Self {
        Self {
            window: VecDeque::with_capacity(len),
            len: len.max(1),
            lambda,
            n_w,
        }
    }

    pub fn push(&mut self, pair: LsqPair) -> Vec<f64> {
        if self.window.len() == self.len {
            self.window.pop_front();
        }
        self.window.push_back(pair);
        sliding_lsq_update(self.window.make_contiguous(), self.n_w, self.lambda)
    }
}

/// Which adaptation runs during an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AdapterKind {
    None,
    Kalman,
    SlidingLsq { window: usize, ridge: f64 },
}

/// Streaming adapter fed with measurements at the model rate. Owns the filter
/// state; publishes `theta` through a [`ThetaSnapshot`].
pub struct OnlineAdapter {
    kind: AdapterKind,
    fp: FilterParams,
    kalman: KalmanState,
    lsq: Option<SlidingLsq>,
    theta: Vec<f64>,
    states: Vec<VehicleState>,
    controls: Vec<ControlInput>,
    terrains: Vec<TerrainInput>,
    pub trace: Vec<AdaptTraceRecord>,
    pub resets: usize,
}

impl OnlineAdapter {
    pub fn new(kind: AdapterKind, fp: FilterParams, n_w: usize) -> Self {
        let lsq = match &kind {
            AdapterKind::SlidingLsq { window, ridge } => Some(SlidingLsq::new(n_w, *window, *ridge)),
            _ => None,
        };
        Self {
            kalman: KalmanState::initial(&fp),
            theta: vec![0.0; fp.n_theta()],
            kind,
            fp,
            lsq,
            states: Vec::new(),
            controls: Vec::new(),
            terrains: Vec::new(),
            trace: Vec::new(),
            resets: 0,
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Feed the measurement at time `t` and the control/terrain that will act
    /// over the next step. Returns the new `theta` when an update happened.
    pub fn observe(
        &mut self,
        t: f64,
        measured: &VehicleState,
        next_control: &ControlInput,
        terrain: &TerrainInput,
        model: &HybridModel,
    ) -> Option<&[f64]> {
        if self.kind == AdapterKind::None {
            return None;
        }
        self.states.push(*measured);
        let updated = if self.states.len() == self.fp.h + 1 {
            self.update(t, model);
            let last = *self.states.last().expect("non-empty");
            self.states.clear();
            self.controls.clear();
            self.terrains.clear();
            self.states.push(last);
            true
        } else {
            false
        };
        self.controls.push(*next_control);
        self.terrains.push(*terrain);
        updated.then_some(self.theta.as_slice())
    }

    fn update(&mut self, t: f64, model: &HybridModel) {
        match self.kind {
            AdapterKind::None => {}
            AdapterKind::Kalman => {
                let c = adaptation_cycle(&self.kalman, &self.states, &self.controls, &self.terrains, model, &self.fp);
                self.kalman = c.state;
                self.resets += c.reset as usize;
                self.theta = self.kalman.theta.clone();
                self.trace.push(AdaptTraceRecord {
                    t,
                    theta_norm: self.kalman.theta_norm(),
                    gamma: c.gamma,
                    innovation_norm: idx::VELOCITY.iter().map(|&i| c.innovation[i].powi(2)).sum::<f64>().sqrt(),
                    trace_p: self.kalman.p.trace(),
                });
            }
            AdapterKind::SlidingLsq { .. } => {
                let n_w = model.net.shape.ensemble;
                let h = self.controls.len();
                let prop = propagate(model, &self.states[0], &self.controls, &self.terrains, &self.theta);
                let innov: Vec<f64> = idx::VELOCITY
                    .iter()
                    .map(|&i| self.states[h].to_array()[i] - prop.states[h].to_array()[i])
                    .collect();
                if !(prop.jacobian.is_finite() && innov.iter().all(|v| v.is_finite())) {
                    self.resets += 1;
                    self.theta.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                let mut a = vec![0.0; MEAS_DIM * n_w];
                for (r, &row) in idx::VELOCITY.iter().enumerate() {
                    for c in 0..n_w {
                        a[r * n_w + c] = prop.jacobian[(row, c)];
                    }
                }
                let mut target = [0.0; MEAS_DIM];
                for r in 0..MEAS_DIM {
                    let used: f64 = (0..n_w).map(|c| a[r * n_w + c] * self.theta[c]).sum();
                    target[r] = innov[r] + used;
                }
                let lsq = self.lsq.as_mut().expect("sliding LSQ state");
                let tw = lsq.push(LsqPair { a, target });
                let norm = tw.iter().map(|v| v * v).sum::<f64>().sqrt();
                if tw.iter().all(|v| v.is_finite()) && norm <= DIVERGENCE_NORM {
                    self.theta[..n_w].copy_from_slice(&tw);
                } else {
                    self.resets += 1;
                    self.theta.iter_mut().for_each(|v| *v = 0.0);
                }
                self.trace.push(AdaptTraceRecord {
                    t,
                    theta_norm: norm,
                    gamma: 1.0,
                    innovation_norm: innov.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    trace_p: 0.0,
                });
            }
        }
    }
}

/// Latest adapted parameters, shared between the adaptation owner and the
/// controller. Readers always see a complete vector.
#[derive(Clone, Debug, Default)]
pub struct ThetaSnapshot {
    inner: Arc<RwLock<Arc<Vec<f64>>>>,
}

impl ThetaSnapshot {
    pub fn new(theta: Vec<f64>) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(theta))),
        }
    }

    pub fn publish(&self, theta: Vec<f64>) {
        *self.inner.write().expect("snapshot lock poisoned") = Arc::new(theta);
    }

    pub fn load(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.inner.read().expect("snapshot lock poisoned"))
    }
}
