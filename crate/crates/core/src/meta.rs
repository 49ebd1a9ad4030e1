//! Offline meta-learning through the adaptation procedure.
//!
//! Each training segment is adapted over its first `tau` steps with the
//! Kalman filter, then rolled out open loop for `T` steps with the resulting
//! `theta`. The multi-step prediction error is differentiated with respect to
//! the network, the parametric parameters and the filter covariances by
//! recording the whole computation on the reverse-mode tape.

use std::ops::Range;
use std::time::Instant;

use metadapt_autodiff::tape::with_tape;
use metadapt_autodiff::{Real, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_window, FilterParams, KalmanState};
use crate::dynamics::{idx, tire_forces, wrap_angle_s, ControlInput, ParametricParams, TerrainInput, VehicleState, STATE_DIM};
use crate::error::{Error, Result};
use crate::model::HybridModel;
use crate::network::{network_input, FeatureStats, ResidualNet, ETA_DIM};

/// One logged run: `controls[k]` and `terrains[k]` act between `states[k]`
/// and `states[k + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub run_id: usize,
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub terrains: Vec<TerrainInput>,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Window `x_{t-tau..t+T}` of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    pub states: Vec<VehicleState>,
    pub controls: Vec<ControlInput>,
    pub terrains: Vec<TerrainInput>,
    /// Index of `x_{t-tau}` in the source run.
    pub start: usize,
    pub run_id: usize,
    pub tau: usize,
}

impl TrajectorySegment {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1 - self.tau
    }
}

/// Cut runs into segments of `tau + T + 1` states every `stride` steps.
/// Returns the segments and the number of runs too short to contribute.
pub fn slice_dataset(runs: &[RunLog], tau: usize, horizon: usize, stride: usize) -> (Vec<TrajectorySegment>, usize) {
    assert!(stride >= 1, "stride must be positive");
    let len = tau + horizon + 1;
    let mut segments = Vec::new();
    let mut skipped = 0;
    for run in runs {
        let usable = run.states.len().min(run.controls.len() + 1).min(run.terrains.len() + 1);
        if usable < len {
            skipped += 1;
            continue;
        }
        let mut start = 0;
        while start + len <= usable {
            segments.push(TrajectorySegment {
                states: run.states[start..start + len].to_vec(),
                controls: run.controls[start..start + len - 1].to_vec(),
                terrains: run.terrains[start..start + len - 1].to_vec(),
                start,
                run_id: run.run_id,
                tau,
            });
            start += stride;
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} run(s) shorter than tau + T + 1 = {len} states were skipped");
    }
    (segments, skipped)
}

/// Standardization statistics of `eta = [x, u, y, F]` over all logged
/// steps, with tire forces from the parametric model `params`.
pub fn fit_feature_stats(runs: &[RunLog], params: &ParametricParams) -> FeatureStats {
    let mut rows: Vec<[f64; ETA_DIM]> = Vec::new();
    for run in runs {
        for ((x, u), y) in run.states.iter().zip(&run.controls).zip(&run.terrains) {
            rows.push(network_input(x, u, y, &tire_forces(x, params)));
        }
    }
    FeatureStats::fit(rows.iter().map(|r| r.as_slice()), ETA_DIM)
}

/// Smooth positive map `softplus(raw)`.
pub fn positive<S: Real>(raw: S) -> S {
    raw.softplus()
}

/// Inverse of [`positive`] for `v > 0`.
pub fn positive_inverse(v: f64) -> f64 {
    assert!(v > 0.0, "positive_inverse needs v > 0, got {v}");
    // log(exp(v) - 1) = v + log(1 - exp(-v))
    v + (-(-v).exp_m1()).ln()
}

/// Per-channel loss weights `1 / scale^2`; zero excludes a channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: [f64; STATE_DIM],
    /// Segment losses above this value are replaced by it (no gradient).
    pub cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let mut w = [0.0; STATE_DIM];
        w[idx::PX] = 1.0;
        w[idx::PY] = 1.0;
        w[idx::YAW] = 1.0 / 0.2f64.powi(2);
        w[idx::VX] = 1.0 / 0.5f64.powi(2);
        w[idx::VY] = 1.0 / 0.5f64.powi(2);
        w[idx::YAW_RATE] = 1.0 / 0.2f64.powi(2);
        Self { weights: w, cap: 1e4 }
    }
}

/// Segment loss and whether it was capped.
#[derive(Clone, Copy, Debug)]
pub struct SegmentLoss<S> {
    pub loss: S,
    pub capped: bool,
}

/// Adapt over the first `tau` steps (or keep `theta = 0` when `adapt` is
/// false), roll out the remaining `T` steps and return the mean weighted
/// squared error over the `T` predicted states.
pub fn segment_loss<S: Real>(
    seg: &TrajectorySegment,
    model: &HybridModel<S>,
    fp: &FilterParams<S>,
    loss: &LossConfig,
    adapt: bool,
) -> Result<SegmentLoss<S>> {
    let tau = seg.tau;
    let horizon = seg.horizon();
    if horizon == 0 {
        return Err(Error::Shape("segment has no prediction horizon".into()));
    }
    let theta = if adapt {
        let states: Vec<VehicleState<S>> = seg.states[..=tau].iter().map(|x| x.lift()).collect();
        let out = adapt_window(
            KalmanState::initial(fp),
            &states,
            &seg.controls[..tau],
            &seg.terrains[..tau],
            model,
            fp,
            true,
        )?;
        out.state.theta
    } else {
        vec![S::zero(); model.n_theta()]
    };
    let capped = |v: f64| SegmentLoss {
        loss: S::cst(v),
        capped: true,
    };
    let mut x: VehicleState<S> = seg.states[tau].lift();
    let mut terms = Vec::with_capacity(horizon);
    for j in 0..horizon {
        x = model.step_eval(&x, &seg.controls[tau + j], &seg.terrains[tau + j], &theta).next;
        if !x.is_finite() {
            return Ok(capped(loss.cap));
        }
        let pred = x.to_array();
        let truth = seg.states[tau + j + 1].to_array();
        let mut diff = Vec::with_capacity(STATE_DIM);
        let mut w = Vec::with_capacity(STATE_DIM);
        for c in 0..STATE_DIM {
            if loss.weights[c] == 0.0 {
                continue;
            }
            let mut d = pred[c] - truth[c];
            if c == idx::YAW {
                d = wrap_angle_s(d);
            }
            diff.push(d);
            w.push(loss.weights[c]);
        }
        let weighted: Vec<S> = diff.iter().zip(&w).map(|(d, w)| *d * *w).collect();
        terms.push(S::dot(&weighted, &diff));
    }
    let l = S::sum(&terms) / horizon as f64;
    if !l.is_finite() || l.value() > loss.cap {
        return Ok(capped(loss.cap));
    }
    Ok(SegmentLoss { loss: l, capped: false })
}

/// Parameter groups with separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Network,
    Parametric,
    InitialCovariance,
    ProcessNoise,
    MeasurementNoise,
    Gating,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Network,
        Group::Parametric,
        Group::InitialCovariance,
        Group::ProcessNoise,
        Group::MeasurementNoise,
        Group::Gating,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Network => "phi",
            Group::Parametric => "psi",
            Group::InitialCovariance => "P_s",
            Group::ProcessNoise => "Q",
            Group::MeasurementNoise => "R",
            Group::Gating => "eps",
        }
    }
}

/// Everything meta-learning optimizes, in unconstrained coordinates:
/// network weights as is, parametric parameters as logarithms, filter
/// covariances and `eps` through [`positive`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub net: ResidualNet,
    pub log_psi: Vec<f64>,
    pub raw_p_init: Vec<f64>,
    pub raw_q: Vec<f64>,
    pub raw_r: Vec<f64>,
    pub raw_eps: f64,
    pub beta: f64,
    pub h: usize,
}

impl MetaParams {
    pub fn from_parts(model: &HybridModel, fp: &FilterParams) -> Self {
        Self {
            net: model.net.clone(),
            log_psi: model.params.to_vec().iter().map(|v| v.ln()).collect(),
            raw_p_init: fp.p_init.iter().map(|v| positive_inverse(*v)).collect(),
            raw_q: fp.q.iter().map(|v| positive_inverse(*v)).collect(),
            raw_r: fp.r.iter().map(|v| positive_inverse(*v)).collect(),
            raw_eps: positive_inverse(fp.eps),
            beta: fp.beta,
            h: fp.h,
        }
    }

    pub fn ranges(&self) -> [(Group, Range<usize>); 6] {
        let sizes = [
            self.net.shape.n_params(),
            self.log_psi.len(),
            self.raw_p_init.len(),
            self.raw_q.len(),
            self.raw_r.len(),
            1,
        ];
        let mut at = 0;
        Group::ALL.map(|g| {
            let n = sizes[Group::ALL.iter().position(|x| *x == g).expect("known group")];
            let r = at..at + n;
            at += n;
            (g, r)
        })
    }

    pub fn range(&self, g: Group) -> Range<usize> {
        self.ranges().into_iter().find(|(x, _)| *x == g).expect("known group").1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.net.to_flat();
        v.extend_from_slice(&self.log_psi);
        v.extend_from_slice(&self.raw_p_init);
        v.extend_from_slice(&self.raw_q);
        v.extend_from_slice(&self.raw_r);
        v.push(self.raw_eps);
        v
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let r = self.ranges();
        Self {
            net: ResidualNet::from_flat(self.net.shape, &flat[r[0].1.clone()]),
            log_psi: flat[r[1].1.clone()].to_vec(),
            raw_p_init: flat[r[2].1.clone()].to_vec(),
            raw_q: flat[r[3].1.clone()].to_vec(),
            raw_r: flat[r[4].1.clone()].to_vec(),
            raw_eps: flat[r[5].1.start],
            beta: self.beta,
            h: self.h,
        }
    }

    /// Build the model and filter from a flat vector of any scalar type.
    pub fn build<S: Real>(&self, flat: &[S], stats: &FeatureStats) -> (HybridModel<S>, FilterParams<S>) {
        let r = self.ranges();
        let psi: Vec<S> = flat[r[1].1.clone()].iter().map(|v| v.exp()).collect();
        let model = HybridModel {
            params: ParametricParams::from_slice(&psi),
            net: ResidualNet::from_flat(self.net.shape, &flat[r[0].1.clone()]),
            stats: stats.clone(),
        };
        let pos = |range: Range<usize>| -> Vec<S> { flat[range].iter().map(|v| positive(*v)).collect() };
        let rr = pos(r[4].1.clone());
        let fp = FilterParams {
            p_init: pos(r[2].1.clone()),
            q: pos(r[3].1.clone()),
            r: [rr[0], rr[1], rr[2]],
            eps: positive(flat[r[5].1.start]),
            beta: self.beta,
            h: self.h,
        };
        (model, fp)
    }

    pub fn model(&self, stats: &FeatureStats) -> HybridModel {
        self.build(&self.to_flat(), stats).0
    }

    pub fn filter(&self) -> FilterParams {
        let flat = self.to_flat();
        self.build(&flat, &FeatureStats::identity(self.net.shape.input)).1
    }
}

/// Summed loss and gradient over a batch.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub loss_sum: f64,
    pub losses: Vec<f64>,
    pub grad: Vec<f64>,
    pub capped: usize,
}

impl MetaGradient {
    pub fn block(&self, params: &MetaParams, g: Group) -> &[f64] {
        &self.grad[params.range(g)]
    }
}

fn segment_value_and_grad(
    seg: &TrajectorySegment,
    params: &MetaParams,
    flat: &[f64],
    stats: &FeatureStats,
    loss: &LossConfig,
    adapt: bool,
) -> Result<(f64, Vec<f64>, bool)> {
    with_tape(|| {
        let vars: Vec<Var> = flat.iter().map(|v| Var::variable(*v)).collect();
        let (model, fp) = params.build(&vars, stats);
        let out = segment_loss(seg, &model, &fp, loss, adapt)?;
        let g = out.loss.grad();
        Ok((out.loss.value(), g.wrt_slice(&vars), out.capped))
    })
}

/// Exact gradient of `sum_i L_i` over the batch. Segments are evaluated in
/// parallel, each on its worker's own tape; the reduction runs in batch order.
pub fn meta_gradient(
    batch: &[&TrajectorySegment],
    params: &MetaParams,
    stats: &FeatureStats,
    loss: &LossConfig,
    adapt: bool,
) -> Result<MetaGradient> {
    if batch.is_empty() {
        return Err(Error::Config("meta-gradient needs a non-empty batch".into()));
    }
    let flat = params.to_flat();
    let results: Vec<Result<(f64, Vec<f64>, bool)>> = batch
        .par_iter()
        .map(|seg| segment_value_and_grad(seg, params, &flat, stats, loss, adapt))
        .collect();
    let mut out = MetaGradient {
        loss_sum: 0.0,
        losses: Vec::with_capacity(batch.len()),
        grad: vec![0.0; flat.len()],
        capped: 0,
    };
    for r in results {
        let (l, g, capped) = r?;
        out.loss_sum += l;
        out.losses.push(l);
        out.capped += capped as usize;
        for (a, b) in out.grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let bad = out.grad.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::NonFiniteGradient { count: bad });
    }
    Ok(out)
}

/// Adam with one learning rate per parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], lr: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr[i] * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub tau: usize,
    pub horizon: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub lr_network: f64,
    pub lr_parametric: f64,
    pub lr_filter: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            tau: 200,
            horizon: 100,
            stride: 100,
            batch_size: 8,
            epochs: 20,
            pretrain_epochs: 5,
            lr_network: 1e-3,
            lr_parametric: 1e-3,
            lr_filter: 1e-2,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl MetaTrainConfig {
    pub fn full_scale() -> Self {
        Self {
            tau: 1000,
            horizon: 250,
            stride: 250,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self, h: usize) -> Result<()> {
        if h == 0 || self.tau % h != 0 {
            return Err(Error::Config(format!("tau = {} must be a multiple of h = {h}", self.tau)));
        }
        if self.horizon == 0 || self.stride == 0 || self.batch_size == 0 {
            return Err(Error::Config("horizon, stride and batch size must be positive".into()));
        }
        if self.pretrain_epochs > self.epochs {
            return Err(Error::Config("pretraining epochs exceed total epochs".into()));
        }
        Ok(())
    }

    fn learning_rates(&self, params: &MetaParams) -> Vec<f64> {
        let mut lr = vec![0.0; params.to_flat().len()];
        for (g, r) in params.ranges() {
            let v = match g {
                Group::Network => self.lr_network,
                Group::Parametric => self.lr_parametric,
                _ => self.lr_filter,
            };
            lr[r].iter_mut().for_each(|x| *x = v);
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub adapt: bool,
    pub mean_loss: f64,
    pub capped: usize,
    pub rejected_batches: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MetaParams,
    pub history: Vec<EpochRecord>,
}

/// Train with `pretrain_epochs` of `theta = 0` followed by full unrolling.
/// With `adapt_epochs = false` every epoch keeps `theta = 0` (the
/// non-adaptive baseline).
pub fn train(
    segments: &[TrajectorySegment],
    init: MetaParams,
    stats: &FeatureStats,
    cfg: &MetaTrainConfig,
    adapt_epochs: bool,
) -> Result<TrainOutcome> {
    if segments.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    cfg.validate(init.h)?;
    let mut params = init;
    let mut flat = params.to_flat();
    let lr = cfg.learning_rates(&params);
    let mut adam = Adam::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let adapt = adapt_epochs && epoch >= cfg.pretrain_epochs;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut capped = 0;
        let mut rejected = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrajectorySegment> = chunk.iter().map(|&i| &segments[i]).collect();
            match meta_gradient(&batch, &params, stats, &cfg.loss, adapt) {
                Ok(g) => {
                    total += g.loss_sum;
                    count += batch.len();
                    capped += g.capped;
                    let scale = 1.0 / batch.len() as f64;
                    let grad: Vec<f64> = g.grad.iter().map(|v| v * scale).collect();
                    adam.step(&mut flat, &grad, &lr);
                    params = params.with_flat(&flat);
                }
                Err(e) => {
                    log::warn!("epoch {epoch}: batch rejected: {e}");
                    rejected += 1;
                }
            }
        }
        let rec = EpochRecord {
            epoch,
            adapt,
            mean_loss: if count > 0 { total / count as f64 } else { f64::NAN },
            capped,
            rejected_batches: rejected,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>3} {} loss {:.5} (capped {}, rejected {})",
            epoch,
            if adapt { "meta" } else { "pre " },
            rec.mean_loss,
            capped,
            rejected
        );
        history.push(rec);
    }
    Ok(TrainOutcome { params, history })
}
