//! The hybrid model: parametric dynamics plus the residual network.
//!
//! The network output is interpreted as a body-frame acceleration residual;
//! it is scaled by `diag(m, m, I_z)` into a force/moment before entering the
//! parametric acceleration, so `M^-1 zeta_phys` is the network output itself.

use metadapt_autodiff::{Mat, Real};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    acceleration, actuator_rates, check_finite, idx, integrate, state_jacobian, tire_forces, ControlInput, ParametricParams,
    TerrainInput, VehicleState, DT, STATE_DIM,
};
use crate::error::Result;
use crate::network::{network_input, FeatureStats, LinearHead, NetShape, ResidualNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridModel<S = f64> {
    pub params: ParametricParams<S>,
    pub net: ResidualNet<S>,
    pub stats: FeatureStats,
}

/// Result of one step with the quantities needed for sensitivities.
#[derive(Clone, Debug)]
pub struct StepEval<S> {
    pub next: VehicleState<S>,
    /// Last hidden layer `Phi`.
    pub phi: Vec<S>,
    /// Physical residual wrench `diag(m, m, I_z) zeta`.
    pub wrench: [S; 3],
}

/// `d x_next / d theta`: only the velocity rows are non-zero.
pub fn theta_jacobian<S: Real>(zeta_jac: &Mat<S>) -> Mat<S> {
    let n = zeta_jac.cols();
    let mut f = Mat::zeros(STATE_DIM, n);
    for (o, &row) in idx::VELOCITY.iter().enumerate() {
        for c in 0..n {
            f[(row, c)] = zeta_jac[(o, c)] * DT;
        }
    }
    f
}

impl HybridModel<f64> {
    pub fn new(params: ParametricParams, net: ResidualNet, stats: FeatureStats) -> Self {
        Self { params, net, stats }
    }

    /// Purely parametric model: zero network.
    pub fn parametric(params: ParametricParams, shape: NetShape) -> Self {
        Self::new(params, ResidualNet::zeros(shape), FeatureStats::identity(shape.input))
    }

    pub fn lift<S: Real>(&self) -> HybridModel<S> {
        HybridModel {
            params: self.params.lift(),
            net: self.net.lift(),
            stats: self.stats.clone(),
        }
    }

    /// `f(x, u, y; theta)`; fails on a non-finite result.
    pub fn step(&self, x: &VehicleState, u: &ControlInput, y: &TerrainInput, theta: &[f64]) -> Result<VehicleState> {
        let next = self.step_eval(x, u, y, theta).next;
        check_finite(&next)?;
        Ok(next)
    }

    /// Collapse the ensemble for repeated rollouts with a fixed `theta`.
    pub fn rollout_model(&self, theta: &[f64]) -> RolloutModel<'_> {
        RolloutModel {
            model: self,
            head: self.net.collapse(theta),
        }
    }
}

impl<S: Real> HybridModel<S> {
    pub fn n_theta(&self) -> usize {
        self.net.shape.n_theta()
    }

    pub fn values(&self) -> HybridModel<f64> {
        HybridModel {
            params: ParametricParams::from_slice(&self.params.to_vec().iter().map(|v| v.value()).collect::<Vec<_>>()),
            net: self.net.values(),
            stats: self.stats.clone(),
        }
    }

    fn wrench(&self, zeta: &[S]) -> [S; 3] {
        [zeta[0] * self.params.mass, zeta[1] * self.params.mass, zeta[2] * self.params.yaw_inertia]
    }

    pub fn step_eval(&self, x: &VehicleState<S>, u: &ControlInput, y: &TerrainInput, theta: &[S]) -> StepEval<S> {
        let p = &self.params;
        let forces = tire_forces(x, p);
        let eta = self.stats.apply(&network_input(x, u, y, &forces));
        let phi = self.net.features(&eta);
        let zeta = self.net.residual_from_features(&phi, theta);
        let wrench = self.wrench(&zeta);
        let accel = acceleration(x, y, &forces, wrench, p);
        let next = integrate(x, accel, actuator_rates(x, u, p));
        StepEval { next, phi, wrench }
    }

    /// One step plus `F^x` (residual frozen) and `F^theta`.
    pub fn step_sensitivities(
        &self,
        x: &VehicleState<S>,
        u: &ControlInput,
        y: &TerrainInput,
        theta: &[S],
    ) -> (VehicleState<S>, [[S; STATE_DIM]; STATE_DIM], Mat<S>) {
        let ev = self.step_eval(x, u, y, theta);
        let fx = state_jacobian(x, u, y, ev.wrench, &self.params);
        let ft = theta_jacobian(&self.net.residual_param_jacobian(&ev.phi));
        (ev.next, fx, ft)
    }
}

/// Fast `f64` model for sampling: hidden layers plus a collapsed head.
pub struct RolloutModel<'a> {
    model: &'a HybridModel,
    head: LinearHead,
}

impl RolloutModel<'_> {
    pub fn params(&self) -> &ParametricParams {
        &self.model.params
    }

    pub fn step(&self, x: &VehicleState, u: &ControlInput, y: &TerrainInput) -> VehicleState {
        let m = self.model;
        let p = &m.params;
        let forces = tire_forces(x, p);
        let eta = m.stats.apply(&network_input(x, u, y, &forces));
        let zeta = self.head.apply(&m.net.features(&eta));
        let accel = acceleration(x, y, &forces, m.wrench(&zeta), p);
        integrate(x, accel, actuator_rates(x, u, p))
    }
}
