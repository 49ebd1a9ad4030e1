//! Feed-forward residual network with an adaptable last-layer ensemble.
//!
//! `zeta(eta) = (phi_w + theta_w)^T W Phi(eta) + phi_b + theta_b`, where `Phi`
//! is the output of two tanh hidden layers and `W` stacks `n_w` last-layer
//! matrices. The output is linear in `theta = [theta_w, theta_b]`.

use metadapt_autodiff::{Mat, Real};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, TerrainInput, VehicleState, WheelForces, CONTROL_DIM, STATE_DIM, TERRAIN_DIM};
use crate::error::{Error, Result};

/// Width of `eta = [x, u, y, F]`.
pub const ETA_DIM: usize = STATE_DIM + CONTROL_DIM + TERRAIN_DIM + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: [usize; 2],
    /// Ensemble size `n_w`.
    pub ensemble: usize,
    pub output: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        Self {
            input: ETA_DIM,
            hidden: [32, 32],
            ensemble: 8,
            output: 3,
        }
    }
}

impl NetShape {
    /// Dimension of `Phi`.
    pub fn features(&self) -> usize {
        self.hidden[1]
    }

    pub fn n_theta(&self) -> usize {
        self.ensemble + self.output
    }

    pub fn n_params(&self) -> usize {
        let [h1, h2] = self.hidden;
        h1 * self.input + h1 + h2 * h1 + h2 + self.ensemble + self.ensemble * self.output * h2 + self.output
    }
}

/// Per-feature standardization `(eta - mean) * inv_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub inv_scale: Vec<f64>,
}

/// Entries of `eta` excluded from the network: global x, y and yaw. The
/// residual should not depend on where on the map the vehicle happens to be.
pub const MASKED_FEATURES: [usize; 3] = [0, 1, 2];

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        let mut s = Self {
            mean: vec![0.0; dim],
            inv_scale: vec![1.0; dim],
        };
        s.mask();
        s
    }

    /// Mean and inverse standard deviation over samples; near-constant
    /// features get unit scale.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for s in samples {
            assert_eq!(s.len(), dim);
            n += 1;
            for i in 0..dim {
                let d = s[i] - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (s[i] - mean[i]);
            }
        }
        let inv_scale = m2
            .iter()
            .map(|m| {
                let sd = if n > 1 { (m / (n - 1) as f64).sqrt() } else { 0.0 };
                if sd > 1e-6 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        let mut s = Self { mean, inv_scale };
        s.mask();
        s
    }

    fn mask(&mut self) {
        for &i in &MASKED_FEATURES {
            self.mean[i] = 0.0;
            self.inv_scale[i] = 0.0;
        }
    }

    pub fn apply<S: Real>(&self, eta: &[S]) -> Vec<S> {
        eta.iter()
            .zip(self.mean.iter().zip(&self.inv_scale))
            .map(|(v, (m, k))| if *k == 0.0 { S::zero() } else { (*v - *m) * *k })
            .collect()
    }
}

/// Concatenate `[x, u, y, F]`.
pub fn network_input<S: Real>(x: &VehicleState<S>, u: &ControlInput, y: &TerrainInput, f: &WheelForces<S>) -> [S; ETA_DIM] {
    let mut eta = [S::zero(); ETA_DIM];
    eta[..STATE_DIM].copy_from_slice(&x.to_array());
    for (k, v) in u.to_array().iter().enumerate() {
        eta[STATE_DIM + k] = S::cst(*v);
    }
    for (k, v) in y.to_array().iter().enumerate() {
        eta[STATE_DIM + CONTROL_DIM + k] = S::cst(*v);
    }
    eta[STATE_DIM + CONTROL_DIM + TERRAIN_DIM..].copy_from_slice(&f.to_array());
    eta
}

/// Network weights `phi`: hidden layers, ensemble mixing `phi_w`, ensemble
/// tensor `W` and output bias `phi_b`. Matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualNet<S = f64> {
    pub shape: NetShape,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
    /// `phi_w`, length `n_w`.
    pub mix: Vec<S>,
    /// `W[k][o][i]` flattened, shape `n_w x n_out x n_in`.
    pub basis: Vec<S>,
    /// `phi_b`, length `n_out`.
    pub bias: Vec<S>,
}

impl ResidualNet<f64> {
    pub fn zeros(shape: NetShape) -> Self {
        Self::from_flat(shape, &vec![0.0; shape.n_params()])
    }

    /// Scaled Gaussian initialization; the ensemble starts small so the
    /// untrained residual is close to zero.
    pub fn init(shape: NetShape, rng: &mut impl Rng) -> Self {
        let [h1, h2] = shape.hidden;
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let w1 = gauss(h1 * shape.input, 1.0 / (shape.input as f64).sqrt());
        let w2 = gauss(h2 * h1, 1.0 / (h1 as f64).sqrt());
        let basis = gauss(shape.ensemble * shape.output * h2, 0.1 / (h2 as f64).sqrt());
        Self {
            shape,
            w1,
            b1: vec![0.0; h1],
            w2,
            b2: vec![0.0; h2],
            mix: vec![1.0 / shape.ensemble as f64; shape.ensemble],
            basis,
            bias: vec![0.0; shape.output],
        }
    }

    pub fn lift<S: Real>(&self) -> ResidualNet<S> {
        ResidualNet::from_flat(self.shape, &self.to_flat().into_iter().map(S::cst).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_flat().len() != self.shape.n_params() {
            return Err(Error::Shape(format!(
                "network has {} parameters, shape implies {}",
                self.to_flat().len(),
                self.shape.n_params()
            )));
        }
        if self.shape.input != ETA_DIM {
            return Err(Error::Shape(format!("network input width {} != {ETA_DIM}", self.shape.input)));
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("network contains non-finite weights".into()));
        }
        Ok(())
    }

    /// Collapse the ensemble for a fixed `theta` into a single linear head.
    pub fn collapse(&self, theta: &[f64]) -> LinearHead {
        let s = self.shape;
        let nf = s.features();
        assert_eq!(theta.len(), s.n_theta());
        let mut weight = vec![0.0; s.output * nf];
        for k in 0..s.ensemble {
            let c = self.mix[k] + theta[k];
            let wk = &self.basis[k * s.output * nf..(k + 1) * s.output * nf];
            for (a, b) in weight.iter_mut().zip(wk) {
                *a += c * b;
            }
        }
        let bias = (0..s.output).map(|o| self.bias[o] + theta[s.ensemble + o]).collect();
        LinearHead { weight, bias }
    }
}

impl<S: Real> ResidualNet<S> {
    pub fn to_flat(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.shape.n_params());
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.mix, &self.basis, &self.bias] {
            v.extend_from_slice(part);
        }
        v
    }

    pub fn from_flat(shape: NetShape, flat: &[S]) -> Self {
        assert_eq!(flat.len(), shape.n_params(), "flat parameter vector length");
        let [h1, h2] = shape.hidden;
        let sizes = [
            h1 * shape.input,
            h1,
            h2 * h1,
            h2,
            shape.ensemble,
            shape.ensemble * shape.output * h2,
            shape.output,
        ];
        let mut parts = Vec::with_capacity(7);
        let mut at = 0;
        for n in sizes {
            parts.push(flat[at..at + n].to_vec());
            at += n;
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("seven parts");
        Self {
            shape,
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            mix: next(),
            basis: next(),
            bias: next(),
        }
    }

    pub fn values(&self) -> ResidualNet<f64> {
        ResidualNet::from_flat(self.shape, &self.to_flat().iter().map(|v| v.value()).collect::<Vec<_>>())
    }

    /// `Phi(eta)` for a standardized input.
    pub fn features(&self, eta: &[S]) -> Vec<S> {
        let s = self.shape;
        let [h1, h2] = s.hidden;
        assert_eq!(eta.len(), s.input);
        let a1: Vec<S> = (0..h1)
            .map(|r| (S::dot(&self.w1[r * s.input..(r + 1) * s.input], eta) + self.b1[r]).tanh())
            .collect();
        (0..h2)
            .map(|r| (S::dot(&self.w2[r * h1..(r + 1) * h1], &a1) + self.b2[r]).tanh())
            .collect()
    }

    /// `W_k Phi` for every ensemble member, `n_w` vectors of length `n_out`.
    pub fn basis_outputs(&self, phi: &[S]) -> Vec<Vec<S>> {
        let s = self.shape;
        let nf = s.features();
        (0..s.ensemble)
            .map(|k| {
                (0..s.output)
                    .map(|o| {
                        let row = (k * s.output + o) * nf;
                        S::dot(&self.basis[row..row + nf], phi)
                    })
                    .collect()
            })
            .collect()
    }

    /// `zeta` from precomputed features.
    pub fn residual_from_features(&self, phi: &[S], theta: &[S]) -> Vec<S> {
        let s = self.shape;
        assert_eq!(theta.len(), s.n_theta());
        let b = self.basis_outputs(phi);
        let coeff: Vec<S> = (0..s.ensemble).map(|k| self.mix[k] + theta[k]).collect();
        (0..s.output)
            .map(|o| {
                let col: Vec<S> = b.iter().map(|bk| bk[o]).collect();
                S::dot(&coeff, &col) + self.bias[o] + theta[s.ensemble + o]
            })
            .collect()
    }

    pub fn residual(&self, eta: &[S], theta: &[S]) -> Vec<S> {
        self.residual_from_features(&self.features(eta), theta)
    }

    /// `d zeta / d theta` (`n_out x n_theta`): the `W_k Phi` columns followed
    /// by an identity block. Independent of `theta`.
    pub fn residual_param_jacobian(&self, phi: &[S]) -> Mat<S> {
        let s = self.shape;
        let b = self.basis_outputs(phi);
        Mat::from_fn(s.output, s.n_theta(), |o, c| {
            if c < s.ensemble {
                b[c][o]
            } else if c - s.ensemble == o {
                S::one()
            } else {
                S::zero()
            }
        })
    }
}

/// Collapsed output layer `weight * Phi + bias` for a fixed `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        let nf = phi.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(o, b)| b + f64::dot(&self.weight[o * nf..(o + 1) * nf], phi))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> ResidualNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = ResidualNet::init(NetShape::default(), &mut rng);
        // make every block non-trivial
        for v in net.b1.iter_mut().chain(net.b2.iter_mut()).chain(net.bias.iter_mut()) {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in net.mix.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        net
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-r..r)).collect()
    }

    #[test]
    fn zero_network_has_constant_features() {
        let net = ResidualNet::zeros(NetShape::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = net.features(&random_vec(&mut rng, ETA_DIM, 3.0));
        assert!(phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardized_mean_gives_bias_preactivation() {
        let net = random_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random_vec(&mut rng, ETA_DIM, 5.0);
        let mut stats = FeatureStats::fit([raw.as_slice(), &random_vec(&mut rng, ETA_DIM, 5.0)], ETA_DIM);
        stats.mean = raw.clone();
        let eta = stats.apply(&raw);
        assert!(eta.iter().all(|v| *v == 0.0));
        let pre: Vec<f64> = (0..32).map(|r| f64::dot(&net.w1[r * ETA_DIM..(r + 1) * ETA_DIM], &eta) + net.b1[r]).collect();
        assert_eq!(pre, net.b1);
    }

    #[test]
    fn pose_features_are_masked() {
        let stats = FeatureStats::identity(ETA_DIM);
        let mut a = vec![0.3; ETA_DIM];
        let b = stats.apply(&a);
        a[0] = 100.0;
        a[1] = -40.0;
        a[2] = 2.0;
        assert_eq!(stats.apply(&a), b);
    }

    #[test]
    fn features_match_matrix_recomputation() {
        let net = random_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eta = random_vec(&mut rng, ETA_DIM, 2.0);
        let w1 = DMatrix::from_row_slice(32, ETA_DIM, &net.w1);
        let w2 = DMatrix::from_row_slice(32, 32, &net.w2);
        let h1 = (w1 * DVector::from_vec(eta.clone()) + DVector::from_vec(net.b1.clone())).map(f64::tanh);
        let h2 = (w2 * h1 + DVector::from_vec(net.b2.clone())).map(f64::tanh);
        let phi = net.features(&eta);
        for (a, b) in phi.iter().zip(h2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_theta_gives_baseline_output() {
        let net = random_net(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let phi = net.features(&random_vec(&mut rng, ETA_DIM, 2.0));
        let z = net.residual_from_features(&phi, &[0.0; 11]);
        let b = net.basis_outputs(&phi);
        for o in 0..3 {
            let expect: f64 = (0..8).map(|k| net.mix[k] * b[k][o]).sum::<f64>() + net.bias[o];
            assert!((z[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_only_path() {
        let mut net = random_net(5);
        net.basis.iter_mut().for_each(|v| *v = 0.0);
        net.bias = vec![0.0; 3];
        let mut theta = vec![0.7; 11];
        theta[8..].copy_from_slice(&[1.0, -2.0, 0.5]);
        let z = net.residual(&vec![0.1; ETA_DIM], &theta);
        assert_eq!(z, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn residual_matches_tensor_contraction() {
        let net = random_net(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eta = random_vec(&mut rng, ETA_DIM, 2.0);
        let theta = random_vec(&mut rng, 11, 1.0);
        let phi = net.features(&eta);
        let z = net.residual(&eta, &theta);
        for o in 0..3 {
            let mut acc = net.bias[o] + theta[8 + o];
            for k in 0..8 {
                for i in 0..32 {
                    acc += (net.mix[k] + theta[k]) * net.basis[(k * 3 + o) * 32 + i] * phi[i];
                }
            }
            assert!((z[o] - acc).abs() < 1e-12);
        }
        let head = net.collapse(&theta).apply(&phi);
        for o in 0..3 {
            assert!((head[o] - z[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn param_jacobian_special_cases() {
        let net = random_net(7);
        let j = net.residual_param_jacobian(&[0.0; 32]);
        for o in 0..3 {
            for c in 0..11 {
                let expect = if c >= 8 && c - 8 == o { 1.0 } else { 0.0 };
                assert_eq!(j[(o, c)], expect);
            }
        }
        let shape = NetShape {
            ensemble: 1,
            ..Default::default()
        };
        let mut single = ResidualNet::zeros(shape);
        single.basis = (0..96).map(|i| i as f64 * 0.01).collect();
        let phi = vec![0.5; 32];
        let j = single.residual_param_jacobian(&phi);
        for o in 0..3 {
            let c: f64 = (0..32).map(|i| single.basis[o * 32 + i] * 0.5).sum();
            assert!((j[(o, 0)] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn param_jacobian_matches_finite_differences() {
        let net = random_net(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let eta = random_vec(&mut rng, ETA_DIM, 2.0);
        let theta = random_vec(&mut rng, 11, 1.0);
        let j = net.residual_param_jacobian(&net.features(&eta));
        let h = 1e-6;
        for c in 0..11 {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[c] += h;
            b[c] -= h;
            let za = net.residual(&eta, &a);
            let zb = net.residual(&eta, &b);
            for o in 0..3 {
                let fd = (za[o] - zb[o]) / (2.0 * h);
                assert!((fd - j[(o, c)]).abs() <= 1e-6 * (1.0 + fd.abs()), "({o},{c})");
            }
        }
    }

    #[test]
    fn flat_roundtrip() {
        let net = random_net(9);
        let flat = net.to_flat();
        assert_eq!(flat.len(), NetShape::default().n_params());
        assert_eq!(ResidualNet::from_flat(net.shape, &flat), net);
    }

    #[test]
    fn feature_stats_match_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| random_vec(&mut rng, 5, 3.0)).collect();
        let s = FeatureStats::fit(rows.iter().map(|r| r.as_slice()), 5);
        for i in 3..5 {
            let mean: f64 = rows.iter().map(|r| r[i]).sum::<f64>() / 50.0;
            let var: f64 = rows.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / 49.0;
            assert!((s.mean[i] - mean).abs() < 1e-12);
            assert!((s.inv_scale[i] - 1.0 / var.sqrt()).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residual_is_linear_in_theta(seed in 0u64..1000, scale in 0.1f64..5.0) {
            let net = random_net(seed % 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eta = random_vec(&mut rng, ETA_DIM, 2.0);
            let theta = random_vec(&mut rng, 11, scale);
            let phi = net.features(&eta);
            let z = net.residual_from_features(&phi, &theta);
            let z0 = net.residual_from_features(&phi, &[0.0; 11]);
            let j = net.residual_param_jacobian(&phi);
            let jt = j.matvec(&theta);
            for o in 0..3 {
                prop_assert!((z[o] - z0[o] - jt[o]).abs() < 1e-10);
            }
            let j2 = net.residual_param_jacobian(&phi);
            prop_assert_eq!(j, j2);
        }

        #[test]
        fn ensemble_permutation_is_a_symmetry(seed in 0u64..1000, shift in 1usize..8) {
            let net = random_net(seed % 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eta = random_vec(&mut rng, ETA_DIM, 2.0);
            let theta = random_vec(&mut rng, 11, 1.0);
            let perm: Vec<usize> = (0..8).map(|k| (k + shift) % 8).collect();
            let mut p = net.clone();
            let mut pt = theta.clone();
            for (k, &src) in perm.iter().enumerate() {
                p.mix[k] = net.mix[src];
                pt[k] = theta[src];
                p.basis[k * 96..(k + 1) * 96].copy_from_slice(&net.basis[src * 96..(src + 1) * 96]);
            }
            let a = net.residual(&eta, &theta);
            let b = p.residual(&eta, &pt);
            for o in 0..3 {
                prop_assert!((a[o] - b[o]).abs() < 1e-12);
            }
        }
    }
}
