//! Additive augmented physics-based model:
//! `f(x; theta) = phi0 * F x + phi1 * gamma(x; omega)`, where `gamma` is a
//! 4 -> 5 (ReLU) -> 4 (linear) network.

use nalgebra::{Matrix4, SMatrix, SVector, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::truth::cv_matrix;

pub const STATE_DIM: usize = 4;
pub const HIDDEN: usize = 5;
/// `phi0, phi1` + `W1` (5x4) + `b1` (5) + `W2` (4x5) + `b2` (4).
pub const PARAM_LEN: usize = 2 + HIDDEN * STATE_DIM + HIDDEN + STATE_DIM * HIDDEN + STATE_DIM;

pub type HiddenWeights = SMatrix<f64, HIDDEN, STATE_DIM>;
pub type OutputWeights = SMatrix<f64, STATE_DIM, HIDDEN>;
pub type HiddenBias = SVector<f64, HIDDEN>;

/// Parameter vector `theta = {phi0, phi1, omega}`.
///
/// The flattened layout is `[phi0, phi1, W1 (row-major), b1, W2 (row-major), b2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApbmParams {
    pub phi0: f64,
    pub phi1: f64,
    pub w1: HiddenWeights,
    pub b1: HiddenBias,
    pub w2: OutputWeights,
    pub b2: Vector4<f64>,
}

impl ApbmParams {
    /// The anchor at which the APBM reduces to the physics model for every input.
    pub fn theta_bar() -> Self {
        Self {
            phi0: 1.0,
            phi1: 0.0,
            w1: HiddenWeights::zeros(),
            b1: HiddenBias::zeros(),
            w2: OutputWeights::zeros(),
            b2: Vector4::zeros(),
        }
    }

    /// Starts at the physics model with small random weights and zero biases.
    pub fn initial<R: Rng + ?Sized>(rng: &mut R, weight_std: f64) -> Self {
        let mut p = Self::theta_bar();
        if weight_std > 0.0 {
            let dist = Normal::new(0.0, weight_std).expect("positive std");
            // Row-major to match the flattened layout.
            for i in 0..HIDDEN {
                for j in 0..STATE_DIM {
                    p.w1[(i, j)] = dist.sample(rng);
                }
            }
            for i in 0..STATE_DIM {
                for j in 0..HIDDEN {
                    p.w2[(i, j)] = dist.sample(rng);
                }
            }
        }
        p
    }

    pub fn flatten(&self) -> [f64; PARAM_LEN] {
        let mut out = [0.0; PARAM_LEN];
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut [f64]) {
        assert_eq!(out.len(), PARAM_LEN);
        out[0] = self.phi0;
        out[1] = self.phi1;
        let mut idx = 2;
        for i in 0..HIDDEN {
            for j in 0..STATE_DIM {
                out[idx] = self.w1[(i, j)];
                idx += 1;
            }
        }
        for i in 0..HIDDEN {
            out[idx] = self.b1[i];
            idx += 1;
        }
        for i in 0..STATE_DIM {
            for j in 0..HIDDEN {
                out[idx] = self.w2[(i, j)];
                idx += 1;
            }
        }
        for i in 0..STATE_DIM {
            out[idx] = self.b2[i];
            idx += 1;
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_LEN {
            return Err(Error::Dimension {
                context: "ApbmParams::from_slice",
                expected: PARAM_LEN.to_string(),
                actual: v.len().to_string(),
            });
        }
        let mut p = Self::theta_bar();
        p.phi0 = v[0];
        p.phi1 = v[1];
        let mut it = v[2..].iter().copied();
        for i in 0..HIDDEN {
            for j in 0..STATE_DIM {
                p.w1[(i, j)] = it.next().unwrap();
            }
        }
        for i in 0..HIDDEN {
            p.b1[i] = it.next().unwrap();
        }
        for i in 0..STATE_DIM {
            for j in 0..HIDDEN {
                p.w2[(i, j)] = it.next().unwrap();
            }
        }
        for i in 0..STATE_DIM {
            p.b2[i] = it.next().unwrap();
        }
        Ok(p)
    }

    /// `kappa * self + (1 - kappa) * other`, elementwise.
    pub fn lerp(&self, other: &Self, kappa: f64) -> Self {
        let mix = |a: f64, b: f64| kappa * a + (1.0 - kappa) * b;
        Self {
            phi0: mix(self.phi0, other.phi0),
            phi1: mix(self.phi1, other.phi1),
            w1: self.w1.zip_map(&other.w1, mix),
            b1: self.b1.zip_map(&other.b1, mix),
            w2: self.w2.zip_map(&other.w2, mix),
            b2: self.b2.zip_map(&other.b2, mix),
        }
    }
}

/// `W2 relu(W1 x + b1) + b2`.
pub fn nn_forward(
    x: &Vector4<f64>,
    w1: &HiddenWeights,
    b1: &HiddenBias,
    w2: &OutputWeights,
    b2: &Vector4<f64>,
) -> Vector4<f64> {
    let hidden = (w1 * x + b1).map(|v| v.max(0.0));
    w2 * hidden + b2
}

/// Physics model and its augmentation for a fixed sampling period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Apbm {
    pub f: Matrix4<f64>,
}

impl Apbm {
    pub fn constant_velocity(ts: f64) -> Self {
        Self { f: cv_matrix(ts) }
    }

    /// Physics-based prediction `F x`.
    pub fn pbm(&self, x: &Vector4<f64>) -> Vector4<f64> {
        self.f * x
    }

    /// Augmented prediction. Process noise is owned by the filter, not added here.
    pub fn transition(&self, x: &Vector4<f64>, theta: &ApbmParams) -> Vector4<f64> {
        let physics = self.f * x * theta.phi0;
        if theta.phi1 == 0.0 {
            return physics;
        }
        physics + nn_forward(x, &theta.w1, &theta.b1, &theta.w2, &theta.b2) * theta.phi1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn layout_has_51_entries() {
        assert_eq!(PARAM_LEN, 51);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = ApbmParams::theta_bar();
        let out = nn_forward(&Vector4::new(3.0, -1.0, 2.0, 7.0), &p.w1, &p.b1, &p.w2, &p.b2);
        assert_eq!(out, Vector4::zeros());
    }

    #[test]
    fn relu_dead_zone_passes_output_bias() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut p = ApbmParams::initial(&mut rng, 1.0);
        p.w1 = HiddenWeights::zeros();
        p.b1 = HiddenBias::repeat(-1.0);
        p.b2 = Vector4::new(0.5, -2.0, 1.5, 4.0);
        let out = nn_forward(&Vector4::new(1.0, 2.0, 3.0, 4.0), &p.w1, &p.b1, &p.w2, &p.b2);
        assert_eq!(out, p.b2);
    }

    /// Scalar-loop evaluation over the flattened layout.
    fn forward_oracle(v: &[f64], x: [f64; 4]) -> [f64; 4] {
        let w1 = &v[2..22];
        let b1 = &v[22..27];
        let w2 = &v[27..47];
        let b2 = &v[47..51];
        let mut h = [0.0; 5];
        for i in 0..5 {
            let mut acc = b1[i];
            for j in 0..4 {
                acc += w1[i * 4 + j] * x[j];
            }
            h[i] = if acc > 0.0 { acc } else { 0.0 };
        }
        let mut out = [0.0; 4];
        for i in 0..4 {
            let mut acc = b2[i];
            for j in 0..5 {
                acc += w2[i * 5 + j] * h[j];
            }
            out[i] = acc;
        }
        out
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let dist = Normal::new(0.0, 0.7).unwrap();
        let v: Vec<f64> = (0..PARAM_LEN).map(|_| dist.sample(&mut rng)).collect();
        let p = ApbmParams::from_slice(&v).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let got = nn_forward(&Vector4::from(x), &p.w1, &p.b1, &p.w2, &p.b2);
        let want = forward_oracle(&v, x);
        for i in 0..4 {
            assert!((got[i] - want[i]).abs() <= 1e-12 * want[i].abs().max(1.0));
        }
    }

    #[test]
    fn transition_examples() {
        let m = Apbm::constant_velocity(1.0);
        let x = Vector4::new(50.0, 0.0, 50.0, 0.0);
        assert_eq!(m.transition(&x, &ApbmParams::theta_bar()), x);

        let x = Vector4::new(0.0, 1.0, 0.0, 2.0);
        assert_eq!(
            m.transition(&x, &ApbmParams::theta_bar()),
            Vector4::new(1.0, 1.0, 2.0, 2.0)
        );

        let mut p = ApbmParams::theta_bar();
        p.phi0 = 0.5;
        p.phi1 = 2.0;
        p.b2 = Vector4::new(1.0, 0.0, 0.0, 0.0);
        let out = m.transition(&Vector4::new(2.0, 0.0, 0.0, 0.0), &p);
        assert_eq!(out, Vector4::new(3.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn pbm_examples() {
        let m = Apbm::constant_velocity(1.0);
        assert_eq!(m.pbm(&Vector4::zeros()), Vector4::zeros());
        assert_eq!(
            m.pbm(&Vector4::new(0.0, 1.0, 0.0, 0.0)),
            Vector4::new(1.0, 1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn from_slice_rejects_wrong_length() {
        assert!(ApbmParams::from_slice(&[0.0; 50]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trips(v in proptest::collection::vec(-1e6f64..1e6, PARAM_LEN)) {
            let p = ApbmParams::from_slice(&v).unwrap();
            prop_assert_eq!(p.flatten().to_vec(), v);
        }

        #[test]
        fn theta_bar_reproduces_physics(x in proptest::array::uniform4(-1e4f64..1e4), ts in 0.01f64..10.0) {
            let m = Apbm::constant_velocity(ts);
            let x = Vector4::from(x);
            prop_assert_eq!(m.transition(&x, &ApbmParams::theta_bar()), m.pbm(&x));
        }

        #[test]
        fn affine_in_mixing_weights(
            seed in 0u64..1000,
            x in proptest::array::uniform4(-10f64..10.0),
            a in -3f64..3.0,
            b in -3f64..3.0,
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut p = ApbmParams::initial(&mut rng, 0.5);
            let m = Apbm::constant_velocity(1.0);
            let x = Vector4::from(x);
            p.phi0 = a;
            p.phi1 = b;
            let gamma = nn_forward(&x, &p.w1, &p.b1, &p.w2, &p.b2);
            let want = m.f * x * a + gamma * b;
            prop_assert!((m.transition(&x, &p) - want).amax() <= 1e-9);
        }
    }
}
