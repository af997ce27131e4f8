//! Controlled SDE process models `dx = (f(x) + g(x)u) dt + σ(x) dW` and
//! discrete observation models `z = ℓ(x) + v`.
//!
//! Evaluation is slice based and writes into caller buffers so the particle
//! filter can run allocation-free over thousands of particles.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Result};

/// The three SDE fields evaluated at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeFields {
    pub drift: DVector<f64>,
    pub input_matrix: DMatrix<f64>,
    pub diffusion: DMatrix<f64>,
}

pub trait ProcessModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Brownian dimension. Diffusion is diagonal, so this equals `state_dim`.
    fn noise_dim(&self) -> usize {
        self.state_dim()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// `g(x)` written row-major (`state_dim × input_dim`).
    fn input_matrix(&self, x: &[f64], out: &mut [f64]);

    /// Diagonal of `σ(x)`.
    fn diffusion_diag(&self, x: &[f64], out: &mut [f64]);

    /// `f(x) + g(x) u`.
    fn velocity(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        let m = self.input_dim();
        self.drift(x, out);
        let mut g = vec![0.0; n * m];
        self.input_matrix(x, &mut g);
        for (r, o) in out.iter_mut().enumerate() {
            *o += (0..m).map(|c| g[r * m + c] * u[c]).sum::<f64>();
        }
    }

    fn fields(&self, x: &[f64]) -> Result<SdeFields> {
        let n = self.state_dim();
        let m = self.input_dim();
        check_dim("state", n, x.len())?;
        let mut f = vec![0.0; n];
        let mut g = vec![0.0; n * m];
        let mut s = vec![0.0; n];
        self.drift(x, &mut f);
        self.input_matrix(x, &mut g);
        self.diffusion_diag(x, &mut s);
        Ok(SdeFields {
            drift: DVector::from_vec(f),
            input_matrix: DMatrix::from_row_slice(n, m, &g),
            diffusion: DMatrix::from_diagonal(&DVector::from_vec(s)),
        })
    }
}

/// `dx = u dt + σ dW` in one dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator1D {
    pub sigma: f64,
}

impl Default for Integrator1D {
    fn default() -> Self {
        Self { sigma: 0.1 }
    }
}

impl ProcessModel for Integrator1D {
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn input_matrix(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn diffusion_diag(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }
    fn velocity(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }
}

/// Unicycle with state `[p_x, p_y, φ]` and input `[v, ω]`.
///
/// Forward velocity acts along the heading; `ω` drives `φ` directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unicycle {
    pub sigma: [f64; 3],
}

impl Default for Unicycle {
    fn default() -> Self {
        Self {
            sigma: [0.3, 0.3, 0.1],
        }
    }
}

impl ProcessModel for Unicycle {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out.copy_from_slice(&[c, 0.0, s, 0.0, 0.0, 1.0]);
    }
    fn diffusion_diag(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }
    fn velocity(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out[0] = c * u[0];
        out[1] = s * u[0];
        out[2] = u[1];
    }
}

/// Omnidirectional base: body-frame velocities `[v_x, v_y, ω]` rotated into
/// the world frame by the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Omni {
    pub sigma: [f64; 3],
}

impl Default for Omni {
    fn default() -> Self {
        Self {
            sigma: [0.05, 0.05, 0.02],
        }
    }
}

impl ProcessModel for Omni {
    fn state_dim(&self) -> usize {
        3
    }
    fn input_dim(&self) -> usize {
        3
    }
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out.copy_from_slice(&[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
    }
    fn diffusion_diag(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }
    fn velocity(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (s, c) = x[2].sin_cos();
        out[0] = c * u[0] - s * u[1];
        out[1] = s * u[0] + c * u[1];
        out[2] = u[2];
    }
}

/// Closed set of bundled process models, selected from scenario configs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Process {
    Integrator1D(Integrator1D),
    Unicycle(Unicycle),
    Omni(Omni),
}

impl Process {
    fn inner(&self) -> &dyn ProcessModel {
        match self {
            Process::Integrator1D(m) => m,
            Process::Unicycle(m) => m,
            Process::Omni(m) => m,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Process::Integrator1D(_) => "integrator1d",
            Process::Unicycle(_) => "unicycle",
            Process::Omni(_) => "omni",
        }
    }
}

impl ProcessModel for Process {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.inner().drift(x, out)
    }
    fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        self.inner().input_matrix(x, out)
    }
    fn diffusion_diag(&self, x: &[f64], out: &mut [f64]) {
        self.inner().diffusion_diag(x, out)
    }
    fn velocity(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner().velocity(x, u, out)
    }
}

pub trait ObservationModel: Send + Sync {
    fn obs_dim(&self) -> usize;

    /// Sensor update rate in Hz.
    fn rate_hz(&self) -> f64;

    /// Noise-free prediction `ℓ(x)`.
    fn predict(&self, x: &[f64]) -> Vec<f64>;

    /// `ln p(z | x)`; may be `-inf`.
    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64;

    fn likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        self.log_likelihood(z, x).exp()
    }

    fn sample_noise(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let mut z = self.predict(x);
        for (zi, vi) in z.iter_mut().zip(self.sample_noise(rng)) {
            *zi += vi;
        }
        z
    }
}

/// Range to a fixed radio beacon with additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeBeacon {
    pub beacon: [f64; 2],
    /// Standard deviation of the range noise (m).
    pub noise_std: f64,
    pub rate_hz: f64,
}

impl Default for RangeBeacon {
    fn default() -> Self {
        Self {
            beacon: [4.0, 4.0],
            noise_std: 0.3,
            rate_hz: 1.0,
        }
    }
}

impl RangeBeacon {
    pub fn range(&self, x: &[f64]) -> f64 {
        (x[0] - self.beacon[0]).hypot(x[1] - self.beacon[1])
    }

    /// `ℓ(x) + v` with an explicit noise value.
    pub fn observe_with_noise(&self, x: &[f64], v: f64) -> f64 {
        self.range(x) + v
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl ObservationModel for RangeBeacon {
    fn obs_dim(&self) -> usize {
        1
    }
    fn rate_hz(&self) -> f64 {
        self.rate_hz
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        vec![self.range(x)]
    }
    fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        let r = (z[0] - self.range(x)) / self.noise_std;
        -0.5 * r * r - self.noise_std.ln() - LN_SQRT_2PI
    }
    fn sample_noise(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let e: f64 = StandardNormal.sample(rng);
        vec![self.noise_std * e]
    }
}

/// `drift_input_diffusion`: the SDE fields at `x` as dense matrices.
pub fn drift_input_diffusion(model: &dyn ProcessModel, x: &[f64]) -> Result<SdeFields> {
    model.fields(x)
}

/// `p(z | x)` with dimension checks.
pub fn observe_likelihood(model: &dyn ObservationModel, z: &[f64], x: &[f64]) -> Result<f64> {
    check_dim("observation", model.obs_dim(), z.len())?;
    Ok(model.likelihood(z, x))
}
