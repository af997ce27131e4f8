//! Continuous-discrete particle filter.
//!
//! Between measurements every particle is pushed through the process SDE
//! with Euler–Maruyama; at measurement times the particles are reweighted by
//! the observation likelihood and resampled systematically, leaving uniform
//! weights.

use std::io::Write;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::models::{ObservationModel, ProcessModel};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    #[default]
    Systematic,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfConfig {
    pub particles: usize,
    /// Euler–Maruyama substep (s).
    #[serde(default = "default_dt_sde")]
    pub dt_sde: f64,
    #[serde(default)]
    pub resample: ResampleScheme,
    /// Diagnostic only; resampling happens at every update.
    #[serde(default = "default_ess_threshold")]
    pub ess_threshold: f64,
}

fn default_dt_sde() -> f64 {
    0.01
}

fn default_ess_threshold() -> f64 {
    0.5
}

impl PfConfig {
    pub fn new(particles: usize) -> Self {
        Self {
            particles,
            dt_sde: default_dt_sde(),
            resample: ResampleScheme::Systematic,
            ess_threshold: default_ess_threshold(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::InvalidParameter {
                name: "particles",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.dt_sde > 0.0 && self.dt_sde.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "dt_sde",
                reason: format!("must be positive, got {}", self.dt_sde),
            });
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(Error::InvalidParameter {
                name: "ess_threshold",
                reason: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Weighted particle set. States are stored stacked, `N × n_x` row-major,
/// which is exactly the belief vector `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    dim: usize,
    states: Vec<f64>,
    weights: Vec<f64>,
    time: f64,
    uniform: bool,
}

impl BeliefState {
    /// Equally weighted belief from stacked states.
    pub fn from_stacked(dim: usize, states: Vec<f64>) -> Result<Self> {
        if dim == 0 || states.is_empty() || states.len() % dim != 0 {
            return Err(Error::InvalidParameter {
                name: "states",
                reason: format!("length {} is not a positive multiple of {dim}", states.len()),
            });
        }
        let n = states.len() / dim;
        Ok(Self {
            dim,
            states,
            weights: vec![1.0 / n as f64; n],
            time: 0.0,
            uniform: true,
        })
    }

    pub fn from_particles(particles: &[Vec<f64>]) -> Result<Self> {
        let dim = particles.first().map(Vec::len).ok_or(Error::Empty)?;
        let mut states = Vec::with_capacity(dim * particles.len());
        for p in particles {
            check_dim("particle", dim, p.len())?;
            states.extend_from_slice(p);
        }
        Self::from_stacked(dim, states)
    }

    /// Weighted belief. Weights are normalized; they must be finite and
    /// non-negative with a positive sum.
    pub fn with_weights(dim: usize, states: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut b = Self::from_stacked(dim, states)?;
        check_dim("weights", b.len(), weights.len())?;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidParameter {
                name: "weights",
                reason: "must be finite and non-negative".into(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::DegenerateUpdate { sum });
        }
        b.weights = weights.into_iter().map(|w| w / sum).collect();
        let first = b.weights[0];
        b.uniform = b.weights.iter().all(|w| *w == first);
        Ok(b)
    }

    pub fn with_time(mut self, t: f64) -> Self {
        self.time = t;
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn has_uniform_weights(&self) -> bool {
        self.uniform
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.states.chunks_exact(self.dim)
    }

    pub fn stacked(&self) -> &[f64] {
        &self.states
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Advances every particle by `dt` under input `u`.
    ///
    /// Particle `i` draws its noise from substream `i` of `key`, and `key`
    /// moves to its next epoch, so the result does not depend on how the
    /// work is scheduled.
    pub fn propagate(
        &mut self,
        u: &[f64],
        dt: f64,
        model: &dyn ProcessModel,
        cfg: &PfConfig,
        key: &mut StreamKey,
    ) -> Result<()> {
        check_dim("particle state", model.state_dim(), self.dim)?;
        check_dim("input", model.input_dim(), u.len())?;
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be positive, got {dt}"),
            });
        }
        let steps = substeps(dt, cfg.dt_sde);
        let epoch_key = *key;
        key.advance();

        let dim = self.dim;
        let diverged = self
            .states
            .par_chunks_mut(dim)
            .with_min_len(256)
            .enumerate()
            .map(|(i, x)| {
                let mut rng = epoch_key.substream(i as u64);
                euler_maruyama(x, u, &steps, model, &mut rng);
                if x.iter().all(|v| v.is_finite()) {
                    usize::MAX
                } else {
                    i
                }
            })
            .min()
            .unwrap_or(usize::MAX);
        if diverged != usize::MAX {
            return Err(Error::PropagationDiverged { index: diverged });
        }
        self.time += dt;
        Ok(())
    }

    /// Reweights by `p(z | x)` and resamples systematically back to uniform
    /// weights. On error the belief is left untouched.
    pub fn measurement_update<R: Rng + ?Sized>(
        &mut self,
        z: &[f64],
        model: &dyn ObservationModel,
        rng: &mut R,
    ) -> Result<()> {
        check_dim("observation", model.obs_dim(), z.len())?;
        let log_w: Vec<f64> = self
            .particles()
            .zip(&self.weights)
            .map(|(x, w)| model.log_likelihood(z, x) + w.ln())
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateUpdate { sum: 0.0 });
        }
        let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::DegenerateUpdate { sum });
        }
        w.iter_mut().for_each(|v| *v /= sum);

        let offset: f64 = rng.random();
        let idx = systematic_resample(&w, offset);
        let dim = self.dim;
        let mut states = Vec::with_capacity(self.states.len());
        for &i in &idx {
            states.extend_from_slice(&self.states[i * dim..(i + 1) * dim]);
        }
        self.states = states;
        let n = self.len();
        self.weights = vec![1.0 / n as f64; n];
        self.uniform = true;
        Ok(())
    }

    pub fn mean_state(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (x, w) in self.particles().zip(&self.weights) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += w * v;
            }
        }
        mean
    }

    /// Particle with the highest likelihood for `last_z`; ties go to the
    /// lowest index.
    pub fn most_likely_particle(
        &self,
        last_z: Option<&[f64]>,
        model: &dyn ObservationModel,
    ) -> Result<Vec<f64>> {
        let z = last_z.ok_or(Error::NoObservation)?;
        check_dim("observation", model.obs_dim(), z.len())?;
        let mut best = 0;
        let mut best_ll = f64::NEG_INFINITY;
        for (i, x) in self.particles().enumerate() {
            let ll = model.log_likelihood(z, x);
            if ll > best_ll {
                best = i;
                best_ll = ll;
            }
        }
        Ok(self.particle(best).to_vec())
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted sample covariance over the selected coordinates.
    pub fn covariance(&self, coords: &[usize]) -> nalgebra::DMatrix<f64> {
        let mean = self.mean_state();
        let k = coords.len();
        let mut cov = nalgebra::DMatrix::zeros(k, k);
        for (x, w) in self.particles().zip(&self.weights) {
            for a in 0..k {
                let da = x[coords[a]] - mean[coords[a]];
                for b in a..k {
                    cov[(a, b)] += w * da * (x[coords[b]] - mean[coords[b]]);
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                cov[(a, b)] = cov[(b, a)];
            }
        }
        cov
    }

    /// Writes `t, i, x_0..x_{n-1}, w` rows. The header is written when
    /// `header` is set.
    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            let mut cols = vec!["t".to_string(), "i".to_string()];
            cols.extend((0..self.dim).map(|d| format!("x_{d}")));
            cols.push("w".into());
            wr.write_record(&cols)?;
        }
        for (i, (x, w)) in self.particles().zip(&self.weights).enumerate() {
            let mut row = vec![self.time.to_string(), i.to_string()];
            row.extend(x.iter().map(f64::to_string));
            row.push(w.to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Substep lengths covering `dt` exactly: full steps of `h` and a truncated
/// final step.
pub fn substeps(dt: f64, h: f64) -> Vec<f64> {
    let n = ((dt / h) - 1e-9).ceil().max(1.0) as usize;
    let mut steps = vec![h; n];
    steps[n - 1] = dt - h * (n - 1) as f64;
    steps
}

/// Advances `x` in place over the given substeps with input `u` held
/// constant.
pub fn euler_maruyama(
    x: &mut [f64],
    u: &[f64],
    steps: &[f64],
    model: &dyn ProcessModel,
    rng: &mut dyn RngCore,
) {
    let n = x.len();
    let mut vel = [0.0; 8];
    let mut sig = [0.0; 8];
    let (vel, sig) = (&mut vel[..n], &mut sig[..n]);
    for &h in steps {
        model.velocity(x, u, vel);
        model.diffusion_diag(x, sig);
        let sq = h.sqrt();
        for d in 0..n {
            let e: f64 = StandardNormal.sample(rng);
            x[d] += vel[d] * h + sig[d] * sq * e;
        }
    }
}

/// Ancestor indices from systematic resampling of normalized `weights` with
/// offset `u0 ∈ [0, 1)`: pointer `k` sits at `(k + u0) / N`.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    // Work in units of 1/N so equal weights accumulate without rounding.
    let n = weights.len();
    let scale = n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0] * scale;
    let mut j = 0;
    for k in 0..n {
        let pos = k as f64 + u0;
        while pos >= cum && j + 1 < n {
            j += 1;
            cum += weights[j] * scale;
        }
        out.push(j);
    }
    out
}

/// Functional form of [`BeliefState::propagate`].
pub fn propagate(
    belief: &BeliefState,
    u: &[f64],
    dt: f64,
    model: &dyn ProcessModel,
    cfg: &PfConfig,
    key: &mut StreamKey,
) -> Result<BeliefState> {
    let mut next = belief.clone();
    next.propagate(u, dt, model, cfg, key)?;
    Ok(next)
}

/// Functional form of [`BeliefState::measurement_update`].
pub fn measurement_update<R: Rng + ?Sized>(
    belief: &BeliefState,
    z: &[f64],
    model: &dyn ObservationModel,
    rng: &mut R,
) -> Result<BeliefState> {
    let mut next = belief.clone();
    next.measurement_update(z, model, rng)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Integrator1D, RangeBeacon, Unicycle};

    fn line_belief(n: usize) -> BeliefState {
        BeliefState::from_stacked(1, (0..n).map(|i| i as f64 * 0.1).collect()).unwrap()
    }

    #[test]
    fn zero_noise_zero_input_is_identity() {
        let mut b = line_belief(20);
        let before = b.clone();
        let model = Integrator1D { sigma: 0.0 };
        b.propagate(&[0.0], 0.37, &model, &PfConfig::new(20), &mut StreamKey::new(1))
            .unwrap();
        assert_eq!(b.stacked(), before.stacked());
        assert!((b.time() - 0.37).abs() < 1e-15);
    }

    #[test]
    fn constant_drift_shifts_exactly() {
        let mut b = line_belief(20);
        let before = b.clone();
        let model = Integrator1D { sigma: 0.0 };
        b.propagate(&[1.0], 0.1, &model, &PfConfig::new(20), &mut StreamKey::new(1))
            .unwrap();
        for (x, x0) in b.stacked().iter().zip(before.stacked()) {
            assert!((x - x0 - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn substeps_sum_to_interval() {
        for (dt, h) in [(0.1, 0.01), (0.105, 0.01), (1.0, 0.3), (0.004, 0.01)] {
            let s = substeps(dt, h);
            assert!((s.iter().sum::<f64>() - dt).abs() < 1e-12);
            assert!(s.iter().all(|v| *v > 0.0 && *v <= h + 1e-12));
        }
        assert_eq!(substeps(0.1, 0.01).len(), 10);
    }

    #[test]
    fn brownian_increment_variance() {
        let n = 100_000;
        let mut b = BeliefState::from_stacked(1, vec![0.0; n]).unwrap();
        b.propagate(
            &[0.0],
            1.0,
            &Integrator1D::default(),
            &PfConfig::new(n),
            &mut StreamKey::new(2024),
        )
        .unwrap();
        let mean = b.stacked().iter().sum::<f64>() / n as f64;
        let var = b.stacked().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 0.01).abs() < 0.05 * 0.01, "variance {var}");
    }

    #[test]
    fn propagation_preserves_count_weights_and_is_deterministic() {
        let states: Vec<f64> = (0..10).flat_map(|i| [i as f64, -(i as f64), 0.1 * i as f64]).collect();
        let w: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let b0 = BeliefState::with_weights(3, states, w).unwrap();
        let model = Unicycle::default();
        let cfg = PfConfig::new(10);
        let a = propagate(&b0, &[0.5, 0.1], 0.2, &model, &cfg, &mut StreamKey::new(5)).unwrap();
        let b = propagate(&b0, &[0.5, 0.1], 0.2, &model, &cfg, &mut StreamKey::new(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), b0.len());
        assert_eq!(a.weights(), b0.weights());
    }

    #[test]
    fn parallel_and_serial_agree() {
        // Above the parallel split size, the substream assignment must
        // reproduce a hand-rolled serial loop bit for bit.
        let n = 3000;
        let b0 = BeliefState::from_stacked(1, vec![0.0; n]).unwrap();
        let cfg = PfConfig::new(n);
        let key = StreamKey::new(77);
        let par = propagate(&b0, &[0.3], 0.05, &Integrator1D::default(), &cfg, &mut key.clone())
            .unwrap();
        let steps = substeps(0.05, cfg.dt_sde);
        for i in 0..n {
            let mut x = [0.0];
            euler_maruyama(&mut x, &[0.3], &steps, &Integrator1D::default(), &mut key.substream(i as u64));
            assert_eq!(x[0].to_bits(), par.particle(i)[0].to_bits());
        }
    }

    #[test]
    fn divergence_names_particle() {
        let mut b = BeliefState::from_stacked(1, vec![0.0, f64::INFINITY, 0.0]).unwrap();
        let err = b
            .propagate(&[0.0], 0.01, &Integrator1D::default(), &PfConfig::new(3), &mut StreamKey::new(0))
            .unwrap_err();
        assert_eq!(err, Error::PropagationDiverged { index: 1 });
    }

    #[test]
    fn identical_particles_survive_update() {
        let mut b = BeliefState::from_stacked(3, [1.0, 2.0, 0.0].repeat(8)).unwrap();
        let before = b.clone();
        b.measurement_update(&[3.0], &RangeBeacon::default(), &mut StreamKey::new(3).sequential())
            .unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn equal_weights_resample_to_same_multiset() {
        for k in 0..50 {
            let u0 = k as f64 / 50.0;
            let idx = systematic_resample(&[0.2; 5], u0);
            assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn systematic_expected_counts_match_weights() {
        // Exhaustive scan over the offset: the average copy count of each
        // ancestor must equal N * w.
        let cases: [&[f64]; 3] = [&[0.75, 0.25], &[0.1, 0.6, 0.3], &[0.05, 0.05, 0.5, 0.4]];
        for w in cases {
            let n = w.len();
            let grid = 10_000;
            let mut counts = vec![0.0; n];
            for k in 0..grid {
                let u0 = (k as f64 + 0.5) / grid as f64;
                for i in systematic_resample(w, u0) {
                    counts[i] += 1.0;
                }
            }
            for (c, wi) in counts.iter().zip(w) {
                assert!((c / grid as f64 - n as f64 * wi).abs() < 1e-3);
            }
        }
        // 3:1 over two particles: copies (2, 0) or (1, 1), never more.
        assert_eq!(systematic_resample(&[0.75, 0.25], 0.2), vec![0, 0]);
        assert_eq!(systematic_resample(&[0.75, 0.25], 0.7), vec![0, 1]);
    }

    #[test]
    fn update_leaves_uniform_weights() {
        let states: Vec<f64> = (0..200).flat_map(|i| [i as f64 * 0.05, 1.0, 0.0]).collect();
        let mut b = BeliefState::from_stacked(3, states).unwrap();
        b.measurement_update(&[2.0], &RangeBeacon::default(), &mut StreamKey::new(9).sequential())
            .unwrap();
        assert!(b.has_uniform_weights());
        assert!((b.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(b.weights().iter().all(|w| *w == 1.0 / 200.0));
    }

    #[test]
    fn degenerate_update_keeps_prior() {
        let mut b = BeliefState::from_stacked(3, vec![0.0, 0.0, 0.0]).unwrap();
        let before = b.clone();
        let err = b
            .measurement_update(&[f64::NAN], &RangeBeacon::default(), &mut StreamKey::new(0).sequential())
            .unwrap_err();
        assert!(matches!(err, Error::DegenerateUpdate { .. }));
        assert_eq!(b, before);
    }

    #[test]
    fn mean_state_examples() {
        assert_eq!(BeliefState::from_stacked(1, vec![0.0, 2.0]).unwrap().mean_state(), vec![1.0]);
        assert_eq!(BeliefState::from_stacked(1, vec![3.5]).unwrap().mean_state(), vec![3.5]);
        let w = BeliefState::with_weights(1, vec![0.0, 4.0], vec![0.75, 0.25]).unwrap();
        assert_eq!(w.mean_state(), vec![1.0]);
    }

    #[test]
    fn most_likely_particle_examples() {
        let beacon = RangeBeacon::default();
        let one = BeliefState::from_stacked(3, vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(one.most_likely_particle(Some(&[5.0]), &beacon).unwrap(), vec![1.0, 1.0, 0.0]);

        let two = BeliefState::from_stacked(3, vec![4.0, 2.0, 0.0, 4.0, 3.0, 0.0]).unwrap();
        assert_eq!(two.most_likely_particle(Some(&[1.0]), &beacon).unwrap(), vec![4.0, 3.0, 0.0]);

        let tie = BeliefState::from_stacked(3, vec![4.0, 3.0, 0.0, 5.0, 4.0, 0.0]).unwrap();
        assert_eq!(tie.most_likely_particle(Some(&[1.0]), &beacon).unwrap(), vec![4.0, 3.0, 0.0]);

        assert_eq!(tie.most_likely_particle(None, &beacon).unwrap_err(), Error::NoObservation);
    }

    #[test]
    fn effective_sample_size_examples() {
        assert!((line_belief(7).effective_sample_size() - 7.0).abs() < 1e-12);
        let one = BeliefState::with_weights(1, vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(one.effective_sample_size(), 1.0);
        let half =
            BeliefState::with_weights(1, vec![0.0, 1.0, 2.0, 3.0], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(half.effective_sample_size(), 2.0);
    }

    #[test]
    fn csv_snapshot_layout() {
        let b = BeliefState::from_stacked(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .with_time(0.5);
        let mut buf = Vec::new();
        b.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,i,x_0,x_1,x_2,w"));
        assert_eq!(lines.next(), Some("0.5,0,1,2,3,0.5"));
        assert_eq!(lines.count(), 1);
    }
}
