//! Closed-loop execution of one scenario repetition.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{BarrierSpec, FilterVariant, MixtureComponent, ProcessSpec, ReferenceSpec, Scenario};
use super::oracle::KfOracle;
use crate::barrier::{barrier_values, Barrier, StateBarrier};
use crate::error::{Error, Result};
use crate::models::{ObservationModel, Process, RangeBeacon};
use crate::particle_filter::{euler_maruyama, substeps, BeliefState};
use crate::risk::{cvar_lower_bound, empirical_cvar, RiskConfig};
use crate::rng::{StreamKey, SubstreamRng};
use crate::safety_filter::{
    baseline_be_scbf, baseline_ml_scbf, baseline_mu_scbf, filter, FilterParams, SafetyFilterResult,
};

const TAG_TRUTH: u64 = 1;
const TAG_FILTER: u64 = 2;
const TAG_SENSOR: u64 = 3;
const TAG_INIT: u64 = 4;
const TAG_RESAMPLE: u64 = 5;

/// One control period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub x_true: Vec<f64>,
    pub h_x_true: f64,
    pub h_b: f64,
    /// Empirical CVaR of `h_x` over the particles.
    pub cvar_hat: f64,
    pub cvar_true: Option<f64>,
    pub e_hat: Option<f64>,
    pub e_bar: Option<f64>,
    pub u_ref: Vec<f64>,
    pub u_star: Vec<f64>,
    pub feasible: bool,
    pub collision: bool,
    /// A measurement update moved `h_b` from non-negative to negative.
    pub jump_flag: bool,
    /// A measurement was processed right before this record.
    pub measured: bool,
    /// `h_x` at the belief mean.
    pub h_x_mean: f64,
    /// Fraction of particles with `h_x < 0`.
    pub unsafe_fraction: f64,
    /// Trace of the position covariance (variance in 1D).
    pub spread: f64,
    /// Wall-clock time of the filter call (s).
    pub filter_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub variant: FilterVariant,
    pub seed: u64,
    pub particles: usize,
    pub records: usize,
    #[serde(flatten)]
    pub status: RunStatus,
    pub collision: bool,
    pub collision_steps: usize,
    pub min_h_x_true: f64,
    pub mean_h_x_true: f64,
    /// Fraction of records with `h_x(true) ≥ 0`.
    pub safe_fraction: f64,
    pub min_h_b: f64,
    pub eps_int: f64,
    /// Records where `h_b` crossed below `−eps_int` without a measurement.
    pub invariance_violations: usize,
    pub jump_violations: usize,
    pub infeasible_steps: usize,
    pub degenerate_updates: usize,
    pub filter_time_mean_s: f64,
    pub filter_time_std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub summary: RunSummary,
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

impl RunOutcome {
    pub fn completed(&self) -> bool {
        self.summary.status == RunStatus::Completed
    }
}

fn sample_mixture(components: &[MixtureComponent], rng: &mut SubstreamRng) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = components.len() - 1;
    for (k, c) in components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            pick = k;
            break;
        }
    }
    let c = &components[pick];
    c.mean
        .iter()
        .zip(&c.std)
        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Equally weighted particles drawn from the scenario's initial mixture;
/// particle `i` uses substream `i` of `key`.
pub fn initial_belief(s: &Scenario, key: StreamKey) -> Result<BeliefState> {
    let n = s.particle_filter.particles;
    let states: Vec<f64> = (0..n)
        .flat_map(|i| sample_mixture(&s.initial_belief, &mut key.substream(i as u64)))
        .collect();
    BeliefState::from_stacked(s.initial_belief[0].mean.len(), states)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi);
    r - std::f64::consts::PI
}

/// Reference input on the belief mean, saturated by the input box.
pub fn reference_input(s: &Scenario, mean: &[f64]) -> Vec<f64> {
    let u = match &s.controller.reference {
        ReferenceSpec::Constant { u } => u.clone(),
        ReferenceSpec::Goal { goal, gain } => {
            let (dx, dy) = (goal[0] - mean[0], goal[1] - mean[1]);
            let (sn, cs) = mean[2].sin_cos();
            match s.process {
                ProcessSpec::Omni { .. } => vec![
                    gain * (cs * dx + sn * dy),
                    gain * (-sn * dx + cs * dy),
                    -gain * wrap_angle(mean[2]),
                ],
                _ => vec![
                    gain * (cs * dx + sn * dy),
                    gain * wrap_angle(dy.atan2(dx) - mean[2]),
                ],
            }
        }
    };
    match s.controller.input_limits.as_deref() {
        Some(lim) => u.iter().zip(lim).map(|(v, l)| v.clamp(-l, *l)).collect(),
        None => u,
    }
}

fn position_spread(belief: &BeliefState) -> f64 {
    let coords: Vec<usize> = (0..belief.dim().min(2)).collect();
    belief.covariance(&coords).trace()
}

fn oracle_for(s: &Scenario) -> Option<(KfOracle, f64, f64)> {
    match (&s.process, &s.barrier, &s.observation, s.initial_belief.as_slice()) {
        (ProcessSpec::Integrator1d { sigma }, BarrierSpec::Halfspace { a, c }, None, [comp]) => {
            Some((KfOracle::new(comp.mean[0], comp.std[0], *sigma), a[0], *c))
        }
        _ => None,
    }
}

struct Runner<'a> {
    s: &'a Scenario,
    process: Process,
    barrier: Barrier,
    cfg: RiskConfig,
    params: FilterParams,
    obs: Option<RangeBeacon>,
    fail_after: Option<f64>,
    stride: Option<usize>,
    sensor_key: StreamKey,
    resample_key: StreamKey,
}

/// Mutable loop state carried between control periods.
struct LoopState {
    belief: BeliefState,
    x_true: Vec<f64>,
    last_z: Option<Vec<f64>>,
    degenerate: usize,
    oracle: Option<(KfOracle, f64, f64)>,
}

/// Runs one repetition with `seed`. Numerical failures inside the loop end
/// the run early with an aborted status; configuration errors are returned.
pub fn run_scenario(s: &Scenario, seed: u64) -> Result<RunOutcome> {
    s.validate()?;
    let master = StreamKey::new(seed);
    let truth_key = master.fork(TAG_TRUTH);
    let mut pf_key = master.fork(TAG_FILTER);
    let runner = Runner {
        s,
        process: s.process.build(),
        barrier: s.barrier.build(),
        cfg: s.risk_config()?,
        params: s.filter_params()?,
        obs: s.observation.as_ref().map(|o| o.build()),
        fail_after: s.observation.as_ref().and_then(|o| o.fail_after()),
        stride: s.measurement_stride(),
        sensor_key: master.fork(TAG_SENSOR),
        resample_key: master.fork(TAG_RESAMPLE),
    };
    let dt = s.control_period;
    let steps = s.steps();
    let eps_int = 10.0 * s.particle_filter.dt_sde;
    let sub = substeps(dt, s.particle_filter.dt_sde);

    let mut st = LoopState {
        belief: initial_belief(s, master.fork(TAG_INIT))?,
        x_true: match &s.true_state {
            Some(x) => x.clone(),
            None => sample_mixture(&s.initial_belief, &mut truth_key.sequential()),
        },
        last_z: None,
        degenerate: 0,
        oracle: oracle_for(s),
    };

    let mut records = Vec::with_capacity(steps + 1);
    let mut status = RunStatus::Completed;
    for k in 0..=steps {
        let rec = match runner.step(k, k as f64 * dt, &mut st) {
            Ok(r) => r,
            Err(e) => {
                status = RunStatus::Aborted {
                    step: k,
                    reason: e.to_string(),
                };
                break;
            }
        };
        let u = rec.u_star.clone();
        records.push(rec);
        if k == steps {
            break;
        }
        let mut rng = truth_key.substream(k as u64);
        euler_maruyama(&mut st.x_true, &u, &sub, &runner.process, &mut rng);
        if st.x_true.iter().any(|v| !v.is_finite()) {
            status = RunStatus::Aborted {
                step: k,
                reason: "true state diverged".into(),
            };
            break;
        }
        let propagated = st
            .belief
            .propagate(&u, dt, &runner.process, &s.particle_filter, &mut pf_key);
        if let Err(e) = propagated {
            status = RunStatus::Aborted {
                step: k,
                reason: e.to_string(),
            };
            break;
        }
        if let Some((kf, _, _)) = st.oracle.as_mut() {
            kf.step(u[0], dt);
        }
    }

    let summary = summarize(s, seed, status, &records, eps_int, st.degenerate);
    Ok(RunOutcome { summary, records })
}

impl Runner<'_> {
    fn bound(&self, belief: &BeliefState) -> Result<f64> {
        cvar_lower_bound(&barrier_values(belief, &self.barrier), &self.cfg)
    }

    /// Processes a due measurement. Returns `(measured, jump_flag)`.
    fn measure(&self, k: usize, t: f64, st: &mut LoopState) -> Result<(bool, bool)> {
        let (Some(obs), Some(stride)) = (self.obs.as_ref(), self.stride) else {
            return Ok((false, false));
        };
        let alive = self.fail_after.is_none_or(|tf| t < tf - 1e-9);
        if k == 0 || k % stride != 0 || !alive {
            return Ok((false, false));
        }
        let z = obs.sample(&st.x_true, &mut self.sensor_key.substream(k as u64));
        let before = self.bound(&st.belief)?;
        let mut rng = self.resample_key.substream(k as u64);
        match st.belief.measurement_update(&z, obs, &mut rng) {
            Ok(()) => {
                let after = self.bound(&st.belief)?;
                let jump = before >= 0.0 && after < 0.0;
                if jump {
                    log::debug!("measurement at t = {t} moved h_b from {before} to {after}");
                }
                st.last_z = Some(z);
                Ok((true, jump))
            }
            Err(Error::DegenerateUpdate { sum }) => {
                log::warn!("degenerate update at t = {t} (likelihood sum {sum}); keeping prior");
                st.degenerate += 1;
                Ok((false, false))
            }
            Err(e) => Err(e),
        }
    }

    fn step(&self, k: usize, t: f64, st: &mut LoopState) -> Result<StepRecord> {
        let (measured, jump_flag) = self.measure(k, t, st)?;
        let (s, belief) = (self.s, &st.belief);
        let (barrier, process, params) = (&self.barrier, &self.process, &self.params);

        let values = barrier_values(belief, barrier);
        let h_b = cvar_lower_bound(&values, &self.cfg)?;
        let cvar_hat = empirical_cvar(&values, self.cfg.alpha)?;
        let cvar_true = match &st.oracle {
            Some((kf, a, c)) => Some(kf.barrier_cvar(*a, *c, self.cfg.alpha)?),
            None => None,
        };
        let mean = belief.mean_state();
        let u_ref = reference_input(s, &mean);

        let start = Instant::now();
        let res = match s.controller.variant {
            FilterVariant::Ours => filter(belief, barrier, &self.cfg, process, &u_ref, params)?,
            FilterVariant::MuScbf => baseline_mu_scbf(belief, barrier, process, &u_ref, params)?,
            FilterVariant::MlScbf => match self.obs.as_ref() {
                Some(o) => {
                    let z = st.last_z.as_deref();
                    baseline_ml_scbf(belief, barrier, process, o, z, &u_ref, params)?
                }
                None => baseline_mu_scbf(belief, barrier, process, &u_ref, params)?,
            },
            FilterVariant::BeScbf => {
                baseline_be_scbf(belief, barrier, process, &u_ref, params, s.controller.eta)?
            }
            FilterVariant::None => SafetyFilterResult {
                u_star: u_ref.clone(),
                feasible: true,
                active: false,
                slack_used: 0.0,
                diagnostics: Default::default(),
            },
        };
        let filter_time_s = start.elapsed().as_secs_f64();

        let h_x_true = barrier.value(&st.x_true);
        let unsafe_count = values.iter().filter(|v| **v < 0.0).count();
        Ok(StepRecord {
            t,
            x_true: st.x_true.clone(),
            h_x_true,
            h_b,
            cvar_hat,
            cvar_true,
            e_hat: cvar_true.map(|c| c - cvar_hat),
            e_bar: cvar_true.map(|c| c - h_b),
            u_ref,
            u_star: res.u_star,
            feasible: res.feasible,
            collision: h_x_true < 0.0,
            jump_flag,
            measured,
            h_x_mean: barrier.value(&mean),
            unsafe_fraction: unsafe_count as f64 / values.len() as f64,
            spread: position_spread(belief),
            filter_time_s,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in xs {
        n += 1;
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    (mean, (m2 / n as f64).sqrt())
}

fn summarize(
    s: &Scenario,
    seed: u64,
    status: RunStatus,
    records: &[StepRecord],
    eps_int: f64,
    degenerate_updates: usize,
) -> RunSummary {
    let n = records.len().max(1) as f64;
    let collision_steps = records.iter().filter(|r| r.collision).count();
    let mut invariance_violations = 0;
    let mut prev_ok = true;
    for r in records {
        let ok = r.h_b >= -eps_int;
        if !ok && prev_ok && !r.measured {
            invariance_violations += 1;
        }
        prev_ok = ok;
    }
    let (ft_mean, ft_std) = mean_std(records.iter().map(|r| r.filter_time_s));
    RunSummary {
        scenario: s.name.clone(),
        variant: s.controller.variant,
        seed,
        particles: s.particle_filter.particles,
        records: records.len(),
        status,
        collision: collision_steps > 0,
        collision_steps,
        min_h_x_true: records.iter().map(|r| r.h_x_true).fold(f64::INFINITY, f64::min),
        mean_h_x_true: records.iter().map(|r| r.h_x_true).sum::<f64>() / n,
        safe_fraction: records.iter().filter(|r| r.h_x_true >= 0.0).count() as f64 / n,
        min_h_b: records.iter().map(|r| r.h_b).fold(f64::INFINITY, f64::min),
        eps_int,
        invariance_violations,
        jump_violations: records.iter().filter(|r| r.jump_flag).count(),
        infeasible_steps: records.iter().filter(|r| !r.feasible).count(),
        degenerate_updates,
        filter_time_mean_s: ft_mean,
        filter_time_std_s: ft_std,
    }
}

/// Repetition `r` runs with seed `seed + r`. Repetitions execute in
/// parallel; the result order follows `r`.
pub fn run_reps(s: &Scenario, seed: u64, reps: usize) -> Result<Vec<RunOutcome>> {
    s.validate()?;
    (0..reps as u64)
        .into_par_iter()
        .map(|r| run_scenario(s, seed.wrapping_add(r)))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn flag(b: bool) -> String {
    (b as u8).to_string()
}

/// Per-step CSV: `t, x_true_*, h_x_true, h_b, cvar_hat, cvar_true, e_hat,
/// e_bar, u_ref_*, u_star_*, feasible, collision, jump_flag`. Missing
/// oracle values are left empty; flags are `0`/`1`.
pub fn write_records_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let (nx, nu) = records
        .first()
        .map(|r| (r.x_true.len(), r.u_ref.len()))
        .unwrap_or((0, 0));
    let mut header = vec!["t".to_string()];
    header.extend((0..nx).map(|i| format!("x_true_{i}")));
    header.extend(
        ["h_x_true", "h_b", "cvar_hat", "cvar_true", "e_hat", "e_bar"]
            .iter()
            .map(|s| s.to_string()),
    );
    header.extend((0..nu).map(|i| format!("u_ref_{i}")));
    header.extend((0..nu).map(|i| format!("u_star_{i}")));
    header.extend(["feasible", "collision", "jump_flag"].iter().map(|s| s.to_string()));
    wr.write_record(&header)?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        row.extend(r.x_true.iter().map(f64::to_string));
        row.extend([
            r.h_x_true.to_string(),
            r.h_b.to_string(),
            r.cvar_hat.to_string(),
            fmt_opt(r.cvar_true),
            fmt_opt(r.e_hat),
            fmt_opt(r.e_bar),
        ]);
        row.extend(r.u_ref.iter().map(f64::to_string));
        row.extend(r.u_star.iter().map(f64::to_string));
        row.extend([flag(r.feasible), flag(r.collision), flag(r.jump_flag)]);
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}
