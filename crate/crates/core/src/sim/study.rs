//! Monte Carlo studies over scenario repetitions.

use serde::Serialize;

use super::config::{FilterVariant, Scenario};
use super::run::{mean_std, run_reps, run_scenario, RunOutcome, RunSummary};
use crate::error::{Error, Result};

/// Particle counts of the CVaR mismatch study.
pub const TABLE1_PARTICLES: [usize; 3] = [100, 1000, 5000];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub n: usize,
    pub reps: usize,
    pub aborted: usize,
    /// Records pooled over time steps and repetitions.
    pub steps: usize,
    pub e_hat_mean: f64,
    pub e_hat_std: f64,
    /// Fraction of steps with `e_hat ≤ 0` (empirical CVaR overestimates).
    pub pr_e_hat_le0: f64,
    pub e_bar_mean: f64,
    pub e_bar_std: f64,
    pub pr_e_bar_le0: f64,
    pub t_c_mean_s: f64,
    pub t_c_std_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Verdict {
    /// `Pr[e_bar ≤ 0] ≤ 1%` at every `N`.
    pub bound_sound: bool,
    /// `Pr[e_hat ≤ 0] ≥ 90%` at the smallest `N`.
    pub empirical_unsound: bool,
    /// Mean `e_bar` strictly decreases with `N`.
    pub tightness_trend: bool,
    /// Mean `e_bar` at the smallest `N` lies in `[0.09, 0.27]`.
    pub smallest_n_in_band: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Report {
    pub scenario: String,
    pub seed: u64,
    pub alpha: f64,
    pub delta: f64,
    pub rows: Vec<Table1Row>,
    pub verdict: Table1Verdict,
}

fn table1_row(n: usize, reps: usize, runs: &[RunOutcome]) -> Result<Table1Row> {
    let recs: Vec<_> = runs
        .iter()
        .filter(|r| r.completed())
        .flat_map(|r| r.records.iter())
        .collect();
    let e_hat: Vec<f64> = recs.iter().filter_map(|r| r.e_hat).collect();
    let e_bar: Vec<f64> = recs.iter().filter_map(|r| r.e_bar).collect();
    if e_bar.is_empty() {
        return Err(Error::InvalidParameter {
            name: "scenario",
            reason: "no oracle CVaR available; the study needs the linear 1D setting".into(),
        });
    }
    let frac_le0 = |xs: &[f64]| xs.iter().filter(|e| **e <= 0.0).count() as f64 / xs.len() as f64;
    let (e_hat_mean, e_hat_std) = mean_std(e_hat.iter().copied());
    let (e_bar_mean, e_bar_std) = mean_std(e_bar.iter().copied());
    let (t_c_mean_s, t_c_std_s) = mean_std(recs.iter().map(|r| r.filter_time_s));
    Ok(Table1Row {
        n,
        reps,
        aborted: runs.iter().filter(|r| !r.completed()).count(),
        steps: recs.len(),
        e_hat_mean,
        e_hat_std,
        pr_e_hat_le0: frac_le0(&e_hat),
        e_bar_mean,
        e_bar_std,
        pr_e_bar_le0: frac_le0(&e_bar),
        t_c_mean_s,
        t_c_std_s,
    })
}

pub fn table1_verdict(rows: &[Table1Row]) -> Table1Verdict {
    let bound_sound = rows.iter().all(|r| r.pr_e_bar_le0 <= 0.01 && r.aborted == 0);
    let first = rows.first();
    let empirical_unsound = first.is_some_and(|r| r.pr_e_hat_le0 >= 0.9);
    let tightness_trend = rows.windows(2).all(|w| w[1].e_bar_mean < w[0].e_bar_mean);
    let smallest_n_in_band = first.is_some_and(|r| (0.09..=0.27).contains(&r.e_bar_mean));
    Table1Verdict {
        bound_sound,
        empirical_unsound,
        tightness_trend,
        smallest_n_in_band,
        passed: bound_sound && empirical_unsound && tightness_trend && smallest_n_in_band,
    }
}

/// CVaR mismatch against the Kalman oracle for each particle count.
pub fn table1_study(base: &Scenario, particles: &[usize], reps: usize, seed: u64) -> Result<Table1Report> {
    let mut rows = Vec::with_capacity(particles.len());
    for &n in particles {
        let mut s = base.clone();
        s.particle_filter.particles = n;
        let runs = run_reps(&s, seed, reps)?;
        let row = table1_row(n, reps, &runs)?;
        log::info!(
            "N = {n}: e_hat {:.4} ± {:.4} ({:.1}% ≤ 0), e_bar {:.4} ± {:.4} ({:.2}% ≤ 0)",
            row.e_hat_mean,
            row.e_hat_std,
            100.0 * row.pr_e_hat_le0,
            row.e_bar_mean,
            row.e_bar_std,
            100.0 * row.pr_e_bar_le0
        );
        rows.push(row);
    }
    Ok(Table1Report {
        scenario: base.name.clone(),
        seed,
        alpha: base.risk.alpha,
        delta: base.risk.delta,
        verdict: table1_verdict(&rows),
        rows,
    })
}

/// One column of the baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Variant {
    pub label: String,
    pub variant: FilterVariant,
    pub alpha: f64,
}

impl Table2Variant {
    pub fn new(label: &str, variant: FilterVariant, alpha: f64) -> Self {
        Self {
            label: label.into(),
            variant,
            alpha,
        }
    }
}

/// μ-SCBF, ML-SCBF, BE-SCBF and ours at `α ∈ {0.2, 0.05}`. The baselines
/// ignore `α` except for the recorded `h_b`.
pub fn table2_variants() -> Vec<Table2Variant> {
    vec![
        Table2Variant::new("mu_scbf", FilterVariant::MuScbf, 0.2),
        Table2Variant::new("ml_scbf", FilterVariant::MlScbf, 0.2),
        Table2Variant::new("be_scbf", FilterVariant::BeScbf, 0.2),
        Table2Variant::new("ours_a0.2", FilterVariant::Ours, 0.2),
        Table2Variant::new("ours_a0.05", FilterVariant::Ours, 0.05),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Row {
    pub label: String,
    pub variant: FilterVariant,
    pub alpha: f64,
    pub runs: usize,
    pub aborted: usize,
    /// Runs with any step where `h_x(true) < 0`.
    pub collisions: usize,
    /// Per-run minimum of `h_x(true)`, averaged over runs.
    pub clearance_mean: f64,
    pub clearance_std: f64,
    /// Mean over runs of the fraction of steps with `h_x(true) ≥ 0`.
    pub safe_fraction_mean: f64,
    /// Runs whose safe fraction is at least `1 − α`.
    pub runs_meeting_var: usize,
    pub infeasible_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Verdict {
    pub ours_strict_safe: bool,
    pub ball_safe: bool,
    pub mean_baseline_unsafe: bool,
    pub ml_baseline_unsafe: bool,
    pub clearance_order: bool,
    /// Ours at `α = 0.2`: safe fraction `≥ 0.8` in at least 95% of runs.
    pub var_implication: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Report {
    pub scenario: String,
    pub seed: u64,
    pub reps: usize,
    pub rows: Vec<Table2Row>,
    pub verdict: Table2Verdict,
}

fn table2_row(v: &Table2Variant, runs: &[RunOutcome]) -> Table2Row {
    let done: Vec<&RunSummary> = runs.iter().filter(|r| r.completed()).map(|r| &r.summary).collect();
    let (clearance_mean, clearance_std) = mean_std(done.iter().map(|s| s.min_h_x_true));
    let (safe_fraction_mean, _) = mean_std(done.iter().map(|s| s.safe_fraction));
    Table2Row {
        label: v.label.clone(),
        variant: v.variant,
        alpha: v.alpha,
        runs: runs.len(),
        aborted: runs.len() - done.len(),
        collisions: done.iter().filter(|s| s.collision).count(),
        clearance_mean,
        clearance_std,
        safe_fraction_mean,
        runs_meeting_var: done.iter().filter(|s| s.safe_fraction >= 1.0 - v.alpha).count(),
        infeasible_steps: done.iter().map(|s| s.infeasible_steps).sum(),
    }
}

pub fn table2_verdict(rows: &[Table2Row]) -> Table2Verdict {
    let find = |label: &str| rows.iter().find(|r| r.label == label);
    let (mu, ml, be, ours2, ours05) = (
        find("mu_scbf"),
        find("ml_scbf"),
        find("be_scbf"),
        find("ours_a0.2"),
        find("ours_a0.05"),
    );
    let ok = |r: Option<&Table2Row>, f: &dyn Fn(&Table2Row) -> bool| r.is_some_and(|r| r.aborted == 0 && f(r));
    let ours_strict_safe = ok(ours05, &|r| r.collisions <= 1);
    let ball_safe = ok(be, &|r| r.collisions <= 1);
    let mean_baseline_unsafe = ok(mu, &|r| r.collisions >= 20);
    let ml_baseline_unsafe = ok(ml, &|r| r.collisions >= 20);
    let clearance_order = match (be, ours05, ours2) {
        (Some(b), Some(o5), Some(o2)) => {
            b.clearance_mean > o5.clearance_mean && o5.clearance_mean > o2.clearance_mean
        }
        _ => false,
    };
    let var_implication = ok(ours2, &|r| r.runs_meeting_var as f64 >= 0.95 * r.runs as f64);
    Table2Verdict {
        ours_strict_safe,
        ball_safe,
        mean_baseline_unsafe,
        ml_baseline_unsafe,
        clearance_order,
        var_implication,
        passed: ours_strict_safe
            && ball_safe
            && mean_baseline_unsafe
            && ml_baseline_unsafe
            && clearance_order
            && var_implication,
    }
}

/// Runs every variant on the same seeds, so all columns see the same true
/// initial states and noise.
pub fn table2_study(base: &Scenario, variants: &[Table2Variant], reps: usize, seed: u64) -> Result<Table2Report> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut s = base.clone();
        s.controller.variant = v.variant;
        s.risk.alpha = v.alpha;
        let runs = run_reps(&s, seed, reps)?;
        let row = table2_row(v, &runs);
        log::info!(
            "{}: {} collisions, clearance {:.3} ± {:.3}",
            row.label,
            row.collisions,
            row.clearance_mean,
            row.clearance_std
        );
        rows.push(row);
    }
    Ok(Table2Report {
        scenario: base.name.clone(),
        seed,
        reps,
        verdict: table2_verdict(&rows),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropoutReport {
    pub fail_after: Option<f64>,
    pub summary: RunSummary,
    /// Position spread at the last processed measurement and at the end.
    pub spread_at_failure: f64,
    pub spread_final: f64,
    /// `h_x` of the belief mean at the failure time and at the end.
    pub mean_clearance_at_failure: f64,
    pub mean_clearance_final: f64,
    /// Largest fraction of particles inside the stay-out region after the
    /// failure.
    pub max_unsafe_fraction_after: f64,
    /// Spread, sampled once per second, never decreases after the failure.
    pub spread_monotone: bool,
    #[serde(skip)]
    pub outcome: RunOutcome,
}

/// Runs a scenario whose sensor stops at `observation.fail_after` and
/// reports how uncertainty and clearance evolve afterwards.
pub fn dropout_scenario(s: &Scenario, seed: u64) -> Result<DropoutReport> {
    let fail_after = s.observation.as_ref().and_then(|o| o.fail_after());
    let outcome = run_scenario(s, seed)?;
    let t_fail = fail_after.unwrap_or(f64::INFINITY);
    let recs = &outcome.records;
    let first_after = recs.iter().position(|r| r.t >= t_fail - 1e-9).unwrap_or(recs.len());
    let at = recs.get(first_after).or(recs.last()).ok_or(Error::Empty)?;
    let last = recs.last().ok_or(Error::Empty)?;
    let after = &recs[first_after..];
    // Sample covariance jitters from step to step; compare once per second.
    let per_second = ((1.0 / s.control_period).round() as usize).max(1);
    let coarse: Vec<f64> = after.iter().step_by(per_second).map(|r| r.spread).collect();
    let spread_monotone = coarse.windows(2).all(|w| w[1] >= w[0]);
    Ok(DropoutReport {
        fail_after,
        summary: outcome.summary.clone(),
        spread_at_failure: at.spread,
        spread_final: last.spread,
        mean_clearance_at_failure: at.h_x_mean,
        mean_clearance_final: last.h_x_mean,
        max_unsafe_fraction_after: after.iter().map(|r| r.unsafe_fraction).fold(0.0, f64::max),
        spread_monotone,
        outcome,
    })
}
