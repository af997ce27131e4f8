//! Minimal-deviation safety filter.
//!
//! The barrier condition on the belief reduces to one linear inequality
//! `a·u ≥ c` in the input, and the filter solves
//!
//! ```text
//! min (u − u_ref)ᵀ Q (u − u_ref)   s.t.  a·u ≥ c,  lower ≤ u ≤ upper
//! ```
//!
//! Inputs have at most a handful of components, so the box-constrained case
//! is solved exactly by enumerating active sets.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::barrier::{belief_barrier, BeliefBarrierTerms, StateBarrier};
use crate::error::{check_dim, Error, Result};
use crate::models::{ObservationModel, ProcessModel};
use crate::particle_filter::BeliefState;
use crate::risk::RiskConfig;

const FEAS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("input box", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidParameter {
                name: "input box",
                reason: "lower bound exceeds upper bound".into(),
            });
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(limits: &[f64]) -> Result<Self> {
        Self::new(limits.iter().map(|l| -l).collect(), limits.to_vec())
    }

    pub fn clamp(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub u_ref: Vec<f64>,
    /// Constraint row: `a·u ≥ c`.
    pub a: Vec<f64>,
    pub c: f64,
    pub bounds: Option<InputBox>,
}

impl QpProblem {
    pub fn objective(&self, u: &[f64]) -> f64 {
        let d = DVector::from_iterator(u.len(), u.iter().zip(&self.u_ref).map(|(x, r)| x - r));
        (d.transpose() * &self.q * &d)[(0, 0)]
    }

    fn validate(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let m = self.u_ref.len();
        check_dim("Q rows", m, self.q.nrows())?;
        check_dim("Q cols", m, self.q.ncols())?;
        check_dim("constraint row", m, self.a.len())?;
        if let Some(b) = &self.bounds {
            check_dim("input box", m, b.lower.len())?;
        }
        if (&self.q - self.q.transpose()).abs().max() > 1e-12 * self.q.abs().max().max(1.0) {
            return Err(Error::InvalidParameter {
                name: "Q",
                reason: "not symmetric".into(),
            });
        }
        self.q.clone().cholesky().ok_or(Error::InvalidParameter {
            name: "Q",
            reason: "not positive definite".into(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Barrier value the constraint was built from (`h_b`, or `h_x` at the
    /// chosen state for the baselines).
    pub h_b: f64,
    /// Drift term `∂h/∂b · f_b`.
    pub lf: f64,
    /// Input row `∂h/∂b · g_b`.
    pub lg: Vec<f64>,
    pub trace_term: f64,
    pub gamma_cbf: f64,
    /// Right-hand side `c` of `a·u ≥ c`.
    pub c: f64,
    /// Chebyshev radius for the ball baseline, zero otherwise.
    pub inflation: f64,
    /// The barrier was already negative when the filter was called.
    pub infeasible_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafetyFilterResult {
    pub u_star: Vec<f64>,
    pub feasible: bool,
    /// The barrier constraint changed the solution.
    pub active: bool,
    /// `max(0, c − a·u*)`.
    pub slack_used: f64,
    pub diagnostics: Diagnostics,
}

/// Solves the single-constraint QP, optionally with an input box.
pub fn solve_qp(p: &QpProblem) -> Result<SafetyFilterResult> {
    let chol = p.validate()?;
    let dot = |u: &[f64]| p.a.iter().zip(u).map(|(a, u)| a * u).sum::<f64>();
    let tol = FEAS_TOL * (1.0 + p.c.abs());

    let diagnostics = Diagnostics {
        lg: p.a.clone(),
        c: p.c,
        ..Default::default()
    };
    let done = |u: Vec<f64>, feasible: bool, active: bool| {
        let slack = (p.c - dot(&u)).max(0.0);
        SafetyFilterResult {
            slack_used: if feasible { 0.0 } else { slack },
            u_star: u,
            feasible,
            active,
            diagnostics: diagnostics.clone(),
        }
    };

    match &p.bounds {
        None => {
            if dot(&p.u_ref) >= p.c {
                return Ok(done(p.u_ref.clone(), true, false));
            }
            let a = DVector::from_column_slice(&p.a);
            let qa = chol.solve(&a);
            let denom = a.dot(&qa);
            if denom <= 0.0 {
                return Ok(done(p.u_ref.clone(), false, true));
            }
            let step = (p.c - dot(&p.u_ref)) / denom;
            let u: Vec<f64> = p.u_ref.iter().zip(qa.iter()).map(|(r, d)| r + step * d).collect();
            Ok(done(u, true, true))
        }
        Some(bx) => {
            let u_box = if bx.contains(&p.u_ref, 0.0) {
                p.u_ref.clone()
            } else {
                enumerate(p, bx, false).expect("box-only problem is always feasible")
            };
            if dot(&u_box) >= p.c {
                return Ok(done(u_box, true, false));
            }
            match enumerate(p, bx, true) {
                Some(u) if dot(&u) >= p.c - tol => Ok(done(u, true, true)),
                _ => Ok(done(best_effort(p, bx), false, true)),
            }
        }
    }
}

/// Exhaustive active-set search. Each input component is free or pinned to
/// one of its bounds; with `on_plane` the constraint holds with equality.
fn enumerate(p: &QpProblem, bx: &InputBox, on_plane: bool) -> Option<Vec<f64>> {
    let m = p.u_ref.len();
    let combos = 3usize.pow(m as u32);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut status = vec![0u8; m];
    for code in 0..combos {
        let mut k = code;
        for s in status.iter_mut() {
            *s = (k % 3) as u8;
            k /= 3;
        }
        let Some(u) = solve_face(p, bx, &status, on_plane) else {
            continue;
        };
        let feasible = bx.contains(&u, 1e-12)
            && (!on_plane
                || (p.a.iter().zip(&u).map(|(a, v)| a * v).sum::<f64>() - p.c).abs()
                    <= FEAS_TOL * (1.0 + p.c.abs()));
        if !feasible {
            continue;
        }
        let u = bx.clamp(&u);
        let obj = p.objective(&u);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, u));
        }
    }
    best.map(|(_, u)| u)
}

/// Minimizer on one face: pinned components fixed, free components solved
/// from the (equality-constrained) stationarity system.
fn solve_face(p: &QpProblem, bx: &InputBox, status: &[u8], on_plane: bool) -> Option<Vec<f64>> {
    let m = status.len();
    let mut u = p.u_ref.clone();
    let mut free = Vec::with_capacity(m);
    for (i, s) in status.iter().enumerate() {
        match s {
            1 => u[i] = bx.lower[i],
            2 => u[i] = bx.upper[i],
            _ => free.push(i),
        }
    }
    let k = free.len();
    let rows = k + usize::from(on_plane);
    if k == 0 {
        // A vertex; on the plane only if it happens to lie on it.
        return Some(u);
    }
    let mut lhs = DMatrix::zeros(rows, rows);
    let mut rhs = DVector::zeros(rows);
    for (r, &i) in free.iter().enumerate() {
        let mut acc = 0.0;
        for j in 0..m {
            if status[j] != 0 {
                acc += p.q[(i, j)] * (u[j] - p.u_ref[j]);
            }
        }
        for (c, &j) in free.iter().enumerate() {
            lhs[(r, c)] = p.q[(i, j)];
        }
        rhs[r] = free.iter().map(|&j| p.q[(i, j)] * p.u_ref[j]).sum::<f64>() - acc;
        if on_plane {
            lhs[(r, k)] = -p.a[i];
        }
    }
    if on_plane {
        for (c, &j) in free.iter().enumerate() {
            lhs[(k, c)] = p.a[j];
        }
        let fixed: f64 = (0..m).filter(|j| status[*j] != 0).map(|j| p.a[j] * u[j]).sum();
        rhs[k] = p.c - fixed;
    }
    let sol = lhs.lu().solve(&rhs)?;
    for (c, &i) in free.iter().enumerate() {
        u[i] = sol[c];
    }
    Some(u)
}

/// Input in the box maximizing `a·u`, closest to `u_ref` along directions
/// where `a` vanishes.
fn best_effort(p: &QpProblem, bx: &InputBox) -> Vec<f64> {
    (0..p.u_ref.len())
        .map(|i| {
            if p.a[i] > 0.0 {
                bx.upper[i]
            } else if p.a[i] < 0.0 {
                bx.lower[i]
            } else {
                p.u_ref[i].clamp(bx.lower[i], bx.upper[i])
            }
        })
        .collect()
}

/// Linear constraint `a·u ≥ c` derived from a barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierConstraint {
    pub a: Vec<f64>,
    pub c: f64,
    pub h: f64,
    pub lf: f64,
    pub trace_term: f64,
    pub gamma_cbf: f64,
}

/// Chains `∂h_b/∂b` through the stacked belief dynamics:
/// `a = Σ_i (γ_i∇h_i)ᵀ g(x_i)`, `L_f = Σ_i (γ_i∇h_i)ᵀ f(x_i)` and
/// `c = −γ_cbf h_b − L_f − trace`.
pub fn assemble_constraint(
    terms: &BeliefBarrierTerms,
    belief: &BeliefState,
    model: &dyn ProcessModel,
    gamma_cbf: f64,
) -> BarrierConstraint {
    let n = belief.dim();
    let m = model.input_dim();
    let mut a = vec![0.0; m];
    let mut lf = 0.0;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    for (i, gamma) in terms.gamma().iter().enumerate() {
        if *gamma == 0.0 {
            continue;
        }
        let x = belief.particle(i);
        let grad = terms.grad_of(i);
        model.drift(x, &mut f);
        model.input_matrix(x, &mut g);
        lf += grad.iter().zip(&f).map(|(d, f)| d * f).sum::<f64>();
        for (c, ac) in a.iter_mut().enumerate() {
            *ac += (0..n).map(|r| grad[r] * g[r * m + c]).sum::<f64>();
        }
    }
    BarrierConstraint {
        c: -gamma_cbf * terms.h_b - lf - terms.trace_term,
        a,
        h: terms.h_b,
        lf,
        trace_term: terms.trace_term,
        gamma_cbf,
    }
}

/// Standard stochastic barrier condition at a single state `x`.
pub fn state_constraint(
    x: &[f64],
    barrier: &dyn StateBarrier,
    model: &dyn ProcessModel,
    gamma_cbf: f64,
) -> BarrierConstraint {
    let n = x.len();
    let m = model.input_dim();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n * m];
    let mut sig = vec![0.0; n];
    barrier.gradient(x, &mut grad);
    barrier.hessian(x, &mut hess);
    model.drift(x, &mut f);
    model.input_matrix(x, &mut g);
    model.diffusion_diag(x, &mut sig);
    let h = barrier.value(x);
    let lf: f64 = grad.iter().zip(&f).map(|(d, f)| d * f).sum();
    let trace = 0.5 * (0..n).map(|d| sig[d] * sig[d] * hess[d * n + d]).sum::<f64>();
    let a = (0..m)
        .map(|c| (0..n).map(|r| grad[r] * g[r * m + c]).sum())
        .collect();
    BarrierConstraint {
        c: -gamma_cbf * h - lf - trace,
        a,
        h,
        lf,
        trace_term: trace,
        gamma_cbf,
    }
}

/// QP weighting, input limits and class-K gain shared by all filter
/// variants.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    pub q: DMatrix<f64>,
    pub bounds: Option<InputBox>,
    pub gamma_cbf: f64,
}

impl FilterParams {
    pub fn identity(m: usize) -> Self {
        Self {
            q: DMatrix::identity(m, m),
            bounds: None,
            gamma_cbf: 1.0,
        }
    }

    pub fn with_bounds(mut self, bounds: InputBox) -> Self {
        self.bounds = Some(bounds);
        self
    }

    pub fn with_gamma(mut self, gamma_cbf: f64) -> Self {
        self.gamma_cbf = gamma_cbf;
        self
    }
}

fn solve_constraint(
    con: &BarrierConstraint,
    u_ref: &[f64],
    params: &FilterParams,
) -> Result<SafetyFilterResult> {
    let mut res = solve_qp(&QpProblem {
        q: params.q.clone(),
        u_ref: u_ref.to_vec(),
        a: con.a.clone(),
        c: con.c,
        bounds: params.bounds.clone(),
    })?;
    res.diagnostics.h_b = con.h;
    res.diagnostics.lf = con.lf;
    res.diagnostics.trace_term = con.trace_term;
    res.diagnostics.gamma_cbf = con.gamma_cbf;
    res.diagnostics.infeasible_start = con.h < 0.0;
    if !res.feasible {
        log::debug!(
            "safety filter infeasible: h = {}, slack = {}",
            con.h,
            res.slack_used
        );
    }
    Ok(res)
}

/// Risk-aware filter: `h_b` → constraint → QP.
pub fn filter(
    belief: &BeliefState,
    barrier: &dyn StateBarrier,
    cfg: &RiskConfig,
    model: &dyn ProcessModel,
    u_ref: &[f64],
    params: &FilterParams,
) -> Result<SafetyFilterResult> {
    check_dim("reference input", model.input_dim(), u_ref.len())?;
    let terms = belief_barrier(belief, barrier, cfg, model)?;
    let con = assemble_constraint(&terms, belief, model, params.gamma_cbf);
    solve_constraint(&con, u_ref, params)
}

/// Stochastic barrier filter on the mean state.
pub fn baseline_mu_scbf(
    belief: &BeliefState,
    barrier: &dyn StateBarrier,
    model: &dyn ProcessModel,
    u_ref: &[f64],
    params: &FilterParams,
) -> Result<SafetyFilterResult> {
    let x = belief.mean_state();
    solve_constraint(&state_constraint(&x, barrier, model, params.gamma_cbf), u_ref, params)
}

/// Stochastic barrier filter on the most likely particle. Falls back to the
/// mean before the first observation.
pub fn baseline_ml_scbf(
    belief: &BeliefState,
    barrier: &dyn StateBarrier,
    model: &dyn ProcessModel,
    obs: &dyn ObservationModel,
    last_z: Option<&[f64]>,
    u_ref: &[f64],
    params: &FilterParams,
) -> Result<SafetyFilterResult> {
    let x = match belief.most_likely_particle(last_z, obs) {
        Ok(x) => x,
        Err(Error::NoObservation) => belief.mean_state(),
        Err(e) => return Err(e),
    };
    solve_constraint(&state_constraint(&x, barrier, model, params.gamma_cbf), u_ref, params)
}

/// Chebyshev ball radius `√(tr Σ_pos / η)` over the planar position block.
pub fn chebyshev_radius(belief: &BeliefState, eta: f64) -> f64 {
    let cov = belief.covariance(&[0, 1]);
    (cov.trace().max(0.0) / eta).sqrt()
}

/// Stochastic barrier filter on the mean with the stay-out disc grown by
/// the Chebyshev radius.
pub fn baseline_be_scbf(
    belief: &BeliefState,
    barrier: &crate::barrier::Barrier,
    model: &dyn ProcessModel,
    u_ref: &[f64],
    params: &FilterParams,
    eta: f64,
) -> Result<SafetyFilterResult> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidParameter {
            name: "eta",
            reason: format!("must lie in (0, 1), got {eta}"),
        });
    }
    let rho = chebyshev_radius(belief, eta);
    let inflated = barrier.inflated(rho)?;
    let x = belief.mean_state();
    let mut res = solve_constraint(
        &state_constraint(&x, &inflated, model, params.gamma_cbf),
        u_ref,
        params,
    )?;
    res.diagnostics.inflation = rho;
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{Barrier, CircularStayOut, Halfspace, LookaheadUnicycle};
    use crate::models::{Integrator1D, Omni, RangeBeacon, Unicycle};
    use crate::risk::SupportBound;
    use crate::rng::StreamKey;
    use rand::Rng;

    fn qp(q: DMatrix<f64>, u_ref: Vec<f64>, a: Vec<f64>, c: f64) -> QpProblem {
        QpProblem {
            q,
            u_ref,
            a,
            c,
            bounds: None,
        }
    }

    #[test]
    fn projection_examples() {
        let r = solve_qp(&qp(DMatrix::identity(2, 2), vec![0.0, 0.0], vec![1.0, 0.0], 1.0)).unwrap();
        assert_eq!(r.u_star, vec![1.0, 0.0]);
        assert!(r.active && r.feasible);

        let r = solve_qp(&qp(DMatrix::identity(2, 2), vec![2.0, 3.0], vec![1.0, 0.0], 1.0)).unwrap();
        assert_eq!(r.u_star, vec![2.0, 3.0]);
        assert!(!r.active);

        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let r = solve_qp(&qp(q.clone(), vec![0.0, 0.0], vec![1.0, 0.0], 1.0)).unwrap();
        assert!((r.u_star[0] - 1.0).abs() < 1e-15 && r.u_star[1].abs() < 1e-15);

        // Dense grid over u confirms the minimizer to grid resolution.
        let p = qp(q, vec![0.0, 0.0], vec![1.0, 0.0], 1.0);
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=400 {
            for j in 0..=400 {
                let u = [-1.0 + i as f64 * 0.005, -1.0 + j as f64 * 0.005];
                if u[0] >= 1.0 - 1e-12 {
                    let o = p.objective(&u);
                    if o < best.0 {
                        best = (o, u);
                    }
                }
            }
        }
        assert!((best.1[0] - 1.0).abs() <= 1e-3 && best.1[1].abs() <= 1e-3);
    }

    #[test]
    fn uncontrollable_constraint_is_reported() {
        let r = solve_qp(&qp(DMatrix::identity(2, 2), vec![0.0, 0.0], vec![0.0, 0.0], 1.0)).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.slack_used, 1.0);
    }

    #[test]
    fn rejects_indefinite_q() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(solve_qp(&qp(q, vec![0.0; 2], vec![1.0, 0.0], 0.0)).is_err());
    }

    #[test]
    fn box_infeasible_is_best_effort() {
        let mut p = qp(DMatrix::identity(2, 2), vec![0.3, 0.2], vec![1.0, -1.0], 5.0);
        p.bounds = Some(InputBox::symmetric(&[1.0, 2.0]).unwrap());
        let r = solve_qp(&p).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.u_star, vec![1.0, -2.0]);
        assert!((r.slack_used - 2.0).abs() < 1e-15);
    }

    #[test]
    fn box_active_face() {
        // Halfspace projection lands outside the box; optimum sits on a face.
        let mut p = qp(DMatrix::identity(2, 2), vec![0.0, 0.0], vec![1.0, 1.0], 1.5);
        p.bounds = Some(InputBox::symmetric(&[0.5, 2.0]).unwrap());
        let r = solve_qp(&p).unwrap();
        assert!(r.feasible && r.active);
        assert!((r.u_star[0] - 0.5).abs() < 1e-12);
        assert!((r.u_star[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minimal_deviation_and_constraint_satisfaction() {
        let mut rng = StreamKey::new(3).sequential();
        for _ in 0..500 {
            let m = rng.random_range(1..=3);
            let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let q = &l * l.transpose() + DMatrix::identity(m, m) * 0.1;
            let u_ref: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = rng.random_range(-1.0..1.0);
            let mut p = qp(q, u_ref.clone(), a.clone(), c);
            p.bounds = Some(InputBox::symmetric(&vec![2.0; m]).unwrap());
            let r = solve_qp(&p).unwrap();
            let lhs: f64 = a.iter().zip(&r.u_star).map(|(a, u)| a * u).sum();
            if r.feasible {
                assert!(lhs >= c - 1e-9);
            }
            let ref_ok: f64 = a.iter().zip(&u_ref).map(|(a, u)| a * u).sum();
            if ref_ok >= c {
                assert_eq!(r.u_star, u_ref);
            }
        }
    }

    #[test]
    fn halfspace_chain_rule() {
        let belief = BeliefState::from_stacked(1, vec![0.0, 0.2, -0.4, 0.6, 0.1]).unwrap();
        let barrier = Halfspace {
            a: vec![1.0],
            c: 2.0,
        };
        let cfg = RiskConfig::new(0.4, 0.3, -5.0).unwrap();
        let model = Integrator1D::default();
        let terms = belief_barrier(&belief, &barrier, &cfg, &model).unwrap();
        let con = assemble_constraint(&terms, &belief, &model, 1.0);
        let mass: f64 = terms.gamma().iter().sum();
        assert!((con.a[0] + mass).abs() < 1e-15);
        assert_eq!(con.lf, 0.0);

        let looser = assemble_constraint(&terms, &belief, &model, 2.0);
        if terms.h_b > 0.0 {
            assert!(looser.c < con.c);
        }
    }

    #[test]
    fn single_gamma_particle_row() {
        let belief = BeliefState::from_stacked(3, vec![0.0, 0.0, 0.3, 2.0, 1.0, -0.4]).unwrap();
        let barrier = LookaheadUnicycle {
            center: [1.0, 3.0],
            radius: 0.5,
            offset: 0.2,
        };
        let model = Unicycle::default();
        let cfg = RiskConfig::new(0.5, 0.5, -2.0).unwrap();
        let mut terms = belief_barrier(&belief, &barrier, &cfg, &model).unwrap();
        terms.coefficients.gamma = vec![0.0, 0.7];
        let mut grad = [0.0; 3];
        barrier.gradient(belief.particle(1), &mut grad);
        terms.grad = [vec![0.0; 3], grad.iter().map(|g| 0.7 * g).collect()].concat();
        let con = assemble_constraint(&terms, &belief, &model, 1.0);
        let phi: f64 = -0.4;
        let expect = [0.7 * (grad[0] * phi.cos() + grad[1] * phi.sin()), 0.7 * grad[2]];
        assert!((con.a[0] - expect[0]).abs() < 1e-14);
        assert!((con.a[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn far_from_boundary_passes_reference() {
        let belief = BeliefState::from_stacked(1, (0..100).map(|i| -3.0 + 0.001 * i as f64).collect())
            .unwrap();
        let barrier = Halfspace {
            a: vec![1.0],
            c: 2.0,
        };
        let cfg = RiskConfig::new(0.2, 0.05, -2.0).unwrap();
        let r = filter(&belief, &barrier, &cfg, &Integrator1D::default(), &[0.5], &FilterParams::identity(1))
            .unwrap();
        assert_eq!(r.u_star, vec![0.5]);
        assert!(!r.active);
    }

    #[test]
    fn drone_brakes_near_wall() {
        let belief =
            BeliefState::from_stacked(1, (0..100).map(|i| 1.6 + 0.002 * i as f64).collect()).unwrap();
        let barrier = Halfspace {
            a: vec![1.0],
            c: 2.0,
        };
        let cfg = RiskConfig::new(0.2, 0.05, -0.5).unwrap();
        let r = filter(&belief, &barrier, &cfg, &Integrator1D::default(), &[1.0], &FilterParams::identity(1))
            .unwrap();
        assert!(r.diagnostics.lg[0] < 0.0);
        assert!(r.u_star[0] < 1.0);
        assert!(r.active);
    }

    #[test]
    fn single_particle_matches_mean_baseline() {
        let model = Unicycle::default();
        let barrier = LookaheadUnicycle {
            center: [2.0, 0.5],
            radius: 0.4,
            offset: 0.2,
        };
        let x = [0.7, 0.1, 0.2];
        let belief = BeliefState::from_stacked(3, x.to_vec()).unwrap();
        let cfg = RiskConfig::new(0.2, 0.05, 0.0)
            .unwrap()
            .with_support(SupportBound::SampleMin)
            .unwrap();
        let params = FilterParams::identity(2).with_bounds(InputBox::symmetric(&[1.0, 2.0]).unwrap());
        let ours = filter(&belief, &barrier, &cfg, &model, &[1.0, 0.0], &params).unwrap();
        let mu = baseline_mu_scbf(&belief, &barrier, &model, &[1.0, 0.0], &params).unwrap();
        assert!((ours.diagnostics.c - mu.diagnostics.c).abs() < 1e-12);
        for (a, b) in ours.diagnostics.lg.iter().zip(&mu.diagnostics.lg) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in ours.u_star.iter().zip(&mu.u_star) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn halfspace_mean_baseline_is_scalar_brake() {
        let belief = BeliefState::from_stacked(1, vec![1.5, 1.7]).unwrap();
        let barrier = Halfspace {
            a: vec![1.0],
            c: 2.0,
        };
        let r = baseline_mu_scbf(&belief, &barrier, &Integrator1D::default(), &[1.0], &FilterParams::identity(1))
            .unwrap();
        // −u ≥ −h(x̄) ⇒ u ≤ 0.4
        assert!((r.u_star[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ml_baseline_cases() {
        let model = Unicycle::default();
        let obs = RangeBeacon::default();
        let barrier = CircularStayOut {
            center: [2.0, 2.0],
            radius: 0.5,
        };
        let params = FilterParams::identity(2);
        let one = BeliefState::from_stacked(3, vec![1.0, 1.0, 0.0]).unwrap();
        let ml = baseline_ml_scbf(&one, &barrier, &model, &obs, Some(&[3.0]), &[1.0, 0.0], &params).unwrap();
        let mu = baseline_mu_scbf(&one, &barrier, &model, &[1.0, 0.0], &params).unwrap();
        assert_eq!(ml, mu);

        let two = BeliefState::from_stacked(3, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let fallback = baseline_ml_scbf(&two, &barrier, &model, &obs, None, &[1.0, 0.0], &params).unwrap();
        let mean = baseline_mu_scbf(&two, &barrier, &model, &[1.0, 0.0], &params).unwrap();
        assert_eq!(fallback, mean);

        // Equal likelihoods: the lower index wins.
        let tie = BeliefState::from_stacked(3, vec![4.0, 3.0, 0.0, 5.0, 4.0, 0.0]).unwrap();
        let r = baseline_ml_scbf(&tie, &barrier, &model, &obs, Some(&[1.0]), &[1.0, 0.0], &params).unwrap();
        assert!((r.diagnostics.h_b - barrier.value(&[4.0, 3.0])).abs() < 1e-15);
    }

    #[test]
    fn chebyshev_ball_baseline() {
        let model = Omni::default();
        let barrier = Barrier::Circular(CircularStayOut {
            center: [3.0, 0.0],
            radius: 0.5,
        });
        let params = FilterParams::identity(3);
        let point = BeliefState::from_stacked(3, [0.0, 0.0, 0.0].repeat(10)).unwrap();
        let be = baseline_be_scbf(&point, &barrier, &model, &[1.0, 0.0, 0.0], &params, 0.05).unwrap();
        let mu = baseline_mu_scbf(&point, &barrier, &model, &[1.0, 0.0, 0.0], &params).unwrap();
        assert_eq!(be.diagnostics.inflation, 0.0);
        assert_eq!(be.u_star, mu.u_star);

        let spread = BeliefState::from_stacked(3, vec![-0.1, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, -0.2, 0.0])
            .unwrap();
        let wide: Vec<f64> = spread.stacked().iter().enumerate().map(|(k, v)| if k % 3 == 2 { *v } else { v * 2f64.sqrt() }).collect();
        let wide = BeliefState::from_stacked(3, wide).unwrap();
        let r1 = chebyshev_radius(&spread, 0.05);
        let r2 = chebyshev_radius(&wide, 0.05);
        assert!((r2 / r1 - 2f64.sqrt()).abs() < 1e-12);

        let far = BeliefState::from_stacked(3, vec![2.0, -1.5, 0.0, 2.0, 1.5, 0.0]).unwrap();
        let r = baseline_be_scbf(&far, &barrier, &model, &[0.0, 0.0, 0.0], &params, 0.05).unwrap();
        assert!(r.diagnostics.infeasible_start);
    }
}
