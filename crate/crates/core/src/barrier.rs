//! State barriers `h_x` and the belief barrier `h_b`.
//!
//! `h_b` is the CVaR lower bound of `{h_x(x^(i))}` over the particles. It is
//! piecewise linear in the sorted values, so away from ties its gradient with
//! respect to particle `i` is `γ_i ∇h_x(x^(i))` and its Hessian is block
//! diagonal with blocks `γ_i ∇²h_x(x^(i))`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::ProcessModel;
use crate::particle_filter::BeliefState;
use crate::risk::{coefficients_from_tail, RiskConfig, SortedTail, TailCoefficients};

pub trait StateBarrier: Send + Sync {
    fn name(&self) -> &'static str;

    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// Row-major `n × n` Hessian.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// `h(x) = c − aᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub c: f64,
}

impl StateBarrier for Halfspace {
    fn name(&self) -> &'static str {
        "halfspace"
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.c - self.a.iter().zip(x).map(|(a, x)| a * x).sum::<f64>()
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(&self.a) {
            *o = -a;
        }
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Stay outside a disc: `h(p) = ‖p − O‖ − r_o` on the position coordinates
/// `x[0], x[1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircularStayOut {
    pub center: [f64; 2],
    pub radius: f64,
}

impl CircularStayOut {
    /// At the center the gradient is undefined; evaluation returns zeros.
    pub fn is_singular(&self, x: &[f64]) -> bool {
        x[0] == self.center[0] && x[1] == self.center[1]
    }
}

impl StateBarrier for CircularStayOut {
    fn name(&self) -> &'static str {
        "circular"
    }
    fn value(&self, x: &[f64]) -> f64 {
        (x[0] - self.center[0]).hypot(x[1] - self.center[1]) - self.radius
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let (dx, dy) = (x[0] - self.center[0], x[1] - self.center[1]);
        let r = dx.hypot(dy);
        if r > 0.0 {
            out[0] = dx / r;
            out[1] = dy / r;
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let n = x.len();
        let (dx, dy) = (x[0] - self.center[0], x[1] - self.center[1]);
        let r = dx.hypot(dy);
        if r > 0.0 {
            let (nx, ny) = (dx / r, dy / r);
            out[0] = (1.0 - nx * nx) / r;
            out[1] = -nx * ny / r;
            out[n] = -nx * ny / r;
            out[n + 1] = (1.0 - ny * ny) / r;
        }
    }
}

/// Look-ahead disc barrier for a unicycle `[p_x, p_y, φ]`: the point
/// `p̂ = p + d (cos φ, sin φ)` must stay at least `r_o + d` from `O`, which
/// gives the input `ω` authority over `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookaheadUnicycle {
    pub center: [f64; 2],
    pub radius: f64,
    pub offset: f64,
}

impl LookaheadUnicycle {
    pub fn lookahead_point(&self, x: &[f64]) -> [f64; 2] {
        let (s, c) = x[2].sin_cos();
        [x[0] + self.offset * c, x[1] + self.offset * s]
    }
}

impl StateBarrier for LookaheadUnicycle {
    fn name(&self) -> &'static str {
        "lookahead"
    }
    fn value(&self, x: &[f64]) -> f64 {
        let p = self.lookahead_point(x);
        (p[0] - self.center[0]).hypot(p[1] - self.center[1]) - (self.radius + self.offset)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let p = self.lookahead_point(x);
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let r = dx.hypot(dy);
        if r > 0.0 {
            let (s, c) = x[2].sin_cos();
            let (nx, ny) = (dx / r, dy / r);
            out[0] = nx;
            out[1] = ny;
            out[2] = self.offset * (-nx * s + ny * c);
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let p = self.lookahead_point(x);
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let r = dx.hypot(dy);
        if r == 0.0 {
            return;
        }
        let d = self.offset;
        let (s, c) = x[2].sin_cos();
        let (nx, ny) = (dx / r, dy / r);
        // Projector onto the tangent of the level circle, scaled by 1/r.
        let pr = [
            [(1.0 - nx * nx) / r, -nx * ny / r],
            [-nx * ny / r, (1.0 - ny * ny) / r],
        ];
        // Jacobian of p̂ with respect to (p_x, p_y, φ).
        let jac = [[1.0, 0.0, -d * s], [0.0, 1.0, d * c]];
        for a in 0..3 {
            for b in 0..3 {
                let mut v = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        v += jac[k][a] * pr[k][l] * jac[l][b];
                    }
                }
                out[a * 3 + b] = v;
            }
        }
        out[8] += -d * (nx * c + ny * s);
    }
}

/// Closed set of bundled barriers, selected from scenario configs.
#[derive(Debug, Clone, PartialEq)]
pub enum Barrier {
    Halfspace(Halfspace),
    Circular(CircularStayOut),
    Lookahead(LookaheadUnicycle),
}

impl Barrier {
    fn inner(&self) -> &dyn StateBarrier {
        match self {
            Barrier::Halfspace(b) => b,
            Barrier::Circular(b) => b,
            Barrier::Lookahead(b) => b,
        }
    }

    /// The same barrier with the stay-out radius grown by `rho`. Only the
    /// disc family supports this.
    pub fn inflated(&self, rho: f64) -> Result<Barrier> {
        match self {
            Barrier::Circular(b) => Ok(Barrier::Circular(CircularStayOut {
                radius: b.radius + rho,
                ..*b
            })),
            Barrier::Lookahead(b) => Ok(Barrier::Lookahead(LookaheadUnicycle {
                radius: b.radius + rho,
                ..*b
            })),
            Barrier::Halfspace(_) => Err(Error::NotInflatable("halfspace")),
        }
    }

    /// Global lower bound of `h_x`, where one exists: a distance minus the
    /// disc radius never drops below `−radius`.
    pub fn lower_bound(&self) -> Option<f64> {
        match self {
            Barrier::Halfspace(_) => None,
            Barrier::Circular(b) => Some(-b.radius),
            Barrier::Lookahead(b) => Some(-(b.radius + b.offset)),
        }
    }
}

impl StateBarrier for Barrier {
    fn name(&self) -> &'static str {
        self.inner().name()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.inner().value(x)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner().gradient(x, out)
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        self.inner().hessian(x, out)
    }
}

/// Everything the safety filter needs from `h_b` at one belief.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefBarrierTerms {
    pub h_b: f64,
    /// `h_x` at every particle.
    pub values: Vec<f64>,
    /// Stacked `N × n_x`; row `i` is `γ_i ∇h_x(x^(i))`.
    pub grad: Vec<f64>,
    /// `½ Σ_i γ_i tr[σᵢᵀ ∇²h_x(x^(i)) σᵢ]`.
    pub trace_term: f64,
    pub coefficients: TailCoefficients,
    pub dim: usize,
}

impl BeliefBarrierTerms {
    pub fn grad_of(&self, i: usize) -> &[f64] {
        &self.grad[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gamma(&self) -> &[f64] {
        &self.coefficients.gamma
    }
}

pub fn barrier_values(belief: &BeliefState, barrier: &dyn StateBarrier) -> Vec<f64> {
    let dim = belief.dim();
    belief
        .stacked()
        .par_chunks(dim)
        .with_min_len(512)
        .map(|x| barrier.value(x))
        .collect()
}

/// `h_b` with its per-particle gradient and the diffusion trace term.
pub fn belief_barrier(
    belief: &BeliefState,
    barrier: &dyn StateBarrier,
    cfg: &RiskConfig,
    model: &dyn ProcessModel,
) -> Result<BeliefBarrierTerms> {
    if !belief.has_uniform_weights() {
        return Err(Error::NonUniformWeights);
    }
    cfg.validate()?;
    let values = barrier_values(belief, barrier);
    let tail = SortedTail::new(&values, cfg.support)?;
    let coefficients = coefficients_from_tail(&tail, cfg);
    let h_b = coefficients.value(&values);

    let dim = belief.dim();
    let mut grad = vec![0.0; values.len() * dim];
    let mut hess = vec![0.0; dim * dim];
    let mut sig = vec![0.0; dim];
    let mut trace = 0.0;
    for (i, &g) in coefficients.gamma.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let x = belief.particle(i);
        let row = &mut grad[i * dim..(i + 1) * dim];
        barrier.gradient(x, row);
        row.iter_mut().for_each(|v| *v *= g);
        barrier.hessian(x, &mut hess);
        model.diffusion_diag(x, &mut sig);
        let tr: f64 = (0..dim).map(|d| sig[d] * sig[d] * hess[d * dim + d]).sum();
        trace += g * tr;
    }

    Ok(BeliefBarrierTerms {
        h_b,
        values,
        grad,
        trace_term: 0.5 * trace,
        coefficients,
        dim,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FdOutcome {
    /// Max over entries of `|fd − analytic| / ‖analytic‖_∞`.
    Checked { max_rel_error: f64 },
    /// Two `h_x` values lie within the perturbation band; `h_b` is not
    /// differentiable there and the check is skipped.
    Tie { first: usize, second: usize },
}

/// Compares `γ_i ∇h_x(x^(i))` against central differences of `h_b` in every
/// particle coordinate.
pub fn finite_difference_check(
    belief: &BeliefState,
    barrier: &dyn StateBarrier,
    cfg: &RiskConfig,
    model: &dyn ProcessModel,
    eps: f64,
) -> Result<FdOutcome> {
    let terms = belief_barrier(belief, barrier, cfg, model)?;
    let mut order: Vec<usize> = (0..terms.values.len()).collect();
    order.sort_by(|&a, &b| terms.values[a].total_cmp(&terms.values[b]));
    for w in order.windows(2) {
        if (terms.values[w[1]] - terms.values[w[0]]).abs() <= 10.0 * eps {
            return Ok(FdOutcome::Tie {
                first: w[0].min(w[1]),
                second: w[0].max(w[1]),
            });
        }
    }
    if let crate::risk::SupportBound::Fixed(b) = cfg.support {
        let lowest = terms.values[order[0]];
        if lowest - b <= 10.0 * eps {
            return Ok(FdOutcome::Tie {
                first: order[0],
                second: order[0],
            });
        }
    }

    let scale = terms.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if scale == 0.0 {
        return Ok(FdOutcome::Checked { max_rel_error: 0.0 });
    }
    let h_b = |b: &BeliefState| -> Result<f64> {
        let values = barrier_values(b, barrier);
        crate::risk::cvar_lower_bound(&values, cfg)
    };
    let dim = belief.dim();
    let mut probe = belief.clone();
    let mut worst = 0.0f64;
    for i in 0..belief.len() {
        for d in 0..dim {
            let x0 = belief.particle(i)[d];
            probe.particle_mut(i)[d] = x0 + eps;
            let up = h_b(&probe)?;
            probe.particle_mut(i)[d] = x0 - eps;
            let down = h_b(&probe)?;
            probe.particle_mut(i)[d] = x0;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - terms.grad[i * dim + d]).abs() / scale);
        }
    }
    Ok(FdOutcome::Checked {
        max_rel_error: worst,
    })
}
