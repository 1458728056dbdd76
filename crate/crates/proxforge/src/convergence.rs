//! Convergence analysis for the two-parameter relaxed scheme.
//!
//! The scheme with dual relaxation `a21` and primal relaxation `c21`
//! contracts when `sigma * tau * |L|^2` stays below the bound
//! [`bound_k`]`(a21, c21)`. This module provides that bound, the two
//! quadratic forms whose coefficients certify it, a Fejér-type trace that
//! records the Lyapunov value along a run, an ergodic duality-gap check,
//! a strong-convergence accumulation check, a long-run reference solve,
//! and a small diagonal toy problem with a closed-form saddle point.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linops::{DiagOp, LinOp};
use crate::prox::ProxFn;
use crate::scheme::{
    fixed_point_residual, preset_new_solver, preset_pdhg, SchemeEngine, SplitProblem,
};
use crate::tensor::{axpby, gaussian_like, inner, RngStream, Space, SpaceElement};

/// Largest admissible value of `sigma * tau * |L|^2` for relaxations
/// `(a21, c21)` in `(0, 2)^2`. Equals one when the relaxations agree.
pub fn bound_k(a21: f64, c21: f64) -> f64 {
    let coupling = a21 + c21 - a21 * c21;
    a21 * a21 * (2.0 - a21) * (2.0 - c21) / (coupling * coupling)
}

/// Coefficients `(c1, d1, c2, d2)` of the norm bounds certified by the two
/// quadratic forms: the first form dominates `c1 |x|^2` and `d1 |y|^2`,
/// the decrease form dominates `c2 |x|^2` and `d2 |y|^2`. All four are
/// positive exactly when `sigma * tau * op_norm^2 < bound_k(a21, c21)`.
pub fn lyapunov_coefficients(
    a21: f64,
    c21: f64,
    sigma: f64,
    tau: f64,
    op_norm: f64,
) -> (f64, f64, f64, f64) {
    let s = sigma * tau * op_norm * op_norm;
    let first_num = a21 - c21 * s;
    let c1 = first_num / (2.0 * tau * a21 * c21);
    let d1 = first_num / (2.0 * sigma * a21 * a21);
    let coupling = a21 + c21 - a21 * c21;
    let second_num = a21 * a21 * (2.0 - a21) * (2.0 - c21) - coupling * coupling * s;
    let c2 = second_num / (2.0 * tau * a21 * a21 * (2.0 - a21));
    let d2 = second_num / (2.0 * sigma * a21 * a21 * (2.0 - c21));
    (c1, d1, c2, d2)
}

/// Validated parameters of a contractive run of the relaxed scheme.
#[derive(Clone, Debug)]
pub struct ConvergentParams {
    a21: f64,
    c21: f64,
    sigma: f64,
    tau: f64,
    op_norm: f64,
}

impl ConvergentParams {
    /// Checks that the relaxations lie in `(0, 2)`, the steps are positive,
    /// and `sigma * tau * op_norm^2` is strictly below the admissible bound.
    pub fn new(a21: f64, c21: f64, sigma: f64, tau: f64, op_norm: f64) -> Result<Self> {
        for (name, v) in [("dual relaxation", a21), ("primal relaxation", c21)] {
            if !(v > 0.0 && v < 2.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 2), got {v}"
                )));
            }
        }
        for (name, v) in [("sigma", sigma), ("tau", tau)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(op_norm >= 0.0) || !op_norm.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "operator norm bound must be nonnegative and finite, got {op_norm}"
            )));
        }
        let s = sigma * tau * op_norm * op_norm;
        let k = bound_k(a21, c21);
        if !(s < k) {
            return Err(Error::InvalidConfig(format!(
                "step product {s} is not below the admissible bound {k}"
            )));
        }
        Ok(ConvergentParams {
            a21,
            c21,
            sigma,
            tau,
            op_norm,
        })
    }

    /// Dual relaxation.
    pub fn a21(&self) -> f64 {
        self.a21
    }

    /// Primal relaxation.
    pub fn c21(&self) -> f64 {
        self.c21
    }

    /// Dual step size.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Primal step size.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Operator norm bound the validation used.
    pub fn op_norm(&self) -> f64 {
        self.op_norm
    }

    /// Admissible bound for these relaxations.
    pub fn k(&self) -> f64 {
        bound_k(self.a21, self.c21)
    }

    /// Norm-bound coefficients `(c1, d1, c2, d2)`; all positive here.
    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        lyapunov_coefficients(self.a21, self.c21, self.sigma, self.tau, self.op_norm)
    }

    fn cross_term(
        &self,
        ops: &[Arc<dyn LinOp>],
        x: &SpaceElement,
        ys: &[SpaceElement],
    ) -> Result<f64> {
        if ops.len() != ys.len() {
            return Err(Error::InvalidConfig(format!(
                "got {} dual vectors for {} operators",
                ys.len(),
                ops.len()
            )));
        }
        let mut t = 0.0;
        for (op, y) in ops.iter().zip(ys) {
            t += inner(y, &op.forward(x)?)?;
        }
        Ok(t)
    }

    /// The Lyapunov form: `|x|^2 / (2 tau c21) + |y|^2 / (2 sigma a21)
    /// - <y, Lx> / a21`, with the dual part summed over blocks.
    pub fn q1(&self, ops: &[Arc<dyn LinOp>], x: &SpaceElement, ys: &[SpaceElement]) -> Result<f64> {
        let t = self.cross_term(ops, x, ys)?;
        let y_sq: f64 = ys.iter().map(|y| y.norm().powi(2)).sum();
        Ok(
            x.norm().powi(2) / (2.0 * self.tau * self.c21) + y_sq / (2.0 * self.sigma * self.a21)
                - t / self.a21,
        )
    }

    /// The per-step decrease form: `(2 - c21) |x|^2 / (2 tau)
    /// + (2 - a21) |y|^2 / (2 sigma) - (a21 + c21 - a21 c21) <y, Lx> / a21`.
    pub fn q2(&self, ops: &[Arc<dyn LinOp>], x: &SpaceElement, ys: &[SpaceElement]) -> Result<f64> {
        let t = self.cross_term(ops, x, ys)?;
        let y_sq: f64 = ys.iter().map(|y| y.norm().powi(2)).sum();
        let coupling = a_c_coupling(self.a21, self.c21);
        Ok((2.0 - self.c21) * x.norm().powi(2) / (2.0 * self.tau)
            + (2.0 - self.a21) * y_sq / (2.0 * self.sigma)
            - coupling * t / self.a21)
    }
}

fn a_c_coupling(a21: f64, c21: f64) -> f64 {
    a21 + c21 - a21 * c21
}

/// Saddle function value `sum_i <L_i x, y_i> + F(x) - sum_i G_i*(y_i)`.
///
/// Indicator terms can make the value infinite; an unsupported conjugate is
/// an error.
pub fn lagrangian(problem: &SplitProblem, x: &SpaceElement, ys: &[SpaceElement]) -> Result<f64> {
    if ys.len() != problem.n_blocks() {
        return Err(Error::InvalidConfig(format!(
            "got {} dual vectors for {} blocks",
            ys.len(),
            problem.n_blocks()
        )));
    }
    let mut val = problem.f().value(x)?;
    for ((op, g), y) in problem.ops().iter().zip(problem.g()).zip(ys) {
        val += inner(y, &op.forward(x)?)?;
        val -= g.conjugate_value(y)?;
    }
    Ok(val)
}

/// Per-step snapshots of a two-memory run, enough to evaluate the Lyapunov
/// trace and the per-step decrease afterwards.
struct RunLog {
    x_before: Vec<SpaceElement>,
    y_after: Vec<Vec<SpaceElement>>,
    p: Vec<SpaceElement>,
    q: Vec<Vec<SpaceElement>>,
    residual: Vec<f64>,
    final_primal: SpaceElement,
}

fn collect_run(engine: &SchemeEngine, steps: usize) -> Result<RunLog> {
    let mut st = engine.init_state();
    let m = engine.problem().n_blocks();
    let mut log = RunLog {
        x_before: Vec::with_capacity(steps),
        y_after: Vec::with_capacity(steps),
        p: Vec::with_capacity(steps),
        q: Vec::with_capacity(steps),
        residual: Vec::with_capacity(steps),
        final_primal: engine.problem().domain().zeros(),
    };
    for _ in 0..steps {
        let before = st.clone();
        log.x_before.push(engine.lead_primal(&st).clone());
        let rec = engine.step_with_record(&mut st)?;
        log.y_after
            .push((0..m).map(|i| engine.lead_dual(&st, i).clone()).collect());
        log.p.push(rec.p);
        log.q.push(rec.q);
        log.residual.push(fixed_point_residual(&before, &st)?);
    }
    log.final_primal = engine.lead_primal(&st).clone();
    Ok(log)
}

/// Lyapunov values and certified per-step decreases along a run of the
/// relaxed scheme started from zero.
///
/// `v[n]` is the Lyapunov form at the shifted pair (iterate before step
/// `n`, dual iterate after step `n`); `q2_drop[n]` is the decrease form at
/// the prox displacements, which spans steps `n` and `n + 1`. There are
/// `steps + 1` values and `steps` drops.
pub struct FejerTrace {
    pub v: Vec<f64>,
    pub q2_drop: Vec<f64>,
}

impl FejerTrace {
    /// Largest increase `v[n+1] - v[n]`; nonpositive up to rounding for a
    /// contractive run.
    pub fn max_increase(&self) -> f64 {
        self.v
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest violation of the per-step estimate
    /// `v[n+1] - v[n] <= -q2_drop[n]`; nonpositive up to rounding.
    pub fn max_estimate_violation(&self) -> f64 {
        self.v
            .windows(2)
            .zip(&self.q2_drop)
            .map(|(w, d)| w[1] - w[0] + d)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs the relaxed scheme for `steps + 1` steps from zero and evaluates
/// the Lyapunov trace against the given saddle point.
pub fn fejer_trace(
    problem: &SplitProblem,
    params: &ConvergentParams,
    steps: usize,
    x_star: &SpaceElement,
    y_stars: &[SpaceElement],
) -> Result<FejerTrace> {
    let engine = SchemeEngine::new(
        problem.clone(),
        preset_new_solver(params.a21(), params.c21(), params.sigma(), params.tau())?,
    )?;
    let log = collect_run(&engine, steps + 1)?;
    let ops = problem.ops();
    let mut v = Vec::with_capacity(steps + 1);
    for n in 0..=steps {
        let dx = axpby(1.0, &log.x_before[n], -1.0, x_star)?;
        let dys = shifted_duals(&log.y_after[n], y_stars)?;
        v.push(params.q1(ops, &dx, &dys)?);
    }
    let mut q2_drop = Vec::with_capacity(steps);
    for n in 0..steps {
        let dp = axpby(1.0, &log.p[n], -1.0, &log.x_before[n])?;
        let dqs = shifted_duals(&log.q[n + 1], &log.y_after[n])?;
        q2_drop.push(params.q2(ops, &dp, &dqs)?);
    }
    Ok(FejerTrace { v, q2_drop })
}

fn shifted_duals(ys: &[SpaceElement], refs: &[SpaceElement]) -> Result<Vec<SpaceElement>> {
    ys.iter()
        .zip(refs)
        .map(|(y, r)| axpby(1.0, y, -1.0, r))
        .collect()
}

/// One row of the diagnostic trace of a run: the Lyapunov value, the
/// certified decrease, the primal objective `F + sum_i G_i(L_i x)` of the
/// new iterate, and the lead-slot residual of the step.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub iter: usize,
    pub q1: f64,
    pub q2_displacement: f64,
    pub objective: f64,
    pub fixed_point_residual: f64,
}

/// Runs `steps + 1` steps of an arbitrary two-memory engine and assembles
/// one diagnostic row per step, evaluating the quadratic forms with the
/// given parameters against the given saddle point.
pub fn trace_rows(
    engine: &SchemeEngine,
    params: &ConvergentParams,
    steps: usize,
    x_star: &SpaceElement,
    y_stars: &[SpaceElement],
) -> Result<Vec<TraceRow>> {
    let problem = engine.problem();
    let ops = problem.ops();
    let log = collect_run(engine, steps + 1)?;
    let mut rows = Vec::with_capacity(steps);
    for n in 0..steps {
        let dx = axpby(1.0, &log.x_before[n], -1.0, x_star)?;
        let dys = shifted_duals(&log.y_after[n], y_stars)?;
        let q1 = params.q1(ops, &dx, &dys)?;
        let dp = axpby(1.0, &log.p[n], -1.0, &log.x_before[n])?;
        let dqs = shifted_duals(&log.q[n + 1], &log.y_after[n])?;
        let q2 = params.q2(ops, &dp, &dqs)?;
        let x_new = &log.x_before[n + 1];
        let objective = problem.objective(x_new)?;
        rows.push(TraceRow {
            iter: n,
            q1,
            q2_displacement: q2,
            objective,
            fixed_point_residual: log.residual[n],
        });
    }
    Ok(rows)
}

/// Ergodic duality-gap data for a run of the relaxed scheme from zero.
pub struct ErgodicReport {
    /// Mean of the primal prox outputs of steps `0 .. n`.
    pub primal_mean: SpaceElement,
    /// Blockwise means of the dual prox outputs of steps `1 ..= n`.
    pub dual_means: Vec<SpaceElement>,
    /// Dual iterate after the first step, entering the gap bound.
    pub y_first: Vec<SpaceElement>,
    /// Per-step prox outputs, for the sharper minimum-over-iterates form.
    pub p: Vec<SpaceElement>,
    pub q_next: Vec<Vec<SpaceElement>>,
}

/// Runs `n_steps + 1` steps and collects the ergodic means entering the
/// duality-gap bound.
pub fn ergodic_report(
    problem: &SplitProblem,
    params: &ConvergentParams,
    n_steps: usize,
) -> Result<ErgodicReport> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }
    let engine = SchemeEngine::new(
        problem.clone(),
        preset_new_solver(params.a21(), params.c21(), params.sigma(), params.tau())?,
    )?;
    let log = collect_run(&engine, n_steps + 1)?;
    let m = problem.n_blocks();
    let mut primal_mean = problem.domain().zeros();
    for p in &log.p[..n_steps] {
        crate::tensor::axpby_into(1.0 / n_steps as f64, p, 1.0, &mut primal_mean)?;
    }
    let mut dual_means: Vec<SpaceElement> =
        (0..m).map(|i| problem.ops()[i].range().zeros()).collect();
    for qs in &log.q[1..=n_steps] {
        for (mean, q) in dual_means.iter_mut().zip(qs) {
            crate::tensor::axpby_into(1.0 / n_steps as f64, q, 1.0, mean)?;
        }
    }
    Ok(ErgodicReport {
        primal_mean,
        dual_means,
        y_first: log.y_after[0].clone(),
        p: log.p[..n_steps].to_vec(),
        q_next: log.q[1..=n_steps].to_vec(),
    })
}

/// The ergodic gap bound `q1(x0 - x, y1 - y) / n` for a zero start.
pub fn ergodic_gap_bound(
    problem: &SplitProblem,
    params: &ConvergentParams,
    report: &ErgodicReport,
    n_steps: usize,
    x: &SpaceElement,
    ys: &[SpaceElement],
) -> Result<f64> {
    let dx = x.scaled(-1.0);
    let dys = shifted_duals(&report.y_first, ys)?;
    Ok(params.q1(problem.ops(), &dx, &dys)? / n_steps as f64)
}

/// Accumulated strong-convergence data: with `F` strongly convex with
/// modulus `mu`, the weighted sum of squared prox distances to the primal
/// solution stays below the initial Lyapunov value.
pub struct StrongConvergenceReport {
    pub accumulated: f64,
    pub bound: f64,
}

/// Runs `n_steps` steps from zero and accumulates
/// `mu * sum |p_n - x_star|^2` against the initial Lyapunov value.
pub fn strong_convergence_report(
    problem: &SplitProblem,
    params: &ConvergentParams,
    mu: f64,
    n_steps: usize,
    x_star: &SpaceElement,
    y_stars: &[SpaceElement],
) -> Result<StrongConvergenceReport> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "strong convexity modulus must be positive, got {mu}"
        )));
    }
    let engine = SchemeEngine::new(
        problem.clone(),
        preset_new_solver(params.a21(), params.c21(), params.sigma(), params.tau())?,
    )?;
    let log = collect_run(&engine, n_steps)?;
    let mut accumulated = 0.0;
    for p in &log.p {
        accumulated += mu * axpby(1.0, p, -1.0, x_star)?.norm().powi(2);
    }
    let dx = x_star.scaled(-1.0);
    let dys = shifted_duals(&log.y_after[0], y_stars)?;
    let bound = params.q1(problem.ops(), &dx, &dys)?;
    Ok(StrongConvergenceReport { accumulated, bound })
}

/// Stacked operator-norm bound `sqrt(sum_i |L_i|^2)` from the stored
/// per-operator bounds.
pub fn stacked_norm_bound(problem: &SplitProblem) -> f64 {
    problem
        .ops()
        .iter()
        .map(|op| op.norm_bound().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Long extrapolated primal-dual run that serves as a numerical reference
/// solution.
///
/// Runs `base_iters` steps with unit extrapolation and both steps at
/// `0.95 / |L|` for the stacked norm, then checks the lead-slot residual
/// of the last step against `residual_gate`. If the gate is missed the
/// iteration count is doubled, up to eight times the base, before giving
/// up with a `NotConverged` error.
pub fn reference_saddle(
    problem: &SplitProblem,
    base_iters: usize,
    residual_gate: f64,
) -> Result<(SpaceElement, Vec<SpaceElement>)> {
    if base_iters == 0 {
        return Err(Error::InvalidArgument("need at least one iteration".into()));
    }
    let norm = stacked_norm_bound(problem);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "stacked norm bound must be positive and finite, got {norm}"
        )));
    }
    let step = 0.95 / norm;
    let engine = SchemeEngine::new(problem.clone(), preset_pdhg(1.0, step, step)?)?;
    let mut st = engine.init_state();
    let mut done = 0usize;
    for target in [base_iters, 2 * base_iters, 4 * base_iters, 8 * base_iters] {
        if target > done + 1 {
            engine.run(&mut st, target - done - 1)?;
        }
        let before = st.clone();
        engine.step(&mut st)?;
        done = target;
        let residual = fixed_point_residual(&before, &st)?;
        if !engine.lead_primal(&st).all_finite() {
            return Err(Error::NotConverged(
                "reference run produced non-finite iterates".into(),
            ));
        }
        if residual <= residual_gate {
            let x = engine.lead_primal(&st).clone();
            let ys = (0..problem.n_blocks())
                .map(|i| engine.lead_dual(&st, i).clone())
                .collect();
            return Ok((x, ys));
        }
    }
    Err(Error::NotConverged(format!(
        "reference run missed the residual gate {residual_gate} after {done} iterations"
    )))
}

/// A small saddle-point problem with a closed-form solution: quadratic
/// distance terms on both sides coupled by a diagonal operator.
///
/// With `F(x) = |x - a|^2`, `G(z) = |z - b|^2` and `L = diag(l)`, the
/// saddle point is `x_i = (a_i + l_i b_i) / (1 + l_i^2)` and
/// `y = 2 (L x - b)` entrywise.
pub fn diag_quadratic_toy(
    n: usize,
    seed: u64,
) -> Result<(SplitProblem, SpaceElement, SpaceElement)> {
    let mut rng = RngStream::new(seed);
    let domain = Space::new(vec![n], "diag-toy")?;
    let a = gaussian_like(&domain.zeros(), &mut rng);
    let b = gaussian_like(&domain.zeros(), &mut rng);
    let diag: Vec<f64> = (0..n).map(|_| rng.next_uniform(-2.0, 2.0)).collect();
    let mut x_star = domain.zeros();
    let mut y_star = domain.zeros();
    for i in 0..n {
        let l = diag[i];
        let xs = (a.data()[i] + l * b.data()[i]) / (1.0 + l * l);
        x_star.data_mut()[i] = xs;
        y_star.data_mut()[i] = 2.0 * (l * xs - b.data()[i]);
    }
    let problem = SplitProblem::new(
        ProxFn::sq_l2_dist(a, 1.0)?,
        vec![Arc::new(DiagOp::new(domain, diag)?)],
        vec![ProxFn::sq_l2_dist(b, 1.0)?],
    )?;
    Ok((problem, x_star, y_star))
}
