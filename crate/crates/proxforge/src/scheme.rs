//! Multi-memory primal-dual iteration engine driven by coefficient matrices.
//!
//! The engine keeps `N` primal memory slots and, for each dual block, `M`
//! dual memory slots. One step does, in order:
//!
//! 1. per dual block `i`: replace slot 1 of the dual stack by `L_i` applied
//!    to primal slot 1, mix the stack with `B_i`, apply the conjugate prox
//!    of `G_i` at scale `sigma_i` to slot 1, and mix with `A_i` to obtain
//!    the new dual slots;
//! 2. replace slot 1 of the primal stack by the sum of adjoints of the new
//!    dual slot-1 entries, mix with `D`, apply the prox of `F` at scale
//!    `tau` to slot 1, and mix with `C` to obtain the new primal slots.
//!
//! Every matrix can be a cycle (one matrix per residue of the iteration
//! counter), which expresses alternating schemes. Each step applies every
//! `L_i` exactly once forward and once in adjoint.
//!
//! With two memory slots, the last primal/dual slots carry the iterates of
//! the classic schemes; the provided presets reproduce extrapolated
//! primal-dual iterations, a primal-dual split of Douglas-Rachford type, a
//! relaxed two-parameter family containing it, and a forward-backward-
//! forward scheme that uses two engine steps per outer iteration.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::LinOp;
use crate::prox::ProxFn;
use crate::tensor::{axpby_into, RngStream, Space, SpaceElement};

/// A cycle of square matrices selected by iteration index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatSeq {
    dim: usize,
    mats: Vec<Vec<f64>>,
}

impl MatSeq {
    /// A single matrix used at every iteration (row-major entries).
    pub fn constant(dim: usize, flat: Vec<f64>) -> Result<Self> {
        Self::cycle(dim, vec![flat])
    }

    /// A cycle of row-major matrices; iteration `n` uses entry `n % len`.
    pub fn cycle(dim: usize, mats: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "matrix dimension must be positive".into(),
            ));
        }
        if mats.is_empty() {
            return Err(Error::InvalidConfig(
                "matrix cycle must not be empty".into(),
            ));
        }
        for m in &mats {
            if m.len() != dim * dim {
                return Err(Error::InvalidConfig(format!(
                    "matrix has {} entries, expected {}",
                    m.len(),
                    dim * dim
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("matrix entries must be finite".into()));
            }
        }
        Ok(MatSeq { dim, mats })
    }

    /// Side length of each matrix.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cycle length.
    pub fn cycle_len(&self) -> usize {
        self.mats.len()
    }

    /// The matrix used at iteration `iter`.
    pub fn at(&self, iter: usize) -> &[f64] {
        &self.mats[iter % self.mats.len()]
    }
}

/// A cycle of positive step sizes selected by iteration index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepSeq {
    vals: Vec<f64>,
}

impl StepSeq {
    /// A single step size used at every iteration.
    pub fn constant(v: f64) -> Result<Self> {
        Self::cycle(vec![v])
    }

    /// A cycle of step sizes; iteration `n` uses entry `n % len`.
    pub fn cycle(vals: Vec<f64>) -> Result<Self> {
        if vals.is_empty() {
            return Err(Error::InvalidConfig("step cycle must not be empty".into()));
        }
        if vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step sizes must be positive and finite, got {vals:?}"
            )));
        }
        Ok(StepSeq { vals })
    }

    /// Cycle length.
    pub fn cycle_len(&self) -> usize {
        self.vals.len()
    }

    /// The step size used at iteration `iter`.
    pub fn at(&self, iter: usize) -> f64 {
        self.vals[iter % self.vals.len()]
    }
}

/// The full coefficient set of a scheme.
///
/// `a`/`b` hold one `M x M` matrix cycle per dual block (or a single entry
/// broadcast to all blocks), `c`/`d` are `N x N`, `sigma` holds one step
/// cycle per dual block (broadcastable), and `tau` is the primal step
/// cycle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemeMatrices {
    pub a: Vec<MatSeq>,
    pub b: Vec<MatSeq>,
    pub c: MatSeq,
    pub d: MatSeq,
    pub sigma: Vec<StepSeq>,
    pub tau: StepSeq,
}

impl SchemeMatrices {
    /// Number of primal memory slots `N`.
    pub fn n_primal(&self) -> usize {
        self.c.dim()
    }

    /// Number of dual memory slots `M`.
    pub fn dual_memory(&self) -> usize {
        self.a.first().map(|m| m.dim()).unwrap_or(0)
    }

    /// Checks internal consistency and compatibility with `m_blocks` dual
    /// blocks, without broadcasting.
    pub fn validate(&self, m_blocks: usize) -> Result<()> {
        if self.c.dim() != self.d.dim() {
            return Err(Error::InvalidConfig(format!(
                "primal matrices disagree on memory: C is {}, D is {}",
                self.c.dim(),
                self.d.dim()
            )));
        }
        if self.a.is_empty() || self.b.is_empty() || self.sigma.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one dual matrix pair and step cycle".into(),
            ));
        }
        let m_dual = self.a[0].dim();
        for (name, seqs) in [("A", &self.a), ("B", &self.b)] {
            for s in seqs.iter() {
                if s.dim() != m_dual {
                    return Err(Error::InvalidConfig(format!(
                        "all {name} matrices must share dual memory {m_dual}, found {}",
                        s.dim()
                    )));
                }
            }
        }
        for (name, len) in [
            ("A", self.a.len()),
            ("B", self.b.len()),
            ("sigma", self.sigma.len()),
        ] {
            if len != 1 && len != m_blocks {
                return Err(Error::InvalidConfig(format!(
                    "{name} provides {len} entries; need 1 (broadcast) or {m_blocks}"
                )));
            }
        }
        Ok(())
    }

    fn broadcast(mut self, m_blocks: usize) -> Self {
        if self.a.len() == 1 && m_blocks > 1 {
            self.a = vec![self.a[0].clone(); m_blocks];
        }
        if self.b.len() == 1 && m_blocks > 1 {
            self.b = vec![self.b[0].clone(); m_blocks];
        }
        if self.sigma.len() == 1 && m_blocks > 1 {
            self.sigma = vec![self.sigma[0].clone(); m_blocks];
        }
        self
    }
}

fn two_by_two(entries: [f64; 4]) -> MatSeq {
    MatSeq::constant(2, entries.to_vec()).expect("2x2 literal")
}

/// Extrapolated primal-dual preset with extrapolation `theta` and steps
/// `sigma`, `tau`.
///
/// The last slots carry the usual iterates: slot 2 of the primal memory is
/// the running solution estimate, slot 1 its extrapolation.
pub fn preset_pdhg(theta: f64, sigma: f64, tau: f64) -> Result<SchemeMatrices> {
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "extrapolation must be nonnegative and finite, got {theta}"
        )));
    }
    let c11 = 1.0 + theta;
    // Constructed so the first row sums to exactly one in floating point.
    let c12 = -(c11 - 1.0);
    Ok(SchemeMatrices {
        a: vec![two_by_two([1.0, 0.0, 1.0, 0.0])],
        b: vec![two_by_two([sigma, 1.0, 0.0, 1.0])],
        c: two_by_two([c11, c12, 1.0, 0.0]),
        d: two_by_two([-tau, 1.0, 0.0, 1.0]),
        sigma: vec![StepSeq::constant(sigma)?],
        tau: StepSeq::constant(tau)?,
    })
}

/// Primal-dual Douglas-Rachford preset with relaxation `lambda` in `(0, 2)`.
pub fn preset_dr(lambda: f64, sigma: f64, tau: f64) -> Result<SchemeMatrices> {
    if !(lambda > 0.0 && lambda < 2.0) {
        return Err(Error::InvalidConfig(format!(
            "relaxation must lie in (0, 2), got {lambda}"
        )));
    }
    let l2 = 1.0 - lambda;
    Ok(SchemeMatrices {
        a: vec![two_by_two([lambda, l2, lambda, l2])],
        b: vec![two_by_two([sigma, 1.0, 0.0, 1.0])],
        c: two_by_two([2.0, -1.0, lambda, l2]),
        d: two_by_two([-tau, 1.0, 0.0, 1.0]),
        sigma: vec![StepSeq::constant(sigma)?],
        tau: StepSeq::constant(tau)?,
    })
}

/// Two-parameter relaxed preset with dual relaxation `a21` and primal
/// relaxation `c21`, both in `(0, 2)`. Reduces to the Douglas-Rachford
/// preset when `a21 == c21`.
pub fn preset_new_solver(a21: f64, c21: f64, sigma: f64, tau: f64) -> Result<SchemeMatrices> {
    for (name, v) in [("dual relaxation", a21), ("primal relaxation", c21)] {
        if !(v > 0.0 && v < 2.0) {
            return Err(Error::InvalidConfig(format!(
                "{name} must lie in (0, 2), got {v}"
            )));
        }
    }
    let ratio = c21 / a21;
    let c11 = 1.0 + ratio;
    // Constructed so the first row sums to exactly one in floating point.
    let c12 = -(c11 - 1.0);
    Ok(SchemeMatrices {
        a: vec![two_by_two([a21, 1.0 - a21, a21, 1.0 - a21])],
        b: vec![two_by_two([sigma, 1.0, 0.0, 1.0])],
        c: two_by_two([c11, c12, c21, 1.0 - c21]),
        d: two_by_two([-tau, 1.0, 0.0, 1.0]),
        sigma: vec![StepSeq::constant(sigma)?],
        tau: StepSeq::constant(tau)?,
    })
}

/// Forward-backward-forward preset over a cycle of step sizes.
///
/// Each outer iteration takes two engine steps with shared step size, so a
/// step-size list `[g0, g1]` produces the engine cycle `[g0, g0, g1, g1]`.
/// Three memory slots are used; the outer iterates live in slot 3.
pub fn preset_fbf(gammas: &[f64]) -> Result<SchemeMatrices> {
    if gammas.is_empty() || gammas.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidConfig(
            "need a non-empty list of positive step sizes".into(),
        ));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut c = Vec::new();
    let mut d = Vec::new();
    let mut steps = Vec::new();
    for &g in gammas {
        // First half-step: resolvent evaluations at the current iterates.
        a.push(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        b.push(vec![g, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        c.push(vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        d.push(vec![-g, 0.0, 1.0, g, 0.0, 0.0, 0.0, 0.0, 1.0]);
        // Second half-step: the correction using the stored intermediates.
        a.push(vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        b.push(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, g, 0.0, 1.0]);
        c.push(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        d.push(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -g, 0.0, 1.0]);
        steps.push(g);
        steps.push(g);
    }
    Ok(SchemeMatrices {
        a: vec![MatSeq::cycle(3, a)?],
        b: vec![MatSeq::cycle(3, b)?],
        c: MatSeq::cycle(3, c)?,
        d: MatSeq::cycle(3, d)?,
        sigma: vec![StepSeq::cycle(steps.clone())?],
        tau: StepSeq::cycle(steps)?,
    })
}

fn embed_two_by_two(flat: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    out[0] = flat[0];
    out[dim - 1] = flat[1];
    out[(dim - 1) * dim] = flat[2];
    out[dim * dim - 1] = flat[3];
    out
}

fn embed_seq(seq: &MatSeq, dim: usize) -> Result<MatSeq> {
    let mats = (0..seq.cycle_len())
        .map(|n| embed_two_by_two(seq.at(n), dim))
        .collect();
    MatSeq::cycle(dim, mats)
}

/// Re-expresses a two-memory scheme with more memory slots.
///
/// The first slot (which feeds the operators) and the last slot (which
/// carries the iterates) keep their coefficients; the added middle slots
/// stay zero for the whole run. The embedded scheme produces bit-identical
/// iterates, which makes it a faithful warm start when training all
/// coefficients of a larger layout.
pub fn embed_two_memory(
    scheme: &SchemeMatrices,
    n_primal: usize,
    m_dual: usize,
) -> Result<SchemeMatrices> {
    if scheme.n_primal() != 2 || scheme.dual_memory() != 2 {
        return Err(Error::InvalidConfig(format!(
            "embedding starts from two memory slots, got N={}, M={}",
            scheme.n_primal(),
            scheme.dual_memory()
        )));
    }
    if n_primal < 2 || m_dual < 2 {
        return Err(Error::InvalidConfig(
            "embedding targets need at least two memory slots".into(),
        ));
    }
    Ok(SchemeMatrices {
        a: scheme
            .a
            .iter()
            .map(|m| embed_seq(m, m_dual))
            .collect::<Result<_>>()?,
        b: scheme
            .b
            .iter()
            .map(|m| embed_seq(m, m_dual))
            .collect::<Result<_>>()?,
        c: embed_seq(&scheme.c, n_primal)?,
        d: embed_seq(&scheme.d, n_primal)?,
        sigma: scheme.sigma.clone(),
        tau: scheme.tau.clone(),
    })
}

/// Verifies the structural fixed-point conditions of a constant two-memory
/// scheme, using exact floating-point comparisons.
///
/// Preconditions: two memory slots on both sides, cycle length one, and the
/// second rows of every `B` and of `D` equal to `(0, 1)` so the second
/// slots carry the iterates unchanged. The conditions then guarantee that
/// a saddle point, injected into the memory slots with the matching row
/// sums, is a fixed point of the iteration. All presets except the
/// forward-backward-forward one satisfy the conditions exactly for their
/// whole parameter range.
pub fn check_fixed_point_consistency(scheme: &SchemeMatrices) -> Result<()> {
    if scheme.n_primal() != 2 || scheme.dual_memory() != 2 {
        return Err(Error::InvalidConfig(format!(
            "consistency check needs two memory slots on both sides, got N={}, M={}",
            scheme.n_primal(),
            scheme.dual_memory()
        )));
    }
    let constant = scheme.c.cycle_len() == 1
        && scheme.d.cycle_len() == 1
        && scheme.tau.cycle_len() == 1
        && scheme.a.iter().all(|m| m.cycle_len() == 1)
        && scheme.b.iter().all(|m| m.cycle_len() == 1)
        && scheme.sigma.iter().all(|s| s.cycle_len() == 1);
    if !constant {
        return Err(Error::InvalidConfig(
            "consistency check needs constant (cycle length one) coefficients".into(),
        ));
    }
    let c = scheme.c.at(0);
    let d = scheme.d.at(0);
    let tau = scheme.tau.at(0);
    if d[2] != 0.0 || d[3] != 1.0 {
        return Err(Error::InvalidConfig(
            "second row of D must be (0, 1) so the primal iterate slot is preserved".into(),
        ));
    }
    if c[2] + c[3] != 1.0 {
        return Err(Error::InvalidConfig(format!(
            "second row of C must sum to one, got {} + {}",
            c[2], c[3]
        )));
    }
    let c_sum = c[0] + c[1];
    let n_blocks = scheme.a.len();
    for i in 0..n_blocks {
        let a = scheme.a[i].at(0);
        let b = scheme.b[i].at(0);
        let sigma = scheme.sigma[if scheme.sigma.len() == 1 { 0 } else { i }].at(0);
        if b[2] != 0.0 || b[3] != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "second row of B[{i}] must be (0, 1) so the dual iterate slot is preserved"
            )));
        }
        if a[2] + a[3] != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "second row of A[{i}] must sum to one, got {} + {}",
                a[2], a[3]
            )));
        }
        if b[1] != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "B[{i}] must pass the dual iterate through with unit weight, got {}",
                b[1]
            )));
        }
        if b[0] * c_sum != sigma {
            return Err(Error::InvalidConfig(format!(
                "B[{i}] slot-1 gain times the C row sum must equal sigma: {} * {} != {}",
                b[0], c_sum, sigma
            )));
        }
        let a_sum = a[0] + a[1];
        if d[0] * a_sum != -tau {
            return Err(Error::InvalidConfig(format!(
                "D slot-1 gain times the A[{i}] row sum must equal -tau: {} * {} != {}",
                d[0], a_sum, -tau
            )));
        }
    }
    if d[1] != 1.0 {
        return Err(Error::InvalidConfig(format!(
            "D must pass the primal iterate through with unit weight, got {}",
            d[1]
        )));
    }
    Ok(())
}

/// Draws a random constant two-memory scheme that satisfies
/// [`check_fixed_point_consistency`] exactly.
///
/// Row sums that must multiply into `sigma` and `tau` are drawn from
/// power-of-two values so the products are exact in floating point.
pub fn random_fixed_point_consistent(
    sigma: f64,
    tau: f64,
    rng: &mut RngStream,
) -> Result<SchemeMatrices> {
    let sums = [0.5, 1.0, 2.0];
    let c_sum = sums[rng.next_index(3)];
    let a_sum = sums[rng.next_index(3)];
    let c11 = c_sum + rng.next_uniform(0.0, 1.5);
    let c12 = -(c11 - c_sum);
    let a11 = a_sum + rng.next_uniform(0.0, 1.5);
    let a12 = -(a11 - a_sum);
    let a21 = rng.next_uniform(0.05, 1.95);
    let c21 = rng.next_uniform(0.05, 1.95);
    Ok(SchemeMatrices {
        a: vec![two_by_two([a11, a12, a21, 1.0 - a21])],
        b: vec![two_by_two([sigma / c_sum, 1.0, 0.0, 1.0])],
        c: two_by_two([c11, c12, c21, 1.0 - c21]),
        d: two_by_two([-tau / a_sum, 1.0, 0.0, 1.0]),
        sigma: vec![StepSeq::constant(sigma)?],
        tau: StepSeq::constant(tau)?,
    })
}

/// A saddle-point problem split as one primal function, several coupling
/// operators sharing a domain, and one dual function per operator.
#[derive(Clone)]
pub struct SplitProblem {
    f: ProxFn,
    ops: Vec<Arc<dyn LinOp>>,
    g: Vec<ProxFn>,
    domain: Space,
}

impl SplitProblem {
    /// Bundles the pieces, checking that the operators share one domain and
    /// that there is one dual function per operator.
    pub fn new(f: ProxFn, ops: Vec<Arc<dyn LinOp>>, g: Vec<ProxFn>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::InvalidConfig(
                "need at least one coupling operator".into(),
            ));
        }
        if g.len() != ops.len() {
            return Err(Error::InvalidConfig(format!(
                "got {} dual functions for {} operators",
                g.len(),
                ops.len()
            )));
        }
        let domain = ops[0].domain().clone();
        for op in &ops[1..] {
            if *op.domain() != domain {
                return Err(Error::SpaceMismatch(
                    "coupling operators must share a domain".into(),
                ));
            }
        }
        Ok(SplitProblem { f, ops, g, domain })
    }

    /// The primal function.
    pub fn f(&self) -> &ProxFn {
        &self.f
    }

    /// The coupling operators.
    pub fn ops(&self) -> &[Arc<dyn LinOp>] {
        &self.ops
    }

    /// The dual functions, one per operator.
    pub fn g(&self) -> &[ProxFn] {
        &self.g
    }

    /// The shared primal domain.
    pub fn domain(&self) -> &Space {
        &self.domain
    }

    /// Number of dual blocks.
    pub fn n_blocks(&self) -> usize {
        self.ops.len()
    }

    /// The primal objective `F(x) + sum_i G_i(L_i x)`; may be infinite.
    pub fn objective(&self, x: &SpaceElement) -> Result<f64> {
        let mut val = self.f.value(x)?;
        for (op, g) in self.ops.iter().zip(&self.g) {
            val += g.value(&op.forward(x)?)?;
        }
        Ok(val)
    }

    /// A canonical subgradient of the primal objective:
    /// `dF(x) + sum_i L_i* dG_i(L_i x)` with the zero selection at kinks.
    pub fn objective_subgradient(&self, x: &SpaceElement) -> Result<SpaceElement> {
        let mut out = self.f.subgradient(x)?;
        for (op, g) in self.ops.iter().zip(&self.g) {
            let part = op.adjoint(&g.subgradient(&op.forward(x)?)?)?;
            axpby_into(1.0, &part, 1.0, &mut out)?;
        }
        Ok(out)
    }
}

/// Memory slots of a running scheme.
#[derive(Clone, Debug)]
pub struct SolverState {
    /// `N` primal slots.
    pub primal: Vec<SpaceElement>,
    /// Per dual block, `M` dual slots.
    pub dual: Vec<Vec<SpaceElement>>,
    /// Number of steps taken.
    pub iter: usize,
}

/// Prox outputs of one step: the primal prox result and one conjugate prox
/// result per dual block.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub p: SpaceElement,
    pub q: Vec<SpaceElement>,
}

/// A scheme bound to a problem, ready to iterate.
pub struct SchemeEngine {
    problem: SplitProblem,
    scheme: SchemeMatrices,
}

impl SchemeEngine {
    /// Validates the scheme against the problem and broadcasts per-block
    /// coefficients.
    pub fn new(problem: SplitProblem, scheme: SchemeMatrices) -> Result<Self> {
        let m = problem.n_blocks();
        scheme.validate(m)?;
        let scheme = scheme.broadcast(m);
        Ok(SchemeEngine { problem, scheme })
    }

    /// The bound problem.
    pub fn problem(&self) -> &SplitProblem {
        &self.problem
    }

    /// The broadcast scheme coefficients.
    pub fn scheme(&self) -> &SchemeMatrices {
        &self.scheme
    }

    /// The all-zero starting state.
    pub fn init_state(&self) -> SolverState {
        let n = self.scheme.n_primal();
        let m_dual = self.scheme.dual_memory();
        let primal = (0..n).map(|_| self.problem.domain.zeros()).collect();
        let dual = self
            .problem
            .ops
            .iter()
            .map(|op| (0..m_dual).map(|_| op.range().zeros()).collect())
            .collect();
        SolverState {
            primal,
            dual,
            iter: 0,
        }
    }

    fn mix(mat: &[f64], dim: usize, slots: &[&SpaceElement]) -> Result<Vec<SpaceElement>> {
        debug_assert_eq!(slots.len(), dim);
        let mut out = Vec::with_capacity(dim);
        for j in 0..dim {
            let mut acc = slots[0].zeros_like();
            for (k, slot) in slots.iter().enumerate() {
                let coef = mat[j * dim + k];
                if coef != 0.0 {
                    axpby_into(coef, slot, 1.0, &mut acc)?;
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// Advances the state by one step, returning the prox outputs.
    pub fn step_with_record(&self, state: &mut SolverState) -> Result<StepRecord> {
        let n = state.iter;
        let n_primal = self.scheme.n_primal();
        let m_dual = self.scheme.dual_memory();
        if state.primal.len() != n_primal || state.dual.len() != self.problem.n_blocks() {
            return Err(Error::InvalidConfig(
                "state does not match the scheme's memory layout".into(),
            ));
        }

        let tau = self.scheme.tau.at(n);
        let cmat = self.scheme.c.at(n);
        let dmat = self.scheme.d.at(n);

        let mut new_dual: Vec<Vec<SpaceElement>> = Vec::with_capacity(self.problem.n_blocks());
        let mut q_rec: Vec<SpaceElement> = Vec::with_capacity(self.problem.n_blocks());
        for (i, op) in self.problem.ops.iter().enumerate() {
            let amat = self.scheme.a[i].at(n);
            let bmat = self.scheme.b[i].at(n);
            let sigma = self.scheme.sigma[i].at(n);
            let fresh = op.forward(&state.primal[0])?;
            let mut slots: Vec<&SpaceElement> = Vec::with_capacity(m_dual);
            slots.push(&fresh);
            for y in &state.dual[i][1..] {
                slots.push(y);
            }
            let mixed = Self::mix(bmat, m_dual, &slots)?;
            let q = self.problem.g[i].prox_conjugate(sigma, &mixed[0])?;
            let mut slots: Vec<&SpaceElement> = Vec::with_capacity(m_dual);
            slots.push(&q);
            for w in &mixed[1..] {
                slots.push(w);
            }
            new_dual.push(Self::mix(amat, m_dual, &slots)?);
            q_rec.push(q);
        }

        let mut adj_sum = self.problem.domain.zeros();
        for (op, yb) in self.problem.ops.iter().zip(&new_dual) {
            let part = op.adjoint(&yb[0])?;
            axpby_into(1.0, &part, 1.0, &mut adj_sum)?;
        }
        let mut slots: Vec<&SpaceElement> = Vec::with_capacity(n_primal);
        slots.push(&adj_sum);
        for x in &state.primal[1..] {
            slots.push(x);
        }
        let mixed = Self::mix(dmat, n_primal, &slots)?;
        let p = self.problem.f.prox(tau, &mixed[0])?;
        let mut slots: Vec<&SpaceElement> = Vec::with_capacity(n_primal);
        slots.push(&p);
        for w in &mixed[1..] {
            slots.push(w);
        }
        let new_primal = Self::mix(cmat, n_primal, &slots)?;

        state.primal = new_primal;
        state.dual = new_dual;
        state.iter += 1;
        Ok(StepRecord { p, q: q_rec })
    }

    /// Advances the state by one step.
    pub fn step(&self, state: &mut SolverState) -> Result<()> {
        self.step_with_record(state).map(|_| ())
    }

    /// Runs `steps` steps.
    pub fn run(&self, state: &mut SolverState, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step(state)?;
        }
        Ok(())
    }

    /// The primal slot that carries the solution estimate (the last one).
    pub fn lead_primal<'s>(&self, state: &'s SolverState) -> &'s SpaceElement {
        state.primal.last().expect("state has primal slots")
    }

    /// The dual slot of block `i` that carries the running dual iterate.
    pub fn lead_dual<'s>(&self, state: &'s SolverState, i: usize) -> &'s SpaceElement {
        state.dual[i].last().expect("state has dual slots")
    }
}

/// Distance between the lead slots of two states: the root of the squared
/// lead-primal distance plus all squared lead-dual distances.
pub fn fixed_point_residual(before: &SolverState, after: &SolverState) -> Result<f64> {
    let xb = before
        .primal
        .last()
        .ok_or_else(|| Error::InvalidConfig("state has no primal slots".into()))?;
    let xa = after.primal.last().unwrap();
    let dx = crate::tensor::axpby(1.0, xa, -1.0, xb)?;
    let mut acc = dx.norm().powi(2);
    if before.dual.len() != after.dual.len() {
        return Err(Error::InvalidConfig(
            "states disagree on dual blocks".into(),
        ));
    }
    for (yb, ya) in before.dual.iter().zip(&after.dual) {
        let db = yb
            .last()
            .ok_or_else(|| Error::InvalidConfig("state has no dual slots".into()))?;
        let da = ya.last().unwrap();
        let dy = crate::tensor::axpby(1.0, da, -1.0, db)?;
        acc += dy.norm().powi(2);
    }
    Ok(acc.sqrt())
}
