//! Learning scheme coefficients by unrolled gradient descent.
//!
//! A parameter map translates a small raw vector into the flat coefficient
//! layout of the iteration engine. Constrained maps squash their raw
//! inputs so every decoded scheme is provably convergent; free maps pass
//! raw coefficients through and flag invalid ones, turning them into an
//! infinite loss instead of an error. Training minimizes the mean terminal
//! objective of unrolled runs over a pool of problem instances with Adam,
//! a cosine step-size schedule, gradient clipping, and a stochastic unroll
//! depth, and keeps the raw vector that scored best on a validation pool.

use serde::{Deserialize, Serialize};

use crate::convergence::bound_k;
use crate::error::{Error, Result};
use crate::scheme::{preset_new_solver, preset_pdhg, SchemeEngine, SchemeMatrices, SplitProblem};
use crate::tape::{params_from_scheme, scheme_from_params, SchemeShape, SchemeTape};
use crate::tensor::RngStream;

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Which translation a [`ParamMap`] applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Three raw values squashed into extrapolation, step balance, and
    /// step ratio of the extrapolated primal-dual preset; always
    /// convergent.
    PdhgConstrained,
    /// Four raw values squashed into the two relaxations and the step
    /// sizes of the relaxed preset, keeping the step product strictly
    /// below the admissible bound; always convergent.
    NewSolverConstrained,
    /// Raw extrapolation and step sizes of the extrapolated preset,
    /// unconstrained.
    PdhgFree,
    /// The full flat coefficient layout, unconstrained.
    MatricesFree,
}

/// A translation from a raw trainable vector to engine coefficients.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMap {
    kind: MapKind,
    shape: SchemeShape,
    op_norm: f64,
}

fn two_memory_shape(n_blocks: usize) -> SchemeShape {
    SchemeShape {
        n_blocks,
        n_primal: 2,
        m_dual: 2,
    }
}

/// Per-matrix gradient sums of a block-broadcast two-memory embedding.
struct CollapsedGrads {
    a: [f64; 4],
    b: [f64; 4],
    c: [f64; 4],
    d: [f64; 4],
    sigma: f64,
    tau: f64,
}

fn broadcast_blocks(params1: &[f64], n_blocks: usize) -> Vec<f64> {
    let s1 = two_memory_shape(1);
    let sn = two_memory_shape(n_blocks);
    let mut out = vec![0.0; sn.param_len()];
    for i in 0..n_blocks {
        for r in 0..2 {
            for c in 0..2 {
                out[sn.a_index(i, r, c)] = params1[s1.a_index(0, r, c)];
                out[sn.b_index(i, r, c)] = params1[s1.b_index(0, r, c)];
            }
        }
        out[sn.sigma_index(i)] = params1[s1.sigma_index(0)];
    }
    for r in 0..2 {
        for c in 0..2 {
            out[sn.c_index(r, c)] = params1[s1.c_index(r, c)];
            out[sn.d_index(r, c)] = params1[s1.d_index(r, c)];
        }
    }
    out[sn.tau_index()] = params1[s1.tau_index()];
    out
}

fn collapse_blocks(upstream: &[f64], n_blocks: usize) -> CollapsedGrads {
    let sn = two_memory_shape(n_blocks);
    let mut g = CollapsedGrads {
        a: [0.0; 4],
        b: [0.0; 4],
        c: [0.0; 4],
        d: [0.0; 4],
        sigma: 0.0,
        tau: upstream[sn.tau_index()],
    };
    for i in 0..n_blocks {
        for r in 0..2 {
            for c in 0..2 {
                g.a[r * 2 + c] += upstream[sn.a_index(i, r, c)];
                g.b[r * 2 + c] += upstream[sn.b_index(i, r, c)];
            }
        }
        g.sigma += upstream[sn.sigma_index(i)];
    }
    for r in 0..2 {
        for c in 0..2 {
            g.c[r * 2 + c] = upstream[sn.c_index(r, c)];
            g.d[r * 2 + c] = upstream[sn.d_index(r, c)];
        }
    }
    g
}

impl ParamMap {
    /// Constrained extrapolated primal-dual map for `n_blocks` dual blocks
    /// against a coupling of norm at most `op_norm`.
    pub fn pdhg_constrained(n_blocks: usize, op_norm: f64) -> Result<Self> {
        Self::with_norm(MapKind::PdhgConstrained, n_blocks, op_norm)
    }

    /// Constrained relaxed-preset map; decoded schemes always satisfy the
    /// step-product bound strictly.
    pub fn new_solver_constrained(n_blocks: usize, op_norm: f64) -> Result<Self> {
        Self::with_norm(MapKind::NewSolverConstrained, n_blocks, op_norm)
    }

    /// Unconstrained extrapolated primal-dual map.
    pub fn pdhg_free(n_blocks: usize) -> Result<Self> {
        Self::with_norm(MapKind::PdhgFree, n_blocks, 1.0)
    }

    /// Unconstrained full-coefficient map.
    pub fn matrices_free(shape: SchemeShape) -> Result<Self> {
        if shape.n_blocks == 0 || shape.n_primal == 0 || shape.m_dual == 0 {
            return Err(Error::InvalidConfig(
                "coefficient layout must have positive dimensions".into(),
            ));
        }
        Ok(ParamMap {
            kind: MapKind::MatricesFree,
            shape,
            op_norm: 1.0,
        })
    }

    fn with_norm(kind: MapKind, n_blocks: usize, op_norm: f64) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::InvalidConfig("need at least one dual block".into()));
        }
        if !(op_norm > 0.0) || !op_norm.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "operator norm must be positive and finite, got {op_norm}"
            )));
        }
        Ok(ParamMap {
            kind,
            shape: two_memory_shape(n_blocks),
            op_norm,
        })
    }

    /// The map kind.
    pub fn kind(&self) -> MapKind {
        self.kind
    }

    /// The coefficient layout this map decodes into.
    pub fn shape(&self) -> &SchemeShape {
        &self.shape
    }

    /// The operator norm the constrained maps scale against.
    pub fn op_norm(&self) -> f64 {
        self.op_norm
    }

    /// Length of the raw vector.
    pub fn raw_len(&self) -> usize {
        match self.kind {
            MapKind::PdhgConstrained => 3,
            MapKind::NewSolverConstrained => 4,
            MapKind::PdhgFree => 3,
            MapKind::MatricesFree => self.shape.param_len(),
        }
    }

    fn check_raw(&self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.raw_len() {
            return Err(Error::InvalidArgument(format!(
                "raw vector has {} entries, map needs {}",
                raw.len(),
                self.raw_len()
            )));
        }
        Ok(())
    }

    /// Translates a raw vector into the flat coefficient layout, or `None`
    /// when the raw vector falls outside the decodable domain (then the
    /// loss is infinite by convention).
    pub fn decode(&self, raw: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_raw(raw)?;
        if raw.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        match self.kind {
            MapKind::PdhgConstrained => {
                let theta = sigmoid(raw[0]);
                let gate = sigmoid(raw[1]);
                if !(gate < 1.0) {
                    return Ok(None);
                }
                let tau = raw[2].exp() * gate / self.op_norm;
                let sigma = (-raw[2]).exp() * gate / self.op_norm;
                if !(sigma > 0.0 && sigma.is_finite() && tau > 0.0 && tau.is_finite()) {
                    return Ok(None);
                }
                let (_, p1) = params_from_scheme(&preset_pdhg(theta, sigma, tau)?)?;
                Ok(Some(broadcast_blocks(&p1, self.shape.n_blocks)))
            }
            MapKind::NewSolverConstrained => {
                let a21 = 2.0 * sigmoid(raw[0]);
                let c21 = 2.0 * sigmoid(raw[1]);
                let gate = sigmoid(raw[2]);
                if !(a21 > 0.0 && a21 < 2.0 && c21 > 0.0 && c21 < 2.0 && gate < 1.0) {
                    return Ok(None);
                }
                let root_k = bound_k(a21, c21).sqrt();
                let tau = root_k * raw[3].exp() * gate / self.op_norm;
                let sigma = root_k * (-raw[3]).exp() * gate / self.op_norm;
                if !(sigma > 0.0 && sigma.is_finite() && tau > 0.0 && tau.is_finite()) {
                    return Ok(None);
                }
                let (_, p1) = params_from_scheme(&preset_new_solver(a21, c21, sigma, tau)?)?;
                Ok(Some(broadcast_blocks(&p1, self.shape.n_blocks)))
            }
            MapKind::PdhgFree => {
                let (theta, sigma, tau) = (raw[0], raw[1], raw[2]);
                if !(sigma > 0.0 && tau > 0.0) {
                    return Ok(None);
                }
                let s1 = two_memory_shape(1);
                let mut p1 = vec![0.0; s1.param_len()];
                for (slot, v) in [
                    (s1.a_index(0, 0, 0), 1.0),
                    (s1.a_index(0, 1, 0), 1.0),
                    (s1.b_index(0, 0, 0), sigma),
                    (s1.b_index(0, 0, 1), 1.0),
                    (s1.b_index(0, 1, 1), 1.0),
                    (s1.c_index(0, 0), 1.0 + theta),
                    (s1.c_index(0, 1), -theta),
                    (s1.c_index(1, 0), 1.0),
                    (s1.d_index(0, 0), -tau),
                    (s1.d_index(0, 1), 1.0),
                    (s1.d_index(1, 1), 1.0),
                    (s1.sigma_index(0), sigma),
                    (s1.tau_index(), tau),
                ] {
                    p1[slot] = v;
                }
                Ok(Some(broadcast_blocks(&p1, self.shape.n_blocks)))
            }
            MapKind::MatricesFree => {
                let sn = &self.shape;
                for i in 0..sn.n_blocks {
                    if !(raw[sn.sigma_index(i)] > 0.0) {
                        return Ok(None);
                    }
                }
                if !(raw[sn.tau_index()] > 0.0) {
                    return Ok(None);
                }
                Ok(Some(raw.to_vec()))
            }
        }
    }

    /// Pulls a gradient in the flat coefficient layout back to the raw
    /// vector. The raw vector must be decodable.
    pub fn decode_vjp(&self, raw: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_raw(raw)?;
        if upstream.len() != self.shape.param_len() {
            return Err(Error::InvalidArgument(format!(
                "upstream gradient has {} entries, layout needs {}",
                upstream.len(),
                self.shape.param_len()
            )));
        }
        if self.decode(raw)?.is_none() {
            return Err(Error::InvalidArgument(
                "cannot differentiate the map outside its decodable domain".into(),
            ));
        }
        match self.kind {
            MapKind::MatricesFree => Ok(upstream.to_vec()),
            MapKind::PdhgFree => {
                let g = collapse_blocks(upstream, self.shape.n_blocks);
                let d_theta = g.c[0] - g.c[1];
                let d_sigma = g.b[0] + g.sigma;
                let d_tau = -g.d[0] + g.tau;
                Ok(vec![d_theta, d_sigma, d_tau])
            }
            MapKind::PdhgConstrained => {
                let g = collapse_blocks(upstream, self.shape.n_blocks);
                let theta = sigmoid(raw[0]);
                let gate = sigmoid(raw[1]);
                let tau = raw[2].exp() * gate / self.op_norm;
                let sigma = (-raw[2]).exp() * gate / self.op_norm;
                let d_theta = g.c[0] - g.c[1];
                let d_sigma = g.b[0] + g.sigma;
                let d_tau = -g.d[0] + g.tau;
                Ok(vec![
                    d_theta * theta * (1.0 - theta),
                    (d_sigma * sigma + d_tau * tau) * (1.0 - gate),
                    -d_sigma * sigma + d_tau * tau,
                ])
            }
            MapKind::NewSolverConstrained => {
                let g = collapse_blocks(upstream, self.shape.n_blocks);
                let sig1 = sigmoid(raw[0]);
                let sig2 = sigmoid(raw[1]);
                let a21 = 2.0 * sig1;
                let c21 = 2.0 * sig2;
                let gate = sigmoid(raw[2]);
                let k = bound_k(a21, c21);
                let tau = k.sqrt() * raw[3].exp() * gate / self.op_norm;
                let sigma = k.sqrt() * (-raw[3]).exp() * gate / self.op_norm;
                let d_sigma = g.b[0] + g.sigma;
                let d_tau = -g.d[0] + g.tau;
                let d_ratio = g.c[0] - g.c[1];
                let d_steps = d_sigma * sigma + d_tau * tau;
                let coupling = a21 + c21 - a21 * c21;
                // Log-derivatives of the admissible bound.
                let dlogk_da = 2.0 / a21 - 1.0 / (2.0 - a21) - 2.0 * (1.0 - c21) / coupling;
                let dlogk_dc = -1.0 / (2.0 - c21) - 2.0 * (1.0 - a21) / coupling;
                let d_a = (g.a[0] - g.a[1] + g.a[2] - g.a[3]) - d_ratio * c21 / (a21 * a21)
                    + d_steps * 0.5 * dlogk_da;
                let d_c = (g.c[2] - g.c[3]) + d_ratio / a21 + d_steps * 0.5 * dlogk_dc;
                Ok(vec![
                    d_a * a21 * (1.0 - sig1),
                    d_c * c21 * (1.0 - sig2),
                    d_steps * (1.0 - gate),
                    -d_sigma * sigma + d_tau * tau,
                ])
            }
        }
    }
}

/// Decodes a raw vector straight to scheme matrices; `None` when the raw
/// vector is outside the map's decodable domain.
pub fn decoded_scheme(map: &ParamMap, raw: &[f64]) -> Result<Option<SchemeMatrices>> {
    Ok(match map.decode(raw)? {
        Some(p) => Some(scheme_from_params(map.shape(), &p)?),
        None => None,
    })
}

/// Resolves a requested worker count: zero means the machine parallelism,
/// and the count never exceeds the number of items.
fn resolve_threads(requested: usize, n_items: usize) -> usize {
    let t = if requested == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        requested
    };
    t.clamp(1, n_items.max(1))
}

/// Mean terminal objective of engine runs of `depth` steps over the
/// instances; infinite when the raw vector is not decodable or a run
/// leaves the finite range.
pub fn evaluate(
    map: &ParamMap,
    raw: &[f64],
    instances: &[&SplitProblem],
    depth: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    let params = match map.decode(raw)? {
        Some(p) => p,
        None => return Ok(f64::INFINITY),
    };
    let scheme = scheme_from_params(map.shape(), &params)?;
    let mut total = 0.0;
    for problem in instances {
        let engine = SchemeEngine::new((*problem).clone(), scheme.clone())?;
        let mut st = engine.init_state();
        engine.run(&mut st, depth)?;
        let lead = engine.lead_primal(&st);
        if !lead.all_finite() {
            return Ok(f64::INFINITY);
        }
        total += problem.objective(lead)?;
    }
    let mean = total / instances.len() as f64;
    Ok(if mean.is_finite() {
        mean
    } else {
        f64::INFINITY
    })
}

fn instance_loss_grad(
    problem: &SplitProblem,
    shape: &SchemeShape,
    params: &[f64],
    depth: usize,
) -> Result<(f64, Option<Vec<f64>>)> {
    let tape = SchemeTape::forward(problem, shape, params, depth)?;
    let lead = tape.lead_primal();
    if !lead.all_finite() {
        return Ok((f64::INFINITY, None));
    }
    let value = problem.objective(lead)?;
    if !value.is_finite() {
        return Ok((f64::INFINITY, None));
    }
    let seed = problem.objective_subgradient(lead)?;
    let grad = tape.backward(&seed)?;
    Ok((value, Some(grad)))
}

/// Mean loss and raw-vector gradient over the instances, computed by
/// differentiating unrolled runs of `depth` steps.
///
/// Instances are distributed over up to `threads` workers (zero selects
/// the machine parallelism) and reduced in instance order, so the result
/// does not depend on the worker count. A non-decodable raw vector or a
/// diverging run yields an infinite loss with a zero gradient.
pub fn loss_grad(
    map: &ParamMap,
    raw: &[f64],
    instances: &[&SplitProblem],
    depth: usize,
    threads: usize,
) -> Result<(f64, Vec<f64>)> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    let params = match map.decode(raw)? {
        Some(p) => p,
        None => return Ok((f64::INFINITY, vec![0.0; map.raw_len()])),
    };
    let n = instances.len();
    let workers = resolve_threads(threads, n);
    let chunk = n.div_ceil(workers);
    let mut results: Vec<Option<Result<(f64, Option<Vec<f64>>)>>> = Vec::with_capacity(n);
    results.resize_with(n, || None);
    let shape = map.shape();
    let params_ref: &[f64] = &params;
    std::thread::scope(|s| {
        for (slots, probs) in results.chunks_mut(chunk).zip(instances.chunks(chunk)) {
            s.spawn(move || {
                for (slot, problem) in slots.iter_mut().zip(probs) {
                    *slot = Some(instance_loss_grad(problem, shape, params_ref, depth));
                }
            });
        }
    });
    let mut total = 0.0;
    let mut grad_sum = vec![0.0; shape.param_len()];
    let mut diverged = false;
    for slot in results {
        let (value, grad) = slot.expect("every instance slot is filled")?;
        if let Some(g) = grad {
            for (acc, gi) in grad_sum.iter_mut().zip(&g) {
                *acc += gi;
            }
        } else {
            diverged = true;
        }
        total += value;
    }
    let mean = total / n as f64;
    if diverged || !mean.is_finite() {
        return Ok((f64::INFINITY, vec![0.0; map.raw_len()]));
    }
    for g in grad_sum.iter_mut() {
        *g /= n as f64;
    }
    Ok((mean, map.decode_vjp(raw, &grad_sum)?))
}

/// Multiplicative depth jitter: a log-normal variable with unit median two
/// and mean two.
pub fn depth_jitter(rng: &mut RngStream) -> f64 {
    const SPREAD: f64 = 1.25;
    let mu = std::f64::consts::LN_2 - SPREAD * SPREAD / 2.0;
    (mu + SPREAD * rng.next_standard_normal()).exp()
}

/// Draws a training unroll depth: eight plus the jitter, rounded and
/// capped at one hundred. The mean depth is close to ten.
pub fn sample_depth(rng: &mut RngStream) -> usize {
    let d = (8.0 + depth_jitter(rng)).round();
    d.clamp(1.0, 100.0) as usize
}

/// First-moment/second-moment adaptive gradient steps.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    /// Fresh state for `dim` parameters.
    pub fn new(dim: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One bias-corrected update of `params` along `grad` with step `lr`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Training hyperparameters. Unknown keys in serialized configs are
/// rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps (the cosine schedule's horizon).
    pub steps: usize,
    /// Instances per gradient estimate.
    pub batch_size: usize,
    /// Initial step size of the cosine schedule.
    pub lr: f64,
    /// First-moment decay.
    pub beta1: f64,
    /// Second-moment decay.
    pub beta2: f64,
    /// Denominator guard.
    pub epsilon: f64,
    /// Gradient norm ceiling.
    pub clip_norm: f64,
    /// Unroll depth used for validation scoring.
    pub eval_depth: usize,
    /// Seed for depth and batch sampling.
    pub seed: u64,
    /// Worker threads for gradient batches; zero picks the machine
    /// parallelism. The result is identical for every setting.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            clip_norm: 1.0,
            eval_depth: 10,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    /// Checks ranges.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_depth == 0 {
            return Err(Error::InvalidConfig(
                "steps, batch_size, and eval_depth must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(
                "lr, clip_norm, and epsilon must be positive".into(),
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        Ok(())
    }
}

/// One line of the training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTraceRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub depth: usize,
}

/// Result of a training run: the validation-best raw vector, the final
/// raw vector, and the per-step record.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_raw: Vec<f64>,
    pub best_val_loss: f64,
    pub final_raw: Vec<f64>,
    pub trace: Vec<TrainTraceRow>,
}

/// Trains the raw vector on `train_pool`, scoring every step on
/// `val_pool` at the evaluation depth and returning the best scorer.
///
/// Batches are drawn with replacement, the unroll depth is resampled each
/// step, the step size follows a half-cosine from `lr` to zero, and
/// gradients are clipped in norm. A step with infinite loss leaves the
/// parameters and optimizer state untouched. Two runs with the same
/// inputs produce bit-identical outcomes regardless of the thread count.
pub fn train(
    map: &ParamMap,
    raw0: &[f64],
    train_pool: &[SplitProblem],
    val_pool: &[SplitProblem],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pool.is_empty() || val_pool.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation pools must be non-empty".into(),
        ));
    }
    if raw0.len() != map.raw_len() {
        return Err(Error::InvalidArgument(format!(
            "starting vector has {} entries, map needs {}",
            raw0.len(),
            map.raw_len()
        )));
    }
    let base = RngStream::new(cfg.seed);
    let mut depth_rng = base.substream(0);
    let mut batch_rng = base.substream(1);
    let val_refs: Vec<&SplitProblem> = val_pool.iter().collect();

    let mut raw = raw0.to_vec();
    let mut best_raw = raw.clone();
    let mut best_val = evaluate(map, &raw, &val_refs, cfg.eval_depth)?;
    let mut adam = Adam::new(raw.len(), cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut trace = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t as f64 / cfg.steps as f64).cos());
        let depth = sample_depth(&mut depth_rng);
        let batch: Vec<&SplitProblem> = (0..cfg.batch_size)
            .map(|_| &train_pool[batch_rng.next_index(train_pool.len())])
            .collect();
        let (train_loss, mut grad) = loss_grad(map, &raw, &batch, depth, cfg.threads)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if train_loss.is_finite() {
            if grad_norm > cfg.clip_norm {
                let scale = cfg.clip_norm / grad_norm;
                for g in grad.iter_mut() {
                    *g *= scale;
                }
            }
            adam.step(&mut raw, &grad, lr);
        }
        let val_loss = evaluate(map, &raw, &val_refs, cfg.eval_depth)?;
        if val_loss < best_val {
            best_val = val_loss;
            best_raw = raw.clone();
        }
        trace.push(TrainTraceRow {
            step: t,
            train_loss,
            val_loss,
            lr,
            grad_norm,
            depth,
        });
    }
    Ok(TrainOutcome {
        best_raw,
        best_val_loss: best_val,
        final_raw: raw,
        trace,
    })
}

/// A quadratic instance `x -> x' H x / 2 - b' x` with a starting point,
/// used by the closed-form one-step baseline.
#[derive(Clone, Debug)]
pub struct QuadraticInstance {
    h: Vec<f64>,
    b: Vec<f64>,
    x0: Vec<f64>,
    n: usize,
}

impl QuadraticInstance {
    /// Bundles a symmetric `n x n` matrix (row-major), a linear term, and
    /// a starting point.
    pub fn new(h: Vec<f64>, b: Vec<f64>, x0: Vec<f64>) -> Result<Self> {
        let n = b.len();
        if n == 0 || h.len() != n * n || x0.len() != n {
            return Err(Error::InvalidShape(format!(
                "quadratic instance needs n x n, n, n entries; got {}, {}, {}",
                h.len(),
                b.len(),
                x0.len()
            )));
        }
        for r in 0..n {
            for c in 0..r {
                if (h[r * n + c] - h[c * n + r]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(
                        "quadratic matrix must be symmetric".into(),
                    ));
                }
            }
        }
        Ok(QuadraticInstance { h, b, x0, n })
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for r in 0..self.n {
            let mut acc = 0.0;
            for c in 0..self.n {
                acc += self.h[r * self.n + c] * x[c];
            }
            out[r] = acc;
        }
        out
    }

    fn start_gradient(&self) -> Vec<f64> {
        let hx = self.matvec(&self.x0);
        hx.iter().zip(&self.b).map(|(v, b)| v - b).collect()
    }

    /// Objective value at `x`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let hx = self.matvec(x);
        let quad: f64 = x.iter().zip(&hx).map(|(xi, hi)| xi * hi).sum();
        let lin: f64 = x.iter().zip(&self.b).map(|(xi, bi)| xi * bi).sum();
        0.5 * quad - lin
    }
}

/// The exactly optimal step size for one gradient step from the starting
/// points, averaged over the pool: the ratio of the mean squared gradient
/// norm to the mean gradient curvature.
pub fn optimal_gd_step(pool: &[QuadraticInstance]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for inst in pool {
        let g = inst.start_gradient();
        let hg = inst.matvec(&g);
        num += g.iter().map(|v| v * v).sum::<f64>();
        den += g.iter().zip(&hg).map(|(gi, hi)| gi * hi).sum::<f64>();
    }
    if !(den > 0.0) {
        return Err(Error::InvalidArgument(
            "gradient curvature must be positive to pick a step".into(),
        ));
    }
    Ok(num / den)
}

/// Mean objective after one gradient step of size `step` from the starting
/// points.
pub fn gd_step_loss(pool: &[QuadraticInstance], step: f64) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    let mut total = 0.0;
    for inst in pool {
        let g = inst.start_gradient();
        let x1: Vec<f64> = inst
            .x0
            .iter()
            .zip(&g)
            .map(|(x, gi)| x - step * gi)
            .collect();
        total += inst.value(&x1);
    }
    Ok(total / pool.len() as f64)
}

/// Derivative of [`gd_step_loss`] in the step size.
pub fn gd_step_loss_grad(pool: &[QuadraticInstance], step: f64) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    let mut total = 0.0;
    for inst in pool {
        let g = inst.start_gradient();
        let hg = inst.matvec(&g);
        let curve: f64 = g.iter().zip(&hg).map(|(gi, hi)| gi * hi).sum();
        let norm_sq: f64 = g.iter().map(|v| v * v).sum();
        total += step * curve - norm_sq;
    }
    Ok(total / pool.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::convergence::{stacked_norm_bound, ConvergentParams};
    use crate::linops::DiagOp;
    use crate::prox::ProxFn;
    use crate::scheme::check_fixed_point_consistency;
    use crate::tensor::{gaussian_like, Space};

    fn toy_pool(n: usize, count: usize, seed: u64) -> Vec<SplitProblem> {
        let mut rng = RngStream::new(seed);
        let domain = Space::new(vec![n], "learn-toy").unwrap();
        let diag: Vec<f64> = (0..n).map(|_| rng.next_uniform(0.4, 1.6)).collect();
        (0..count)
            .map(|_| {
                let b = gaussian_like(&domain.zeros(), &mut rng);
                SplitProblem::new(
                    ProxFn::sq_l2_dist(domain.zeros(), 0.3).unwrap(),
                    vec![Arc::new(DiagOp::new(domain.clone(), diag.clone()).unwrap())],
                    vec![ProxFn::sq_l2_dist(b, 1.0).unwrap()],
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_raw_decodes_to_the_balanced_midpoint() {
        let norm = 2.5;
        let map = ParamMap::pdhg_constrained(1, norm).unwrap();
        let params = map.decode(&[0.0, 0.0, 0.0]).unwrap().unwrap();
        let scheme = scheme_from_params(map.shape(), &params).unwrap();
        let sigma = scheme.sigma[0].at(0);
        let tau = scheme.tau.at(0);
        let c = scheme.c.at(0);
        assert!((c[0] - 1.5).abs() <= 1e-15, "extrapolation {}", c[0] - 1.0);
        assert!((sigma - 0.5 / norm).abs() <= 1e-15);
        assert!((tau - 0.5 / norm).abs() <= 1e-15);
        let product = sigma * tau * norm * norm;
        assert!((product - 0.25).abs() <= 1e-15);

        // A large balance input pushes the product toward one from below.
        let params = map.decode(&[0.0, 20.0, 0.0]).unwrap().unwrap();
        let scheme = scheme_from_params(map.shape(), &params).unwrap();
        let product = scheme.sigma[0].at(0) * scheme.tau.at(0) * norm * norm;
        assert!(product > 0.999999 && product < 1.0, "product {product}");
    }

    #[test]
    fn constrained_decodes_are_always_valid() {
        let norm = 1.7;
        let pdhg = ParamMap::pdhg_constrained(1, norm).unwrap();
        let relaxed = ParamMap::new_solver_constrained(1, norm).unwrap();
        let mut rng = RngStream::new(80);
        for _ in 0..10_000 {
            let raw3: Vec<f64> = (0..3).map(|_| rng.next_uniform(-20.0, 20.0)).collect();
            let params = pdhg.decode(&raw3).unwrap().expect("pdhg decode");
            let scheme = scheme_from_params(pdhg.shape(), &params).unwrap();
            check_fixed_point_consistency(&scheme).unwrap();
            let product = scheme.sigma[0].at(0) * scheme.tau.at(0) * norm * norm;
            assert!(product < 1.0, "step product {product}");

            let raw4: Vec<f64> = (0..4).map(|_| rng.next_uniform(-20.0, 20.0)).collect();
            let params = relaxed.decode(&raw4).unwrap().expect("relaxed decode");
            let scheme = scheme_from_params(relaxed.shape(), &params).unwrap();
            check_fixed_point_consistency(&scheme).unwrap();
            let a21 = scheme.a[0].at(0)[2];
            let c21 = scheme.c.at(0)[2];
            ConvergentParams::new(a21, c21, scheme.sigma[0].at(0), scheme.tau.at(0), norm)
                .expect("decoded scheme is contractive");
        }
    }

    #[test]
    fn free_maps_flag_invalid_raws_instead_of_failing() {
        let map = ParamMap::pdhg_free(1).unwrap();
        assert!(map.decode(&[1.0, -0.5, 0.5]).unwrap().is_none());
        assert!(map.decode(&[1.0, 0.5, 0.0]).unwrap().is_none());
        assert!(map.decode(&[f64::NAN, 0.5, 0.5]).unwrap().is_none());
        assert!(map.decode(&[1.0, 0.5, 0.5]).unwrap().is_some());

        let shape = two_memory_shape(1);
        let free = ParamMap::matrices_free(shape).unwrap();
        let mut raw = vec![0.1; free.raw_len()];
        raw[shape.tau_index()] = 0.0;
        assert!(free.decode(&raw).unwrap().is_none());
        raw[shape.tau_index()] = 0.4;
        assert!(free.decode(&raw).unwrap().is_some());

        let pool = toy_pool(4, 2, 81);
        let refs: Vec<&SplitProblem> = pool.iter().collect();
        let (loss, grad) = loss_grad(&map, &[1.0, -0.5, 0.5], &refs, 5, 1).unwrap();
        assert_eq!(loss, f64::INFINITY);
        assert!(grad.iter().all(|g| *g == 0.0));
        assert!(map
            .decode_vjp(&[1.0, -0.5, 0.5], &vec![0.0; shape.param_len()])
            .is_err());
    }

    #[test]
    fn decode_vjp_matches_finite_differences() {
        let mut rng = RngStream::new(82);
        let maps = vec![
            ParamMap::pdhg_constrained(2, 1.3).unwrap(),
            ParamMap::new_solver_constrained(2, 1.3).unwrap(),
            ParamMap::pdhg_free(2).unwrap(),
            ParamMap::matrices_free(two_memory_shape(2)).unwrap(),
        ];
        for map in maps {
            for _ in 0..10 {
                let raw: Vec<f64> = (0..map.raw_len())
                    .map(|_| rng.next_uniform(0.1, 1.2))
                    .collect();
                let upstream: Vec<f64> = (0..map.shape().param_len())
                    .map(|_| rng.next_standard_normal())
                    .collect();
                let vjp = map.decode_vjp(&raw, &upstream).unwrap();
                let h = 1e-6;
                for j in 0..raw.len() {
                    let mut plus = raw.clone();
                    plus[j] += h;
                    let mut minus = raw.clone();
                    minus[j] -= h;
                    let dp = map.decode(&plus).unwrap().unwrap();
                    let dm = map.decode(&minus).unwrap().unwrap();
                    let fd: f64 = dp
                        .iter()
                        .zip(&dm)
                        .zip(&upstream)
                        .map(|((p, m), u)| (p - m) / (2.0 * h) * u)
                        .sum();
                    assert!(
                        (vjp[j] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "{:?} raw slot {j}: vjp {} vs fd {fd}",
                        map.kind(),
                        vjp[j]
                    );
                }
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let pool = toy_pool(5, 3, 83);
        let refs: Vec<&SplitProblem> = pool.iter().collect();
        let norm = stacked_norm_bound(&pool[0]);
        let mut rng = RngStream::new(84);
        for map in [
            ParamMap::new_solver_constrained(1, norm).unwrap(),
            ParamMap::pdhg_constrained(1, norm).unwrap(),
        ] {
            let raw: Vec<f64> = (0..map.raw_len())
                .map(|_| rng.next_uniform(-0.6, 0.6))
                .collect();
            let (loss, grad) = loss_grad(&map, &raw, &refs, 6, 1).unwrap();
            assert!(loss.is_finite());
            let h = 1e-6;
            for j in 0..raw.len() {
                let mut plus = raw.clone();
                plus[j] += h;
                let mut minus = raw.clone();
                minus[j] -= h;
                let lp = evaluate(&map, &plus, &refs, 6).unwrap();
                let lm = evaluate(&map, &minus, &refs, 6).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (grad[j] - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "{:?} slot {j}: grad {} vs fd {fd}",
                    map.kind(),
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn loss_value_agrees_between_tape_and_engine() {
        let pool = toy_pool(5, 4, 85);
        let refs: Vec<&SplitProblem> = pool.iter().collect();
        let norm = stacked_norm_bound(&pool[0]);
        let map = ParamMap::new_solver_constrained(1, norm).unwrap();
        let raw = [0.3, -0.2, 0.5, 0.1];
        let (loss, _) = loss_grad(&map, &raw, &refs, 9, 1).unwrap();
        let direct = evaluate(&map, &raw, &refs, 9).unwrap();
        assert_eq!(loss, direct);
    }

    #[test]
    fn loss_gradient_is_thread_invariant() {
        let pool = toy_pool(5, 7, 86);
        let refs: Vec<&SplitProblem> = pool.iter().collect();
        let norm = stacked_norm_bound(&pool[0]);
        let map = ParamMap::new_solver_constrained(1, norm).unwrap();
        let raw = [0.2, 0.4, -0.3, 0.6];
        let (l1, g1) = loss_grad(&map, &raw, &refs, 7, 1).unwrap();
        let (l3, g3) = loss_grad(&map, &raw, &refs, 7, 3).unwrap();
        let (l0, g0) = loss_grad(&map, &raw, &refs, 7, 0).unwrap();
        assert_eq!(l1, l3);
        assert_eq!(g1, g3);
        assert_eq!(l1, l0);
        assert_eq!(g1, g0);
    }

    #[test]
    fn depth_sampling_moments() {
        let mut rng = RngStream::new(87);
        let mut jitter_sum = 0.0;
        let mut depth_sum = 0.0;
        let trials = 100_000;
        let mut jrng = rng.substream(5);
        for _ in 0..trials {
            jitter_sum += depth_jitter(&mut jrng);
        }
        for _ in 0..trials {
            let d = sample_depth(&mut rng);
            assert!((1..=100).contains(&d));
            depth_sum += d as f64;
        }
        let jitter_mean = jitter_sum / trials as f64;
        assert!(
            (jitter_mean - 2.0).abs() <= 0.1,
            "jitter mean {jitter_mean}"
        );
        let depth_mean = depth_sum / trials as f64;
        assert!((depth_mean - 10.0).abs() <= 0.3, "depth mean {depth_mean}");
    }

    #[test]
    fn deeper_unrolls_do_not_hurt_constrained_schemes() {
        let pool = toy_pool(6, 3, 88);
        let refs: Vec<&SplitProblem> = pool.iter().collect();
        let norm = stacked_norm_bound(&pool[0]);
        let map = ParamMap::new_solver_constrained(1, norm).unwrap();
        let raw = [0.0; 4];
        let l10 = evaluate(&map, &raw, &refs, 10).unwrap();
        let l20 = evaluate(&map, &raw, &refs, 20).unwrap();
        let l40 = evaluate(&map, &raw, &refs, 40).unwrap();
        let slack = 1e-6 * l10.abs().max(1.0);
        assert!(
            l20 <= l10 + slack,
            "depth 20 loss {l20} above depth 10 {l10}"
        );
        assert!(
            l40 <= l20 + slack,
            "depth 40 loss {l40} above depth 20 {l20}"
        );
    }

    #[test]
    fn training_beats_the_zero_start_and_reproduces() {
        let train_pool = toy_pool(5, 6, 89);
        let val_pool = toy_pool(5, 2, 90);
        let norm = stacked_norm_bound(&train_pool[0]);
        let map = ParamMap::new_solver_constrained(1, norm).unwrap();
        let cfg = TrainConfig {
            steps: 40,
            batch_size: 3,
            lr: 0.05,
            eval_depth: 8,
            seed: 7,
            threads: 1,
            ..TrainConfig::default()
        };
        let raw0 = vec![0.0; map.raw_len()];
        let val_refs: Vec<&SplitProblem> = val_pool.iter().collect();
        let initial = evaluate(&map, &raw0, &val_refs, cfg.eval_depth).unwrap();
        let outcome = train(&map, &raw0, &train_pool, &val_pool, &cfg).unwrap();
        assert!(
            outcome.best_val_loss < initial,
            "best {} does not beat start {initial}",
            outcome.best_val_loss
        );
        assert_eq!(outcome.trace.len(), cfg.steps);
        assert!(outcome.trace.iter().all(|r| r.lr > 0.0 && r.depth >= 1));

        let again = train(&map, &raw0, &train_pool, &val_pool, &cfg).unwrap();
        assert_eq!(outcome.best_raw, again.best_raw);
        assert_eq!(outcome.final_raw, again.final_raw);
        assert_eq!(outcome.trace, again.trace);

        let threaded = train(
            &map,
            &raw0,
            &train_pool,
            &val_pool,
            &TrainConfig { threads: 2, ..cfg },
        )
        .unwrap();
        assert_eq!(outcome.best_raw, threaded.best_raw);
        assert_eq!(outcome.trace, threaded.trace);
    }

    #[test]
    fn one_step_quadratic_baseline_is_exact() {
        let mut rng = RngStream::new(91);
        let n = 4;
        // Identity curvature: the optimal step is exactly one.
        let mut pool = Vec::new();
        for _ in 0..5 {
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                h[i * n + i] = 1.0;
            }
            let b: Vec<f64> = (0..n).map(|_| rng.next_standard_normal()).collect();
            let x0: Vec<f64> = (0..n).map(|_| rng.next_standard_normal()).collect();
            pool.push(QuadraticInstance::new(h, b, x0).unwrap());
        }
        assert_eq!(optimal_gd_step(&pool).unwrap(), 1.0);

        // Zero starting points reduce the formula to the linear terms.
        let mut pool = Vec::new();
        let mut num = 0.0;
        let mut den = 0.0;
        for _ in 0..5 {
            let mut h = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..=i {
                    let v = rng.next_uniform(-0.3, 0.3);
                    h[i * n + j] += v;
                    if i != j {
                        h[j * n + i] += v;
                    }
                }
                h[i * n + i] += 2.0;
            }
            let b: Vec<f64> = (0..n).map(|_| rng.next_standard_normal()).collect();
            num += b.iter().map(|v| v * v).sum::<f64>();
            let inst = QuadraticInstance::new(h.clone(), b.clone(), vec![0.0; n]).unwrap();
            let hb = inst.matvec(&b);
            den += b.iter().zip(&hb).map(|(bi, hi)| bi * hi).sum::<f64>();
            pool.push(inst);
        }
        let step = optimal_gd_step(&pool).unwrap();
        assert_eq!(step, num / den);

        // An adaptive-gradient loop recovers the optimum from scratch.
        let mut sigma = vec![0.0f64];
        let mut adam = Adam::new(1, 0.9, 0.99, 1e-8);
        for _ in 0..2000 {
            let g = gd_step_loss_grad(&pool, sigma[0]).unwrap();
            adam.step(&mut sigma, &[g], 0.01);
        }
        assert!(
            (sigma[0] - step).abs() <= 1e-3,
            "adaptive loop found {} vs {step}",
            sigma[0]
        );
        assert!(gd_step_loss(&pool, step).unwrap() <= gd_step_loss(&pool, 0.5 * step).unwrap());
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_ranges() {
        let good: TrainConfig = serde_json::from_str(r#"{"steps": 5, "lr": 0.01}"#).unwrap();
        assert_eq!(good.steps, 5);
        assert_eq!(good.batch_size, 4);
        good.validate().unwrap();
        let bad = serde_json::from_str::<TrainConfig>(r#"{"steps": 5, "learning_rate": 0.01}"#);
        assert!(bad.is_err());
        let zero = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(zero.validate().is_err());
        let neg = TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn map_serialization_round_trips() {
        let map = ParamMap::new_solver_constrained(2, 1.4).unwrap();
        let text = serde_json::to_string(&map).unwrap();
        let back: ParamMap = serde_json::from_str(&text).unwrap();
        assert_eq!(back.kind(), map.kind());
        assert_eq!(back.shape(), map.shape());
        assert_eq!(back.op_norm(), map.op_norm());
        assert!(serde_json::from_str::<ParamMap>(r#"{"kind": "pdhg_free"}"#).is_err());
    }
}
