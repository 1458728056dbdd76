//! Reverse-mode differentiation through unrolled scheme runs.
//!
//! A run of the iteration engine with constant coefficients is a smooth
//! (piecewise, at prox kinks) function of the flat parameter vector
//! holding all matrix entries and step sizes. [`SchemeTape::forward`]
//! replays the engine step for a fixed depth while recording every
//! operation; [`SchemeTape::backward`] then pulls a gradient seed at the
//! lead primal slot back to the parameters.
//!
//! The forward replay performs the same operations in the same order as
//! the engine, so the recorded iterates agree bitwise with an engine run
//! under the matching coefficient matrices.

use crate::error::{Error, Result};
use crate::prox::ProxFn;
use crate::scheme::{MatSeq, SchemeMatrices, SplitProblem, StepSeq};
use crate::tensor::{axpby_into, inner, SpaceElement};

/// Dimensions of a constant scheme: number of dual blocks, primal memory
/// slots, and dual memory slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeShape {
    pub n_blocks: usize,
    pub n_primal: usize,
    pub m_dual: usize,
}

impl SchemeShape {
    /// Length of the flat parameter vector: per block the `A` and `B`
    /// entries, then `C`, `D`, the per-block `sigma`, and `tau`.
    pub fn param_len(&self) -> usize {
        let m2 = self.m_dual * self.m_dual;
        let n2 = self.n_primal * self.n_primal;
        2 * self.n_blocks * m2 + 2 * n2 + self.n_blocks + 1
    }

    /// Index of entry `(row, col)` of `A` for `block`.
    pub fn a_index(&self, block: usize, row: usize, col: usize) -> usize {
        let m2 = self.m_dual * self.m_dual;
        block * m2 + row * self.m_dual + col
    }

    /// Index of entry `(row, col)` of `B` for `block`.
    pub fn b_index(&self, block: usize, row: usize, col: usize) -> usize {
        let m2 = self.m_dual * self.m_dual;
        self.n_blocks * m2 + block * m2 + row * self.m_dual + col
    }

    /// Index of entry `(row, col)` of `C`.
    pub fn c_index(&self, row: usize, col: usize) -> usize {
        2 * self.n_blocks * self.m_dual * self.m_dual + row * self.n_primal + col
    }

    /// Index of entry `(row, col)` of `D`.
    pub fn d_index(&self, row: usize, col: usize) -> usize {
        2 * self.n_blocks * self.m_dual * self.m_dual
            + self.n_primal * self.n_primal
            + row * self.n_primal
            + col
    }

    /// Index of the dual step size for `block`.
    pub fn sigma_index(&self, block: usize) -> usize {
        2 * self.n_blocks * self.m_dual * self.m_dual + 2 * self.n_primal * self.n_primal + block
    }

    /// Index of the primal step size.
    pub fn tau_index(&self) -> usize {
        self.param_len() - 1
    }
}

/// Builds constant scheme matrices from a flat parameter vector.
pub fn scheme_from_params(shape: &SchemeShape, params: &[f64]) -> Result<SchemeMatrices> {
    if params.len() != shape.param_len() {
        return Err(Error::InvalidArgument(format!(
            "got {} parameters, layout needs {}",
            params.len(),
            shape.param_len()
        )));
    }
    let m = shape.m_dual;
    let n = shape.n_primal;
    let mut a = Vec::with_capacity(shape.n_blocks);
    let mut b = Vec::with_capacity(shape.n_blocks);
    let mut sigma = Vec::with_capacity(shape.n_blocks);
    for i in 0..shape.n_blocks {
        let mut am = Vec::with_capacity(m * m);
        let mut bm = Vec::with_capacity(m * m);
        for r in 0..m {
            for col in 0..m {
                am.push(params[shape.a_index(i, r, col)]);
                bm.push(params[shape.b_index(i, r, col)]);
            }
        }
        a.push(MatSeq::constant(m, am)?);
        b.push(MatSeq::constant(m, bm)?);
        sigma.push(StepSeq::constant(params[shape.sigma_index(i)])?);
    }
    let mut cm = Vec::with_capacity(n * n);
    let mut dm = Vec::with_capacity(n * n);
    for r in 0..n {
        for col in 0..n {
            cm.push(params[shape.c_index(r, col)]);
            dm.push(params[shape.d_index(r, col)]);
        }
    }
    Ok(SchemeMatrices {
        a,
        b,
        c: MatSeq::constant(n, cm)?,
        d: MatSeq::constant(n, dm)?,
        sigma,
        tau: StepSeq::constant(params[shape.tau_index()])?,
    })
}

/// Flattens constant scheme matrices into the parameter layout.
pub fn params_from_scheme(scheme: &SchemeMatrices) -> Result<(SchemeShape, Vec<f64>)> {
    let constant = scheme.c.cycle_len() == 1
        && scheme.d.cycle_len() == 1
        && scheme.tau.cycle_len() == 1
        && scheme.a.iter().all(|m| m.cycle_len() == 1)
        && scheme.b.iter().all(|m| m.cycle_len() == 1)
        && scheme.sigma.iter().all(|s| s.cycle_len() == 1);
    if !constant {
        return Err(Error::InvalidArgument(
            "only constant schemes have a flat parameter form".into(),
        ));
    }
    if scheme.b.len() != scheme.a.len() || scheme.sigma.len() != scheme.a.len() {
        return Err(Error::InvalidArgument(
            "per-block coefficient counts disagree".into(),
        ));
    }
    let shape = SchemeShape {
        n_blocks: scheme.a.len(),
        n_primal: scheme.n_primal(),
        m_dual: scheme.dual_memory(),
    };
    let mut params = vec![0.0; shape.param_len()];
    for i in 0..shape.n_blocks {
        let am = scheme.a[i].at(0);
        let bm = scheme.b[i].at(0);
        for r in 0..shape.m_dual {
            for col in 0..shape.m_dual {
                params[shape.a_index(i, r, col)] = am[r * shape.m_dual + col];
                params[shape.b_index(i, r, col)] = bm[r * shape.m_dual + col];
            }
        }
        params[shape.sigma_index(i)] = scheme.sigma[i].at(0);
    }
    let cm = scheme.c.at(0);
    let dm = scheme.d.at(0);
    for r in 0..shape.n_primal {
        for col in 0..shape.n_primal {
            params[shape.c_index(r, col)] = cm[r * shape.n_primal + col];
            params[shape.d_index(r, col)] = dm[r * shape.n_primal + col];
        }
    }
    params[shape.tau_index()] = scheme.tau.at(0);
    Ok((shape, params))
}

/// A coefficient in a recorded linear combination: either a constant or a
/// reference into the parameter vector.
#[derive(Clone, Copy, Debug)]
enum Coeff {
    Const(f64),
    Param(usize),
}

/// One recorded operation. Function index 0 is the primal function, index
/// `1 + i` the dual function of block `i`.
#[derive(Clone, Debug)]
enum NodeOp {
    Input,
    LinComb(Vec<(Coeff, usize)>),
    OpForward { op: usize, x: usize },
    OpAdjoint { op: usize, y: usize },
    Prox { func: usize, scale: Coeff, x: usize },
    ProxConj { func: usize, scale: Coeff, x: usize },
}

/// Scale derivative of the conjugate prox `v(s, u) = u - s P(1/s, u/s)`
/// built from a base prox `P`: `-P + (1/s) dP/dscale + J_P (u/s)`, with
/// everything evaluated at scale `1/s` and point `u/s`.
pub fn conj_scale_derivative(g: &ProxFn, scale: f64, u: &SpaceElement) -> Result<SpaceElement> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "conjugate prox scale must be positive, got {scale}"
        )));
    }
    let inv = 1.0 / scale;
    let inner_point = u.scaled(inv);
    let base = g.prox(inv, &inner_point)?;
    let dscale = g.prox_scale_derivative(inv, &inner_point)?;
    let jac_dir = g.prox_vjp(inv, &inner_point, &inner_point)?;
    let mut out = base.scaled(-1.0);
    axpby_into(inv, &dscale, 1.0, &mut out)?;
    axpby_into(1.0, &jac_dir, 1.0, &mut out)?;
    Ok(out)
}

/// A recorded unrolled run, ready to be differentiated.
pub struct SchemeTape<'p> {
    problem: &'p SplitProblem,
    shape: SchemeShape,
    params: Vec<f64>,
    nodes: Vec<NodeOp>,
    values: Vec<SpaceElement>,
    lead: usize,
}

impl<'p> SchemeTape<'p> {
    fn func(&self, idx: usize) -> &ProxFn {
        if idx == 0 {
            self.problem.f()
        } else {
            &self.problem.g()[idx - 1]
        }
    }

    fn coeff_value(&self, c: Coeff) -> f64 {
        match c {
            Coeff::Const(v) => v,
            Coeff::Param(k) => self.params[k],
        }
    }

    fn push(&mut self, op: NodeOp) -> Result<usize> {
        let value = match &op {
            NodeOp::Input => unreachable!("inputs are pushed with a value"),
            NodeOp::LinComb(terms) => {
                let mut acc = self.values[terms[0].1].zeros_like();
                for (c, src) in terms {
                    let cv = self.coeff_value(*c);
                    if cv != 0.0 {
                        axpby_into(cv, &self.values[*src], 1.0, &mut acc)?;
                    }
                }
                acc
            }
            NodeOp::OpForward { op, x } => self.problem.ops()[*op].forward(&self.values[*x])?,
            NodeOp::OpAdjoint { op, y } => self.problem.ops()[*op].adjoint(&self.values[*y])?,
            NodeOp::Prox { func, scale, x } => self
                .func(*func)
                .prox(self.coeff_value(*scale), &self.values[*x])?,
            NodeOp::ProxConj { func, scale, x } => self
                .func(*func)
                .prox_conjugate(self.coeff_value(*scale), &self.values[*x])?,
        };
        self.nodes.push(op);
        self.values.push(value);
        Ok(self.nodes.len() - 1)
    }

    fn push_input(&mut self, value: SpaceElement) -> usize {
        self.nodes.push(NodeOp::Input);
        self.values.push(value);
        self.nodes.len() - 1
    }

    /// Replays `depth` engine steps from the zero state, recording every
    /// operation.
    pub fn forward(
        problem: &'p SplitProblem,
        shape: &SchemeShape,
        params: &[f64],
        depth: usize,
    ) -> Result<Self> {
        if shape.n_blocks != problem.n_blocks() {
            return Err(Error::InvalidArgument(format!(
                "shape expects {} dual blocks, problem has {}",
                shape.n_blocks,
                problem.n_blocks()
            )));
        }
        if params.len() != shape.param_len() {
            return Err(Error::InvalidArgument(format!(
                "got {} parameters, layout needs {}",
                params.len(),
                shape.param_len()
            )));
        }
        let mut tape = SchemeTape {
            problem,
            shape: *shape,
            params: params.to_vec(),
            nodes: Vec::new(),
            values: Vec::new(),
            lead: 0,
        };
        let shape = tape.shape;
        let mut primal: Vec<usize> = (0..shape.n_primal)
            .map(|_| tape.push_input(problem.domain().zeros()))
            .collect();
        let mut dual: Vec<Vec<usize>> = (0..shape.n_blocks)
            .map(|i| {
                (0..shape.m_dual)
                    .map(|_| tape.push_input(problem.ops()[i].range().zeros()))
                    .collect()
            })
            .collect();

        for _ in 0..depth {
            let mut new_dual = Vec::with_capacity(shape.n_blocks);
            for i in 0..shape.n_blocks {
                let fresh = tape.push(NodeOp::OpForward {
                    op: i,
                    x: primal[0],
                })?;
                let mut slots = Vec::with_capacity(shape.m_dual);
                slots.push(fresh);
                slots.extend_from_slice(&dual[i][1..]);
                let mut mixed = Vec::with_capacity(shape.m_dual);
                for r in 0..shape.m_dual {
                    let terms = (0..shape.m_dual)
                        .map(|k| (Coeff::Param(shape.b_index(i, r, k)), slots[k]))
                        .collect();
                    mixed.push(tape.push(NodeOp::LinComb(terms))?);
                }
                let q = tape.push(NodeOp::ProxConj {
                    func: 1 + i,
                    scale: Coeff::Param(shape.sigma_index(i)),
                    x: mixed[0],
                })?;
                let mut slots = Vec::with_capacity(shape.m_dual);
                slots.push(q);
                slots.extend_from_slice(&mixed[1..]);
                let mut ynew = Vec::with_capacity(shape.m_dual);
                for r in 0..shape.m_dual {
                    let terms = (0..shape.m_dual)
                        .map(|k| (Coeff::Param(shape.a_index(i, r, k)), slots[k]))
                        .collect();
                    ynew.push(tape.push(NodeOp::LinComb(terms))?);
                }
                new_dual.push(ynew);
            }

            let adj_terms = (0..shape.n_blocks)
                .map(|i| {
                    tape.push(NodeOp::OpAdjoint {
                        op: i,
                        y: new_dual[i][0],
                    })
                    .map(|id| (Coeff::Const(1.0), id))
                })
                .collect::<Result<Vec<_>>>()?;
            let adj_sum = tape.push(NodeOp::LinComb(adj_terms))?;
            let mut slots = Vec::with_capacity(shape.n_primal);
            slots.push(adj_sum);
            slots.extend_from_slice(&primal[1..]);
            let mut mixed = Vec::with_capacity(shape.n_primal);
            for r in 0..shape.n_primal {
                let terms = (0..shape.n_primal)
                    .map(|k| (Coeff::Param(shape.d_index(r, k)), slots[k]))
                    .collect();
                mixed.push(tape.push(NodeOp::LinComb(terms))?);
            }
            let p = tape.push(NodeOp::Prox {
                func: 0,
                scale: Coeff::Param(shape.tau_index()),
                x: mixed[0],
            })?;
            let mut slots = Vec::with_capacity(shape.n_primal);
            slots.push(p);
            slots.extend_from_slice(&mixed[1..]);
            let mut new_primal = Vec::with_capacity(shape.n_primal);
            for r in 0..shape.n_primal {
                let terms = (0..shape.n_primal)
                    .map(|k| (Coeff::Param(shape.c_index(r, k)), slots[k]))
                    .collect();
                new_primal.push(tape.push(NodeOp::LinComb(terms))?);
            }
            primal = new_primal;
            dual = new_dual;
        }
        tape.lead = *primal.last().expect("at least one primal slot");
        Ok(tape)
    }

    /// The lead primal slot after the recorded run.
    pub fn lead_primal(&self) -> &SpaceElement {
        &self.values[self.lead]
    }

    /// Pulls a gradient seed at the lead primal slot back to the flat
    /// parameter vector.
    pub fn backward(&self, seed: &SpaceElement) -> Result<Vec<f64>> {
        if !seed.same_space(self.lead_primal()) {
            return Err(Error::SpaceMismatch(
                "gradient seed must live in the primal domain".into(),
            ));
        }
        let mut grads: Vec<Option<SpaceElement>> = vec![None; self.nodes.len()];
        grads[self.lead] = Some(seed.clone());
        let mut param_grad = vec![0.0; self.shape.param_len()];

        let add = |slot: &mut Option<SpaceElement>, coef: f64, part: &SpaceElement| match slot {
            Some(g) => axpby_into(coef, part, 1.0, g),
            None => {
                let mut g = part.zeros_like();
                axpby_into(coef, part, 1.0, &mut g)?;
                *slot = Some(g);
                Ok(())
            }
        };

        for id in (0..self.nodes.len()).rev() {
            let upstream = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id] {
                NodeOp::Input => {}
                NodeOp::LinComb(terms) => {
                    for (c, src) in terms {
                        let cv = self.coeff_value(*c);
                        if cv != 0.0 {
                            add(&mut grads[*src], cv, &upstream)?;
                        }
                        if let Coeff::Param(k) = c {
                            param_grad[*k] += inner(&self.values[*src], &upstream)?;
                        }
                    }
                }
                NodeOp::OpForward { op, x } => {
                    let pulled = self.problem.ops()[*op].adjoint(&upstream)?;
                    add(&mut grads[*x], 1.0, &pulled)?;
                }
                NodeOp::OpAdjoint { op, y } => {
                    let pushed = self.problem.ops()[*op].forward(&upstream)?;
                    add(&mut grads[*y], 1.0, &pushed)?;
                }
                NodeOp::Prox { func, scale, x } => {
                    let s = self.coeff_value(*scale);
                    let point = &self.values[*x];
                    let pulled = self.func(*func).prox_vjp(s, point, &upstream)?;
                    add(&mut grads[*x], 1.0, &pulled)?;
                    if let Coeff::Param(k) = scale {
                        let ds = self.func(*func).prox_scale_derivative(s, point)?;
                        param_grad[*k] += inner(&ds, &upstream)?;
                    }
                }
                NodeOp::ProxConj { func, scale, x } => {
                    let s = self.coeff_value(*scale);
                    let point = &self.values[*x];
                    let inv = 1.0 / s;
                    let inner_point = point.scaled(inv);
                    let base_vjp = self.func(*func).prox_vjp(inv, &inner_point, &upstream)?;
                    add(&mut grads[*x], 1.0, &upstream)?;
                    add(&mut grads[*x], -1.0, &base_vjp)?;
                    if let Coeff::Param(k) = scale {
                        let ds = conj_scale_derivative(self.func(*func), s, point)?;
                        param_grad[*k] += inner(&ds, &upstream)?;
                    }
                }
            }
        }
        Ok(param_grad)
    }
}
