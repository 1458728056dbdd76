//! Proximal calculus for the function atoms used by the solvers.
//!
//! A [`ProxFn`] is a closed convex function with a cheap proximal map.
//! `prox(scale, x)` minimizes `F(z) + |z - x|^2 / (2 scale)`. The conjugate
//! prox is always derived through the Moreau decomposition
//! `prox_conj(s, x) = x - s * prox(1/s, x/s)`, so primal and dual routes
//! stay consistent by construction. For training, every atom also exposes
//! the symmetric Jacobian-vector product of its prox in `x` and the
//! derivative of its prox with respect to the scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SpaceElement;

/// Slack used when evaluating indicator-type conjugates, absorbing roundoff
/// from iterates that sit exactly on the constraint boundary.
const INDICATOR_SLACK: f64 = 1e-12;

/// Sign with the zero selection at the origin.
fn sign_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A convex function atom with a closed-form proximal map.
///
/// Invariants (enforced by the constructors): positive weights, positive
/// curvature for the strongly convex shift, positive block lengths for the
/// separable sum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ProxFn {
    /// The zero function.
    Zero,
    /// `x -> weight * |x - b|^2` (note: no 1/2 factor).
    SqL2Dist { b: SpaceElement, weight: f64 },
    /// `x -> weight * |x|_1`.
    L1 { weight: f64 },
    /// `base(x) + (mu/2) * |x - center|^2`.
    StronglyConvexShift {
        base: Box<ProxFn>,
        mu: f64,
        center: SpaceElement,
    },
    /// Independent atoms applied to consecutive slices of the input.
    SeparableSum { parts: Vec<(ProxFn, usize)> },
}

impl ProxFn {
    /// The zero function.
    pub fn zero() -> ProxFn {
        ProxFn::Zero
    }

    /// Squared-distance data term `weight * |x - b|^2` with `weight > 0`.
    pub fn sq_l2_dist(b: SpaceElement, weight: f64) -> Result<ProxFn> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "squared-distance weight must be positive and finite, got {weight}"
            )));
        }
        Ok(ProxFn::SqL2Dist { b, weight })
    }

    /// Weighted one-norm `weight * |x|_1` with `weight >= 0`.
    pub fn l1(weight: f64) -> Result<ProxFn> {
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "one-norm weight must be nonnegative and finite, got {weight}"
            )));
        }
        Ok(ProxFn::L1 { weight })
    }

    /// `base + (mu/2) |x - center|^2` with `mu > 0`.
    pub fn strongly_convex_shift(base: ProxFn, mu: f64, center: SpaceElement) -> Result<ProxFn> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "curvature must be positive and finite, got {mu}"
            )));
        }
        Ok(ProxFn::StronglyConvexShift {
            base: Box::new(base),
            mu,
            center,
        })
    }

    /// Sum of independent atoms over consecutive slices of given lengths.
    pub fn separable_sum(parts: Vec<(ProxFn, usize)>) -> Result<ProxFn> {
        if parts.is_empty() || parts.iter().any(|(_, len)| *len == 0) {
            return Err(Error::InvalidArgument(
                "separable sum needs non-empty parts with positive lengths".into(),
            ));
        }
        Ok(ProxFn::SeparableSum { parts })
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        match self {
            ProxFn::SqL2Dist { b, .. } if b.len() != len => Err(Error::SpaceMismatch(format!(
                "{what}: anchor length {} vs input length {len}",
                b.len()
            ))),
            ProxFn::StronglyConvexShift { center, base, .. } => {
                if center.len() != len {
                    return Err(Error::SpaceMismatch(format!(
                        "{what}: center length {} vs input length {len}",
                        center.len()
                    )));
                }
                base.check_len(len, what)
            }
            ProxFn::SeparableSum { parts } => {
                let total: usize = parts.iter().map(|(_, l)| l).sum();
                if total != len {
                    return Err(Error::SpaceMismatch(format!(
                        "{what}: separable parts cover {total} entries, input has {len}"
                    )));
                }
                let mut off = 0;
                for (p, l) in parts {
                    p.check_len(*l, what)?;
                    off += l;
                }
                debug_assert_eq!(off, len);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn prox_slice(&self, scale: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ProxFn::Zero => out.copy_from_slice(x),
            ProxFn::SqL2Dist { b, weight } => {
                let denom = 1.0 + 2.0 * scale * weight;
                for ((o, xi), bi) in out.iter_mut().zip(x).zip(b.data()) {
                    *o = (xi + 2.0 * scale * weight * bi) / denom;
                }
            }
            ProxFn::L1 { weight } => {
                let t = weight * scale;
                for (o, &xi) in out.iter_mut().zip(x) {
                    let mag = xi.abs() - t;
                    *o = if mag > 0.0 { xi.signum() * mag } else { 0.0 };
                }
            }
            ProxFn::StronglyConvexShift { base, mu, center } => {
                let damp = 1.0 + scale * mu;
                let inner_scale = scale / damp;
                let u: Vec<f64> = x
                    .iter()
                    .zip(center.data())
                    .map(|(xi, ci)| (xi + scale * mu * ci) / damp)
                    .collect();
                base.prox_slice(inner_scale, &u, out)?;
            }
            ProxFn::SeparableSum { parts } => {
                let mut off = 0;
                for (p, len) in parts {
                    p.prox_slice(scale, &x[off..off + len], &mut out[off..off + len])?;
                    off += len;
                }
            }
        }
        Ok(())
    }

    fn vjp_slice(&self, scale: f64, x: &[f64], upstream: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ProxFn::Zero => out.copy_from_slice(upstream),
            ProxFn::SqL2Dist { weight, .. } => {
                let denom = 1.0 + 2.0 * scale * weight;
                for (o, u) in out.iter_mut().zip(upstream) {
                    *o = u / denom;
                }
            }
            ProxFn::L1 { weight } => {
                let t = weight * scale;
                for ((o, &xi), &u) in out.iter_mut().zip(x).zip(upstream) {
                    *o = if xi.abs() > t { u } else { 0.0 };
                }
            }
            ProxFn::StronglyConvexShift { base, mu, center } => {
                let damp = 1.0 + scale * mu;
                let inner_scale = scale / damp;
                let u: Vec<f64> = x
                    .iter()
                    .zip(center.data())
                    .map(|(xi, ci)| (xi + scale * mu * ci) / damp)
                    .collect();
                base.vjp_slice(inner_scale, &u, upstream, out)?;
                for o in out.iter_mut() {
                    *o /= damp;
                }
            }
            ProxFn::SeparableSum { parts } => {
                let mut off = 0;
                for (p, len) in parts {
                    p.vjp_slice(
                        scale,
                        &x[off..off + len],
                        &upstream[off..off + len],
                        &mut out[off..off + len],
                    )?;
                    off += len;
                }
            }
        }
        Ok(())
    }

    fn scale_deriv_slice(&self, scale: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ProxFn::Zero => out.fill(0.0),
            ProxFn::SqL2Dist { b, weight } => {
                let denom = 1.0 + 2.0 * scale * weight;
                for ((o, xi), bi) in out.iter_mut().zip(x).zip(b.data()) {
                    *o = 2.0 * weight * (bi - xi) / (denom * denom);
                }
            }
            ProxFn::L1 { weight } => {
                let t = weight * scale;
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = if xi.abs() > t {
                        -weight * xi.signum()
                    } else {
                        0.0
                    };
                }
            }
            ProxFn::StronglyConvexShift { base, mu, center } => {
                let damp = 1.0 + scale * mu;
                let inner_scale = scale / damp;
                let u: Vec<f64> = x
                    .iter()
                    .zip(center.data())
                    .map(|(xi, ci)| (xi + scale * mu * ci) / damp)
                    .collect();
                // Chain rule through (inner_scale, u): d inner_scale / d scale
                // = 1/damp^2 and d u / d scale = mu (center - x) / damp^2.
                base.scale_deriv_slice(inner_scale, &u, out)?;
                let du: Vec<f64> = x
                    .iter()
                    .zip(center.data())
                    .map(|(xi, ci)| mu * (ci - xi) / (damp * damp))
                    .collect();
                let mut jdu = vec![0.0; x.len()];
                base.vjp_slice(inner_scale, &u, &du, &mut jdu)?;
                for (o, j) in out.iter_mut().zip(&jdu) {
                    *o = *o / (damp * damp) + j;
                }
            }
            ProxFn::SeparableSum { parts } => {
                let mut off = 0;
                for (p, len) in parts {
                    p.scale_deriv_slice(scale, &x[off..off + len], &mut out[off..off + len])?;
                    off += len;
                }
            }
        }
        Ok(())
    }

    fn subgradient_slice(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ProxFn::Zero => out.fill(0.0),
            ProxFn::SqL2Dist { b, weight } => {
                for ((o, xi), bi) in out.iter_mut().zip(x).zip(b.data()) {
                    *o = 2.0 * weight * (xi - bi);
                }
            }
            ProxFn::L1 { weight } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = weight * sign_zero(*xi);
                }
            }
            ProxFn::StronglyConvexShift { base, mu, center } => {
                base.subgradient_slice(x, out)?;
                for ((o, xi), ci) in out.iter_mut().zip(x).zip(center.data()) {
                    *o += mu * (xi - ci);
                }
            }
            ProxFn::SeparableSum { parts } => {
                let mut off = 0;
                for (p, len) in parts {
                    p.subgradient_slice(&x[off..off + len], &mut out[off..off + len])?;
                    off += len;
                }
            }
        }
        Ok(())
    }

    fn value_slice(&self, x: &[f64]) -> Result<f64> {
        Ok(match self {
            ProxFn::Zero => 0.0,
            ProxFn::SqL2Dist { b, weight } => {
                weight
                    * x.iter()
                        .zip(b.data())
                        .map(|(xi, bi)| (xi - bi) * (xi - bi))
                        .sum::<f64>()
            }
            ProxFn::L1 { weight } => weight * x.iter().map(|v| v.abs()).sum::<f64>(),
            ProxFn::StronglyConvexShift { base, mu, center } => {
                base.value_slice(x)?
                    + 0.5
                        * mu
                        * x.iter()
                            .zip(center.data())
                            .map(|(xi, ci)| (xi - ci) * (xi - ci))
                            .sum::<f64>()
            }
            ProxFn::SeparableSum { parts } => {
                let mut acc = 0.0;
                let mut off = 0;
                for (p, len) in parts {
                    acc += p.value_slice(&x[off..off + len])?;
                    off += len;
                }
                acc
            }
        })
    }

    fn conjugate_value_slice(&self, y: &[f64]) -> Result<f64> {
        Ok(match self {
            ProxFn::Zero => {
                let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if peak <= INDICATOR_SLACK {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxFn::SqL2Dist { b, weight } => {
                let quad: f64 = y.iter().map(|v| v * v).sum();
                let lin: f64 = y.iter().zip(b.data()).map(|(yi, bi)| yi * bi).sum();
                quad / (4.0 * weight) + lin
            }
            ProxFn::L1 { weight } => {
                let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if peak <= weight * (1.0 + INDICATOR_SLACK) + INDICATOR_SLACK {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxFn::StronglyConvexShift { .. } => {
                return Err(Error::Unsupported(
                    "conjugate value of a strongly convex shift".into(),
                ))
            }
            ProxFn::SeparableSum { parts } => {
                let mut acc = 0.0;
                let mut off = 0;
                for (p, len) in parts {
                    acc += p.conjugate_value_slice(&y[off..off + len])?;
                    off += len;
                }
                acc
            }
        })
    }

    fn check_scale(scale: f64) -> Result<()> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "prox scale must be positive and finite, got {scale}"
            )));
        }
        Ok(())
    }

    /// The proximal map: the minimizer of `F(z) + |z - x|^2 / (2 scale)`.
    pub fn prox(&self, scale: f64, x: &SpaceElement) -> Result<SpaceElement> {
        Self::check_scale(scale)?;
        self.check_len(x.len(), "prox")?;
        let mut out = x.zeros_like();
        self.prox_slice(scale, x.data(), out.data_mut())?;
        Ok(out)
    }

    /// The proximal map of the convex conjugate, through the Moreau
    /// decomposition `x - scale * prox(1/scale, x/scale)`.
    pub fn prox_conjugate(&self, scale: f64, x: &SpaceElement) -> Result<SpaceElement> {
        Self::check_scale(scale)?;
        self.check_len(x.len(), "prox_conjugate")?;
        let scaled_in = x.scaled(1.0 / scale);
        let mut inner = x.zeros_like();
        self.prox_slice(1.0 / scale, scaled_in.data(), inner.data_mut())?;
        crate::tensor::axpby(1.0, x, -scale, &inner)
    }

    /// The function value; may be infinite for indicator-type conjugates.
    pub fn value(&self, x: &SpaceElement) -> Result<f64> {
        self.check_len(x.len(), "value")?;
        self.value_slice(x.data())
    }

    /// A canonical subgradient: the gradient where the function is smooth,
    /// and the zero selection at one-norm kinks (matching the derivative
    /// convention of [`ProxFn::prox_vjp`]).
    pub fn subgradient(&self, x: &SpaceElement) -> Result<SpaceElement> {
        self.check_len(x.len(), "subgradient")?;
        let mut out = x.zeros_like();
        self.subgradient_slice(x.data(), out.data_mut())?;
        Ok(out)
    }

    /// The conjugate function value; may be infinite.
    pub fn conjugate_value(&self, y: &SpaceElement) -> Result<f64> {
        self.check_len(y.len(), "conjugate_value")?;
        self.conjugate_value_slice(y.data())
    }

    /// Jacobian-vector product of `prox(scale, .)` at `x` applied to
    /// `upstream`.
    ///
    /// Prox Jacobians of these atoms are symmetric, so this serves as both
    /// the forward and the reverse mode derivative. At a one-norm kink
    /// (`|x_i|` exactly at the threshold) the derivative is taken as zero.
    pub fn prox_vjp(
        &self,
        scale: f64,
        x: &SpaceElement,
        upstream: &SpaceElement,
    ) -> Result<SpaceElement> {
        Self::check_scale(scale)?;
        self.check_len(x.len(), "prox_vjp")?;
        if x.len() != upstream.len() {
            return Err(Error::SpaceMismatch(
                "prox_vjp: upstream length differs from input".into(),
            ));
        }
        let mut out = x.zeros_like();
        self.vjp_slice(scale, x.data(), upstream.data(), out.data_mut())?;
        Ok(out)
    }

    /// Derivative of `prox(scale, x)` with respect to `scale` at fixed `x`.
    pub fn prox_scale_derivative(&self, scale: f64, x: &SpaceElement) -> Result<SpaceElement> {
        Self::check_scale(scale)?;
        self.check_len(x.len(), "prox_scale_derivative")?;
        let mut out = x.zeros_like();
        self.scale_deriv_slice(scale, x.data(), out.data_mut())?;
        Ok(out)
    }
}
