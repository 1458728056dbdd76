//! Linear operators with adjoints and certified norm bounds.
//!
//! Every operator knows its domain and range [`Space`], applies forward and
//! adjoint maps, and carries a norm bound in an interior-mutable cell. A
//! bound is either analytic (a proven upper bound on the operator norm) or
//! estimated (a power-method measurement times a small safety factor, marked
//! by the `estimated` flag). [`estimate_norm`] measures the norm and stores
//! the result; [`normalize`] wraps an operator so its stored bound becomes
//! exactly one.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gaussian_like, ProductElement, RngStream, Space, SpaceElement};

/// Multiplier applied to power-method measurements before storing them as a
/// bound, leaving a small safety margin over the measured value.
pub const ESTIMATE_SAFETY: f64 = 1.001;

/// Interior-mutable storage for an operator norm bound.
///
/// The value is stored as raw bits in an atomic so bounds can be updated
/// through a shared reference (operators are used behind `Arc<dyn LinOp>`).
#[derive(Debug)]
pub struct NormCell {
    bits: AtomicU64,
    estimated: AtomicBool,
}

impl NormCell {
    /// A cell holding an analytic bound.
    pub fn analytic(value: f64) -> Self {
        NormCell {
            bits: AtomicU64::new(value.to_bits()),
            estimated: AtomicBool::new(false),
        }
    }

    /// Current bound value.
    pub fn value(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }

    /// Whether the current bound came from a measurement.
    pub fn is_estimated(&self) -> bool {
        self.estimated.load(Ordering::SeqCst)
    }

    /// Replaces the stored bound.
    pub fn set(&self, value: f64, estimated: bool) {
        assert!(
            value >= 0.0 && !value.is_nan(),
            "norm bound must be nonnegative, got {value}"
        );
        self.bits.store(value.to_bits(), Ordering::SeqCst);
        self.estimated.store(estimated, Ordering::SeqCst);
    }
}

impl Clone for NormCell {
    fn clone(&self) -> Self {
        NormCell {
            bits: AtomicU64::new(self.bits.load(Ordering::SeqCst)),
            estimated: AtomicBool::new(self.estimated.load(Ordering::SeqCst)),
        }
    }
}

/// A bounded linear operator between two spaces.
///
/// Contract:
/// - `forward` maps the domain into the range, `adjoint` maps back, and the
///   adjoint identity `<Ax, y> = <x, A*y>` holds to roundoff.
/// - `norm_bound()` is an upper bound on the operator norm: for every `x`,
///   `|Ax| <= norm_bound() * |x|` up to a `1e-6` relative slack (estimated
///   bounds additionally depend on power-method convergence and carry the
///   `estimated` flag).
pub trait LinOp: Send + Sync {
    /// Input space.
    fn domain(&self) -> &Space;

    /// Output space.
    fn range(&self) -> &Space;

    /// Applies the operator.
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement>;

    /// Applies the adjoint.
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement>;

    /// The cell holding this operator's norm bound.
    fn norm_cell(&self) -> &NormCell;

    /// Current norm bound.
    fn norm_bound(&self) -> f64 {
        self.norm_cell().value()
    }

    /// Whether the current bound came from [`estimate_norm`].
    fn norm_is_estimated(&self) -> bool {
        self.norm_cell().is_estimated()
    }

    /// Replaces the stored norm bound.
    fn set_norm_bound(&self, value: f64, estimated: bool) {
        self.norm_cell().set(value, estimated);
    }
}

fn check_in_space(x: &SpaceElement, space: &Space, what: &str) -> Result<()> {
    if x.space() != space {
        return Err(Error::SpaceMismatch(format!(
            "{what}: element in '{}' {:?}, expected '{}' {:?}",
            x.space_id(),
            x.shape(),
            space.space_id(),
            space.shape()
        )));
    }
    Ok(())
}

/// The identity on a space.
#[derive(Clone, Debug)]
pub struct IdentityOp {
    space: Space,
    cell: NormCell,
}

impl IdentityOp {
    /// Identity on `space`; bound 1.
    pub fn new(space: Space) -> Self {
        IdentityOp {
            space,
            cell: NormCell::analytic(1.0),
        }
    }
}

impl LinOp for IdentityOp {
    fn domain(&self) -> &Space {
        &self.space
    }
    fn range(&self) -> &Space {
        &self.space
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.space, "identity forward")?;
        Ok(x.clone())
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.space, "identity adjoint")?;
        Ok(y.clone())
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Multiplication by a fixed scalar.
#[derive(Clone, Debug)]
pub struct ScaleOp {
    space: Space,
    factor: f64,
    cell: NormCell,
}

impl ScaleOp {
    /// `x -> factor * x` on `space`; bound `|factor|`.
    pub fn new(space: Space, factor: f64) -> Self {
        ScaleOp {
            space,
            factor,
            cell: NormCell::analytic(factor.abs()),
        }
    }
}

impl LinOp for ScaleOp {
    fn domain(&self) -> &Space {
        &self.space
    }
    fn range(&self) -> &Space {
        &self.space
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.space, "scale forward")?;
        Ok(x.scaled(self.factor))
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.space, "scale adjoint")?;
        Ok(y.scaled(self.factor))
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Pointwise multiplication by a fixed vector; self-adjoint.
#[derive(Clone, Debug)]
pub struct DiagOp {
    space: Space,
    diag: Vec<f64>,
    cell: NormCell,
}

impl DiagOp {
    /// `x -> diag .* x`; bound `max |diag|`.
    pub fn new(space: Space, diag: Vec<f64>) -> Result<Self> {
        if diag.len() != space.len() {
            return Err(Error::InvalidShape(format!(
                "diagonal length {} does not match space length {}",
                diag.len(),
                space.len()
            )));
        }
        let bound = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        Ok(DiagOp {
            space,
            diag,
            cell: NormCell::analytic(bound),
        })
    }

    fn apply(&self, x: &SpaceElement) -> SpaceElement {
        let mut out = x.clone();
        for (o, d) in out.data_mut().iter_mut().zip(&self.diag) {
            *o *= d;
        }
        out
    }
}

impl LinOp for DiagOp {
    fn domain(&self) -> &Space {
        &self.space
    }
    fn range(&self) -> &Space {
        &self.space
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.space, "diag forward")?;
        Ok(self.apply(x))
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.space, "diag adjoint")?;
        Ok(self.apply(y))
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Dense matrix operator (row-major entries).
#[derive(Clone, Debug)]
pub struct MatrixOp {
    domain: Space,
    range: Space,
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    cell: NormCell,
}

impl MatrixOp {
    /// Wraps `rows x cols` row-major `entries` mapping `domain` to `range`.
    ///
    /// The analytic bound is the smaller of the Frobenius norm and the
    /// geometric mean of the max-column-sum and max-row-sum norms.
    pub fn new(
        entries: Vec<f64>,
        rows: usize,
        cols: usize,
        domain: Space,
        range: Space,
    ) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "matrix entries {} do not fill {rows}x{cols}",
                entries.len()
            )));
        }
        if domain.len() != cols || range.len() != rows {
            return Err(Error::InvalidShape(format!(
                "matrix {rows}x{cols} incompatible with domain length {} and range length {}",
                domain.len(),
                range.len()
            )));
        }
        let fro = entries.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut col_sums = vec![0.0f64; cols];
        let mut row_max = 0.0f64;
        for r in 0..rows {
            let mut row_sum = 0.0;
            for c in 0..cols {
                let a = entries[r * cols + c].abs();
                row_sum += a;
                col_sums[c] += a;
            }
            row_max = row_max.max(row_sum);
        }
        let col_max = col_sums.iter().fold(0.0f64, |m, &v| m.max(v));
        let holder = (row_max * col_max).sqrt();
        Ok(MatrixOp {
            domain,
            range,
            rows,
            cols,
            entries,
            cell: NormCell::analytic(fro.min(holder)),
        })
    }

    /// Convenience constructor with fresh one-axis spaces.
    pub fn from_entries(entries: Vec<f64>, rows: usize, cols: usize, id: &str) -> Result<Self> {
        let domain = Space::new(vec![cols], format!("{id}/domain"))?;
        let range = Space::new(vec![rows], format!("{id}/range"))?;
        MatrixOp::new(entries, rows, cols, domain, range)
    }
}

impl LinOp for MatrixOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn range(&self) -> &Space {
        &self.range
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.domain, "matrix forward")?;
        let mut out = self.range.zeros();
        let xd = x.data();
        let od = out.data_mut();
        for r in 0..self.rows {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            od[r] = row.iter().zip(xd).map(|(a, v)| a * v).sum();
        }
        Ok(out)
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.range, "matrix adjoint")?;
        let mut out = self.domain.zeros();
        let yd = y.data();
        let od = out.data_mut();
        for r in 0..self.rows {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            let w = yd[r];
            for (o, a) in od.iter_mut().zip(row) {
                *o += a * w;
            }
        }
        Ok(out)
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Forward-difference gradient with replicated (Neumann) boundary.
///
/// In one dimension, `(Dx)_i = x_{i+1} - x_i` with the last entry zero
/// (the boundary sample is replicated, so its difference vanishes). In two
/// dimensions the range stacks the axis-0 and axis-1 difference fields into
/// shape `[2, h, w]`.
#[derive(Clone, Debug)]
pub struct GradOp {
    domain: Space,
    range: Space,
    cell: NormCell,
}

impl GradOp {
    /// Gradient on a 1-D `[n]` or 2-D `[h, w]` space.
    ///
    /// The analytic bound is `2 * sqrt(d)` for `d` differentiation axes.
    pub fn new(domain: Space) -> Result<Self> {
        let range = match domain.shape() {
            [_] => domain.derived("grad"),
            [h, w] => Space::new(vec![2, *h, *w], format!("{}/grad", domain.space_id()))?,
            other => {
                return Err(Error::InvalidShape(format!(
                    "gradient supports 1-D or 2-D domains, got {other:?}"
                )))
            }
        };
        let axes = domain.shape().len() as f64;
        Ok(GradOp {
            domain,
            range,
            cell: NormCell::analytic(2.0 * axes.sqrt()),
        })
    }
}

impl LinOp for GradOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn range(&self) -> &Space {
        &self.range
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.domain, "grad forward")?;
        let mut out = self.range.zeros();
        match *self.domain.shape() {
            [n] => {
                let xd = x.data();
                let od = out.data_mut();
                for i in 0..n - 1 {
                    od[i] = xd[i + 1] - xd[i];
                }
            }
            [h, w] => {
                let xd = x.data();
                let od = out.data_mut();
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        if i + 1 < h {
                            od[p] = xd[p + w] - xd[p];
                        }
                        if j + 1 < w {
                            od[h * w + p] = xd[p + 1] - xd[p];
                        }
                    }
                }
            }
            _ => unreachable!("validated at construction"),
        }
        Ok(out)
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.range, "grad adjoint")?;
        let mut out = self.domain.zeros();
        match *self.domain.shape() {
            [n] => {
                let yd = y.data();
                let od = out.data_mut();
                for i in 0..n - 1 {
                    od[i + 1] += yd[i];
                    od[i] -= yd[i];
                }
            }
            [h, w] => {
                let yd = y.data();
                let od = out.data_mut();
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        if i + 1 < h {
                            let v = yd[p];
                            od[p + w] += v;
                            od[p] -= v;
                        }
                        if j + 1 < w {
                            let v = yd[h * w + p];
                            od[p + 1] += v;
                            od[p] -= v;
                        }
                    }
                }
            }
            _ => unreachable!("validated at construction"),
        }
        Ok(out)
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Normalized Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian width must be positive and finite, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    Ok(taps)
}

/// True convolution with zero padding, for 1-D or 2-D signals.
///
/// `out[i] = sum_k kernel[k] * x[i - k + center]` with out-of-range samples
/// treated as zero; the adjoint is the matching correlation.
#[derive(Clone, Debug)]
pub struct ConvOp {
    domain: Space,
    range: Space,
    kernel: Vec<f64>,
    kshape: Vec<usize>,
    center: Vec<usize>,
    cell: NormCell,
}

impl ConvOp {
    /// Convolution on `domain` with the given kernel and center index.
    ///
    /// The analytic bound is the kernel's absolute sum.
    pub fn new(
        domain: Space,
        kernel: Vec<f64>,
        kshape: Vec<usize>,
        center: Vec<usize>,
    ) -> Result<Self> {
        if kshape.len() != domain.shape().len() || !(1..=2).contains(&kshape.len()) {
            return Err(Error::InvalidShape(format!(
                "kernel rank {:?} must match 1-D or 2-D domain {:?}",
                kshape,
                domain.shape()
            )));
        }
        if kernel.len() != kshape.iter().product::<usize>() {
            return Err(Error::InvalidShape(
                "kernel data does not fill its shape".into(),
            ));
        }
        if center.len() != kshape.len() || center.iter().zip(&kshape).any(|(c, k)| c >= k) {
            return Err(Error::InvalidShape(format!(
                "center {center:?} outside kernel shape {kshape:?}"
            )));
        }
        let bound = kernel.iter().map(|v| v.abs()).sum();
        let range = domain.derived("conv");
        Ok(ConvOp {
            domain,
            range,
            kernel,
            kshape,
            center,
            cell: NormCell::analytic(bound),
        })
    }

    /// Centered isotropic Gaussian blur with width `sigma` in pixels.
    pub fn gaussian(domain: Space, sigma: f64) -> Result<Self> {
        let taps = gaussian_taps(sigma)?;
        let k = taps.len();
        match domain.shape().len() {
            1 => ConvOp::new(domain, taps, vec![k], vec![k / 2]),
            2 => {
                let mut kernel = vec![0.0; k * k];
                for i in 0..k {
                    for j in 0..k {
                        kernel[i * k + j] = taps[i] * taps[j];
                    }
                }
                ConvOp::new(domain, kernel, vec![k, k], vec![k / 2, k / 2])
            }
            _ => Err(Error::InvalidShape(
                "gaussian convolution supports 1-D or 2-D domains".into(),
            )),
        }
    }

    fn apply(&self, x: &SpaceElement, adjoint: bool) -> SpaceElement {
        let mut out = if adjoint {
            self.domain.zeros()
        } else {
            self.range.zeros()
        };
        let xd = x.data();
        let od = out.data_mut();
        match (self.domain.shape(), self.kshape.as_slice()) {
            ([n], [k]) => {
                let n = *n as i64;
                let k = *k as i64;
                let c = self.center[0] as i64;
                for i in 0..n {
                    let mut acc = 0.0;
                    for t in 0..k {
                        let j = if adjoint { i + t - c } else { i - t + c };
                        if (0..n).contains(&j) {
                            acc += self.kernel[t as usize] * xd[j as usize];
                        }
                    }
                    od[i as usize] = acc;
                }
            }
            ([h, w], [kh, kw]) => {
                let (h, w) = (*h as i64, *w as i64);
                let (kh, kw) = (*kh as i64, *kw as i64);
                let (cy, cx) = (self.center[0] as i64, self.center[1] as i64);
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for ti in 0..kh {
                            let si = if adjoint { i + ti - cy } else { i - ti + cy };
                            if !(0..h).contains(&si) {
                                continue;
                            }
                            for tj in 0..kw {
                                let sj = if adjoint { j + tj - cx } else { j - tj + cx };
                                if (0..w).contains(&sj) {
                                    acc += self.kernel[(ti * kw + tj) as usize]
                                        * xd[(si * w + sj) as usize];
                                }
                            }
                        }
                        od[(i * w + j) as usize] = acc;
                    }
                }
            }
            _ => unreachable!("validated at construction"),
        }
        out
    }
}

impl LinOp for ConvOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn range(&self) -> &Space {
        &self.range
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.domain, "conv forward")?;
        Ok(self.apply(x, false))
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.range, "conv adjoint")?;
        Ok(self.apply(y, true))
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Separable 2-D convolution applied as two 1-D passes.
///
/// Equivalent to [`ConvOp`] with the outer-product kernel, but each apply
/// costs `O(hw (kh + kw))` instead of `O(hw kh kw)`.
#[derive(Clone, Debug)]
pub struct SeparableConvOp {
    domain: Space,
    range: Space,
    taps_y: Vec<f64>,
    taps_x: Vec<f64>,
    cell: NormCell,
}

impl SeparableConvOp {
    /// Convolution with the outer product of two centered odd-length taps.
    pub fn new(domain: Space, taps_y: Vec<f64>, taps_x: Vec<f64>) -> Result<Self> {
        if domain.shape().len() != 2 {
            return Err(Error::InvalidShape(
                "separable convolution needs a 2-D domain".into(),
            ));
        }
        if taps_y.len() % 2 == 0 || taps_x.len() % 2 == 0 {
            return Err(Error::InvalidShape(
                "separable taps must have odd length so the kernel is centered".into(),
            ));
        }
        let bound: f64 = taps_y.iter().map(|v| v.abs()).sum::<f64>()
            * taps_x.iter().map(|v| v.abs()).sum::<f64>();
        let range = domain.derived("conv");
        Ok(SeparableConvOp {
            domain,
            range,
            taps_y,
            taps_x,
            cell: NormCell::analytic(bound),
        })
    }

    /// Gaussian blur with possibly different widths per axis.
    pub fn gaussian(domain: Space, sigma_y: f64, sigma_x: f64) -> Result<Self> {
        SeparableConvOp::new(domain, gaussian_taps(sigma_y)?, gaussian_taps(sigma_x)?)
    }

    fn pass(data: &mut [f64], h: usize, w: usize, taps: &[f64], along_rows: bool, flip: bool) {
        let r = (taps.len() / 2) as i64;
        let line_len = if along_rows { w } else { h } as i64;
        let n_lines = if along_rows { h } else { w };
        let mut line = vec![0.0; line_len as usize];
        for l in 0..n_lines {
            for i in 0..line_len {
                let mut acc = 0.0;
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as i64 - r;
                    let j = if flip { i + off } else { i - off };
                    if (0..line_len).contains(&j) {
                        let idx = if along_rows {
                            l * w + j as usize
                        } else {
                            (j as usize) * w + l
                        };
                        acc += tap * data[idx];
                    }
                }
                line[i as usize] = acc;
            }
            for i in 0..line_len as usize {
                let idx = if along_rows { l * w + i } else { i * w + l };
                data[idx] = line[i];
            }
        }
    }

    fn apply(&self, x: &SpaceElement, flip: bool) -> SpaceElement {
        let (h, w) = (self.domain.shape()[0], self.domain.shape()[1]);
        let mut out = if flip {
            self.domain.zeros()
        } else {
            self.range.zeros()
        };
        out.data_mut().copy_from_slice(x.data());
        Self::pass(out.data_mut(), h, w, &self.taps_y, false, flip);
        Self::pass(out.data_mut(), h, w, &self.taps_x, true, flip);
        out
    }
}

impl LinOp for SeparableConvOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn range(&self) -> &Space {
        &self.range
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.domain, "separable conv forward")?;
        Ok(self.apply(x, false))
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.range, "separable conv adjoint")?;
        Ok(self.apply(y, true))
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Number of midpoint samples per axis when integrating a pixel footprint
/// for the tomography projector. Even, so the piecewise-linear footprint is
/// integrated exactly and the sample set is symmetric under negation.
pub const FOOTPRINT_SAMPLES_PER_AXIS: usize = 12;

/// Largest supported image side for [`radon_build`].
pub const RADON_MAX_SIDE: usize = 128;

/// Sparse parallel-beam tomography projector.
///
/// Rows are (angle, detector) pairs in angle-major order; columns are image
/// pixels in row-major order. Entries come from integrating each pixel's
/// bilinear footprint over a fixed midpoint grid and splitting every sample
/// linearly between the two nearest detector bins, scaled by the inverse
/// detector spacing. Because the sample grid and weights do not depend on
/// the angle, the total mass assigned per pixel is the same for every angle
/// up to roundoff.
#[derive(Clone, Debug)]
pub struct RadonOp {
    domain: Space,
    range: Space,
    n_rows: usize,
    indptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    cell: NormCell,
}

/// Builds a [`RadonOp`] for a square `img_side` image with `n_angles`
/// uniformly spaced angles in `[0, pi)` and `n_det` detector bins.
pub fn radon_build(img_side: usize, n_angles: usize, n_det: usize) -> Result<RadonOp> {
    if img_side < 2 || img_side > RADON_MAX_SIDE {
        return Err(Error::InvalidArgument(format!(
            "image side must be in [2, {RADON_MAX_SIDE}], got {img_side}"
        )));
    }
    if n_angles == 0 || n_det < 2 {
        return Err(Error::InvalidArgument(
            "need at least one angle and two detector bins".into(),
        ));
    }
    let s = img_side;
    let dt = ((s as f64 + 1.0) * std::f64::consts::SQRT_2 + 4.0) / n_det as f64;
    let det_center = (n_det as f64 - 1.0) / 2.0;

    let k = FOOTPRINT_SAMPLES_PER_AXIS;
    let step = 2.0 / k as f64;
    let offsets: Vec<f64> = (0..k).map(|i| -1.0 + (i as f64 + 0.5) * step).collect();
    let axis_w: Vec<f64> = offsets.iter().map(|u| (1.0 - u.abs()) * step).collect();

    let mut samples = Vec::with_capacity(k * k);
    for (iu, &u) in offsets.iter().enumerate() {
        for (iv, &v) in offsets.iter().enumerate() {
            samples.push((u, v, axis_w[iu] * axis_w[iv]));
        }
    }

    let angles: Vec<(f64, f64)> = (0..n_angles)
        .map(|a| {
            let th = std::f64::consts::PI * a as f64 / n_angles as f64;
            (th.cos(), th.sin())
        })
        .collect();

    let n_rows = n_angles * n_det;
    let mut row_entries: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_rows];
    let c = (s as f64 - 1.0) / 2.0;
    let mut scratch = vec![0.0f64; n_det];
    let mut touched: Vec<usize> = Vec::with_capacity(64);

    for pi in 0..s {
        for pj in 0..s {
            let col = (pi * s + pj) as u32;
            let px = pj as f64 - c;
            let py = pi as f64 - c;
            for (a, &(cos_t, sin_t)) in angles.iter().enumerate() {
                let base = px * cos_t + py * sin_t;
                for &(u, v, w) in &samples {
                    let t = base + u * cos_t + v * sin_t;
                    let pos = t / dt + det_center;
                    let m = pos.floor();
                    let f = pos - m;
                    let m = m as i64;
                    if m < 0 || (m + 1) as usize >= n_det {
                        return Err(Error::InvalidArgument(format!(
                            "detector span too small: sample at t={t} falls outside {n_det} bins"
                        )));
                    }
                    let lo = m as usize;
                    if scratch[lo] == 0.0 {
                        touched.push(lo);
                    }
                    if scratch[lo + 1] == 0.0 {
                        touched.push(lo + 1);
                    }
                    scratch[lo] += w * (1.0 - f) / dt;
                    scratch[lo + 1] += w * f / dt;
                }
                touched.sort_unstable();
                touched.dedup();
                for &d in &touched {
                    if scratch[d] != 0.0 {
                        row_entries[a * n_det + d].push((col, scratch[d]));
                    }
                    scratch[d] = 0.0;
                }
                touched.clear();
            }
        }
    }

    let mut indptr = Vec::with_capacity(n_rows + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    indptr.push(0);
    for row in &row_entries {
        cols.extend(row.iter().map(|&(c, _)| c));
        vals.extend(row.iter().map(|&(_, v)| v));
        indptr.push(cols.len());
    }

    let mut row_abs = vec![0.0f64; n_rows];
    let mut col_abs = vec![0.0f64; s * s];
    for r in 0..n_rows {
        for e in indptr[r]..indptr[r + 1] {
            let a = vals[e].abs();
            row_abs[r] += a;
            col_abs[cols[e] as usize] += a;
        }
    }
    let row_max = row_abs.iter().fold(0.0f64, |m, &v| m.max(v));
    let col_max = col_abs.iter().fold(0.0f64, |m, &v| m.max(v));

    let domain = Space::new(vec![s, s], format!("image{s}"))?;
    let range = Space::new(vec![n_angles, n_det], format!("sino{n_angles}x{n_det}"))?;
    Ok(RadonOp {
        domain,
        range,
        n_rows,
        indptr,
        cols,
        vals,
        cell: NormCell::analytic((row_max * col_max).sqrt()),
    })
}

/// [`radon_build`] with the default geometry: one angle per image row and
/// `ceil(1.5 * img_side)` detector bins.
pub fn radon_default(img_side: usize) -> Result<RadonOp> {
    let n_det = (3 * img_side + 1) / 2;
    radon_build(img_side, img_side, n_det)
}

impl RadonOp {
    /// Number of stored nonzeros.
    pub fn nnz(&self) -> usize {
        self.vals.len()
    }
}

impl LinOp for RadonOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn range(&self) -> &Space {
        &self.range
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(x, &self.domain, "radon forward")?;
        let mut out = self.range.zeros();
        let xd = x.data();
        let od = out.data_mut();
        for r in 0..self.n_rows {
            let mut acc = 0.0;
            for e in self.indptr[r]..self.indptr[r + 1] {
                acc += self.vals[e] * xd[self.cols[e] as usize];
            }
            od[r] = acc;
        }
        Ok(out)
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.range, "radon adjoint")?;
        let mut out = self.domain.zeros();
        let yd = y.data();
        let od = out.data_mut();
        for r in 0..self.n_rows {
            let w = yd[r];
            if w == 0.0 {
                continue;
            }
            for e in self.indptr[r]..self.indptr[r + 1] {
                od[self.cols[e] as usize] += self.vals[e] * w;
            }
        }
        Ok(out)
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// An operator post-multiplied by a scalar, sharing the wrapped operator.
#[derive(Clone)]
pub struct ScaledOp {
    inner: Arc<dyn LinOp>,
    factor: f64,
    cell: NormCell,
}

impl ScaledOp {
    /// `x -> factor * inner(x)`.
    pub fn new(inner: Arc<dyn LinOp>, factor: f64) -> Self {
        let bound = inner.norm_bound() * factor.abs();
        let estimated = inner.norm_is_estimated();
        let cell = NormCell::analytic(bound);
        cell.set(bound, estimated);
        ScaledOp {
            inner,
            factor,
            cell,
        }
    }

    /// The scalar factor.
    pub fn factor(&self) -> f64 {
        self.factor
    }
}

impl LinOp for ScaledOp {
    fn domain(&self) -> &Space {
        self.inner.domain()
    }
    fn range(&self) -> &Space {
        self.inner.range()
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        Ok(self.inner.forward(x)?.scaled(self.factor))
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        Ok(self.inner.adjoint(y)?.scaled(self.factor))
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Wrapper that counts forward and adjoint applications.
pub struct CountingOp {
    inner: Arc<dyn LinOp>,
    forward_calls: AtomicUsize,
    adjoint_calls: AtomicUsize,
}

impl CountingOp {
    /// Wraps `inner` with call counters starting at zero.
    pub fn new(inner: Arc<dyn LinOp>) -> Self {
        CountingOp {
            inner,
            forward_calls: AtomicUsize::new(0),
            adjoint_calls: AtomicUsize::new(0),
        }
    }

    /// `(forward, adjoint)` call counts so far.
    pub fn counts(&self) -> (usize, usize) {
        (
            self.forward_calls.load(Ordering::SeqCst),
            self.adjoint_calls.load(Ordering::SeqCst),
        )
    }

    /// Resets both counters.
    pub fn reset(&self) {
        self.forward_calls.store(0, Ordering::SeqCst);
        self.adjoint_calls.store(0, Ordering::SeqCst);
    }
}

impl LinOp for CountingOp {
    fn domain(&self) -> &Space {
        self.inner.domain()
    }
    fn range(&self) -> &Space {
        self.inner.range()
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        self.forward_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(x)
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        self.adjoint_calls.fetch_add(1, Ordering::SeqCst);
        self.inner.adjoint(y)
    }
    fn norm_cell(&self) -> &NormCell {
        self.inner.norm_cell()
    }
}

/// Several operators sharing one domain, stacked into a product range.
///
/// As a [`LinOp`], the product range is flattened into a single
/// concatenated space, which lets the power method treat the stack as one
/// operator; the block view is available through [`StackedOp::forward_blocks`]
/// and [`StackedOp::adjoint_blocks`].
pub struct StackedOp {
    blocks: Vec<Arc<dyn LinOp>>,
    domain: Space,
    flat_range: Space,
    cell: NormCell,
}

impl StackedOp {
    /// Stacks operators with identical domains.
    ///
    /// The analytic bound is the root-sum-square of the block bounds; the
    /// bound is flagged estimated if any block bound is.
    pub fn new(blocks: Vec<Arc<dyn LinOp>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidShape("stack needs at least one block".into()));
        }
        let domain = blocks[0].domain().clone();
        for b in &blocks[1..] {
            if *b.domain() != domain {
                return Err(Error::SpaceMismatch(
                    "stacked operators must share a domain".into(),
                ));
            }
        }
        let total: usize = blocks.iter().map(|b| b.range().len()).sum();
        let ids: Vec<&str> = blocks.iter().map(|b| b.range().space_id()).collect();
        let flat_range = Space::new(vec![total], format!("stack({})", ids.join(",")))?;
        let bound = blocks
            .iter()
            .map(|b| {
                let v = b.norm_bound();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let estimated = blocks.iter().any(|b| b.norm_is_estimated());
        let cell = NormCell::analytic(bound);
        cell.set(bound, estimated);
        Ok(StackedOp {
            blocks,
            domain,
            flat_range,
            cell,
        })
    }

    /// The stacked blocks.
    pub fn blocks(&self) -> &[Arc<dyn LinOp>] {
        &self.blocks
    }

    /// Applies every block, returning one range element per block.
    pub fn forward_blocks(&self, x: &SpaceElement) -> Result<ProductElement> {
        let outs = self
            .blocks
            .iter()
            .map(|b| b.forward(x))
            .collect::<Result<Vec<_>>>()?;
        ProductElement::new(outs)
    }

    /// Sums the block adjoints applied to the matching components of `y`.
    pub fn adjoint_blocks(&self, y: &ProductElement) -> Result<SpaceElement> {
        if y.n_blocks() != self.blocks.len() {
            return Err(Error::SpaceMismatch(format!(
                "stack adjoint: got {} blocks, expected {}",
                y.n_blocks(),
                self.blocks.len()
            )));
        }
        let mut acc = self.domain.zeros();
        for (b, yb) in self.blocks.iter().zip(y.blocks()) {
            let part = b.adjoint(yb)?;
            crate::tensor::axpby_into(1.0, &part, 1.0, &mut acc)?;
        }
        Ok(acc)
    }
}

impl LinOp for StackedOp {
    fn domain(&self) -> &Space {
        &self.domain
    }
    fn range(&self) -> &Space {
        &self.flat_range
    }
    fn forward(&self, x: &SpaceElement) -> Result<SpaceElement> {
        let blocks = self.forward_blocks(x)?;
        let mut out = self.flat_range.zeros();
        let od = out.data_mut();
        let mut off = 0;
        for b in blocks.blocks() {
            od[off..off + b.len()].copy_from_slice(b.data());
            off += b.len();
        }
        Ok(out)
    }
    fn adjoint(&self, y: &SpaceElement) -> Result<SpaceElement> {
        check_in_space(y, &self.flat_range, "stack adjoint")?;
        let mut parts = Vec::with_capacity(self.blocks.len());
        let mut off = 0;
        for b in &self.blocks {
            let len = b.range().len();
            let mut part = b.range().zeros();
            part.data_mut().copy_from_slice(&y.data()[off..off + len]);
            off += len;
            parts.push(part);
        }
        self.adjoint_blocks(&ProductElement::new(parts)?)
    }
    fn norm_cell(&self) -> &NormCell {
        &self.cell
    }
}

/// Per-iteration power-method estimates of the operator norm.
///
/// Each entry is the square root of a Rayleigh quotient of the Gram
/// operator, so the sequence never exceeds the true norm and is
/// nondecreasing.
pub fn power_method_trace(op: &dyn LinOp, iters: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if iters == 0 {
        return Err(Error::InvalidArgument(
            "power method needs at least one iteration".into(),
        ));
    }
    let proto = op.domain().zeros();
    let mut v = gaussian_like(&proto, rng);
    let mut vn = v.norm();
    while vn == 0.0 {
        v = gaussian_like(&proto, rng);
        vn = v.norm();
    }
    let mut trace = Vec::with_capacity(iters);
    let mut best = 0.0f64;
    for _ in 0..iters {
        let av = op.forward(&v)?;
        let avn = av.norm();
        best = best.max(avn / vn);
        trace.push(best);
        if avn == 0.0 {
            break;
        }
        let atav = op.adjoint(&av)?;
        let an = atav.norm();
        if an == 0.0 {
            break;
        }
        v = atav.scaled(1.0 / an);
        vn = v.norm();
    }
    while trace.len() < iters {
        trace.push(best);
    }
    Ok(trace)
}

/// Measures the operator norm by the power method, stores the measurement
/// times [`ESTIMATE_SAFETY`] as the new (estimated) bound, and returns the
/// raw measurement.
pub fn estimate_norm(op: &dyn LinOp, iters: usize, rng: &mut RngStream) -> Result<f64> {
    let trace = power_method_trace(op, iters, rng)?;
    let raw = *trace.last().expect("trace is never empty");
    op.set_norm_bound(raw * ESTIMATE_SAFETY, true);
    Ok(raw)
}

/// Wraps `op` scaled by the reciprocal of its stored bound, so the
/// returned operator's bound is exactly one.
///
/// Fails if the stored bound is zero (the operator is indistinguishable
/// from zero) or not finite. When the input bound was estimated with the
/// default safety factor, the true norm of the result sits just below one.
pub fn normalize(op: Arc<dyn LinOp>) -> Result<ScaledOp> {
    let b = op.norm_bound();
    if !b.is_finite() || b == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "cannot normalize: stored norm bound is {b}"
        )));
    }
    let estimated = op.norm_is_estimated();
    let scaled = ScaledOp::new(op, 1.0 / b);
    scaled.norm_cell().set(1.0, estimated);
    Ok(scaled)
}

/// Materializes a small operator as a dense row-major matrix by applying it
/// to every basis vector. Intended for oracles and small closed-form solves.
pub fn to_dense(op: &dyn LinOp) -> Result<Vec<f64>> {
    let n = op.domain().len();
    let m = op.range().len();
    let mut dense = vec![0.0; m * n];
    let mut e = op.domain().zeros();
    for j in 0..n {
        e.data_mut()[j] = 1.0;
        let col = op.forward(&e)?;
        for i in 0..m {
            dense[i * n + j] = col.data()[i];
        }
        e.data_mut()[j] = 0.0;
    }
    Ok(dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::inner;

    fn space1(n: usize) -> Space {
        Space::new(vec![n], "sig").unwrap()
    }

    fn space2(h: usize, w: usize) -> Space {
        Space::new(vec![h, w], "img").unwrap()
    }

    fn elem(data: &[f64], space: &Space) -> SpaceElement {
        SpaceElement::new(data.to_vec(), space.clone()).unwrap()
    }

    /// `<Ax, y> = <x, A*y>` on random draws, with relative slack 1e-10.
    fn assert_adjoint_identity(op: &dyn LinOp, rng: &mut RngStream) {
        for _ in 0..10 {
            let x = gaussian_like(&op.domain().zeros(), rng);
            let y = gaussian_like(&op.range().zeros(), rng);
            let ax = op.forward(&x).unwrap();
            let aty = op.adjoint(&y).unwrap();
            let lhs = inner(&ax, &y).unwrap();
            let rhs = inner(&x, &aty).unwrap();
            let scale = 1.0 + ax.norm() * y.norm() + x.norm() * aty.norm();
            assert!(
                (lhs - rhs).abs() <= 1e-10 * scale,
                "adjoint identity violated: {lhs} vs {rhs}"
            );
        }
    }

    /// `|Ax| <= bound * |x| * (1 + 1e-6)` on random draws.
    fn assert_norm_bound(op: &dyn LinOp, rng: &mut RngStream) {
        let bound = op.norm_bound();
        for _ in 0..20 {
            let x = gaussian_like(&op.domain().zeros(), rng);
            let ax = op.forward(&x).unwrap();
            assert!(
                ax.norm() <= bound * x.norm() * (1.0 + 1e-6),
                "amplification {} exceeds bound {bound}",
                ax.norm() / x.norm()
            );
        }
    }

    #[test]
    fn identity_and_scale_behave() {
        let s = space1(5);
        let x = elem(&[1.0, -2.0, 0.0, 4.0, 0.5], &s);
        let id = IdentityOp::new(s.clone());
        assert_eq!(id.forward(&x).unwrap().data(), x.data());
        assert_eq!(id.norm_bound(), 1.0);
        let sc = ScaleOp::new(s.clone(), -2.5);
        assert_eq!(sc.forward(&x).unwrap().data()[1], 5.0);
        assert_eq!(sc.norm_bound(), 2.5);
        let wrong = elem(&[1.0], &space1(1));
        assert!(id.forward(&wrong).is_err());
    }

    #[test]
    fn grad_1d_frozen_examples() {
        let s = space1(3);
        let g = GradOp::new(s.clone()).unwrap();
        let fwd = g.forward(&elem(&[1.0, 2.0, 4.0], &s)).unwrap();
        assert_eq!(fwd.data(), &[1.0, 2.0, 0.0]);
        let adj = g
            .adjoint(&SpaceElement::new(vec![1.0, 0.0, 0.0], g.range().clone()).unwrap())
            .unwrap();
        assert_eq!(adj.data(), &[-1.0, 1.0, 0.0]);
    }

    #[test]
    fn grad_2d_shapes_and_adjoint() {
        let s = space2(4, 5);
        let g = GradOp::new(s).unwrap();
        assert_eq!(g.range().shape(), &[2, 4, 5]);
        let mut rng = RngStream::new(1);
        assert_adjoint_identity(&g, &mut rng);
        assert_norm_bound(&g, &mut rng);
        assert!((g.norm_bound() - 2.0 * 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grad_1d_norm_matches_closed_form() {
        let n = 64;
        let g = GradOp::new(space1(n)).unwrap();
        let mut rng = RngStream::new(2);
        let est = estimate_norm(&g, 2000, &mut rng).unwrap();
        let exact = 2.0 * (std::f64::consts::PI / (2.0 * n as f64)).cos();
        assert!(
            (1.9..=2.0).contains(&est),
            "estimate {est} outside [1.9, 2]"
        );
        assert!(
            (est - exact).abs() < 1e-3,
            "estimate {est} vs closed form {exact}"
        );
        assert!(g.norm_is_estimated());
        assert!((g.norm_bound() - est * ESTIMATE_SAFETY).abs() < 1e-12);
    }

    #[test]
    fn conv_1d_frozen_example_and_adjoint() {
        let s = space1(4);
        let op = ConvOp::new(s.clone(), vec![1.0, 2.0, 3.0], vec![3], vec![1]).unwrap();
        let out = op.forward(&elem(&[1.0, 0.0, 0.0, 2.0], &s)).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 2.0, 4.0]);
        let mut rng = RngStream::new(3);
        assert_adjoint_identity(&op, &mut rng);
        assert_norm_bound(&op, &mut rng);
        assert_eq!(op.norm_bound(), 6.0);
    }

    #[test]
    fn conv_2d_gaussian_adjoint_and_bound() {
        let op = ConvOp::gaussian(space2(9, 7), 1.2).unwrap();
        let mut rng = RngStream::new(4);
        assert_adjoint_identity(&op, &mut rng);
        assert_norm_bound(&op, &mut rng);
        assert!(op.norm_bound() <= 1.0 + 1e-12, "blur kernel sums to one");
    }

    #[test]
    fn gaussian_taps_normalized_and_symmetric() {
        let taps = gaussian_taps(3.0).unwrap();
        assert_eq!(taps.len(), 19);
        let sum: f64 = taps.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for i in 0..taps.len() / 2 {
            assert_eq!(taps[i], taps[taps.len() - 1 - i]);
        }
        assert!(gaussian_taps(0.0).is_err());
    }

    #[test]
    fn separable_conv_matches_dense_outer_product() {
        let s = space2(8, 8);
        let ty = gaussian_taps(1.5).unwrap();
        let tx = gaussian_taps(0.8).unwrap();
        let sep = SeparableConvOp::new(s.clone(), ty.clone(), tx.clone()).unwrap();
        let mut kernel = vec![0.0; ty.len() * tx.len()];
        for i in 0..ty.len() {
            for j in 0..tx.len() {
                kernel[i * tx.len() + j] = ty[i] * tx[j];
            }
        }
        let dense = ConvOp::new(
            s.clone(),
            kernel,
            vec![ty.len(), tx.len()],
            vec![ty.len() / 2, tx.len() / 2],
        )
        .unwrap();
        let mut rng = RngStream::new(5);
        for _ in 0..5 {
            let x = gaussian_like(&s.zeros(), &mut rng);
            let a = sep.forward(&x).unwrap();
            let b = dense.forward(&x).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
            let ya = sep.adjoint(&a).unwrap();
            let yb = dense.adjoint(&b).unwrap();
            for (u, v) in ya.data().iter().zip(yb.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert_adjoint_identity(&sep, &mut rng);
    }

    #[test]
    fn matrix_and_diag_ops() {
        let m = MatrixOp::from_entries(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3, "m").unwrap();
        let x = SpaceElement::new(vec![1.0, 0.0, -1.0], m.domain().clone()).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[-2.0, -2.0]);
        let mut rng = RngStream::new(6);
        assert_adjoint_identity(&m, &mut rng);
        assert_norm_bound(&m, &mut rng);

        let s = space1(3);
        let d = DiagOp::new(s.clone(), vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(
            d.forward(&elem(&[1.0, 1.0, 2.0], &s)).unwrap().data(),
            &[2.0, -1.0, 1.0]
        );
        assert_eq!(d.norm_bound(), 2.0);
        assert_adjoint_identity(&d, &mut rng);
    }

    #[test]
    fn power_trace_is_monotone_and_below_truth() {
        let mut rng = RngStream::new(7);
        let entries: Vec<f64> = (0..100).map(|_| rng.next_standard_normal()).collect();
        let m = MatrixOp::from_entries(entries, 10, 10, "rand").unwrap();
        let trace = power_method_trace(&m, 40, &mut rng).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-15, "trace must be nondecreasing");
        }
        let analytic = m.norm_bound();
        assert!(*trace.last().unwrap() <= analytic * (1.0 + 1e-12));
    }

    #[test]
    fn estimate_of_zero_operator_is_zero() {
        let z = ScaleOp::new(space1(6), 0.0);
        let mut rng = RngStream::new(8);
        let est = estimate_norm(&z, 10, &mut rng).unwrap();
        assert_eq!(est, 0.0);
        assert_eq!(z.norm_bound(), 0.0);
        assert!(normalize(Arc::new(z)).is_err());
    }

    #[test]
    fn normalize_scale_by_three_lands_just_below_one() {
        let sc = Arc::new(ScaleOp::new(space1(5), 3.0));
        let mut rng = RngStream::new(9);
        let est = estimate_norm(sc.as_ref(), 10, &mut rng).unwrap();
        assert!((est - 3.0).abs() < 1e-9);
        let unit = normalize(sc).unwrap();
        assert_eq!(unit.norm_bound(), 1.0);
        assert!(unit.norm_is_estimated());
        let x = elem(&[1.0, 0.0, 0.0, 0.0, 0.0], &space1(5));
        let amp = unit.forward(&x).unwrap().norm() / x.norm();
        assert!((amp - 1.0 / ESTIMATE_SAFETY).abs() < 1e-6);
        let re = estimate_norm(&unit, 10, &mut rng).unwrap();
        assert!(
            (0.99..=1.0).contains(&re),
            "re-estimate {re} outside [0.99, 1]"
        );
    }

    #[test]
    fn normalized_grad_reestimates_inside_unit_interval() {
        let g = Arc::new(GradOp::new(space2(12, 12)).unwrap());
        let mut rng = RngStream::new(10);
        estimate_norm(g.as_ref(), 60, &mut rng).unwrap();
        let unit = normalize(g).unwrap();
        assert_eq!(unit.norm_bound(), 1.0);
        let re = estimate_norm(&unit, 60, &mut rng).unwrap();
        assert!(
            (0.99..=1.0).contains(&re),
            "re-estimate {re} outside [0.99, 1]"
        );
    }

    #[test]
    fn radon_rejects_out_of_contract_sizes() {
        assert!(radon_build(129, 10, 40).is_err());
        assert!(radon_build(1, 10, 40).is_err());
        assert!(radon_build(16, 0, 24).is_err());
        assert!(radon_build(16, 4, 1).is_err());
        assert!(radon_default(16).is_ok());
    }

    #[test]
    fn radon_adjoint_and_bound() {
        let op = radon_default(16).unwrap();
        assert!(op.nnz() > 0);
        let mut rng = RngStream::new(11);
        assert_adjoint_identity(&op, &mut rng);
        assert_norm_bound(&op, &mut rng);
    }

    #[test]
    fn radon_single_pixel_mass_is_angle_independent() {
        let side = 16;
        let op = radon_default(side).unwrap();
        let mut img = op.domain().zeros();
        img.data_mut()[5 * side + 11] = 1.0;
        let sino = op.forward(&img).unwrap();
        let (n_angles, n_det) = (op.range().shape()[0], op.range().shape()[1]);
        let sums: Vec<f64> = (0..n_angles)
            .map(|a| sino.data()[a * n_det..(a + 1) * n_det].iter().sum())
            .collect();
        let first = sums[0];
        assert!(first > 0.0);
        for (a, s) in sums.iter().enumerate() {
            assert!(
                (s - first).abs() <= 1e-8 * first.abs(),
                "angle {a} mass {s} deviates from {first}"
            );
        }
    }

    #[test]
    fn radon_of_centered_disk_is_detector_symmetric() {
        let side = 16;
        let op = radon_default(side).unwrap();
        let c = (side as f64 - 1.0) / 2.0;
        let mut img = op.domain().zeros();
        for i in 0..side {
            for j in 0..side {
                let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                if r2 <= (side as f64 / 3.0).powi(2) {
                    img.data_mut()[i * side + j] = 1.0;
                }
            }
        }
        let sino = op.forward(&img).unwrap();
        let (n_angles, n_det) = (op.range().shape()[0], op.range().shape()[1]);
        let peak = sino.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        for a in 0..n_angles {
            let row = &sino.data()[a * n_det..(a + 1) * n_det];
            for d in 0..n_det / 2 {
                let diff = (row[d] - row[n_det - 1 - d]).abs();
                assert!(
                    diff <= 1e-10 * peak,
                    "angle {a} bins {d}/{} differ by {diff}",
                    n_det - 1 - d
                );
            }
        }
    }

    #[test]
    fn stacked_op_combines_blocks() {
        let s = space2(6, 6);
        let g: Arc<dyn LinOp> = Arc::new(GradOp::new(s.clone()).unwrap());
        let i: Arc<dyn LinOp> = Arc::new(IdentityOp::new(s.clone()));
        let st = StackedOp::new(vec![i.clone(), g.clone()]).unwrap();
        assert_eq!(st.range().len(), 36 + 72);
        let mut rng = RngStream::new(12);
        let x = gaussian_like(&s.zeros(), &mut rng);
        let blocks = st.forward_blocks(&x).unwrap();
        assert_eq!(blocks.blocks()[0].data(), x.data());
        assert_eq!(blocks.blocks()[1].data(), g.forward(&x).unwrap().data());
        let back = st.adjoint_blocks(&blocks).unwrap();
        let direct = crate::tensor::axpby(
            1.0,
            &i.adjoint(blocks.blocks().first().unwrap()).unwrap(),
            1.0,
            &g.adjoint(&blocks.blocks()[1]).unwrap(),
        )
        .unwrap();
        assert_eq!(back.data(), direct.data());
        assert_adjoint_identity(&st, &mut rng);
        assert_norm_bound(&st, &mut rng);
        let expect = (1.0f64 + 8.0).sqrt();
        assert!((st.norm_bound() - expect).abs() < 1e-12);
    }

    #[test]
    fn stacked_op_requires_shared_domain() {
        let a: Arc<dyn LinOp> = Arc::new(IdentityOp::new(space1(4)));
        let b: Arc<dyn LinOp> = Arc::new(IdentityOp::new(space1(5)));
        assert!(StackedOp::new(vec![a, b]).is_err());
    }

    #[test]
    fn counting_op_tracks_calls() {
        let s = space1(4);
        let op = CountingOp::new(Arc::new(IdentityOp::new(s.clone())));
        let x = s.zeros();
        op.forward(&x).unwrap();
        op.forward(&x).unwrap();
        op.adjoint(&x).unwrap();
        assert_eq!(op.counts(), (2, 1));
        op.reset();
        assert_eq!(op.counts(), (0, 0));
    }

    #[test]
    fn to_dense_reproduces_matrix() {
        let m = MatrixOp::from_entries(vec![1.0, -2.0, 0.5, 3.0], 2, 2, "d").unwrap();
        let dense = to_dense(&m).unwrap();
        assert_eq!(dense, vec![1.0, -2.0, 0.5, 3.0]);
    }
}
