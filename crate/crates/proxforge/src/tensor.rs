//! Flat `f64` tensors tagged with a space, product elements for stacked
//! variables, and a reproducible counter-based random stream.
//!
//! Every element carries its shape and a space identifier. Operations that
//! combine two elements fail with [`Error::SpaceMismatch`] unless both the
//! shape and the identifier agree, which catches accidental mixing of, say,
//! an image with its gradient field even when the flat lengths coincide.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Descriptor of a finite-dimensional vector space: a shape plus a name.
///
/// Two spaces are the same if and only if both the shape and the name agree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Space {
    shape: Vec<usize>,
    space_id: String,
}

impl Space {
    /// Creates a space. The shape must be non-empty with all extents
    /// positive; zero-length spaces are rejected.
    pub fn new(shape: Vec<usize>, space_id: impl Into<String>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidShape("shape must not be empty".into()));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape(format!(
                "all extents must be positive, got {shape:?}"
            )));
        }
        Ok(Space {
            shape,
            space_id: space_id.into(),
        })
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    /// Always false: zero-length spaces cannot be constructed.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Shape extents.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Space identifier.
    pub fn space_id(&self) -> &str {
        &self.space_id
    }

    /// A fresh space with the same shape and a derived identifier.
    pub fn derived(&self, suffix: &str) -> Space {
        Space {
            shape: self.shape.clone(),
            space_id: format!("{}/{}", self.space_id, suffix),
        }
    }

    /// The zero element of this space.
    pub fn zeros(&self) -> SpaceElement {
        SpaceElement {
            data: vec![0.0; self.len()],
            space: self.clone(),
        }
    }
}

/// A dense `f64` tensor living in a [`Space`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceElement {
    data: Vec<f64>,
    space: Space,
}

impl SpaceElement {
    /// Wraps raw data as an element of the given space.
    pub fn new(data: Vec<f64>, space: Space) -> Result<Self> {
        if data.len() != space.len() {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match space {:?} of length {}",
                data.len(),
                space.shape(),
                space.len()
            )));
        }
        Ok(SpaceElement { data, space })
    }

    /// Convenience constructor building the space inline.
    pub fn from_parts(
        data: Vec<f64>,
        shape: Vec<usize>,
        space_id: impl Into<String>,
    ) -> Result<Self> {
        let space = Space::new(shape, space_id)?;
        SpaceElement::new(data, space)
    }

    /// The space this element belongs to.
    pub fn space(&self) -> &Space {
        &self.space
    }

    /// Shape extents.
    pub fn shape(&self) -> &[usize] {
        self.space.shape()
    }

    /// Space identifier.
    pub fn space_id(&self) -> &str {
        self.space.space_id()
    }

    /// Flat scalar data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat scalar data.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of scalar entries (always positive).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false: elements of zero-length spaces cannot exist.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Whether `other` lives in the same space.
    pub fn same_space(&self, other: &SpaceElement) -> bool {
        self.space == other.space
    }

    /// The zero element of the same space.
    pub fn zeros_like(&self) -> SpaceElement {
        self.space.zeros()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// A copy with every entry scaled by `alpha`.
    pub fn scaled(&self, alpha: f64) -> SpaceElement {
        SpaceElement {
            data: self.data.iter().map(|v| alpha * v).collect(),
            space: self.space.clone(),
        }
    }

    /// A copy with `f` applied entrywise.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SpaceElement {
        SpaceElement {
            data: self.data.iter().map(|&v| f(v)).collect(),
            space: self.space.clone(),
        }
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_same_space(a: &SpaceElement, b: &SpaceElement, op: &str) -> Result<()> {
    if !a.same_space(b) {
        return Err(Error::SpaceMismatch(format!(
            "{op}: '{}' {:?} vs '{}' {:?}",
            a.space_id(),
            a.shape(),
            b.space_id(),
            b.shape()
        )));
    }
    Ok(())
}

/// Euclidean inner product of two elements of the same space.
pub fn inner(a: &SpaceElement, b: &SpaceElement) -> Result<f64> {
    check_same_space(a, b, "inner")?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Linear combination `alpha * x + beta * y` of two elements of the same
/// space.
pub fn axpby(alpha: f64, x: &SpaceElement, beta: f64, y: &SpaceElement) -> Result<SpaceElement> {
    check_same_space(x, y, "axpby")?;
    let data = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    Ok(SpaceElement {
        data,
        space: x.space.clone(),
    })
}

/// In-place `y <- alpha * x + beta * y`.
pub fn axpby_into(alpha: f64, x: &SpaceElement, beta: f64, y: &mut SpaceElement) -> Result<()> {
    check_same_space(x, y, "axpby_into")?;
    for (yi, xi) in y.data.iter_mut().zip(&x.data) {
        *yi = alpha * xi + beta * *yi;
    }
    Ok(())
}

/// An element of a product space: an ordered list of blocks, each in its own
/// space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductElement {
    blocks: Vec<SpaceElement>,
}

impl ProductElement {
    /// Wraps a non-empty list of blocks.
    pub fn new(blocks: Vec<SpaceElement>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidShape(
                "product element needs at least one block".into(),
            ));
        }
        Ok(ProductElement { blocks })
    }

    /// The blocks in order.
    pub fn blocks(&self) -> &[SpaceElement] {
        &self.blocks
    }

    /// Mutable access to the blocks.
    pub fn blocks_mut(&mut self) -> &mut [SpaceElement] {
        &mut self.blocks
    }

    /// Number of blocks.
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Whether `other` has the same block structure, space by space.
    pub fn same_space(&self, other: &ProductElement) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.same_space(b))
    }

    /// The zero element with the same block structure.
    pub fn zeros_like(&self) -> ProductElement {
        ProductElement {
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
        }
    }

    /// Inner product: the sum of blockwise inner products.
    pub fn inner(&self, other: &ProductElement) -> Result<f64> {
        if !self.same_space(other) {
            return Err(Error::SpaceMismatch(
                "product inner: block structures differ".into(),
            ));
        }
        let mut acc = 0.0;
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            acc += inner(a, b)?;
        }
        Ok(acc)
    }

    /// Euclidean norm over all blocks.
    pub fn norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let n = b.norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Blockwise `alpha * x + beta * y`.
    pub fn axpby(
        alpha: f64,
        x: &ProductElement,
        beta: f64,
        y: &ProductElement,
    ) -> Result<ProductElement> {
        if !x.same_space(y) {
            return Err(Error::SpaceMismatch(
                "product axpby: block structures differ".into(),
            ));
        }
        let blocks = x
            .blocks
            .iter()
            .zip(&y.blocks)
            .map(|(a, b)| axpby(alpha, a, beta, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(ProductElement { blocks })
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible random stream with counted draws and independent
/// substreams.
///
/// Substreams derived from the same seed are statistically independent and
/// do not share state, so the values drawn from one substream never depend
/// on how many draws other substreams have made. That makes results
/// reproducible even when the evaluation order of independent work items
/// changes (for example under different thread counts).
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for a seed.
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream {
            seed,
            stream,
            counter: 0,
            rng,
        }
    }

    /// An independent substream identified by `index`.
    ///
    /// Deterministic in `(seed, parent stream, index)` and independent of
    /// how many draws have been made from `self` or any sibling.
    pub fn substream(&self, index: u64) -> RngStream {
        let derived = splitmix64(self.stream ^ splitmix64(index.wrapping_add(1)));
        Self::with_stream(self.seed, derived)
    }

    /// The seed this stream was created from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of scalar draws made so far from this stream.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Uniform draw from `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.counter += 1;
        self.rng.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn next_standard_normal(&mut self) -> f64 {
        self.counter += 1;
        self.rng.sample(rand_distr::StandardNormal)
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer draw from `0..n`.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index needs a positive range");
        self.counter += 1;
        self.rng.gen_range(0..n)
    }
}

/// An element of the same space as `proto` with independent standard normal
/// entries drawn from `rng`.
pub fn gaussian_like(proto: &SpaceElement, rng: &mut RngStream) -> SpaceElement {
    let data = (0..proto.len())
        .map(|_| rng.next_standard_normal())
        .collect();
    SpaceElement {
        data,
        space: proto.space.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(shape: &[usize]) -> Space {
        Space::new(shape.to_vec(), "test").unwrap()
    }

    #[test]
    fn zero_length_spaces_rejected() {
        assert!(Space::new(vec![], "x").is_err());
        assert!(Space::new(vec![3, 0], "x").is_err());
        assert!(Space::new(vec![0], "x").is_err());
        assert!(Space::new(vec![1], "x").is_ok());
    }

    #[test]
    fn element_length_must_match_space() {
        let s = space(&[2, 3]);
        assert!(SpaceElement::new(vec![0.0; 5], s.clone()).is_err());
        assert!(SpaceElement::new(vec![0.0; 6], s).is_ok());
    }

    #[test]
    fn inner_rejects_space_mismatch() {
        let a = SpaceElement::from_parts(vec![1.0, 2.0], vec![2], "a").unwrap();
        let b = SpaceElement::from_parts(vec![1.0, 2.0], vec![2], "b").unwrap();
        let c = SpaceElement::from_parts(vec![1.0, 2.0], vec![2, 1], "a").unwrap();
        assert!(inner(&a, &b).is_err());
        assert!(inner(&a, &c).is_err());
        assert!(inner(&a, &a).is_ok());
    }

    #[test]
    fn inner_is_symmetric_and_bilinear() {
        let mut rng = RngStream::new(7);
        let proto = space(&[17]).zeros();
        for _ in 0..50 {
            let x = gaussian_like(&proto, &mut rng);
            let y = gaussian_like(&proto, &mut rng);
            let z = gaussian_like(&proto, &mut rng);
            let a = rng.next_uniform(-2.0, 2.0);
            let b = rng.next_uniform(-2.0, 2.0);
            let xy = inner(&x, &y).unwrap();
            let yx = inner(&y, &x).unwrap();
            assert!((xy - yx).abs() <= 1e-14 * (1.0 + xy.abs()));
            let combo = axpby(a, &x, b, &y).unwrap();
            let lhs = inner(&combo, &z).unwrap();
            let rhs = a * inner(&x, &z).unwrap() + b * inner(&y, &z).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn axpby_matches_direct_loop() {
        let x = SpaceElement::from_parts(vec![1.0, -2.0, 3.0], vec![3], "v").unwrap();
        let y = SpaceElement::from_parts(vec![0.5, 4.0, -1.0], vec![3], "v").unwrap();
        let z = axpby(2.0, &x, -3.0, &y).unwrap();
        assert_eq!(z.data(), &[2.0 - 1.5, -4.0 - 12.0, 6.0 + 3.0]);

        let mut w = y.clone();
        axpby_into(2.0, &x, -3.0, &mut w).unwrap();
        assert_eq!(w.data(), z.data());
    }

    #[test]
    fn norm_squared_equals_self_inner() {
        let mut rng = RngStream::new(3);
        let x = gaussian_like(&space(&[40]).zeros(), &mut rng);
        let n = x.norm();
        let ip = inner(&x, &x).unwrap();
        assert!((n * n - ip).abs() <= 1e-12 * (1.0 + ip));
    }

    #[test]
    fn gaussian_like_matches_proto_space_and_moments() {
        let mut rng = RngStream::new(42);
        let proto = space(&[100_000]).zeros();
        let x = gaussian_like(&proto, &mut rng);
        assert!(x.same_space(&proto));
        let n = x.len() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.02, "sample mean {mean} too far from 0");
        assert!(
            (var - 1.0).abs() < 0.02,
            "sample variance {var} too far from 1"
        );
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = RngStream::new(9);
        let mut b = RngStream::new(9);
        for _ in 0..100 {
            assert_eq!(a.next_f64().to_bits(), b.next_f64().to_bits());
        }
        assert_eq!(a.counter(), 100);
    }

    #[test]
    fn substreams_are_order_independent() {
        let root = RngStream::new(11);
        let mut s0 = root.substream(0);
        let mut s1 = root.substream(1);
        let a_then: Vec<f64> = (0..10).map(|_| s0.next_standard_normal()).collect();
        let b_then: Vec<f64> = (0..10).map(|_| s1.next_standard_normal()).collect();

        let root2 = RngStream::new(11);
        let mut t1 = root2.substream(1);
        let mut t0 = root2.substream(0);
        let b_first: Vec<f64> = (0..10).map(|_| t1.next_standard_normal()).collect();
        let a_first: Vec<f64> = (0..10).map(|_| t0.next_standard_normal()).collect();

        assert_eq!(a_then, a_first);
        assert_eq!(b_then, b_first);
        assert_ne!(a_then, b_then, "distinct substreams should differ");
    }

    #[test]
    fn substream_derivation_does_not_collide_for_small_indices() {
        let root = RngStream::new(5);
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000u64 {
            let s = root.substream(i);
            assert!(seen.insert(s.stream), "stream id collision at index {i}");
        }
    }

    #[test]
    fn product_element_inner_sums_blocks() {
        let a1 = SpaceElement::from_parts(vec![1.0, 2.0], vec![2], "p").unwrap();
        let a2 = SpaceElement::from_parts(vec![3.0], vec![1], "q").unwrap();
        let b1 = SpaceElement::from_parts(vec![-1.0, 0.5], vec![2], "p").unwrap();
        let b2 = SpaceElement::from_parts(vec![2.0], vec![1], "q").unwrap();
        let pa = ProductElement::new(vec![a1.clone(), a2.clone()]).unwrap();
        let pb = ProductElement::new(vec![b1.clone(), b2.clone()]).unwrap();
        let ip = pa.inner(&pb).unwrap();
        let expect = inner(&a1, &b1).unwrap() + inner(&a2, &b2).unwrap();
        assert_eq!(ip, expect);
        let n = pa.norm();
        assert!((n * n - pa.inner(&pa).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn product_element_rejects_structure_mismatch() {
        let a = ProductElement::new(vec![space(&[2]).zeros()]).unwrap();
        let b = ProductElement::new(vec![space(&[2]).zeros(), space(&[2]).zeros()]).unwrap();
        assert!(a.inner(&b).is_err());
        assert!(ProductElement::new(vec![]).is_err());
    }
}
