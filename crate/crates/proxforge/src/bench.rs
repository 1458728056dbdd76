//! Benchmark harness: synthetic phantoms, blur and tomography problem
//! families with simulated noisy data, reference optima with disk
//! memoization, and the evaluation grid that produces result tables.
//!
//! Every instance minimizes `H(x) = |A x - b|^2 + lambda |grad x|_1` with
//! both operators normalized to unit norm bound, so step-size rules and
//! trained coefficients transfer between instances and families.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convergence::reference_saddle;
use crate::error::{Error, Result};
use crate::io;
use crate::linops::{
    estimate_norm, gaussian_taps, normalize, radon_default, GradOp, LinOp, SeparableConvOp,
};
use crate::prox::ProxFn;
use crate::scheme::{SchemeEngine, SchemeMatrices, SplitProblem};
use crate::tensor::{axpby, gaussian_like, RngStream, Space, SpaceElement};

/// Upper clip value of phantom intensities.
pub const PHANTOM_MAX: f64 = 3.25;

/// Default relative noise level of simulated data.
pub const DEFAULT_NOISE_FRAC: f64 = 0.05;

/// Residual gate for reference optima.
pub const REFERENCE_RESIDUAL_GATE: f64 = 1e-6;

/// A single regularized reconstruction problem.
///
/// Holds the normalized forward and gradient operators, the noisy data,
/// the regularization weight, and (for the record only) the ground truth.
#[derive(Clone)]
pub struct ProblemInstance {
    forward: Arc<dyn LinOp>,
    grad: Arc<dyn LinOp>,
    b: SpaceElement,
    lambda: f64,
    truth: SpaceElement,
}

impl ProblemInstance {
    /// Bundles the parts, checking normalization and consistency.
    pub fn new(
        forward: Arc<dyn LinOp>,
        grad: Arc<dyn LinOp>,
        b: SpaceElement,
        lambda: f64,
        truth: SpaceElement,
    ) -> Result<Self> {
        for (name, op) in [("forward", &forward), ("grad", &grad)] {
            if op.norm_bound() != 1.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} operator must be normalized, bound is {}",
                    op.norm_bound()
                )));
            }
        }
        if forward.domain() != grad.domain() {
            return Err(Error::SpaceMismatch(
                "forward and gradient operators must share a domain".into(),
            ));
        }
        if b.space() != forward.range() {
            return Err(Error::SpaceMismatch(
                "data must live in the forward operator's range".into(),
            ));
        }
        if truth.space() != forward.domain() {
            return Err(Error::SpaceMismatch(
                "truth must live in the forward operator's domain".into(),
            ));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "regularization weight must be positive and finite, got {lambda}"
            )));
        }
        if !b.all_finite() {
            return Err(Error::InvalidArgument(
                "data contains non-finite entries".into(),
            ));
        }
        Ok(ProblemInstance {
            forward,
            grad,
            b,
            lambda,
            truth,
        })
    }

    /// The normalized forward operator.
    pub fn forward(&self) -> &Arc<dyn LinOp> {
        &self.forward
    }

    /// The normalized gradient operator.
    pub fn grad(&self) -> &Arc<dyn LinOp> {
        &self.grad
    }

    /// The noisy data.
    pub fn b(&self) -> &SpaceElement {
        &self.b
    }

    /// The regularization weight.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// The ground truth the data was simulated from.
    pub fn truth(&self) -> &SpaceElement {
        &self.truth
    }

    /// The split form `F = 0`, `G_1 = |. - b|^2` after `forward`, and
    /// `G_2 = lambda |.|_1` after `grad`.
    pub fn split_problem(&self) -> Result<SplitProblem> {
        SplitProblem::new(
            ProxFn::zero(),
            vec![self.forward.clone(), self.grad.clone()],
            vec![
                ProxFn::sq_l2_dist(self.b.clone(), 1.0)?,
                ProxFn::l1(self.lambda)?,
            ],
        )
    }

    /// The objective `|A x - b|^2 + lambda |grad x|_1`.
    pub fn objective(&self, x: &SpaceElement) -> Result<f64> {
        self.split_problem()?.objective(x)
    }
}

/// A numerically converged solution of an instance.
pub struct ReferenceOptimum {
    /// The primal solution.
    pub x_star: SpaceElement,
    /// Dual solutions, one per operator block.
    pub y_stars: Vec<SpaceElement>,
    /// Objective value at `x_star`.
    pub value: f64,
    /// Displacement of one solver step started from the solution.
    pub residual: f64,
}

/// Sum of random ellipses on a `side x side` grid, clipped to the phantom
/// intensity range.
pub fn make_phantom(side: usize, n_ellipses: usize, rng: &mut RngStream) -> Result<SpaceElement> {
    if side < 16 {
        return Err(Error::InvalidArgument(format!(
            "phantom side must be at least 16, got {side}"
        )));
    }
    let space = Space::new(vec![side, side], "phantom")?;
    let mut img = space.zeros();
    let s = side as f64;
    for _ in 0..n_ellipses {
        let cx = rng.next_uniform(0.2 * s, 0.8 * s);
        let cy = rng.next_uniform(0.2 * s, 0.8 * s);
        let ax = rng.next_uniform(0.06 * s, 0.28 * s);
        let ay = rng.next_uniform(0.06 * s, 0.28 * s);
        let angle = rng.next_uniform(0.0, std::f64::consts::PI);
        let intensity = rng.next_uniform(0.15, 0.9);
        let (sin, cos) = angle.sin_cos();
        let data = img.data_mut();
        for r in 0..side {
            for c in 0..side {
                let u = c as f64 + 0.5 - cx;
                let v = r as f64 + 0.5 - cy;
                let ur = u * cos + v * sin;
                let vr = -u * sin + v * cos;
                if (ur / ax).powi(2) + (vr / ay).powi(2) <= 1.0 {
                    data[r * side + c] += intensity;
                }
            }
        }
    }
    Ok(img.map(|v| v.clamp(0.0, PHANTOM_MAX)))
}

/// Applies the forward operator to the truth and adds white Gaussian noise
/// whose standard deviation is `noise_frac` times the root-mean-square of
/// the clean data.
pub fn simulate_data(
    truth: &SpaceElement,
    forward: &dyn LinOp,
    noise_frac: f64,
    rng: &mut RngStream,
) -> Result<SpaceElement> {
    if !(noise_frac >= 0.0) || !noise_frac.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise fraction must be non-negative and finite, got {noise_frac}"
        )));
    }
    let clean = forward.forward(truth)?;
    if noise_frac == 0.0 {
        return Ok(clean);
    }
    let rms = clean.norm() / (clean.len() as f64).sqrt();
    let noise = gaussian_like(&clean, rng);
    axpby(noise_frac * rms, &noise, 1.0, &clean)
}

/// The three problem families of the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Isotropic Gaussian blur, three pixels standard deviation.
    DeblurIso,
    /// Anisotropic Gaussian blur, full width at half maximum of four
    /// pixels vertically and six horizontally.
    DeblurAniso,
    /// Parallel-beam tomography with the default geometry.
    Tomography,
}

/// Generation settings for one family of instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub kind: FamilyKind,
    pub side: usize,
    pub n_ellipses: usize,
    pub noise_frac: f64,
    pub lambda: f64,
}

impl FamilyConfig {
    /// Defaults for a family at the given image side: six ellipses, five
    /// percent noise, and the family's calibrated regularization weight.
    pub fn new(kind: FamilyKind, side: usize) -> Self {
        FamilyConfig {
            kind,
            side,
            n_ellipses: 6,
            noise_frac: DEFAULT_NOISE_FRAC,
            lambda: default_lambda(kind),
        }
    }
}

/// Regularization weight per family, calibrated at desk scale so the
/// total-variation term contributes between ten and fifty percent of the
/// optimal objective.
pub fn default_lambda(kind: FamilyKind) -> f64 {
    match kind {
        FamilyKind::DeblurIso => 0.0025,
        FamilyKind::DeblurAniso => 0.0025,
        FamilyKind::Tomography => 0.001,
    }
}

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

fn family_ops(cfg: &FamilyConfig) -> Result<(Arc<dyn LinOp>, Arc<dyn LinOp>)> {
    let raw: Arc<dyn LinOp> = match cfg.kind {
        FamilyKind::DeblurIso => {
            let domain = Space::new(vec![cfg.side, cfg.side], "image")?;
            let taps = gaussian_taps(3.0)?;
            Arc::new(SeparableConvOp::new(domain, taps.clone(), taps)?)
        }
        FamilyKind::DeblurAniso => {
            let domain = Space::new(vec![cfg.side, cfg.side], "image")?;
            let taps_y = gaussian_taps(4.0 / FWHM_PER_SIGMA)?;
            let taps_x = gaussian_taps(6.0 / FWHM_PER_SIGMA)?;
            Arc::new(SeparableConvOp::new(domain, taps_y, taps_x)?)
        }
        FamilyKind::Tomography => {
            let radon = radon_default(cfg.side)?;
            // One fixed probe seed keeps the estimated scale identical for
            // every instance of the family.
            let mut rng = RngStream::new(0x5261646f6e);
            estimate_norm(&radon, 200, &mut rng)?;
            Arc::new(radon)
        }
    };
    let grad: Arc<dyn LinOp> = Arc::new(GradOp::new(raw.domain().clone())?);
    let forward: Arc<dyn LinOp> = Arc::new(normalize(raw)?);
    let grad: Arc<dyn LinOp> = Arc::new(normalize(grad)?);
    Ok((forward, grad))
}

fn rehome(elem: &SpaceElement, space: &Space) -> Result<SpaceElement> {
    SpaceElement::new(elem.data().to_vec(), space.clone())
}

/// Draws one instance of a family: a phantom truth, the family operators,
/// and simulated noisy data.
pub fn make_instance(cfg: &FamilyConfig, rng: &mut RngStream) -> Result<ProblemInstance> {
    let (forward, grad) = family_ops(cfg)?;
    let phantom = make_phantom(cfg.side, cfg.n_ellipses, rng)?;
    let truth = rehome(&phantom, forward.domain())?;
    let b = simulate_data(&truth, forward.as_ref(), cfg.noise_frac, rng)?;
    ProblemInstance::new(forward, grad, b, cfg.lambda, truth)
}

/// Draws `count` independent instances; instance `i` uses substream `i`
/// of the seed, so pools are stable under growing `count`.
pub fn make_pool(cfg: &FamilyConfig, count: usize, seed: u64) -> Result<Vec<ProblemInstance>> {
    let base = RngStream::new(seed);
    (0..count)
        .map(|i| make_instance(cfg, &mut base.substream(i as u64)))
        .collect()
}

/// A content hash of an instance: its shapes, weight, data, truth, and
/// the behavior of both operators on a fixed probe vector.
pub fn instance_hash(instance: &ProblemInstance) -> Result<String> {
    let mut hasher = Sha256::new();
    let put_dims = |shape: &[usize], h: &mut Sha256| {
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
    };
    put_dims(instance.truth.shape(), &mut hasher);
    put_dims(instance.b.shape(), &mut hasher);
    hasher.update(instance.lambda.to_le_bytes());
    let put_data = |elem: &SpaceElement, h: &mut Sha256| {
        for v in elem.data() {
            h.update(v.to_le_bytes());
        }
    };
    put_data(&instance.truth, &mut hasher);
    put_data(&instance.b, &mut hasher);
    let mut probe_rng = RngStream::new(0x50726f6265);
    let probe = gaussian_like(&instance.forward.domain().zeros(), &mut probe_rng);
    put_data(&instance.forward.forward(&probe)?, &mut hasher);
    put_data(&instance.grad.forward(&probe)?, &mut hasher);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Computes a reference optimum by a long balanced primal-dual run.
///
/// The run doubles its iteration budget up to eight times the base count
/// until the internal step residual passes half the gate; the reported
/// residual is then re-measured by one step started exactly from the
/// solution and must pass the gate itself.
pub fn reference_solve(instance: &ProblemInstance, iters: usize) -> Result<ReferenceOptimum> {
    let problem = instance.split_problem()?;
    let (x_star, y_stars) = reference_saddle(&problem, iters, 0.5 * REFERENCE_RESIDUAL_GATE)?;
    let residual = solution_residual(&problem, &x_star, &y_stars)?;
    if !(residual <= REFERENCE_RESIDUAL_GATE) {
        return Err(Error::NotConverged(format!(
            "re-measured solution residual {residual} misses the gate {REFERENCE_RESIDUAL_GATE}"
        )));
    }
    let value = problem.objective(&x_star)?;
    Ok(ReferenceOptimum {
        x_star,
        y_stars,
        value,
        residual,
    })
}

/// Displacement of one balanced primal-dual step started from `(x, ys)`.
fn solution_residual(problem: &SplitProblem, x: &SpaceElement, ys: &[SpaceElement]) -> Result<f64> {
    let norm = crate::convergence::stacked_norm_bound(problem);
    let step = 0.95 / norm;
    let engine = SchemeEngine::new(
        problem.clone(),
        crate::scheme::preset_pdhg(1.0, step, step)?,
    )?;
    let mut st = engine.init_state();
    st.primal = vec![x.clone(), x.clone()];
    st.dual = ys.iter().map(|y| vec![y.clone(), y.clone()]).collect();
    let before = st.clone();
    engine.step(&mut st)?;
    crate::scheme::fixed_point_residual(&before, &st)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceMeta {
    value: f64,
    residual: f64,
    iters: usize,
    n_duals: usize,
}

fn cache_paths(cache_dir: &Path, hash: &str, iters: usize) -> (PathBuf, PathBuf) {
    let stem = format!("ref-{hash}-{iters}");
    (
        cache_dir.join(format!("{stem}.f64")),
        cache_dir.join(format!("{stem}.meta.json")),
    )
}

fn load_cached_reference(cache_dir: &Path, hash: &str, iters: usize) -> Option<ReferenceOptimum> {
    let (x_path, meta_path) = cache_paths(cache_dir, hash, iters);
    let meta: ReferenceMeta = io::load_json(&meta_path).ok()?;
    if meta.iters != iters {
        return None;
    }
    let x_star = io::load_element(&x_path).ok()?;
    let mut y_stars = Vec::with_capacity(meta.n_duals);
    for i in 0..meta.n_duals {
        let y_path = x_path.with_extension(format!("y{i}.f64"));
        y_stars.push(io::load_element(&y_path).ok()?);
    }
    Some(ReferenceOptimum {
        x_star,
        y_stars,
        value: meta.value,
        residual: meta.residual,
    })
}

/// [`reference_solve`] memoized to disk, keyed by the instance hash and
/// the iteration budget. Unreadable cache entries are recomputed and
/// overwritten.
pub fn reference_solve_cached(
    instance: &ProblemInstance,
    iters: usize,
    cache_dir: &Path,
) -> Result<ReferenceOptimum> {
    let hash = instance_hash(instance)?;
    if let Some(cached) = load_cached_reference(cache_dir, &hash, iters) {
        return Ok(cached);
    }
    let reference = reference_solve(instance, iters)?;
    std::fs::create_dir_all(cache_dir)?;
    let (x_path, meta_path) = cache_paths(cache_dir, &hash, iters);
    io::save_element(&x_path, &reference.x_star)?;
    for (i, y) in reference.y_stars.iter().enumerate() {
        io::save_element(&x_path.with_extension(format!("y{i}.f64")), y)?;
    }
    io::save_json(
        &meta_path,
        &ReferenceMeta {
            value: reference.value,
            residual: reference.residual,
            iters,
            n_duals: reference.y_stars.len(),
        },
    )?;
    Ok(reference)
}

/// Objective gap `H(x_depth) - value` of a scheme run for `depth` steps
/// from zero. Non-finite objectives report an infinite gap.
pub fn evaluate_method(
    instance: &ProblemInstance,
    scheme: &SchemeMatrices,
    depth: usize,
    reference: &ReferenceOptimum,
) -> Result<f64> {
    let engine = SchemeEngine::new(instance.split_problem()?, scheme.clone())?;
    let mut st = engine.init_state();
    engine.run(&mut st, depth)?;
    let lead = engine.lead_primal(&st);
    if !lead.all_finite() {
        return Ok(f64::INFINITY);
    }
    let gap = engine.problem().objective(lead)? - reference.value;
    Ok(if gap.is_finite() { gap } else { f64::INFINITY })
}

/// A named scheme entering the result table.
#[derive(Clone)]
pub struct MethodSpec {
    pub name: String,
    pub scheme: SchemeMatrices,
}

/// One result row: mean and spread of the objective gap of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub depth: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
    pub n_instances: usize,
    pub seed: u64,
}

/// Column names of the results table.
pub const TABLE_HEADER: [&str; 6] = [
    "method",
    "depth",
    "mean_gap",
    "std_gap",
    "n_instances",
    "seed",
];

/// Canonical ordering of the six method variants in result tables: the
/// untrained baseline first, then constrained trained schemes, then free
/// ones with growing memory.
pub fn table_method_order() -> [&'static str; 6] {
    [
        "pdhg-default",
        "pdhg-constrained-trained",
        "new-solver-trained",
        "pdhg-free-trained",
        "free-matrices-2",
        "free-matrices-3",
    ]
}

/// Evaluates every method on every instance at the given depth and
/// aggregates one row per method, preserving the method order.
pub fn run_table(
    methods: &[MethodSpec],
    instances: &[ProblemInstance],
    references: &[ReferenceOptimum],
    depth: usize,
    seed: u64,
) -> Result<Vec<TableRow>> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("need at least one method".into()));
    }
    if instances.is_empty() || instances.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "need matching non-empty instances and references, got {} and {}",
            instances.len(),
            references.len()
        )));
    }
    let n = instances.len();
    let mut rows = Vec::with_capacity(methods.len());
    for method in methods {
        let mut gaps = Vec::with_capacity(n);
        for (instance, reference) in instances.iter().zip(references) {
            gaps.push(evaluate_method(instance, &method.scheme, depth, reference)?);
        }
        let mean = gaps.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(TableRow {
            method: method.name.clone(),
            depth,
            mean_gap: mean,
            std_gap: std,
            n_instances: n,
            seed,
        });
    }
    Ok(rows)
}

/// Writes table rows as CSV under the canonical header.
pub fn write_table_csv(path: &Path, rows: &[TableRow]) -> Result<()> {
    let rendered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.depth.to_string(),
                io::format_float(r.mean_gap),
                io::format_float(r.std_gap),
                r.n_instances.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    io::write_csv(path, &TABLE_HEADER, &rendered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{preset_dr, preset_pdhg};

    fn quick_cfg(kind: FamilyKind) -> FamilyConfig {
        FamilyConfig::new(kind, 16)
    }

    #[test]
    fn phantom_is_deterministic_and_in_range() {
        assert!(make_phantom(8, 3, &mut RngStream::new(1)).is_err());
        let zero = make_phantom(16, 0, &mut RngStream::new(1)).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));

        let a = make_phantom(32, 6, &mut RngStream::new(5)).unwrap();
        let b = make_phantom(32, 6, &mut RngStream::new(5)).unwrap();
        let c = make_phantom(32, 6, &mut RngStream::new(6)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data() != c.data());
        assert!(a.data().iter().all(|v| (0.0..=PHANTOM_MAX).contains(v)));
        assert!(a.norm() > 0.0, "a phantom with ellipses is not empty");
    }

    #[test]
    fn simulated_noise_matches_the_requested_fraction() {
        let cfg = FamilyConfig::new(FamilyKind::DeblurIso, 64);
        let (forward, _) = family_ops(&cfg).unwrap();
        let mut rng = RngStream::new(11);
        let phantom = make_phantom(64, 6, &mut rng).unwrap();
        let truth = rehome(&phantom, forward.domain()).unwrap();
        let clean = forward.forward(&truth).unwrap();

        let exact = simulate_data(&truth, forward.as_ref(), 0.0, &mut rng).unwrap();
        assert_eq!(exact.data(), clean.data());

        let mut rng_a = RngStream::new(12);
        let mut rng_b = RngStream::new(12);
        let noisy = simulate_data(&truth, forward.as_ref(), 0.05, &mut rng_a).unwrap();
        let again = simulate_data(&truth, forward.as_ref(), 0.05, &mut rng_b).unwrap();
        assert_eq!(noisy.data(), again.data());

        let diff = axpby(1.0, &noisy, -1.0, &clean).unwrap();
        let ratio = diff.norm() / clean.norm();
        assert!(
            (ratio - 0.05).abs() <= 0.2 * 0.05,
            "noise fraction {ratio} is not close to 0.05"
        );
        assert!(simulate_data(&truth, forward.as_ref(), -0.1, &mut rng).is_err());
    }

    #[test]
    fn instances_are_normalized_with_finite_objective() {
        for kind in [
            FamilyKind::DeblurIso,
            FamilyKind::DeblurAniso,
            FamilyKind::Tomography,
        ] {
            let cfg = quick_cfg(kind);
            let inst = make_instance(&cfg, &mut RngStream::new(21)).unwrap();
            assert_eq!(inst.forward().norm_bound(), 1.0);
            assert_eq!(inst.grad().norm_bound(), 1.0);
            let at_zero = inst.objective(&inst.forward().domain().zeros()).unwrap();
            assert!(at_zero.is_finite());
            let b_sq = inst.b().norm().powi(2);
            assert!(
                (at_zero - b_sq).abs() <= 1e-9 * (1.0 + b_sq),
                "{kind:?}: objective at zero {at_zero} vs squared data norm {b_sq}"
            );
        }
    }

    #[test]
    fn objective_is_convex_on_random_pairs() {
        let cfg = quick_cfg(FamilyKind::DeblurIso);
        let inst = make_instance(&cfg, &mut RngStream::new(22)).unwrap();
        let domain = inst.forward().domain().clone();
        let mut rng = RngStream::new(23);
        for _ in 0..20 {
            let x = gaussian_like(&domain.zeros(), &mut rng);
            let z = gaussian_like(&domain.zeros(), &mut rng);
            let mid = axpby(0.5, &x, 0.5, &z).unwrap();
            let lhs = inst.objective(&mid).unwrap();
            let rhs = 0.5 * inst.objective(&x).unwrap() + 0.5 * inst.objective(&z).unwrap();
            assert!(lhs <= rhs + 1e-10, "midpoint {lhs} above average {rhs}");
        }
    }

    #[test]
    fn pools_are_reproducible_and_prefix_stable() {
        let cfg = quick_cfg(FamilyKind::DeblurIso);
        let small = make_pool(&cfg, 2, 31).unwrap();
        let large = make_pool(&cfg, 3, 31).unwrap();
        for (a, b) in small.iter().zip(&large) {
            assert_eq!(a.b().data(), b.b().data());
            assert_eq!(a.truth().data(), b.truth().data());
        }
        let h0 = instance_hash(&small[0]).unwrap();
        assert_eq!(h0, instance_hash(&large[0]).unwrap());
        assert_ne!(h0, instance_hash(&large[1]).unwrap());
        assert_eq!(h0.len(), 64);
    }

    #[test]
    fn reference_solve_satisfies_optimality() {
        let cfg = quick_cfg(FamilyKind::DeblurIso);
        let inst = make_instance(&cfg, &mut RngStream::new(41)).unwrap();
        let reference = reference_solve(&inst, 8000).unwrap();
        assert!(reference.residual <= REFERENCE_RESIDUAL_GATE);
        let at_zero = inst.objective(&inst.forward().domain().zeros()).unwrap();
        let at_truth = inst.objective(inst.truth()).unwrap();
        assert!(reference.value <= at_zero);
        assert!(reference.value <= at_truth);

        let refined = reference_solve(&inst, 16000).unwrap();
        let rel = (refined.value - reference.value).abs() / (1.0 + reference.value.abs());
        assert!(rel <= 1e-7, "value moved by {rel} when doubling iterations");
    }

    #[test]
    fn reference_cache_round_trips_and_is_used() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(FamilyKind::DeblurIso);
        let inst = make_instance(&cfg, &mut RngStream::new(42)).unwrap();
        let fresh = reference_solve_cached(&inst, 8000, dir.path()).unwrap();
        let cached = reference_solve_cached(&inst, 8000, dir.path()).unwrap();
        assert_eq!(fresh.value.to_bits(), cached.value.to_bits());
        assert_eq!(fresh.residual.to_bits(), cached.residual.to_bits());
        assert_eq!(fresh.x_star.data(), cached.x_star.data());
        assert_eq!(fresh.y_stars.len(), cached.y_stars.len());

        // Zero out the stored solution; a cache hit must reflect it.
        let hash = instance_hash(&inst).unwrap();
        let (x_path, _) = cache_paths(dir.path(), &hash, 8000);
        io::save_element(&x_path, &fresh.x_star.zeros_like()).unwrap();
        let tampered = reference_solve_cached(&inst, 8000, dir.path()).unwrap();
        assert_eq!(tampered.x_star.norm(), 0.0, "the cache entry was not used");
    }

    #[test]
    fn evaluate_method_reports_consistent_gaps() {
        let cfg = quick_cfg(FamilyKind::DeblurAniso);
        let inst = make_instance(&cfg, &mut RngStream::new(43)).unwrap();
        let reference = reference_solve(&inst, 8000).unwrap();
        let problem = inst.split_problem().unwrap();
        let norm = crate::convergence::stacked_norm_bound(&problem);
        let step = 0.95 / norm;
        let scheme = preset_pdhg(1.0, step, step).unwrap();

        let at_depth0 = evaluate_method(&inst, &scheme, 0, &reference).unwrap();
        let at_zero = inst.objective(&inst.forward().domain().zeros()).unwrap();
        assert!((at_depth0 - (at_zero - reference.value)).abs() <= 1e-12 * (1.0 + at_zero));
        assert!(at_depth0 > 0.0);

        let deep = evaluate_method(&inst, &scheme, 8000, &reference).unwrap();
        assert!(deep >= -1e-8, "gap {deep} is meaningfully negative");
        assert!(
            deep <= 1e-6,
            "gap {deep} did not close at the reference depth"
        );
    }

    #[test]
    fn gap_is_monotone_in_depth_in_the_converged_regime() {
        let cfg = quick_cfg(FamilyKind::DeblurAniso);
        let inst = make_instance(&cfg, &mut RngStream::new(44)).unwrap();
        let reference = reference_solve(&inst, 8000).unwrap();
        let problem = inst.split_problem().unwrap();
        let norm = crate::convergence::stacked_norm_bound(&problem);
        let step = 0.95 / norm;
        let scheme = preset_pdhg(1.0, step, step).unwrap();
        let initial = evaluate_method(&inst, &scheme, 0, &reference).unwrap();
        let depths = [10usize, 20, 40, 80];
        let gaps: Vec<f64> = depths
            .iter()
            .map(|d| evaluate_method(&inst, &scheme, *d, &reference).unwrap())
            .collect();
        let mut converged = false;
        for w in 0..depths.len() {
            if !converged && gaps[w] < 0.01 * initial {
                converged = true;
            }
            if converged && w + 1 < depths.len() {
                assert!(
                    gaps[w + 1] <= gaps[w] + 1e-8,
                    "gap rose from {} to {} between depths {} and {}",
                    gaps[w],
                    gaps[w + 1],
                    depths[w],
                    depths[w + 1]
                );
            }
        }
        assert!(
            converged,
            "no depth in {depths:?} reached one percent of the initial gap {initial}: {gaps:?}"
        );
    }

    #[test]
    fn regularization_weight_puts_tv_in_band() {
        for kind in [
            FamilyKind::DeblurIso,
            FamilyKind::DeblurAniso,
            FamilyKind::Tomography,
        ] {
            let cfg = quick_cfg(kind);
            let inst = make_instance(&cfg, &mut RngStream::new(45)).unwrap();
            let reference = reference_solve(&inst, 8000).unwrap();
            let gx = inst.grad().forward(&reference.x_star).unwrap();
            let tv = cfg.lambda * gx.data().iter().map(|v| v.abs()).sum::<f64>();
            let fraction = tv / reference.value;
            assert!(
                (0.10..=0.50).contains(&fraction),
                "{kind:?}: total-variation share {fraction} outside the calibrated band"
            );
        }
    }

    #[test]
    fn table_rows_have_the_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(FamilyKind::DeblurAniso);
        let instances = make_pool(&cfg, 3, 46).unwrap();
        let references: Vec<ReferenceOptimum> = instances
            .iter()
            .map(|i| reference_solve_cached(i, 8000, dir.path()).unwrap())
            .collect();
        let problem = instances[0].split_problem().unwrap();
        let norm = crate::convergence::stacked_norm_bound(&problem);
        let step = 0.95 / norm;
        let methods = vec![
            MethodSpec {
                name: "pdhg-default".into(),
                scheme: preset_pdhg(1.0, step, step).unwrap(),
            },
            MethodSpec {
                name: "relaxed".into(),
                scheme: preset_dr(1.5, step, step).unwrap(),
            },
        ];
        let rows = run_table(&methods, &instances, &references, 10, 46).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert_eq!(row.depth, 10);
            assert_eq!(row.n_instances, 3);
            assert_eq!(row.seed, 46);
            assert!(row.mean_gap.is_finite() && row.mean_gap > 0.0);
            assert!(row.std_gap.is_finite() && row.std_gap >= 0.0);
        }
        assert_eq!(rows[0].method, "pdhg-default");

        let csv_path = dir.path().join("table.csv");
        write_table_csv(&csv_path, &rows).unwrap();
        let (header, parsed) = io::read_csv_strict(&csv_path).unwrap();
        assert_eq!(header, TABLE_HEADER);
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0][0], "pdhg-default");
        assert_eq!(parsed[0][1], "10");

        assert_eq!(table_method_order().len(), 6);
        assert_eq!(table_method_order()[0], "pdhg-default");
    }

    #[test]
    fn constrained_weights_transfer_across_families_without_diverging() {
        use crate::learn::{decoded_scheme, ParamMap};

        let deblur = quick_cfg(FamilyKind::DeblurIso);
        let tomo_cfg = quick_cfg(FamilyKind::Tomography);
        let tomo = make_instance(&tomo_cfg, &mut RngStream::new(47)).unwrap();
        let reference = reference_solve(&tomo, 8000).unwrap();

        // Both families normalize their operators, so the stacked norm
        // bound is shared and constrained weights transfer verbatim.
        let deblur_inst = make_instance(&deblur, &mut RngStream::new(48)).unwrap();
        let norm_src =
            crate::convergence::stacked_norm_bound(&deblur_inst.split_problem().unwrap());
        let norm_dst = crate::convergence::stacked_norm_bound(&tomo.split_problem().unwrap());
        assert_eq!(norm_src, norm_dst);

        let map = ParamMap::new_solver_constrained(2, norm_src).unwrap();
        let mut rng = RngStream::new(49);
        for trial in 0..3 {
            let raw: Vec<f64> = (0..map.raw_len())
                .map(|_| {
                    if trial == 0 {
                        0.0
                    } else {
                        rng.next_uniform(-2.0, 2.0)
                    }
                })
                .collect();
            let scheme = decoded_scheme(&map, &raw).unwrap().unwrap();
            for depth in [10, 80, 300] {
                let gap = evaluate_method(&tomo, &scheme, depth, &reference).unwrap();
                assert!(
                    gap.is_finite(),
                    "transferred weights diverged at depth {depth}"
                );
            }
        }
    }
}
