//! Command line front end for the solver library: trains scheme
//! coefficients on synthetic imaging families, scores saved weights
//! against the default baseline on held-out instances, traces
//! per-iteration diagnostics, and exports instance pools.
//!
//! All commands read one JSON run configuration. Outputs are plain
//! files (JSON weights, CSV tables) whose bytes are reproducible for a
//! fixed configuration, machine, and toolchain. Exit code 2 flags bad
//! input or I/O, exit code 3 flags a numerical failure such as a
//! reference solve or a training run that never reached its target.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use proxforge::bench::{
    default_lambda, make_pool, reference_solve_cached, run_table, write_table_csv, FamilyConfig,
    FamilyKind, MethodSpec, DEFAULT_NOISE_FRAC,
};
use proxforge::convergence::{bound_k, stacked_norm_bound, trace_rows, ConvergentParams};
use proxforge::io::{self, format_float, WeightsFile};
use proxforge::learn::{decoded_scheme, train, MapKind, ParamMap, TrainConfig};
use proxforge::scheme::{
    embed_two_memory, preset_pdhg, SchemeEngine, SchemeMatrices, SplitProblem,
};
use proxforge::tape::{params_from_scheme, SchemeShape};
use proxforge::{Error, Result};

#[derive(Parser)]
#[command(
    name = "proxforge",
    version,
    about = "Train, evaluate, and diagnose learned proximal splitting schemes on synthetic imaging families"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train scheme coefficients on a family and save the best weights.
    Train {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the configuration's out_dir,
        /// then the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score saved weights against the default baseline on held-out instances.
    Eval {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Weights file produced by train.
        #[arg(long)]
        weights: PathBuf,
        /// Override the table depth from the configuration.
        #[arg(long)]
        depth: Option<usize>,
        /// Override the data seed; held-out instances draw from seed + 1.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to the configuration's out_dir,
        /// then the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trace per-iteration diagnostics of saved weights on one held-out instance.
    Diagnose {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Weights file produced by train.
        #[arg(long)]
        weights: PathBuf,
        /// Number of recorded iterations.
        #[arg(long, default_value_t = 300)]
        depth: usize,
        /// Output directory; defaults to the configuration's out_dir,
        /// then the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the instance pools of a configuration to disk.
    MakeData {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the configuration's out_dir,
        /// then the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Which coefficient map a run trains. The first three are the scalar
/// maps of the relaxed presets, the last two expose every scheme entry
/// with two or three memory slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MappingChoice {
    PdhgConstrained,
    NewSolverConstrained,
    PdhgFree,
    MatricesFree2,
    MatricesFree3,
}

/// One experiment: a problem family, a coefficient map, training
/// hyperparameters, and pool sizes. Unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Problem family the pools draw from.
    family: FamilyKind,
    /// Image side length in pixels.
    side: usize,
    /// Ellipses per phantom.
    #[serde(default = "default_ellipses")]
    n_ellipses: usize,
    /// Noise level as a fraction of the clean data's root mean square.
    #[serde(default = "default_noise")]
    noise_frac: f64,
    /// Regularization weight; omitted means the family default.
    #[serde(default)]
    lambda: Option<f64>,
    /// Coefficient map to train or evaluate.
    mapping: MappingChoice,
    /// Optimizer settings.
    #[serde(default)]
    train: TrainConfig,
    /// Training pool size.
    #[serde(default = "default_train_count")]
    train_instances: usize,
    /// Held-out pool size, used for validation and evaluation.
    #[serde(default = "default_eval_count")]
    eval_instances: usize,
    /// Seed of the training pool; the held-out pool uses the seed plus one.
    #[serde(default)]
    data_seed: u64,
    /// Base iteration budget for reference solutions.
    #[serde(default = "default_ref_iters")]
    reference_iters: usize,
    /// Unroll depth of the evaluation table.
    #[serde(default = "default_table_depth")]
    eval_depth: usize,
    /// Where outputs go when no --out flag is given.
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

fn default_ellipses() -> usize {
    6
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_FRAC
}

fn default_train_count() -> usize {
    20
}

fn default_eval_count() -> usize {
    5
}

fn default_ref_iters() -> usize {
    10_000
}

fn default_table_depth() -> usize {
    10
}

/// Sidecar metadata written next to each exported instance.
#[derive(Serialize)]
struct InstanceMeta {
    family: FamilyKind,
    side: usize,
    n_ellipses: usize,
    noise_frac: f64,
    lambda: f64,
    pool_seed: u64,
    index: usize,
}

fn family_config(cfg: &RunConfig) -> FamilyConfig {
    FamilyConfig {
        kind: cfg.family,
        side: cfg.side,
        n_ellipses: cfg.n_ellipses,
        noise_frac: cfg.noise_frac,
        lambda: cfg.lambda.unwrap_or_else(|| default_lambda(cfg.family)),
    }
}

fn resolve_out(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Worker cap from the PROXFORGE_THREADS environment variable; zero or
/// unset means no cap.
fn thread_limit() -> Result<Option<usize>> {
    match std::env::var("PROXFORGE_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => {
            let n: usize = s.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("PROXFORGE_THREADS must be a number, got {s:?}"))
            })?;
            Ok(if n == 0 { None } else { Some(n) })
        }
    }
}

/// Applies the environment cap to the configured worker count. The
/// gradient reduction is order-fixed, so results do not depend on the
/// resolved count.
fn resolve_threads(requested: usize) -> Result<usize> {
    Ok(match (requested, thread_limit()?) {
        (r, None) => r,
        (0, Some(limit)) => limit,
        (r, Some(limit)) => r.min(limit),
    })
}

fn mapping_signature(choice: MappingChoice) -> (MapKind, SchemeShape) {
    let two = SchemeShape {
        n_blocks: 2,
        n_primal: 2,
        m_dual: 2,
    };
    match choice {
        MappingChoice::PdhgConstrained => (MapKind::PdhgConstrained, two),
        MappingChoice::NewSolverConstrained => (MapKind::NewSolverConstrained, two),
        MappingChoice::PdhgFree => (MapKind::PdhgFree, two),
        MappingChoice::MatricesFree2 => (MapKind::MatricesFree, two),
        MappingChoice::MatricesFree3 => (
            MapKind::MatricesFree,
            SchemeShape {
                n_blocks: 2,
                n_primal: 3,
                m_dual: 3,
            },
        ),
    }
}

/// Method name used in result tables; matches the canonical ordering
/// of the benchmark module.
fn method_name(choice: MappingChoice) -> &'static str {
    match choice {
        MappingChoice::PdhgConstrained => "pdhg-constrained-trained",
        MappingChoice::NewSolverConstrained => "new-solver-trained",
        MappingChoice::PdhgFree => "pdhg-free-trained",
        MappingChoice::MatricesFree2 => "free-matrices-2",
        MappingChoice::MatricesFree3 => "free-matrices-3",
    }
}

fn build_map(choice: MappingChoice, op_norm: f64) -> Result<ParamMap> {
    let (_, shape) = mapping_signature(choice);
    match choice {
        MappingChoice::PdhgConstrained => ParamMap::pdhg_constrained(shape.n_blocks, op_norm),
        MappingChoice::NewSolverConstrained => {
            ParamMap::new_solver_constrained(shape.n_blocks, op_norm)
        }
        MappingChoice::PdhgFree => ParamMap::pdhg_free(shape.n_blocks),
        MappingChoice::MatricesFree2 | MappingChoice::MatricesFree3 => {
            ParamMap::matrices_free(shape)
        }
    }
}

/// Copies a one-block scheme's dual matrices and step cycles to
/// `n_blocks` explicit blocks so it has a flat parameter form for a
/// multi-block layout.
fn widen_blocks(scheme: &SchemeMatrices, n_blocks: usize) -> SchemeMatrices {
    SchemeMatrices {
        a: vec![scheme.a[0].clone(); n_blocks],
        b: vec![scheme.b[0].clone(); n_blocks],
        c: scheme.c.clone(),
        d: scheme.d.clone(),
        sigma: vec![scheme.sigma[0].clone(); n_blocks],
        tau: scheme.tau.clone(),
    }
}

/// Starting raw vector per map: the constrained maps start at the
/// balanced midpoint of their box, the free maps start at the default
/// baseline so training begins from a known convergent scheme.
fn initial_raw(map: &ParamMap, op_norm: f64) -> Result<Vec<f64>> {
    let s = 0.95 / op_norm;
    match map.kind() {
        MapKind::PdhgConstrained | MapKind::NewSolverConstrained => Ok(vec![0.0; map.raw_len()]),
        MapKind::PdhgFree => Ok(vec![1.0, s, s]),
        MapKind::MatricesFree => {
            let base = preset_pdhg(1.0, s, s)?;
            let sized = if map.shape().n_primal == 2 {
                base
            } else {
                embed_two_memory(&base, map.shape().n_primal, map.shape().m_dual)?
            };
            let (shape, params) = params_from_scheme(&widen_blocks(&sized, map.shape().n_blocks))?;
            if shape != *map.shape() {
                return Err(Error::InvalidConfig(format!(
                    "starting scheme has layout {shape:?}, map expects {:?}",
                    map.shape()
                )));
            }
            Ok(params)
        }
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    io::load_json(path)
}

fn check_weights_match(cfg: &RunConfig, weights: &WeightsFile) -> Result<()> {
    let (want_kind, want_shape) = mapping_signature(cfg.mapping);
    if weights.map.kind() != want_kind || *weights.map.shape() != want_shape {
        return Err(Error::InvalidConfig(format!(
            "weights come from a different mapping: the configuration asks for {:?} but the file holds {:?} with layout {:?}",
            cfg.mapping,
            weights.map.kind(),
            weights.map.shape()
        )));
    }
    Ok(())
}

/// Quadratic-form parameters for the diagnostic trace. The engine runs
/// the supplied scheme; these values only pick the metric in which the
/// Lyapunov value and displacement are reported. For constrained
/// weights they coincide with the scheme's own coefficients; otherwise
/// nearby admissible values are substituted.
fn metric_params(scheme: &SchemeMatrices, op_norm: f64) -> Result<ConvergentParams> {
    let two_memory = scheme.n_primal() == 2 && scheme.dual_memory() == 2;
    let mut a21 = if two_memory {
        scheme.a[0].at(0)[2]
    } else {
        1.0
    };
    let mut c21 = if two_memory { scheme.c.at(0)[2] } else { 1.0 };
    if !(a21 > 0.0 && a21 < 2.0) {
        a21 = 1.0;
    }
    if !(c21 > 0.0 && c21 < 2.0) {
        c21 = 1.0;
    }
    let mut sigma = scheme.sigma[0].at(0);
    let mut tau = scheme.tau.at(0);
    if !(sigma.is_finite() && sigma > 0.0 && tau.is_finite() && tau > 0.0) {
        sigma = 0.95 / op_norm;
        tau = 0.95 / op_norm;
    }
    let k = bound_k(a21, c21);
    let product = sigma * tau * op_norm * op_norm;
    if product >= k {
        let shrink = (0.9 * k / product).sqrt();
        sigma *= shrink;
        tau *= shrink;
    }
    ConvergentParams::new(a21, c21, sigma, tau, op_norm)
}

fn split_pool(pool: &[proxforge::bench::ProblemInstance]) -> Result<Vec<SplitProblem>> {
    pool.iter().map(|inst| inst.split_problem()).collect()
}

fn cmd_train(config: PathBuf, seed: Option<u64>, out_flag: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    let out = resolve_out(out_flag, &cfg);
    fs::create_dir_all(&out)?;
    if cfg.train_instances == 0 || cfg.eval_instances == 0 {
        return Err(Error::InvalidConfig(
            "train_instances and eval_instances must be positive".into(),
        ));
    }
    let fam = family_config(&cfg);
    let train_pool = make_pool(&fam, cfg.train_instances, cfg.data_seed)?;
    let val_pool = make_pool(&fam, cfg.eval_instances, cfg.data_seed + 1)?;
    let train_split = split_pool(&train_pool)?;
    let val_split = split_pool(&val_pool)?;
    let op_norm = stacked_norm_bound(&train_split[0]);
    let map = build_map(cfg.mapping, op_norm)?;
    let raw0 = initial_raw(&map, op_norm)?;
    let mut tc = cfg.train.clone();
    if let Some(s) = seed {
        tc.seed = s;
    }
    tc.threads = resolve_threads(tc.threads)?;
    let outcome = train(&map, &raw0, &train_split, &val_split, &tc)?;
    if !outcome.best_val_loss.is_finite() {
        return Err(Error::NotConverged(
            "training never reached a finite validation loss".into(),
        ));
    }
    let weights_path = out.join("weights.json");
    WeightsFile {
        map,
        raw: outcome.best_raw,
    }
    .save(&weights_path)?;
    let trace_path = out.join("train_trace.csv");
    let rows: Vec<Vec<String>> = outcome
        .trace
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                format_float(r.train_loss),
                format_float(r.val_loss),
                format_float(r.lr),
                format_float(r.grad_norm),
                r.depth.to_string(),
            ]
        })
        .collect();
    io::write_csv(
        &trace_path,
        &["step", "train_loss", "val_loss", "lr", "grad_norm", "depth"],
        &rows,
    )?;
    println!(
        "best validation loss {}",
        format_float(outcome.best_val_loss)
    );
    println!("wrote {}", weights_path.display());
    println!("wrote {}", trace_path.display());
    Ok(())
}

fn cmd_eval(
    config: PathBuf,
    weights: PathBuf,
    depth: Option<usize>,
    seed: Option<u64>,
    out_flag: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.data_seed = s;
    }
    let out = resolve_out(out_flag, &cfg);
    fs::create_dir_all(&out)?;
    let weights = WeightsFile::load(&weights)?;
    check_weights_match(&cfg, &weights)?;
    if cfg.eval_instances == 0 {
        return Err(Error::InvalidConfig(
            "eval_instances must be positive".into(),
        ));
    }
    let fam = family_config(&cfg);
    let held_out_seed = cfg.data_seed + 1;
    let pool = make_pool(&fam, cfg.eval_instances, held_out_seed)?;
    let op_norm = stacked_norm_bound(&pool[0].split_problem()?);
    let scheme = decoded_scheme(&weights.map, &weights.raw)?.ok_or_else(|| {
        Error::InvalidConfig("the stored raw vector does not decode to a runnable scheme".into())
    })?;
    let cache = out.join("ref-cache");
    let mut references = Vec::with_capacity(pool.len());
    for inst in &pool {
        references.push(reference_solve_cached(inst, cfg.reference_iters, &cache)?);
    }
    let s = 0.95 / op_norm;
    let methods = vec![
        MethodSpec {
            name: "pdhg-default".into(),
            scheme: preset_pdhg(1.0, s, s)?,
        },
        MethodSpec {
            name: method_name(cfg.mapping).into(),
            scheme,
        },
    ];
    let table_depth = depth.unwrap_or(cfg.eval_depth);
    let rows = run_table(&methods, &pool, &references, table_depth, held_out_seed)?;
    let path = out.join("results.csv");
    write_table_csv(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_diagnose(
    config: PathBuf,
    weights: PathBuf,
    depth: usize,
    out_flag: Option<PathBuf>,
) -> Result<()> {
    if depth == 0 {
        return Err(Error::InvalidArgument("depth must be positive".into()));
    }
    let cfg = load_config(&config)?;
    let out = resolve_out(out_flag, &cfg);
    fs::create_dir_all(&out)?;
    let weights = WeightsFile::load(&weights)?;
    check_weights_match(&cfg, &weights)?;
    let fam = family_config(&cfg);
    let pool = make_pool(&fam, 1, cfg.data_seed + 1)?;
    let inst = &pool[0];
    let problem = inst.split_problem()?;
    let reference = reference_solve_cached(inst, cfg.reference_iters, &out.join("ref-cache"))?;
    let scheme = decoded_scheme(&weights.map, &weights.raw)?.ok_or_else(|| {
        Error::InvalidConfig("the stored raw vector does not decode to a runnable scheme".into())
    })?;
    let params = metric_params(&scheme, stacked_norm_bound(&problem))?;
    let engine = SchemeEngine::new(problem, scheme)?;
    let rows = trace_rows(
        &engine,
        &params,
        depth,
        &reference.x_star,
        &reference.y_stars,
    )?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                format_float(r.q1),
                format_float(r.q2_displacement),
                format_float(r.objective),
                format_float(r.fixed_point_residual),
            ]
        })
        .collect();
    let path = out.join("diagnose.csv");
    io::write_csv(
        &path,
        &[
            "iter",
            "q1",
            "q2_displacement",
            "objective",
            "fixed_point_residual",
        ],
        &csv_rows,
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_make_data(config: PathBuf, out_flag: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&config)?;
    let out = resolve_out(out_flag, &cfg);
    fs::create_dir_all(&out)?;
    let fam = family_config(&cfg);
    let mut written = 0usize;
    for (split, count, seed) in [
        ("train", cfg.train_instances, cfg.data_seed),
        ("eval", cfg.eval_instances, cfg.data_seed + 1),
    ] {
        let pool = make_pool(&fam, count, seed)?;
        for (index, inst) in pool.iter().enumerate() {
            let dir = out.join(format!("{split}-{index:03}"));
            fs::create_dir_all(&dir)?;
            io::save_element(&dir.join("truth.f64"), inst.truth())?;
            io::save_element(&dir.join("b.f64"), inst.b())?;
            io::save_json(
                &dir.join("meta.json"),
                &InstanceMeta {
                    family: fam.kind,
                    side: fam.side,
                    n_ellipses: fam.n_ellipses,
                    noise_frac: fam.noise_frac,
                    lambda: inst.lambda(),
                    pool_seed: seed,
                    index,
                },
            )?;
            written += 1;
        }
    }
    println!("wrote {written} instances under {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => cmd_train(config, seed, out),
        Command::Eval {
            config,
            weights,
            depth,
            seed,
            out,
        } => cmd_eval(config, weights, depth, seed, out),
        Command::Diagnose {
            config,
            weights,
            depth,
            out,
        } => cmd_diagnose(config, weights, depth, out),
        Command::MakeData { config, out } => cmd_make_data(config, out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(match err {
            Error::NotConverged(_) => 3,
            _ => 2,
        });
    }
}
