//! Subcommand implementations. Machine-readable output goes to stdout,
//! human summaries to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dfp_core::arch::{expand_family, ArchSpec, Family};
use dfp_core::dict::{build_dictionary, BlockDictionary, InitPolicy};
use dfp_core::gram::{count_offdiag, gram_blocks};
use dfp_core::minimize::{
    minimize_potential, sort_rows, spec_bound, MinimizeConfig, MinimizeResult, ScoreRow, StepRule,
};
use dfp_core::potential::report;
use dfp_core::sparse::{forward_pass_with, nonneg_soft_threshold, solve_dca, SparseProblem};
use dfp_core::{Mat, SplitMix64};

use crate::csvfmt::{csv_field, fmt_g12};
use crate::dictio::{load_dictionary, save_dictionary};
use crate::records::{now_unix, sha256_hex, RecordStore, RunRecord};
use crate::schema::{family_from_name, parse_spec, serialize_spec, spec_to_doc};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "dfp",
    version,
    about = "Dataless architecture scoring via minimum deep frame potential"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StepRuleArg {
    Fixed,
    Adaptive,
}

#[derive(Args, Debug, Clone)]
pub struct MinOpts {
    /// Seed for parameter initialization (restarts derive their own).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_iters: usize,
    /// Relative objective-decrease tolerance over a 100-iteration window.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = StepRuleArg::Adaptive)]
    pub step_rule: StepRuleArg,
    #[arg(long, default_value_t = 1e-2)]
    pub init_step: f64,
}

impl MinOpts {
    pub fn config(&self) -> MinimizeConfig {
        MinimizeConfig {
            max_iters: self.max_iters,
            step_rule: match self.step_rule {
                StepRuleArg::Fixed => StepRule::Fixed,
                StepRuleArg::Adaptive => StepRule::AdaptiveFirstOrder,
            },
            init_step: self.init_step,
            rel_tol: self.tol,
            restarts: self.restarts,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct CacheOpts {
    /// Recompute even when a matching record exists.
    #[arg(long)]
    pub no_cache: bool,
    /// Run-record directory (JSON-lines store).
    #[arg(long, default_value = ".dfp_runs")]
    pub cache_dir: PathBuf,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Canonicalize a spec and report its structural constants
    Describe { spec: PathBuf },
    /// Emit the dense normalized Gram matrix as CSV
    Gram {
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate a saved dictionary instead of a seeded initialization.
        #[arg(long)]
        dict: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write |G| magnitudes (plot-ready CSV).
        #[arg(long)]
        mag_out: Option<PathBuf>,
    },
    /// Frame potential, coherence, and gradient-norm report
    Potential {
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Minimize the frame potential over the learned parameters
    Minimize {
        spec: PathBuf,
        #[command(flatten)]
        min: MinOpts,
        #[command(flatten)]
        cache: CacheOpts,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Save the best dictionary (JSON + .params sidecar).
        #[arg(long)]
        dict_out: Option<PathBuf>,
    },
    /// Analytic lower bound on the minimum frame potential (chains only)
    Bound { spec: PathBuf },
    /// Score and rank a batch of specs (files, directories, or JSON-lines)
    Rank {
        specs: Vec<PathBuf>,
        #[command(flatten)]
        min: MinOpts,
        #[command(flatten)]
        cache: CacheOpts,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Verify the sparse-coding backbone on one spec
    SparseCheck {
        spec: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the spec's sparsity weight.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 5_000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Minimize over a family/depth/width grid, emitting curve data
    Sweep {
        /// Comma-separated families (chain, resnet, densenet).
        #[arg(long, value_delimiter = ',', required = true)]
        family: Vec<String>,
        /// Depth range `lo..hi` (inclusive) or comma list.
        #[arg(long, required = true)]
        depths: String,
        #[arg(long, value_delimiter = ',', required = true)]
        widths: Vec<usize>,
        #[command(flatten)]
        min: MinOpts,
        #[command(flatten)]
        cache: CacheOpts,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Describe { spec } => describe(&spec),
        Cmd::Gram {
            spec,
            seed,
            dict,
            out,
            mag_out,
        } => gram(&spec, seed, dict.as_deref(), out.as_deref(), mag_out.as_deref()),
        Cmd::Potential { spec, seed, dict } => potential(&spec, seed, dict.as_deref()),
        Cmd::Minimize {
            spec,
            min,
            cache,
            out,
            format,
            dict_out,
        } => minimize(&spec, &min, &cache, out.as_deref(), format, dict_out.as_deref()),
        Cmd::Bound { spec } => bound(&spec),
        Cmd::Rank {
            specs,
            min,
            cache,
            out,
            format,
            jobs,
        } => rank(&specs, &min, &cache, out.as_deref(), format, jobs),
        Cmd::SparseCheck {
            spec,
            trials,
            seed,
            lambda,
            max_iters,
            tol,
        } => sparse_check(&spec, trials, seed, lambda, max_iters, tol),
        Cmd::Sweep {
            family,
            depths,
            widths,
            min,
            cache,
            out,
            format,
            jobs,
        } => sweep(&family, &depths, &widths, &min, &cache, out.as_deref(), format, jobs),
    }
}

fn load_spec(path: &Path) -> Result<ArchSpec> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_spec(&text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, content).with_context(|| format!("writing {}", path.display()))?
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
        }
    }
    Ok(())
}

fn spec_id(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("spec")
        .to_string()
}

// --------------------------------------------------------------------- describe

fn describe(path: &Path) -> Result<()> {
    let spec = load_spec(path)?;
    let doc = json!({
        "spec": serde_json::to_value(spec_to_doc(&spec))?,
        "family": spec.family().as_str(),
        "widths": spec.widths(),
        "param_count": spec.param_count(),
        "n_offdiag": count_offdiag(&spec),
        "total_rows": (1..=spec.depth()).map(|j| spec.row_dim(j)).sum::<usize>(),
        "total_cols": spec.widths()[1..].iter().sum::<usize>(),
    });
    println!("{doc}");
    eprintln!(
        "{}: {} depth {} params {} n_offdiag {}",
        spec_id(path),
        spec.family(),
        spec.depth(),
        spec.param_count(),
        count_offdiag(&spec)
    );
    Ok(())
}

// ------------------------------------------------------------------------- gram

fn dict_for(spec_path: &Path, seed: u64, dict_path: Option<&Path>) -> Result<(ArchSpec, BlockDictionary)> {
    match dict_path {
        Some(p) => load_dictionary(p),
        None => {
            let spec = load_spec(spec_path)?;
            let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
            Ok((spec, dict))
        }
    }
}

fn matrix_csv(m: &Mat, magnitudes: bool) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let mut first = true;
        for c in 0..m.cols() {
            if !first {
                s.push(',');
            }
            first = false;
            let v = if magnitudes { m.get(r, c).abs() } else { m.get(r, c) };
            s.push_str(&fmt_g12(v));
        }
        s.push('\n');
    }
    s
}

fn gram(
    spec_path: &Path,
    seed: u64,
    dict_path: Option<&Path>,
    out: Option<&Path>,
    mag_out: Option<&Path>,
) -> Result<()> {
    let (_, dict) = dict_for(spec_path, seed, dict_path)?;
    let k = dict.total_cols();
    if k * k > dfp_core::dict::MATERIALIZE_CAP {
        bail!("dense Gram needs {} entries, cap is {}", k * k, dfp_core::dict::MATERIALIZE_CAP);
    }
    let g = gram_blocks(&dict).map_err(|e| anyhow!("{e}"))?;
    let dense = g.assemble_dense();
    emit(out, &matrix_csv(&dense, false))?;
    if let Some(p) = mag_out {
        fs::write(p, matrix_csv(&dense, true))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "gram: {k} atoms, n_offdiag {}, coherence {}",
        g.n_offdiag(),
        fmt_g12(dfp_core::potential::coherence_of(&g, false))
    );
    Ok(())
}

// -------------------------------------------------------------------- potential

#[derive(serde::Serialize)]
struct ReportDoc {
    frame_potential: f64,
    coherence: f64,
    one_sided_coherence: f64,
    grad_norm: f64,
    n_offdiag: usize,
    atom_count: usize,
}

fn potential(spec_path: &Path, seed: u64, dict_path: Option<&Path>) -> Result<()> {
    let (_, dict) = dict_for(spec_path, seed, dict_path)?;
    let rep = report(&dict).map_err(|e| anyhow!("{e}"))?;
    let doc = ReportDoc {
        frame_potential: rep.frame_potential,
        coherence: rep.coherence,
        one_sided_coherence: rep.one_sided_coherence,
        grad_norm: rep.grad_norm,
        n_offdiag: rep.n_offdiag,
        atom_count: rep.atom_count,
    };
    println!("{}", serde_json::to_string(&doc)?);
    eprintln!(
        "potential: F2 {} coherence {}",
        fmt_g12(rep.frame_potential),
        fmt_g12(rep.coherence)
    );
    Ok(())
}

// --------------------------------------------------------------------- minimize

fn config_hash(config: &MinimizeConfig) -> String {
    let doc = json!({
        "seed": config.seed,
        "restarts": config.restarts,
        "max_iters": config.max_iters,
        "rel_tol": config.rel_tol,
        "init_step": config.init_step,
        "step_rule": match config.step_rule {
            StepRule::Fixed => "fixed",
            StepRule::AdaptiveFirstOrder => "adaptive",
        },
    });
    sha256_hex(&doc.to_string())
}

fn minimize_result_value(id: &str, config: &MinimizeConfig, res: &MinimizeResult) -> serde_json::Value {
    json!({
        "id": id,
        "seed": config.seed,
        "best_potential": res.best_potential,
        "wall_time": res.wall_time,
        "per_restart": res.per_restart.iter().map(|r| json!({
            "final_potential": r.final_potential,
            "iterations": r.iterations,
            "converged": r.converged,
            "reseeds": r.reseeds,
            "diverged": r.diverged,
        })).collect::<Vec<_>>(),
        "best_params": res.best_params,
    })
}

struct CachedMinimize {
    value: serde_json::Value,
    cached: bool,
    /// Seconds spent in this call (near zero on a cache hit).
    seconds: f64,
}

fn minimize_with_cache(
    id: &str,
    spec: &ArchSpec,
    config: &MinimizeConfig,
    store: Option<&Mutex<RecordStore>>,
) -> Result<CachedMinimize> {
    let t0 = std::time::Instant::now();
    let spec_hash = sha256_hex(&serialize_spec(spec));
    let cfg_hash = config_hash(config);
    if let Some(store) = store {
        let guard = store.lock().expect("record store lock");
        if let Some(rec) = guard.lookup("minimize", &spec_hash, &cfg_hash) {
            return Ok(CachedMinimize {
                value: rec.result.clone(),
                cached: true,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }
    let res = minimize_potential(spec, config).map_err(|e| anyhow!("{e}"))?;
    let value = minimize_result_value(id, config, &res);
    if let Some(store) = store {
        let mut guard = store.lock().expect("record store lock");
        guard.append(RunRecord {
            id: id.to_string(),
            kind: "minimize".to_string(),
            spec_hash,
            config_hash: cfg_hash,
            timestamp: now_unix(),
            tool_version: TOOL_VERSION.to_string(),
            result: value.clone(),
        })?;
    }
    Ok(CachedMinimize {
        value,
        cached: false,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn minimize(
    spec_path: &Path,
    min: &MinOpts,
    cache: &CacheOpts,
    out: Option<&Path>,
    format: Format,
    dict_out: Option<&Path>,
) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let id = spec_id(spec_path);
    let config = min.config();
    let store = if cache.no_cache {
        None
    } else {
        Some(Mutex::new(RecordStore::open(&cache.cache_dir)?))
    };
    let outcome = minimize_with_cache(&id, &spec, &config, store.as_ref())?;

    if let Some(dict_path) = dict_out {
        let params: Vec<f64> = outcome.value["best_params"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
            .unwrap_or_default();
        save_dictionary(dict_path, &spec, &params)?;
    }

    let best = outcome.value["best_potential"].as_f64().unwrap_or(f64::NAN);
    match format {
        Format::Json => {
            let mut doc = outcome.value.clone();
            doc["cached"] = json!(outcome.cached);
            doc["wall_time"] = json!(if outcome.cached {
                outcome.seconds
            } else {
                outcome.value["wall_time"].as_f64().unwrap_or(0.0)
            });
            emit(out, &format!("{doc}\n"))?;
        }
        Format::Csv => {
            let bound = spec_bound(&spec);
            let mut s = String::from("id,params,potential,bound,seconds\n");
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&id),
                spec.param_count(),
                fmt_g12(best),
                bound.map(fmt_g12).unwrap_or_default(),
                fmt_g12(outcome.seconds),
            ));
            emit(out, &s)?;
        }
    }
    eprintln!(
        "minimize {}: best {}{}",
        id,
        fmt_g12(best),
        if outcome.cached { " (cached)" } else { "" }
    );
    Ok(())
}

// ------------------------------------------------------------------------ bound

fn bound(spec_path: &Path) -> Result<()> {
    let spec = load_spec(spec_path)?;
    if spec.family() != Family::Chain {
        bail!(
            "bound requires a chain spec (got {}); minimize covers skip families",
            spec.family()
        );
    }
    let widths = spec.widths();
    let b = dfp_core::bound::chain_lower_bound_with_n(&widths, count_offdiag(&spec))
        .map_err(|e| anyhow!("{e}"))?;
    if !b.overcomplete {
        eprintln!("warning: widths are not overcomplete; the bound may be vacuous");
    }
    if !b.converged {
        eprintln!("warning: magnitude optimization hit the sweep cap; reporting best value");
    }
    let doc = json!({
        "bound": b.bound,
        "c_star": b.c_star,
        "iterations": b.iterations,
        "converged": b.converged,
        "overcomplete": b.overcomplete,
    });
    println!("{doc}");
    eprintln!("bound: {}", fmt_g12(b.bound));
    Ok(())
}

// ------------------------------------------------------------------------- rank

fn collect_specs(paths: &[PathBuf]) -> Result<Vec<(String, ArchSpec)>> {
    let mut items = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("reading {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
                .collect();
            files.sort();
            for f in files {
                items.push((spec_id(&f), load_spec(&f)?));
            }
        } else if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let stem = spec_id(path);
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let spec = parse_spec(line)
                    .map_err(|e| anyhow!("{}:{}: {e}", path.display(), i + 1))?;
                items.push((format!("{stem}:{}", i + 1), spec));
            }
        } else {
            items.push((spec_id(path), load_spec(path)?));
        }
    }
    if items.is_empty() {
        bail!("no specs found");
    }
    Ok(items)
}

fn effective_jobs(jobs: usize, tasks: usize) -> usize {
    let j = if jobs == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        jobs
    };
    j.max(1).min(tasks.max(1))
}

/// Fans `tasks` out over worker threads; results keep task order.
fn run_parallel<T, R, F>(tasks: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = effective_jobs(jobs, tasks.len());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let r = f(&tasks[i]);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("task completed"))
        .collect()
}

fn score_one(
    id: &str,
    spec: &ArchSpec,
    config: &MinimizeConfig,
    store: Option<&Mutex<RecordStore>>,
) -> ScoreRow {
    let params = spec.param_count();
    let n_offdiag = count_offdiag(spec);
    match minimize_with_cache(id, spec, config, store) {
        Ok(outcome) => ScoreRow {
            id: id.to_string(),
            family: spec.family(),
            params,
            n_offdiag,
            best_potential: outcome.value["best_potential"].as_f64(),
            bound: spec_bound(spec),
            seconds: outcome.seconds,
            error: None,
        },
        Err(e) => ScoreRow {
            id: id.to_string(),
            family: spec.family(),
            params,
            n_offdiag,
            best_potential: None,
            bound: spec_bound(spec),
            seconds: 0.0,
            error: Some(format!("{e}")),
        },
    }
}

fn rank_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("id,params,potential,bound,seconds\n");
    for row in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_field(&row.id),
            row.params,
            row.best_potential.map(fmt_g12).unwrap_or_default(),
            row.bound.map(fmt_g12).unwrap_or_default(),
            fmt_g12(row.seconds),
        ));
    }
    s
}

fn rank_json(rows: &[ScoreRow]) -> serde_json::Value {
    json!(rows
        .iter()
        .map(|row| json!({
            "id": row.id,
            "family": row.family.as_str(),
            "params": row.params,
            "n_offdiag": row.n_offdiag,
            "potential": row.best_potential,
            "bound": row.bound,
            "seconds": row.seconds,
            "error": row.error,
        }))
        .collect::<Vec<_>>())
}

fn rank(
    paths: &[PathBuf],
    min: &MinOpts,
    cache: &CacheOpts,
    out: Option<&Path>,
    format: Format,
    jobs: usize,
) -> Result<()> {
    let items = collect_specs(paths)?;
    let config = min.config();
    let store = if cache.no_cache {
        None
    } else {
        Some(Mutex::new(RecordStore::open(&cache.cache_dir)?))
    };
    let mut rows = run_parallel(&items, jobs, |(id, spec)| {
        score_one(id, spec, &config, store.as_ref())
    });
    sort_rows(&mut rows);
    match format {
        Format::Csv => emit(out, &rank_csv(&rows))?,
        Format::Json => emit(out, &format!("{}\n", rank_json(&rows)))?,
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!("rank: {} specs, {} failed", rows.len(), failed);
    for row in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("  {}: {}", row.id, row.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

// ----------------------------------------------------------------- sparse-check

fn sparse_check(
    spec_path: &Path,
    trials: usize,
    seed: u64,
    lambda: Option<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<()> {
    let spec = load_spec(spec_path)?;
    let lam = lambda.unwrap_or(spec.lambda());
    let lambdas = vec![lam; spec.depth()];

    let mut monotone_violations = 0usize;
    let mut order_violations = 0usize;
    let mut max_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let dict_seed = SplitMix64::fork(seed, t as u64).next_u64();
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, dict_seed);
        let mut rng = SplitMix64::fork(seed, (t as u64) | 1 << 62);
        let x: Vec<f64> = (0..dict.row_dims()[0])
            .map(|_| rng.next_f64() * 2.0 - 1.0)
            .collect();
        let problem = SparseProblem::with_lambdas(dict.clone(), x.clone(), lambdas.clone())
            .map_err(|e| anyhow!("{e}"))?;
        let sol = solve_dca(&problem, max_iters, tol).map_err(|e| anyhow!("{e}"))?;
        if sol.trace.windows(2).any(|p| p[1] > p[0] + 1e-12) {
            monotone_violations += 1;
        }
        let acts = forward_pass_with(&dict, &x, &lambdas).map_err(|e| anyhow!("{e}"))?;
        let fw_obj = problem.objective(&problem.stack(&acts)).map_err(|e| anyhow!("{e}"))?;
        let gap = sol.objective - fw_obj;
        max_gap = max_gap.max(gap);
        if gap > 1e-12 {
            order_violations += 1;
        }
    }

    // Closed-form check on orthonormalizable single-layer specs.
    let widths = spec.widths();
    let orthonormal = if spec.depth() == 1 && widths[1] <= widths[0] {
        let (d, k) = (widths[0], widths[1]);
        let dict = build_dictionary(&spec, InitPolicy::FanInGaussian, seed);
        let mut params = dict.flatten_params();
        gram_schmidt_columns(&mut params, d, k);
        let dict = dict.load_params(&params).map_err(|e| anyhow!("{e}"))?;
        let mut rng = SplitMix64::fork(seed, 777);
        let x: Vec<f64> = (0..d).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let problem =
            SparseProblem::with_lambdas(dict.clone(), x.clone(), vec![lam]).map_err(|e| anyhow!("{e}"))?;
        let sol = solve_dca(&problem, max_iters.max(10_000), 1e-15).map_err(|e| anyhow!("{e}"))?;
        let bt_x = {
            let b = dict.materialize().map_err(|e| anyhow!("{e}"))?;
            b.tr_mul_vec(&x)
        };
        let closed = nonneg_soft_threshold(&bt_x, lam);
        let max_err = sol
            .w
            .iter()
            .zip(closed.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        json!({"pass": max_err <= 1e-10, "max_err": max_err})
    } else {
        json!({"skipped": "needs a single layer with width <= input dim"})
    };

    let monotone_pass = monotone_violations == 0;
    let order_pass = order_violations == 0;
    let closed_pass = orthonormal["pass"].as_bool().unwrap_or(true);
    let pass = monotone_pass && order_pass && closed_pass;
    let doc = json!({
        "trials": trials,
        "lambda": lam,
        "monotone": {"pass": monotone_pass, "violations": monotone_violations},
        "solver_vs_forward": {"pass": order_pass, "violations": order_violations, "max_gap": max_gap},
        "orthonormal_closed_form": orthonormal,
        "pass": pass,
    });
    println!("{doc}");
    eprintln!("sparse-check: {}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        bail!("sparse-check failed");
    }
    Ok(())
}

/// In-place modified Gram-Schmidt over the columns of a row-major `d x k`
/// parameter block.
fn gram_schmidt_columns(params: &mut [f64], d: usize, k: usize) {
    for c in 0..k {
        for prev in 0..c {
            let mut dot = 0.0;
            for r in 0..d {
                dot += params[r * k + c] * params[r * k + prev];
            }
            for r in 0..d {
                params[r * k + c] -= dot * params[r * k + prev];
            }
        }
        let mut nsq = 0.0;
        for r in 0..d {
            nsq += params[r * k + c] * params[r * k + c];
        }
        let inv = 1.0 / nsq.sqrt();
        for r in 0..d {
            params[r * k + c] *= inv;
        }
    }
}

// ------------------------------------------------------------------------ sweep

fn parse_depths(text: &str) -> Result<Vec<usize>> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().context("depth range start")?;
        let hi: usize = hi.trim().parse().context("depth range end")?;
        if lo == 0 || hi < lo {
            bail!("bad depth range {text:?}");
        }
        Ok((lo..=hi).collect())
    } else {
        text.split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .with_context(|| format!("bad depth {p:?}"))
            })
            .collect()
    }
}

struct SweepTask {
    family: Family,
    family_name: String,
    depth: usize,
    width: usize,
}

struct SweepRow {
    family: String,
    depth: usize,
    width: usize,
    id: String,
    row: ScoreRow,
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    families: &[String],
    depths: &str,
    widths: &[usize],
    min: &MinOpts,
    cache: &CacheOpts,
    out: Option<&Path>,
    format: Format,
    jobs: usize,
) -> Result<()> {
    let depths = parse_depths(depths)?;
    if families.is_empty() || widths.is_empty() {
        bail!("sweep needs at least one family and one width");
    }
    let mut tasks = Vec::new();
    for name in families {
        let family = family_from_name(name)
            .filter(|f| *f != Family::Custom)
            .ok_or_else(|| anyhow!("unknown family {name:?}"))?;
        for &depth in &depths {
            for &width in widths {
                tasks.push(SweepTask {
                    family,
                    family_name: family.as_str().to_string(),
                    depth,
                    width,
                });
            }
        }
    }
    let config = min.config();
    let store = if cache.no_cache {
        None
    } else {
        Some(Mutex::new(RecordStore::open(&cache.cache_dir)?))
    };
    let rows = run_parallel(&tasks, jobs, |task| {
        let id = format!("{}-d{}-w{}", task.family_name, task.depth, task.width);
        let row = match expand_family(task.family, task.depth, task.width) {
            Ok(spec) => score_one(&id, &spec, &config, store.as_ref()),
            Err(e) => ScoreRow {
                id: id.clone(),
                family: task.family,
                params: 0,
                n_offdiag: 0,
                best_potential: None,
                bound: None,
                seconds: 0.0,
                error: Some(e.to_string()),
            },
        };
        SweepRow {
            family: task.family_name.clone(),
            depth: task.depth,
            width: task.width,
            id,
            row,
        }
    });

    match format {
        Format::Csv => {
            let mut s =
                String::from("family,depth,width,params,n_offdiag,potential,bound,seconds,status\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.family,
                    r.depth,
                    r.width,
                    r.row.params,
                    r.row.n_offdiag,
                    r.row.best_potential.map(fmt_g12).unwrap_or_default(),
                    r.row.bound.map(fmt_g12).unwrap_or_default(),
                    fmt_g12(r.row.seconds),
                    if r.row.error.is_none() { "ok" } else { "failed" },
                ));
            }
            emit(out, &s)?;
        }
        Format::Json => {
            let doc = json!(rows
                .iter()
                .map(|r| json!({
                    "family": r.family,
                    "depth": r.depth,
                    "width": r.width,
                    "id": r.id,
                    "params": r.row.params,
                    "n_offdiag": r.row.n_offdiag,
                    "potential": r.row.best_potential,
                    "bound": r.row.bound,
                    "seconds": r.row.seconds,
                    "error": r.row.error,
                }))
                .collect::<Vec<_>>());
            emit(out, &format!("{doc}\n"))?;
        }
    }
    let failed = rows.iter().filter(|r| r.row.error.is_some()).count();
    eprintln!("sweep: {} rows, {} failed", rows.len(), failed);
    Ok(())
}
