mod args;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::Parser;
use hkm::matrix::dense_gemm;
use hkm::pipeline::{accuracy_sweep, inspector_p1, inspector_p2, run_inspector, sweep_csv, P1Artifacts, P2Artifacts};
use hkm::points::{load_points, synth_points};
use hkm::reference::{relative_error, ErrorMode, DENSE_LIMIT};
use hkm::{DenseMatrix, EvalPlan, PointFormat, PointSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use args::{AccuracyArgs, BenchArgs, Cli, Command, ErrorCheck, EvalArgs, InputArgs, InspectArgs};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Inspect(a) => inspect(a),
        Command::Eval(a) => eval(a),
        Command::Accuracy(a) => accuracy(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 usage, 3 I/O, 4 consistency, 5 numeric guard, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<hkm::Error>() {
            return match err {
                hkm::Error::InvalidArgument(_) => 2,
                hkm::Error::Io { .. } | hkm::Error::Parse { .. } => 3,
                hkm::Error::Format(_) | hkm::Error::Consistency(_) => 4,
                hkm::Error::NumericGuard(_) => 5,
                hkm::Error::Internal(_) => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

/// Configures the global pool used by the inspector and the dense baseline.
fn init_pool(workers: usize) -> Result<()> {
    if workers == 0 {
        return Err(hkm::Error::InvalidArgument("--workers must be at least 1".into()).into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .context("building the worker pool")
}

fn load_input(input: &InputArgs) -> Result<PointSet> {
    let points = match &input.points {
        Some(path) => load_points(path, input.format.map(Into::into))?,
        None => synth_points(input.synth, input.n, input.seed)?,
    };
    log::info!("{} points in {} dimensions", points.len(), points.dim());
    Ok(points)
}

fn random_w(n: usize, q: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DenseMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0))
}

fn write_csv(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    init_pool(a.compress.workers())?;
    eprintln!(
        "config: cmd=inspect {} seed={} {} out={} reuse={}",
        a.input.describe(),
        a.input.seed,
        a.compress.describe(a.input.seed),
        a.out.display(),
        a.reuse
    );
    let points = load_input(&a.input)?;
    let out = run_inspector(
        &points,
        &a.compress.p1_config(a.input.seed),
        &a.compress.p2_config(),
        &a.out,
        a.reuse,
    )?;
    let htree = &out.p1.htree;
    println!(
        "nodes={} leaves={} near={} far={} max_srank={} p1_reused={} p1_seconds={:.3} p2_seconds={:.3}",
        htree.num_nodes(),
        htree.tree.num_leaves(),
        htree.num_near(),
        htree.num_far(),
        out.p2.cds.sranks.iter().copied().max().unwrap_or(0),
        out.reused_p1,
        out.p1_time.as_secs_f64(),
        out.p2_time.as_secs_f64()
    );
    log::info!("plan:\n{}", out.p2.plan.pseudocode());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let p2 = P2Artifacts::load(&a.dir)?;
    let mut plan = p2.plan;
    if let Some(w) = a.workers {
        plan.workers = w;
    }
    init_pool(plan.workers)?;
    let exec = hkm::Executor::new(p2.cds, plan)?;
    let n = exec.cds().n;
    let w = match &a.w {
        Some(path) => {
            let m = load_points(path, a.format.map(Into::into))?;
            DenseMatrix::from_row_major(m.len(), m.dim(), m.coords())?
        }
        None => random_w(n, a.q, a.seed),
    };
    eprintln!(
        "config: cmd=eval dir={} w={} q={} seed={} workers={} error={:?} error_rows={}",
        a.dir.display(),
        a.w.as_ref().map_or("random".to_string(), |p| p.display().to_string()),
        w.cols(),
        a.seed,
        plan.workers,
        a.error,
        a.error_rows
    );
    let (y, stats) = exec.evaluate_with_stats(&w)?;
    println!(
        "n={n} q={} seconds={:.6} upward={:.6} far={:.6} downward={:.6} near={:.6}",
        w.cols(),
        stats.total().as_secs_f64(),
        stats.upward.as_secs_f64(),
        stats.far.as_secs_f64(),
        stats.downward.as_secs_f64(),
        stats.near.as_secs_f64()
    );

    let mode = match a.error {
        ErrorCheck::None => None,
        ErrorCheck::Dense => Some(ErrorMode::Dense),
        ErrorCheck::Sampled => Some(ErrorMode::Sampled { rows: a.error_rows, seed: a.seed }),
        ErrorCheck::Auto => Some(auto_error_mode(n, a.error_rows, a.seed)),
    };
    if let Some(mode) = mode {
        let p1 = P1Artifacts::load(&a.dir)?;
        let err = relative_error(&y, &p2.config.kernel, &p1.points, &w, mode)?;
        println!("relative_error={err:e}");
    }

    if let Some(path) = &a.output {
        let format = a.format.map_or_else(|| PointFormat::from_path(path), Into::into);
        PointSet::new(y.rows(), y.cols(), y.to_row_major())?.save(path, format)?;
    }
    Ok(())
}

fn auto_error_mode(n: usize, rows: usize, seed: u64) -> ErrorMode {
    if n <= DENSE_LIMIT {
        ErrorMode::Dense
    } else {
        ErrorMode::Sampled { rows, seed }
    }
}

fn accuracy(a: AccuracyArgs) -> Result<()> {
    init_pool(a.compress.workers())?;
    eprintln!(
        "config: cmd=accuracy {} seed={} {} baccs={:?} q={} error_rows={}",
        a.input.describe(),
        a.input.seed,
        a.compress.describe(a.input.seed),
        a.baccs,
        a.q,
        a.error_rows
    );
    let points = load_input(&a.input)?;
    let p1 = inspector_p1(&points, &a.compress.p1_config(a.input.seed))?;
    let w = random_w(points.len(), a.q, a.input.seed);
    let mode = auto_error_mode(points.len(), a.error_rows, a.input.seed);
    let rows = accuracy_sweep(&p1, &a.compress.p2_config(), &a.baccs, &w, mode)?;
    write_csv(a.csv.as_deref(), &sweep_csv(&rows))
}

fn min_time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Duration> {
    let mut best = Duration::MAX;
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        f()?;
        best = best.min(t0.elapsed());
    }
    Ok(best)
}

fn bench(a: BenchArgs) -> Result<()> {
    let workers = a.compress.workers();
    init_pool(workers)?;
    let sweep = if a.worker_sweep.is_empty() { vec![workers] } else { a.worker_sweep.clone() };
    eprintln!(
        "config: cmd=bench {} seed={} {} qs={:?} worker_sweep={:?} reps={} dense={}",
        a.input.describe(),
        a.input.seed,
        a.compress.describe(a.input.seed),
        a.qs,
        sweep,
        a.reps,
        !a.no_dense
    );
    let points = load_input(&a.input)?;
    let n = points.len();
    let kernel_matrix = if a.no_dense {
        None
    } else {
        if n > DENSE_LIMIT {
            return Err(hkm::Error::NumericGuard(format!(
                "dense baseline needs an {n}x{n} matrix; limit is {DENSE_LIMIT} (use --no-dense)"
            ))
            .into());
        }
        let kernel = a.compress.kernel;
        Some(DenseMatrix::from_fn(n, n, |r, c| kernel.from_sq_dist(points.dist2(r, c))))
    };

    let p1 = inspector_p1(&points, &a.compress.p1_config(a.input.seed))?;
    let mut csv = String::from("workers,q,eval_seconds,dense_seconds,speedup\n");
    for &p in &sweep {
        // The coarsened schedule depends on the worker count.
        let mut p2cfg = a.compress.p2_config();
        p2cfg.plan.workers = p;
        let p2 = inspector_p2(&p1, &p2cfg)?;
        let plan: EvalPlan = p2.plan;
        let exec = hkm::Executor::new(p2.cds, plan)?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(p).build()?;
        for &q in &a.qs {
            let w = random_w(n, q, a.input.seed);
            let eval = min_time(a.reps, || exec.evaluate(&w).map(drop).map_err(Into::into))?;
            let dense = match &kernel_matrix {
                Some(k) => {
                    let wr = w.to_row_major();
                    let t = pool.install(|| min_time(a.reps, || dense_gemm(k, &wr, q).map(drop).map_err(Into::into)))?;
                    Some(t.as_secs_f64())
                }
                None => None,
            };
            let e = eval.as_secs_f64();
            csv.push_str(&match dense {
                Some(d) => format!("{p},{q},{e:.6},{d:.6},{:.3}\n", d / e),
                None => format!("{p},{q},{e:.6},,\n"),
            });
            log::info!("workers={p} q={q} done");
        }
    }
    write_csv(a.csv.as_deref(), &csv)
}
