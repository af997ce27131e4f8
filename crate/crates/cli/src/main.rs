use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use riskfilter::risk::bound_coverage;
use riskfilter::rng::StreamKey;
use riskfilter::safety_filter::filter;
use riskfilter::sim::{self, Scenario};
use riskfilter::Error;

/// Risk-aware safety filter simulator.
///
/// Exit status: 0 on success, 1 when a run aborts or an acceptance check
/// fails, 2 on usage or configuration errors. `RISKFILTER_THREADS` caps
/// the worker pool.
#[derive(Parser)]
#[command(name = "riskfilter", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario config and write per-step CSV and JSON summaries.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// CVaR mismatch study against the Kalman oracle.
    Table1 {
        /// Scenario to use instead of the bundled Example-1 drone.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = sim::TABLE1_PARTICLES)]
        particles: Vec<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline comparison on the bimodal unicycle scenario.
    Table2 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo coverage of the CVaR lower bound on standard normal data.
    ValidateBound {
        #[arg(long, default_value_t = 2000)]
        trials: usize,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long = "n", short = 'N', default_value_t = 100)]
        n: usize,
        /// Support lower bound; draws below it are discarded and redrawn.
        #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
        b_min: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Wall-clock time of the full filter call per particle count.
    Bench {
        #[arg(long = "n", short = 'N', value_delimiter = ',', default_values_t = sim::TABLE1_PARTICLES)]
        n: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Mean filter time allowed at any benchmarked size (s).
const BENCH_LIMIT_S: f64 = 0.01;

enum Failure {
    Usage(String),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn prepare_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn load_or(config: Option<&Path>, default: fn() -> Scenario) -> Result<Scenario, Failure> {
    Ok(match config {
        Some(p) => Scenario::load(p)?,
        None => default(),
    })
}

fn simulate(config: &Path, seed: Option<u64>, reps: Option<usize>, out: &Path) -> Result<(), Failure> {
    let s = Scenario::load(config)?;
    let seed = seed.unwrap_or(s.seed);
    let reps = reps.unwrap_or(s.reps);
    prepare_out(out)?;
    let runs = sim::run_reps(&s, seed, reps)?;
    for (r, run) in runs.iter().enumerate() {
        let path = out.join(format!("run_{r:03}.csv"));
        let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        sim::write_records_csv(&run.records, std::io::BufWriter::new(file))?;
        write_json(&out.join(format!("run_{r:03}.json")), &run.summary)?;
    }
    let summaries: Vec<_> = runs.iter().map(|r| &r.summary).collect();
    write_json(&out.join("summary.json"), &summaries)?;
    let aborted = runs.iter().filter(|r| !r.completed()).count();
    let collisions = runs.iter().filter(|r| r.summary.collision).count();
    println!(
        "{}: {reps} run(s), {collisions} with collisions, {aborted} aborted -> {}",
        s.name,
        out.display()
    );
    if aborted > 0 {
        return Err(Failure::Acceptance(format!("{aborted} repetition(s) aborted")));
    }
    Ok(())
}

fn verdict_line(name: &str, passed: bool) -> Result<(), Failure> {
    println!("verdict: {}", if passed { "PASS" } else { "FAIL" });
    if passed {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("{name} acceptance checks failed")))
    }
}

fn table1(
    config: Option<&Path>,
    particles: &[usize],
    reps: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Failure> {
    let s = load_or(config, sim::example1)?;
    prepare_out(out)?;
    let report = sim::table1_study(&s, particles, reps.unwrap_or(s.reps), seed.unwrap_or(s.seed))?;
    write_json(&out.join("table1.json"), &report)?;
    println!("{:>6} {:>18} {:>9} {:>18} {:>9} {:>12}", "N", "e_hat", "Pr[e<=0]", "e_bar", "Pr[e<=0]", "t_c [s]");
    for r in &report.rows {
        println!(
            "{:>6} {:>8.4} ± {:<7.4} {:>8.1}% {:>8.4} ± {:<7.4} {:>8.2}% {:>12.2e}",
            r.n,
            r.e_hat_mean,
            r.e_hat_std,
            100.0 * r.pr_e_hat_le0,
            r.e_bar_mean,
            r.e_bar_std,
            100.0 * r.pr_e_bar_le0,
            r.t_c_mean_s
        );
    }
    verdict_line("table1", report.verdict.passed)
}

fn table2(config: Option<&Path>, reps: Option<usize>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let s = load_or(config, sim::multimodal)?;
    prepare_out(out)?;
    let variants = sim::table2_variants();
    let report = sim::table2_study(&s, &variants, reps.unwrap_or(s.reps), seed.unwrap_or(s.seed))?;
    write_json(&out.join("table2.json"), &report)?;
    println!("{:>12} {:>7} {:>18} {:>10}", "variant", "coll.", "clearance h_x", "safe frac");
    for r in &report.rows {
        println!(
            "{:>12} {:>7} {:>8.3} ± {:<7.3} {:>10.3}",
            r.label, r.collisions, r.clearance_mean, r.clearance_std, r.safe_fraction_mean
        );
    }
    verdict_line("table2", report.verdict.passed)
}

#[derive(Serialize)]
struct CoverageOutput {
    #[serde(flatten)]
    report: riskfilter::risk::CoverageReport,
    threshold: f64,
    passed: bool,
}

fn validate_bound(trials: usize, alpha: f64, delta: f64, n: usize, b_min: f64, seed: u64) -> Result<(), Failure> {
    let report = bound_coverage(trials, n, alpha, delta, b_min, seed)?;
    let threshold = delta + 0.02;
    let passed = report.violation_rate <= threshold;
    let out = CoverageOutput {
        report,
        threshold,
        passed,
    };
    println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    if passed {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!(
            "violation rate {} exceeds {threshold}",
            out.report.violation_rate
        )))
    }
}

#[derive(Serialize)]
struct BenchRow {
    #[serde(rename = "N")]
    n: usize,
    mean_s: f64,
    std_s: f64,
}

fn bench(ns: &[usize], iters: usize, seed: u64) -> Result<(), Failure> {
    if iters == 0 {
        return Err(Failure::Usage("--iters must be positive".into()));
    }
    let s = sim::example1();
    let process = s.process.build();
    let barrier = s.barrier.build();
    let cfg = s.risk_config()?;
    let params = s.filter_params()?;
    let u_ref = [1.0];
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut scen = s.clone();
        scen.particle_filter.particles = n;
        let key = StreamKey::new(seed);
        let mut belief = sim::initial_belief(&scen, key)?;
        let mut pf_key = key.fork(1);
        let mut times = Vec::with_capacity(iters);
        for k in 0..iters + 5 {
            let start = Instant::now();
            let res = filter(&belief, &barrier, &cfg, &process, &u_ref, &params)?;
            let dt = start.elapsed().as_secs_f64();
            if k >= 5 {
                times.push(dt);
            }
            belief.propagate(&res.u_star, s.control_period, &process, &scen.particle_filter, &mut pf_key)?;
        }
        let (mean_s, std_s) = sim::mean_std(times);
        rows.push(BenchRow { n, mean_s, std_s });
    }
    println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
    let slow: Vec<usize> = rows.iter().filter(|r| r.mean_s >= BENCH_LIMIT_S).map(|r| r.n).collect();
    if slow.is_empty() {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("filter slower than {BENCH_LIMIT_S} s at N = {slow:?}")))
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("RISKFILTER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("RISKFILTER_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.cmd {
        Cmd::Simulate {
            config,
            seed,
            reps,
            out,
        } => simulate(&config, seed, reps, &out),
        Cmd::Table1 {
            config,
            particles,
            reps,
            seed,
            out,
        } => table1(config.as_deref(), &particles, reps, seed, &out),
        Cmd::Table2 {
            config,
            reps,
            seed,
            out,
        } => table2(config.as_deref(), reps, seed, &out),
        Cmd::ValidateBound {
            trials,
            alpha,
            delta,
            n,
            b_min,
            seed,
        } => validate_bound(trials, alpha, delta, n, b_min, seed),
        Cmd::Bench { n, iters, seed } => bench(&n, iters, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Acceptance(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
