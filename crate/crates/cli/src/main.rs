//! `elb`: stress runs, trace checking, protocol schedule exploration and
//! benchmarks for the lock-free k-ary tree.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use elb_tree::harness::scenarios::{self, format_schedule, parse_schedule, ScenarioOptions};
use elb_tree::harness::{bench, run_scenario, stress, HarnessError, Mix, RunConfig, Scenario, BenchRow};
use elb_tree::verification::{check_history, read_trace, write_trace, History, TraceError};
use elb_tree::{ReclaimMode, TreeConfig};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

const PASS: u8 = 0;
const VIOLATION: u8 = 1;
const USAGE: u8 = 2;
const IO: u8 = 3;

#[derive(Parser)]
#[command(name = "elb", version, about = "Lock-free k-ary search tree harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a concurrent workload, then check structure, history and final contents.
    Stress(StressArgs),
    /// Check a recorded trace against the interval semantics.
    Check {
        trace: PathBuf,
    },
    /// Explore interleavings of a built-in protocol scenario.
    Schedules(ScheduleArgs),
    /// Print a throughput table, one row per thread count.
    Bench(BenchArgs),
    /// Small runs of every check; exits 0 if all pass.
    Selftest,
}

#[derive(Args, Clone)]
struct TreeArgs {
    /// Maximum children per internal node (K).
    #[arg(long = "order", default_value_t = 32)]
    order: usize,
    /// Slots per leaf (D).
    #[arg(long = "leaf-cap", default_value_t = 32)]
    leaf_cap: usize,
    /// Leaves with fewer keys are rebalanced (S).
    #[arg(long = "min-size", default_value_t = 8)]
    min_size: usize,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[command(flatten)]
    tree: TreeArgs,
    /// Operations per thread.
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    /// Keys are drawn from 1..=RANGE.
    #[arg(long, default_value_t = 1 << 16)]
    range: u64,
    /// search:insert:remove weights.
    #[arg(long, default_value = "50:25:25")]
    mix: Mix,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// retire (epoch-based) or never (keep everything until exit).
    #[arg(long)]
    reclaim: Option<ReclaimMode>,
}

#[derive(Args)]
struct StressArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long, default_value_t = 4)]
    threads: usize,
    /// Write the history as a tab-separated trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Scenario name, or `all`.
    scenario: String,
    /// Preemptive context switches per schedule (default: unbounded).
    #[arg(long)]
    bound: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Random schedules (seeded) or sampled workloads (small-model).
    #[arg(long, default_value_t = 10_000)]
    samples: u64,
    /// small-model: cover every workload of up to this many operations.
    #[arg(long = "exhaustive-ops", default_value_t = 3)]
    exhaustive_ops: usize,
    /// Replay one schedule (comma-separated thread ids) instead of exploring.
    #[arg(long)]
    replay: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Comma-separated thread counts.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
    threads: Vec<usize>,
    /// Time limit per row in milliseconds.
    #[arg(long = "duration-ms")]
    duration_ms: Option<u64>,
}

fn run_config(w: &WorkloadArgs, threads: usize, default_reclaim: ReclaimMode) -> RunConfig {
    RunConfig {
        tree: TreeConfig { order: w.tree.order, leaf_capacity: w.tree.leaf_cap, min_size: w.tree.min_size },
        threads,
        ops: w.ops,
        range: w.range,
        mix: w.mix,
        seed: w.seed,
        reclaim: w.reclaim.unwrap_or(default_reclaim),
        duration: None,
    }
}

fn harness_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Io(_) => IO,
        _ => USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { PASS });
        }
    };
    let code = match cli.command {
        Command::Stress(args) => cmd_stress(&args),
        Command::Check { trace } => cmd_check(&trace),
        Command::Schedules(args) => cmd_schedules(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Selftest => cmd_selftest(),
    };
    ExitCode::from(code)
}

fn cmd_stress(args: &StressArgs) -> u8 {
    let config = run_config(&args.workload, args.threads, ReclaimMode::Never);
    let outcome = match stress(&config) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("elb stress: {e}");
            return harness_code(&e);
        }
    };
    println!("{}", outcome.summary());
    if let Some(path) = &args.trace {
        if let Err(e) = save_trace(path, &outcome.history) {
            eprintln!("elb stress: cannot write {}: {e}", path.display());
            return IO;
        }
        println!("trace: {} ({} records)", path.display(), outcome.history.len());
    }
    if outcome.passed() {
        PASS
    } else {
        VIOLATION
    }
}

fn save_trace(path: &Path, history: &History) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(&mut w, history)?;
    w.flush()
}

fn cmd_check(path: &Path) -> u8 {
    let history = match File::open(path).map_err(TraceError::Io).and_then(|f| read_trace(BufReader::new(f))) {
        Ok(h) => h,
        Err(TraceError::Io(e)) => {
            eprintln!("elb check: cannot read {}: {e}", path.display());
            return IO;
        }
        Err(e) => {
            eprintln!("elb check: {}: {e}", path.display());
            return USAGE;
        }
    };
    let report = check_history(&history);
    for m in &report.malformed {
        println!("{m}");
    }
    for v in &report.violations {
        println!("{v}");
    }
    println!(
        "{} operations, {} malformed, {} violations",
        history.len(),
        report.malformed.len(),
        report.violations.len()
    );
    if report.is_clean() {
        PASS
    } else {
        VIOLATION
    }
}

fn cmd_schedules(args: &ScheduleArgs) -> u8 {
    let selected: Vec<Scenario> = if args.scenario == "all" {
        Scenario::ALL.to_vec()
    } else {
        match args.scenario.parse() {
            Ok(s) => vec![s],
            Err(e) => {
                eprintln!("elb schedules: {e}");
                return USAGE;
            }
        }
    };
    let options = ScenarioOptions {
        preemption_bound: args.bound,
        seed: args.seed,
        samples: args.samples,
        exhaustive_ops: args.exhaustive_ops,
        ..ScenarioOptions::default()
    };
    if let Some(text) = &args.replay {
        let [scenario] = selected[..] else {
            eprintln!("elb schedules: --replay needs a single scenario");
            return USAGE;
        };
        let schedule = match parse_schedule(text) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("elb schedules: {e}");
                return USAGE;
            }
        };
        return match scenarios::replay(scenario, &schedule, options.step_limit) {
            Ok(()) => {
                println!("{scenario}: schedule {} passes", format_schedule(&schedule));
                PASS
            }
            Err(e) if e.ends_with("is not replayable") => {
                eprintln!("elb schedules: {e}");
                USAGE
            }
            Err(e) => {
                println!("{scenario}: VIOLATION: {e}");
                VIOLATION
            }
        };
    }
    let mut code = PASS;
    for s in selected {
        let report = run_scenario(s, &options);
        println!("{report}");
        if !report.passed() {
            code = VIOLATION;
        }
    }
    code
}

fn cmd_bench(args: &BenchArgs) -> u8 {
    let mut config = run_config(&args.workload, 1, ReclaimMode::Retire);
    config.duration = args.duration_ms.map(Duration::from_millis);
    match bench(&config, &args.threads) {
        Ok(rows) => {
            println!("{}", BenchRow::HEADER);
            for r in rows {
                println!("{r}");
            }
            PASS
        }
        Err(e) => {
            eprintln!("elb bench: {e}");
            harness_code(&e)
        }
    }
}

fn cmd_selftest() -> u8 {
    let mut failed = 0;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    };
    for (k, d, s) in [(3, 4, 2), (32, 32, 8)] {
        let config = RunConfig {
            tree: TreeConfig { order: k, leaf_capacity: d, min_size: s },
            threads: 4,
            ops: 20_000,
            range: 512,
            ..RunConfig::default()
        };
        match stress(&config) {
            Ok(o) => report(
                &format!("stress K={k} D={d} S={s}"),
                o.passed(),
                format!("{} ops, {} rebalances", o.history.len(), o.stats.completed),
            ),
            Err(e) => report("stress", false, e.to_string()),
        }
    }
    let options =
        ScenarioOptions { preemption_bound: Some(2), samples: 200, exhaustive_ops: 2, ..ScenarioOptions::default() };
    for s in Scenario::ALL {
        let r = run_scenario(s, &options);
        report(&format!("schedules {s}"), r.passed(), format!("{} schedules", r.schedules));
    }
    if failed == 0 {
        PASS
    } else {
        VIOLATION
    }
}
