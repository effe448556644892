//! One PASS/FAIL line per acceptance criterion, written straight to stdout so
//! the lines show up without `--nocapture`.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use elb_tree::harness::scenarios::ScenarioOptions;
use elb_tree::harness::{progress_run, run_scenario, stress, RunConfig, Scenario, StressOutcome, Workload};
use elb_tree::verification::{check_history, oracle_apply, read_trace, write_trace, Clause};
use elb_tree::{Tree, TreeConfig};

// glibc malloc serialises threads on arena locks and can stall all of them
// for hundreds of milliseconds after a large free, which the progress check
// would report as a tree stall
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(n: u32, title: &str, started: Instant, v: &Verdict) {
    let mut out = std::io::stdout().lock();
    let tag = if v.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "{tag} criterion {n} ({title}, {:.1}s): {}", started.elapsed().as_secs_f64(), v.detail);
}

fn oracle_equivalence() -> Verdict {
    let mut failures = Vec::new();
    for (k, d, s) in [(3, 4, 2), (32, 32, 8)] {
        let config = RunConfig { tree: TreeConfig::new(k, d, s).unwrap(), range: 2000, ..RunConfig::default() };
        let tree = Tree::new(config.tree).unwrap();
        let mut model = BTreeSet::new();
        for (i, (kind, e1, e2)) in Workload::for_thread(&config, 0).take(100_000).enumerate() {
            let got = tree.apply(kind, e1, e2).unwrap().value;
            let want = oracle_apply(&mut model, kind, e1, e2);
            if got != want {
                failures.push(format!("K={k} D={d} S={s} step {i}: {kind}({e1}, {e2}) gave {got}, oracle {want}"));
                break;
            }
        }
        if tree.snapshot().unwrap() != model.iter().copied().collect::<Vec<_>>() {
            failures.push(format!("K={k} D={d} S={s}: final contents differ"));
        }
    }
    Verdict {
        pass: failures.is_empty(),
        detail: if failures.is_empty() { "2 x 100000 serial ops match the oracle".into() } else { failures.join("; ") },
    }
}

/// Criterion 2's runs: 21 seeds cycling through the three leaf configurations.
fn stress_runs() -> Vec<StressOutcome> {
    let configs = [(3, 4, 2), (32, 32, 8), (64, 64, 16)];
    (0..21u64)
        .map(|seed| {
            let (k, d, s) = configs[seed as usize % 3];
            let config = RunConfig {
                tree: TreeConfig::new(k, d, s).unwrap(),
                threads: 8,
                ops: 100_000,
                range: 4096,
                seed: seed + 1,
                ..RunConfig::default()
            };
            stress(&config).expect("valid config")
        })
        .collect()
}

fn structure(runs: &[StressOutcome]) -> Verdict {
    let bad: Vec<String> = runs
        .iter()
        .filter(|r| !r.structure.is_empty())
        .map(|r| format!("seed {}: {:?}", r.config.seed, &r.structure[..r.structure.len().min(3)]))
        .collect();
    let ops: usize = runs.iter().map(|r| r.history.len()).sum();
    Verdict {
        pass: bad.is_empty(),
        detail: if bad.is_empty() { format!("{} runs, {ops} ops, no structural violations", runs.len()) } else { bad.join("; ") },
    }
}

const ABSENT_SEARCH_FLIPPED: &str = "0\tinsert\t3\t3\t0\t1\t1\n0\tsearch\t5\t5\t2\t3\t5\n";
const FAILED_SEARCH_OVER_PRESENCE: &str = "0\tinsert\t5\t5\t0\t1\t1\n1\tsearch\t1\t9\t2\t3\t0\n";

fn interval_semantics(runs: &[StressOutcome]) -> Verdict {
    let mut problems = Vec::new();
    for r in runs {
        if !r.check.is_clean() || !r.final_state.is_empty() {
            problems.push(format!("seed {}: {} violations", r.config.seed, r.check.violations.len() + r.final_state.len()));
        }
        let mut buf = Vec::new();
        write_trace(&mut buf, &r.history).unwrap();
        if read_trace(&buf[..]).ok().as_ref() != Some(&r.history) {
            problems.push(format!("seed {}: trace does not read back exactly", r.config.seed));
        }
    }
    for (name, text, clause) in [
        ("flipped search", ABSENT_SEARCH_FLIPPED, Clause::ReturnedAbsentKey),
        ("failed search over presence", FAILED_SEARCH_OVER_PRESENCE, Clause::MissedPresentKey),
    ] {
        let report = check_history(&read_trace(text.as_bytes()).unwrap());
        if report.clauses() != vec![clause] {
            problems.push(format!("{name}: expected only clause {clause}, got {:?}", report.clauses()));
        }
    }
    Verdict {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!("{} traces clean and re-read exactly; both edited traces flagged (b) and (a)", runs.len())
        } else {
            problems.join("; ")
        },
    }
}

fn size_bound(runs: &[StressOutcome]) -> Verdict {
    let mut detail = Vec::new();
    let mut pass = true;
    for d in [4, 32, 64] {
        let of_d: Vec<_> = runs.iter().filter(|r| r.config.tree.leaf_capacity == d).collect();
        let total: usize = of_d.iter().map(|r| r.records.len()).sum();
        let bad: usize = of_d.iter().map(|r| r.size_bound_violations().len()).sum();
        pass &= bad == 0 && total > 0;
        let t = of_d[0].config.tree;
        detail.push(format!("D={d} S={}: {bad} of {total} outside [{}, {}]", t.min_size, t.balanced_lower(), t.balanced_upper()));
    }
    Verdict { pass, detail: detail.join(", ") }
}

fn preservation(runs: &[StressOutcome]) -> Verdict {
    let total: usize = runs.iter().map(|r| r.records.len()).sum();
    let bad: usize = runs.iter().map(|r| r.preservation_violations().len()).sum();
    Verdict { pass: bad == 0 && total > 0, detail: format!("{bad} of {total} rebalances changed the key multiset or subtrees") }
}

fn scenario_verdict(scenarios: &[Scenario], options: &ScenarioOptions) -> Verdict {
    let mut pass = true;
    let mut detail = Vec::new();
    for &s in scenarios {
        let r = run_scenario(s, options);
        pass &= r.passed() && (r.exhaustive || !s.is_exhaustive());
        detail.push(match &r.violation {
            None => match r.completed_ops {
                Some(n) => format!("{s}: others completed {n} ops"),
                None => format!("{s} {} schedules", r.schedules),
            },
            Some((_, msg)) => format!("{s} VIOLATION {msg}"),
        });
    }
    Verdict { pass, detail: detail.join(", ") }
}

fn exactly_once() -> Verdict {
    let protocol = [Scenario::ConcurrentBegin, Scenario::HelperStep1, Scenario::HelperStep2, Scenario::GrandparentReplaced];
    scenario_verdict(&protocol, &ScenarioOptions { preemption_bound: None, ..ScenarioOptions::default() })
}

fn progress() -> Verdict {
    let suspended = scenario_verdict(&[Scenario::Suspended], &ScenarioOptions::default());
    let config = RunConfig { tree: TreeConfig::new(3, 4, 2).unwrap(), threads: 4, range: 256, ..RunConfig::default() };
    let real = progress_run(&config, Duration::from_secs(30), Duration::from_millis(100)).expect("valid config");
    Verdict {
        pass: suspended.pass && real.is_clean(),
        detail: format!(
            "{}; real threads: {} ops in 30s, longest gap {:.1} ms, {} windows of 100 ms without completions",
            suspended.detail,
            real.completed_ops,
            real.longest_stall as f64 / 1e6,
            real.stall_windows.len()
        ),
    }
}

fn small_model() -> Verdict {
    let options = ScenarioOptions { preemption_bound: None, exhaustive_ops: 3, samples: 300, ..ScenarioOptions::default() };
    scenario_verdict(&[Scenario::SmallModel], &options)
}

#[test]
fn acceptance() {
    let mut all = true;
    let mut run = |n: u32, title: &str, f: &mut dyn FnMut() -> Verdict| {
        let started = Instant::now();
        let v = f();
        report(n, title, started, &v);
        all &= v.pass;
    };
    run(1, "oracle equivalence", &mut oracle_equivalence);
    let started = Instant::now();
    let runs = stress_runs();
    let _ = writeln!(std::io::stdout(), "stress: {} runs of 8 x 100000 ops in {:.1}s", runs.len(), started.elapsed().as_secs_f64());
    run(2, "structure after stress", &mut || structure(&runs));
    run(3, "interval semantics", &mut || interval_semantics(&runs));
    run(4, "rebalance size bound", &mut || size_bound(&runs));
    run(5, "key preservation", &mut || preservation(&runs));
    drop(runs);
    run(6, "exactly-once rebalance", &mut exactly_once);
    run(7, "helping and progress", &mut progress);
    run(8, "small-model brute force", &mut small_model);
    assert!(all, "some acceptance criterion failed");
}
