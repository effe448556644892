use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn elb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elb")).args(args).output().expect("run elb")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_stress(trace: &Path, threads: &str) -> Output {
    elb(&[
        "stress",
        "--order=3",
        "--leaf-cap=4",
        "--min-size=2",
        "--threads",
        threads,
        "--ops=2000",
        "--range=100",
        "--seed=9",
        "--trace",
        trace.to_str().unwrap(),
    ])
}

#[test]
fn single_thread_stress_traces_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    assert_eq!(code(&small_stress(&a, "1")), 0);
    assert_eq!(code(&small_stress(&b, "1")), 0);
    let (a, b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn concurrent_trace_checks_clean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tsv");
    let out = small_stress(&path, "4");
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let out = elb(&["check", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("8000 operations, 0 malformed, 0 violations"));
}

#[test]
fn edited_traces_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.tsv");
    let write = |lines: &[&str]| fs::write(&path, lines.join("\n") + "\n").unwrap();

    // a remove returns a key nobody inserted
    write(&["0\tinsert\t5\t5\t0\t1\t1", "0\tremove\t1\t9\t2\t3\t7"]);
    assert_eq!(code(&elb(&["check", path.to_str().unwrap()])), 1);

    // the same insert removed twice
    write(&["0\tinsert\t5\t5\t0\t1\t1", "0\tremove\t5\t5\t2\t3\t5", "1\tremove\t5\t5\t4\t5\t5"]);
    assert_eq!(code(&elb(&["check", path.to_str().unwrap()])), 1);

    // response before invocation
    write(&["0\tinsert\t5\t5\t3\t1\t1"]);
    assert_eq!(code(&elb(&["check", path.to_str().unwrap()])), 1);

    // the unedited version is fine
    write(&["0\tinsert\t5\t5\t0\t1\t1", "0\tremove\t5\t5\t2\t3\t5"]);
    assert_eq!(code(&elb(&["check", path.to_str().unwrap()])), 0);

    // not a trace at all
    write(&["hello"]);
    assert_eq!(code(&elb(&["check", path.to_str().unwrap()])), 2);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&elb(&[])), 2);
    assert_eq!(code(&elb(&["frobnicate"])), 2);
    assert_eq!(code(&elb(&["--help"])), 0);
    assert_eq!(code(&elb(&["stress", "--mix", "1:2"])), 2);
    assert_eq!(code(&elb(&["stress", "--order=2", "--ops=10"])), 2);
    assert_eq!(code(&elb(&["stress", "--leaf-cap=4", "--min-size=3", "--ops=10"])), 2);
    assert_eq!(code(&elb(&["stress", "--threads=0", "--ops=10"])), 2);
    assert_eq!(code(&elb(&["schedules", "no-such-scenario"])), 2);
    assert_eq!(code(&elb(&["check", "/nonexistent/trace.tsv"])), 3);
    let out = elb(&["stress", "--ops=10", "--trace", "/nonexistent/dir/t.tsv"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bench_prints_one_row_per_thread_count() {
    let out = elb(&["bench", "--threads=1,2", "--ops=500", "--range=200"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "threads\tops\tseconds\tops_per_sec\trebalances");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1\t500\t"));
    assert!(lines[2].starts_with("2\t1000\t"));
    assert_eq!(code(&elb(&["bench", "--duration-ms=0"])), 2);
    assert_eq!(code(&elb(&["bench", "--threads=0"])), 2);
}

#[test]
fn schedule_replay() {
    let out = elb(&["schedules", "helper-step2", "--replay", "0,0,1"]);
    assert!(matches!(code(&out), 0 | 1), "{}", stdout(&out));
    assert_eq!(code(&elb(&["schedules", "helper-step2", "--replay", "x"])), 2);
    assert_eq!(code(&elb(&["schedules", "all", "--replay", "0"])), 2);
}
