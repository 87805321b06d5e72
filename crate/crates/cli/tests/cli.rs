//! Black-box tests of the `gridpipe` binary: exit codes, help surfaces,
//! queue maintenance commands and a forwarding run against a spawned
//! broker-sim process.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn gridpipe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridpipe"))
}

fn run(args: &[&str]) -> Output {
    gridpipe().args(args).env_clear().env("PATH", std::env::var("PATH").unwrap()).output().unwrap()
}

fn capture_env(i: usize) -> HashMap<String, String> {
    [
        ("NAGIOS_HOSTNAME", format!("wn{i:02}.example.org")),
        ("NAGIOS_SERVICEDESC", "org.wlcg.CE-JobSubmit".to_string()),
        ("NAGIOS_SERVICESTATE", "OK".to_string()),
        ("NAGIOS_TIMET", format!("{}", 1_433_116_800 + i)),
        ("NAGIOS_SERVICEOUTPUT", format!("job ok {i}")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn run_capture(queue: &Path, i: usize) -> Output {
    gridpipe()
        .args(["capture", "--queue"])
        .arg(queue)
        .env_clear()
        .envs(capture_env(i))
        .output()
        .unwrap()
}

#[test]
fn every_subcommand_honors_help() {
    for sub in
        ["capture", "mq2nagios", "forward", "supervise", "broker-sim", "dirq", "selftest"]
    {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help must exit 0");
        assert!(!out.stdout.is_empty());
    }
    assert!(run(&["--help"]).status.success());
}

#[test]
fn unknown_flags_exit_2_with_usage() {
    let out = run(&["--definitely-not-a-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "stderr was: {err}");

    let out = run(&["dirq", "count"]); // missing PATH
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dirq_count_on_empty_queue_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let queue = dir.path().join("q");
    let out = run(&["dirq", "count", queue.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "0\n");
}

#[test]
fn capture_adds_one_element_and_bad_env_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let queue = dir.path().join("q");

    let out = run_capture(&queue, 1);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let out = run(&["dirq", "count", queue.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "1\n");

    // Remove one required variable: the queue must stay untouched.
    let mut env = capture_env(2);
    env.remove("NAGIOS_SERVICESTATE");
    let out = gridpipe()
        .args(["capture", "--queue"])
        .arg(&queue)
        .env_clear()
        .envs(env)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("NAGIOS_SERVICESTATE"),
        "diagnostic must name the missing variable"
    );
    let out = run(&["dirq", "count", queue.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "1\n");
}

#[test]
fn dirq_inspect_lists_and_dumps_elements() {
    let dir = tempfile::tempdir().unwrap();
    let queue = dir.path().join("q");
    run_capture(&queue, 3);

    let out = run(&["dirq", "inspect", queue.to_str().unwrap()]);
    assert!(out.status.success());
    let listing = String::from_utf8(out.stdout).unwrap();
    let name = listing.trim();
    assert_eq!(name.len(), 8 + 1 + 14, "bucket/file form: {name}");

    let out = run(&["dirq", "inspect", queue.to_str().unwrap(), name]);
    assert!(out.status.success());
    let payload = String::from_utf8_lossy(&out.stdout);
    assert!(payload.contains("wn03.example.org"), "payload: {payload}");

    // Dumping leaves the element in place.
    let out = run(&["dirq", "count", queue.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "1\n");
}

#[test]
fn dirq_purge_reports_its_work() {
    let dir = tempfile::tempdir().unwrap();
    let queue = dir.path().join("q");
    run_capture(&queue, 4);
    let out = run(&["dirq", "purge", queue.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "removed 0 tmp, unlocked 0\n");
}

#[test]
fn mq2nagios_once_emits_passive_checks_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let queue = dir.path().join("q");
    run_capture(&queue, 5);
    run_capture(&queue, 6);
    let pipe = dir.path().join("pipe.txt");
    std::fs::write(&pipe, b"").unwrap();

    let out = run(&[
        "mq2nagios",
        "--queue",
        queue.to_str().unwrap(),
        "--pipe",
        pipe.to_str().unwrap(),
        "--once",
        "--stats-json",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "{\"emitted\":2,\"poison\":0}\n");

    let text = std::fs::read_to_string(&pipe).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("[1433116805] PROCESS_SERVICE_CHECK_RESULT;wn05.example.org;"));
}

#[test]
fn forward_usage_errors_exit_2() {
    // No endpoints at all.
    let out = run(&["forward"]);
    assert_eq!(out.status.code(), Some(2));

    // Bad URI scheme.
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q");
    let out = run(&[
        "forward",
        "--incoming-dirq",
        q.to_str().unwrap(),
        "--outgoing-broker",
        "http://example.org:80/queue/x",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // TLS endpoint without TLS material.
    let out = run(&[
        "forward",
        "--incoming-dirq",
        q.to_str().unwrap(),
        "--outgoing-broker",
        "stomp+tls://localhost:61613/queue/x",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Broken config file.
    let config = dir.path().join("bad.ini");
    std::fs::write(&config, "[forward f]\nnot a key value line\n").unwrap();
    let out = run(&["forward", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn forward_moves_captures_into_a_spawned_broker_sim() {
    let dir = tempfile::tempdir().unwrap();
    let queue = dir.path().join("q");
    run_capture(&queue, 7);
    run_capture(&queue, 8);

    let mut broker = gridpipe()
        .args(["broker-sim", "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let port = {
        let stdout = broker.stdout.take().unwrap();
        let mut line = String::new();
        BufReader::new(stdout).read_line(&mut line).unwrap();
        // "broker-sim listening on 127.0.0.1:PORT"
        line.trim().rsplit(':').next().unwrap().parse::<u16>().unwrap()
    };

    let out = run(&[
        "forward",
        "--incoming-dirq",
        queue.to_str().unwrap(),
        "--outgoing-broker",
        &format!("stomp://127.0.0.1:{port}/queue/cli-test"),
        "--reliable",
        "--stats-json",
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout),
        "{\"forwarded\":2,\"retried\":0,\"failed\":0}\n"
    );

    let out = run(&["dirq", "count", queue.to_str().unwrap()]);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "0\n");

    unsafe {
        libc::kill(broker.id() as libc::pid_t, libc::SIGTERM);
    }
    let status = broker.wait().unwrap();
    assert!(status.success(), "broker-sim should exit cleanly on SIGTERM");
}

#[test]
fn selftest_passes_on_loopback() {
    let out = run(&["selftest", "--count", "10"]);
    assert!(
        out.status.success(),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn supervise_requires_services_in_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("empty.ini");
    std::fs::write(&config, "[queue q]\npath = /tmp/unused\n").unwrap();
    let out = run(&["supervise", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
