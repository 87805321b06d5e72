//! The two ends of the pipeline: event capture into a directory queue, and
//! conversion of queued messages into passive-check command strings written
//! to the monitoring engine's command pipe.
//!
//! The rendered command line is exactly
//!
//! ```text
//! [<timestamp>] PROCESS_SERVICE_CHECK_RESULT;<host>;<service>;<code>;<output>\n
//! ```
//!
//! with the standard status codes OK=0, WARNING=1, CRITICAL=2, UNKNOWN=3.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use thiserror::Error;

use crate::backoff::Backoff;
use crate::dirq::{poison_path_for, DirQueue, DirqError, ElementName};
use crate::message::{Message, MessageError};
use crate::metric::{MetricError, MetricEvent};

/// Longest line handed to the command pipe in one write. FIFO writes up to
/// this size are atomic; longer lines are truncated with a warning.
pub const MAX_PIPE_LINE: usize = 4096;

#[derive(Debug, Error)]
pub enum NagiosError {
    #[error(transparent)]
    Metric(#[from] MetricError),

    #[error(transparent)]
    Message(#[from] MessageError),

    #[error(transparent)]
    Dirq(#[from] DirqError),

    #[error("command pipe {path}: {source}")]
    Pipe { path: PathBuf, source: std::io::Error },
}

/// One passive service check result, ready to render.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassiveCheck {
    pub timestamp: u64,
    pub host: String,
    pub service: String,
    pub code: u8,
    pub output: String,
}

impl PassiveCheck {
    /// Renders the external-command line, newline included.
    pub fn render(&self) -> String {
        format!(
            "[{}] PROCESS_SERVICE_CHECK_RESULT;{};{};{};{}\n",
            self.timestamp, self.host, self.service, self.code, self.output
        )
    }
}

/// Replaces the characters that would corrupt the command line: field
/// separators become commas, line breaks become spaces. Idempotent.
pub fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            ';' => ',',
            '\n' | '\r' => ' ',
            other => other,
        })
        .collect()
}

/// Converts an event to its passive-check form. The single-line output is
/// the event summary; details do not fit a passive check and are dropped.
pub fn to_passive(event: &MetricEvent) -> PassiveCheck {
    PassiveCheck {
        timestamp: event.timestamp(),
        host: sanitize(event.host()),
        service: sanitize(event.service()),
        code: event.status().code(),
        output: sanitize(event.summary()),
    }
}

/// Captures one event from the monitoring engine's exported variables into
/// the queue: validate, render the block format, wrap in the canonical
/// envelope, enqueue.
pub fn capture(
    env: &HashMap<String, String>,
    queue_path: &Path,
) -> Result<ElementName, NagiosError> {
    let event = MetricEvent::from_env(env)?;
    let message = event.to_message();
    let queue = DirQueue::open(queue_path)?;
    Ok(queue.add(&message.serialize())?)
}

/// Counters reported by [`run`].
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Mq2NagiosReport {
    /// Lines written to the command pipe.
    pub emitted: u64,
    /// Undecodable elements moved to the poison queue.
    pub poison: u64,
}

/// Configuration of the queue-to-command-pipe loop.
#[derive(Debug, Clone)]
pub struct Mq2NagiosConfig {
    pub queue: PathBuf,
    /// Command pipe path; a regular file is accepted for testing.
    pub pipe: PathBuf,
    /// Drain once and return instead of running forever.
    pub once: bool,
    pub poison: Option<PathBuf>,
    pub retry_initial: Duration,
    pub retry_max: Duration,
}

impl Mq2NagiosConfig {
    pub fn new(queue: impl Into<PathBuf>, pipe: impl Into<PathBuf>) -> Self {
        Mq2NagiosConfig {
            queue: queue.into(),
            pipe: pipe.into(),
            once: false,
            poison: None,
            retry_initial: Duration::from_millis(500),
            retry_max: Duration::from_secs(30),
        }
    }
}

/// Drains the queue into the command pipe.
///
/// Per element: lock, decode, render, write the whole line in a single
/// write call, and only then remove. Decode failures go to the poison
/// queue; write failures unlock the element and retry with backoff, so a
/// dead pipe never loses events.
pub fn run(config: &Mq2NagiosConfig, stop: &AtomicBool) -> Result<Mq2NagiosReport, NagiosError> {
    let queue = DirQueue::open(&config.queue)?;
    let poison_path =
        config.poison.clone().unwrap_or_else(|| poison_path_for(&config.queue));
    let mut poison: Option<DirQueue> = None;
    let mut report = Mq2NagiosReport::default();
    let mut backoff = Backoff::new(config.retry_initial, config.retry_max);
    let mut pipe = open_pipe(&config.pipe)?;

    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let mut wrote_any = false;
        let mut write_failed = false;
        for name in queue.iter()? {
            let name = name?;
            if stop.load(Ordering::Relaxed) {
                break;
            }
            if !queue.lock(&name)? {
                continue;
            }
            let payload = match queue.get(&name) {
                Ok(p) => p,
                Err(_) => {
                    let _ = queue.unlock(&name);
                    continue;
                }
            };

            let line = match decode_line(&payload) {
                Ok(line) => line,
                Err(e) => {
                    log::warn!("mq2nagios: poisoning undecodable element {name}: {e}");
                    if poison.is_none() {
                        poison = Some(DirQueue::open(&poison_path)?);
                    }
                    poison.as_ref().unwrap().add(&payload)?;
                    queue.remove(&name)?;
                    report.poison += 1;
                    continue;
                }
            };

            match write_line(&mut pipe, &line) {
                Ok(()) => {
                    // The line is in the pipe; only now does the element go.
                    queue.remove(&name)?;
                    report.emitted += 1;
                    wrote_any = true;
                    backoff.reset();
                }
                Err(e) => {
                    log::warn!("mq2nagios: pipe write failed, element kept: {e}");
                    queue.unlock(&name)?;
                    write_failed = true;
                    break;
                }
            }
        }

        if write_failed {
            if config.once {
                break;
            }
            // The reader may have gone away; back off and reopen.
            crate::backoff::sleep_interruptible(backoff.next_delay(), stop);
            match open_pipe(&config.pipe) {
                Ok(p) => pipe = p,
                Err(e) => log::warn!("mq2nagios: cannot reopen pipe: {e}"),
            }
            continue;
        }
        if config.once {
            break;
        }
        if !wrote_any {
            crate::backoff::sleep_interruptible(Duration::from_millis(200), stop);
        }
    }
    Ok(report)
}

fn open_pipe(path: &Path) -> Result<std::fs::File, NagiosError> {
    OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|source| NagiosError::Pipe { path: path.to_path_buf(), source })
}

/// Decodes an element payload down to a rendered passive-check line.
fn decode_line(payload: &[u8]) -> Result<String, NagiosError> {
    let message = Message::deserialize(payload)?;
    let event = MetricEvent::from_message(&message)?;
    let mut line = to_passive(&event).render();
    if line.len() > MAX_PIPE_LINE {
        log::warn!(
            "mq2nagios: truncating {}-byte line to {MAX_PIPE_LINE} (pipe atomicity limit)",
            line.len()
        );
        let mut cut = MAX_PIPE_LINE - 1;
        while !line.is_char_boundary(cut) {
            cut -= 1;
        }
        line.truncate(cut);
        line.push('\n');
    }
    Ok(line)
}

/// One write call for the whole line; a short write counts as failure so
/// the element is retried rather than half-emitted.
fn write_line(pipe: &mut std::fs::File, line: &str) -> std::io::Result<()> {
    let n = pipe.write(line.as_bytes())?;
    if n != line.len() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::WriteZero,
            format!("short write: {n} of {} bytes", line.len()),
        ));
    }
    pipe.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::MetricStatus;
    use std::sync::atomic::AtomicBool;

    fn event(
        host: &str,
        service: &str,
        status: MetricStatus,
        ts: u64,
        summary: &str,
    ) -> MetricEvent {
        MetricEvent::new(host, service, status, ts, summary, "").unwrap()
    }

    #[test]
    fn passive_check_renders_the_exact_template() {
        let e = event("wn01.example.org", "org.wlcg.CE-JobSubmit", MetricStatus::Ok, 1433116800, "job ok");
        assert_eq!(
            to_passive(&e).render(),
            "[1433116800] PROCESS_SERVICE_CHECK_RESULT;wn01.example.org;org.wlcg.CE-JobSubmit;0;job ok\n"
        );
    }

    #[test]
    fn critical_maps_to_code_two() {
        let e = event("h", "s", MetricStatus::Critical, 7, "bad");
        assert_eq!(to_passive(&e).code, 2);
        assert!(to_passive(&e).render().contains(";2;"));
    }

    #[test]
    fn sanitization_replaces_separators_and_newlines() {
        assert_eq!(sanitize("a;b\nc"), "a,b c");
        // Idempotence.
        assert_eq!(sanitize(&sanitize("a;b\nc")), sanitize("a;b\nc"));
        // Summaries are single-line by construction, so only the separator
        // substitution can fire there; hosts are unconstrained and get both.
        let e = MetricEvent::new("h;x\ny", "s", MetricStatus::Ok, 1, "a;b", "").unwrap();
        assert_eq!(to_passive(&e).host, "h,x y");
        assert_eq!(to_passive(&e).output, "a,b");
    }

    #[test]
    fn capture_round_trips_through_the_queue() {
        let dir = tempfile::tempdir().unwrap();
        let queue_path = dir.path().join("q");
        let env: HashMap<String, String> = [
            ("NAGIOS_HOSTNAME", "wn01.example.org"),
            ("NAGIOS_SERVICEDESC", "org.wlcg.CE-JobSubmit"),
            ("NAGIOS_SERVICESTATE", "OK"),
            ("NAGIOS_TIMET", "1433116800"),
            ("NAGIOS_SERVICEOUTPUT", "job ok"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();

        let name = capture(&env, &queue_path).unwrap();
        let queue = DirQueue::open(&queue_path).unwrap();
        assert_eq!(queue.count().unwrap(), 1);
        assert!(queue.lock(&name).unwrap());
        let payload = queue.get(&name).unwrap();
        let message = Message::deserialize(&payload).unwrap();
        let events = MetricEvent::from_message(&message).unwrap();
        assert_eq!(events.host(), "wn01.example.org");
        assert_eq!(events.timestamp(), 1433116800);

        // Second capture gets a distinct name.
        queue.unlock(&name).unwrap();
        let second = capture(&env, &queue_path).unwrap();
        assert_ne!(name, second);
        assert_eq!(queue.count().unwrap(), 2);
    }

    #[test]
    fn capture_with_bad_env_leaves_queue_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let queue_path = dir.path().join("q");
        let env = HashMap::new();
        assert!(capture(&env, &queue_path).is_err());
        assert!(!queue_path.exists() || DirQueue::open(&queue_path).unwrap().count().unwrap() == 0);
    }

    #[test]
    fn mq2nagios_emits_in_queue_order_and_empties_the_queue() {
        let dir = tempfile::tempdir().unwrap();
        let queue_path = dir.path().join("q");
        let queue = DirQueue::open(&queue_path).unwrap();
        for i in 0..3 {
            let e = event("h", "svc", MetricStatus::Warning, 100 + i, &format!("s{i}"));
            queue.add(&e.to_message().serialize()).unwrap();
        }
        let out = dir.path().join("pipe.txt");
        std::fs::write(&out, b"").unwrap();

        let mut config = Mq2NagiosConfig::new(&queue_path, &out);
        config.once = true;
        let report = run(&config, &AtomicBool::new(false)).unwrap();
        assert_eq!(report, Mq2NagiosReport { emitted: 3, poison: 0 });
        assert_eq!(queue.count().unwrap(), 0);

        let text = std::fs::read_to_string(&out).unwrap();
        let expected = (0..3)
            .map(|i| format!("[{}] PROCESS_SERVICE_CHECK_RESULT;h;svc;1;s{i}\n", 100 + i))
            .collect::<String>();
        assert_eq!(text, expected);
    }

    #[test]
    fn garbage_elements_go_to_poison_and_the_rest_flow() {
        let dir = tempfile::tempdir().unwrap();
        let queue_path = dir.path().join("q");
        let queue = DirQueue::open(&queue_path).unwrap();
        queue.add(b"not json at all").unwrap();
        let e = event("h", "svc", MetricStatus::Ok, 5, "fine");
        queue.add(&e.to_message().serialize()).unwrap();

        let out = dir.path().join("pipe.txt");
        std::fs::write(&out, b"").unwrap();
        let mut config = Mq2NagiosConfig::new(&queue_path, &out);
        config.once = true;
        let report = run(&config, &AtomicBool::new(false)).unwrap();
        assert_eq!(report, Mq2NagiosReport { emitted: 1, poison: 1 });
        assert_eq!(DirQueue::open(poison_path_for(&queue_path)).unwrap().count().unwrap(), 1);
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text, "[5] PROCESS_SERVICE_CHECK_RESULT;h;svc;0;fine\n");
    }

    #[test]
    fn missing_pipe_removes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let queue_path = dir.path().join("q");
        let queue = DirQueue::open(&queue_path).unwrap();
        let e = event("h", "svc", MetricStatus::Ok, 5, "kept");
        queue.add(&e.to_message().serialize()).unwrap();

        let mut config = Mq2NagiosConfig::new(&queue_path, dir.path().join("nonexistent"));
        config.once = true;
        assert!(matches!(run(&config, &AtomicBool::new(false)), Err(NagiosError::Pipe { .. })));
        assert_eq!(queue.count().unwrap(), 1);
    }

    #[test]
    fn unwritable_pipe_keeps_elements_queued() {
        let dir = tempfile::tempdir().unwrap();
        let queue_path = dir.path().join("q");
        let queue = DirQueue::open(&queue_path).unwrap();
        let e = event("h", "svc", MetricStatus::Ok, 5, "kept");
        queue.add(&e.to_message().serialize()).unwrap();

        // A directory opens for neither writing nor appending.
        let out = dir.path().join("dir-pipe");
        std::fs::create_dir(&out).unwrap();
        let mut config = Mq2NagiosConfig::new(&queue_path, &out);
        config.once = true;
        assert!(run(&config, &AtomicBool::new(false)).is_err());
        assert_eq!(queue.count().unwrap(), 1);
    }

    #[test]
    fn oversized_output_is_truncated_with_trailing_newline() {
        let big = "x".repeat(MAX_PIPE_LINE);
        let e = MetricEvent::new("h", "s", MetricStatus::Ok, 1, big, "").unwrap();
        let payload = e.to_message().serialize();
        let line = decode_line(&payload).unwrap();
        assert_eq!(line.len(), MAX_PIPE_LINE);
        assert!(line.ends_with('\n'));
    }
}
