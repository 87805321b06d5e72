//! Service supervision: keeps forwarder processes (or anything else)
//! permanently running, restarting crashed children with capped exponential
//! backoff and giving up only when a rolling restart-rate window is blown.
//!
//! One supervision loop owns all child state; [`Supervisor::status`] reads a
//! shared snapshot and is safe from any thread.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::backoff::Backoff;

/// Default grace period between SIGTERM and SIGKILL at shutdown.
pub const DEFAULT_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum SupervisorError {
    #[error("duplicate service name {0:?}")]
    DuplicateName(String),

    #[error("service {0:?} has an empty command")]
    EmptyCommand(String),

    #[error("service {name:?}: backoff initial exceeds maximum")]
    BadBackoff { name: String },

    #[error("cannot open log file {path}: {source}")]
    LogFile { path: PathBuf, source: std::io::Error },
}

/// Whether a service is meant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Running,
    Stopped,
}

/// Declarative description of one supervised service.
#[derive(Debug, Clone)]
pub struct ServiceSpec {
    pub name: String,
    /// Program and arguments.
    pub command: Vec<String>,
    pub expected: Expected,
    pub backoff_initial: Duration,
    pub backoff_multiplier: f64,
    pub backoff_max: Duration,
    /// Restarts allowed per rolling window; 0 means unlimited.
    pub max_restarts: u32,
    pub window: Duration,
}

impl ServiceSpec {
    /// A spec with the default restart policy: 1 s initial backoff doubling
    /// to 60 s, at most 10 restarts per 300 s window.
    pub fn new(name: impl Into<String>, command: Vec<String>) -> Self {
        ServiceSpec {
            name: name.into(),
            command,
            expected: Expected::Running,
            backoff_initial: Duration::from_secs(1),
            backoff_multiplier: 2.0,
            backoff_max: Duration::from_secs(60),
            max_restarts: 10,
            window: Duration::from_secs(300),
        }
    }
}

/// Lifecycle state of one service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServiceState {
    Starting,
    Up,
    BackingOff,
    Failed,
    Stopped,
}

/// Point-in-time view of one service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceStatus {
    pub state: ServiceState,
    pub pid: Option<u32>,
    pub restarts: u32,
    pub last_exit: Option<i32>,
}

/// Point-in-time view of the whole supervisor.
pub type SupervisorStatus = BTreeMap<String, ServiceStatus>;

/// Runtime options independent of any one service.
#[derive(Debug, Clone)]
pub struct SupervisorOptions {
    /// SIGTERM-to-SIGKILL grace at shutdown.
    pub grace: Duration,
    /// Directory receiving one `<service>.log` per service.
    pub log_dir: PathBuf,
}

impl Default for SupervisorOptions {
    fn default() -> Self {
        SupervisorOptions { grace: DEFAULT_GRACE, log_dir: PathBuf::from(".") }
    }
}

/// Handle to a running supervision loop.
pub struct Supervisor {
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

struct Shared {
    status: Mutex<SupervisorStatus>,
    stop: AtomicBool,
}

/// Runs supervision on the calling thread until `stop` is raised; returns
/// the final status snapshot.
pub fn supervise(
    specs: Vec<ServiceSpec>,
    options: SupervisorOptions,
    stop: Arc<AtomicBool>,
) -> Result<SupervisorStatus, SupervisorError> {
    let supervisor = Supervisor::start(specs, options)?;
    while !stop.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(50));
    }
    supervisor.stop();
    Ok(supervisor.join())
}

impl Supervisor {
    /// Validates the specs and starts the supervision loop on its own
    /// thread.
    pub fn start(
        specs: Vec<ServiceSpec>,
        options: SupervisorOptions,
    ) -> Result<Supervisor, SupervisorError> {
        let mut seen = std::collections::HashSet::new();
        for spec in &specs {
            if !seen.insert(spec.name.clone()) {
                return Err(SupervisorError::DuplicateName(spec.name.clone()));
            }
            if spec.command.is_empty() {
                return Err(SupervisorError::EmptyCommand(spec.name.clone()));
            }
            if spec.backoff_initial > spec.backoff_max {
                return Err(SupervisorError::BadBackoff { name: spec.name.clone() });
            }
        }

        let shared = Arc::new(Shared {
            status: Mutex::new(
                specs
                    .iter()
                    .map(|s| {
                        let state = match s.expected {
                            Expected::Running => ServiceState::Starting,
                            Expected::Stopped => ServiceState::Stopped,
                        };
                        (
                            s.name.clone(),
                            ServiceStatus { state, pid: None, restarts: 0, last_exit: None },
                        )
                    })
                    .collect(),
            ),
            stop: AtomicBool::new(false),
        });

        let loop_shared = Arc::clone(&shared);
        let thread = std::thread::Builder::new()
            .name("supervisor".to_string())
            .spawn(move || run_loop(specs, options, loop_shared))
            .expect("spawning supervisor thread");
        Ok(Supervisor { shared, thread: Some(thread) })
    }

    /// Snapshot of every service's state.
    pub fn status(&self) -> SupervisorStatus {
        self.shared.status.lock().unwrap().clone()
    }

    /// Signals the loop to terminate all children and wind down.
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
    }

    /// Waits for the loop to finish and returns the final snapshot.
    pub fn join(mut self) -> SupervisorStatus {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.shared.status.lock().unwrap().clone()
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        self.stop();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Per-service live state inside the loop.
struct Managed {
    spec: ServiceSpec,
    child: Option<Child>,
    backoff: Backoff,
    restart_at: Option<Instant>,
    /// Timestamps of recent restarts, pruned to the rolling window.
    restart_log: Vec<Instant>,
    state: ServiceState,
    restarts: u32,
    last_exit: Option<i32>,
}

impl Managed {
    fn new(spec: ServiceSpec) -> Self {
        let backoff = Backoff::with_multiplier(
            spec.backoff_initial,
            spec.backoff_max,
            spec.backoff_multiplier,
        );
        let state = match spec.expected {
            Expected::Running => ServiceState::Starting,
            Expected::Stopped => ServiceState::Stopped,
        };
        Managed {
            spec,
            child: None,
            backoff,
            restart_at: None,
            restart_log: Vec::new(),
            state,
            restarts: 0,
            last_exit: None,
        }
    }

    fn spawn(&mut self, log_dir: &std::path::Path) {
        let log_path = log_dir.join(format!("{}.log", self.spec.name));
        let log = OpenOptions::new().create(true).append(true).open(&log_path);
        let (out, err) = match log {
            Ok(f) => {
                let err = f.try_clone().map(Stdio::from).unwrap_or_else(|_| Stdio::null());
                (Stdio::from(f), err)
            }
            Err(e) => {
                log::warn!(
                    "supervisor: cannot open {} for {}: {e}",
                    log_path.display(),
                    self.spec.name
                );
                (Stdio::null(), Stdio::null())
            }
        };

        let mut command = Command::new(&self.spec.command[0]);
        command.args(&self.spec.command[1..]).stdin(Stdio::null()).stdout(out).stderr(err);
        match command.spawn() {
            Ok(child) => {
                log::info!("supervisor: {} started as pid {}", self.spec.name, child.id());
                self.child = Some(child);
                self.state = ServiceState::Up;
            }
            Err(e) => {
                // A spawn failure follows the same backoff path as an exit.
                log::warn!("supervisor: spawning {} failed: {e}", self.spec.name);
                self.last_exit = Some(127);
                self.schedule_restart();
            }
        }
    }

    /// Notes an exit (or spawn failure) and either schedules a restart or
    /// fails the service when the window budget is spent.
    fn schedule_restart(&mut self) {
        let now = Instant::now();
        self.restart_log.retain(|t| now.duration_since(*t) < self.spec.window);
        if self.spec.max_restarts > 0 && self.restart_log.len() >= self.spec.max_restarts as usize
        {
            log::error!(
                "supervisor: {} exceeded {} restarts per {:?}, giving up",
                self.spec.name,
                self.spec.max_restarts,
                self.spec.window
            );
            self.state = ServiceState::Failed;
            self.restart_at = None;
            return;
        }
        let delay = self.backoff.next_delay();
        self.restart_at = Some(now + delay);
        self.state = ServiceState::BackingOff;
    }

    fn tick(&mut self, log_dir: &std::path::Path) {
        match self.state {
            ServiceState::Starting => self.spawn(log_dir),
            ServiceState::Up => {
                let Some(child) = &mut self.child else {
                    self.state = ServiceState::Starting;
                    return;
                };
                match child.try_wait() {
                    Ok(Some(status)) => {
                        self.last_exit = exit_code(&status);
                        log::warn!(
                            "supervisor: {} (pid {}) exited with {:?}",
                            self.spec.name,
                            child.id(),
                            self.last_exit
                        );
                        self.child = None;
                        self.schedule_restart();
                    }
                    Ok(None) => {}
                    Err(e) => {
                        log::warn!("supervisor: wait on {} failed: {e}", self.spec.name);
                    }
                }
            }
            ServiceState::BackingOff => {
                if self.restart_at.is_some_and(|t| Instant::now() >= t) {
                    self.restart_at = None;
                    self.restarts += 1;
                    self.restart_log.push(Instant::now());
                    self.spawn(log_dir);
                }
            }
            ServiceState::Failed | ServiceState::Stopped => {}
        }
    }

    fn status(&self) -> ServiceStatus {
        ServiceStatus {
            state: self.state,
            pid: self.child.as_ref().map(Child::id),
            restarts: self.restarts,
            last_exit: self.last_exit,
        }
    }
}

fn run_loop(specs: Vec<ServiceSpec>, options: SupervisorOptions, shared: Arc<Shared>) {
    let mut managed: Vec<Managed> = specs.into_iter().map(Managed::new).collect();

    while !shared.stop.load(Ordering::SeqCst) {
        for m in &mut managed {
            m.tick(&options.log_dir);
        }
        publish(&shared, &managed);
        std::thread::sleep(Duration::from_millis(25));
    }

    // Graceful shutdown: SIGTERM, wait out the grace period, then SIGKILL.
    for m in &mut managed {
        if let Some(child) = &m.child {
            log::info!("supervisor: terminating {} (pid {})", m.spec.name, child.id());
            unsafe {
                libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
            }
        }
    }
    let deadline = Instant::now() + options.grace;
    loop {
        let mut alive = 0;
        for m in &mut managed {
            if let Some(child) = &mut m.child {
                match child.try_wait() {
                    Ok(Some(status)) => {
                        m.last_exit = exit_code(&status);
                        m.child = None;
                        m.state = ServiceState::Stopped;
                    }
                    Ok(None) => alive += 1,
                    Err(_) => alive += 1,
                }
            }
        }
        if alive == 0 || Instant::now() >= deadline {
            break;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
    for m in &mut managed {
        if let Some(child) = &mut m.child {
            log::warn!("supervisor: killing {} after grace period", m.spec.name);
            let _ = child.kill();
            let _ = child.wait();
            m.child = None;
            m.state = ServiceState::Stopped;
        }
        if m.state != ServiceState::Failed {
            m.state = ServiceState::Stopped;
        }
    }
    publish(&shared, &managed);
}

fn publish(shared: &Shared, managed: &[Managed]) {
    let mut status = shared.status.lock().unwrap();
    for m in managed {
        status.insert(m.spec.name.clone(), m.status());
    }
}

fn exit_code(status: &std::process::ExitStatus) -> Option<i32> {
    status.code().or_else(|| {
        #[cfg(unix)]
        {
            use std::os::unix::process::ExitStatusExt;
            status.signal().map(|s| 128 + s)
        }
        #[cfg(not(unix))]
        {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(name: &str, script: &str) -> ServiceSpec {
        ServiceSpec::new(name, vec!["/bin/sh".into(), "-c".into(), script.into()])
    }

    fn fast(mut spec: ServiceSpec) -> ServiceSpec {
        spec.backoff_initial = Duration::from_millis(10);
        spec.backoff_max = Duration::from_millis(40);
        spec
    }

    fn options(dir: &std::path::Path) -> SupervisorOptions {
        SupervisorOptions { grace: Duration::from_secs(1), log_dir: dir.to_path_buf() }
    }

    fn pid_alive(pid: u32) -> bool {
        unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
    }

    fn wait_for<F: FnMut() -> bool>(mut f: F, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if f() {
                return true;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        false
    }

    #[test]
    fn clean_shutdown_terminates_children_gracefully() {
        let dir = tempfile::tempdir().unwrap();
        let supervisor =
            Supervisor::start(vec![fast(sh("sleeper", "sleep 30"))], options(dir.path()))
                .unwrap();
        assert!(wait_for(
            || supervisor.status()["sleeper"].state == ServiceState::Up,
            Duration::from_secs(5)
        ));
        let pid = supervisor.status()["sleeper"].pid.unwrap();
        assert!(pid_alive(pid));

        supervisor.stop();
        let status = supervisor.join();
        assert_eq!(status["sleeper"].state, ServiceState::Stopped);
        assert!(!pid_alive(pid), "child must not survive shutdown");
    }

    #[test]
    fn crash_loop_fails_after_exactly_max_restarts() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = fast(sh("flappy", "exit 3"));
        spec.max_restarts = 3;
        let supervisor = Supervisor::start(vec![spec], options(dir.path())).unwrap();
        assert!(wait_for(
            || supervisor.status()["flappy"].state == ServiceState::Failed,
            Duration::from_secs(10)
        ));
        let status = supervisor.status();
        assert_eq!(status["flappy"].restarts, 3, "exactly three restarts, then failure");
        assert_eq!(status["flappy"].last_exit, Some(3));
        supervisor.stop();
        let final_status = supervisor.join();
        assert_eq!(final_status["flappy"].state, ServiceState::Failed);
    }

    #[test]
    fn one_crash_does_not_disturb_the_other_service() {
        let dir = tempfile::tempdir().unwrap();
        let mut crashy = fast(sh("crashy", "exit 1"));
        crashy.max_restarts = 2;
        let supervisor = Supervisor::start(
            vec![fast(sh("steady", "sleep 30")), crashy],
            options(dir.path()),
        )
        .unwrap();
        assert!(wait_for(
            || supervisor.status()["steady"].state == ServiceState::Up,
            Duration::from_secs(5)
        ));
        let steady_pid = supervisor.status()["steady"].pid;
        assert!(wait_for(
            || supervisor.status()["crashy"].state == ServiceState::Failed,
            Duration::from_secs(10)
        ));
        assert_eq!(supervisor.status()["steady"].pid, steady_pid, "fault isolation");
        supervisor.stop();
        supervisor.join();
    }

    #[test]
    fn expected_stopped_services_never_start() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = sh("parked", "exit 0");
        spec.expected = Expected::Stopped;
        let supervisor = Supervisor::start(vec![spec], options(dir.path())).unwrap();
        std::thread::sleep(Duration::from_millis(150));
        let status = supervisor.status();
        assert_eq!(status["parked"].state, ServiceState::Stopped);
        assert_eq!(status["parked"].pid, None);
        supervisor.stop();
        supervisor.join();
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let specs = vec![sh("twin", "exit 0"), sh("twin", "exit 0")];
        assert!(matches!(
            Supervisor::start(specs, SupervisorOptions::default()),
            Err(SupervisorError::DuplicateName(_))
        ));
    }

    #[test]
    fn child_output_is_captured_per_service() {
        let dir = tempfile::tempdir().unwrap();
        let supervisor = Supervisor::start(
            vec![fast(sh("talker", "echo hello-from-child; sleep 30"))],
            options(dir.path()),
        )
        .unwrap();
        let log_path = dir.path().join("talker.log");
        assert!(wait_for(
            || std::fs::read_to_string(&log_path).is_ok_and(|s| s.contains("hello-from-child")),
            Duration::from_secs(5)
        ));
        supervisor.stop();
        supervisor.join();
    }
}
