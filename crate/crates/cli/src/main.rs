//! `gridpipe`: one binary for every piece of the monitoring message
//! pipeline — event capture, queue maintenance, forwarding daemons, the
//! passive-check emitter, service supervision, an embedded broker simulator
//! and an end-to-end selftest.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use gridpipe_core::broker_sim::{self, BrokerConfig, Fault};
use gridpipe_core::config::PipelineConfig;
use gridpipe_core::dirq::DirQueue;
use gridpipe_core::forwarder::{self, BrokerUri, ForwarderConfig, Sink, Source};
use gridpipe_core::nagios::{self, Mq2NagiosConfig};
use gridpipe_core::stomp::tls::{ServerTlsConfig, TlsConfig};
use gridpipe_core::stomp::AckMode;
use gridpipe_core::supervisor::{self, SupervisorOptions};

mod selftest;

#[derive(Parser)]
#[command(
    name = "gridpipe",
    version,
    about = "Monitoring message pipeline: queues, STOMP forwarding and passive checks"
)]
struct Cli {
    /// Log level for stderr diagnostics (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Capture one monitoring event from NAGIOS_* environment variables
    /// into a directory queue.
    Capture {
        /// Queue directory receiving the event.
        #[arg(long)]
        queue: PathBuf,
    },

    /// Drain a directory queue into the monitoring engine's command pipe as
    /// passive-check results.
    Mq2nagios {
        #[arg(long)]
        queue: PathBuf,
        /// Command pipe path (a regular file works for testing).
        #[arg(long)]
        pipe: PathBuf,
        /// Drain once and exit instead of running forever.
        #[arg(long)]
        once: bool,
        /// Poison queue path (default: "<queue>.poison").
        #[arg(long)]
        poison: Option<PathBuf>,
        /// Print a machine-readable stats line on exit.
        #[arg(long)]
        stats_json: bool,
    },

    /// Move messages between a directory queue and a broker (either
    /// direction) with at-least-once reliability.
    Forward(Box<ForwardArgs>),

    /// Keep the services from a configuration file permanently running.
    Supervise {
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving per-service log files.
        #[arg(long, default_value = ".")]
        log_dir: PathBuf,
        /// Seconds between SIGTERM and SIGKILL at shutdown.
        #[arg(long, default_value_t = 10.0)]
        grace: f64,
    },

    /// Run the in-memory STOMP broker simulator.
    BrokerSim {
        /// host:port to listen on; port 0 picks a free port.
        #[arg(long)]
        bind: String,
        /// Server certificate chain (PEM) enabling TLS.
        #[arg(long, requires = "tls_key")]
        tls_cert: Option<PathBuf>,
        /// Server private key (PEM).
        #[arg(long, requires = "tls_cert")]
        tls_key: Option<PathBuf>,
        /// CA bundle that client certificates must chain to (mutual TLS).
        #[arg(long)]
        tls_client_ca: Option<PathBuf>,
        /// Scripted fault, repeatable: drop-connection:N, swallow-receipts:N
        /// (one in N) or delay-delivery:MILLIS.
        #[arg(long)]
        fault: Vec<String>,
        /// Heart-beat advertisement "sx,sy" echoed to clients.
        #[arg(long, default_value = "0,0")]
        heartbeat: String,
    },

    /// Directory queue maintenance.
    Dirq {
        #[command(subcommand)]
        command: DirqCommand,
    },

    /// Run an in-process end-to-end smoke test over loopback and temp dirs.
    Selftest {
        /// Number of events pushed through the pipeline.
        #[arg(long, default_value_t = 25)]
        count: usize,
    },
}

#[derive(Args)]
struct ForwardArgs {
    /// Configuration file with [forward NAME] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which [forward NAME] section to run (defaults to the only one).
    #[arg(long)]
    name: Option<String>,

    /// Source directory queue path.
    #[arg(long, conflicts_with = "incoming_broker")]
    incoming_dirq: Option<PathBuf>,
    /// Source broker URI: stomp[+tls]://host:port[/destination].
    #[arg(long)]
    incoming_broker: Option<String>,
    /// Sink broker URI: stomp[+tls]://host:port[/destination].
    #[arg(long, conflicts_with = "outgoing_dirq")]
    outgoing_broker: Option<String>,
    /// Sink directory queue path.
    #[arg(long)]
    outgoing_dirq: Option<PathBuf>,
    /// Destination for whichever end is a broker (overrides the URI path).
    #[arg(long)]
    destination: Option<String>,
    /// Subscription ack mode: auto, client or client-individual.
    #[arg(long)]
    ack: Option<String>,
    /// Receipts on sends, acks only after durable writes.
    #[arg(long)]
    reliable: bool,
    /// Run forever instead of draining once.
    #[arg(long = "loop")]
    run_forever: bool,
    /// CA bundle for TLS broker connections.
    #[arg(long)]
    tls_ca: Option<PathBuf>,
    /// Client certificate (PEM) presented to the broker.
    #[arg(long, requires = "tls_key")]
    tls_cert: Option<PathBuf>,
    /// Client private key (PEM).
    #[arg(long, requires = "tls_cert")]
    tls_key: Option<PathBuf>,
    /// Client heart-beat advertisement "cx,cy" in milliseconds.
    #[arg(long)]
    heartbeat: Option<String>,
    /// Seconds a reliable send waits for its receipt.
    #[arg(long)]
    receipt_timeout: Option<f64>,
    /// Initial reconnect backoff in seconds.
    #[arg(long)]
    backoff_initial: Option<f64>,
    /// Maximum reconnect backoff in seconds.
    #[arg(long)]
    backoff_max: Option<f64>,
    /// Poison queue path for undecodable payloads.
    #[arg(long)]
    poison: Option<PathBuf>,
    /// Print a machine-readable stats line on exit.
    #[arg(long)]
    stats_json: bool,
}

/// Errors that should exit with code 2: the user gave us something wrong.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_millis()
        .init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gridpipe: {e}");
            if e.downcast_ref::<UsageError>().is_some()
                || e.downcast_ref::<gridpipe_core::config::ConfigError>().is_some()
            {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn usage(message: impl Into<String>) -> AnyError {
    Box::new(UsageError(message.into()))
}

/// Stop flag raised by SIGINT or SIGTERM.
fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    for signal in [libc_signal::SIGINT, libc_signal::SIGTERM] {
        let flag = Arc::clone(&stop);
        // Only sets an atomic; async-signal-safe.
        unsafe {
            let _ = signal_hook_registry::register(signal, move || {
                flag.store(true, Ordering::SeqCst);
            });
        }
    }
    stop
}

/// Signal numbers without pulling libc into the main dependency set.
mod libc_signal {
    pub const SIGINT: i32 = 2;
    pub const SIGTERM: i32 = 15;
}

fn dispatch(command: Command) -> Result<(), AnyError> {
    match command {
        Command::Capture { queue } => {
            let env: HashMap<String, String> = std::env::vars().collect();
            let name = nagios::capture(&env, &queue)?;
            println!("{name}");
            Ok(())
        }

        Command::Mq2nagios { queue, pipe, once, poison, stats_json } => {
            let mut config = Mq2NagiosConfig::new(queue, pipe);
            config.once = once;
            config.poison = poison;
            let report = nagios::run(&config, &stop_flag())?;
            log::info!("mq2nagios: emitted {} poisoned {}", report.emitted, report.poison);
            if stats_json {
                println!("{{\"emitted\":{},\"poison\":{}}}", report.emitted, report.poison);
            }
            Ok(())
        }

        Command::Forward(args) => {
            let stats_json = args.stats_json;
            let config = forward_config(*args)?;
            let report = forwarder::run(&config, &stop_flag())?;
            log::info!(
                "forward: forwarded {} retried {} failed {} in-flight {}",
                report.forwarded,
                report.retried,
                report.failed,
                report.in_flight_at_stop
            );
            if stats_json {
                println!(
                    "{{\"forwarded\":{},\"retried\":{},\"failed\":{}}}",
                    report.forwarded, report.retried, report.failed
                );
            }
            Ok(())
        }

        Command::Supervise { config, log_dir, grace } => {
            let pipeline = PipelineConfig::load(&config)?;
            if pipeline.services.is_empty() {
                return Err(usage(format!(
                    "{} defines no [service NAME] sections",
                    config.display()
                )));
            }
            let options = SupervisorOptions {
                grace: Duration::from_secs_f64(grace.max(0.0)),
                log_dir,
            };
            let status = supervisor::supervise(pipeline.services, options, stop_flag())?;
            for (name, service) in &status {
                log::info!(
                    "supervise: {name}: {:?} (restarts {}, last exit {:?})",
                    service.state,
                    service.restarts,
                    service.last_exit
                );
            }
            Ok(())
        }

        Command::BrokerSim { bind, tls_cert, tls_key, tls_client_ca, fault, heartbeat } => {
            let tls = match (tls_cert, tls_key) {
                (Some(cert), Some(key)) => {
                    let mut tls = ServerTlsConfig::new(cert, key);
                    if let Some(ca) = tls_client_ca {
                        tls = tls.require_client_certs(ca);
                    }
                    Some(tls)
                }
                _ => None,
            };
            let config = BrokerConfig {
                tls,
                heartbeat: parse_heartbeat(&heartbeat)?,
                ..BrokerConfig::default()
            };
            let handle = broker_sim::serve(&bind, config)?;
            for spec in &fault {
                handle.inject_fault(parse_fault(spec)?);
            }
            println!("broker-sim listening on {}", handle.addr());
            let stop = stop_flag();
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(100));
            }
            for (dest, stats) in handle.stats() {
                log::info!(
                    "broker-sim: {dest}: enqueued {} delivered {} acked {} requeued {}",
                    stats.enqueued,
                    stats.delivered,
                    stats.acked,
                    stats.requeued
                );
            }
            Ok(())
        }

        Command::Dirq { command } => dirq_command(command),

        Command::Selftest { count } => selftest::run(count),
    }
}

#[derive(Subcommand)]
enum DirqCommand {
    /// Print the number of committed, unlocked elements.
    Count { path: PathBuf },
    /// Repair crash leftovers: stale temporary files and locks.
    Purge {
        path: PathBuf,
        /// Age in seconds before an orphaned .tmp file is deleted.
        #[arg(long, default_value_t = 300)]
        tmp_age: u64,
        /// Age in seconds before a stale lock is broken.
        #[arg(long, default_value_t = 600)]
        lock_age: u64,
    },
    /// List elements, or dump one element's payload to stdout.
    Inspect {
        path: PathBuf,
        /// Element name as printed by the listing ("bucket/file").
        name: Option<String>,
    },
}

fn dirq_command(command: DirqCommand) -> Result<(), AnyError> {
    match command {
        DirqCommand::Count { path } => {
            let queue = DirQueue::open(&path)?;
            println!("{}", queue.count()?);
            Ok(())
        }
        DirqCommand::Purge { path, tmp_age, lock_age } => {
            let queue = DirQueue::open(&path)?;
            let report =
                queue.purge(Duration::from_secs(tmp_age), Duration::from_secs(lock_age))?;
            println!("removed {} tmp, unlocked {}", report.tmp_removed, report.locks_broken);
            Ok(())
        }
        DirqCommand::Inspect { path, name } => {
            let queue = DirQueue::open(&path)?;
            match name {
                None => {
                    for element in queue.iter()? {
                        println!("{}", element?);
                    }
                    Ok(())
                }
                Some(name) => {
                    let element = gridpipe_core::ElementName::parse(&name)
                        .map_err(|e| usage(e.to_string()))?;
                    if !queue.lock(&element)? {
                        return Err(format!(
                            "element {element} is locked or gone; try again or purge"
                        )
                        .into());
                    }
                    let payload = queue.get(&element)?;
                    queue.unlock(&element)?;
                    use std::io::Write;
                    std::io::stdout().write_all(&payload)?;
                    Ok(())
                }
            }
        }
    }
}

/// Builds the forwarder configuration from a config-file section, command
/// line flags, or both (flags override the file).
fn forward_config(args: ForwardArgs) -> Result<ForwarderConfig, AnyError> {
    let mut config = match &args.config {
        Some(path) => {
            let pipeline = PipelineConfig::load(path)?;
            let name = match &args.name {
                Some(name) => name.clone(),
                None => {
                    let mut names = pipeline.forwards.keys();
                    match (names.next(), names.next()) {
                        (Some(only), None) => only.clone(),
                        _ => {
                            return Err(usage(
                                "--name is required when the file defines several [forward] sections",
                            ));
                        }
                    }
                }
            };
            Some(pipeline.forwarder_config(&name)?)
        }
        None => None,
    };

    // Flag-built endpoints replace whatever the file said.
    let flag_source = match (&args.incoming_dirq, &args.incoming_broker) {
        (Some(path), None) => Some(Source::DirQueue { path: path.clone() }),
        (None, Some(raw)) => {
            let uri = BrokerUri::parse(raw).map_err(|e| usage(e.to_string()))?;
            let destination = args
                .destination
                .clone()
                .or_else(|| uri.destination.clone())
                .ok_or_else(|| usage("broker source needs a destination (URI path or --destination)"))?;
            let ack = match &args.ack {
                Some(raw) => AckMode::parse(raw)
                    .ok_or_else(|| usage(format!("invalid ack mode {raw:?}")))?,
                None => AckMode::ClientIndividual,
            };
            Some(Source::Broker { uri, destination, ack })
        }
        (None, None) => None,
        _ => unreachable!("clap conflicts_with prevents this"),
    };
    let flag_sink = match (&args.outgoing_dirq, &args.outgoing_broker) {
        (Some(path), None) => Some(Sink::DirQueue { path: path.clone() }),
        (None, Some(raw)) => {
            let uri = BrokerUri::parse(raw).map_err(|e| usage(e.to_string()))?;
            let destination = args
                .destination
                .clone()
                .or_else(|| uri.destination.clone())
                .ok_or_else(|| usage("broker sink needs a destination (URI path or --destination)"))?;
            Some(Sink::Broker { uri, destination })
        }
        (None, None) => None,
        _ => unreachable!("clap conflicts_with prevents this"),
    };

    let mut config = match (config.take(), flag_source, flag_sink) {
        (Some(mut from_file), source, sink) => {
            if let Some(source) = source {
                from_file.source = source;
            }
            if let Some(sink) = sink {
                from_file.sink = sink;
            }
            from_file
        }
        (None, Some(source), Some(sink)) => ForwarderConfig::new(source, sink),
        (None, _, _) => {
            return Err(usage(
                "forward needs --config, or both an incoming and an outgoing endpoint",
            ));
        }
    };

    if args.reliable {
        config.reliable = true;
    }
    if args.run_forever {
        config.run_forever = true;
    }
    if let Some(hb) = &args.heartbeat {
        config.heartbeat = parse_heartbeat(hb)?;
    }
    if let Some(secs) = args.receipt_timeout {
        config.receipt_timeout = Duration::from_secs_f64(secs.max(0.0));
    }
    if let Some(secs) = args.backoff_initial {
        config.backoff_initial = Duration::from_secs_f64(secs.max(0.0));
    }
    if let Some(secs) = args.backoff_max {
        config.backoff_max = Duration::from_secs_f64(secs.max(0.0));
    }
    if args.poison.is_some() {
        config.poison = args.poison.clone();
    }
    if let Some(ca) = &args.tls_ca {
        let mut tls = TlsConfig::new(ca);
        if let (Some(cert), Some(key)) = (&args.tls_cert, &args.tls_key) {
            tls = tls.with_client_pair(cert, key);
        }
        config.tls = Some(tls);
    }

    let needs_tls = matches!(&config.source, Source::Broker { uri, .. } if uri.tls)
        || matches!(&config.sink, Sink::Broker { uri, .. } if uri.tls);
    if needs_tls && config.tls.is_none() {
        return Err(usage("stomp+tls endpoints require --tls-ca (and optionally a client pair)"));
    }
    Ok(config)
}

fn parse_heartbeat(raw: &str) -> Result<(u32, u32), AnyError> {
    let bad = || usage(format!("heartbeat must be \"cx,cy\" in milliseconds, got {raw:?}"));
    let (cx, cy) = raw.split_once(',').ok_or_else(bad)?;
    Ok((
        cx.trim().parse().map_err(|_| bad())?,
        cy.trim().parse().map_err(|_| bad())?,
    ))
}

fn parse_fault(spec: &str) -> Result<Fault, AnyError> {
    let (kind, value) = spec
        .split_once(':')
        .ok_or_else(|| usage(format!("fault must be kind:value, got {spec:?}")))?;
    let number: u64 = value
        .parse()
        .map_err(|_| usage(format!("fault value must be a number, got {value:?}")))?;
    match kind {
        "drop-connection" => Ok(Fault::DropConnection { after_frames: number }),
        "swallow-receipts" => Ok(Fault::SwallowReceipts { one_in: number }),
        "delay-delivery" => Ok(Fault::DelayDelivery { millis: number }),
        other => Err(usage(format!(
            "unknown fault {other:?} (drop-connection, swallow-receipts, delay-delivery)"
        ))),
    }
}
