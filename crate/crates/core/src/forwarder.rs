//! Message forwarder: moves messages between a directory queue and a broker
//! in either direction, with at-least-once reliability.
//!
//! The reliability contract, in both directions, is "never settle the source
//! before the sink has the message":
//!
//! * directory queue to broker: an element is removed only after the broker's
//!   RECEIPT for its SEND arrives. Any failure unlocks the element so it is
//!   retried, so duplicates are possible after a lost receipt but loss is
//!   not.
//! * broker to directory queue: deliveries are taken on a client-individual
//!   subscription and ACKed only after the element write returns.
//!
//! Payloads that cannot be decoded are moved to a poison queue rather than
//! dropped or retried forever. Connections are re-established with capped
//! exponential backoff.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::backoff::{sleep_interruptible, Backoff};
use crate::dirq::{poison_path_for, DirQueue, DirqError, ElementName};
use crate::message::{Message, MessageError};
use crate::stomp::frame::FrameError;
use crate::stomp::session::{AckMode, ClientSession, SessionConfig, SessionEvent, StompError};
use crate::stomp::tls::TlsConfig;
use crate::stomp::transport::{Transport, TransportError};

/// MESSAGE-frame headers that describe the transport, not the message.
/// `destination` intentionally stays.
const TRANSPORT_HEADERS: [&str; 5] =
    ["subscription", "message-id", "ack", "content-length", "receipt-id"];

/// Attempts per element in drain-once mode before it is left queued.
const DRAIN_ONCE_ATTEMPTS: u32 = 2;

/// Broker endpoint address: `stomp://host:port/dest` or
/// `stomp+tls://host:port/dest`; port defaults to 61613, the path is an
/// optional default destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerUri {
    pub tls: bool,
    pub host: String,
    pub port: u16,
    pub destination: Option<String>,
}

impl BrokerUri {
    pub fn parse(s: &str) -> Result<Self, ForwarderError> {
        let bad = || ForwarderError::BadUri(s.to_string());
        let (tls, rest) = if let Some(rest) = s.strip_prefix("stomp+tls://") {
            (true, rest)
        } else if let Some(rest) = s.strip_prefix("stomp://") {
            (false, rest)
        } else {
            return Err(bad());
        };
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, ""),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((host, port)) => (host, port.parse::<u16>().map_err(|_| bad())?),
            None => (authority, 61613),
        };
        if host.is_empty() {
            return Err(bad());
        }
        let destination = (!path.is_empty()).then(|| path.to_string());
        Ok(BrokerUri { tls, host: host.to_string(), port, destination })
    }
}

impl std::fmt::Display for BrokerUri {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}://{}:{}{}",
            if self.tls { "stomp+tls" } else { "stomp" },
            self.host,
            self.port,
            self.destination.as_deref().unwrap_or("")
        )
    }
}

/// Where messages come from.
#[derive(Debug, Clone)]
pub enum Source {
    DirQueue { path: PathBuf },
    Broker { uri: BrokerUri, destination: String, ack: AckMode },
}

/// Where messages go.
#[derive(Debug, Clone)]
pub enum Sink {
    Broker { uri: BrokerUri, destination: String },
    DirQueue { path: PathBuf },
}

/// Forwarder instance configuration.
#[derive(Debug, Clone)]
pub struct ForwarderConfig {
    pub source: Source,
    pub sink: Sink,
    /// Receipts on sends, acks on receives.
    pub reliable: bool,
    pub tls: Option<TlsConfig>,
    /// Client heart-beat advertisement in milliseconds.
    pub heartbeat: (u32, u32),
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    /// Run forever versus drain once and return.
    pub run_forever: bool,
    /// How long a reliable send waits for its receipt.
    pub receipt_timeout: Duration,
    /// Poll slice while idle.
    pub idle_poll: Duration,
    /// Idle time after which a drain-once broker source is considered empty.
    pub drain_grace: Duration,
    pub connect_timeout: Duration,
    /// Poison queue path; defaults to a `.poison` sibling of the source.
    pub poison: Option<PathBuf>,
}

impl ForwarderConfig {
    pub fn new(source: Source, sink: Sink) -> Self {
        ForwarderConfig {
            source,
            sink,
            reliable: true,
            tls: None,
            heartbeat: (0, 0),
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(60),
            run_forever: false,
            receipt_timeout: Duration::from_secs(10),
            idle_poll: Duration::from_millis(500),
            drain_grace: Duration::from_secs(1),
            connect_timeout: Duration::from_secs(10),
            poison: None,
        }
    }
}

/// Outcome counters for one forwarder run.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ForwardReport {
    /// Messages settled at the sink.
    pub forwarded: u64,
    /// Retry events (element unlocked or broker redelivery requested).
    pub retried: u64,
    /// Undecodable payloads moved to the poison queue.
    pub failed: u64,
    /// Messages mid-flight when the stop signal arrived.
    pub in_flight_at_stop: u64,
}

#[derive(Debug, Error)]
pub enum ForwarderError {
    #[error(transparent)]
    Dirq(#[from] DirqError),

    #[error(transparent)]
    Stomp(#[from] StompError),

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error("invalid broker URI {0:?}")]
    BadUri(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("endpoint unreachable after maximum backoff: {0}")]
    Unreachable(String),
}

/// Runs the forwarder until the source drains (`run_forever` false) or the
/// stop flag is raised.
pub fn run(config: &ForwarderConfig, stop: &AtomicBool) -> Result<ForwardReport, ForwarderError> {
    run_with_hook(config, stop, &mut |m| m)
}

/// Like [`run`], with a transform applied to every message between the read
/// and the write. The default hook is the identity.
pub fn run_with_hook(
    config: &ForwarderConfig,
    stop: &AtomicBool,
    hook: &mut dyn FnMut(Message) -> Message,
) -> Result<ForwardReport, ForwarderError> {
    match (&config.source, &config.sink) {
        (Source::DirQueue { path }, Sink::Broker { uri, destination }) => {
            DirqToBroker::new(config, path, uri, destination)?.run(stop, hook)
        }
        (Source::Broker { uri, destination, ack }, Sink::DirQueue { path }) => {
            broker_to_dirq(config, uri, destination, *ack, path, stop, hook)
        }
        (Source::DirQueue { path }, Sink::DirQueue { path: sink_path }) => {
            dirq_to_dirq(config, path, sink_path, stop, hook)
        }
        (Source::Broker { uri, destination, ack }, Sink::Broker { uri: sink_uri, destination: sink_dest }) => {
            broker_to_broker(config, uri, destination, *ack, sink_uri, sink_dest, stop, hook)
        }
    }
}

/// Lazily opened poison queue.
struct PoisonSink {
    path: PathBuf,
    queue: Option<DirQueue>,
}

impl PoisonSink {
    fn new(path: PathBuf) -> Self {
        PoisonSink { path, queue: None }
    }

    fn for_source(config: &ForwarderConfig, source_path: &Path) -> Self {
        PoisonSink::new(
            config.poison.clone().unwrap_or_else(|| poison_path_for(source_path)),
        )
    }

    fn add(&mut self, payload: &[u8]) -> Result<ElementName, DirqError> {
        if self.queue.is_none() {
            self.queue = Some(DirQueue::open(&self.path)?);
        }
        self.queue.as_ref().unwrap().add(payload)
    }
}

fn connect_session(
    config: &ForwarderConfig,
    uri: &BrokerUri,
) -> Result<ClientSession, ForwarderError> {
    let transport = if uri.tls {
        let tls = config.tls.as_ref().ok_or_else(|| {
            ForwarderError::Config(format!("{uri} requires TLS material but none is configured"))
        })?;
        Transport::connect_tls(&uri.host, uri.port, config.connect_timeout, tls)?
    } else {
        Transport::connect_tcp(&uri.host, uri.port, config.connect_timeout)
            .map_err(TransportError::Io)?
    };
    let session_config = SessionConfig {
        vhost: uri.host.clone(),
        heartbeat: config.heartbeat,
        connect_timeout: config.connect_timeout,
        ..SessionConfig::default()
    };
    Ok(ClientSession::connect(transport, &session_config)?)
}

/// How one send attempt failed.
enum SendFailure {
    /// The message itself cannot be put on the wire; retrying cannot help.
    Permanent(FrameError),
    /// The connection (or its receipt flow) failed; reconnect and retry.
    Connection(String),
}

fn classify(e: StompError) -> SendFailure {
    match e {
        StompError::Frame(fe) => SendFailure::Permanent(fe),
        other => SendFailure::Connection(other.to_string()),
    }
}

/// Sends one message to `destination`, waiting for the receipt when
/// reliability is on. The message's own `destination` header, if any, is
/// resolved by the caller; it never rides along as an extra header.
fn send_one(
    session: &mut ClientSession,
    config: &ForwarderConfig,
    destination: &str,
    message: &Message,
) -> Result<(), SendFailure> {
    let extra: Vec<(String, String)> = message
        .header()
        .iter()
        .filter(|(k, _)| k.as_str() != "destination")
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();

    let receipt = session
        .send(destination, &extra, message.body(), config.reliable)
        .map_err(classify)?;
    let Some(receipt_id) = receipt else { return Ok(()) };

    let deadline = Instant::now() + config.receipt_timeout;
    loop {
        match session.poll(deadline).map_err(classify)? {
            SessionEvent::Receipt(id) if id == receipt_id => return Ok(()),
            SessionEvent::Receipt(_) => continue,
            SessionEvent::Message(_) => {
                log::warn!("forwarder: ignoring MESSAGE on a send-only session");
                continue;
            }
            SessionEvent::Idle => {
                return Err(SendFailure::Connection("receipt timed out".to_string()));
            }
            SessionEvent::HeartbeatTimeout => {
                return Err(SendFailure::Connection("heart-beat timeout".to_string()));
            }
            SessionEvent::Error(f) => {
                return Err(SendFailure::Connection(format!(
                    "broker error: {}",
                    f.get("message").unwrap_or("unspecified")
                )));
            }
        }
    }
}

/// State for the directory-queue-to-broker direction.
struct DirqToBroker<'a> {
    config: &'a ForwarderConfig,
    queue: DirQueue,
    poison: PoisonSink,
    uri: &'a BrokerUri,
    destination: &'a str,
    /// Send attempts per element, bounded only in drain-once mode.
    attempts: HashMap<String, u32>,
}

enum PassEnd {
    /// Pass completed over the whole snapshot.
    Clean { attemptable_seen: bool, progressed: bool },
    /// The connection died mid-pass; reconnect and go again.
    ConnectionLost,
    Stopped { in_flight: u64 },
}

impl<'a> DirqToBroker<'a> {
    fn new(
        config: &'a ForwarderConfig,
        path: &'a Path,
        uri: &'a BrokerUri,
        destination: &'a str,
    ) -> Result<Self, ForwarderError> {
        Ok(DirqToBroker {
            config,
            queue: DirQueue::open(path)?,
            poison: PoisonSink::for_source(config, path),
            uri,
            destination,
            attempts: HashMap::new(),
        })
    }

    fn run(
        &mut self,
        stop: &AtomicBool,
        hook: &mut dyn FnMut(Message) -> Message,
    ) -> Result<ForwardReport, ForwarderError> {
        let mut report = ForwardReport::default();
        let mut backoff = Backoff::new(self.config.backoff_initial, self.config.backoff_max);
        let mut session: Option<ClientSession> = None;

        loop {
            if stop.load(Ordering::Relaxed) {
                break;
            }
            if session.is_none() {
                match connect_session(self.config, self.uri) {
                    Ok(s) => {
                        backoff.reset();
                        session = Some(s);
                    }
                    Err(e) => {
                        if !self.config.run_forever && backoff.exhausted() {
                            return Err(ForwarderError::Unreachable(e.to_string()));
                        }
                        log::warn!("forwarder: connect to {} failed: {e}", self.uri);
                        sleep_interruptible(backoff.next_delay(), stop);
                        continue;
                    }
                }
            }
            let sess = session.as_mut().expect("session just ensured");

            match self.drain_pass(sess, stop, hook, &mut report)? {
                PassEnd::Clean { attemptable_seen, progressed } => {
                    if !self.config.run_forever {
                        if !attemptable_seen || !progressed {
                            break;
                        }
                    } else if !attemptable_seen {
                        // Idle: keep the session serviced (heart-beats, errors).
                        match sess.poll(Instant::now() + self.config.idle_poll) {
                            Ok(SessionEvent::Idle) | Ok(SessionEvent::Receipt(_)) => {}
                            Ok(SessionEvent::Message(_)) => {}
                            Ok(_) | Err(_) => session = None,
                        }
                    }
                }
                PassEnd::ConnectionLost => session = None,
                PassEnd::Stopped { in_flight } => {
                    report.in_flight_at_stop = in_flight;
                    break;
                }
            }
        }

        if let Some(s) = session.take() {
            let _ = s.disconnect();
        }
        Ok(report)
    }

    fn drain_pass(
        &mut self,
        session: &mut ClientSession,
        stop: &AtomicBool,
        hook: &mut dyn FnMut(Message) -> Message,
        report: &mut ForwardReport,
    ) -> Result<PassEnd, ForwarderError> {
        let mut attemptable_seen = false;
        let mut progressed = false;
        let names: Vec<ElementName> =
            self.queue.iter()?.collect::<Result<_, _>>()?;

        for name in names {
            if stop.load(Ordering::Relaxed) {
                return Ok(PassEnd::Stopped { in_flight: 0 });
            }
            if !self.config.run_forever {
                let tried = self.attempts.get(&name.to_string()).copied().unwrap_or(0);
                if tried >= DRAIN_ONCE_ATTEMPTS {
                    continue;
                }
            }
            attemptable_seen = true;
            if !self.queue.lock(&name)? {
                continue;
            }
            let payload = match self.queue.get(&name) {
                Ok(p) => p,
                Err(_) => {
                    let _ = self.queue.unlock(&name);
                    continue;
                }
            };

            let message = match Message::deserialize(&payload) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("forwarder: poisoning undecodable element {name}: {e}");
                    self.poison.add(&payload)?;
                    self.queue.remove(&name)?;
                    report.failed += 1;
                    progressed = true;
                    continue;
                }
            };
            let message = hook(message);

            // A producer-set destination header overrides the configured
            // destination.
            let destination =
                message.header_value("destination").unwrap_or(self.destination).to_string();
            match send_one(session, self.config, &destination, &message) {
                Ok(()) => {
                    // The broker has confirmed (or reliability is off);
                    // only now may the element disappear.
                    self.queue.remove(&name)?;
                    report.forwarded += 1;
                    progressed = true;
                }
                Err(SendFailure::Permanent(e)) => {
                    log::warn!("forwarder: poisoning unencodable element {name}: {e}");
                    self.poison.add(&payload)?;
                    self.queue.remove(&name)?;
                    report.failed += 1;
                    progressed = true;
                }
                Err(SendFailure::Connection(reason)) => {
                    log::warn!("forwarder: send of {name} failed, will retry: {reason}");
                    self.queue.unlock(&name)?;
                    report.retried += 1;
                    if !self.config.run_forever {
                        *self.attempts.entry(name.to_string()).or_insert(0) += 1;
                    }
                    if stop.load(Ordering::Relaxed) {
                        return Ok(PassEnd::Stopped { in_flight: 0 });
                    }
                    return Ok(PassEnd::ConnectionLost);
                }
            }
        }
        Ok(PassEnd::Clean { attemptable_seen, progressed })
    }
}

/// Rebuilds a [`Message`] from a delivered MESSAGE frame: transport headers
/// are dropped (`destination` retained), repeated keys keep their first
/// occurrence, and the text flag reflects whether the body is valid UTF-8.
fn message_from_frame(frame: &crate::stomp::frame::Frame) -> Result<Message, MessageError> {
    let mut header = std::collections::BTreeMap::new();
    for (k, v) in &frame.headers {
        if TRANSPORT_HEADERS.contains(&k.as_str()) {
            continue;
        }
        header.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let is_text = std::str::from_utf8(&frame.body).is_ok();
    Message::from_parts(header, frame.body.clone(), is_text)
}

fn broker_to_dirq(
    config: &ForwarderConfig,
    uri: &BrokerUri,
    destination: &str,
    ack: AckMode,
    path: &Path,
    stop: &AtomicBool,
    hook: &mut dyn FnMut(Message) -> Message,
) -> Result<ForwardReport, ForwarderError> {
    let queue = DirQueue::open(path)?;
    let mut poison = PoisonSink::new(
        config.poison.clone().unwrap_or_else(|| poison_path_for(path)),
    );
    let mut report = ForwardReport::default();
    let mut backoff = Backoff::new(config.backoff_initial, config.backoff_max);
    let mut session: Option<ClientSession> = None;
    let mut last_activity = Instant::now();

    // Reliability forces individual acks regardless of the configured mode.
    let effective_ack = if config.reliable { AckMode::ClientIndividual } else { ack };

    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        if session.is_none() {
            let built = connect_session(config, uri).and_then(|mut s| {
                s.subscribe(destination, effective_ack)?;
                Ok(s)
            });
            match built {
                Ok(s) => {
                    backoff.reset();
                    last_activity = Instant::now();
                    session = Some(s);
                }
                Err(e) => {
                    if !config.run_forever && backoff.exhausted() {
                        return Err(ForwarderError::Unreachable(e.to_string()));
                    }
                    log::warn!("forwarder: connect to {uri} failed: {e}");
                    sleep_interruptible(backoff.next_delay(), stop);
                    continue;
                }
            }
        }
        let sess = session.as_mut().expect("session just ensured");

        match sess.poll(Instant::now() + config.idle_poll.min(config.drain_grace)) {
            Ok(SessionEvent::Message(frame)) => {
                last_activity = Instant::now();
                match message_from_frame(&frame) {
                    Ok(message) => {
                        let message = hook(message);
                        match queue.add(&message.serialize()) {
                            Ok(_) => {
                                report.forwarded += 1;
                                // Durability first, ack second. A failed ack
                                // means redelivery, which is a duplicate,
                                // never a loss.
                                if config.reliable {
                                    if let Err(e) = sess.ack(&frame) {
                                        log::warn!("forwarder: ack failed, reconnecting: {e}");
                                        session = None;
                                    }
                                }
                            }
                            Err(e) => {
                                // Hand the message back to the broker before
                                // surfacing the storage failure.
                                log::error!("forwarder: element write failed: {e}");
                                if config.reliable {
                                    let _ = sess.nack(&frame);
                                }
                                return Err(e.into());
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("forwarder: poisoning unrepresentable delivery: {e}");
                        poison.add(&frame.body)?;
                        report.failed += 1;
                        if config.reliable {
                            let _ = sess.ack(&frame);
                        }
                    }
                }
            }
            Ok(SessionEvent::Receipt(_)) => {}
            Ok(SessionEvent::Idle) => {
                if !config.run_forever
                    && Instant::now().duration_since(last_activity) >= config.drain_grace
                {
                    break;
                }
            }
            Ok(SessionEvent::HeartbeatTimeout) => {
                log::warn!("forwarder: broker went quiet past the heart-beat budget");
                session = None;
            }
            Ok(SessionEvent::Error(f)) => {
                log::warn!(
                    "forwarder: broker error: {}",
                    f.get("message").unwrap_or("unspecified")
                );
                session = None;
            }
            Err(e) => {
                log::warn!("forwarder: receive failed, reconnecting: {e}");
                session = None;
            }
        }
    }

    if let Some(s) = session.take() {
        let _ = s.disconnect();
    }
    Ok(report)
}

fn dirq_to_dirq(
    config: &ForwarderConfig,
    source_path: &Path,
    sink_path: &Path,
    stop: &AtomicBool,
    hook: &mut dyn FnMut(Message) -> Message,
) -> Result<ForwardReport, ForwarderError> {
    let source = DirQueue::open(source_path)?;
    let sink = DirQueue::open(sink_path)?;
    let mut poison = PoisonSink::for_source(config, source_path);
    let mut report = ForwardReport::default();

    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let mut moved_any = false;
        for name in source.iter()? {
            let name = name?;
            if stop.load(Ordering::Relaxed) {
                break;
            }
            if !source.lock(&name)? {
                continue;
            }
            let payload = match source.get(&name) {
                Ok(p) => p,
                Err(_) => {
                    let _ = source.unlock(&name);
                    continue;
                }
            };
            match Message::deserialize(&payload) {
                Ok(message) => {
                    let message = hook(message);
                    sink.add(&message.serialize())?;
                    source.remove(&name)?;
                    report.forwarded += 1;
                }
                Err(e) => {
                    log::warn!("forwarder: poisoning undecodable element {name}: {e}");
                    poison.add(&payload)?;
                    source.remove(&name)?;
                    report.failed += 1;
                }
            }
            moved_any = true;
        }
        if !config.run_forever {
            if !moved_any {
                break;
            }
        } else if !moved_any {
            sleep_interruptible(config.idle_poll, stop);
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn broker_to_broker(
    config: &ForwarderConfig,
    source_uri: &BrokerUri,
    source_dest: &str,
    ack: AckMode,
    sink_uri: &BrokerUri,
    sink_dest: &str,
    stop: &AtomicBool,
    hook: &mut dyn FnMut(Message) -> Message,
) -> Result<ForwardReport, ForwarderError> {
    let mut report = ForwardReport::default();
    let mut backoff = Backoff::new(config.backoff_initial, config.backoff_max);
    let mut pair: Option<(ClientSession, ClientSession)> = None;
    let mut last_activity = Instant::now();
    let effective_ack = if config.reliable { AckMode::ClientIndividual } else { ack };

    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        if pair.is_none() {
            let built = connect_session(config, source_uri).and_then(|mut inbound| {
                inbound.subscribe(source_dest, effective_ack)?;
                let outbound = connect_session(config, sink_uri)?;
                Ok((inbound, outbound))
            });
            match built {
                Ok(sessions) => {
                    backoff.reset();
                    last_activity = Instant::now();
                    pair = Some(sessions);
                }
                Err(e) => {
                    if !config.run_forever && backoff.exhausted() {
                        return Err(ForwarderError::Unreachable(e.to_string()));
                    }
                    log::warn!("forwarder: bridge connect failed: {e}");
                    sleep_interruptible(backoff.next_delay(), stop);
                    continue;
                }
            }
        }
        let (inbound, outbound) = {
            let p = pair.as_mut().expect("sessions just ensured");
            (&mut p.0, &mut p.1)
        };

        match inbound.poll(Instant::now() + config.idle_poll.min(config.drain_grace)) {
            Ok(SessionEvent::Message(frame)) => {
                last_activity = Instant::now();
                match message_from_frame(&frame) {
                    Ok(message) => {
                        let message = hook(message);
                        match send_one(outbound, config, sink_dest, &message) {
                            Ok(()) => {
                                report.forwarded += 1;
                                if config.reliable {
                                    if let Err(e) = inbound.ack(&frame) {
                                        log::warn!("forwarder: ack failed: {e}");
                                        pair = None;
                                    }
                                }
                            }
                            Err(SendFailure::Permanent(e)) => {
                                log::warn!("forwarder: dropping unencodable bridge message: {e}");
                                report.failed += 1;
                                if config.reliable {
                                    let _ = inbound.ack(&frame);
                                }
                            }
                            Err(SendFailure::Connection(reason)) => {
                                log::warn!("forwarder: bridge send failed: {reason}");
                                report.retried += 1;
                                pair = None;
                            }
                        }
                    }
                    Err(e) => {
                        log::warn!("forwarder: dropping unrepresentable bridge delivery: {e}");
                        report.failed += 1;
                        if config.reliable {
                            let _ = inbound.ack(&frame);
                        }
                    }
                }
            }
            Ok(SessionEvent::Receipt(_)) => {}
            Ok(SessionEvent::Idle) => {
                if !config.run_forever
                    && Instant::now().duration_since(last_activity) >= config.drain_grace
                {
                    break;
                }
            }
            Ok(_) | Err(_) => pair = None,
        }
    }

    if let Some((a, b)) = pair.take() {
        let _ = a.disconnect();
        let _ = b.disconnect();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uri_parsing_covers_both_schemes() {
        let uri = BrokerUri::parse("stomp://broker.example.org:61613/queue/grid.events").unwrap();
        assert_eq!(
            uri,
            BrokerUri {
                tls: false,
                host: "broker.example.org".to_string(),
                port: 61613,
                destination: Some("/queue/grid.events".to_string()),
            }
        );
        let uri = BrokerUri::parse("stomp+tls://h:1234").unwrap();
        assert!(uri.tls);
        assert_eq!(uri.port, 1234);
        assert_eq!(uri.destination, None);
        let uri = BrokerUri::parse("stomp://h/queue/x").unwrap();
        assert_eq!(uri.port, 61613);
    }

    #[test]
    fn uri_parsing_rejects_junk() {
        for bad in ["http://h:1", "stomp://", "stomp://h:notaport", "stomp+tls://:99"] {
            assert!(BrokerUri::parse(bad).is_err(), "{bad} should not parse");
        }
    }

    #[test]
    fn frame_to_message_strips_transport_headers() {
        let frame = crate::stomp::frame::Frame::new(crate::stomp::frame::Command::Message)
            .header("destination", "/queue/x")
            .header("message-id", "msg-7")
            .header("subscription", "sub-1")
            .header("ack", "msg-7")
            .header("content-length", "2")
            .header("destination-hint", "svc")
            .body(&b"hi"[..]);
        let message = message_from_frame(&frame).unwrap();
        assert_eq!(message.header_value("destination"), Some("/queue/x"));
        assert_eq!(message.header_value("destination-hint"), Some("svc"));
        assert_eq!(message.header_value("message-id"), None);
        assert_eq!(message.header_value("subscription"), None);
        assert!(message.is_text());
        assert_eq!(message.body(), b"hi");
    }

    #[test]
    fn repeated_wire_headers_keep_first_occurrence() {
        let frame = crate::stomp::frame::Frame::new(crate::stomp::frame::Command::Message)
            .header("k", "first")
            .header("k", "second");
        let message = message_from_frame(&frame).unwrap();
        assert_eq!(message.header_value("k"), Some("first"));
    }
}
