//! Client session: the connection state machine wrapped around the frame
//! codec, with receipt accounting, subscription bookkeeping and negotiated
//! heart-beating.
//!
//! A session has a single owner; every operation takes `&mut self` and the
//! caller serializes them. Independent sessions are free to run on other
//! threads.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::frame::{encode, Command, Frame, FrameDecoder, FrameError, Version};
use super::heartbeat::{negotiate, HeartbeatTimer};
use super::transport::{is_timeout, Transport, TransportError};

/// Default wait for CONNECTED after sending CONNECT.
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// Subscription acknowledgment contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckMode {
    Auto,
    Client,
    ClientIndividual,
}

impl AckMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AckMode::Auto => "auto",
            AckMode::Client => "client",
            AckMode::ClientIndividual => "client-individual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(AckMode::Auto),
            "client" => Some(AckMode::Client),
            "client-individual" => Some(AckMode::ClientIndividual),
            _ => None,
        }
    }
}

/// Session lifecycle states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Disconnected,
    Connecting,
    Connected,
    Closed,
}

/// What [`ClientSession::poll`] observed.
#[derive(Debug)]
pub enum SessionEvent {
    /// A MESSAGE frame arrived.
    Message(Frame),
    /// A previously requested receipt arrived.
    Receipt(String),
    /// The server sent ERROR; the session is closed.
    Error(Frame),
    /// The peer exceeded the negotiated heart-beat silence budget.
    HeartbeatTimeout,
    /// The deadline passed with nothing to report.
    Idle,
}

/// Session errors.
#[derive(Debug, Error)]
pub enum StompError {
    #[error(transparent)]
    Frame(#[from] FrameError),

    #[error("transport error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error("protocol misuse: {0}")]
    Misuse(String),

    #[error("timed out waiting for {0}")]
    Timeout(&'static str),

    #[error("server error: {message}")]
    ErrorFrame { message: String, frame: Frame },

    #[error("connection closed by peer")]
    ClosedByPeer,

    #[error("server offered unsupported version {0:?}")]
    BadVersion(String),
}

/// Connection parameters for [`ClientSession::connect`].
#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Optional login/passcode pair.
    pub credentials: Option<(String, String)>,
    /// Virtual host name sent in the `host` header.
    pub vhost: String,
    /// Client heart-beat advertisement `(cx, cy)` in milliseconds.
    pub heartbeat: (u32, u32),
    pub connect_timeout: Duration,
    pub max_frame: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            credentials: None,
            vhost: "/".to_string(),
            heartbeat: (0, 0),
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            max_frame: super::frame::DEFAULT_MAX_FRAME_SIZE,
        }
    }
}

/// An established STOMP client connection.
pub struct ClientSession {
    transport: Transport,
    decoder: FrameDecoder,
    state: SessionState,
    version: Version,
    heartbeat: HeartbeatTimer,
    effective_heartbeat: (u32, u32),
    pending_receipts: HashSet<String>,
    subscriptions: HashMap<String, (String, AckMode)>,
    next_id: u64,
}

impl ClientSession {
    /// Sends CONNECT and waits for CONNECTED, negotiating the version and
    /// heart-beat intervals.
    pub fn connect(transport: Transport, config: &SessionConfig) -> Result<Self, StompError> {
        let mut session = ClientSession {
            transport,
            decoder: FrameDecoder::with_max_frame(Version::V1_0, config.max_frame),
            state: SessionState::Connecting,
            version: Version::V1_0,
            heartbeat: HeartbeatTimer::new(0, 0, Instant::now()),
            effective_heartbeat: (0, 0),
            pending_receipts: HashSet::new(),
            subscriptions: HashMap::new(),
            next_id: 1,
        };

        let (cx, cy) = config.heartbeat;
        let mut connect = Frame::new(Command::Connect)
            .header("accept-version", "1.0,1.2")
            .header("host", &config.vhost)
            .header("heart-beat", format!("{cx},{cy}"));
        if let Some((login, passcode)) = &config.credentials {
            connect = connect.header("login", login).header("passcode", passcode);
        }
        session.write_frame(&connect)?;

        let deadline = Instant::now() + config.connect_timeout;
        let connected = match session.read_frame(deadline)? {
            Some(frame) if frame.command == Command::Connected => frame,
            Some(frame) if frame.command == Command::Error => {
                session.state = SessionState::Closed;
                return Err(error_frame(frame));
            }
            Some(frame) => {
                return Err(StompError::Misuse(format!(
                    "unexpected {} frame during handshake",
                    frame.command
                )));
            }
            None => {
                session.state = SessionState::Closed;
                return Err(StompError::Timeout("CONNECTED frame"));
            }
        };

        let version_text = connected.get("version").unwrap_or("1.0");
        let version = Version::parse(version_text)
            .ok_or_else(|| StompError::BadVersion(version_text.to_string()))?;
        session.version = version;
        session.decoder.set_version(version);

        let server_beat = parse_heartbeat(connected.get("heart-beat").unwrap_or("0,0"));
        let (send_ms, recv_ms) = negotiate(config.heartbeat, server_beat);
        session.effective_heartbeat = (send_ms, recv_ms);
        session.heartbeat = HeartbeatTimer::new(send_ms, recv_ms, Instant::now());
        session.state = SessionState::Connected;
        Ok(session)
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn version(&self) -> Version {
        self.version
    }

    /// Negotiated `(send_interval_ms, receive_timeout_ms)`.
    pub fn effective_heartbeat(&self) -> (u32, u32) {
        self.effective_heartbeat
    }

    pub fn pending_receipts(&self) -> usize {
        self.pending_receipts.len()
    }

    /// Sends a message. With `want_receipt`, a fresh receipt id is attached
    /// and returned; the send is confirmed only once [`ClientSession::poll`]
    /// yields that receipt.
    pub fn send(
        &mut self,
        destination: &str,
        extra_headers: &[(String, String)],
        body: &[u8],
        want_receipt: bool,
    ) -> Result<Option<String>, StompError> {
        self.require_connected("SEND")?;
        let mut frame = Frame::new(Command::Send).header("destination", destination);
        for (k, v) in extra_headers {
            frame = frame.header(k.clone(), v.clone());
        }
        let receipt = if want_receipt {
            let id = format!("rcpt-{}", self.fresh_id());
            frame = frame.header("receipt", &id);
            Some(id)
        } else {
            None
        };
        frame = frame.body(body);
        self.write_frame(&frame)?;
        if let Some(id) = &receipt {
            self.pending_receipts.insert(id.clone());
        }
        Ok(receipt)
    }

    /// Subscribes and returns the subscription id.
    pub fn subscribe(&mut self, destination: &str, ack: AckMode) -> Result<String, StompError> {
        self.require_connected("SUBSCRIBE")?;
        let id = format!("sub-{}", self.fresh_id());
        let frame = Frame::new(Command::Subscribe)
            .header("id", &id)
            .header("destination", destination)
            .header("ack", ack.as_str());
        self.write_frame(&frame)?;
        self.subscriptions.insert(id.clone(), (destination.to_string(), ack));
        Ok(id)
    }

    pub fn unsubscribe(&mut self, subscription_id: &str) -> Result<(), StompError> {
        self.require_connected("UNSUBSCRIBE")?;
        if self.subscriptions.remove(subscription_id).is_none() {
            return Err(StompError::Misuse(format!(
                "unknown subscription {subscription_id:?}"
            )));
        }
        let frame = Frame::new(Command::Unsubscribe).header("id", subscription_id);
        self.write_frame(&frame)
    }

    /// Acknowledges a delivered MESSAGE frame.
    pub fn ack(&mut self, message: &Frame) -> Result<(), StompError> {
        self.ack_or_nack(message, Command::Ack)
    }

    /// Rejects a delivered MESSAGE frame, asking the broker to requeue.
    pub fn nack(&mut self, message: &Frame) -> Result<(), StompError> {
        if self.version == Version::V1_0 {
            return Err(StompError::Misuse("NACK requires STOMP 1.2".to_string()));
        }
        self.ack_or_nack(message, Command::Nack)
    }

    fn ack_or_nack(&mut self, message: &Frame, command: Command) -> Result<(), StompError> {
        self.require_connected(command.as_str())?;
        let sub_id = message
            .get("subscription")
            .ok_or_else(|| StompError::Misuse("MESSAGE frame lacks subscription".into()))?;
        match self.subscriptions.get(sub_id) {
            Some((_, AckMode::Auto)) => {
                return Err(StompError::Misuse(format!(
                    "{command} is illegal on auto-ack subscription {sub_id:?}"
                )));
            }
            Some(_) => {}
            None => {
                return Err(StompError::Misuse(format!("unknown subscription {sub_id:?}")));
            }
        }
        let frame = match self.version {
            Version::V1_2 => {
                let id = message
                    .get("ack")
                    .ok_or_else(|| StompError::Misuse("MESSAGE frame lacks ack id".into()))?;
                Frame::new(command).header("id", id)
            }
            Version::V1_0 => {
                let id = message
                    .get("message-id")
                    .ok_or_else(|| StompError::Misuse("MESSAGE frame lacks message-id".into()))?;
                Frame::new(command).header("message-id", id)
            }
        };
        self.write_frame(&frame)
    }

    /// Waits until `deadline` for the next session event, transmitting owed
    /// heart-beats along the way.
    pub fn poll(&mut self, deadline: Instant) -> Result<SessionEvent, StompError> {
        self.require_connected("poll")?;
        loop {
            // Frames already buffered take priority over new reads.
            match self.decoder.try_next() {
                Ok(Some(frame)) => {
                    if let Some(event) = self.dispatch(frame)? {
                        return Ok(event);
                    }
                    continue;
                }
                Ok(None) => {}
                Err(e) => {
                    self.state = SessionState::Closed;
                    return Err(e.into());
                }
            }

            let now = Instant::now();
            if self.heartbeat.send_due(now) {
                self.transport.write_all(b"\n")?;
                self.transport.flush()?;
                self.heartbeat.on_sent(now);
            }
            if self.heartbeat.receive_overdue(now) {
                return Ok(SessionEvent::HeartbeatTimeout);
            }
            if now >= deadline {
                return Ok(SessionEvent::Idle);
            }

            let wake = match self.heartbeat.next_deadline(now) {
                Some(hb) => deadline.min(hb),
                None => deadline,
            };
            if !self.read_some(wake)? {
                // Timed out; loop to re-check deadlines.
                continue;
            }
        }
    }

    /// Sends DISCONNECT with a receipt, waits briefly for it, and closes.
    pub fn disconnect(mut self) -> Result<(), StompError> {
        if self.state != SessionState::Connected {
            self.transport.shutdown();
            return Ok(());
        }
        let id = format!("rcpt-{}", self.fresh_id());
        let frame = Frame::new(Command::Disconnect).header("receipt", &id);
        self.write_frame(&frame)?;
        self.pending_receipts.insert(id.clone());
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            match self.poll(deadline) {
                Ok(SessionEvent::Receipt(got)) if got == id => break,
                Ok(SessionEvent::Idle) | Ok(SessionEvent::HeartbeatTimeout) => break,
                Ok(_) => continue,
                Err(_) => break,
            }
        }
        self.state = SessionState::Closed;
        self.transport.shutdown();
        Ok(())
    }

    fn dispatch(&mut self, frame: Frame) -> Result<Option<SessionEvent>, StompError> {
        match frame.command {
            Command::Message => Ok(Some(SessionEvent::Message(frame))),
            Command::Receipt => {
                let id = frame
                    .get("receipt-id")
                    .ok_or_else(|| StompError::Misuse("RECEIPT without receipt-id".into()))?
                    .to_string();
                if self.pending_receipts.remove(&id) {
                    Ok(Some(SessionEvent::Receipt(id)))
                } else {
                    log::warn!("ignoring unrequested receipt {id:?}");
                    Ok(None)
                }
            }
            Command::Error => {
                self.state = SessionState::Closed;
                Ok(Some(SessionEvent::Error(frame)))
            }
            other => {
                log::warn!("ignoring unexpected {other} frame from server");
                Ok(None)
            }
        }
    }

    /// Blocking read bounded by `deadline`. Returns whether bytes arrived.
    fn read_some(&mut self, deadline: Instant) -> Result<bool, StompError> {
        let now = Instant::now();
        let budget = deadline.saturating_duration_since(now).max(Duration::from_millis(1));
        self.transport.set_read_timeout(Some(budget))?;
        let mut buf = [0u8; 8192];
        match self.transport.read(&mut buf) {
            Ok(0) => {
                self.state = SessionState::Closed;
                Err(StompError::ClosedByPeer)
            }
            Ok(n) => {
                self.heartbeat.on_received(Instant::now());
                self.decoder.push(&buf[..n]);
                Ok(true)
            }
            Err(e) if is_timeout(&e) => Ok(false),
            Err(e) => {
                self.state = SessionState::Closed;
                Err(e.into())
            }
        }
    }

    /// Reads whole frames until `deadline`; `Ok(None)` on timeout.
    fn read_frame(&mut self, deadline: Instant) -> Result<Option<Frame>, StompError> {
        loop {
            if let Some(frame) = self.decoder.try_next()? {
                self.heartbeat.on_received(Instant::now());
                return Ok(Some(frame));
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
            self.read_some(deadline)?;
        }
    }

    fn write_frame(&mut self, frame: &Frame) -> Result<(), StompError> {
        let bytes = encode(frame, self.version)?;
        self.transport.write_all(&bytes)?;
        self.transport.flush()?;
        self.heartbeat.on_sent(Instant::now());
        Ok(())
    }

    fn require_connected(&self, op: &str) -> Result<(), StompError> {
        if self.state != SessionState::Connected {
            return Err(StompError::Misuse(format!(
                "{op} requires a connected session (state is {:?})",
                self.state
            )));
        }
        Ok(())
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

fn error_frame(frame: Frame) -> StompError {
    let message = frame
        .get("message")
        .map(str::to_string)
        .unwrap_or_else(|| String::from_utf8_lossy(&frame.body).into_owned());
    StompError::ErrorFrame { message, frame }
}

fn parse_heartbeat(s: &str) -> (u32, u32) {
    let mut parts = s.splitn(2, ',');
    let sx = parts.next().and_then(|p| p.trim().parse().ok()).unwrap_or(0);
    let sy = parts.next().and_then(|p| p.trim().parse().ok()).unwrap_or(0);
    (sx, sy)
}
