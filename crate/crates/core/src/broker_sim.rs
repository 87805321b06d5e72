//! In-memory STOMP broker for desk-scale end-to-end testing.
//!
//! Speaks the same wire protocol as the client session: STOMP 1.0 and 1.2
//! over TCP or TLS. Queue destinations (`/queue/...`) deliver each message
//! to exactly one subscriber, round-robin; topic destinations (`/topic/...`)
//! copy to every current subscriber. Client and client-individual
//! subscriptions hold deliveries pending until ACK; NACK, UNSUBSCRIBE or a
//! dropped connection requeues them. Nothing is persisted.
//!
//! A scripted fault plan can drop connections, swallow receipts or delay
//! deliveries, which is what makes the forwarder's reliability contract
//! testable.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::stomp::frame::{encode, Command, Frame, FrameDecoder, Version};
use crate::stomp::session::AckMode;
use crate::stomp::tls::ServerTlsConfig;
use crate::stomp::transport::is_timeout;

/// Poll interval of each connection loop.
const CONN_TICK: Duration = Duration::from_millis(2);
/// Poll interval of the accept loop.
const ACCEPT_TICK: Duration = Duration::from_millis(5);

/// One scripted fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Close every connection abruptly once it has received this many frames.
    DropConnection { after_frames: u64 },
    /// Swallow every `one_in`-th receipt instead of sending it.
    SwallowReceipts { one_in: u64 },
    /// Hold each delivery back for this long.
    DelayDelivery { millis: u64 },
}

#[derive(Debug, Default, Clone)]
struct FaultPlan {
    drop_after: Option<u64>,
    swallow_one_in: Option<u64>,
    delay: Option<Duration>,
}

/// Per-destination counters; `stored` and `pending` are point-in-time
/// gauges, the rest are monotone.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct DestStats {
    pub enqueued: u64,
    pub delivered: u64,
    pub acked: u64,
    pub requeued: u64,
    pub stored: u64,
    pub pending: u64,
}

/// Unacknowledged deliveries allowed per acking subscriber before the
/// broker stops pushing and waits for ACKs.
pub const DEFAULT_PREFETCH: usize = 64;

/// Broker configuration.
#[derive(Default)]
pub struct BrokerConfig {
    pub tls: Option<ServerTlsConfig>,
    /// Heart-beat advertisement `(sx, sy)` echoed in CONNECTED.
    pub heartbeat: (u32, u32),
    pub max_frame: usize,
    /// Per-subscriber in-flight window; 0 means the default.
    pub prefetch: usize,
}

#[derive(Clone)]
struct StoredMessage {
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

struct SubEntry {
    conn: u64,
    id: String,
    ack: AckMode,
}

struct PendingEntry {
    msg_num: u64,
    sub_id: String,
    dest: String,
    message: StoredMessage,
}

/// Bytes scheduled for one connection, not to be written before `due`.
struct Outgoing {
    bytes: Vec<u8>,
    due: Instant,
}

struct ConnEntry {
    tx: Sender<Outgoing>,
    version: Version,
}

#[derive(Default)]
struct BrokerState {
    queues: HashMap<String, VecDeque<StoredMessage>>,
    subs: HashMap<String, Vec<SubEntry>>,
    rr: HashMap<String, usize>,
    pending: HashMap<u64, Vec<PendingEntry>>,
    conns: HashMap<u64, ConnEntry>,
    stats: HashMap<String, DestStats>,
    next_msg: u64,
}

struct Shared {
    state: Mutex<BrokerState>,
    faults: Mutex<FaultPlan>,
    shutdown: AtomicBool,
    receipt_counter: AtomicU64,
    next_conn: AtomicU64,
    heartbeat: (u32, u32),
    max_frame: usize,
    prefetch: usize,
}

/// Running broker; shuts down when dropped.
pub struct BrokerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept_thread: Option<JoinHandle<()>>,
    conn_threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

/// Binds `bind` (a `host:port` string; port 0 picks a free port) and serves
/// until the handle is shut down or dropped.
pub fn serve(bind: &str, config: BrokerConfig) -> io::Result<BrokerHandle> {
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;

    let tls_config = match &config.tls {
        Some(tls) => Some(
            tls.server_config()
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?,
        ),
        None => None,
    };

    let shared = Arc::new(Shared {
        state: Mutex::new(BrokerState::default()),
        faults: Mutex::new(FaultPlan::default()),
        shutdown: AtomicBool::new(false),
        receipt_counter: AtomicU64::new(0),
        next_conn: AtomicU64::new(1),
        heartbeat: config.heartbeat,
        max_frame: if config.max_frame == 0 {
            crate::stomp::frame::DEFAULT_MAX_FRAME_SIZE
        } else {
            config.max_frame
        },
        prefetch: if config.prefetch == 0 { DEFAULT_PREFETCH } else { config.prefetch },
    });

    let conn_threads = Arc::new(Mutex::new(Vec::new()));
    let accept_shared = Arc::clone(&shared);
    let accept_threads = Arc::clone(&conn_threads);
    let accept_thread = std::thread::Builder::new()
        .name("broker-accept".to_string())
        .spawn(move || {
            while !accept_shared.shutdown.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::debug!("broker: connection from {peer}");
                        let shared = Arc::clone(&accept_shared);
                        let tls = tls_config.clone();
                        let handle = std::thread::Builder::new()
                            .name(format!("broker-conn-{peer}"))
                            .spawn(move || {
                                let _ = stream.set_nonblocking(false);
                                run_connection(stream, tls, shared);
                            })
                            .expect("spawning connection thread");
                        accept_threads.lock().unwrap().push(handle);
                    }
                    Err(e) if is_timeout(&e) => std::thread::sleep(ACCEPT_TICK),
                    Err(e) => {
                        log::warn!("broker: accept failed: {e}");
                        std::thread::sleep(ACCEPT_TICK);
                    }
                }
            }
        })?;

    Ok(BrokerHandle { addr, shared, accept_thread: Some(accept_thread), conn_threads })
}

impl BrokerHandle {
    /// Actual bound address, with the OS-assigned port.
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Installs or replaces one fault in the plan, effective immediately.
    pub fn inject_fault(&self, fault: Fault) {
        let mut plan = self.shared.faults.lock().unwrap();
        match fault {
            Fault::DropConnection { after_frames } => plan.drop_after = Some(after_frames),
            Fault::SwallowReceipts { one_in } => plan.swallow_one_in = Some(one_in.max(1)),
            Fault::DelayDelivery { millis } => {
                plan.delay = Some(Duration::from_millis(millis));
            }
        }
    }

    /// Removes all scripted faults.
    pub fn clear_faults(&self) {
        *self.shared.faults.lock().unwrap() = FaultPlan::default();
    }

    /// Snapshot of the per-destination counters.
    pub fn stats(&self) -> BTreeMap<String, DestStats> {
        let state = self.shared.state.lock().unwrap();
        let mut out: BTreeMap<String, DestStats> = BTreeMap::new();
        for (dest, stats) in &state.stats {
            let mut s = *stats;
            s.stored = state.queues.get(dest).map_or(0, |q| q.len() as u64);
            s.pending = state
                .pending
                .values()
                .flat_map(|v| v.iter())
                .filter(|p| &p.dest == dest)
                .count() as u64;
            out.insert(dest.clone(), s);
        }
        out
    }

    /// Stops accepting, closes every connection and joins all threads.
    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        let threads: Vec<_> = std::mem::take(&mut *self.conn_threads.lock().unwrap());
        for t in threads {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

enum ServerTransport {
    Tcp(TcpStream),
    Tls(Box<rustls::StreamOwned<rustls::ServerConnection, TcpStream>>),
}

impl ServerTransport {
    fn tcp(&self) -> &TcpStream {
        match self {
            ServerTransport::Tcp(s) => s,
            ServerTransport::Tls(s) => s.get_ref(),
        }
    }
}

impl Read for ServerTransport {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            ServerTransport::Tcp(s) => s.read(buf),
            ServerTransport::Tls(s) => s.read(buf),
        }
    }
}

impl Write for ServerTransport {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            ServerTransport::Tcp(s) => s.write(buf),
            ServerTransport::Tls(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            ServerTransport::Tcp(s) => s.flush(),
            ServerTransport::Tls(s) => s.flush(),
        }
    }
}

/// Everything one connection needs across its lifetime.
struct Connection {
    id: u64,
    transport: ServerTransport,
    decoder: FrameDecoder,
    version: Version,
    connected: bool,
    frames_seen: u64,
    rx: Receiver<Outgoing>,
    out: VecDeque<Outgoing>,
    shared: Arc<Shared>,
}

fn run_connection(
    stream: TcpStream,
    tls: Option<Arc<rustls::ServerConfig>>,
    shared: Arc<Shared>,
) {
    let transport = match tls {
        None => ServerTransport::Tcp(stream),
        Some(config) => {
            let conn = match rustls::ServerConnection::new(config) {
                Ok(c) => c,
                Err(e) => {
                    log::warn!("broker: TLS setup failed: {e}");
                    return;
                }
            };
            let mut tls_stream = rustls::StreamOwned::new(conn, stream);
            let _ = tls_stream.get_ref().set_read_timeout(Some(Duration::from_millis(100)));
            let deadline = Instant::now() + Duration::from_secs(10);
            while tls_stream.conn.is_handshaking() {
                if shared.shutdown.load(Ordering::SeqCst) || Instant::now() > deadline {
                    return;
                }
                match tls_stream.conn.complete_io(&mut tls_stream.sock) {
                    Ok(_) => {}
                    Err(e) if is_timeout(&e) => {}
                    Err(e) => {
                        log::debug!("broker: TLS handshake failed: {e}");
                        return;
                    }
                }
            }
            ServerTransport::Tls(Box::new(tls_stream))
        }
    };

    let _ = transport.tcp().set_read_timeout(Some(CONN_TICK));
    let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    let (tx, rx) = mpsc::channel();
    shared
        .state
        .lock()
        .unwrap()
        .conns
        .insert(id, ConnEntry { tx, version: Version::V1_0 });

    let mut conn = Connection {
        id,
        transport,
        decoder: FrameDecoder::with_max_frame(Version::V1_0, shared.max_frame),
        version: Version::V1_0,
        connected: false,
        frames_seen: 0,
        rx,
        out: VecDeque::new(),
        shared: Arc::clone(&shared),
    };
    conn.run();

    // Connection gone: drop its subscriptions and requeue unacked messages.
    let mut state = shared.state.lock().unwrap();
    state.conns.remove(&id);
    let mut touched = Vec::new();
    for (dest, subs) in state.subs.iter_mut() {
        let before = subs.len();
        subs.retain(|s| s.conn != id);
        if subs.len() != before {
            touched.push(dest.clone());
        }
    }
    let mut pendings = state.pending.remove(&id).unwrap_or_default();
    pendings.sort_by_key(|p| p.msg_num);
    for entry in pendings.into_iter().rev() {
        state.stats.entry(entry.dest.clone()).or_default().requeued += 1;
        state.queues.entry(entry.dest.clone()).or_default().push_front(entry.message);
        if !touched.contains(&entry.dest) {
            touched.push(entry.dest.clone());
        }
    }
    let plan = shared.faults.lock().unwrap().clone();
    let prefetch = shared.prefetch;
    for dest in touched {
        pump_queue(&mut state, &dest, &plan, prefetch);
    }
}

impl Connection {
    fn run(&mut self) {
        loop {
            if self.shared.shutdown.load(Ordering::SeqCst) {
                return;
            }
            if !self.flush_outgoing() {
                return;
            }

            let mut buf = [0u8; 8192];
            match self.transport.read(&mut buf) {
                Ok(0) => return,
                Ok(n) => self.decoder.push(&buf[..n]),
                Err(e) if is_timeout(&e) => {}
                Err(e) => {
                    log::debug!("broker: read failed on conn {}: {e}", self.id);
                    return;
                }
            }

            loop {
                match self.decoder.try_next() {
                    Ok(Some(frame)) => {
                        self.frames_seen += 1;
                        let drop_after =
                            self.shared.faults.lock().unwrap().drop_after;
                        if let Some(n) = drop_after {
                            if self.frames_seen >= n {
                                log::debug!(
                                    "broker: fault drops conn {} at frame {}",
                                    self.id,
                                    self.frames_seen
                                );
                                let _ = self.transport.tcp().shutdown(std::net::Shutdown::Both);
                                return;
                            }
                        }
                        if !self.handle_frame(frame) {
                            self.drain_then_close();
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        self.error_close("malformed frame", &e.to_string());
                        return;
                    }
                }
            }
        }
    }

    /// Moves due writes to the socket and accepts newly scheduled ones.
    /// Returns false when the socket is dead.
    fn flush_outgoing(&mut self) -> bool {
        while let Ok(item) = self.rx.try_recv() {
            self.out.push_back(item);
        }
        while let Some(front) = self.out.front() {
            if front.due > Instant::now() {
                break;
            }
            let item = self.out.pop_front().unwrap();
            if let Err(e) = self.transport.write_all(&item.bytes) {
                log::debug!("broker: write failed on conn {}: {e}", self.id);
                return false;
            }
        }
        true
    }

    /// Final best-effort flush before an orderly close.
    fn drain_then_close(&mut self) {
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            while let Ok(item) = self.rx.try_recv() {
                self.out.push_back(item);
            }
            if self.out.is_empty() {
                break;
            }
            if !self.flush_outgoing() {
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        let _ = self.transport.flush();
        let _ = self.transport.tcp().shutdown(std::net::Shutdown::Both);
    }

    /// Processes one frame; false means "close the connection now".
    fn handle_frame(&mut self, frame: Frame) -> bool {
        if !self.connected && frame.command != Command::Connect {
            self.error_close("not connected", "the first frame must be CONNECT");
            return false;
        }
        match frame.command {
            Command::Connect => self.on_connect(&frame),
            Command::Send => self.on_send(&frame),
            Command::Subscribe => self.on_subscribe(&frame),
            Command::Unsubscribe => self.on_unsubscribe(&frame),
            Command::Ack => self.on_ack(&frame, true),
            Command::Nack => self.on_ack(&frame, false),
            Command::Disconnect => {
                self.send_receipt_if_requested(&frame);
                false
            }
            Command::Begin | Command::Commit | Command::Abort => {
                self.error_close("transactions unsupported", "this broker has no transactions");
                false
            }
            other => {
                self.error_close("unexpected frame", &format!("{other} is a server command"));
                false
            }
        }
    }

    fn on_connect(&mut self, frame: &Frame) -> bool {
        if self.connected {
            self.error_close("already connected", "second CONNECT");
            return false;
        }
        let accepted = frame.get("accept-version").unwrap_or("1.0");
        let version = if accepted.split(',').any(|v| v.trim() == "1.2") {
            Version::V1_2
        } else if accepted.split(',').any(|v| v.trim() == "1.0") {
            Version::V1_0
        } else {
            self.error_close("unsupported version", &format!("cannot speak {accepted}"));
            return false;
        };
        self.version = version;
        self.decoder.set_version(version);
        if let Some(entry) = self.shared.state.lock().unwrap().conns.get_mut(&self.id) {
            entry.version = version;
        }
        self.connected = true;
        let (sx, sy) = self.shared.heartbeat;
        let connected = Frame::new(Command::Connected)
            .header("version", version.as_str())
            .header("heart-beat", format!("{sx},{sy}"))
            .header("session", format!("conn-{}", self.id))
            .header("server", "gridpipe-broker-sim");
        self.enqueue_frame(&connected, Instant::now());
        true
    }

    fn on_send(&mut self, frame: &Frame) -> bool {
        let dest = frame.get("destination").unwrap_or("").to_string();
        if dest.is_empty() {
            self.error_close("missing destination", "SEND requires a destination header");
            return false;
        }
        let message = StoredMessage {
            headers: frame
                .headers
                .iter()
                .filter(|(k, _)| {
                    k != "destination" && k != "receipt" && k != "content-length"
                })
                .cloned()
                .collect(),
            body: frame.body.clone(),
        };

        let plan = self.shared.faults.lock().unwrap().clone();
        let prefetch = self.shared.prefetch;
        {
            let mut state = self.shared.state.lock().unwrap();
            state.stats.entry(dest.clone()).or_default().enqueued += 1;
            if is_topic(&dest) {
                deliver_topic(&mut state, &dest, &message, &plan);
            } else {
                state.queues.entry(dest.clone()).or_default().push_back(message);
                pump_queue(&mut state, &dest, &plan, prefetch);
            }
        }
        self.send_receipt_if_requested(frame);
        true
    }

    fn on_subscribe(&mut self, frame: &Frame) -> bool {
        let Some(dest) = frame.get("destination").map(str::to_string) else {
            self.error_close("missing destination", "SUBSCRIBE requires a destination header");
            return false;
        };
        let sub_id = frame
            .get("id")
            .map(str::to_string)
            .unwrap_or_else(|| format!("gen-{}", self.frames_seen));
        let ack = match AckMode::parse(frame.get("ack").unwrap_or("auto")) {
            Some(mode) => mode,
            None => {
                self.error_close("bad ack mode", "ack must be auto, client or client-individual");
                return false;
            }
        };
        let plan = self.shared.faults.lock().unwrap().clone();
        let prefetch = self.shared.prefetch;
        {
            let mut state = self.shared.state.lock().unwrap();
            state
                .subs
                .entry(dest.clone())
                .or_default()
                .push(SubEntry { conn: self.id, id: sub_id, ack });
            state.stats.entry(dest.clone()).or_default();
            if !is_topic(&dest) {
                pump_queue(&mut state, &dest, &plan, prefetch);
            }
        }
        self.send_receipt_if_requested(frame);
        true
    }

    fn on_unsubscribe(&mut self, frame: &Frame) -> bool {
        let Some(sub_id) = frame.get("id") else {
            self.error_close("missing id", "UNSUBSCRIBE requires an id header");
            return false;
        };
        let plan = self.shared.faults.lock().unwrap().clone();
        let prefetch = self.shared.prefetch;
        {
            let mut state = self.shared.state.lock().unwrap();
            let mut touched = Vec::new();
            for (dest, subs) in state.subs.iter_mut() {
                let before = subs.len();
                subs.retain(|s| !(s.conn == self.id && s.id == sub_id));
                if subs.len() != before {
                    touched.push(dest.clone());
                }
            }
            // In-flight deliveries of the dropped subscription go back first.
            if let Some(pendings) = state.pending.get_mut(&self.id) {
                let mut dropped: Vec<PendingEntry> = Vec::new();
                let mut kept = Vec::new();
                for entry in pendings.drain(..) {
                    if entry.sub_id == sub_id {
                        dropped.push(entry);
                    } else {
                        kept.push(entry);
                    }
                }
                *pendings = kept;
                dropped.sort_by_key(|p| p.msg_num);
                for entry in dropped.into_iter().rev() {
                    state.stats.entry(entry.dest.clone()).or_default().requeued += 1;
                    state.queues.entry(entry.dest.clone()).or_default().push_front(entry.message);
                    if !touched.contains(&entry.dest) {
                        touched.push(entry.dest.clone());
                    }
                }
            }
            for dest in touched {
                pump_queue(&mut state, &dest, &plan, prefetch);
            }
        }
        self.send_receipt_if_requested(frame);
        true
    }

    fn on_ack(&mut self, frame: &Frame, positive: bool) -> bool {
        // 1.2 ACKs carry the message's ack header in `id`; 1.0 uses
        // `message-id`. Accept either, preferring the version's own.
        let Some(id) = frame.get("id").or_else(|| frame.get("message-id")) else {
            self.error_close("missing id", "ACK/NACK requires an id");
            return false;
        };
        let Some(msg_num) = id.strip_prefix("msg-").and_then(|s| s.parse::<u64>().ok()) else {
            log::warn!("broker: ignoring ack for unknown id {id:?}");
            self.send_receipt_if_requested(frame);
            return true;
        };

        let plan = self.shared.faults.lock().unwrap().clone();
        let prefetch = self.shared.prefetch;
        'settle: {
            let mut state = self.shared.state.lock().unwrap();
            let sub_id = match state
                .pending
                .get(&self.id)
                .and_then(|p| p.iter().find(|e| e.msg_num == msg_num))
            {
                Some(target) => target.sub_id.clone(),
                // Unknown delivery: nothing pending under that id.
                None => break 'settle,
            };
            let cumulative = {
                let mode = state
                    .subs
                    .values()
                    .flatten()
                    .find(|s| s.conn == self.id && s.id == sub_id)
                    .map(|s| s.ack);
                mode == Some(AckMode::Client)
            };
            let pendings = state.pending.get_mut(&self.id).unwrap();
            let mut settled = Vec::new();
            let mut kept = Vec::new();
            for entry in pendings.drain(..) {
                let selected = if cumulative {
                    entry.sub_id == sub_id && entry.msg_num <= msg_num
                } else {
                    entry.msg_num == msg_num
                };
                if selected {
                    settled.push(entry);
                } else {
                    kept.push(entry);
                }
            }
            *pendings = kept;

            let mut touched = Vec::new();
            if positive {
                for entry in settled {
                    state.stats.entry(entry.dest.clone()).or_default().acked += 1;
                    // Settling frees window room; pump so delivery resumes.
                    if !touched.contains(&entry.dest) {
                        touched.push(entry.dest.clone());
                    }
                }
            } else {
                settled.sort_by_key(|p| p.msg_num);
                for entry in settled.into_iter().rev() {
                    state.stats.entry(entry.dest.clone()).or_default().requeued += 1;
                    state.queues.entry(entry.dest.clone()).or_default().push_front(entry.message);
                    if !touched.contains(&entry.dest) {
                        touched.push(entry.dest.clone());
                    }
                }
            }
            for dest in touched {
                pump_queue(&mut state, &dest, &plan, prefetch);
            }
        }
        self.send_receipt_if_requested(frame);
        true
    }

    fn send_receipt_if_requested(&mut self, frame: &Frame) {
        let Some(receipt) = frame.get("receipt") else { return };
        if frame.command == Command::Connect {
            return;
        }
        let swallow = {
            let plan = self.shared.faults.lock().unwrap();
            match plan.swallow_one_in {
                Some(one_in) => {
                    let n = self.shared.receipt_counter.fetch_add(1, Ordering::SeqCst) + 1;
                    n.is_multiple_of(one_in)
                }
                None => false,
            }
        };
        if swallow {
            log::debug!("broker: fault swallows receipt {receipt:?}");
            return;
        }
        let frame = Frame::new(Command::Receipt).header("receipt-id", receipt);
        self.enqueue_frame(&frame, Instant::now());
    }

    fn error_close(&mut self, message: &str, detail: &str) {
        let frame = Frame::new(Command::Error)
            .header("message", message)
            .body(detail.as_bytes().to_vec());
        self.enqueue_frame(&frame, Instant::now());
        self.drain_then_close();
    }

    /// Encodes for this connection's version and schedules the write.
    fn enqueue_frame(&mut self, frame: &Frame, due: Instant) {
        match encode(frame, self.version) {
            Ok(bytes) => self.out.push_back(Outgoing { bytes, due }),
            Err(e) => log::warn!("broker: cannot encode {} frame: {e}", frame.command),
        }
    }
}

fn is_topic(dest: &str) -> bool {
    dest.starts_with("/topic/")
}

/// Copies a message to every current subscriber of a topic.
fn deliver_topic(
    state: &mut BrokerState,
    dest: &str,
    message: &StoredMessage,
    plan: &FaultPlan,
) {
    let due = delivery_due(plan);
    let mut deliveries = Vec::new();
    if let Some(subs) = state.subs.get(dest) {
        for sub in subs {
            let msg_num = state.next_msg;
            state.next_msg += 1;
            deliveries.push((sub.conn, sub.id.clone(), msg_num));
        }
    }
    for (conn_id, sub_id, msg_num) in deliveries {
        if send_message_frame(state, conn_id, &sub_id, dest, message, msg_num, due) {
            state.stats.entry(dest.to_string()).or_default().delivered += 1;
        }
    }
}

/// Hands stored queue messages to subscribers, round-robin, until the
/// queue drains or every subscriber's in-flight window is full. Call with
/// the state lock held.
fn pump_queue(state: &mut BrokerState, dest: &str, plan: &FaultPlan, prefetch: usize) {
    let due = delivery_due(plan);
    loop {
        let subs_len = state.subs.get(dest).map_or(0, Vec::len);
        if subs_len == 0 {
            return;
        }
        if state.queues.get(dest).is_none_or(VecDeque::is_empty) {
            return;
        }

        // Next subscriber in rotation with window room; acking subscribers
        // saturate at the prefetch limit until they settle deliveries.
        let start = state.rr.get(dest).copied().unwrap_or(0);
        let mut chosen = None;
        for k in 0..subs_len {
            let idx = (start + k) % subs_len;
            let sub = &state.subs[dest][idx];
            let eligible = sub.ack == AckMode::Auto
                || state
                    .pending
                    .get(&sub.conn)
                    .map_or(0, |p| p.iter().filter(|e| e.sub_id == sub.id).count())
                    < prefetch;
            if eligible {
                chosen = Some(idx);
                break;
            }
        }
        let Some(idx) = chosen else { return };
        state.rr.insert(dest.to_string(), idx + 1);
        let (conn_id, sub_id, ack) = {
            let sub = &state.subs[dest][idx];
            (sub.conn, sub.id.clone(), sub.ack)
        };

        let message = state.queues.get_mut(dest).unwrap().pop_front().unwrap();
        let msg_num = state.next_msg;
        state.next_msg += 1;

        if send_message_frame(state, conn_id, &sub_id, dest, &message, msg_num, due) {
            let stats = state.stats.entry(dest.to_string()).or_default();
            stats.delivered += 1;
            if ack == AckMode::Auto {
                // Auto-ack: the broker forgets the message on delivery.
                stats.acked += 1;
            } else {
                state.pending.entry(conn_id).or_default().push(PendingEntry {
                    msg_num,
                    sub_id,
                    dest: dest.to_string(),
                    message,
                });
            }
        } else {
            // Dead subscriber: put the message back and drop the entry.
            state.queues.get_mut(dest).unwrap().push_front(message);
            if let Some(subs) = state.subs.get_mut(dest) {
                subs.retain(|s| !(s.conn == conn_id && s.id == sub_id));
            }
        }
    }
}

fn delivery_due(plan: &FaultPlan) -> Instant {
    Instant::now() + plan.delay.unwrap_or(Duration::ZERO)
}

/// Encodes and schedules one MESSAGE frame; false if the connection is gone.
fn send_message_frame(
    state: &mut BrokerState,
    conn_id: u64,
    sub_id: &str,
    dest: &str,
    message: &StoredMessage,
    msg_num: u64,
    due: Instant,
) -> bool {
    let Some(conn) = state.conns.get(&conn_id) else { return false };
    let msg_id = format!("msg-{msg_num}");
    let mut frame = Frame::new(Command::Message)
        .header("destination", dest)
        .header("message-id", &msg_id)
        .header("subscription", sub_id)
        .header("ack", &msg_id);
    for (k, v) in &message.headers {
        frame = frame.header(k.clone(), v.clone());
    }
    frame = frame.body(message.body.clone());
    match encode(&frame, conn.version) {
        Ok(bytes) => conn.tx.send(Outgoing { bytes, due }).is_ok(),
        Err(e) => {
            log::warn!("broker: cannot encode MESSAGE for conn {conn_id}: {e}");
            false
        }
    }
}
