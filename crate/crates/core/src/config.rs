//! Pipeline configuration: one INI-style file shared by the forwarder, the
//! supervisor and the command-line tools.
//!
//! ```ini
//! # Broker endpoints
//! [broker main]
//! uri = stomp+tls://broker.example.org:61613
//! ca-bundle = /etc/grid-security/ca.pem
//! cert = /etc/grid-security/client.pem
//! key = /etc/grid-security/client.key
//!
//! [queue outgoing]
//! path = /var/spool/outgoing
//! granularity = 60
//!
//! [forward send]
//! incoming-dirq = outgoing
//! outgoing-broker = main
//! destination = /queue/grid.events
//! reliable = true
//! loop = true
//!
//! [service forward-send]
//! command = gridpipe forward --config /etc/gridpipe.ini --name send
//! expected = running
//! ```
//!
//! Parsing is strict: unknown section kinds, unknown keys, duplicates and
//! dangling references are errors carrying the offending line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::forwarder::{BrokerUri, ForwarderConfig, Sink, Source};
use crate::stomp::session::AckMode;
use crate::stomp::tls::TlsConfig;
use crate::supervisor::{Expected, ServiceSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("{0}")]
    Invalid(String),
}

fn syntax(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Syntax { line, message: message.into() }
}

/// A broker endpoint with optional TLS material.
#[derive(Debug, Clone)]
pub struct BrokerEndpoint {
    pub uri: BrokerUri,
    pub tls: Option<TlsConfig>,
}

/// A named directory queue with its purge thresholds.
#[derive(Debug, Clone)]
pub struct QueueConfig {
    pub path: PathBuf,
    pub granularity: u64,
    pub tmp_age: Duration,
    pub lock_age: Duration,
}

/// One `[forward NAME]` section, unresolved.
#[derive(Debug, Clone, Default)]
pub struct ForwardSection {
    pub incoming_dirq: Option<String>,
    pub incoming_broker: Option<String>,
    pub outgoing_dirq: Option<String>,
    pub outgoing_broker: Option<String>,
    pub destination: Option<String>,
    pub incoming_destination: Option<String>,
    pub outgoing_destination: Option<String>,
    pub ack: Option<AckMode>,
    pub reliable: bool,
    pub run_forever: bool,
    pub heartbeat: (u32, u32),
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    pub receipt_timeout: Duration,
    pub poison: Option<PathBuf>,
    line: usize,
}

/// The whole parsed configuration.
#[derive(Debug, Default)]
pub struct PipelineConfig {
    pub brokers: BTreeMap<String, BrokerEndpoint>,
    pub queues: BTreeMap<String, QueueConfig>,
    pub forwards: BTreeMap<String, ForwardSection>,
    pub services: Vec<ServiceSpec>,
}

impl PipelineConfig {
    /// Loads and validates the file at `path`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Parses configuration text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = PipelineConfig::default();
        for section in split_sections(text)? {
            match section.kind.as_str() {
                "broker" => config.add_broker(section)?,
                "queue" => config.add_queue(section)?,
                "forward" => config.add_forward(section)?,
                "service" => config.add_service(section)?,
                other => {
                    return Err(syntax(
                        section.line,
                        format!("unknown section kind {other:?} (expected broker, queue, forward or service)"),
                    ));
                }
            }
        }
        config.check_references()?;
        Ok(config)
    }

    /// Resolves one `[forward NAME]` section into a runnable configuration.
    pub fn forwarder_config(&self, name: &str) -> Result<ForwarderConfig, ConfigError> {
        let section = self.forwards.get(name).ok_or_else(|| {
            ConfigError::Invalid(format!("no [forward {name}] section in the configuration"))
        })?;

        let queue_path = |queue_name: &str| -> Result<PathBuf, ConfigError> {
            Ok(self.queues[queue_name].path.clone())
        };
        let broker = |broker_name: &str| &self.brokers[broker_name];

        let incoming_dest = section
            .incoming_destination
            .clone()
            .or_else(|| section.destination.clone());
        let outgoing_dest = section
            .outgoing_destination
            .clone()
            .or_else(|| section.destination.clone());

        let mut tls = None;
        let source = match (&section.incoming_dirq, &section.incoming_broker) {
            (Some(q), None) => Source::DirQueue { path: queue_path(q)? },
            (None, Some(b)) => {
                let endpoint = broker(b);
                let destination = incoming_dest
                    .or_else(|| endpoint.uri.destination.clone())
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "[forward {name}] has a broker source but no destination"
                        ))
                    })?;
                tls = tls.or_else(|| endpoint.tls.clone());
                Source::Broker {
                    uri: endpoint.uri.clone(),
                    destination,
                    ack: section.ack.unwrap_or(AckMode::ClientIndividual),
                }
            }
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "[forward {name}] must name exactly one of incoming-dirq or incoming-broker"
                )));
            }
        };
        let sink = match (&section.outgoing_dirq, &section.outgoing_broker) {
            (Some(q), None) => Sink::DirQueue { path: queue_path(q)? },
            (None, Some(b)) => {
                let endpoint = broker(b);
                let destination = outgoing_dest
                    .or_else(|| endpoint.uri.destination.clone())
                    .ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "[forward {name}] has a broker sink but no destination"
                        ))
                    })?;
                tls = tls.or_else(|| endpoint.tls.clone());
                Sink::Broker { uri: endpoint.uri.clone(), destination }
            }
            _ => {
                return Err(ConfigError::Invalid(format!(
                    "[forward {name}] must name exactly one of outgoing-dirq or outgoing-broker"
                )));
            }
        };

        let mut fwd = ForwarderConfig::new(source, sink);
        fwd.reliable = section.reliable;
        fwd.run_forever = section.run_forever;
        fwd.heartbeat = section.heartbeat;
        fwd.backoff_initial = section.backoff_initial;
        fwd.backoff_max = section.backoff_max;
        fwd.receipt_timeout = section.receipt_timeout;
        fwd.poison = section.poison.clone();
        fwd.tls = tls;
        Ok(fwd)
    }

    fn add_broker(&mut self, section: RawSection) -> Result<(), ConfigError> {
        let name = section.require_name()?;
        if self.brokers.contains_key(&name) {
            return Err(syntax(section.line, format!("duplicate [broker {name}]")));
        }
        let mut uri = None;
        let mut ca = None;
        let mut cert = None;
        let mut key = None;
        for (k, v, line) in &section.entries {
            match k.as_str() {
                "uri" => {
                    uri = Some(BrokerUri::parse(v).map_err(|e| syntax(*line, e.to_string()))?);
                }
                "ca-bundle" => ca = Some(PathBuf::from(v)),
                "cert" => cert = Some(PathBuf::from(v)),
                "key" => key = Some(PathBuf::from(v)),
                other => {
                    return Err(syntax(*line, format!("unknown broker key {other:?}")));
                }
            }
        }
        let uri = uri.ok_or_else(|| syntax(section.line, "broker section requires uri"))?;
        let tls = match (uri.tls, ca) {
            (true, Some(ca_bundle)) => {
                let mut tls = TlsConfig::new(ca_bundle);
                if let (Some(c), Some(k)) = (cert, key) {
                    tls = tls.with_client_pair(c, k);
                }
                Some(tls)
            }
            (true, None) => {
                return Err(syntax(
                    section.line,
                    "stomp+tls broker requires a ca-bundle for server verification",
                ));
            }
            (false, _) => None,
        };
        self.brokers.insert(name, BrokerEndpoint { uri, tls });
        Ok(())
    }

    fn add_queue(&mut self, section: RawSection) -> Result<(), ConfigError> {
        let name = section.require_name()?;
        if self.queues.contains_key(&name) {
            return Err(syntax(section.line, format!("duplicate [queue {name}]")));
        }
        let mut path = None;
        let mut granularity = crate::dirq::DEFAULT_GRANULARITY;
        let mut tmp_age = crate::dirq::DEFAULT_MAX_TMP_AGE;
        let mut lock_age = crate::dirq::DEFAULT_MAX_LOCK_AGE;
        for (k, v, line) in &section.entries {
            match k.as_str() {
                "path" => path = Some(PathBuf::from(v)),
                "granularity" => granularity = parse_number(v, *line, "granularity")?,
                "tmp-age" => tmp_age = parse_seconds(v, *line, "tmp-age")?,
                "lock-age" => lock_age = parse_seconds(v, *line, "lock-age")?,
                other => return Err(syntax(*line, format!("unknown queue key {other:?}"))),
            }
        }
        if granularity == 0 {
            return Err(syntax(section.line, "granularity must be positive"));
        }
        let path = path.ok_or_else(|| syntax(section.line, "queue section requires path"))?;
        self.queues.insert(name, QueueConfig { path, granularity, tmp_age, lock_age });
        Ok(())
    }

    fn add_forward(&mut self, section: RawSection) -> Result<(), ConfigError> {
        let name = section.require_name()?;
        if self.forwards.contains_key(&name) {
            return Err(syntax(section.line, format!("duplicate [forward {name}]")));
        }
        let mut fwd = ForwardSection {
            reliable: true,
            run_forever: true,
            backoff_initial: Duration::from_secs(1),
            backoff_max: Duration::from_secs(60),
            receipt_timeout: Duration::from_secs(10),
            line: section.line,
            ..ForwardSection::default()
        };
        for (k, v, line) in &section.entries {
            match k.as_str() {
                "incoming-dirq" => fwd.incoming_dirq = Some(v.clone()),
                "incoming-broker" => fwd.incoming_broker = Some(v.clone()),
                "outgoing-dirq" => fwd.outgoing_dirq = Some(v.clone()),
                "outgoing-broker" => fwd.outgoing_broker = Some(v.clone()),
                "destination" => fwd.destination = Some(v.clone()),
                "incoming-destination" => fwd.incoming_destination = Some(v.clone()),
                "outgoing-destination" => fwd.outgoing_destination = Some(v.clone()),
                "ack" => {
                    fwd.ack = Some(AckMode::parse(v).ok_or_else(|| {
                        syntax(*line, format!("invalid ack mode {v:?}"))
                    })?);
                }
                "reliable" => fwd.reliable = parse_bool(v, *line, "reliable")?,
                "loop" => fwd.run_forever = parse_bool(v, *line, "loop")?,
                "heartbeat" => fwd.heartbeat = parse_heartbeat_pair(v, *line)?,
                "backoff-initial" => fwd.backoff_initial = parse_seconds(v, *line, k)?,
                "backoff-max" => fwd.backoff_max = parse_seconds(v, *line, k)?,
                "receipt-timeout" => fwd.receipt_timeout = parse_seconds(v, *line, k)?,
                "poison" => fwd.poison = Some(PathBuf::from(v)),
                other => return Err(syntax(*line, format!("unknown forward key {other:?}"))),
            }
        }
        self.forwards.insert(name, fwd);
        Ok(())
    }

    fn add_service(&mut self, section: RawSection) -> Result<(), ConfigError> {
        let name = section.require_name()?;
        if self.services.iter().any(|s| s.name == name) {
            return Err(syntax(section.line, format!("duplicate [service {name}]")));
        }
        let mut spec = ServiceSpec::new(name, Vec::new());
        for (k, v, line) in &section.entries {
            match k.as_str() {
                "command" => spec.command = split_command(v, *line)?,
                "expected" => {
                    spec.expected = match v.as_str() {
                        "running" => Expected::Running,
                        "stopped" => Expected::Stopped,
                        other => {
                            return Err(syntax(
                                *line,
                                format!("expected must be running or stopped, not {other:?}"),
                            ));
                        }
                    };
                }
                "backoff-initial" => spec.backoff_initial = parse_seconds(v, *line, k)?,
                "backoff-max" => spec.backoff_max = parse_seconds(v, *line, k)?,
                "backoff-multiplier" => {
                    spec.backoff_multiplier = v.parse().map_err(|_| {
                        syntax(*line, format!("invalid backoff-multiplier {v:?}"))
                    })?;
                }
                "max-restarts" => spec.max_restarts = parse_number(v, *line, "max-restarts")? as u32,
                "window" => spec.window = parse_seconds(v, *line, "window")?,
                other => return Err(syntax(*line, format!("unknown service key {other:?}"))),
            }
        }
        if spec.command.is_empty() {
            return Err(syntax(section.line, "service section requires command"));
        }
        self.services.push(spec);
        Ok(())
    }

    /// Referenced sections must exist.
    fn check_references(&self) -> Result<(), ConfigError> {
        for (name, fwd) in &self.forwards {
            for queue in [&fwd.incoming_dirq, &fwd.outgoing_dirq].into_iter().flatten() {
                if !self.queues.contains_key(queue) {
                    return Err(syntax(
                        fwd.line,
                        format!("[forward {name}] references unknown queue {queue:?}"),
                    ));
                }
            }
            for broker in [&fwd.incoming_broker, &fwd.outgoing_broker].into_iter().flatten() {
                if !self.brokers.contains_key(broker) {
                    return Err(syntax(
                        fwd.line,
                        format!("[forward {name}] references unknown broker {broker:?}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

struct RawSection {
    kind: String,
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

impl RawSection {
    fn require_name(&self) -> Result<String, ConfigError> {
        if self.name.is_empty() {
            return Err(syntax(self.line, format!("[{}] section requires a name", self.kind)));
        }
        Ok(self.name.clone())
    }
}

fn split_sections(text: &str) -> Result<Vec<RawSection>, ConfigError> {
    let mut sections: Vec<RawSection> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| syntax(line_no, "unterminated section header"))?
                .trim();
            let (kind, name) = match header.split_once(char::is_whitespace) {
                Some((kind, name)) => (kind.to_string(), name.trim().to_string()),
                None => (header.to_string(), String::new()),
            };
            if kind.is_empty() {
                return Err(syntax(line_no, "empty section header"));
            }
            sections.push(RawSection { kind, name, line: line_no, entries: Vec::new() });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(line_no, format!("expected key = value, got {line:?}")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(syntax(line_no, "empty key"));
        }
        let section = sections
            .last_mut()
            .ok_or_else(|| syntax(line_no, "key = value before any [section] header"))?;
        if section.entries.iter().any(|(k, _, _)| *k == key) {
            return Err(syntax(line_no, format!("duplicate key {key:?} in this section")));
        }
        section.entries.push((key, value, line_no));
    }
    Ok(sections)
}

fn parse_bool(v: &str, line: usize, key: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(syntax(line, format!("{key} must be a boolean, not {other:?}"))),
    }
}

fn parse_number(v: &str, line: usize, key: &str) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| syntax(line, format!("{key} must be a non-negative integer")))
}

fn parse_seconds(v: &str, line: usize, key: &str) -> Result<Duration, ConfigError> {
    let secs: f64 =
        v.parse().map_err(|_| syntax(line, format!("{key} must be a number of seconds")))?;
    if !secs.is_finite() || secs < 0.0 {
        return Err(syntax(line, format!("{key} must be a non-negative number of seconds")));
    }
    Ok(Duration::from_secs_f64(secs))
}

fn parse_heartbeat_pair(v: &str, line: usize) -> Result<(u32, u32), ConfigError> {
    let bad = || syntax(line, "heartbeat must be two comma-separated millisecond values");
    let (cx, cy) = v.split_once(',').ok_or_else(bad)?;
    Ok((cx.trim().parse().map_err(|_| bad())?, cy.trim().parse().map_err(|_| bad())?))
}

/// Splits a command line on whitespace, honoring single and double quotes.
fn split_command(v: &str, line: usize) -> Result<Vec<String>, ConfigError> {
    let mut args = Vec::new();
    let mut current = String::new();
    let mut in_word = false;
    let mut quote: Option<char> = None;
    for c in v.chars() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => current.push(c),
            None if c == '"' || c == '\'' => {
                quote = Some(c);
                in_word = true;
            }
            None if c.is_whitespace() => {
                if in_word {
                    args.push(std::mem::take(&mut current));
                    in_word = false;
                }
            }
            None => {
                current.push(c);
                in_word = true;
            }
        }
    }
    if quote.is_some() {
        return Err(syntax(line, "unterminated quote in command"));
    }
    if in_word {
        args.push(current);
    }
    Ok(args)
}
