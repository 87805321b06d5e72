//! Monitoring-event payloads: validation of the environment variables the
//! monitoring engine exports on every service check, and the plain-text
//! block format those events travel in.
//!
//! The block format is a fixed sequence of `key: value` lines terminated by
//! a bare `EOT` line:
//!
//! ```text
//! hostName: wn01.example.org
//! metricName: org.wlcg.CE-JobSubmit
//! metricStatus: OK
//! timestamp: 1433116800
//! summaryData: job ok
//! detailsData: anything, possibly
//! spanning several lines
//! EOT
//! ```

use std::collections::HashMap;

use thiserror::Error;

use crate::message::Message;

/// Environment variables consumed by [`MetricEvent::from_env`].
pub const ENV_HOSTNAME: &str = "NAGIOS_HOSTNAME";
pub const ENV_SERVICEDESC: &str = "NAGIOS_SERVICEDESC";
pub const ENV_SERVICESTATE: &str = "NAGIOS_SERVICESTATE";
pub const ENV_TIMET: &str = "NAGIOS_TIMET";
pub const ENV_SERVICEOUTPUT: &str = "NAGIOS_SERVICEOUTPUT";
pub const ENV_LONGSERVICEOUTPUT: &str = "NAGIOS_LONGSERVICEOUTPUT";

/// Errors from event validation and block parsing.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("required variable {0} is missing from the environment")]
    MissingVariable(String),

    #[error("unrecognized service state {0:?}")]
    UnknownStatus(String),

    #[error("invalid timestamp {0:?}")]
    InvalidTimestamp(String),

    #[error("{field} {reason}")]
    InvalidField { field: &'static str, reason: &'static str },

    #[error("event body is not valid UTF-8 text")]
    NotText,

    #[error("event body is missing the {0:?} line")]
    MissingKey(&'static str),

    #[error("event body is missing the EOT terminator")]
    MissingTerminator,
}

/// Service status with its standard numeric code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricStatus {
    Ok,
    Warning,
    Critical,
    Unknown,
}

impl MetricStatus {
    pub const ALL: [MetricStatus; 4] =
        [MetricStatus::Ok, MetricStatus::Warning, MetricStatus::Critical, MetricStatus::Unknown];

    /// Standard status code: OK=0, WARNING=1, CRITICAL=2, UNKNOWN=3.
    pub fn code(self) -> u8 {
        match self {
            MetricStatus::Ok => 0,
            MetricStatus::Warning => 1,
            MetricStatus::Critical => 2,
            MetricStatus::Unknown => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricStatus::Ok => "OK",
            MetricStatus::Warning => "WARNING",
            MetricStatus::Critical => "CRITICAL",
            MetricStatus::Unknown => "UNKNOWN",
        }
    }

    /// Case-insensitive parse; unrecognized strings are an error.
    pub fn parse(s: &str) -> Result<Self, MetricError> {
        match s.to_ascii_uppercase().as_str() {
            "OK" => Ok(MetricStatus::Ok),
            "WARNING" => Ok(MetricStatus::Warning),
            "CRITICAL" => Ok(MetricStatus::Critical),
            "UNKNOWN" => Ok(MetricStatus::Unknown),
            _ => Err(MetricError::UnknownStatus(s.to_string())),
        }
    }

    /// Liberal parse for the receiving side: unrecognized strings map to
    /// UNKNOWN with a logged warning instead of failing the pipeline.
    pub fn parse_lenient(s: &str) -> Self {
        MetricStatus::parse(s).unwrap_or_else(|_| {
            log::warn!("unrecognized service state {s:?}, mapping to UNKNOWN");
            MetricStatus::Unknown
        })
    }
}

impl std::fmt::Display for MetricStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One validated monitoring event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricEvent {
    host: String,
    service: String,
    status: MetricStatus,
    timestamp: u64,
    summary: String,
    details: String,
}

impl MetricEvent {
    /// Validates and builds an event.
    ///
    /// `details` may span lines but must not contain a line that is exactly
    /// `EOT`: such a payload is unrepresentable in the block format, and is
    /// rejected here rather than silently escaped.
    pub fn new(
        host: impl Into<String>,
        service: impl Into<String>,
        status: MetricStatus,
        timestamp: u64,
        summary: impl Into<String>,
        details: impl Into<String>,
    ) -> Result<Self, MetricError> {
        let host = host.into();
        let service = service.into();
        let summary = summary.into();
        let details = details.into();
        if host.is_empty() {
            return Err(MetricError::InvalidField { field: "host", reason: "must not be empty" });
        }
        if service.is_empty() {
            return Err(MetricError::InvalidField {
                field: "service",
                reason: "must not be empty",
            });
        }
        if service.contains(';') || service.contains('\n') {
            return Err(MetricError::InvalidField {
                field: "service",
                reason: "must not contain ';' or newlines",
            });
        }
        if summary.contains('\n') {
            return Err(MetricError::InvalidField {
                field: "summary",
                reason: "must be a single line",
            });
        }
        if details.lines().any(|l| l == "EOT") {
            return Err(MetricError::InvalidField {
                field: "details",
                reason: "must not contain a bare EOT line",
            });
        }
        Ok(MetricEvent { host, service, status, timestamp, summary, details })
    }

    /// Reads and validates an event from the monitoring engine's exported
    /// variables. The state string is parsed case-insensitively; anything
    /// unrecognized is rejected so a misconfigured producer fails fast.
    pub fn from_env(env: &HashMap<String, String>) -> Result<Self, MetricError> {
        let required = |key: &str| {
            env.get(key).cloned().ok_or_else(|| MetricError::MissingVariable(key.to_string()))
        };
        let host = required(ENV_HOSTNAME)?;
        let service = required(ENV_SERVICEDESC)?;
        let state = required(ENV_SERVICESTATE)?;
        let timet = required(ENV_TIMET)?;
        let summary = required(ENV_SERVICEOUTPUT)?;
        let details = env.get(ENV_LONGSERVICEOUTPUT).cloned().unwrap_or_default();

        let status = MetricStatus::parse(&state)?;
        let timestamp: u64 =
            timet.parse().map_err(|_| MetricError::InvalidTimestamp(timet.clone()))?;
        MetricEvent::new(host, service, status, timestamp, summary, details)
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn service(&self) -> &str {
        &self.service
    }

    pub fn status(&self) -> MetricStatus {
        self.status
    }

    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }

    pub fn summary(&self) -> &str {
        &self.summary
    }

    pub fn details(&self) -> &str {
        &self.details
    }

    /// Renders the event into a [`Message`] carrying the block format.
    ///
    /// The service name is echoed in a `destination-hint` header, which
    /// downstream routing may use or ignore.
    pub fn to_message(&self) -> Message {
        let body = format!(
            "hostName: {}\nmetricName: {}\nmetricStatus: {}\ntimestamp: {}\nsummaryData: {}\ndetailsData: {}\nEOT\n",
            self.host, self.service, self.status, self.timestamp, self.summary, self.details
        );
        Message::text(body)
            .with_header("destination-hint", &self.service)
            .expect("service name is a valid header value")
    }

    /// Parses a [`Message`] produced by [`MetricEvent::to_message`].
    ///
    /// This is the receiving side, so an unrecognized status string maps to
    /// UNKNOWN instead of failing.
    pub fn from_message(message: &Message) -> Result<Self, MetricError> {
        let body = std::str::from_utf8(message.body()).map_err(|_| MetricError::NotText)?;

        let mut rest = body;
        let host = take_line(&mut rest, "hostName")?.to_string();
        let service = take_line(&mut rest, "metricName")?.to_string();
        let status = MetricStatus::parse_lenient(take_line(&mut rest, "metricStatus")?);
        let ts_text = take_line(&mut rest, "timestamp")?;
        let timestamp: u64 =
            ts_text.parse().map_err(|_| MetricError::InvalidTimestamp(ts_text.to_string()))?;
        let summary = take_line(&mut rest, "summaryData")?.to_string();

        let details = rest
            .strip_prefix("detailsData: ")
            .ok_or(MetricError::MissingKey("detailsData"))?
            .strip_suffix("\nEOT\n")
            .ok_or(MetricError::MissingTerminator)?
            .to_string();

        MetricEvent::new(host, service, status, timestamp, summary, details)
    }
}

/// Consumes one `key: value` line from the front of `rest`.
fn take_line<'a>(rest: &mut &'a str, key: &'static str) -> Result<&'a str, MetricError> {
    let after_key = rest
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(": "))
        .ok_or(MetricError::MissingKey(key))?;
    let end = after_key.find('\n').ok_or(MetricError::MissingTerminator)?;
    *rest = &after_key[end + 1..];
    Ok(&after_key[..end])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_env() -> HashMap<String, String> {
        [
            (ENV_HOSTNAME, "wn01.example.org"),
            (ENV_SERVICEDESC, "org.wlcg.CE-JobSubmit"),
            (ENV_SERVICESTATE, "OK"),
            (ENV_TIMET, "1433116800"),
            (ENV_SERVICEOUTPUT, "job ok"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub(crate) fn sample_event() -> MetricEvent {
        MetricEvent::new(
            "wn01.example.org",
            "org.wlcg.CE-JobSubmit",
            MetricStatus::Ok,
            1433116800,
            "job ok",
            "",
        )
        .unwrap()
    }

    #[test]
    fn status_codes_are_the_standard_table() {
        assert_eq!(MetricStatus::Ok.code(), 0);
        assert_eq!(MetricStatus::Warning.code(), 1);
        assert_eq!(MetricStatus::Critical.code(), 2);
        assert_eq!(MetricStatus::Unknown.code(), 3);
        for code in 0..=3u8 {
            assert_eq!(MetricStatus::from_code(code).unwrap().code(), code);
        }
        assert!(MetricStatus::from_code(4).is_none());
    }

    #[test]
    fn from_env_maps_every_field() {
        let event = MetricEvent::from_env(&sample_env()).unwrap();
        assert_eq!(event, sample_event());
    }

    #[test]
    fn from_env_names_the_missing_variable() {
        let mut env = sample_env();
        env.remove(ENV_HOSTNAME);
        match MetricEvent::from_env(&env) {
            Err(MetricError::MissingVariable(v)) => assert_eq!(v, ENV_HOSTNAME),
            other => panic!("expected MissingVariable, got {other:?}"),
        }
    }

    #[test]
    fn from_env_parses_state_case_insensitively() {
        let mut env = sample_env();
        env.insert(ENV_SERVICESTATE.to_string(), "critical".to_string());
        assert_eq!(MetricEvent::from_env(&env).unwrap().status(), MetricStatus::Critical);
    }

    #[test]
    fn from_env_rejects_junk_state_and_timestamp() {
        let mut env = sample_env();
        env.insert(ENV_SERVICESTATE.to_string(), "FLAPPING".to_string());
        assert!(matches!(MetricEvent::from_env(&env), Err(MetricError::UnknownStatus(_))));

        let mut env = sample_env();
        env.insert(ENV_TIMET.to_string(), "-5".to_string());
        assert!(matches!(MetricEvent::from_env(&env), Err(MetricError::InvalidTimestamp(_))));
    }

    #[test]
    fn to_message_renders_the_frozen_block() {
        // Template oracle, assembled independently of the implementation.
        let expected = concat!(
            "hostName: wn01.example.org\n",
            "metricName: org.wlcg.CE-JobSubmit\n",
            "metricStatus: OK\n",
            "timestamp: 1433116800\n",
            "summaryData: job ok\n",
            "detailsData: \n",
            "EOT\n",
        );
        let m = sample_event().to_message();
        assert_eq!(std::str::from_utf8(m.body()).unwrap(), expected);
        assert!(m.is_text());
        assert_eq!(m.header_value("destination-hint"), Some("org.wlcg.CE-JobSubmit"));
    }

    #[test]
    fn multi_line_details_span_until_the_terminator() {
        let event = MetricEvent::new(
            "h",
            "svc",
            MetricStatus::Warning,
            7,
            "s",
            "l1\nl2",
        )
        .unwrap();
        let body = String::from_utf8(event.to_message().body().to_vec()).unwrap();
        assert!(body.ends_with("detailsData: l1\nl2\nEOT\n"));
        assert_eq!(MetricEvent::from_message(&event.to_message()).unwrap(), event);
    }

    #[test]
    fn from_message_is_liberal_about_status() {
        let block = "hostName: h\nmetricName: s\nmetricStatus: BOGUS\ntimestamp: 1\nsummaryData: x\ndetailsData: \nEOT\n";
        let event = MetricEvent::from_message(&Message::text(block)).unwrap();
        assert_eq!(event.status(), MetricStatus::Unknown);
    }

    #[test]
    fn from_message_rejects_truncated_blocks() {
        let no_eot = "hostName: h\nmetricName: s\nmetricStatus: OK\ntimestamp: 1\nsummaryData: x\ndetailsData: \n";
        assert!(matches!(
            MetricEvent::from_message(&Message::text(no_eot)),
            Err(MetricError::MissingTerminator)
        ));
        let missing_key = "hostName: h\nmetricStatus: OK\ntimestamp: 1\nsummaryData: x\ndetailsData: \nEOT\n";
        assert!(matches!(
            MetricEvent::from_message(&Message::text(missing_key)),
            Err(MetricError::MissingKey("metricName"))
        ));
    }

    #[test]
    fn details_with_bare_eot_line_is_rejected() {
        assert!(MetricEvent::new("h", "s", MetricStatus::Ok, 1, "x", "a\nEOT\nb").is_err());
        assert!(MetricEvent::new("h", "s", MetricStatus::Ok, 1, "x", "EOT").is_err());
        // "EOT" embedded inside a longer line is fine.
        assert!(MetricEvent::new("h", "s", MetricStatus::Ok, 1, "x", "not EOT here").is_ok());
    }

    fn arb_status() -> impl Strategy<Value = MetricStatus> {
        prop::sample::select(&MetricStatus::ALL[..])
    }

    /// Multi-line details; lowercase charset cannot form a bare "EOT" line.
    fn arb_details() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-z0-9 ,.]{0,30}", 0..4).prop_map(|lines| lines.join("\n"))
    }

    proptest! {
        #[test]
        fn block_round_trip(
            host in "[a-z][a-z0-9.-]{0,20}",
            service in "[A-Za-z][A-Za-z0-9._-]{0,20}",
            status in arb_status(),
            timestamp in 0u64..=u32::MAX as u64,
            summary in "[a-zA-Z0-9 ;:,._-]{0,40}",
            details in arb_details(),
        ) {
            let event = MetricEvent::new(host, service, status, timestamp, summary, details).unwrap();
            prop_assert_eq!(MetricEvent::from_message(&event.to_message()).unwrap(), event);
        }
    }
}
