//! Monitoring message pipeline toolkit.
//!
//! Events captured from a monitoring engine are queued durably on disk,
//! forwarded over STOMP (plain or TLS) through a broker with at-least-once
//! reliability, and converted back into passive-check command strings on
//! the receiving side. An in-memory broker simulator makes the whole
//! pipeline testable on loopback, and a small process supervisor keeps the
//! forwarding daemons running.
//!
//! The crates' moving parts, in pipeline order:
//!
//! * [`metric`] — validated monitoring events and their text block format
//! * [`message`] — the header-plus-body container and its JSON envelope
//! * [`dirq`] — the multi-process-safe directory queue
//! * [`stomp`] — wire codec, client session, heart-beating, TLS
//! * [`forwarder`] — moves messages queue-to-broker and broker-to-queue
//! * [`broker_sim`] — in-memory STOMP broker for tests and development
//! * [`nagios`] — event capture and passive-check emission
//! * [`supervisor`] — keeps the forwarders alive
//! * [`config`] — the shared INI configuration format

pub mod backoff;
pub mod broker_sim;
pub mod config;
pub mod dirq;
pub mod forwarder;
pub mod message;
pub mod metric;
pub mod nagios;
pub mod stomp;
pub mod supervisor;

pub use config::PipelineConfig;
pub use dirq::{DirQueue, ElementName};
pub use forwarder::{BrokerUri, ForwardReport, ForwarderConfig, Sink, Source};
pub use message::Message;
pub use metric::{MetricEvent, MetricStatus};
pub use nagios::PassiveCheck;
pub use stomp::{AckMode, ClientSession, Frame, SessionConfig, TlsConfig};
pub use supervisor::{ServiceSpec, Supervisor, SupervisorStatus};
