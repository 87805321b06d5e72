//! STOMP wire codec, client session and TLS plumbing.

pub mod frame;
pub mod heartbeat;
pub mod session;
pub mod tls;
pub mod transport;

pub use frame::{encode, Command, Frame, FrameDecoder, FrameError, Version};
pub use heartbeat::negotiate;
pub use session::{
    AckMode, ClientSession, SessionConfig, SessionEvent, SessionState, StompError,
};
pub use tls::{ServerTlsConfig, TlsConfig, TlsError};
pub use transport::{Transport, TransportError};
