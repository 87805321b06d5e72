//! Byte transport under a session: plain TCP or TLS over TCP, with read
//! timeouts so polling loops stay responsive to deadlines and stop signals.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use rustls::pki_types::ServerName;
use rustls::{ClientConnection, StreamOwned};

use super::tls::{TlsConfig, TlsError};

/// An established client byte stream.
pub enum Transport {
    Tcp(TcpStream),
    Tls(Box<StreamOwned<ClientConnection, TcpStream>>),
}

impl Transport {
    /// Connects over plain TCP.
    pub fn connect_tcp(host: &str, port: u16, timeout: Duration) -> io::Result<Transport> {
        Ok(Transport::Tcp(connect_stream(host, port, timeout)?))
    }

    /// Connects and completes a TLS handshake, verifying the server
    /// certificate against the configured CA bundle.
    pub fn connect_tls(
        host: &str,
        port: u16,
        timeout: Duration,
        tls: &TlsConfig,
    ) -> Result<Transport, TransportError> {
        let stream = connect_stream(host, port, timeout)?;
        let config = tls.client_config()?;
        let name = ServerName::try_from(host.to_string())
            .map_err(|_| TransportError::BadServerName(host.to_string()))?;
        let mut conn = ClientConnection::new(config, name).map_err(TlsError::Rustls)?;
        stream.set_read_timeout(Some(timeout))?;
        // Drive the handshake eagerly so certificate problems surface here
        // rather than on the first frame exchange.
        while conn.is_handshaking() {
            conn.complete_io(&mut (&stream))?;
        }
        stream.set_read_timeout(None)?;
        Ok(Transport::Tls(Box::new(StreamOwned::new(conn, stream))))
    }

    /// Bounds how long a single read may block. `None` blocks indefinitely.
    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        // A zero timeout means "no timeout" to the socket API; clamp up.
        let timeout = timeout.map(|t| t.max(Duration::from_millis(1)));
        self.tcp().set_read_timeout(timeout)
    }

    fn tcp(&self) -> &TcpStream {
        match self {
            Transport::Tcp(s) => s,
            Transport::Tls(s) => s.get_ref(),
        }
    }

    /// Half-closes the write side, letting the peer observe EOF.
    pub fn shutdown(&self) {
        let _ = self.tcp().shutdown(std::net::Shutdown::Both);
    }
}

impl Read for Transport {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Transport::Tcp(s) => s.read(buf),
            Transport::Tls(s) => s.read(buf),
        }
    }
}

impl Write for Transport {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Transport::Tcp(s) => s.write(buf),
            Transport::Tls(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Transport::Tcp(s) => s.flush(),
            Transport::Tls(s) => s.flush(),
        }
    }
}

fn connect_stream(host: &str, port: u16, timeout: Duration) -> io::Result<TcpStream> {
    let mut last_err = None;
    for addr in (host, port).to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(stream) => {
                stream.set_nodelay(true)?;
                return Ok(stream);
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        io::Error::new(io::ErrorKind::AddrNotAvailable, format!("no addresses for {host}"))
    }))
}

/// Errors establishing a transport.
#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Tls(#[from] TlsError),

    #[error("{0:?} is not a valid TLS server name")]
    BadServerName(String),
}

/// True for error kinds that mean "no data yet" on a timed-out read.
pub(crate) fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}
