//! TLS configuration from PEM material.
//!
//! The pipeline talks to one broker it already trusts, so the trust anchor
//! is always an explicit CA bundle; server certificates are verified against
//! it unconditionally. A client certificate and key are optional — whether
//! they are required is the broker's policy.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer};
use rustls::{ClientConfig, RootCertStore, ServerConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TlsError {
    #[error("cannot load PEM material from {path}: {detail}")]
    Pem { path: PathBuf, detail: String },

    #[error("client certificate and key must be given together")]
    IncompleteClientPair,

    #[error("TLS configuration rejected: {0}")]
    Rustls(#[from] rustls::Error),
}

/// Paths to the PEM material for one endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlsConfig {
    /// CA bundle the peer certificate must chain to.
    pub ca_bundle: PathBuf,
    /// Optional client certificate presented to the broker.
    pub client_cert: Option<PathBuf>,
    /// Private key matching `client_cert`.
    pub client_key: Option<PathBuf>,
}

impl TlsConfig {
    pub fn new(ca_bundle: impl Into<PathBuf>) -> Self {
        TlsConfig { ca_bundle: ca_bundle.into(), client_cert: None, client_key: None }
    }

    pub fn with_client_pair(
        mut self,
        cert: impl Into<PathBuf>,
        key: impl Into<PathBuf>,
    ) -> Self {
        self.client_cert = Some(cert.into());
        self.client_key = Some(key.into());
        self
    }

    /// Builds the rustls client configuration.
    pub fn client_config(&self) -> Result<Arc<ClientConfig>, TlsError> {
        let roots = load_root_store(&self.ca_bundle)?;
        let builder = base_client_builder().with_root_certificates(roots);
        let config = match (&self.client_cert, &self.client_key) {
            (Some(cert), Some(key)) => {
                builder.with_client_auth_cert(load_certs(cert)?, load_key(key)?)?
            }
            (None, None) => builder.with_no_client_auth(),
            _ => return Err(TlsError::IncompleteClientPair),
        };
        Ok(Arc::new(config))
    }
}

/// Server-side TLS material, used by the broker simulator.
#[derive(Debug, Clone)]
pub struct ServerTlsConfig {
    pub cert_chain: PathBuf,
    pub key: PathBuf,
    /// When set, clients must present a certificate chaining to this bundle.
    pub client_ca_bundle: Option<PathBuf>,
}

impl ServerTlsConfig {
    pub fn new(cert_chain: impl Into<PathBuf>, key: impl Into<PathBuf>) -> Self {
        ServerTlsConfig { cert_chain: cert_chain.into(), key: key.into(), client_ca_bundle: None }
    }

    pub fn require_client_certs(mut self, ca_bundle: impl Into<PathBuf>) -> Self {
        self.client_ca_bundle = Some(ca_bundle.into());
        self
    }

    /// Builds the rustls server configuration.
    pub fn server_config(&self) -> Result<Arc<ServerConfig>, TlsError> {
        let certs = load_certs(&self.cert_chain)?;
        let key = load_key(&self.key)?;
        let builder = ServerConfig::builder_with_provider(Arc::new(
            rustls::crypto::ring::default_provider(),
        ))
        .with_safe_default_protocol_versions()?;
        let config = match &self.client_ca_bundle {
            Some(bundle) => {
                let roots = load_root_store(bundle)?;
                let verifier = rustls::server::WebPkiClientVerifier::builder(Arc::new(roots))
                    .build()
                    .map_err(|e| TlsError::Rustls(rustls::Error::General(e.to_string())))?;
                builder.with_client_cert_verifier(verifier).with_single_cert(certs, key)?
            }
            None => builder.with_no_client_auth().with_single_cert(certs, key)?,
        };
        Ok(Arc::new(config))
    }
}

fn base_client_builder() -> rustls::ConfigBuilder<ClientConfig, rustls::WantsVerifier> {
    ClientConfig::builder_with_provider(Arc::new(rustls::crypto::ring::default_provider()))
        .with_safe_default_protocol_versions()
        .expect("default protocol versions are supported by the provider")
}

fn load_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, TlsError> {
    let certs: Vec<_> = CertificateDer::pem_file_iter(path)
        .map_err(|e| pem_err(path, e))?
        .collect::<Result<_, _>>()
        .map_err(|e| pem_err(path, e))?;
    if certs.is_empty() {
        return Err(TlsError::Pem {
            path: path.to_path_buf(),
            detail: "no certificates found".to_string(),
        });
    }
    Ok(certs)
}

fn load_key(path: &Path) -> Result<PrivateKeyDer<'static>, TlsError> {
    PrivateKeyDer::from_pem_file(path).map_err(|e| pem_err(path, e))
}

fn load_root_store(path: &Path) -> Result<RootCertStore, TlsError> {
    let mut store = RootCertStore::empty();
    for cert in load_certs(path)? {
        store.add(cert).map_err(TlsError::Rustls)?;
    }
    Ok(store)
}

fn pem_err(path: &Path, e: rustls::pki_types::pem::Error) -> TlsError {
    TlsError::Pem { path: path.to_path_buf(), detail: e.to_string() }
}
