//! TLS-path tests: locally generated CA, server and client certificates,
//! mutual verification between the session and the broker simulator.

use std::path::Path;
use std::time::{Duration, Instant};

use gridpipe_core::broker_sim::{self, BrokerConfig};
use gridpipe_core::stomp::session::{ClientSession, SessionConfig, SessionEvent};
use gridpipe_core::stomp::tls::{ServerTlsConfig, TlsConfig};
use gridpipe_core::stomp::transport::Transport;
use gridpipe_core::stomp::AckMode;

mod testpki {
    use rcgen::{
        BasicConstraints, CertificateParams, DnType, ExtendedKeyUsagePurpose, IsCa, Issuer,
        KeyPair, KeyUsagePurpose, SanType,
    };
    use std::path::{Path, PathBuf};

    pub struct Pki {
        pub ca: PathBuf,
        pub server_cert: PathBuf,
        pub server_key: PathBuf,
        pub client_cert: PathBuf,
        pub client_key: PathBuf,
    }

    /// Writes a fresh CA plus server and client certificates (PEM) for
    /// localhost into `dir`.
    pub fn generate(dir: &Path) -> Pki {
        let ca_key = KeyPair::generate().unwrap();
        let mut ca_params = CertificateParams::new(Vec::<String>::new()).unwrap();
        ca_params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        ca_params.distinguished_name.push(DnType::CommonName, "gridpipe test ca");
        ca_params.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::CrlSign];
        let ca_cert = ca_params.self_signed(&ca_key).unwrap();
        let ca_pem = ca_cert.pem();
        let issuer = Issuer::new(ca_params, ca_key);

        let server_key = KeyPair::generate().unwrap();
        let mut server_params = CertificateParams::new(vec!["localhost".to_string()]).unwrap();
        server_params
            .subject_alt_names
            .push(SanType::IpAddress("127.0.0.1".parse().unwrap()));
        server_params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth];
        let server_cert = server_params.signed_by(&server_key, &issuer).unwrap();

        let client_key = KeyPair::generate().unwrap();
        let mut client_params = CertificateParams::new(Vec::<String>::new()).unwrap();
        client_params.distinguished_name.push(DnType::CommonName, "gridpipe test client");
        client_params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ClientAuth];
        let client_cert = client_params.signed_by(&client_key, &issuer).unwrap();

        let write = |name: &str, pem: String| {
            let path = dir.join(name);
            std::fs::write(&path, pem).unwrap();
            path
        };
        Pki {
            ca: write("ca.pem", ca_pem),
            server_cert: write("server.pem", server_cert.pem()),
            server_key: write("server.key", server_key.serialize_pem()),
            client_cert: write("client.pem", client_cert.pem()),
            client_key: write("client.key", client_key.serialize_pem()),
        }
    }
}

fn tls_broker(pki: &testpki::Pki, mutual: bool) -> broker_sim::BrokerHandle {
    let mut tls = ServerTlsConfig::new(&pki.server_cert, &pki.server_key);
    if mutual {
        tls = tls.require_client_certs(&pki.ca);
    }
    broker_sim::serve(
        "127.0.0.1:0",
        BrokerConfig { tls: Some(tls), ..BrokerConfig::default() },
    )
    .unwrap()
}

fn tls_connect(port: u16, tls: &TlsConfig) -> Result<ClientSession, String> {
    let transport = Transport::connect_tls("localhost", port, Duration::from_secs(5), tls)
        .map_err(|e| e.to_string())?;
    ClientSession::connect(transport, &SessionConfig::default()).map_err(|e| e.to_string())
}

fn client_tls(pki: &testpki::Pki, with_client_cert: bool) -> TlsConfig {
    let mut tls = TlsConfig::new(&pki.ca);
    if with_client_cert {
        tls = tls.with_client_pair(&pki.client_cert, &pki.client_key);
    }
    tls
}

#[test]
fn mutual_tls_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pki = testpki::generate(dir.path());
    let broker = tls_broker(&pki, true);

    let mut producer = tls_connect(broker.port(), &client_tls(&pki, true)).unwrap();
    let mut consumer = tls_connect(broker.port(), &client_tls(&pki, true)).unwrap();
    consumer.subscribe("/queue/tls", AckMode::Auto).unwrap();

    let receipt = producer.send("/queue/tls", &[], b"over tls", true).unwrap().unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match producer.poll(deadline).unwrap() {
            SessionEvent::Receipt(id) if id == receipt => break,
            SessionEvent::Idle => panic!("no receipt over TLS"),
            _ => continue,
        }
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match consumer.poll(deadline).unwrap() {
            SessionEvent::Message(frame) => {
                assert_eq!(frame.body, b"over tls");
                break;
            }
            SessionEvent::Idle => panic!("no delivery over TLS"),
            _ => continue,
        }
    }
}

#[test]
fn wrong_ca_is_rejected_by_the_client() {
    let dir = tempfile::tempdir().unwrap();
    let pki = testpki::generate(dir.path());
    let imposter = testpki::generate(&{
        let p = dir.path().join("other");
        std::fs::create_dir(&p).unwrap();
        p
    });
    let broker = tls_broker(&pki, false);

    // The client trusts a different CA: the handshake must fail.
    let err = match tls_connect(broker.port(), &client_tls(&imposter, false)) {
        Err(e) => e,
        Ok(_) => panic!("handshake succeeded against an untrusted server"),
    };
    assert!(
        err.to_lowercase().contains("certificate") || err.to_lowercase().contains("unknown"),
        "unexpected failure text: {err}"
    );
}

#[test]
fn missing_client_cert_fails_mutual_auth() {
    let dir = tempfile::tempdir().unwrap();
    let pki = testpki::generate(dir.path());
    let broker = tls_broker(&pki, true);

    match tls_connect(broker.port(), &client_tls(&pki, false)) {
        // Rustls may surface the rejection during the handshake or on the
        // first read, depending on timing.
        Err(_) => {}
        Ok(mut session) => {
            let deadline = Instant::now() + Duration::from_secs(2);
            let dead = loop {
                match session.poll(deadline) {
                    Err(_) => break true,
                    Ok(SessionEvent::Idle) => break false,
                    Ok(_) => continue,
                }
            };
            assert!(dead, "session should not survive without a client certificate");
        }
    }
}

#[test]
fn tls_config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pem");
    let tls = TlsConfig::new(&missing);
    assert!(tls.client_config().is_err());

    std::fs::write(dir.path().join("empty.pem"), "").unwrap();
    let tls = TlsConfig::new(dir.path().join("empty.pem"));
    assert!(tls.client_config().is_err());

    // Cert without key (and vice versa) is a configuration error.
    let pki = testpki::generate(dir.path());
    let broken = TlsConfig {
        ca_bundle: pki.ca.clone(),
        client_cert: Some(pki.client_cert.clone()),
        client_key: None,
    };
    assert!(matches!(
        broken.client_config(),
        Err(gridpipe_core::stomp::TlsError::IncompleteClientPair)
    ));
    let _ = Path::new("x");
}
