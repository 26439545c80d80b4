//! Local DoH server with injectable faults.
//!
//! Each [`Fault`] reproduces one way a real resolver can fail, so that every
//! [`ErrorClass`](crate::transport::ErrorClass) can be triggered on loopback.
//! Certificates come from a throwaway CA ([`MockPki`]) that clients add to
//! their trust store.

use std::convert::Infallible;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use bytes::Bytes;
use http::{header, Method, Request, Response, StatusCode};
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::server::conn::{http1, http2};
use hyper::service::service_fn;
use hyper_util::rt::{TokioExecutor, TokioIo};
use rcgen::{BasicConstraints, CertificateParams, DnType, ExtendedKeyUsagePurpose, IsCa, KeyPair, KeyUsagePurpose};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer};
use rustls::ServerConfig;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;
use tokio_rustls::TlsAcceptor;

use crate::transport::DNS_MESSAGE;
use crate::wire;

#[derive(Debug, thiserror::Error)]
pub enum MockError {
    #[error("mock server I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("generating mock certificate: {0}")]
    Cert(#[from] rcgen::Error),
    #[error("mock TLS configuration: {0}")]
    Tls(#[from] rustls::Error),
}

/// Failure injected by a [`MockServer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    /// Answer correctly.
    #[default]
    None,
    /// Reply with this HTTP status and an empty body.
    HttpStatus(u16),
    /// 200 with a DNS content type but the body `hello`.
    GarbageBody,
    /// Valid DNS answer whose ID differs from the query.
    MismatchedId,
    /// Answer the ClientHello with a fatal `protocol_version` alert.
    TlsVersionMismatch,
    /// Accept TCP and never send a byte.
    StallTls,
    /// Negotiate h2, then send a DATA frame on stream 0.
    H2FramingViolation,
    /// Finish the TLS handshake, then close without an HTTP response.
    CloseAfterHandshake,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::None => f.write_str("none"),
            Fault::HttpStatus(s) => write!(f, "status-{s}"),
            Fault::GarbageBody => f.write_str("garbage-body"),
            Fault::MismatchedId => f.write_str("mismatched-id"),
            Fault::TlsVersionMismatch => f.write_str("tls-version-mismatch"),
            Fault::StallTls => f.write_str("stall-tls"),
            Fault::H2FramingViolation => f.write_str("h2-framing"),
            Fault::CloseAfterHandshake => f.write_str("close-after-handshake"),
        }
    }
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" => Fault::None,
            "garbage-body" => Fault::GarbageBody,
            "mismatched-id" => Fault::MismatchedId,
            "tls-version-mismatch" => Fault::TlsVersionMismatch,
            "stall-tls" => Fault::StallTls,
            "h2-framing" => Fault::H2FramingViolation,
            "close-after-handshake" => Fault::CloseAfterHandshake,
            other => match other.strip_prefix("status-").map(str::parse::<u16>) {
                Some(Ok(code)) if (100..=999).contains(&code) => Fault::HttpStatus(code),
                _ => return Err(format!("unknown fault {other:?}")),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TlsPolicy {
    #[default]
    Any,
    Tls12Only,
    Tls13Only,
}

impl FromStr for TlsPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any" => Ok(TlsPolicy::Any),
            "1.2" => Ok(TlsPolicy::Tls12Only),
            "1.3" => Ok(TlsPolicy::Tls13Only),
            _ => Err(format!("unknown TLS policy {s:?} (any, 1.2, 1.3)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlpnPolicy {
    #[default]
    H2AndHttp11,
    Http11Only,
}

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub fault: Fault,
    pub tls: TlsPolicy,
    pub alpn: AlpnPolicy,
    /// Added before every HTTP response.
    pub delay: Duration,
    pub rcode: u8,
    /// Names placed in the server certificate.
    pub hostnames: Vec<String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            fault: Fault::None,
            tls: TlsPolicy::Any,
            alpn: AlpnPolicy::H2AndHttp11,
            delay: Duration::ZERO,
            rcode: 0,
            hostnames: vec!["localhost".into(), "127.0.0.1".into()],
        }
    }
}

impl MockConfig {
    pub fn with_fault(fault: Fault) -> Self {
        MockConfig {
            fault,
            ..Self::default()
        }
    }
}

/// Throwaway certificate authority for mock servers.
pub struct MockPki {
    ca: rcgen::Certificate,
    ca_key: KeyPair,
}

impl MockPki {
    pub fn generate() -> Result<MockPki, MockError> {
        let ca_key = KeyPair::generate()?;
        let mut params = CertificateParams::new(Vec::<String>::new())?;
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.distinguished_name.push(DnType::CommonName, "dohscope mock CA");
        params.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::CrlSign, KeyUsagePurpose::DigitalSignature];
        let ca = params.self_signed(&ca_key)?;
        Ok(MockPki { ca, ca_key })
    }

    pub fn ca_der(&self) -> CertificateDer<'static> {
        self.ca.der().clone()
    }

    pub fn ca_pem(&self) -> String {
        self.ca.pem()
    }

    /// Leaf certificate for `names`, signed by this CA.
    pub fn issue(&self, names: &[String]) -> Result<(Vec<CertificateDer<'static>>, PrivateKeyDer<'static>), MockError> {
        let key = KeyPair::generate()?;
        let mut params = CertificateParams::new(names.to_vec())?;
        if let Some(first) = names.first() {
            params.distinguished_name.push(DnType::CommonName, first.as_str());
        }
        params.is_ca = IsCa::NoCa;
        params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth];
        let cert = params.signed_by(&key, &self.ca, &self.ca_key)?;
        let key = PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(key.serialize_der()));
        Ok((vec![cert.der().clone(), self.ca_der()], key))
    }
}

struct Shared {
    config: MockConfig,
    acceptor: TlsAcceptor,
    requests: AtomicUsize,
    connections: AtomicUsize,
}

/// A running mock resolver. Stops accepting when dropped.
pub struct MockServer {
    addr: SocketAddr,
    pki: Arc<MockPki>,
    shared: Arc<Shared>,
    task: JoinHandle<()>,
}

impl MockServer {
    /// Starts on an ephemeral loopback port with a fresh CA.
    pub async fn start(config: MockConfig) -> Result<MockServer, MockError> {
        let pki = Arc::new(MockPki::generate()?);
        Self::start_on("127.0.0.1:0".parse().unwrap(), config, pki).await
    }

    pub async fn start_on(bind: SocketAddr, config: MockConfig, pki: Arc<MockPki>) -> Result<MockServer, MockError> {
        let (chain, key) = pki.issue(&config.hostnames)?;
        let provider = Arc::new(rustls::crypto::ring::default_provider());
        let versions: &[&'static rustls::SupportedProtocolVersion] = match config.tls {
            TlsPolicy::Any => &[&rustls::version::TLS13, &rustls::version::TLS12],
            TlsPolicy::Tls12Only => &[&rustls::version::TLS12],
            TlsPolicy::Tls13Only => &[&rustls::version::TLS13],
        };
        let mut tls = ServerConfig::builder_with_provider(provider)
            .with_protocol_versions(versions)?
            .with_no_client_auth()
            .with_single_cert(chain, key)?;
        tls.alpn_protocols = match (config.fault, config.alpn) {
            (Fault::H2FramingViolation, _) => vec![b"h2".to_vec()],
            (_, AlpnPolicy::H2AndHttp11) => vec![b"h2".to_vec(), b"http/1.1".to_vec()],
            (_, AlpnPolicy::Http11Only) => vec![b"http/1.1".to_vec()],
        };

        let listener = TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            acceptor: TlsAcceptor::from(Arc::new(tls)),
            requests: AtomicUsize::new(0),
            connections: AtomicUsize::new(0),
        });
        let accept_shared = shared.clone();
        let task = tokio::spawn(async move {
            loop {
                let Ok((tcp, _)) = listener.accept().await else { continue };
                accept_shared.connections.fetch_add(1, Ordering::Relaxed);
                let shared = accept_shared.clone();
                tokio::spawn(async move {
                    if let Err(e) = serve_connection(tcp, shared).await {
                        log::debug!("mock connection ended: {e}");
                    }
                });
            }
        });
        Ok(MockServer { addr, pki, shared, task })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn pki(&self) -> &Arc<MockPki> {
        &self.pki
    }

    pub fn ca_der(&self) -> CertificateDer<'static> {
        self.pki.ca_der()
    }

    /// HTTP requests answered so far.
    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::Relaxed)
    }

    /// TCP connections accepted so far.
    pub fn connections(&self) -> usize {
        self.shared.connections.load(Ordering::Relaxed)
    }

    /// `https://{host}:{port}/dns-query` for this server.
    pub fn url_for(&self, host: &str) -> String {
        format!("https://{host}:{}/dns-query", self.port())
    }

    /// Runs until the task is aborted.
    pub async fn wait(&mut self) {
        let _ = (&mut self.task).await;
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

// TLS 1.2 record: fatal alert, protocol_version (70).
const PROTOCOL_VERSION_ALERT: [u8; 7] = [0x15, 0x03, 0x03, 0x00, 0x02, 0x02, 0x46];
// DATA frame on stream 0 carrying four bytes: a connection error in HTTP/2.
const DATA_ON_STREAM_ZERO: [u8; 13] = [0, 0, 4, 0x0, 0x0, 0, 0, 0, 0, b'b', b'a', b'd', b'!'];

async fn serve_connection(mut tcp: TcpStream, shared: Arc<Shared>) -> std::io::Result<()> {
    let mut scratch = vec![0u8; 4096];
    match shared.config.fault {
        Fault::TlsVersionMismatch => {
            let _ = tcp.read(&mut scratch).await?;
            tcp.write_all(&PROTOCOL_VERSION_ALERT).await?;
            tcp.shutdown().await?;
            return Ok(());
        }
        Fault::StallTls => {
            while tcp.read(&mut scratch).await? > 0 {}
            return Ok(());
        }
        _ => {}
    }

    let mut tls = shared.acceptor.accept(tcp).await?;
    match shared.config.fault {
        Fault::CloseAfterHandshake => {
            let _ = tokio::time::timeout(Duration::from_millis(200), tls.read(&mut scratch)).await;
            tls.shutdown().await?;
            return Ok(());
        }
        Fault::H2FramingViolation => {
            // Client preface plus its SETTINGS frame.
            let _ = tokio::time::timeout(Duration::from_millis(200), tls.read(&mut scratch)).await;
            tls.write_all(&DATA_ON_STREAM_ZERO).await?;
            tls.flush().await?;
            let _ = tokio::time::timeout(Duration::from_secs(5), async {
                while matches!(tls.read(&mut scratch).await, Ok(n) if n > 0) {}
            })
            .await;
            return Ok(());
        }
        _ => {}
    }

    let is_h2 = tls.get_ref().1.alpn_protocol() == Some(b"h2");
    let io = TokioIo::new(tls);
    let svc_shared = shared.clone();
    let service = service_fn(move |req| respond(req, svc_shared.clone()));
    let served = if is_h2 {
        http2::Builder::new(TokioExecutor::new()).serve_connection(io, service).await
    } else {
        http1::Builder::new().serve_connection(io, service).await
    };
    served.map_err(std::io::Error::other)
}

fn plain(status: StatusCode, body: &'static [u8]) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(Bytes::from_static(body)));
    *resp.status_mut() = status;
    resp
}

fn dns(body: Vec<u8>) -> Response<Full<Bytes>> {
    let mut resp = Response::new(Full::new(Bytes::from(body)));
    resp.headers_mut().insert(header::CONTENT_TYPE, header::HeaderValue::from_static(DNS_MESSAGE));
    resp
}

async fn respond(req: Request<Incoming>, shared: Arc<Shared>) -> Result<Response<Full<Bytes>>, Infallible> {
    shared.requests.fetch_add(1, Ordering::Relaxed);
    let config = &shared.config;
    let query = match *req.method() {
        Method::POST => req.into_body().collect().await.ok().map(|b| b.to_bytes().to_vec()),
        Method::GET => req.uri().query().and_then(|q| {
            url::form_urlencoded::parse(q.as_bytes())
                .find(|(k, _)| k == "dns")
                .and_then(|(_, v)| base64::engine::general_purpose::URL_SAFE_NO_PAD.decode(v.as_bytes()).ok())
        }),
        _ => return Ok(plain(StatusCode::METHOD_NOT_ALLOWED, b"")),
    };
    if !config.delay.is_zero() {
        tokio::time::sleep(config.delay).await;
    }
    let Some(query) = query else {
        return Ok(plain(StatusCode::BAD_REQUEST, b"missing dns query"));
    };
    let resp = match config.fault {
        Fault::HttpStatus(code) => plain(StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR), b""),
        Fault::GarbageBody => dns(b"hello".to_vec()),
        Fault::MismatchedId | Fault::None => match wire::synthesize_response(&query, config.rcode, &[[192, 0, 2, 1]]) {
            Ok(mut body) => {
                if config.fault == Fault::MismatchedId {
                    body[0] ^= 0xff;
                }
                dns(body)
            }
            Err(_) => plain(StatusCode::BAD_REQUEST, b"malformed dns query"),
        },
        _ => plain(StatusCode::INTERNAL_SERVER_ERROR, b""),
    };
    Ok(resp)
}
