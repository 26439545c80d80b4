//! One timed DoH exchange over HTTPS.
//!
//! Each measurement resolves the resolver hostname, opens a TCP connection,
//! performs a TLS handshake offering TLS 1.3 and 1.2 with ALPN `h2` then
//! `http/1.1`, sends the query and reads the body. Phase marks are taken on
//! the monotonic clock relative to the start of the attempt. Failures never
//! propagate as errors; they are classified into [`ErrorClass`] and returned
//! inside the [`QueryMeasurement`].

mod error;
mod resolve;

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use bytes::Bytes;
use chrono::{DateTime, Utc};
use http::{header, Method, Request, Uri};
use http_body_util::{BodyExt, Full, Limited};
use hyper::client::conn::{http1, http2};
use hyper_util::rt::{TokioExecutor, TokioIo};
use rustls::pki_types::{CertificateDer, ServerName};
use rustls::{ClientConfig, ProtocolVersion, RootCertStore};
use serde::{Deserialize, Serialize};
use tokio::net::TcpStream;
use tokio::time::timeout_at;
use tokio_rustls::TlsConnector;

use crate::catalog::ResolverEndpoint;
use crate::wire::{self, DnsQuestion, NameError, QueryOptions};

pub use error::{classify_failure, ErrorClass, FailureCause, Stage, TransportFailure};
pub use resolve::HostResolver;

pub const DNS_MESSAGE: &str = "application/dns-message";
/// Largest DNS message a DoH body may carry.
pub const MAX_BODY: usize = 65_535;

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_TOTAL_TIMEOUT: Duration = Duration::from_secs(15);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HttpMethod {
    #[default]
    Post,
    Get,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HttpVersion {
    #[serde(rename = "h1")]
    Http1,
    #[serde(rename = "h2")]
    Http2,
}

impl fmt::Display for HttpVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HttpVersion::Http1 => "h1",
            HttpVersion::Http2 => "h2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TlsVersion {
    #[serde(rename = "1.2")]
    Tls12,
    #[serde(rename = "1.3")]
    Tls13,
}

impl fmt::Display for TlsVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TlsVersion::Tls12 => "1.2",
            TlsVersion::Tls13 => "1.3",
        })
    }
}

/// Cumulative phase marks in milliseconds from the start of the attempt.
/// A phase is `None` when the attempt never completed it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingBreakdown {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_resolution_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcp_connect_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tls_handshake_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_byte_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_ms: Option<f64>,
}

impl TimingBreakdown {
    pub fn phases(&self) -> [Option<f64>; 5] {
        [
            self.name_resolution_ms,
            self.tcp_connect_ms,
            self.tls_handshake_ms,
            self.first_byte_ms,
            self.total_ms,
        ]
    }

    /// Present phases are non-negative and non-decreasing.
    pub fn is_monotone(&self) -> bool {
        let present: Vec<f64> = self.phases().into_iter().flatten().collect();
        present.first().is_none_or(|v| *v >= 0.0) && present.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn is_empty(&self) -> bool {
        self.phases().iter().all(Option::is_none)
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// One DoH attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMeasurement {
    pub resolver_url: String,
    pub vantage: String,
    pub domain: String,
    pub timestamp_utc: DateTime<Utc>,
    pub timing: TimingBreakdown,
    pub outcome: ErrorClass,
    pub detail: Option<String>,
    pub http_status: Option<u16>,
    pub rcode: Option<u8>,
    pub http_version: Option<HttpVersion>,
    pub tls_version: Option<TlsVersion>,
}

/// An encoded query together with what is needed to validate the answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DohQuery {
    pub question: DnsQuestion,
    pub id: u16,
    pub payload: Bytes,
}

impl DohQuery {
    pub fn new(question: DnsQuestion, opts: &QueryOptions) -> Result<DohQuery, NameError> {
        let payload = wire::encode_query_with(&question, opts)?;
        Ok(DohQuery {
            question,
            id: opts.id,
            payload: Bytes::from(payload),
        })
    }

    /// `IN A` query for `domain` with the default options (ID 0, RD set).
    pub fn a(domain: &str) -> Result<DohQuery, NameError> {
        Self::new(DnsQuestion::a(domain), &QueryOptions::default())
    }
}

#[derive(Debug, Clone)]
pub struct TransportOptions {
    pub connect_timeout: Duration,
    pub total_timeout: Duration,
    pub method: HttpMethod,
    /// Keep connections open between measurements to the same origin.
    pub reuse: bool,
    /// Offer `h2` in ALPN; when false only `http/1.1` is offered.
    pub offer_http2: bool,
    /// Trust the bundled Mozilla root set.
    pub webpki_roots: bool,
    /// Additional trust anchors, e.g. a mock server's CA.
    pub extra_roots: Vec<CertificateDer<'static>>,
    pub resolver: HostResolver,
}

impl Default for TransportOptions {
    fn default() -> Self {
        TransportOptions {
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            total_timeout: DEFAULT_TOTAL_TIMEOUT,
            method: HttpMethod::Post,
            reuse: false,
            offer_http2: true,
            webpki_roots: true,
            extra_roots: Vec::new(),
            resolver: HostResolver::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error("reading CA file {path}: {source}")]
    CaFile { path: String, source: io::Error },
    #[error("CA file {0} holds no certificates")]
    EmptyCaFile(String),
    #[error("rejected trust anchor: {0}")]
    BadRoot(rustls::Error),
    #[error("TLS configuration: {0}")]
    Tls(rustls::Error),
}

/// Reads every certificate from a PEM file.
pub fn load_pem_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, SetupError> {
    let ca_err = |source| SetupError::CaFile {
        path: path.display().to_string(),
        source,
    };
    let data = std::fs::read(path).map_err(ca_err)?;
    let certs = rustls_pemfile::certs(&mut data.as_slice())
        .collect::<Result<Vec<_>, _>>()
        .map_err(ca_err)?;
    if certs.is_empty() {
        return Err(SetupError::EmptyCaFile(path.display().to_string()));
    }
    Ok(certs)
}

/// What the handshake settled on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Negotiated {
    pub http: HttpVersion,
    pub tls: TlsVersion,
}

enum Sender {
    H1(http1::SendRequest<Full<Bytes>>),
    H2(http2::SendRequest<Full<Bytes>>),
}

/// Error reported by the task driving a connection, if it ended badly.
type DriverSlot = Arc<Mutex<Option<TransportFailure>>>;

struct Connection {
    sender: Sender,
    negotiated: Negotiated,
    driver_error: DriverSlot,
}

impl Connection {
    fn is_closed(&self) -> bool {
        match &self.sender {
            Sender::H1(s) => s.is_closed(),
            Sender::H2(s) => s.is_closed(),
        }
    }
}

/// Phase marks collected while an attempt runs.
#[derive(Default)]
struct Marks {
    resolved: Option<Duration>,
    connected: Option<Duration>,
    handshaken: Option<Duration>,
    first_byte: Option<Duration>,
    done: Option<Duration>,
}

impl Marks {
    fn breakdown(&self) -> TimingBreakdown {
        TimingBreakdown {
            name_resolution_ms: self.resolved.map(ms),
            tcp_connect_ms: self.connected.map(ms),
            tls_handshake_ms: self.handshaken.map(ms),
            first_byte_ms: self.first_byte.map(ms),
            total_ms: self.done.map(ms),
        }
    }
}

/// DoH client. Cheap to share behind an `Arc`; measurements may run
/// concurrently.
pub struct DohClient {
    opts: TransportOptions,
    tls: Arc<ClientConfig>,
    pool: Mutex<HashMap<String, Connection>>,
}

impl DohClient {
    pub fn new(opts: TransportOptions) -> Result<DohClient, SetupError> {
        let mut roots = RootCertStore::empty();
        if opts.webpki_roots {
            roots.extend(webpki_roots::TLS_SERVER_ROOTS.iter().cloned());
        }
        for cert in &opts.extra_roots {
            roots.add(cert.clone()).map_err(SetupError::BadRoot)?;
        }
        let provider = Arc::new(rustls::crypto::ring::default_provider());
        let mut config = ClientConfig::builder_with_provider(provider)
            .with_protocol_versions(&[&rustls::version::TLS13, &rustls::version::TLS12])
            .map_err(SetupError::Tls)?
            .with_root_certificates(roots)
            .with_no_client_auth();
        config.alpn_protocols = if opts.offer_http2 {
            vec![b"h2".to_vec(), b"http/1.1".to_vec()]
        } else {
            vec![b"http/1.1".to_vec()]
        };
        if !opts.reuse {
            // Every measurement pays for a full handshake.
            config.resumption = rustls::client::Resumption::disabled();
        }
        Ok(DohClient {
            opts,
            tls: Arc::new(config),
            pool: Mutex::new(HashMap::new()),
        })
    }

    pub fn options(&self) -> &TransportOptions {
        &self.opts
    }

    /// Runs one query against `endpoint` and records the outcome.
    pub async fn measure(&self, endpoint: &ResolverEndpoint, query: &DohQuery, vantage: &str) -> QueryMeasurement {
        let timestamp_utc = Utc::now();
        let start = Instant::now();
        let mut marks = Marks::default();
        let mut negotiated = None;
        let result = self.exchange(endpoint, query, start, &mut marks, &mut negotiated).await;

        let mut m = QueryMeasurement {
            resolver_url: endpoint.url.to_string(),
            vantage: vantage.to_string(),
            domain: query.question.name.clone(),
            timestamp_utc,
            timing: marks.breakdown(),
            outcome: ErrorClass::Success,
            detail: None,
            http_status: None,
            rcode: None,
            http_version: negotiated.map(|n: Negotiated| n.http),
            tls_version: negotiated.map(|n| n.tls),
        };
        match result {
            Ok(rcode) => m.rcode = Some(rcode),
            Err(failure) => {
                m.outcome = failure.class();
                m.http_status = failure.http_status();
                m.detail = Some(failure.to_string());
            }
        }
        m
    }

    /// Resolves, connects and handshakes, reporting the negotiated versions.
    pub async fn negotiate(&self, endpoint: &ResolverEndpoint) -> Result<Negotiated, TransportFailure> {
        let start = Instant::now();
        let mut marks = Marks::default();
        let conn = self.open(endpoint, start, &mut marks).await?;
        Ok(conn.negotiated)
    }

    async fn exchange(
        &self,
        endpoint: &ResolverEndpoint,
        query: &DohQuery,
        start: Instant,
        marks: &mut Marks,
        negotiated: &mut Option<Negotiated>,
    ) -> Result<u8, TransportFailure> {
        let origin = endpoint.url.origin().ascii_serialization();
        let pooled = if self.opts.reuse {
            let mut pool = self.pool.lock().unwrap();
            pool.remove(&origin).filter(|c| !c.is_closed())
        } else {
            None
        };
        let mut conn = match pooled {
            Some(conn) => conn,
            None => self.open(endpoint, start, marks).await?,
        };
        *negotiated = Some(conn.negotiated);

        let deadline = start + self.opts.total_timeout;
        let result = send_query(&mut conn, endpoint, query, self.opts.method, start, deadline, marks).await;
        if self.opts.reuse && !conn.is_closed() {
            self.pool.lock().unwrap().insert(origin, conn);
        }
        result
    }

    async fn open(&self, endpoint: &ResolverEndpoint, start: Instant, marks: &mut Marks) -> Result<Connection, TransportFailure> {
        let setup_deadline = start + self.opts.connect_timeout.min(self.opts.total_timeout);
        let deadline = tokio::time::Instant::from_std(setup_deadline);
        let host = endpoint.hostname.as_str();
        let port = endpoint.port();

        let addrs = match timeout_at(deadline, self.opts.resolver.lookup(host, port)).await {
            Err(_) => return Err(TransportFailure::new(Stage::NameResolution, FailureCause::Timeout, format!("resolving {host} timed out"))),
            Ok(Err(e)) => {
                return Err(TransportFailure::new(Stage::NameResolution, FailureCause::Io(e.kind()), format!("resolving {host}: {e}")))
            }
            Ok(Ok(addrs)) => addrs,
        };
        marks.resolved = Some(start.elapsed());

        let mut last_err = None;
        let mut tcp = None;
        for addr in &addrs {
            match timeout_at(deadline, TcpStream::connect(addr)).await {
                Err(_) => {
                    return Err(TransportFailure::new(Stage::TcpConnect, FailureCause::Timeout, format!("connect to {addr} timed out")))
                }
                Ok(Err(e)) => last_err = Some(TransportFailure::new(Stage::TcpConnect, FailureCause::Io(e.kind()), format!("connect to {addr}: {e}"))),
                Ok(Ok(stream)) => {
                    tcp = Some(stream);
                    break;
                }
            }
        }
        let tcp = match tcp {
            Some(s) => s,
            None => return Err(last_err.expect("lookup returns at least one address")),
        };
        let _ = tcp.set_nodelay(true);
        marks.connected = Some(start.elapsed());

        let server_name = ServerName::try_from(host.to_string())
            .map_err(|e| TransportFailure::new(Stage::TlsHandshake, FailureCause::Unexpected, format!("bad server name {host:?}: {e}")))?;
        let connector = TlsConnector::from(self.tls.clone());
        let tls = match timeout_at(deadline, connector.connect(server_name, tcp)).await {
            Err(_) => return Err(TransportFailure::new(Stage::TlsHandshake, FailureCause::Timeout, "TLS handshake timed out")),
            Ok(Err(e)) => return Err(tls_failure(e)),
            Ok(Ok(s)) => s,
        };
        marks.handshaken = Some(start.elapsed());

        let session = tls.get_ref().1;
        let http = match session.alpn_protocol() {
            Some(b"h2") => HttpVersion::Http2,
            _ => HttpVersion::Http1,
        };
        let tls_version = match session.protocol_version() {
            Some(ProtocolVersion::TLSv1_3) => TlsVersion::Tls13,
            _ => TlsVersion::Tls12,
        };
        let negotiated = Negotiated { http, tls: tls_version };

        let io = TokioIo::new(tls);
        let driver_error: DriverSlot = Arc::default();
        let slot = driver_error.clone();
        let total_deadline = tokio::time::Instant::from_std(start + self.opts.total_timeout);
        let sender = match http {
            HttpVersion::Http2 => {
                let handshake = http2::handshake(TokioExecutor::new(), io);
                let (sender, conn) = match timeout_at(total_deadline, handshake).await {
                    Err(_) => return Err(TransportFailure::new(Stage::HttpExchange, FailureCause::Timeout, "HTTP/2 handshake timed out")),
                    Ok(Err(e)) => return Err(hyper_failure(&e, Stage::HttpExchange)),
                    Ok(Ok(pair)) => pair,
                };
                tokio::spawn(async move {
                    if let Err(e) = conn.await {
                        *slot.lock().unwrap() = Some(hyper_failure(&e, Stage::HttpExchange));
                    }
                });
                Sender::H2(sender)
            }
            HttpVersion::Http1 => {
                let (sender, conn) = match timeout_at(total_deadline, http1::handshake(io)).await {
                    Err(_) => return Err(TransportFailure::new(Stage::HttpExchange, FailureCause::Timeout, "HTTP/1.1 handshake timed out")),
                    Ok(Err(e)) => return Err(hyper_failure(&e, Stage::HttpExchange)),
                    Ok(Ok(pair)) => pair,
                };
                tokio::spawn(async move {
                    if let Err(e) = conn.await {
                        *slot.lock().unwrap() = Some(hyper_failure(&e, Stage::HttpExchange));
                    }
                });
                Sender::H1(sender)
            }
        };
        Ok(Connection {
            sender,
            negotiated,
            driver_error,
        })
    }
}

/// Convenience wrapper: builds a client for one query.
pub async fn measure_doh_query(
    endpoint: &ResolverEndpoint,
    query: &DohQuery,
    vantage: &str,
    opts: TransportOptions,
) -> QueryMeasurement {
    match DohClient::new(opts) {
        Ok(client) => client.measure(endpoint, query, vantage).await,
        Err(e) => QueryMeasurement {
            resolver_url: endpoint.url.to_string(),
            vantage: vantage.to_string(),
            domain: query.question.name.clone(),
            timestamp_utc: Utc::now(),
            timing: TimingBreakdown::default(),
            outcome: ErrorClass::OtherError,
            detail: Some(e.to_string()),
            http_status: None,
            rcode: None,
            http_version: None,
            tls_version: None,
        },
    }
}

fn build_request(endpoint: &ResolverEndpoint, query: &DohQuery, method: HttpMethod, http: HttpVersion) -> Result<Request<Full<Bytes>>, TransportFailure> {
    let mut url = endpoint.url.clone();
    if method == HttpMethod::Get {
        let encoded = base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(&query.payload);
        url.query_pairs_mut().append_pair("dns", &encoded);
    }
    let uri: Uri = match http {
        HttpVersion::Http2 => url.as_str().parse(),
        HttpVersion::Http1 => {
            let path = &url[url::Position::BeforePath..url::Position::AfterQuery];
            path.parse()
        }
    }
    .map_err(|e: http::uri::InvalidUri| TransportFailure::new(Stage::HttpExchange, FailureCause::Unexpected, format!("bad request URI: {e}")))?;

    let mut builder = Request::builder().uri(uri).header(header::ACCEPT, DNS_MESSAGE);
    if http == HttpVersion::Http1 {
        let authority = &url[url::Position::BeforeHost..url::Position::AfterPort];
        builder = builder.header(header::HOST, authority);
    }
    let body = match method {
        HttpMethod::Post => {
            builder = builder
                .method(Method::POST)
                .header(header::CONTENT_TYPE, DNS_MESSAGE)
                .header(header::CONTENT_LENGTH, query.payload.len());
            Full::new(query.payload.clone())
        }
        HttpMethod::Get => {
            builder = builder.method(Method::GET);
            Full::new(Bytes::new())
        }
    };
    builder
        .body(body)
        .map_err(|e| TransportFailure::new(Stage::HttpExchange, FailureCause::Unexpected, format!("building request: {e}")))
}

async fn send_query(
    conn: &mut Connection,
    endpoint: &ResolverEndpoint,
    query: &DohQuery,
    method: HttpMethod,
    start: Instant,
    deadline: Instant,
    marks: &mut Marks,
) -> Result<u8, TransportFailure> {
    let deadline = tokio::time::Instant::from_std(deadline);
    let request = build_request(endpoint, query, method, conn.negotiated.http)?;
    let sent = async {
        match &mut conn.sender {
            Sender::H1(s) => {
                s.ready().await?;
                s.send_request(request).await
            }
            Sender::H2(s) => {
                s.ready().await?;
                s.send_request(request).await
            }
        }
    };
    let response = match timeout_at(deadline, sent).await {
        Err(_) => return Err(TransportFailure::new(Stage::HttpExchange, FailureCause::Timeout, "no response before deadline")),
        Ok(Err(e)) => {
            // The connection task usually holds the more specific error.
            tokio::task::yield_now().await;
            let driver = conn.driver_error.lock().unwrap().take();
            return Err(prefer_specific(driver, hyper_failure(&e, Stage::HttpExchange)));
        }
        Ok(Ok(r)) => r,
    };
    marks.first_byte = Some(start.elapsed());

    let status = response.status();
    if !status.is_success() {
        return Err(TransportFailure::new(
            Stage::HttpExchange,
            FailureCause::HttpStatus(status.as_u16()),
            format!("HTTP {status}"),
        ));
    }
    let content_type = response
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| String::from_utf8_lossy(v.as_bytes()).to_ascii_lowercase());

    let body = match timeout_at(deadline, Limited::new(response.into_body(), MAX_BODY).collect()).await {
        Err(_) => return Err(TransportFailure::new(Stage::ResponseBody, FailureCause::Timeout, "body not received before deadline")),
        Ok(Err(e)) => {
            let failure = match e.downcast::<hyper::Error>() {
                Ok(he) => hyper_failure(&he, Stage::ResponseBody),
                Err(other) if other.is::<http_body_util::LengthLimitError>() => {
                    TransportFailure::new(Stage::ResponseBody, FailureCause::UndecodableBody, format!("body exceeds {MAX_BODY} bytes"))
                }
                Err(other) => TransportFailure::new(Stage::ResponseBody, FailureCause::Unexpected, other.to_string()),
            };
            let driver = conn.driver_error.lock().unwrap().take();
            return Err(prefer_specific(driver, failure));
        }
        Ok(Ok(collected)) => collected.to_bytes(),
    };
    marks.done = Some(start.elapsed());

    if let Some(ct) = &content_type {
        if !ct.trim_start().starts_with(DNS_MESSAGE) {
            return Err(TransportFailure::new(
                Stage::ResponseBody,
                FailureCause::UndecodableBody,
                format!("content-type {ct:?} is not {DNS_MESSAGE}"),
            ));
        }
    }
    let summary = wire::decode_response(&body)
        .map_err(|e| TransportFailure::new(Stage::ResponseBody, FailureCause::UndecodableBody, format!("{} byte body: {e}", body.len())))?;
    if !wire::response_matches(query.id, &query.question, &summary) {
        return Err(TransportFailure::new(
            Stage::ResponseBody,
            FailureCause::UndecodableBody,
            format!(
                "response does not match query (id {} vs {}, question {:?})",
                summary.id, query.id, summary.question_echo
            ),
        ));
    }
    Ok(summary.rcode)
}

fn prefer_specific(driver: Option<TransportFailure>, fallback: TransportFailure) -> TransportFailure {
    match driver {
        Some(d) if fallback.cause == FailureCause::Unexpected || d.cause == FailureCause::Http2Protocol => d,
        _ => fallback,
    }
}

fn tls_failure(e: io::Error) -> TransportFailure {
    let rustls_err = e.get_ref().and_then(|inner| inner.downcast_ref::<rustls::Error>());
    let cause = match rustls_err {
        Some(rustls::Error::InvalidCertificate(_)) => FailureCause::CertificateInvalid,
        Some(_) => FailureCause::TlsProtocol,
        None => match e.kind() {
            io::ErrorKind::TimedOut => FailureCause::Timeout,
            kind => FailureCause::Io(kind),
        },
    };
    TransportFailure::new(Stage::TlsHandshake, cause, format!("TLS handshake: {e}"))
}

fn hyper_failure(e: &hyper::Error, stage: Stage) -> TransportFailure {
    let mut source: Option<&(dyn std::error::Error + 'static)> = Some(e);
    while let Some(err) = source {
        if let Some(h2err) = err.downcast_ref::<h2::Error>() {
            if !h2err.is_io() {
                return TransportFailure::new(stage, FailureCause::Http2Protocol, format!("HTTP/2: {h2err}"));
            }
        }
        source = err.source();
    }
    TransportFailure::new(stage, FailureCause::Unexpected, format!("HTTP: {}", error_chain(e)))
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut source = e.source();
    while let Some(s) = source {
        out.push_str(": ");
        out.push_str(&s.to_string());
        source = s.source();
    }
    out
}
