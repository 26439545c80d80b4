//! ICMP echo rounds and a TCP-connect fallback for network RTT.

use std::io;
use std::net::{IpAddr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicU16, Ordering};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, Socket, Type};

use crate::transport::HostResolver;

pub const DEFAULT_COUNT: u32 = 4;
pub const DEFAULT_INTERVAL: Duration = Duration::from_secs(1);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);
pub const DEFAULT_PAYLOAD: usize = 56;

const ECHO_REQUEST_V4: u8 = 8;
const ECHO_REPLY_V4: u8 = 0;
const ECHO_REQUEST_V6: u8 = 128;
const ECHO_REPLY_V6: u8 = 129;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PingMethod {
    Icmp,
    TcpFallback,
}

impl PingMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PingMethod::Icmp => "icmp",
            PingMethod::TcpFallback => "tcp-fallback",
        }
    }
}

/// One probe round against a host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PingMeasurement {
    pub host: String,
    pub vantage: String,
    pub timestamp_utc: DateTime<Utc>,
    /// Address actually probed; `None` when the host did not resolve.
    pub address: Option<IpAddr>,
    /// RTTs of the replies that arrived, in probe order.
    pub rtts_ms: Vec<f64>,
    pub average_ms: Option<f64>,
    pub sent: u32,
    pub received: u32,
    pub method: PingMethod,
    pub detail: Option<String>,
}

impl PingMeasurement {
    fn start(host: &str, method: PingMethod) -> Self {
        PingMeasurement {
            host: host.to_string(),
            vantage: String::new(),
            timestamp_utc: Utc::now(),
            address: None,
            rtts_ms: Vec::new(),
            average_ms: None,
            sent: 0,
            received: 0,
            method,
            detail: None,
        }
    }

    fn push(&mut self, rtt: Duration) {
        self.rtts_ms.push(rtt.as_secs_f64() * 1e3);
        self.received = self.rtts_ms.len() as u32;
        self.average_ms = mean(&self.rtts_ms);
    }

    pub fn lost(&self) -> u32 {
        self.sent - self.received
    }

    /// True when the host name could not be turned into an address.
    pub fn unresolved(&self) -> bool {
        self.address.is_none()
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PingError {
    #[error("no ICMP socket available ({0}); run with CAP_NET_RAW or enable the TCP fallback")]
    InsufficientPrivilege(io::Error),
    #[error("probe count must be at least 1")]
    ZeroCount,
}

#[derive(Debug, Clone)]
pub struct PingOptions {
    pub count: u32,
    pub interval: Duration,
    pub timeout: Duration,
    pub payload: usize,
    pub resolver: HostResolver,
}

impl Default for PingOptions {
    fn default() -> Self {
        PingOptions {
            count: DEFAULT_COUNT,
            interval: DEFAULT_INTERVAL,
            timeout: DEFAULT_TIMEOUT,
            payload: DEFAULT_PAYLOAD,
            resolver: HostResolver::new(),
        }
    }
}

/// Sends `count` echo requests, sequentially and `interval` apart, and
/// averages the replies that arrive within `timeout` of their request.
/// Blocking; use [`ping_host_async`] from async code.
pub fn ping_host(host: &str, opts: &PingOptions) -> Result<PingMeasurement, PingError> {
    if opts.count == 0 {
        return Err(PingError::ZeroCount);
    }
    let mut m = PingMeasurement::start(host, PingMethod::Icmp);
    let addr = match opts.resolver.lookup_blocking(host, 0) {
        Ok(addrs) => addrs[0].ip(),
        Err(e) => {
            // Still need to report the privilege problem rather than a
            // resolution failure that hides it.
            open_socket(false).map_err(PingError::InsufficientPrivilege)?;
            m.detail = Some(format!("name resolution failed: {e}"));
            return Ok(m);
        }
    };
    m.address = Some(addr);
    let probe = Prober::open(addr).map_err(PingError::InsufficientPrivilege)?;
    let ident = next_ident();
    for seq in 0..opts.count {
        let seq = seq as u16;
        let packet = echo_request(addr.is_ipv6(), ident, seq, opts.payload);
        let sent_at = Instant::now();
        m.sent += 1;
        if let Err(e) = probe.send(&packet) {
            m.detail = Some(format!("send failed: {e}"));
        } else if let Some(rtt) = probe.await_reply(ident, seq, sent_at, opts.timeout) {
            m.push(rtt);
        }
        if seq as u32 + 1 < opts.count {
            let next = sent_at + opts.interval;
            let now = Instant::now();
            if next > now {
                std::thread::sleep(next - now);
            }
        }
    }
    Ok(m)
}

pub async fn ping_host_async(host: &str, opts: &PingOptions) -> Result<PingMeasurement, PingError> {
    let host = host.to_string();
    let opts = opts.clone();
    tokio::task::spawn_blocking(move || ping_host(&host, &opts))
        .await
        .expect("ping task panicked")
}

/// Whether this process may open an ICMP socket.
pub fn icmp_available() -> bool {
    open_socket(false).is_ok()
}

/// Times `count` TCP handshakes to `host:port` as an RTT stand-in.
pub async fn tcp_rtt_fallback(host: &str, port: u16, opts: &PingOptions) -> PingMeasurement {
    let mut m = PingMeasurement::start(host, PingMethod::TcpFallback);
    let addr = match opts.resolver.lookup(host, port).await {
        Ok(addrs) => addrs[0],
        Err(e) => {
            m.detail = Some(format!("name resolution failed: {e}"));
            return m;
        }
    };
    m.address = Some(addr.ip());
    for i in 0..opts.count {
        let started = Instant::now();
        m.sent += 1;
        match tokio::time::timeout(opts.timeout, tokio::net::TcpStream::connect(addr)).await {
            Ok(Ok(stream)) => {
                m.push(started.elapsed());
                drop(stream);
            }
            Ok(Err(e)) => m.detail = Some(format!("connect failed: {e}")),
            Err(_) => m.detail = Some("connect timed out".into()),
        }
        if i + 1 < opts.count {
            tokio::time::sleep_until((started + opts.interval).into()).await;
        }
    }
    m
}

fn next_ident() -> u16 {
    static COUNTER: AtomicU16 = AtomicU16::new(0);
    let token = (std::process::id() as u16).rotate_left(8);
    token ^ COUNTER.fetch_add(1, Ordering::Relaxed)
}

fn open_socket(v6: bool) -> io::Result<(Socket, bool)> {
    let (domain, proto) = if v6 {
        (Domain::IPV6, Protocol::ICMPV6)
    } else {
        (Domain::IPV4, Protocol::ICMPV4)
    };
    match Socket::new(domain, Type::RAW, Some(proto)) {
        Ok(s) => Ok((s, true)),
        Err(raw_err) => match Socket::new(domain, Type::DGRAM, Some(proto)) {
            Ok(s) => Ok((s, false)),
            Err(_) => Err(raw_err),
        },
    }
}

struct Prober {
    sock: UdpSocket,
    target: SocketAddr,
    raw: bool,
    v6: bool,
}

impl Prober {
    fn open(addr: IpAddr) -> io::Result<Prober> {
        let (sock, raw) = open_socket(addr.is_ipv6())?;
        Ok(Prober {
            // Plain sendto/recvfrom on the ICMP socket.
            sock: UdpSocket::from(sock),
            target: SocketAddr::new(addr, 0),
            raw,
            v6: addr.is_ipv6(),
        })
    }

    fn send(&self, packet: &[u8]) -> io::Result<()> {
        self.sock.send_to(packet, self.target).map(|_| ())
    }

    fn await_reply(&self, ident: u16, seq: u16, sent_at: Instant, timeout: Duration) -> Option<Duration> {
        let deadline = sent_at + timeout;
        let mut buf = [0u8; 2048];
        loop {
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            self.sock.set_read_timeout(Some(deadline - now)).ok()?;
            let (n, from) = match self.sock.recv_from(&mut buf) {
                Ok(r) => r,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return None,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => return None,
            };
            let arrived = Instant::now();
            if from.ip() != self.target.ip() {
                continue;
            }
            let icmp = if self.raw && !self.v6 { strip_ipv4_header(&buf[..n]) } else { Some(&buf[..n]) };
            // Datagram ICMP sockets rewrite the identifier, so only the
            // sequence number can be checked there.
            let check_ident = self.raw.then_some(ident);
            if let Some(icmp) = icmp {
                if is_echo_reply(icmp, self.v6, check_ident, seq) {
                    return Some(arrived.duration_since(sent_at));
                }
            }
        }
    }
}

fn strip_ipv4_header(packet: &[u8]) -> Option<&[u8]> {
    let ihl = (*packet.first()? & 0x0f) as usize * 4;
    packet.get(ihl..)
}

fn is_echo_reply(icmp: &[u8], v6: bool, ident: Option<u16>, seq: u16) -> bool {
    if icmp.len() < 8 {
        return false;
    }
    let want = if v6 { ECHO_REPLY_V6 } else { ECHO_REPLY_V4 };
    if icmp[0] != want || icmp[1] != 0 {
        return false;
    }
    let id = u16::from_be_bytes([icmp[4], icmp[5]]);
    let sq = u16::from_be_bytes([icmp[6], icmp[7]]);
    sq == seq && ident.is_none_or(|i| i == id)
}

/// Builds an echo request with a patterned payload. The checksum is left
/// zero for ICMPv6, where the kernel fills it in.
pub fn echo_request(v6: bool, ident: u16, seq: u16, payload: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(8 + payload);
    p.push(if v6 { ECHO_REQUEST_V6 } else { ECHO_REQUEST_V4 });
    p.push(0);
    p.extend_from_slice(&[0, 0]);
    p.extend_from_slice(&ident.to_be_bytes());
    p.extend_from_slice(&seq.to_be_bytes());
    p.extend((0..payload).map(|i| i as u8));
    if !v6 {
        let sum = checksum(&p);
        p[2..4].copy_from_slice(&sum.to_be_bytes());
    }
    p
}

/// Internet checksum (RFC 1071).
pub fn checksum(data: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    for chunk in data.chunks(2) {
        let word = match chunk {
            [a, b] => u16::from_be_bytes([*a, *b]),
            [a] => u16::from_be_bytes([*a, 0]),
            _ => unreachable!(),
        };
        sum += word as u32;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> PingOptions {
        PingOptions {
            count: 4,
            interval: Duration::from_millis(20),
            timeout: Duration::from_millis(500),
            ..PingOptions::default()
        }
    }

    #[test]
    fn mean_of_four() {
        assert_eq!(mean(&[10.0, 20.0, 30.0, 40.0]), Some(25.0));
        assert_eq!(mean(&[]), None);
    }

    #[test]
    fn checksum_matches_reference() {
        // Echo request id=0x1234 seq=1, no payload. 0xe5ca computed by a
        // separate ones-complement sum in Python.
        let p = echo_request(false, 0x1234, 1, 0);
        assert_eq!(&p[..], &[8, 0, 0xe5, 0xca, 0x12, 0x34, 0, 1]);
        assert_eq!(checksum(&p), 0);
        assert_eq!(checksum(&[0x00, 0x01, 0xf2]), !(0x0001u16 + 0xf200));
    }

    #[test]
    fn reply_filtering() {
        let mut reply = echo_request(false, 7, 3, 8);
        reply[0] = ECHO_REPLY_V4;
        assert!(is_echo_reply(&reply, false, Some(7), 3));
        assert!(is_echo_reply(&reply, false, None, 3));
        assert!(!is_echo_reply(&reply, false, Some(8), 3));
        assert!(!is_echo_reply(&reply, false, Some(7), 4));
        assert!(!is_echo_reply(&reply[..6], false, Some(7), 3));
        let request = echo_request(false, 7, 3, 8);
        assert!(!is_echo_reply(&request, false, Some(7), 3));
    }

    #[test]
    fn loopback_round() {
        if !icmp_available() {
            eprintln!("skipping: no ICMP socket");
            return;
        }
        let m = ping_host("127.0.0.1", &quick()).unwrap();
        assert_eq!((m.sent, m.received), (4, 4));
        assert_eq!(m.method, PingMethod::Icmp);
        let oracle = m.rtts_ms.iter().sum::<f64>() / 4.0;
        assert!((m.average_ms.unwrap() - oracle).abs() < 1e-9);
        let lo = m.rtts_ms.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.rtts_ms.iter().cloned().fold(0.0, f64::max);
        assert!(lo <= m.average_ms.unwrap() && m.average_ms.unwrap() <= hi);
    }

    #[test]
    fn unanswered_probes_count_as_lost() {
        if !icmp_available() {
            return;
        }
        // A zero wait window means no reply can be accepted.
        let opts = PingOptions {
            timeout: Duration::ZERO,
            ..quick()
        };
        let m = ping_host("127.0.0.1", &opts).unwrap();
        assert_eq!((m.sent, m.received), (4, 0));
        assert_eq!(m.lost(), 4);
        assert!(m.average_ms.is_none());
        assert!(m.rtts_ms.is_empty());
    }

    #[test]
    fn unresolvable_host_sends_nothing() {
        if !icmp_available() {
            return;
        }
        let m = ping_host("nowhere.invalid", &quick()).unwrap();
        assert!(m.unresolved());
        assert_eq!((m.sent, m.received), (0, 0));
        assert!(m.detail.unwrap().contains("resolution"));
    }

    #[test]
    fn zero_count_rejected() {
        let opts = PingOptions { count: 0, ..quick() };
        assert!(matches!(ping_host("127.0.0.1", &opts), Err(PingError::ZeroCount)));
    }

    #[tokio::test]
    async fn tcp_fallback_open_and_closed() {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let port = listener.local_addr().unwrap().port();
        tokio::spawn(async move {
            loop {
                let _ = listener.accept().await;
            }
        });
        let m = tcp_rtt_fallback("127.0.0.1", port, &quick()).await;
        assert_eq!((m.sent, m.received), (4, 4));
        assert_eq!(m.method, PingMethod::TcpFallback);
        assert!(m.average_ms.is_some());

        let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let m = tcp_rtt_fallback("127.0.0.1", closed, &quick()).await;
        assert_eq!((m.sent, m.received), (4, 0));
        assert!(m.average_ms.is_none());
        assert_eq!(m.method, PingMethod::TcpFallback);
    }

    #[test]
    fn method_names() {
        assert_eq!(serde_json::to_string(&PingMethod::TcpFallback).unwrap(), "\"tcp-fallback\"");
        assert_eq!(PingMethod::Icmp.as_str(), "icmp");
    }
}
