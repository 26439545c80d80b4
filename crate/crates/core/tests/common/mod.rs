//! Mock resolver fleet and campaign config for integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dohscope::campaign::CampaignConfig;
use dohscope::icmp;
use dohscope::mock::{MockConfig, MockPki, MockServer};

pub struct Fleet {
    pub servers: Vec<MockServer>,
    pub pki: Arc<MockPki>,
    pub dir: tempfile::TempDir,
}

pub fn host(i: usize) -> String {
    format!("mock-{i}.test")
}

impl Fleet {
    /// `n` mock resolvers sharing one CA, each with its own hostname.
    pub async fn start(n: usize, delay: Duration) -> Fleet {
        let pki = Arc::new(MockPki::generate().unwrap());
        let mut servers = Vec::new();
        for i in 0..n {
            let config = MockConfig {
                hostnames: vec![host(i)],
                delay,
                ..MockConfig::default()
            };
            servers.push(
                MockServer::start_on("127.0.0.1:0".parse().unwrap(), config, pki.clone())
                    .await
                    .unwrap(),
            );
        }
        Fleet {
            servers,
            pki,
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn urls(&self) -> Vec<String> {
        self.servers.iter().enumerate().map(|(i, s)| s.url_for(&host(i))).collect()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes the resolver list and CA file and returns a config pointing
    /// at them. Extra URLs are appended to the list verbatim.
    pub fn config(&self, rounds: u64, extra_urls: &[&str]) -> CampaignConfig {
        let list = self.path("resolvers.txt");
        let mut text = String::from("# mock fleet\n");
        for u in self.urls().iter().map(String::as_str).chain(extra_urls.iter().copied()) {
            text.push_str(u);
            text.push('\n');
        }
        std::fs::write(&list, text).unwrap();
        let ca = self.path("ca.pem");
        std::fs::write(&ca, self.pki.ca_pem()).unwrap();

        let mut c = CampaignConfig {
            vantage: "Test".into(),
            resolver_list: Some(list),
            rounds: Some(rounds),
            round_interval: Duration::from_millis(20),
            output: self.path("records.jsonl"),
            ..CampaignConfig::default()
        };
        c.transport.system_roots = false;
        c.transport.ca_file = Some(ca);
        c.transport.connect_timeout = Duration::from_secs(2);
        c.transport.total_timeout = Duration::from_secs(5);
        c.transport.resolve = (0..self.servers.len())
            .map(|i| format!("{}:127.0.0.1", host(i)))
            .collect();
        c.ping.interval = Duration::from_millis(10);
        c.ping.timeout = Duration::from_millis(500);
        c.ping.fallback = !icmp::icmp_available();
        c
    }

    /// Writes `config` as TOML next to the other fixtures.
    pub fn write_config(&self, config: &CampaignConfig) -> PathBuf {
        let path = self.path("campaign.toml");
        std::fs::write(&path, toml::to_string(config).unwrap()).unwrap();
        path
    }
}

/// Smallest of several TCP connect times to `port` on loopback, in ms.
pub fn floor_rtt_ms(port: u16) -> f64 {
    (0..5)
        .map(|_| {
            let t = Instant::now();
            let s = std::net::TcpStream::connect(("127.0.0.1", port)).unwrap();
            let ms = t.elapsed().as_secs_f64() * 1e3;
            drop(s);
            ms
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

pub mod records {
    use chrono::{TimeZone, Utc};
    use dohscope::campaign::{MeasurementRecord, RecordKind};
    use dohscope::icmp::PingMethod;
    use dohscope::transport::{ErrorClass, TimingBreakdown};

    pub fn doh(url: &str, vantage: &str, outcome: ErrorClass, total_ms: Option<f64>) -> MeasurementRecord {
        MeasurementRecord {
            kind: RecordKind::Doh,
            campaign_id: "fixture".into(),
            round: 0,
            vantage: vantage.into(),
            resolver_url: Some(url.into()),
            host: None,
            domain: Some("google.com".into()),
            ts_utc: Utc.with_ymd_and_hms(2021, 10, 20, 0, 0, 0).unwrap(),
            timing: TimingBreakdown {
                total_ms,
                ..TimingBreakdown::default()
            },
            outcome,
            http_status: None,
            rcode: outcome.is_success().then_some(0),
            http_version: None,
            tls_version: None,
            rtts_ms: None,
            avg_rtt_ms: None,
            sent: None,
            received: None,
            method: None,
            address: None,
            detail: None,
            extra: Default::default(),
        }
    }

    pub fn ok(url: &str, vantage: &str, total_ms: f64) -> MeasurementRecord {
        doh(url, vantage, ErrorClass::Success, Some(total_ms))
    }

    /// A ping round with one reply of `avg` ms, or none.
    pub fn ping(host: &str, vantage: &str, avg: Option<f64>) -> MeasurementRecord {
        let mut r = doh("https://x/", vantage, ErrorClass::Success, None);
        r.kind = RecordKind::Ping;
        r.resolver_url = None;
        r.domain = None;
        r.rcode = None;
        r.host = Some(host.into());
        r.rtts_ms = Some(avg.into_iter().collect());
        r.avg_rtt_ms = avg;
        r.sent = Some(4);
        r.received = Some(avg.is_some() as u32);
        r.method = Some(PingMethod::Icmp);
        if avg.is_none() {
            r.outcome = ErrorClass::CouldNotConnect;
        }
        r
    }

    /// Three samples whose median is exactly `median`.
    pub fn around(url: &str, vantage: &str, median: f64) -> Vec<MeasurementRecord> {
        vec![
            ok(url, vantage, median * 0.5),
            ok(url, vantage, median),
            ok(url, vantage, median * 1.5 + 1.0),
        ]
    }
}
