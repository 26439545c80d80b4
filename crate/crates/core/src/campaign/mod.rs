//! Round-based measurement campaigns.
//!
//! Each round visits every resolver: one DoH query per configured domain,
//! then one ping round to the resolver's host. Records stream into a JSON
//! Lines file as they complete and the file is synced when a round ends.

mod record;

use std::collections::BTreeMap;
use std::fmt;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tokio::task::JoinSet;
use tokio::time::Instant;

pub use record::{
    load_many, load_records, parse_records, persist_record, ping_outcome, LoadedRecords, MeasurementRecord,
    RecordKind, RecordSink, StoreError,
};

use crate::catalog::{bundled_catalog, Catalog, CatalogError, GeoMapping, MainstreamSet, Region, ResolverEndpoint};
use crate::icmp::{self, PingError, PingMethod, PingOptions};
use crate::transport::{
    load_pem_certs, DohClient, DohQuery, ErrorClass, HostResolver, HttpMethod, SetupError, TransportOptions,
    DEFAULT_CONNECT_TIMEOUT, DEFAULT_TOTAL_TIMEOUT,
};
use crate::wire::DnsQuestion;

/// Overrides `output` from the config file.
pub const OUTPUT_ENV: &str = "DOHSCOPE_OUTPUT";
pub const DEFAULT_ROUND_INTERVAL: Duration = Duration::from_secs(300);
pub const DEFAULT_PARALLELISM: usize = 8;
pub const DEFAULT_DOMAINS: [&str; 2] = ["google.com", "netflix.com"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    #[serde(with = "humantime_serde")]
    pub connect_timeout: Duration,
    #[serde(with = "humantime_serde")]
    pub total_timeout: Duration,
    pub method: HttpMethod,
    pub reuse: bool,
    pub http2: bool,
    /// Trust the bundled public root set.
    pub system_roots: bool,
    /// Extra PEM trust anchors.
    pub ca_file: Option<PathBuf>,
    /// `host:address` pins, like `curl --resolve`.
    pub resolve: Vec<String>,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            total_timeout: DEFAULT_TOTAL_TIMEOUT,
            method: HttpMethod::Post,
            reuse: false,
            http2: true,
            system_roots: true,
            ca_file: None,
            resolve: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PingConfig {
    pub count: u32,
    #[serde(with = "humantime_serde")]
    pub interval: Duration,
    #[serde(with = "humantime_serde")]
    pub timeout: Duration,
    pub payload: usize,
    /// Use TCP connect times when no ICMP socket can be opened.
    pub fallback: bool,
    /// Port for the fallback; defaults to the resolver URL's port.
    pub fallback_port: Option<u16>,
}

impl Default for PingConfig {
    fn default() -> Self {
        PingConfig {
            count: icmp::DEFAULT_COUNT,
            interval: icmp::DEFAULT_INTERVAL,
            timeout: icmp::DEFAULT_TIMEOUT,
            payload: icmp::DEFAULT_PAYLOAD,
            fallback: false,
            fallback_port: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Reusing an id resumes numbering after the last round in `output`.
    pub campaign_id: Option<String>,
    pub vantage: String,
    /// Bundled list when unset.
    pub resolver_list: Option<PathBuf>,
    pub geo_mapping: Option<PathBuf>,
    pub mainstream_set: Option<PathBuf>,
    pub domains: Vec<String>,
    #[serde(with = "humantime_serde")]
    pub round_interval: Duration,
    pub rounds: Option<u64>,
    #[serde(with = "humantime_serde")]
    pub duration: Option<Duration>,
    pub parallelism: usize,
    pub output: PathBuf,
    pub transport: TransportConfig,
    pub ping: PingConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            campaign_id: None,
            vantage: String::new(),
            resolver_list: None,
            geo_mapping: None,
            mainstream_set: None,
            domains: DEFAULT_DOMAINS.iter().map(|d| d.to_string()).collect(),
            round_interval: DEFAULT_ROUND_INTERVAL,
            rounds: None,
            duration: None,
            parallelism: DEFAULT_PARALLELISM,
            output: PathBuf::from("records.jsonl"),
            transport: TransportConfig::default(),
            ping: PingConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl CampaignConfig {
    pub fn parse(text: &str) -> Result<CampaignConfig, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads a TOML file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<CampaignConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            self.resolver_list.as_mut(),
            self.geo_mapping.as_mut(),
            self.mainstream_set.as_mut(),
            self.transport.ca_file.as_mut(),
            Some(&mut self.output),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Applies [`OUTPUT_ENV`] when set.
    pub fn apply_env(&mut self) {
        if let Some(out) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            self.output = PathBuf::from(out);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.vantage.trim().is_empty() {
            return bad("vantage must be set".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.domains.is_empty() {
            return bad("domains must not be empty".into());
        }
        for d in &self.domains {
            if let Err(e) = DnsQuestion::a(d).validate() {
                return bad(format!("domain {d:?}: {e}"));
            }
        }
        if self.round_interval.is_zero() {
            return bad("round_interval must be positive".into());
        }
        if self.rounds.is_none() && self.duration.is_none() {
            return bad("set rounds or duration".into());
        }
        if self.rounds == Some(0) {
            return bad("rounds must be at least 1".into());
        }
        if self.ping.count == 0 {
            return bad("ping.count must be at least 1".into());
        }
        if self.transport.connect_timeout.is_zero() || self.transport.total_timeout.is_zero() {
            return bad("transport timeouts must be positive".into());
        }
        if let Err(e) = HostResolver::parse_overrides(&self.transport.resolve) {
            return bad(format!("transport.resolve: {e}"));
        }
        Ok(())
    }

    /// Loads the resolver list and annotates regions and mainstream tags.
    pub fn catalog(&self) -> Result<Catalog, CatalogError> {
        let mut catalog = match &self.resolver_list {
            Some(p) => Catalog::load(p)?,
            None => bundled_catalog(),
        };
        let geo = match &self.geo_mapping {
            Some(p) => GeoMapping::load(p)?,
            None => GeoMapping::bundled(),
        };
        let mainstream = match &self.mainstream_set {
            Some(p) => MainstreamSet::load(p)?,
            None => MainstreamSet::bundled(),
        };
        catalog.annotate(&geo, &mainstream);
        Ok(catalog)
    }

    pub fn transport_options(&self) -> Result<TransportOptions, SetupError> {
        let t = &self.transport;
        let extra_roots = match &t.ca_file {
            Some(p) => load_pem_certs(p)?,
            None => Vec::new(),
        };
        Ok(TransportOptions {
            connect_timeout: t.connect_timeout,
            total_timeout: t.total_timeout,
            method: t.method,
            reuse: t.reuse,
            offer_http2: t.http2,
            webpki_roots: t.system_roots,
            extra_roots,
            resolver: self.host_resolver(),
        })
    }

    pub fn ping_options(&self) -> PingOptions {
        PingOptions {
            count: self.ping.count,
            interval: self.ping.interval,
            timeout: self.ping.timeout,
            payload: self.ping.payload,
            resolver: self.host_resolver(),
        }
    }

    fn host_resolver(&self) -> HostResolver {
        HostResolver::parse_overrides(&self.transport.resolve).unwrap_or_default()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("resolver list is empty")]
    EmptyCatalog,
    #[error(transparent)]
    Transport(#[from] SetupError),
    #[error(transparent)]
    Ping(#[from] PingError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignSummary {
    pub campaign_id: String,
    pub output: PathBuf,
    pub resolvers: usize,
    pub first_round: u64,
    pub rounds_completed: u64,
    pub doh_records: u64,
    pub ping_records: u64,
    pub outcomes: BTreeMap<String, u64>,
    pub interrupted: bool,
}

impl fmt::Display for CampaignSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "campaign {}", self.campaign_id)?;
        writeln!(f, "output: {}", self.output.display())?;
        writeln!(
            f,
            "rounds: {} (starting at {}){}",
            self.rounds_completed,
            self.first_round,
            if self.interrupted { ", interrupted" } else { "" }
        )?;
        writeln!(f, "resolvers: {}", self.resolvers)?;
        writeln!(f, "records: {} doh, {} ping", self.doh_records, self.ping_records)?;
        for (outcome, n) in &self.outcomes {
            writeln!(f, "  {outcome}: {n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum PingMode {
    Icmp,
    Tcp(Option<u16>),
}

struct RoundContext {
    campaign_id: String,
    vantage: String,
    client: DohClient,
    queries: Vec<DohQuery>,
    ping_mode: PingMode,
    ping: PingOptions,
    sink: Mutex<RecordSink>,
    tally: Mutex<Tally>,
}

#[derive(Default)]
struct Tally {
    doh: u64,
    ping: u64,
    outcomes: BTreeMap<String, u64>,
}

impl RoundContext {
    fn write(&self, record: MeasurementRecord) -> Result<(), StoreError> {
        self.sink.lock().unwrap().append(&record)?;
        let mut t = self.tally.lock().unwrap();
        match record.kind {
            RecordKind::Doh => t.doh += 1,
            RecordKind::Ping => t.ping += 1,
        }
        *t.outcomes
            .entry(format!("{} {}", record.kind_str(), record.outcome))
            .or_default() += 1;
        Ok(())
    }
}

impl MeasurementRecord {
    fn kind_str(&self) -> &'static str {
        match self.kind {
            RecordKind::Doh => "doh",
            RecordKind::Ping => "ping",
        }
    }
}

/// Runs until the configured stop condition.
pub async fn run_campaign(config: &CampaignConfig) -> Result<CampaignSummary, CampaignError> {
    run_campaign_until(config, std::future::pending()).await
}

/// Runs until the stop condition or until `shutdown` resolves. On shutdown
/// the in-flight round is abandoned; records it already wrote are kept.
pub async fn run_campaign_until<F>(config: &CampaignConfig, shutdown: F) -> Result<CampaignSummary, CampaignError>
where
    F: Future<Output = ()>,
{
    config.validate()?;
    let catalog = config.catalog()?;
    if catalog.is_empty() {
        return Err(CampaignError::EmptyCatalog);
    }
    for d in &catalog.diagnostics {
        log::warn!("resolver list line {}: {} ({})", d.line, d.reason, d.text);
    }
    let endpoints: Vec<ResolverEndpoint> = catalog.iter().cloned().collect();
    let ping_mode = if icmp::icmp_available() {
        PingMode::Icmp
    } else if config.ping.fallback {
        log::warn!("no ICMP socket; using TCP connect times");
        PingMode::Tcp(config.ping.fallback_port)
    } else {
        return Err(PingError::InsufficientPrivilege(std::io::Error::from(std::io::ErrorKind::PermissionDenied)).into());
    };

    let (sink, dropped) = RecordSink::open(&config.output)?;
    if dropped > 0 {
        log::warn!(
            "{}: discarded {dropped} bytes of a partial record",
            config.output.display()
        );
    }
    let (campaign_id, first_round) = match &config.campaign_id {
        Some(id) => (id.clone(), next_round(&config.output, id)?),
        None => (uuid::Uuid::new_v4().to_string(), 0),
    };

    let queries = config
        .domains
        .iter()
        .map(|d| DohQuery::a(d))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let ctx = Arc::new(RoundContext {
        campaign_id: campaign_id.clone(),
        vantage: config.vantage.clone(),
        client: DohClient::new(config.transport_options()?)?,
        queries,
        ping_mode,
        ping: config.ping_options(),
        sink: Mutex::new(sink),
        tally: Mutex::new(Tally::default()),
    });
    let permits = Arc::new(Semaphore::new(config.parallelism));

    log::info!(
        "campaign {campaign_id}: {} resolvers from {}, starting at round {first_round}",
        endpoints.len(),
        config.vantage
    );
    let started = Instant::now();
    let mut round = first_round;
    let mut completed = 0u64;
    let mut interrupted = false;
    tokio::pin!(shutdown);
    loop {
        if config.rounds.is_some_and(|n| round >= n) {
            break;
        }
        let mut round_future = std::pin::pin!(run_round(ctx.clone(), &endpoints, round, permits.clone()));
        tokio::select! {
            result = &mut round_future => result?,
            _ = &mut shutdown => {
                interrupted = true;
            }
        }
        ctx.sink.lock().unwrap().sync()?;
        if interrupted {
            break;
        }
        completed += 1;
        round += 1;
        log::info!("round {} complete", round - 1);

        let next = started + config.round_interval * completed as u32;
        if config.rounds.is_some_and(|n| round >= n) {
            break;
        }
        if config.duration.is_some_and(|d| next >= started + d) {
            break;
        }
        tokio::select! {
            _ = tokio::time::sleep_until(next) => {}
            _ = &mut shutdown => {
                interrupted = true;
                break;
            }
        }
    }

    let tally = std::mem::take(&mut *ctx.tally.lock().unwrap());
    Ok(CampaignSummary {
        campaign_id,
        output: config.output.clone(),
        resolvers: endpoints.len(),
        first_round,
        rounds_completed: completed,
        doh_records: tally.doh,
        ping_records: tally.ping,
        outcomes: tally.outcomes,
        interrupted,
    })
}

/// Round index to continue from for `campaign_id` in an existing file.
fn next_round(path: &Path, campaign_id: &str) -> Result<u64, StoreError> {
    if !path.exists() {
        return Ok(0);
    }
    let loaded = load_records(path)?;
    Ok(loaded
        .records
        .iter()
        .filter(|r| r.campaign_id == campaign_id)
        .map(|r| r.round + 1)
        .max()
        .unwrap_or(0))
}

async fn run_round(
    ctx: Arc<RoundContext>,
    endpoints: &[ResolverEndpoint],
    round: u64,
    permits: Arc<Semaphore>,
) -> Result<(), StoreError> {
    let mut tasks = JoinSet::new();
    for endpoint in endpoints {
        let ctx = ctx.clone();
        let endpoint = endpoint.clone();
        let permits = permits.clone();
        tasks.spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore closed");
            probe_resolver(&ctx, &endpoint, round).await
        });
    }
    while let Some(joined) = tasks.join_next().await {
        joined.expect("resolver task panicked")?;
    }
    Ok(())
}

/// All DoH queries for one resolver, then its ping round. Nothing here
/// runs concurrently with another measurement of the same resolver.
async fn probe_resolver(ctx: &RoundContext, endpoint: &ResolverEndpoint, round: u64) -> Result<(), StoreError> {
    for query in &ctx.queries {
        let m = ctx.client.measure(endpoint, query, &ctx.vantage).await;
        ctx.write(MeasurementRecord::from_query(&ctx.campaign_id, round, &m))?;
    }
    let mut ping = match ctx.ping_mode {
        PingMode::Icmp => match icmp::ping_host_async(&endpoint.hostname, &ctx.ping).await {
            Ok(p) => p,
            Err(e) => {
                // Privilege was checked at startup; record rather than abort.
                let mut record = MeasurementRecord::from_ping(
                    &ctx.campaign_id,
                    round,
                    &icmp::PingMeasurement {
                        host: endpoint.hostname.clone(),
                        vantage: ctx.vantage.clone(),
                        timestamp_utc: chrono::Utc::now(),
                        address: None,
                        rtts_ms: Vec::new(),
                        average_ms: None,
                        sent: 0,
                        received: 0,
                        method: PingMethod::Icmp,
                        detail: Some(e.to_string()),
                    },
                );
                record.outcome = ErrorClass::OtherError;
                return ctx.write(record);
            }
        },
        PingMode::Tcp(port) => {
            icmp::tcp_rtt_fallback(&endpoint.hostname, port.unwrap_or(endpoint.port()), &ctx.ping).await
        }
    };
    ping.vantage = ctx.vantage.clone();
    ctx.write(MeasurementRecord::from_ping(&ctx.campaign_id, round, &ping))
}

/// Region counts for a loaded catalog, in display order.
pub fn region_counts(catalog: &Catalog) -> Vec<(Region, usize)> {
    Region::ALL.iter().map(|r| (*r, catalog.count_by_region(*r))).collect()
}
