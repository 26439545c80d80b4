use std::error::Error;
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use dohscope::analysis::{
    self, distribution_export, error_table, latency_ratio_flags, rank_resolvers, regional_comparison, summarize,
    SummaryOptions, DEFAULT_RATIO_THRESHOLD, DEFAULT_TRUNCATE_MS,
};
use dohscope::campaign::{self, load_many, run_campaign_until, CampaignConfig};
use dohscope::catalog::{Catalog, GeoMapping, MainstreamSet, Region};
use dohscope::icmp::PingMethod;
use dohscope::mock::{AlpnPolicy, Fault, MockConfig, MockPki, MockServer, TlsPolicy};
use dohscope::transport::HttpMethod;

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "dohscope", version, about = "Measure availability and latency of DNS-over-HTTPS resolvers")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a measurement campaign.
    Measure(MeasureArgs),
    /// Parse, annotate and print the resolver catalog.
    Catalog(CatalogArgs),
    /// Compute tables and exports from campaign records.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Serve DoH locally with an optional injected fault.
    MockServer(MockArgs),
}

#[derive(Args)]
struct MeasureArgs {
    /// TOML campaign configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    vantage: Option<String>,
    #[arg(long)]
    campaign_id: Option<String>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long, value_parser = humantime::parse_duration)]
    duration: Option<Duration>,
    #[arg(long, value_parser = humantime::parse_duration)]
    round_interval: Option<Duration>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Replaces the configured domain list; repeatable.
    #[arg(long = "domain")]
    domains: Vec<String>,
    #[arg(long)]
    resolver_list: Option<PathBuf>,
    /// Output file; the DOHSCOPE_OUTPUT variable takes precedence.
    #[arg(long)]
    output: Option<PathBuf>,
    /// post or get.
    #[arg(long, value_parser = parse_method)]
    method: Option<HttpMethod>,
    #[arg(long)]
    ca_file: Option<PathBuf>,
    /// host:address pin; repeatable.
    #[arg(long)]
    resolve: Vec<String>,
    /// Fall back to TCP connect times when ICMP is unavailable.
    #[arg(long)]
    ping_fallback: bool,
}

#[derive(Args)]
struct CatalogSources {
    /// Resolver list (one URL per line); bundled list when omitted.
    #[arg(long)]
    list: Option<PathBuf>,
    /// Region mapping CSV (`key,region`); bundled mapping when omitted.
    #[arg(long)]
    geo: Option<PathBuf>,
    /// Mainstream hostnames; bundled set when omitted.
    #[arg(long)]
    mainstream: Option<PathBuf>,
}

impl CatalogSources {
    fn load(&self) -> Result<Catalog> {
        let mut catalog = match &self.list {
            Some(p) => Catalog::load(p)?,
            None => dohscope::catalog::bundled_catalog(),
        };
        let geo = match &self.geo {
            Some(p) => GeoMapping::load(p)?,
            None => GeoMapping::bundled(),
        };
        let mainstream = match &self.mainstream {
            Some(p) => MainstreamSet::load(p)?,
            None => MainstreamSet::bundled(),
        };
        catalog.annotate(&geo, &mainstream);
        Ok(catalog)
    }
}

#[derive(Args)]
struct CatalogArgs {
    #[command(flatten)]
    sources: CatalogSources,
    /// Print region counts instead of the endpoint list.
    #[arg(long)]
    counts: bool,
    /// Print the deduplicated list in resolver-list format.
    #[arg(long, conflicts_with = "counts")]
    plain: bool,
}

#[derive(Args)]
struct InputArgs {
    /// Record files (JSON Lines); merged in order.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[command(flatten)]
    sources: CatalogSources,
    /// Probe method whose RTTs are used.
    #[arg(long, default_value = "icmp", value_parser = parse_ping_method)]
    rtt_method: PingMethod,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Outcome counts and shares.
    Errors {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        csv: bool,
    },
    /// Available or unresponsive, per resolver and vantage.
    Availability {
        #[command(flatten)]
        input: InputArgs,
        /// List only resolvers with no success from any vantage.
        #[arg(long)]
        everywhere: bool,
    },
    /// Per resolver and vantage summaries with medians.
    Medians {
        #[command(flatten)]
        input: InputArgs,
    },
    /// Largest median differences between two vantages.
    Compare {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        region: Option<Region>,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
    /// Resolvers whose median response time exceeds a multiple of RTT.
    Ratios {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = DEFAULT_RATIO_THRESHOLD)]
        threshold: f64,
    },
    /// Fastest resolvers by median response time.
    Rank {
        #[command(flatten)]
        input: InputArgs,
        /// All vantages when omitted.
        #[arg(long)]
        vantage: Option<String>,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
    /// Sorted samples and CDF points for plotting.
    Distribution {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, default_value_t = DEFAULT_TRUNCATE_MS, conflicts_with = "no_truncate")]
        truncate_ms: f64,
        #[arg(long)]
        no_truncate: bool,
        #[arg(long)]
        region: Option<Region>,
        #[arg(long)]
        vantage: Option<String>,
        /// Per-group counts instead of samples.
        #[arg(long)]
        groups: bool,
    },
}

#[derive(Args)]
struct MockArgs {
    #[arg(long, default_value = "127.0.0.1:8443")]
    bind: SocketAddr,
    /// none, status-N, garbage-body, mismatched-id, tls-version-mismatch,
    /// stall-tls, h2-framing or close-after-handshake.
    #[arg(long, default_value = "none")]
    fault: Fault,
    /// any, 1.2 or 1.3.
    #[arg(long, default_value = "any")]
    tls: TlsPolicy,
    #[arg(long)]
    http1_only: bool,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "0s")]
    delay: Duration,
    #[arg(long, default_value_t = 0)]
    rcode: u8,
    /// Names on the server certificate; repeatable.
    #[arg(long = "hostname")]
    hostnames: Vec<String>,
    /// Write the CA certificate (PEM) here.
    #[arg(long)]
    ca_out: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<HttpMethod, String> {
    match s.to_ascii_lowercase().as_str() {
        "post" => Ok(HttpMethod::Post),
        "get" => Ok(HttpMethod::Get),
        _ => Err(format!("expected post or get, got {s:?}")),
    }
}

fn parse_ping_method(s: &str) -> std::result::Result<PingMethod, String> {
    match s {
        "icmp" => Ok(PingMethod::Icmp),
        "tcp-fallback" | "tcp" => Ok(PingMethod::TcpFallback),
        _ => Err(format!("expected icmp or tcp-fallback, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Measure(args) => measure(args),
        Command::Catalog(args) => catalog(args),
        Command::Analyze { what } => analyze(what),
        Command::MockServer(args) => mock_server(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn measure(args: MeasureArgs) -> Result<()> {
    let mut config = CampaignConfig::load(&args.config)?;
    if let Some(v) = args.vantage {
        config.vantage = v;
    }
    if let Some(id) = args.campaign_id {
        config.campaign_id = Some(id);
    }
    if let Some(n) = args.rounds {
        config.rounds = Some(n);
    }
    if let Some(d) = args.duration {
        config.duration = Some(d);
    }
    if let Some(i) = args.round_interval {
        config.round_interval = i;
    }
    if let Some(p) = args.parallelism {
        config.parallelism = p;
    }
    if !args.domains.is_empty() {
        config.domains = args.domains;
    }
    if let Some(p) = args.resolver_list {
        config.resolver_list = Some(p);
    }
    if let Some(p) = args.output {
        config.output = p;
    }
    if let Some(m) = args.method {
        config.transport.method = m;
    }
    if let Some(p) = args.ca_file {
        config.transport.ca_file = Some(p);
    }
    config.transport.resolve.extend(args.resolve);
    if args.ping_fallback {
        config.ping.fallback = true;
    }
    config.apply_env();

    let summary = runtime()?.block_on(run_campaign_until(&config, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    print!("{summary}");
    Ok(())
}

fn catalog(args: CatalogArgs) -> Result<()> {
    let catalog = args.sources.load()?;
    for d in &catalog.diagnostics {
        eprintln!("line {}: {} ({})", d.line, d.reason, d.text);
    }
    if catalog.duplicates > 0 {
        eprintln!("{} duplicate URLs skipped", catalog.duplicates);
    }
    let mut out = std::io::stdout().lock();
    if args.counts {
        for (region, n) in campaign::region_counts(&catalog) {
            writeln!(out, "{region}\t{n}")?;
        }
        writeln!(out, "total\t{}", catalog.len())?;
    } else if args.plain {
        write!(out, "{}", catalog.to_list_text())?;
    } else {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["url", "hostname", "region", "mainstream"])?;
        for e in catalog.iter() {
            w.write_record([e.url.as_str(), &e.hostname, e.region.as_str(), &e.mainstream.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

struct Loaded {
    records: Vec<campaign::MeasurementRecord>,
    catalog: Catalog,
    opts: SummaryOptions,
}

fn load_input(input: &InputArgs) -> Result<Loaded> {
    let loaded = load_many(&input.input)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(Loaded {
        records: loaded.records,
        catalog: input.sources.load()?,
        opts: SummaryOptions {
            rtt_method: input.rtt_method,
        },
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn analyze(what: AnalyzeCommand) -> Result<()> {
    let stdout = std::io::stdout();
    match what {
        AnalyzeCommand::Errors { input, csv } => {
            let l = load_input(&input)?;
            let table = error_table(&l.records);
            let mut out = stdout.lock();
            if csv {
                write!(out, "{}", table.to_csv())?;
            } else {
                write!(out, "{}", table.render())?;
            }
        }
        AnalyzeCommand::Availability { input, everywhere } => {
            let l = load_input(&input)?;
            let mut out = stdout.lock();
            if everywhere {
                for url in analysis::unresponsive_everywhere(&l.records) {
                    writeln!(out, "{url}")?;
                }
            } else {
                let mut w = csv::Writer::from_writer(out);
                w.write_record(["resolver_url", "vantage", "attempts", "successes", "availability"])?;
                for s in summarize(&l.records, Some(&l.catalog), l.opts) {
                    let state = if s.available { "available" } else { "unresponsive" };
                    w.write_record([
                        s.resolver_url,
                        s.vantage,
                        s.total_attempts.to_string(),
                        s.successes.to_string(),
                        state.into(),
                    ])?;
                }
                w.flush()?;
            }
        }
        AnalyzeCommand::Medians { input } => {
            let l = load_input(&input)?;
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record([
                "resolver_url",
                "vantage",
                "region",
                "mainstream",
                "total_attempts",
                "successes",
                "available",
                "median_response_ms",
                "median_rtt_ms",
                "ratio",
            ])?;
            for s in summarize(&l.records, Some(&l.catalog), l.opts) {
                w.write_record([
                    s.resolver_url,
                    s.vantage,
                    s.region.to_string(),
                    s.mainstream.to_string(),
                    s.total_attempts.to_string(),
                    s.successes.to_string(),
                    s.available.to_string(),
                    opt(s.median_response_ms),
                    opt(s.median_rtt_ms),
                    opt(s.ratio),
                ])?;
            }
            w.flush()?;
        }
        AnalyzeCommand::Compare { input, a, b, region, k } => {
            let l = load_input(&input)?;
            let summaries = summarize(&l.records, Some(&l.catalog), l.opts);
            let rows = regional_comparison(&summaries, region, &a, &b, k)?;
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record(["resolver_url", "vantage_a", "median_a_ms", "vantage_b", "median_b_ms", "abs_diff_ms"])?;
            for r in rows {
                w.write_record([
                    r.resolver_url,
                    a.clone(),
                    r.median_a_ms.to_string(),
                    b.clone(),
                    r.median_b_ms.to_string(),
                    r.abs_diff_ms.to_string(),
                ])?;
            }
            w.flush()?;
        }
        AnalyzeCommand::Ratios { input, threshold } => {
            let l = load_input(&input)?;
            let summaries = summarize(&l.records, Some(&l.catalog), l.opts);
            let report = latency_ratio_flags(&summaries, threshold);
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record(["resolver_url", "vantage", "median_response_ms", "median_rtt_ms", "ratio", "status"])?;
            for r in report.flagged {
                w.write_record([
                    r.resolver_url,
                    r.vantage,
                    r.median_response_ms.to_string(),
                    r.median_rtt_ms.to_string(),
                    r.ratio.to_string(),
                    "flagged".into(),
                ])?;
            }
            for (url, vantage) in report.unratable {
                w.write_record([url, vantage, String::new(), String::new(), String::new(), "unratable".into()])?;
            }
            w.flush()?;
        }
        AnalyzeCommand::Rank { input, vantage, k } => {
            let l = load_input(&input)?;
            let summaries = summarize(&l.records, Some(&l.catalog), l.opts);
            let vantages = match vantage {
                Some(v) => vec![v],
                None => analysis::vantages(&l.records),
            };
            let mut w = csv::Writer::from_writer(stdout.lock());
            w.write_record(["vantage", "rank", "resolver_url", "median_response_ms", "mainstream"])?;
            for v in vantages {
                for r in rank_resolvers(&summaries, &v, k)? {
                    w.write_record([
                        v.clone(),
                        r.rank.to_string(),
                        r.resolver_url,
                        r.median_response_ms.to_string(),
                        r.mainstream.to_string(),
                    ])?;
                }
            }
            w.flush()?;
        }
        AnalyzeCommand::Distribution {
            input,
            truncate_ms,
            no_truncate,
            region,
            vantage,
            groups,
        } => {
            let l = load_input(&input)?;
            let cut = (!no_truncate).then_some(truncate_ms);
            let export = distribution_export(&l.records, Some(&l.catalog), cut, l.opts.rtt_method)
                .filter(region, vantage.as_deref());
            let text = if groups { export.groups_csv() } else { export.to_csv() };
            stdout.lock().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn mock_server(args: MockArgs) -> Result<()> {
    let mut config = MockConfig {
        fault: args.fault,
        tls: args.tls,
        alpn: if args.http1_only {
            AlpnPolicy::Http11Only
        } else {
            AlpnPolicy::H2AndHttp11
        },
        delay: args.delay,
        rcode: args.rcode,
        ..MockConfig::default()
    };
    if !args.hostnames.is_empty() {
        config.hostnames = args.hostnames;
    }
    runtime()?.block_on(async move {
        let pki = Arc::new(MockPki::generate()?);
        if let Some(path) = &args.ca_out {
            std::fs::write(path, pki.ca_pem())?;
        }
        let host = config.hostnames[0].clone();
        let server = MockServer::start_on(args.bind, config, pki).await?;
        println!("{}", server.url_for(&host));
        std::io::stdout().flush()?;
        tokio::signal::ctrl_c().await?;
        drop(server);
        Ok(())
    })
}
