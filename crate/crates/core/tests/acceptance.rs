//! Acceptance criteria. Each test prints one PASS/FAIL line to stderr
//! (outside the harness capture) and then asserts.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use common::records::{doh, ok, ping};
use common::{floor_rtt_ms, Fleet};
use dohscope::analysis::{
    distribution_export, latency_ratio_flags, median, median_response_time, summarize, ErrorTable, Series,
    SummaryOptions, DEFAULT_RATIO_THRESHOLD, DEFAULT_TRUNCATE_MS,
};
use dohscope::campaign::{load_records, run_campaign, MeasurementRecord, OUTPUT_ENV};
use dohscope::catalog::{bundled_catalog, GeoMapping, MainstreamSet, Region, ResolverEndpoint};
use dohscope::icmp::PingMethod;
use dohscope::mock::{Fault, MockConfig, MockServer};
use dohscope::transport::{DohClient, DohQuery, ErrorClass, HostResolver, TransportOptions};
use dohscope::wire::{decode_response, encode_query, DnsQuestion};

fn report(n: u8, title: &str, started: Instant, outcome: Result<String, String>) {
    let secs = started.elapsed().as_secs_f64();
    let line = match &outcome {
        Ok(detail) => format!("PASS criterion {n}: {title} ({detail}; {secs:.1}s)\n"),
        Err(detail) => format!("FAIL criterion {n}: {title} ({detail}; {secs:.1}s)\n"),
    };
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    if let Err(detail) = outcome {
        panic!("criterion {n} failed: {detail}");
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// Criterion 1

fn label() -> impl Strategy<Value = String> {
    // Printable ASCII except the separator and the escape character.
    proptest::collection::vec(
        prop_oneof![
            8 => proptest::sample::select(b"abcdefghijklmnopqrstuvwxyz0123456789-".to_vec()),
            1 => (0x21u8..0x7f).prop_filter("not . or \\", |b| *b != b'.' && *b != b'\\'),
        ],
        1..=63,
    )
    .prop_map(|v| String::from_utf8(v).unwrap())
}

fn question() -> impl Strategy<Value = DnsQuestion> {
    let name = prop_oneof![
        20 => proptest::collection::vec(label(), 1..8).prop_map(|mut labels| {
            while labels.iter().map(|l| l.len() + 1).sum::<usize>() - 1 > 253 {
                labels.pop();
            }
            labels.join(".")
        }),
        1 => Just(".".to_string()),
    ];
    (name, any::<u16>(), any::<u16>()).prop_map(|(n, t, c)| DnsQuestion::new(n, t, c))
}

fn random_buffer(rng: &mut TestRng, valid: &[u8]) -> Vec<u8> {
    let roll = rng.next_u32() % 8;
    let len = match roll {
        0 => (rng.next_u32() % (64 * 1024 + 1)) as usize,
        1..=3 => (rng.next_u32() % 64) as usize,
        _ => (rng.next_u32() % 600) as usize,
    };
    let mut buf = vec![0u8; len];
    rng.fill_bytes(&mut buf);
    if roll >= 6 && !valid.is_empty() {
        // Mutate a well-formed response instead: flip bytes, truncate.
        buf = valid.to_vec();
        buf[2] |= 0x80;
        for _ in 0..1 + rng.next_u32() % 4 {
            let i = rng.next_u32() as usize % buf.len();
            buf[i] = rng.next_u32() as u8;
        }
        buf.truncate(rng.next_u32() as usize % (buf.len() + 1));
    } else if len >= 12 && roll.is_multiple_of(2) {
        buf[2] |= 0x80;
    }
    buf
}

#[test]
fn criterion_1_wire_roundtrip_and_fuzz() {
    let started = Instant::now();
    let result = (|| {
        let mut runner = TestRunner::new_with_rng(
            Config {
                cases: 10_000,
                failure_persistence: None,
                ..Config::default()
            },
            TestRng::deterministic_rng(RngAlgorithm::ChaCha),
        );
        let roundtrips = std::cell::Cell::new(0u32);
        runner
            .run(&(question(), any::<u16>()), |(q, id)| {
                let mut wire = encode_query(&q, id, true).map_err(|e| TestCaseError::fail(e.to_string()))?;
                wire[2] |= 0x80;
                let s = decode_response(&wire).map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert_eq!(s.id, id);
                prop_assert_eq!(s.question_echo.as_ref(), Some(&q));
                roundtrips.set(roundtrips.get() + 1);
                Ok(())
            })
            .map_err(|e| format!("roundtrip: {e}"))?;

        let mut rng = TestRng::from_seed(RngAlgorithm::ChaCha, &[7; 32]);
        let valid = encode_query(&DnsQuestion::a("www.example.com"), 0x1234, true).unwrap();
        let mut crashes = 0;
        let mut decoded = 0;
        let mut largest = 0;
        for _ in 0..10_000 {
            let buf = random_buffer(&mut rng, &valid);
            largest = largest.max(buf.len());
            match std::panic::catch_unwind(|| decode_response(&buf)) {
                Ok(Ok(_)) => decoded += 1,
                Ok(Err(_)) => {}
                Err(_) => crashes += 1,
            }
        }
        check(crashes == 0, || format!("{crashes} decoder panics"))?;
        check(largest <= 64 * 1024, || "buffer over 64 KiB".into())?;
        check(started.elapsed() < Duration::from_secs(30), || "over 30 s".into())?;
        Ok(format!(
            "{} questions roundtripped, 10000 buffers decoded without panic ({decoded} parsed)",
            roundtrips.get()
        ))
    })();
    report(1, "wire codec roundtrip and fuzz", started, result);
}

// Criterion 2

const HOST: &str = "resolver.test";

fn mock_options(server: &MockServer) -> TransportOptions {
    TransportOptions {
        connect_timeout: Duration::from_millis(400),
        total_timeout: Duration::from_secs(3),
        webpki_roots: false,
        extra_roots: vec![server.ca_der()],
        resolver: HostResolver::parse_overrides(&[format!("{HOST}:127.0.0.1")]).unwrap(),
        ..TransportOptions::default()
    }
}

async fn induce(mode: &str, rep: usize) -> ErrorClass {
    let query = DohQuery::a("google.com").unwrap();
    let fault_server = |fault| async move {
        MockServer::start(MockConfig {
            hostnames: vec![HOST.into()],
            ..MockConfig::with_fault(fault)
        })
        .await
        .unwrap()
    };
    let (server, url) = match mode {
        "closed port" => {
            let server = fault_server(Fault::None).await;
            let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
            (server, format!("https://{HOST}:{port}/dns-query"))
        }
        "http status" => {
            let status = [400, 404, 500, 502, 503][rep % 5];
            let s = fault_server(Fault::HttpStatus(status)).await;
            let url = s.url_for(HOST);
            (s, url)
        }
        "garbage body" => {
            let s = fault_server(Fault::GarbageBody).await;
            let url = s.url_for(HOST);
            (s, url)
        }
        "tls version mismatch" => {
            let s = fault_server(Fault::TlsVersionMismatch).await;
            let url = s.url_for(HOST);
            (s, url)
        }
        "bad certificate" => {
            let s = MockServer::start(MockConfig {
                hostnames: vec!["elsewhere.test".into()],
                ..MockConfig::default()
            })
            .await
            .unwrap();
            let url = s.url_for(HOST);
            (s, url)
        }
        "unresolvable hostname" => {
            let s = fault_server(Fault::None).await;
            (s, "https://no-such-resolver.invalid/dns-query".into())
        }
        "tls timeout" => {
            let s = fault_server(Fault::StallTls).await;
            let url = s.url_for(HOST);
            (s, url)
        }
        "h2 framing" => {
            let s = fault_server(Fault::H2FramingViolation).await;
            let url = s.url_for(HOST);
            (s, url)
        }
        "generic fault" => {
            let s = fault_server(Fault::CloseAfterHandshake).await;
            let url = s.url_for(HOST);
            (s, url)
        }
        _ => unreachable!(),
    };
    let client = DohClient::new(mock_options(&server)).unwrap();
    let endpoint = ResolverEndpoint::parse(&url).unwrap();
    client.measure(&endpoint, &query, "acceptance").await.outcome
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn criterion_2_error_taxonomy() {
    let started = Instant::now();
    let modes = [
        ("closed port", ErrorClass::CouldNotConnect),
        ("http status", ErrorClass::HttpErrorStatus),
        ("garbage body", ErrorClass::CouldNotDecodeResponse),
        ("tls version mismatch", ErrorClass::SslConnectError),
        ("bad certificate", ErrorClass::SslCertificateError),
        ("unresolvable hostname", ErrorClass::NameResolutionFailure),
        ("tls timeout", ErrorClass::SslTimeout),
        ("h2 framing", ErrorClass::Http2FramingError),
        ("generic fault", ErrorClass::OtherError),
    ];
    let mut failures = Vec::new();
    for (mode, want) in modes {
        for rep in 0..5 {
            let got = induce(mode, rep).await;
            if got != want {
                failures.push(format!("{mode} #{rep}: {got} (want {want})"));
            }
        }
    }
    let result = if !failures.is_empty() {
        Err(failures.join("; "))
    } else if started.elapsed() > Duration::from_secs(120) {
        Err("over 2 min".into())
    } else {
        Ok("9 modes x 5 repetitions classified".into())
    };
    report(2, "error taxonomy against the mock", started, result);
}

// Criterion 3

#[test]
fn criterion_3_error_table() {
    let started = Instant::now();
    let counts = [
        (ErrorClass::Success, 531_528u64),
        (ErrorClass::CouldNotConnect, 47_377),
        (ErrorClass::HttpErrorStatus, 38_475),
        (ErrorClass::CouldNotDecodeResponse, 26_686),
        (ErrorClass::SslConnectError, 17_720),
        (ErrorClass::NameResolutionFailure, 8_864),
        (ErrorClass::SslCertificateError, 4_465),
        (ErrorClass::OtherError, 234),
        (ErrorClass::SslTimeout, 27),
        (ErrorClass::Http2FramingError, 2),
    ];
    let vantages = ["Ohio", "Seoul", "Frankfurt"];
    let template = doh("https://dns.example/dns-query", "Ohio", ErrorClass::Success, Some(42.0));
    let stream = counts.iter().flat_map(|&(class, n)| {
        let template = &template;
        (0..n).map(move |i| {
            let mut r: MeasurementRecord = template.clone();
            r.outcome = class;
            r.vantage = vantages[i as usize % 3].to_string();
            r.round = i;
            r
        })
    });
    let table = ErrorTable::from_records(stream);

    let result = (|| {
        // The printed error rows add up to 143,850, two more than the
        // printed "All Errors" total; the table is built from the rows.
        let fed: u64 = counts.iter().map(|c| c.1).sum();
        check(table.total == fed && fed == 675_378, || format!("total {}", table.total))?;
        check(table.all_errors == 143_850, || format!("errors {}", table.all_errors))?;
        let shown: BTreeMap<String, String> = table.rows().into_iter().map(|r| (r.label, r.display)).collect();
        let expected = [
            ("Successful Responses", "78.7%"),
            ("All Errors", "21.3%"),
            ("Couldn't Connect to Server", "7%"),
            ("HTTP Error Status", "5.7%"),
            ("Couldn't Decode Response", "4%"),
            ("SSL Connect Error", "2.6%"),
            ("Couldn't Resolve the Resolver's Domain Name", "1.3%"),
            ("SSL Certificate Error", "0.7%"),
            ("Other Error", "<1%"),
            ("SSL Timeout", "<1%"),
            ("Error in the HTTP/2 Framing Layer", "<1%"),
        ];
        for (label, want) in expected {
            let got = shown.get(label).map(String::as_str);
            check(got == Some(want), || format!("{label}: {got:?} != {want}"))?;
        }
        let order: Vec<u64> = table.errors.iter().map(|r| r.count).collect();
        check(order.windows(2).all(|w| w[0] >= w[1]), || "rows not by count".into())?;
        check(started.elapsed() < Duration::from_secs(60), || "over 1 min".into())?;
        Ok(format!("{fed} records; 11 rows match the printed table"))
    })();
    report(3, "error table reproduction", started, result);
}

// Criterion 4

/// k-th smallest value (0-based) by counting, without sorting.
fn order_statistic(v: &[f64], k: usize) -> f64 {
    for &x in v {
        let below = v.iter().filter(|y| **y < x).count();
        let at_or_below = v.iter().filter(|y| **y <= x).count();
        if below <= k && k < at_or_below {
            return x;
        }
    }
    unreachable!()
}

fn median_oracle(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        order_statistic(v, n / 2)
    } else {
        (order_statistic(v, n / 2 - 1) + order_statistic(v, n / 2)) / 2.0
    }
}

#[test]
fn criterion_4_median_and_ratio_oracles() {
    let started = Instant::now();
    let url = "https://r.example/dns-query";
    let result = (|| {
        let mut rng = TestRng::from_seed(RngAlgorithm::ChaCha, &[4; 32]);
        for set in 0..1000 {
            let n = 1 + rng.next_u32() as usize % 1000;
            let samples: Vec<f64> = (0..n)
                .map(|_| match rng.next_u32() % 4 {
                    // Repeated values exercise ties.
                    0 => (rng.next_u32() % 20) as f64,
                    _ => (rng.next_u64() % 10_000_000) as f64 / 1000.0,
                })
                .collect();
            let mut records: Vec<MeasurementRecord> = samples.iter().map(|s| ok(url, "v", *s)).collect();
            records.push(doh(url, "v", ErrorClass::SslTimeout, Some(1e9)));
            let want = median_oracle(&samples);
            let got = median_response_time(&records, url, "v").map_err(|e| e.to_string())?;
            check(got == want, || format!("set {set} (n={n}): {got} != {want}"))?;
            check(median(&samples) == Some(want), || format!("set {set}: median()"))?;
        }

        let xfinity = "https://doh.xfinity.com/dns-query";
        let mut records = common::records::around(xfinity, "Ohio", 872.0);
        records.extend([165.0, 166.0, 167.0].map(|a| ping("doh.xfinity.com", "Ohio", Some(a))));
        let summaries = summarize(&records, None, SummaryOptions::default());
        let report = latency_ratio_flags(&summaries, DEFAULT_RATIO_THRESHOLD);
        let row = report.flagged.iter().find(|r| r.resolver_url == xfinity);
        let row = row.ok_or("872 ms vs 166 ms not flagged")?;
        check(row.ratio > 4.0 && (row.ratio - 872.0 / 166.0).abs() < 1e-12, || {
            format!("ratio {}", row.ratio)
        })?;
        check(started.elapsed() < Duration::from_secs(10), || "over 10 s".into())?;
        Ok(format!("1000 sample sets match; 872/166 flagged at ratio {:.2}", row.ratio))
    })();
    report(4, "median and latency-ratio oracles", started, result);
}

// Criterion 5

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn criterion_5_end_to_end_campaign() {
    let started = Instant::now();
    let result = async {
        let delay = Duration::from_millis(2);
        let fleet = Fleet::start(3, delay).await;
        let config = fleet.config(3, &[]);
        let summary = run_campaign(&config).await.map_err(|e| e.to_string())?;
        let recs = load_records(&config.output).map_err(|e| e.to_string())?.records;
        let doh_n = recs.iter().filter(|r| r.is_doh()).count();
        let ping_n = recs.iter().filter(|r| r.is_ping()).count();
        check((doh_n, ping_n) == (18, 9), || format!("{doh_n} doh + {ping_n} ping"))?;
        check(summary.doh_records == 18 && summary.ping_records == 9, || "summary counts".into())?;
        let floor = fleet
            .servers
            .iter()
            .map(|s| floor_rtt_ms(s.port()))
            .fold(f64::INFINITY, f64::min);
        for r in recs.iter().filter(|r| r.is_doh()) {
            check(r.timing.is_monotone(), || format!("non-monotone timing {:?}", r.timing))?;
            check(r.outcome == ErrorClass::Success, || format!("{:?}", r.detail))?;
            let total = r.timing.total_ms.unwrap_or(0.0);
            check(total >= floor, || format!("total {total} ms below floor {floor} ms"))?;
        }
        let crash = crash_restart(&fleet).await?;
        check(started.elapsed() < Duration::from_secs(120), || "over 2 min".into())?;
        Ok::<_, String>(format!("18 doh + 9 ping, floor {floor:.3} ms; {crash}"))
    }
    .await;
    report(5, "end-to-end mock campaign", started, result);
}

/// Kills a running `measure` process, restarts it and counts what was lost.
async fn crash_restart(fleet: &Fleet) -> Result<String, String> {
    let mut config = fleet.config(1_000, &[]);
    config.campaign_id = Some("crash".into());
    config.round_interval = Duration::from_millis(1);
    config.output = fleet.path("crash.jsonl");
    let per_round = 3 * 3;
    let path = fleet.write_config(&config);
    let bin = env!("CARGO_BIN_EXE_dohscope");

    let mut child = Command::new(bin)
        .args(["measure", "--config"])
        .arg(&path)
        .env_remove(OUTPUT_ENV)
        .spawn()
        .map_err(|e| e.to_string())?;
    let t = Instant::now();
    loop {
        let lines = std::fs::read(&config.output).map(|b| b.iter().filter(|c| **c == b'\n').count()).unwrap_or(0);
        if lines >= per_round * 2 + 4 {
            break;
        }
        if t.elapsed() > Duration::from_secs(60) {
            let _ = child.kill();
            return Err("campaign made no progress".into());
        }
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;

    let before = load_records(&config.output).map_err(|e| e.to_string())?;
    let last = before.records.iter().map(|r| r.round).max().unwrap();
    config.rounds = Some(last + 2);
    let path = fleet.write_config(&config);
    let out = tokio::task::spawn_blocking(move || {
        Command::new(bin)
            .args(["measure", "--config"])
            .arg(path)
            .env_remove(OUTPUT_ENV)
            .output()
    })
    .await
    .unwrap()
    .map_err(|e| e.to_string())?;
    check(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let after = load_records(&config.output).map_err(|e| e.to_string())?;
    check(after.warnings.is_empty(), || format!("{:?}", after.warnings))?;
    check(after.records[..before.records.len()] == before.records[..], || {
        "persisted records changed".into()
    })?;
    let mut lost = 0;
    for round in 0..last + 2 {
        let n = after.records.iter().filter(|r| r.round == round).count();
        if round == last {
            lost = per_round - n;
        } else {
            check(n == per_round, || format!("round {round} has {n} records"))?;
        }
    }
    Ok(format!(
        "killed during round {last}, {lost} of {per_round} in-flight records lost, {} partial bytes dropped",
        if before.warnings.is_empty() { "no" } else { "some" }
    ))
}

// Criterion 6

#[test]
fn criterion_6_catalog_fixture() {
    let started = Instant::now();
    let mut catalog = bundled_catalog();
    catalog.annotate(&GeoMapping::bundled(), &MainstreamSet::bundled());
    let unresponsive = [
        "dns1.dnscrypt.ca",
        "dns2.dnscrypt.ca",
        "doh.cleanbrowsing.org",
        "doh.post-factum.tk",
        "doh.linuxsec.org",
        "doh.tiar.app",
        "jp.tiar.app",
        "doh.appliedprivacy.net",
        "doh.bortzmeyer.fr",
        "doh.chewbacca.meganerd.nl",
        "doh.powerdns.org",
    ];
    let result = (|| {
        let hosts = catalog.hostnames();
        let missing: Vec<_> = unresponsive.iter().filter(|h| !hosts.contains(*h)).collect();
        check(missing.is_empty(), || format!("missing {missing:?}"))?;
        let na = catalog.count_by_region(Region::NorthAmerica);
        let asia = catalog.count_by_region(Region::Asia);
        let eu = catalog.count_by_region(Region::Europe);
        check((na, asia, eu) == (17, 22, 36), || {
            format!(
                "region counts {na}/{asia}/{eu} over {} deduplicated URLs ({} duplicate lines), expected 17/22/36; \
                 all 11 unresponsive hosts present",
                catalog.len(),
                catalog.duplicates
            )
        })?;
        check(started.elapsed() < Duration::from_secs(5), || "over 5 s".into())?;
        Ok(format!("{} resolvers, 17/22/36, all 11 unresponsive hosts present", catalog.len()))
    })();
    report(6, "catalog fixture", started, result);
}

// Criterion 7

#[test]
fn criterion_7_truncation_conservation() {
    let started = Instant::now();
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 200,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let dataset = proptest::collection::vec(
        (
            0usize..6,
            0usize..3,
            prop_oneof![
                3 => (0.0f64..2_000.0).prop_map(Some),
                1 => Just(Some(DEFAULT_TRUNCATE_MS)),
                1 => Just(None),
            ],
        ),
        0..400,
    );
    let vantages = ["Ohio", "Seoul", "Frankfurt"];
    let groups_checked = std::cell::Cell::new(0usize);
    let outcome = runner.run(&dataset, |rows| {
        let records: Vec<MeasurementRecord> = rows
            .iter()
            .map(|(res, v, sample)| {
                let url = format!("https://r{res}.example/dns-query");
                match sample {
                    Some(ms) => ok(&url, vantages[*v], *ms),
                    None => doh(&url, vantages[*v], ErrorClass::CouldNotConnect, None),
                }
            })
            .collect();
        let export = distribution_export(&records, None, Some(DEFAULT_TRUNCATE_MS), PingMethod::Icmp);
        // Independent recount per (vantage, resolver).
        let mut successes: BTreeMap<(String, String), (u64, u64)> = BTreeMap::new();
        for (res, v, sample) in &rows {
            if let Some(ms) = sample {
                let e = successes
                    .entry((vantages[*v].to_string(), format!("https://r{res}.example/dns-query")))
                    .or_default();
                e.0 += 1;
                e.1 += (*ms > 500.0) as u64;
            }
        }
        let dns: Vec<_> = export.groups.iter().filter(|g| g.series == Series::Dns).collect();
        prop_assert_eq!(dns.len(), successes.len());
        for g in dns {
            let (total, over) = successes[&(g.vantage.clone(), g.resolver_url.clone())];
            prop_assert_eq!(g.retained.len() as u64 + g.overflow, total);
            prop_assert_eq!(g.overflow, over);
            prop_assert!(g.retained.iter().all(|s| *s <= 500.0));
            groups_checked.set(groups_checked.get() + 1);
        }
        let csv_rows = export.to_csv().lines().count() - 1;
        prop_assert_eq!(csv_rows, export.sample_rows());
        Ok(())
    });
    let result = match outcome {
        Err(e) => Err(e.to_string()),
        Ok(()) if DEFAULT_TRUNCATE_MS != 500.0 => Err(format!("default cut-off {DEFAULT_TRUNCATE_MS}")),
        Ok(()) if started.elapsed() > Duration::from_secs(10) => Err("over 10 s".into()),
        Ok(()) => Ok(format!("200 datasets, {} resolver groups conserve retained + overflow", groups_checked.get())),
    };
    report(7, "truncation conservation", started, result);
}
