//! Derived results over persisted records.
//!
//! Everything here is a pure function of the record set. Ties are broken
//! by resolver URL so output order is reproducible. Timing statistics use
//! Success records only.

mod distribution;
mod table;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

pub use distribution::{distribution_export, DistributionExport, DistributionGroup, Series, DEFAULT_TRUNCATE_MS};
pub use table::{error_table, format_count, format_percent, ErrorRow, ErrorTable};

use crate::campaign::MeasurementRecord;
use crate::catalog::{Catalog, Region};
use crate::icmp::PingMethod;
use crate::transport::ErrorClass;

pub const DEFAULT_RATIO_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalysisError {
    #[error("no data for {0}")]
    NoData(String),
}

/// Median with the even-count rule: mean of the two central values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Availability {
    Available,
    Unresponsive,
}

fn doh_for<'a>(
    records: &'a [MeasurementRecord],
    resolver_url: &'a str,
    vantage: &'a str,
) -> impl Iterator<Item = &'a MeasurementRecord> + 'a {
    records
        .iter()
        .filter(move |r| r.is_doh() && r.vantage == vantage && r.resolver_url.as_deref() == Some(resolver_url))
}

/// Unresponsive when no attempt from `vantage` succeeded.
pub fn availability(
    records: &[MeasurementRecord],
    resolver_url: &str,
    vantage: &str,
) -> Result<Availability, AnalysisError> {
    let mut any = false;
    for r in doh_for(records, resolver_url, vantage) {
        if r.is_success() {
            return Ok(Availability::Available);
        }
        any = true;
    }
    if any {
        Ok(Availability::Unresponsive)
    } else {
        Err(AnalysisError::NoData(format!("{resolver_url} from {vantage}")))
    }
}

/// Resolvers with attempts but not a single success from any vantage.
pub fn unresponsive_everywhere(records: &[MeasurementRecord]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut answered = BTreeSet::new();
    for r in records.iter().filter(|r| r.is_doh()) {
        if let Some(url) = &r.resolver_url {
            seen.insert(url.as_str());
            if r.is_success() {
                answered.insert(url.as_str());
            }
        }
    }
    seen.difference(&answered).map(|s| s.to_string()).collect()
}

/// Median `total_ms` over Success records for the pair.
pub fn median_response_time(
    records: &[MeasurementRecord],
    resolver_url: &str,
    vantage: &str,
) -> Result<f64, AnalysisError> {
    let samples: Vec<f64> = doh_for(records, resolver_url, vantage)
        .filter(|r| r.is_success())
        .filter_map(|r| r.timing.total_ms)
        .collect();
    median(&samples).ok_or_else(|| AnalysisError::NoData(format!("successful queries to {resolver_url} from {vantage}")))
}

/// Per-round average RTTs to `host` from `vantage`, for rounds with at
/// least one reply and the given probe method.
pub fn rtt_samples(records: &[MeasurementRecord], host: &str, vantage: &str, method: PingMethod) -> Vec<f64> {
    records
        .iter()
        .filter(|r| {
            r.is_ping()
                && r.vantage == vantage
                && r.method == Some(method)
                && r.host.as_deref().is_some_and(|h| h.eq_ignore_ascii_case(host))
                && r.received.unwrap_or(0) > 0
        })
        .filter_map(|r| r.avg_rtt_ms)
        .collect()
}

/// Per (resolver, vantage) aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolverSummary {
    pub resolver_url: String,
    pub hostname: String,
    pub vantage: String,
    pub total_attempts: u64,
    pub successes: u64,
    pub error_histogram: BTreeMap<ErrorClass, u64>,
    pub available: bool,
    pub median_response_ms: Option<f64>,
    pub median_rtt_ms: Option<f64>,
    pub ratio: Option<f64>,
    pub region: Region,
    pub mainstream: bool,
}

/// Options for [`summarize`].
#[derive(Debug, Clone, Copy)]
pub struct SummaryOptions {
    /// Only ping records of this method feed RTT medians.
    pub rtt_method: PingMethod,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        SummaryOptions {
            rtt_method: PingMethod::Icmp,
        }
    }
}

/// Region and mainstream flag from the catalog, or Unknown/false.
pub fn resolver_info(catalog: Option<&Catalog>, resolver_url: &str) -> (Region, bool) {
    catalog
        .and_then(|c| c.find(resolver_url))
        .map(|e| (e.region, e.mainstream))
        .unwrap_or((Region::Unknown, false))
}

/// One summary per (resolver, vantage) that has DoH attempts, ordered by
/// vantage then URL.
pub fn summarize(records: &[MeasurementRecord], catalog: Option<&Catalog>, opts: SummaryOptions) -> Vec<ResolverSummary> {
    struct Acc {
        hostname: String,
        attempts: u64,
        histogram: BTreeMap<ErrorClass, u64>,
        times: Vec<f64>,
    }
    let mut groups: BTreeMap<(String, String), Acc> = BTreeMap::new();
    let mut rtts: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.is_doh() {
            let Some(url) = &r.resolver_url else { continue };
            let acc = groups.entry((r.vantage.clone(), url.clone())).or_insert_with(|| Acc {
                hostname: r.hostname().unwrap_or_default(),
                attempts: 0,
                histogram: BTreeMap::new(),
                times: Vec::new(),
            });
            acc.attempts += 1;
            if r.is_success() {
                if let Some(t) = r.timing.total_ms {
                    acc.times.push(t);
                }
            } else {
                *acc.histogram.entry(r.outcome).or_default() += 1;
            }
        } else if r.method == Some(opts.rtt_method) && r.received.unwrap_or(0) > 0 {
            if let (Some(host), Some(avg)) = (&r.host, r.avg_rtt_ms) {
                rtts.entry((r.vantage.clone(), host.to_ascii_lowercase()))
                    .or_default()
                    .push(avg);
            }
        }
    }
    groups
        .into_iter()
        .map(|((vantage, url), acc)| {
            let errors: u64 = acc.histogram.values().sum();
            let successes = acc.attempts - errors;
            let median_response_ms = median(&acc.times);
            let median_rtt_ms = rtts
                .get(&(vantage.clone(), acc.hostname.clone()))
                .and_then(|v| median(v));
            let ratio = match (median_response_ms, median_rtt_ms) {
                (Some(m), Some(rtt)) if rtt > 0.0 => Some(m / rtt),
                _ => None,
            };
            let (region, mainstream) = resolver_info(catalog, &url);
            ResolverSummary {
                resolver_url: url,
                hostname: acc.hostname,
                vantage,
                total_attempts: acc.attempts,
                successes,
                error_histogram: acc.histogram,
                available: successes > 0,
                median_response_ms,
                median_rtt_ms,
                ratio,
                region,
                mainstream,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub resolver_url: String,
    pub median_a_ms: f64,
    pub median_b_ms: f64,
    pub abs_diff_ms: f64,
}

/// Resolvers (optionally of one region) with medians from both vantages,
/// ordered by |median_a − median_b| descending, at most `k` rows.
pub fn regional_comparison(
    summaries: &[ResolverSummary],
    region: Option<Region>,
    vantage_a: &str,
    vantage_b: &str,
    k: usize,
) -> Result<Vec<ComparisonRow>, AnalysisError> {
    let medians = |v: &str| -> BTreeMap<&str, f64> {
        summaries
            .iter()
            .filter(|s| s.vantage == v && region.is_none_or(|r| s.region == r))
            .filter_map(|s| s.median_response_ms.map(|m| (s.resolver_url.as_str(), m)))
            .collect()
    };
    let a = medians(vantage_a);
    let b = medians(vantage_b);
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::NoData(format!("medians from both {vantage_a} and {vantage_b}")));
    }
    let mut rows: Vec<ComparisonRow> = a
        .iter()
        .filter_map(|(url, ma)| {
            b.get(url).map(|mb| ComparisonRow {
                resolver_url: url.to_string(),
                median_a_ms: *ma,
                median_b_ms: *mb,
                abs_diff_ms: (ma - mb).abs(),
            })
        })
        .collect();
    rows.sort_by(|x, y| {
        y.abs_diff_ms
            .total_cmp(&x.abs_diff_ms)
            .then_with(|| x.resolver_url.cmp(&y.resolver_url))
    });
    rows.truncate(k);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub resolver_url: String,
    pub vantage: String,
    pub median_response_ms: f64,
    pub median_rtt_ms: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RatioReport {
    pub threshold: f64,
    pub flagged: Vec<RatioRow>,
    /// Available resolvers without usable ping data, as (url, vantage).
    pub unratable: Vec<(String, String)>,
}

/// Flags resolvers whose median response time exceeds `threshold` times
/// their median RTT. Unavailable resolvers are left out entirely.
pub fn latency_ratio_flags(summaries: &[ResolverSummary], threshold: f64) -> RatioReport {
    let mut report = RatioReport {
        threshold,
        ..RatioReport::default()
    };
    for s in summaries.iter().filter(|s| s.available) {
        match (s.median_response_ms, s.median_rtt_ms, s.ratio) {
            (Some(m), Some(rtt), Some(ratio)) => {
                if m > threshold * rtt {
                    report.flagged.push(RatioRow {
                        resolver_url: s.resolver_url.clone(),
                        vantage: s.vantage.clone(),
                        median_response_ms: m,
                        median_rtt_ms: rtt,
                        ratio,
                    });
                }
            }
            _ => report.unratable.push((s.resolver_url.clone(), s.vantage.clone())),
        }
    }
    let key = |r: &RatioRow| (r.vantage.clone(), r.resolver_url.clone());
    report
        .flagged
        .sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then_with(|| key(a).cmp(&key(b))));
    report.unratable.sort();
    report
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankRow {
    pub rank: usize,
    pub resolver_url: String,
    pub median_response_ms: f64,
    pub mainstream: bool,
}

/// The `k` fastest available resolvers at `vantage` by median response
/// time.
pub fn rank_resolvers(summaries: &[ResolverSummary], vantage: &str, k: usize) -> Result<Vec<RankRow>, AnalysisError> {
    let mut pool: Vec<&ResolverSummary> = summaries
        .iter()
        .filter(|s| s.vantage == vantage && s.available && s.median_response_ms.is_some())
        .collect();
    if pool.is_empty() {
        return Err(AnalysisError::NoData(format!("available resolvers at {vantage}")));
    }
    pool.sort_by(|a, b| {
        a.median_response_ms
            .unwrap()
            .total_cmp(&b.median_response_ms.unwrap())
            .then_with(|| a.resolver_url.cmp(&b.resolver_url))
    });
    Ok(pool
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, s)| RankRow {
            rank: i + 1,
            resolver_url: s.resolver_url.clone(),
            median_response_ms: s.median_response_ms.unwrap(),
            mainstream: s.mainstream,
        })
        .collect())
}

/// Distinct vantages in record order of first appearance.
pub fn vantages(records: &[MeasurementRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.vantage) {
            out.push(r.vantage.clone());
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod fixtures {
    use chrono::{TimeZone, Utc};
    use serde_json::Map;

    use super::*;
    use crate::campaign::RecordKind;
    use crate::transport::TimingBreakdown;

    pub fn doh(url: &str, vantage: &str, outcome: ErrorClass, total_ms: Option<f64>) -> MeasurementRecord {
        MeasurementRecord {
            kind: RecordKind::Doh,
            campaign_id: "fixture".into(),
            round: 0,
            vantage: vantage.into(),
            resolver_url: Some(url.into()),
            host: None,
            domain: Some("google.com".into()),
            ts_utc: Utc.with_ymd_and_hms(2021, 10, 15, 0, 0, 0).unwrap(),
            timing: TimingBreakdown {
                total_ms,
                ..TimingBreakdown::default()
            },
            outcome,
            http_status: None,
            rcode: None,
            http_version: None,
            tls_version: None,
            rtts_ms: None,
            avg_rtt_ms: None,
            sent: None,
            received: None,
            method: None,
            address: None,
            detail: None,
            extra: Map::new(),
        }
    }

    pub fn ok(url: &str, vantage: &str, total_ms: f64) -> MeasurementRecord {
        doh(url, vantage, ErrorClass::Success, Some(total_ms))
    }

    pub fn ping(host: &str, vantage: &str, avg: Option<f64>, method: PingMethod) -> MeasurementRecord {
        let mut r = doh("https://unused/", vantage, ErrorClass::Success, None);
        r.kind = RecordKind::Ping;
        r.resolver_url = None;
        r.domain = None;
        r.host = Some(host.into());
        r.avg_rtt_ms = avg;
        r.rtts_ms = Some(avg.into_iter().collect());
        r.sent = Some(4);
        r.received = Some(avg.map_or(0, |_| 1));
        r.method = Some(method);
        r.outcome = if avg.is_some() {
            ErrorClass::Success
        } else {
            ErrorClass::CouldNotConnect
        };
        r
    }
}
