//! Plot-ready response time and RTT distributions.

use std::collections::BTreeMap;

use serde::Serialize;

use super::resolver_info;
use crate::campaign::MeasurementRecord;
use crate::catalog::{Catalog, Region};
use crate::icmp::PingMethod;

/// Cut-off used by the published distribution plots.
pub const DEFAULT_TRUNCATE_MS: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Series {
    Dns,
    Ping,
}

impl Series {
    pub fn as_str(self) -> &'static str {
        match self {
            Series::Dns => "dns",
            Series::Ping => "ping",
        }
    }
}

/// Samples of one series for one resolver at one vantage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionGroup {
    pub series: Series,
    pub vantage: String,
    pub region: Region,
    pub resolver_url: String,
    pub mainstream: bool,
    /// Samples at or below the cut-off, ascending.
    pub retained: Vec<f64>,
    pub overflow: u64,
    pub total: u64,
}

impl DistributionGroup {
    /// Empirical CDF point for the 1-based `rank`, over all samples
    /// including overflow.
    pub fn cdf(&self, rank: usize) -> f64 {
        rank as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionExport {
    pub truncate_at: Option<f64>,
    pub groups: Vec<DistributionGroup>,
}

/// Groups DNS response times (Success records) and per-round ping
/// averages by (vantage, region, resolver). With `truncate_at`, samples
/// above it are counted in `overflow` instead of exported.
pub fn distribution_export(
    records: &[MeasurementRecord],
    catalog: Option<&Catalog>,
    truncate_at: Option<f64>,
    rtt_method: PingMethod,
) -> DistributionExport {
    let mut dns: BTreeMap<(String, String), (String, Vec<f64>)> = BTreeMap::new();
    let mut pings: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        if r.is_doh() && r.is_success() {
            if let (Some(url), Some(t)) = (&r.resolver_url, r.timing.total_ms) {
                dns.entry((r.vantage.clone(), url.clone()))
                    .or_insert_with(|| (r.hostname().unwrap_or_default(), Vec::new()))
                    .1
                    .push(t);
            }
        } else if r.is_ping() && r.method == Some(rtt_method) && r.received.unwrap_or(0) > 0 {
            if let (Some(host), Some(avg)) = (&r.host, r.avg_rtt_ms) {
                pings
                    .entry((r.vantage.clone(), host.to_ascii_lowercase()))
                    .or_default()
                    .push(avg);
            }
        }
    }

    let mut groups = Vec::new();
    for ((vantage, url), (host, samples)) in dns {
        let (region, mainstream) = resolver_info(catalog, &url);
        let mut make = |series, samples: Vec<f64>| {
            groups.push(group(series, &vantage, region, &url, mainstream, samples, truncate_at));
        };
        make(Series::Dns, samples);
        if let Some(rtts) = pings.get(&(vantage.clone(), host)) {
            make(Series::Ping, rtts.clone());
        }
    }
    groups.sort_by(|a, b| {
        (&a.vantage, a.region, &a.resolver_url, a.series).cmp(&(&b.vantage, b.region, &b.resolver_url, b.series))
    });
    DistributionExport { truncate_at, groups }
}

fn group(
    series: Series,
    vantage: &str,
    region: Region,
    url: &str,
    mainstream: bool,
    mut samples: Vec<f64>,
    truncate_at: Option<f64>,
) -> DistributionGroup {
    samples.sort_by(f64::total_cmp);
    let total = samples.len() as u64;
    if let Some(cut) = truncate_at {
        samples.retain(|s| *s <= cut);
    }
    DistributionGroup {
        series,
        vantage: vantage.to_string(),
        region,
        resolver_url: url.to_string(),
        mainstream,
        overflow: total - samples.len() as u64,
        retained: samples,
        total,
    }
}

impl DistributionExport {
    /// Keeps groups matching the optional region and vantage.
    pub fn filter(mut self, region: Option<Region>, vantage: Option<&str>) -> Self {
        self.groups
            .retain(|g| region.is_none_or(|r| g.region == r) && vantage.is_none_or(|v| g.vantage == v));
        self
    }

    pub fn sample_rows(&self) -> usize {
        self.groups.iter().map(|g| g.retained.len()).sum()
    }

    /// One row per retained sample.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "series",
            "vantage",
            "region",
            "resolver_url",
            "mainstream",
            "sample_ms",
            "rank",
            "cdf",
            "total",
            "overflow",
        ])
        .unwrap();
        for g in &self.groups {
            for (i, s) in g.retained.iter().enumerate() {
                w.write_record([
                    g.series.as_str().to_string(),
                    g.vantage.clone(),
                    g.region.to_string(),
                    g.resolver_url.clone(),
                    g.mainstream.to_string(),
                    s.to_string(),
                    (i + 1).to_string(),
                    format!("{:.6}", g.cdf(i + 1)),
                    g.total.to_string(),
                    g.overflow.to_string(),
                ])
                .unwrap();
            }
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// One row per group with its counts.
    pub fn groups_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "series",
            "vantage",
            "region",
            "resolver_url",
            "mainstream",
            "total",
            "retained",
            "overflow",
        ])
        .unwrap();
        for g in &self.groups {
            w.write_record([
                g.series.as_str().to_string(),
                g.vantage.clone(),
                g.region.to_string(),
                g.resolver_url.clone(),
                g.mainstream.to_string(),
                g.total.to_string(),
                g.retained.len().to_string(),
                g.overflow.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}
