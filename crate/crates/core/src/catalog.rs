//! Resolver list ingestion, geolocation and mainstream tagging.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ipnet::IpNet;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::{Host, Url};

/// Resolver list measured from Ohio, Seoul and Frankfurt, verbatim.
pub const BUNDLED_RESOLVERS: &str = include_str!("../data/resolvers.txt");
/// Hostname to region fixture for [`BUNDLED_RESOLVERS`].
pub const BUNDLED_REGIONS: &str = include_str!("../data/regions.csv");
/// Browser-default resolver hostnames.
pub const BUNDLED_MAINSTREAM: &str = include_str!("../data/mainstream.txt");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid resolver URL {url:?}: {reason}")]
    InvalidUrl { url: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Mapping { path: String, line: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Region {
    NorthAmerica,
    Asia,
    Europe,
    #[default]
    Unknown,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::NorthAmerica, Region::Asia, Region::Europe, Region::Unknown];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::NorthAmerica => "NorthAmerica",
            Region::Asia => "Asia",
            Region::Europe => "Europe",
            Region::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match folded.as_str() {
            "northamerica" | "na" => Ok(Region::NorthAmerica),
            "asia" => Ok(Region::Asia),
            "europe" | "eu" => Ok(Region::Europe),
            "unknown" => Ok(Region::Unknown),
            _ => Err(format!("unknown region {s:?}")),
        }
    }
}

/// A DoH resolver URL plus the metadata used to group results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolverEndpoint {
    pub url: Url,
    pub hostname: String,
    pub region: Region,
    pub mainstream: bool,
    pub label: String,
}

impl ResolverEndpoint {
    /// Parses and normalizes a resolver URL. The `url` crate lowercases the
    /// host and drops the default port.
    pub fn parse(raw: &str) -> Result<Self, CatalogError> {
        let invalid = |reason: &str| CatalogError::InvalidUrl {
            url: raw.to_string(),
            reason: reason.to_string(),
        };
        let mut url = Url::parse(raw.trim()).map_err(|e| invalid(&e.to_string()))?;
        if url.scheme() != "https" {
            return Err(invalid("scheme must be https"));
        }
        url.set_fragment(None);
        let hostname = match url.host() {
            Some(Host::Domain(d)) => d.trim_end_matches('.').to_string(),
            Some(Host::Ipv4(a)) => a.to_string(),
            Some(Host::Ipv6(a)) => a.to_string(),
            None => String::new(),
        };
        if hostname.is_empty() {
            return Err(invalid("missing host"));
        }
        Ok(ResolverEndpoint {
            label: hostname.clone(),
            url,
            hostname,
            region: Region::Unknown,
            mainstream: false,
        })
    }

    pub fn port(&self) -> u16 {
        self.url.port_or_known_default().unwrap_or(443)
    }

    /// The host parsed as an address, when the URL uses an IP literal.
    pub fn ip_literal(&self) -> Option<IpAddr> {
        self.hostname.parse().ok()
    }
}

impl fmt::Display for ResolverEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.url.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineDiagnostic {
    pub line: usize,
    pub text: String,
    pub reason: String,
}

impl fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {:?}: {}", self.line, self.text, self.reason)
    }
}

/// Result of [`parse_resolver_list`]: endpoints in first-seen order plus
/// non-fatal per-line problems.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub endpoints: Vec<ResolverEndpoint>,
    pub diagnostics: Vec<LineDiagnostic>,
    /// Lines dropped because their normalized URL was already present.
    pub duplicates: usize,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.endpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.endpoints.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ResolverEndpoint> {
        self.endpoints.iter()
    }

    pub fn find(&self, url: &str) -> Option<&ResolverEndpoint> {
        self.endpoints.iter().find(|e| e.url.as_str() == url)
    }

    pub fn hostnames(&self) -> BTreeSet<&str> {
        self.endpoints.iter().map(|e| e.hostname.as_str()).collect()
    }

    pub fn count_by_region(&self, region: Region) -> usize {
        self.endpoints.iter().filter(|e| e.region == region).count()
    }

    /// One normalized URL per line; parses back to the same endpoints.
    pub fn to_list_text(&self) -> String {
        let mut out = String::new();
        for e in &self.endpoints {
            out.push_str(e.url.as_str());
            out.push('\n');
        }
        out
    }

    pub fn annotate(&mut self, regions: &GeoMapping, mainstream: &MainstreamSet) {
        for e in &mut self.endpoints {
            *e = tag_mainstream(annotate_region(e.clone(), regions), mainstream);
        }
    }

    pub fn load(path: &Path) -> Result<Catalog, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(parse_resolver_list(&text))
    }
}

pub fn parse_resolver_list(text: &str) -> Catalog {
    let mut catalog = Catalog::default();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match ResolverEndpoint::parse(line) {
            Ok(endpoint) => {
                if seen.insert(endpoint.url.as_str().to_string()) {
                    catalog.endpoints.push(endpoint);
                } else {
                    catalog.duplicates += 1;
                }
            }
            Err(e) => catalog.diagnostics.push(LineDiagnostic {
                line: idx + 1,
                text: line.to_string(),
                reason: match e {
                    CatalogError::InvalidUrl { reason, .. } => reason,
                    other => other.to_string(),
                },
            }),
        }
    }
    catalog
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeoKey {
    Host(String),
    Network(IpNet),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GeoSource {
    pub path: Option<PathBuf>,
    /// Free-form date from a `# fetched: ...` comment, if the file has one.
    pub fetched: Option<String>,
}

/// Hostname-or-CIDR to region table, loaded from CSV with a `key,region`
/// header. Lookups depend only on the file contents.
#[derive(Debug, Clone, Default)]
pub struct GeoMapping {
    pub rows: Vec<(GeoKey, Region)>,
    pub source: GeoSource,
}

impl GeoMapping {
    pub fn parse(text: &str) -> Result<GeoMapping, CatalogError> {
        Self::parse_named(text, "<inline>")
    }

    pub fn load(path: &Path) -> Result<GeoMapping, CatalogError> {
        let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut mapping = Self::parse_named(&text, &path.display().to_string())?;
        mapping.source.path = Some(path.to_path_buf());
        Ok(mapping)
    }

    pub fn bundled() -> GeoMapping {
        Self::parse_named(BUNDLED_REGIONS, "data/regions.csv").expect("bundled region fixture parses")
    }

    fn parse_named(text: &str, name: &str) -> Result<GeoMapping, CatalogError> {
        let err = |line: usize, reason: String| CatalogError::Mapping {
            path: name.to_string(),
            line,
            reason,
        };
        let mut mapping = GeoMapping::default();
        let mut saw_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(date) = comment.trim().strip_prefix("fetched:") {
                    mapping.source.fetched = Some(date.trim().to_string());
                }
                continue;
            }
            let (key, region) = line
                .split_once(',')
                .ok_or_else(|| err(idx + 1, "expected two comma-separated columns".into()))?;
            let (key, region) = (key.trim(), region.trim());
            if !saw_header {
                if !key.eq_ignore_ascii_case("key") || !region.eq_ignore_ascii_case("region") {
                    return Err(err(idx + 1, "missing `key,region` header".into()));
                }
                saw_header = true;
                continue;
            }
            let region: Region = region.parse().map_err(|e| err(idx + 1, e))?;
            let key = if key.contains('/') {
                GeoKey::Network(key.parse().map_err(|e| err(idx + 1, format!("bad CIDR {key:?}: {e}")))?)
            } else if let Ok(ip) = key.parse::<IpAddr>() {
                GeoKey::Network(IpNet::from(ip))
            } else {
                GeoKey::Host(key.trim_end_matches('.').to_ascii_lowercase())
            };
            mapping.rows.push((key, region));
        }
        if !saw_header {
            return Err(err(0, "missing `key,region` header".into()));
        }
        Ok(mapping)
    }

    /// First row naming this hostname exactly (case-insensitive).
    pub fn lookup_host(&self, hostname: &str) -> Option<Region> {
        let host = hostname.trim_end_matches('.');
        self.rows.iter().find_map(|(key, region)| match key {
            GeoKey::Host(h) if h.eq_ignore_ascii_case(host) => Some(*region),
            _ => None,
        })
    }

    /// Longest-prefix network match; ties go to the earlier row.
    pub fn lookup_addr(&self, addr: IpAddr) -> Option<Region> {
        let mut best: Option<(u8, Region)> = None;
        for (key, region) in &self.rows {
            if let GeoKey::Network(net) = key {
                if net.contains(&addr) && best.is_none_or(|(len, _)| net.prefix_len() > len) {
                    best = Some((net.prefix_len(), *region));
                }
            }
        }
        best.map(|(_, r)| r)
    }
}

/// Sets the region from the mapping by hostname, or by network when the URL
/// host is an IP literal. Unknown when nothing matches.
pub fn annotate_region(endpoint: ResolverEndpoint, mapping: &GeoMapping) -> ResolverEndpoint {
    annotate_region_with_addrs(endpoint, mapping, &[])
}

/// Like [`annotate_region`], also trying `addrs` (the resolved addresses of
/// the hostname) against network rows.
pub fn annotate_region_with_addrs(
    mut endpoint: ResolverEndpoint,
    mapping: &GeoMapping,
    addrs: &[IpAddr],
) -> ResolverEndpoint {
    endpoint.region = mapping
        .lookup_host(&endpoint.hostname)
        .or_else(|| endpoint.ip_literal().and_then(|ip| mapping.lookup_addr(ip)))
        .or_else(|| addrs.iter().find_map(|ip| mapping.lookup_addr(*ip)))
        .unwrap_or(Region::Unknown);
    endpoint
}

/// Hostnames of browser-default resolvers, one per line with `#` comments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MainstreamSet {
    hosts: BTreeSet<String>,
}

impl MainstreamSet {
    pub fn parse(text: &str) -> MainstreamSet {
        let hosts = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.trim_end_matches('.').to_ascii_lowercase())
            .collect();
        MainstreamSet { hosts }
    }

    pub fn load(path: &Path) -> Result<MainstreamSet, CatalogError> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|source| CatalogError::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn bundled() -> MainstreamSet {
        Self::parse(BUNDLED_MAINSTREAM)
    }

    pub fn contains(&self, hostname: &str) -> bool {
        self.hosts.contains(&hostname.trim_end_matches('.').to_ascii_lowercase())
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }
}

pub fn tag_mainstream(mut endpoint: ResolverEndpoint, set: &MainstreamSet) -> ResolverEndpoint {
    endpoint.mainstream = set.contains(&endpoint.hostname);
    endpoint
}

/// The bundled resolver list, annotated with the bundled region and
/// mainstream fixtures.
pub fn bundled_catalog() -> Catalog {
    let mut catalog = parse_resolver_list(BUNDLED_RESOLVERS);
    catalog.annotate(&GeoMapping::bundled(), &MainstreamSet::bundled());
    catalog
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ep(url: &str) -> ResolverEndpoint {
        ResolverEndpoint::parse(url).unwrap()
    }

    #[test]
    fn rejects_plain_http() {
        let cat = parse_resolver_list("http://insecure.example/dns-query\n");
        assert!(cat.is_empty());
        assert_eq!(cat.diagnostics.len(), 1);
        assert_eq!(cat.diagnostics[0].line, 1);
        assert!(cat.diagnostics[0].reason.contains("https"));
    }

    #[test]
    fn host_case_collapses() {
        let cat = parse_resolver_list("https://DNS.Google/dns-query\nhttps://dns.google/dns-query\n");
        assert_eq!(cat.len(), 1);
        assert_eq!(cat.duplicates, 1);
        assert_eq!(cat.endpoints[0].hostname, "dns.google");
    }

    #[test]
    fn default_port_elided_and_paths_distinct() {
        let cat = parse_resolver_list(
            "# comment\n\nhttps://doh.example:443/dns-query\nhttps://doh.example/dns-query\nhttps://doh.example/family\nhttps://doh.example:8443/dns-query\n",
        );
        let urls: Vec<_> = cat.iter().map(|e| e.url.as_str()).collect();
        assert_eq!(
            urls,
            [
                "https://doh.example/dns-query",
                "https://doh.example/family",
                "https://doh.example:8443/dns-query"
            ]
        );
        assert_eq!(cat.endpoints[2].port(), 8443);
    }

    #[test]
    fn bundled_list_deduplicates() {
        let cat = parse_resolver_list(BUNDLED_RESOLVERS);
        assert!(cat.diagnostics.is_empty());
        // 76 listed URLs; cleanbrowsing appears three times, four others twice.
        assert_eq!(cat.len() + cat.duplicates, 76);
        assert_eq!(cat.duplicates, 6);
        assert_eq!(cat.len(), 70);
        assert_eq!(cat.endpoints[0].url.as_str(), "https://dns.google/dns-query");
    }

    #[test]
    fn region_lookup() {
        let mapping = GeoMapping::parse("key,region\ndns.google,NorthAmerica\n10.0.0.0/8,Europe\n10.1.0.0/16,Asia\n").unwrap();
        assert_eq!(annotate_region(ep("https://dns.google/dns-query"), &mapping).region, Region::NorthAmerica);
        assert_eq!(annotate_region(ep("https://DNS.GOOGLE/dns-query"), &mapping).region, Region::NorthAmerica);
        assert_eq!(annotate_region(ep("https://nowhere.example/dns-query"), &mapping).region, Region::Unknown);
        assert_eq!(annotate_region(ep("https://10.2.3.4/dns-query"), &mapping).region, Region::Europe);
        assert_eq!(annotate_region(ep("https://10.1.3.4/dns-query"), &mapping).region, Region::Asia);
        let via_addr = annotate_region_with_addrs(ep("https://x.example/q"), &mapping, &["10.1.0.9".parse().unwrap()]);
        assert_eq!(via_addr.region, Region::Asia);
    }

    #[test]
    fn mapping_requires_header() {
        assert!(GeoMapping::parse("dns.google,NorthAmerica\n").is_err());
        assert!(GeoMapping::parse("key,region\ndns.google,Mars\n").is_err());
        let m = GeoMapping::bundled();
        assert_eq!(m.source.fetched.as_deref(), Some("2021-10-15"));
    }

    #[test]
    fn mainstream_tags() {
        let set = MainstreamSet::bundled();
        assert!(tag_mainstream(ep("https://dns.google/dns-query"), &set).mainstream);
        assert!(!tag_mainstream(ep("https://ordns.he.net/dns-query"), &set).mainstream);
        let empty = MainstreamSet::parse("# nothing here\n");
        assert!(empty.is_empty());
        assert!(!tag_mainstream(ep("https://dns.google/dns-query"), &empty).mainstream);
    }

    #[test]
    fn bundled_catalog_has_no_unknown_regions() {
        let cat = bundled_catalog();
        assert_eq!(cat.count_by_region(Region::Unknown), 0);
        let mainstream: Vec<_> = cat.iter().filter(|e| e.mainstream).map(|e| e.hostname.as_str()).collect();
        assert!(mainstream.contains(&"dns.cloudflare.com"));
        assert!(mainstream.contains(&"doh.opendns.com"));
        assert!(!mainstream.contains(&"doh.xfinity.com"));
    }

    fn host_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-zA-Z][a-zA-Z0-9-]{0,10}", 1..4).prop_map(|v| v.join("."))
    }

    proptest! {
        #[test]
        fn list_text_roundtrips(
            lines in proptest::collection::vec((host_strategy(), "[a-z/-]{0,12}", any::<bool>()), 0..30)
        ) {
            let text: String = lines
                .iter()
                .map(|(h, p, port)| format!("https://{h}{}/{p}\n", if *port { ":443" } else { "" }))
                .collect();
            let cat = parse_resolver_list(&text);
            let again = parse_resolver_list(&cat.to_list_text());
            prop_assert_eq!(&again.endpoints, &cat.endpoints);
            prop_assert_eq!(again.duplicates, 0);

            let raw_hosts: BTreeSet<String> = lines.iter().map(|(h, _, _)| h.to_ascii_lowercase()).collect();
            let kept: BTreeSet<String> = cat.hostnames().into_iter().map(str::to_string).collect();
            prop_assert_eq!(raw_hosts, kept);
        }
    }
}
