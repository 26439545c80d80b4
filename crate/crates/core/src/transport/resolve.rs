use std::collections::HashMap;
use std::io;
use std::net::{IpAddr, SocketAddr, ToSocketAddrs};
use std::sync::Arc;

/// Hostname lookup with static overrides, in the spirit of `curl --resolve`.
///
/// Overrides win over the system resolver; IP literals resolve to
/// themselves. Results list IPv4 addresses before IPv6 ones.
#[derive(Debug, Clone, Default)]
pub struct HostResolver {
    overrides: Arc<HashMap<String, Vec<IpAddr>>>,
}

impl HostResolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_overrides(overrides: HashMap<String, Vec<IpAddr>>) -> Self {
        let overrides = overrides
            .into_iter()
            .map(|(h, a)| (h.to_ascii_lowercase(), a))
            .collect();
        HostResolver {
            overrides: Arc::new(overrides),
        }
    }

    /// Parses `host:addr` entries (the address may be IPv6).
    pub fn parse_overrides<S: AsRef<str>>(entries: &[S]) -> Result<Self, String> {
        let mut map: HashMap<String, Vec<IpAddr>> = HashMap::new();
        for entry in entries {
            let entry = entry.as_ref();
            let (host, addr) = entry
                .split_once(':')
                .ok_or_else(|| format!("expected host:address, got {entry:?}"))?;
            let addr: IpAddr = addr
                .trim_matches(|c| c == '[' || c == ']')
                .parse()
                .map_err(|e| format!("bad address in {entry:?}: {e}"))?;
            map.entry(host.to_ascii_lowercase()).or_default().push(addr);
        }
        Ok(Self::with_overrides(map))
    }

    pub fn is_empty(&self) -> bool {
        self.overrides.is_empty()
    }

    fn fixed(&self, host: &str, port: u16) -> Option<Vec<SocketAddr>> {
        let host = host.trim_matches(|c| c == '[' || c == ']');
        if let Ok(ip) = host.parse::<IpAddr>() {
            return Some(vec![SocketAddr::new(ip, port)]);
        }
        self.overrides
            .get(&host.trim_end_matches('.').to_ascii_lowercase())
            .map(|addrs| addrs.iter().map(|a| SocketAddr::new(*a, port)).collect())
    }

    pub async fn lookup(&self, host: &str, port: u16) -> io::Result<Vec<SocketAddr>> {
        let addrs = match self.fixed(host, port) {
            Some(addrs) => addrs,
            None => tokio::net::lookup_host((host, port)).await?.collect(),
        };
        finish(host, addrs)
    }

    pub fn lookup_blocking(&self, host: &str, port: u16) -> io::Result<Vec<SocketAddr>> {
        let addrs = match self.fixed(host, port) {
            Some(addrs) => addrs,
            None => (host, port).to_socket_addrs()?.collect(),
        };
        finish(host, addrs)
    }
}

fn finish(host: &str, mut addrs: Vec<SocketAddr>) -> io::Result<Vec<SocketAddr>> {
    if addrs.is_empty() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no addresses for {host}"),
        ));
    }
    addrs.sort_by_key(|a| a.is_ipv6());
    addrs.dedup();
    Ok(addrs)
}
