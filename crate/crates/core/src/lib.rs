//! Availability and response-time measurement of public DNS-over-HTTPS
//! resolvers.
//!
//! The crate is split along the measurement pipeline:
//!
//! - [`wire`]: DNS query encoding and response decoding.
//! - [`transport`]: one timed DoH exchange over a fresh HTTPS session, with
//!   failures sorted into [`transport::ErrorClass`].
//! - [`icmp`]: ICMP echo rounds (and a TCP-connect fallback) for network RTT.
//! - [`catalog`]: resolver list parsing, region and mainstream annotation.
//! - [`campaign`]: the round-based measurement loop and its JSON Lines store.
//! - [`analysis`]: availability, error tables, medians, comparisons and
//!   plot-ready distribution exports.
//! - [`mock`]: a local DoH server with injectable faults, used by the tests
//!   and the `mock-server` subcommand.

pub mod analysis;
pub mod campaign;
pub mod catalog;
pub mod icmp;
pub mod mock;
pub mod transport;
pub mod wire;
