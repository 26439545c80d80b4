use std::fmt;

use serde::{Deserialize, Serialize};

/// Outcome of one DoH attempt. Every failure lands in exactly one class;
/// `OtherError` is the only catch-all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorClass {
    Success,
    CouldNotConnect,
    HttpErrorStatus,
    CouldNotDecodeResponse,
    SslConnectError,
    NameResolutionFailure,
    SslCertificateError,
    SslTimeout,
    Http2FramingError,
    OtherError,
}

impl ErrorClass {
    /// The nine failure classes, in declaration order.
    pub const FAILURES: [ErrorClass; 9] = [
        ErrorClass::CouldNotConnect,
        ErrorClass::HttpErrorStatus,
        ErrorClass::CouldNotDecodeResponse,
        ErrorClass::SslConnectError,
        ErrorClass::NameResolutionFailure,
        ErrorClass::SslCertificateError,
        ErrorClass::SslTimeout,
        ErrorClass::Http2FramingError,
        ErrorClass::OtherError,
    ];

    pub fn is_success(self) -> bool {
        self == ErrorClass::Success
    }

    /// Identifier used in records and CSV output.
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Success => "Success",
            ErrorClass::CouldNotConnect => "CouldNotConnect",
            ErrorClass::HttpErrorStatus => "HttpErrorStatus",
            ErrorClass::CouldNotDecodeResponse => "CouldNotDecodeResponse",
            ErrorClass::SslConnectError => "SslConnectError",
            ErrorClass::NameResolutionFailure => "NameResolutionFailure",
            ErrorClass::SslCertificateError => "SslCertificateError",
            ErrorClass::SslTimeout => "SslTimeout",
            ErrorClass::Http2FramingError => "Http2FramingError",
            ErrorClass::OtherError => "OtherError",
        }
    }

    /// Human-readable row label for error tables.
    pub fn label(self) -> &'static str {
        match self {
            ErrorClass::Success => "Successful Responses",
            ErrorClass::CouldNotConnect => "Couldn't Connect to Server",
            ErrorClass::HttpErrorStatus => "HTTP Error Status",
            ErrorClass::CouldNotDecodeResponse => "Couldn't Decode Response",
            ErrorClass::SslConnectError => "SSL Connect Error",
            ErrorClass::NameResolutionFailure => "Couldn't Resolve the Resolver's Domain Name",
            ErrorClass::SslCertificateError => "SSL Certificate Error",
            ErrorClass::SslTimeout => "SSL Timeout",
            ErrorClass::Http2FramingError => "Error in the HTTP/2 Framing Layer",
            ErrorClass::OtherError => "Other Error",
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ErrorClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(ErrorClass::Success)
            .chain(ErrorClass::FAILURES)
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown outcome {s:?}"))
    }
}

/// Furthest phase an attempt was in when it failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    NameResolution,
    TcpConnect,
    TlsHandshake,
    HttpExchange,
    ResponseBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailureCause {
    Timeout,
    Io(std::io::ErrorKind),
    CertificateInvalid,
    TlsProtocol,
    HttpStatus(u16),
    Http2Protocol,
    UndecodableBody,
    Unexpected,
}

/// What went wrong on a failed attempt, before classification.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFailure {
    pub stage: Stage,
    pub cause: FailureCause,
    pub detail: String,
}

impl TransportFailure {
    pub fn new(stage: Stage, cause: FailureCause, detail: impl Into<String>) -> Self {
        TransportFailure {
            stage,
            cause,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        classify_failure(self)
    }

    pub fn http_status(&self) -> Option<u16> {
        match self.cause {
            FailureCause::HttpStatus(s) if s >= 400 => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for TransportFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} during {:?}: {}", self.cause, self.stage, self.detail)
    }
}

/// Deterministic mapping from a failure to its error class.
pub fn classify_failure(failure: &TransportFailure) -> ErrorClass {
    use FailureCause as C;
    match (&failure.cause, failure.stage) {
        (C::HttpStatus(s), _) if *s >= 400 => ErrorClass::HttpErrorStatus,
        (C::Http2Protocol, _) => ErrorClass::Http2FramingError,
        (C::UndecodableBody, _) => ErrorClass::CouldNotDecodeResponse,
        (C::CertificateInvalid, _) => ErrorClass::SslCertificateError,
        (_, Stage::NameResolution) => ErrorClass::NameResolutionFailure,
        (_, Stage::TcpConnect) => ErrorClass::CouldNotConnect,
        (C::Timeout, Stage::TlsHandshake) => ErrorClass::SslTimeout,
        (_, Stage::TlsHandshake) => ErrorClass::SslConnectError,
        _ => ErrorClass::OtherError,
    }
}
