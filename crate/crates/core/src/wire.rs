//! DNS message encoding and decoding (RFC 1035 wire format).
//!
//! Only what a DoH measurement needs: building a single-question query and
//! reading back the header and question section of a response. Answer RDATA
//! is never interpreted. The encoder never emits compression pointers; the
//! decoder follows them (backwards only, so a pointer loop cannot exist).

use std::fmt;

use thiserror::Error;

pub const HEADER_LEN: usize = 12;
pub const MAX_LABEL_LEN: usize = 63;
/// Longest textual name (without the trailing dot).
pub const MAX_NAME_TEXT_LEN: usize = 253;
/// Longest encoded name, including length octets and the root label.
pub const MAX_NAME_WIRE_LEN: usize = 255;

/// Record type codes used by the harness.
pub mod rtype {
    pub const A: u16 = 1;
    pub const NS: u16 = 2;
    pub const CNAME: u16 = 5;
    pub const AAAA: u16 = 28;
    pub const OPT: u16 = 41;
}

/// Class codes.
pub mod class {
    pub const IN: u16 = 1;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NameError {
    #[error("empty label in {0:?}")]
    EmptyLabel(String),
    #[error("label longer than 63 octets in {0:?}")]
    LabelTooLong(String),
    #[error("name longer than 253 octets: {0:?}")]
    NameTooLong(String),
    #[error("name contains a non-ASCII or non-printable character: {0:?}")]
    BadCharacter(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("message is {0} bytes, shorter than the 12-byte header")]
    ShortHeader(usize),
    #[error("QR bit is clear; message is not a response")]
    NotAResponse,
    #[error("question section truncated at offset {0}")]
    Truncated(usize),
    #[error("compression pointer at offset {at} does not point backwards (target {target})")]
    BadPointer { at: usize, target: usize },
    #[error("reserved label type 0x{0:02x}")]
    BadLabelType(u8),
    #[error("decoded name exceeds 255 octets")]
    NameTooLong,
}

/// One entry of the question section.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DnsQuestion {
    /// Dot-separated labels without a trailing dot; the root is ".".
    pub name: String,
    pub qtype: u16,
    pub qclass: u16,
}

impl DnsQuestion {
    /// Builds a question, dropping a single trailing dot so that "google.com."
    /// and "google.com" are the same question.
    pub fn new(name: impl Into<String>, qtype: u16, qclass: u16) -> Self {
        let mut name = name.into();
        if name.len() > 1 && name.ends_with('.') {
            name.pop();
        }
        if name.is_empty() {
            name.push('.');
        }
        DnsQuestion { name, qtype, qclass }
    }

    /// `IN A` question for `name`.
    pub fn a(name: impl Into<String>) -> Self {
        Self::new(name, rtype::A, class::IN)
    }

    pub fn is_root(&self) -> bool {
        self.name == "."
    }

    /// Equality with DNS name case-insensitivity.
    pub fn matches(&self, other: &DnsQuestion) -> bool {
        self.qtype == other.qtype
            && self.qclass == other.qclass
            && self.name.eq_ignore_ascii_case(&other.name)
    }

    /// Checks the name against RFC 1035 length rules and the printable-ASCII
    /// character set accepted by the encoder.
    pub fn validate(&self) -> Result<(), NameError> {
        encode_name(&self.name, &mut Vec::new())
    }
}

impl fmt::Display for DnsQuestion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} type={} class={}", self.name, self.qtype, self.qclass)
    }
}

/// Header and question section of a decoded response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnsResponseSummary {
    pub id: u16,
    pub qr_flag: bool,
    pub truncated: bool,
    pub rcode: u8,
    pub answer_count: u16,
    /// First question of the message; absent when QDCOUNT is zero.
    pub question_echo: Option<DnsQuestion>,
}

/// Knobs for [`encode_query_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryOptions {
    pub id: u16,
    pub recursion_desired: bool,
    /// When set, append an EDNS(0) OPT record advertising this UDP size.
    pub edns_udp_size: Option<u16>,
}

impl Default for QueryOptions {
    fn default() -> Self {
        QueryOptions {
            id: 0,
            recursion_desired: true,
            edns_udp_size: None,
        }
    }
}

pub const DEFAULT_EDNS_UDP_SIZE: u16 = 4096;

/// Encodes a single-question query with no additional records.
pub fn encode_query(
    question: &DnsQuestion,
    id: u16,
    recursion_desired: bool,
) -> Result<Vec<u8>, NameError> {
    encode_query_with(
        question,
        &QueryOptions {
            id,
            recursion_desired,
            edns_udp_size: None,
        },
    )
}

pub fn encode_query_with(question: &DnsQuestion, opts: &QueryOptions) -> Result<Vec<u8>, NameError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + question.name.len() + 2 + 4 + 11);
    buf.extend_from_slice(&opts.id.to_be_bytes());
    // QR=0, OPCODE=0, AA=0, TC=0, RD per argument; second flag byte all zero.
    buf.push(if opts.recursion_desired { 0x01 } else { 0x00 });
    buf.push(0x00);
    let arcount: u16 = if opts.edns_udp_size.is_some() { 1 } else { 0 };
    for count in [1u16, 0, 0, arcount] {
        buf.extend_from_slice(&count.to_be_bytes());
    }
    encode_name(&question.name, &mut buf)?;
    buf.extend_from_slice(&question.qtype.to_be_bytes());
    buf.extend_from_slice(&question.qclass.to_be_bytes());
    if let Some(size) = opts.edns_udp_size {
        buf.push(0x00); // root owner name
        buf.extend_from_slice(&rtype::OPT.to_be_bytes());
        buf.extend_from_slice(&size.to_be_bytes());
        buf.extend_from_slice(&[0, 0, 0, 0]); // extended rcode, version, flags
        buf.extend_from_slice(&[0, 0]); // RDLENGTH
    }
    Ok(buf)
}

fn encode_name(name: &str, buf: &mut Vec<u8>) -> Result<(), NameError> {
    if name == "." {
        buf.push(0);
        return Ok(());
    }
    if name.is_empty() {
        return Err(NameError::EmptyLabel(name.to_string()));
    }
    if name.len() > MAX_NAME_TEXT_LEN {
        return Err(NameError::NameTooLong(name.to_string()));
    }
    if !name.bytes().all(|b| b.is_ascii_graphic() && b != b'\\') {
        return Err(NameError::BadCharacter(name.to_string()));
    }
    for label in name.split('.') {
        if label.is_empty() {
            return Err(NameError::EmptyLabel(name.to_string()));
        }
        if label.len() > MAX_LABEL_LEN {
            return Err(NameError::LabelTooLong(name.to_string()));
        }
        buf.push(label.len() as u8);
        buf.extend_from_slice(label.as_bytes());
    }
    buf.push(0);
    Ok(())
}

/// Parses the header and question section of a response body.
pub fn decode_response(body: &[u8]) -> Result<DnsResponseSummary, DecodeError> {
    if body.len() < HEADER_LEN {
        return Err(DecodeError::ShortHeader(body.len()));
    }
    let word = |i: usize| u16::from_be_bytes([body[i], body[i + 1]]);
    let id = word(0);
    let flags = word(2);
    let qr_flag = flags & 0x8000 != 0;
    if !qr_flag {
        return Err(DecodeError::NotAResponse);
    }
    let qdcount = word(4);
    let answer_count = word(6);

    let mut pos = HEADER_LEN;
    let mut question_echo = None;
    for _ in 0..qdcount {
        let (name, next) = read_name(body, pos)?;
        if next + 4 > body.len() {
            return Err(DecodeError::Truncated(next));
        }
        let qtype = u16::from_be_bytes([body[next], body[next + 1]]);
        let qclass = u16::from_be_bytes([body[next + 2], body[next + 3]]);
        pos = next + 4;
        if question_echo.is_none() {
            question_echo = Some(DnsQuestion { name, qtype, qclass });
        }
    }

    Ok(DnsResponseSummary {
        id,
        qr_flag,
        truncated: flags & 0x0200 != 0,
        rcode: (flags & 0x000f) as u8,
        answer_count,
        question_echo,
    })
}

/// Reads a possibly-compressed name starting at `start`. Returns the textual
/// name and the offset just past the name at its original position.
fn read_name(msg: &[u8], start: usize) -> Result<(String, usize), DecodeError> {
    let mut labels: Vec<String> = Vec::new();
    let mut wire_len = 0usize;
    let mut pos = start;
    let mut resume: Option<usize> = None;
    // Every followed pointer must land strictly before the label that held
    // it, so this loop always terminates.
    let mut floor = start;

    loop {
        let len = *msg.get(pos).ok_or(DecodeError::Truncated(pos))?;
        match len & 0xc0 {
            0x00 => {
                let len = len as usize;
                wire_len += 1 + len;
                if wire_len > MAX_NAME_WIRE_LEN {
                    return Err(DecodeError::NameTooLong);
                }
                if len == 0 {
                    let end = resume.unwrap_or(pos + 1);
                    let name = if labels.is_empty() {
                        ".".to_string()
                    } else {
                        labels.join(".")
                    };
                    return Ok((name, end));
                }
                let label = msg
                    .get(pos + 1..pos + 1 + len)
                    .ok_or(DecodeError::Truncated(pos + 1))?;
                labels.push(escape_label(label));
                pos += 1 + len;
            }
            0xc0 => {
                let lo = *msg.get(pos + 1).ok_or(DecodeError::Truncated(pos + 1))?;
                let target = (((len & 0x3f) as usize) << 8) | lo as usize;
                if target >= floor {
                    return Err(DecodeError::BadPointer { at: pos, target });
                }
                if resume.is_none() {
                    resume = Some(pos + 2);
                }
                floor = target;
                pos = target;
            }
            other => return Err(DecodeError::BadLabelType(other)),
        }
    }
}

fn escape_label(label: &[u8]) -> String {
    let mut out = String::with_capacity(label.len());
    for &b in label {
        if b.is_ascii_graphic() && b != b'.' && b != b'\\' {
            out.push(b as char);
        } else {
            out.push_str(&format!("\\{b:03}"));
        }
    }
    out
}

/// True iff `response` answers the query identified by `query_id` and
/// `question`.
pub fn response_matches(query_id: u16, question: &DnsQuestion, response: &DnsResponseSummary) -> bool {
    response.id == query_id
        && response.qr_flag
        && response
            .question_echo
            .as_ref()
            .is_some_and(|echo| echo.matches(question))
}

/// Turns an encoded query into a minimal response by setting QR (and RA),
/// copying RD, writing `rcode`, and appending `answers` A records that point
/// back at the question name. Used by the mock resolver and tests.
pub fn synthesize_response(query: &[u8], rcode: u8, answers: &[[u8; 4]]) -> Result<Vec<u8>, DecodeError> {
    if query.len() < HEADER_LEN {
        return Err(DecodeError::ShortHeader(query.len()));
    }
    let qdcount = u16::from_be_bytes([query[4], query[5]]);
    let mut end = HEADER_LEN;
    for _ in 0..qdcount {
        let (_, next) = read_name(query, end)?;
        if next + 4 > query.len() {
            return Err(DecodeError::Truncated(next));
        }
        end = next + 4;
    }
    let mut out = Vec::with_capacity(end + answers.len() * 16);
    out.extend_from_slice(&query[..2]);
    out.push(0x80 | (query[2] & 0x01));
    out.push(0x80 | (rcode & 0x0f));
    out.extend_from_slice(&query[4..6]);
    out.extend_from_slice(&(answers.len() as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    out.extend_from_slice(&query[HEADER_LEN..end]);
    for addr in answers {
        out.extend_from_slice(&[0xc0, HEADER_LEN as u8]);
        out.extend_from_slice(&rtype::A.to_be_bytes());
        out.extend_from_slice(&class::IN.to_be_bytes());
        out.extend_from_slice(&300u32.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(addr);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    // dnspython 2.x: make_query("google.com", "A", use_edns=False) with id=0.
    const GOOGLE_A_QUERY: [u8; 28] = [
        0x00, 0x00, 0x01, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x06, b'g', b'o',
        b'o', b'g', b'l', b'e', 0x03, b'c', b'o', b'm', 0x00, 0x00, 0x01, 0x00, 0x01,
    ];

    #[test]
    fn google_a_query_matches_reference_bytes() {
        let wire = encode_query(&DnsQuestion::a("google.com"), 0, true).unwrap();
        assert_eq!(wire.len(), 28);
        assert_eq!(wire, GOOGLE_A_QUERY);
        assert_eq!(&wire[12..24], b"\x06google\x03com\x00");
    }

    #[test]
    fn trailing_dot_is_the_same_name() {
        assert_eq!(DnsQuestion::a("google.com."), DnsQuestion::a("google.com"));
    }

    #[test]
    fn root_name_is_single_zero_octet() {
        let wire = encode_query(&DnsQuestion::a("."), 0, true).unwrap();
        assert_eq!(wire.len(), HEADER_LEN + 1 + 4);
        assert_eq!(wire[12], 0);
    }

    #[test]
    fn rejects_bad_names() {
        let long_label = "a".repeat(64);
        assert!(matches!(
            encode_query(&DnsQuestion::a(long_label), 0, true),
            Err(NameError::LabelTooLong(_))
        ));
        assert!(matches!(
            encode_query(&DnsQuestion::a("a..b"), 0, true),
            Err(NameError::EmptyLabel(_))
        ));
        assert!(matches!(
            encode_query(&DnsQuestion::a("bücher.de"), 0, true),
            Err(NameError::BadCharacter(_))
        ));
        let long_name = vec!["abcdefghi"; 26].join(".");
        assert!(long_name.len() > MAX_NAME_TEXT_LEN);
        assert!(matches!(
            encode_query(&DnsQuestion::a(long_name), 0, true),
            Err(NameError::NameTooLong(_))
        ));
        // 63-octet labels up to exactly 253 characters are fine.
        let max = format!("{}.{}.{}.{}", "a".repeat(63), "b".repeat(63), "c".repeat(63), "d".repeat(61));
        assert_eq!(max.len(), 253);
        assert_eq!(encode_query(&DnsQuestion::a(max), 0, true).unwrap().len(), 12 + 255 + 4);
    }

    #[test]
    fn rd_bit_follows_argument() {
        let q = DnsQuestion::a("example.org");
        assert_eq!(encode_query(&q, 7, true).unwrap()[2], 0x01);
        assert_eq!(encode_query(&q, 7, false).unwrap()[2], 0x00);
        assert_eq!(&encode_query(&q, 0xabcd, false).unwrap()[..2], &[0xab, 0xcd]);
    }

    #[test]
    fn edns_option_appends_opt_record() {
        let q = DnsQuestion::a("google.com");
        let opts = QueryOptions {
            edns_udp_size: Some(DEFAULT_EDNS_UDP_SIZE),
            ..QueryOptions::default()
        };
        let wire = encode_query_with(&q, &opts).unwrap();
        assert_eq!(wire.len(), 28 + 11);
        assert_eq!(&wire[10..12], &[0, 1]);
        assert_eq!(&wire[28..], &[0, 0, 41, 0x10, 0x00, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_body_is_decode_error() {
        assert_eq!(decode_response(&[]), Err(DecodeError::ShortHeader(0)));
    }

    #[test]
    fn bare_nxdomain_header() {
        let body = [0x12, 0x34, 0x81, 0x83, 0, 0, 0, 0, 0, 0, 0, 0];
        let s = decode_response(&body).unwrap();
        assert_eq!(s.rcode, 3);
        assert_eq!(s.answer_count, 0);
        assert_eq!(s.id, 0x1234);
        assert!(s.qr_flag);
        assert!(s.question_echo.is_none());
    }

    #[test]
    fn query_is_not_a_response() {
        assert_eq!(decode_response(&GOOGLE_A_QUERY), Err(DecodeError::NotAResponse));
    }

    // dnspython 2.x: make_response() to the query above plus one A answer
    // (142.250.80.78, TTL 142); the answer owner is a compression pointer.
    const GOOGLE_A_RESPONSE: [u8; 44] = [
        0x00, 0x00, 0x81, 0x00, 0x00, 0x01, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00, 0x06, b'g', b'o',
        b'o', b'g', b'l', b'e', 0x03, b'c', b'o', b'm', 0x00, 0x00, 0x01, 0x00, 0x01, 0xc0, 0x0c,
        0x00, 0x01, 0x00, 0x01, 0x00, 0x00, 0x00, 0x8e, 0x00, 0x04, 0x8e, 0xfa, 0x50, 0x4e,
    ];

    #[test]
    fn decodes_captured_google_response() {
        let s = decode_response(&GOOGLE_A_RESPONSE).unwrap();
        assert!(s.qr_flag);
        assert_eq!(s.rcode, 0);
        assert!(s.answer_count >= 1);
        assert_eq!(s.question_echo, Some(DnsQuestion::a("google.com")));
        assert!(response_matches(0, &DnsQuestion::a("google.com"), &s));
    }

    #[test]
    fn question_truncated() {
        let mut body = GOOGLE_A_RESPONSE[..26].to_vec();
        assert!(matches!(decode_response(&body), Err(DecodeError::Truncated(_))));
        body.truncate(15);
        assert!(matches!(decode_response(&body), Err(DecodeError::Truncated(_))));
    }

    #[test]
    fn pointer_loops_are_rejected() {
        // Question name is a pointer to itself.
        let mut body = vec![0, 0, 0x81, 0x80, 0, 1, 0, 0, 0, 0, 0, 0];
        body.extend_from_slice(&[0xc0, 0x0c, 0, 1, 0, 1]);
        assert!(matches!(decode_response(&body), Err(DecodeError::BadPointer { .. })));

        // Two names pointing at each other: the second question points
        // forward-then-back.
        let mut body = vec![0, 0, 0x81, 0x80, 0, 2, 0, 0, 0, 0, 0, 0];
        body.extend_from_slice(&[0x01, b'a', 0xc0, 0x12, 0, 1, 0, 1]);
        body.extend_from_slice(&[0xc0, 0x0c, 0, 1, 0, 1]);
        assert!(matches!(decode_response(&body), Err(DecodeError::BadPointer { .. })));
    }

    #[test]
    fn follows_backward_pointer_in_question() {
        // Two questions; the second reuses "com" from the first.
        let mut body = vec![0, 9, 0x81, 0x80, 0, 2, 0, 0, 0, 0, 0, 0];
        body.extend_from_slice(b"\x06google\x03com\x00\x00\x01\x00\x01");
        body.extend_from_slice(b"\x07netflix\xc0\x13\x00\x01\x00\x01");
        let s = decode_response(&body).unwrap();
        assert_eq!(s.question_echo.unwrap().name, "google.com");
        let (name, end) = read_name(&body, 28).unwrap();
        assert_eq!(name, "netflix.com");
        assert_eq!(end, 28 + 10);
    }

    #[test]
    fn matching_rules() {
        let q = DnsQuestion::a("google.com");
        let wire = encode_query(&q, 0, true).unwrap();
        let resp = decode_response(&synthesize_response(&wire, 0, &[[1, 2, 3, 4]]).unwrap()).unwrap();
        assert!(response_matches(0, &q, &resp));
        assert!(!response_matches(1, &q, &resp));
        assert!(response_matches(0, &DnsQuestion::a("GooGLE.com"), &resp));
        assert!(!response_matches(0, &DnsQuestion::a("netflix.com"), &resp));
        assert!(!response_matches(0, &DnsQuestion::new("google.com", rtype::AAAA, class::IN), &resp));
    }

    #[test]
    fn synthesized_response_carries_answers() {
        let q = DnsQuestion::a("netflix.com");
        let wire = encode_query(&q, 42, true).unwrap();
        let body = synthesize_response(&wire, 0, &[[10, 0, 0, 1], [10, 0, 0, 2]]).unwrap();
        let s = decode_response(&body).unwrap();
        assert_eq!(s.id, 42);
        assert_eq!(s.answer_count, 2);
        assert_eq!(s.question_echo.unwrap(), q);
    }

    #[test]
    fn odd_label_bytes_are_escaped() {
        let mut body = vec![0, 0, 0x81, 0x80, 0, 1, 0, 0, 0, 0, 0, 0];
        body.extend_from_slice(&[3, b'a', b'.', 0xff, 0, 0, 1, 0, 1]);
        let s = decode_response(&body).unwrap();
        assert_eq!(s.question_echo.unwrap().name, "a\\046\\255");
    }
}
