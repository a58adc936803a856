//! Light-weight Client Server Protocol.
//!
//! LCSP is the HTTP-inspired request/response protocol spoken between an
//! infrastructure node (client) and its target node (server) over the
//! serial application interface. The wire grammar is line oriented:
//!
//! ```text
//! request  = "GET" SP resource CRLF
//!          | "POST" SP resource SP length CRLF body
//! response = "OK" SP length CRLF body
//!          | "ERROR" SP reason CRLF
//! resource = "/" *( %x21-7E )
//! length   = "0" | %x31-39 *DIGIT
//! reason   = 1*( %x20-7E )
//! ```
//!
//! Lengths are canonical decimal (no leading zeros), which keeps the
//! encoding injective. Request bodies are capped at [`MAX_REQUEST_BODY`],
//! response bodies at [`MAX_RESPONSE_BODY`]. Decoding accepts arbitrary
//! bytes, never consumes a partial frame and leaves trailing bytes in place
//! so back-to-back frames can be decoded one by one.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::Micros;

pub const MAX_REQUEST_BODY: usize = 1024;
pub const MAX_RESPONSE_BODY: usize = 4096;
pub const MAX_RESOURCE_LEN: usize = 256;
pub const MAX_REASON_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

/// A message that violates the type invariants and therefore has no wire form.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InvalidMessage {
    #[error("resource must start with '/' and contain only visible ASCII")]
    BadResource,
    #[error("resource longer than {MAX_RESOURCE_LEN} bytes")]
    ResourceTooLong,
    #[error("body of {0} bytes exceeds the limit")]
    BodyTooLarge(usize),
    #[error("error reason must be non-empty printable ASCII")]
    BadReason,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcspRequest {
    method: Method,
    resource: String,
    body: Vec<u8>,
}

impl LcspRequest {
    pub fn get(resource: &str) -> Result<Self, InvalidMessage> {
        check_resource(resource.as_bytes())?;
        Ok(Self {
            method: Method::Get,
            resource: resource.into(),
            body: Vec::new(),
        })
    }

    pub fn post(resource: &str, body: impl Into<Vec<u8>>) -> Result<Self, InvalidMessage> {
        check_resource(resource.as_bytes())?;
        let body = body.into();
        if body.len() > MAX_REQUEST_BODY {
            return Err(InvalidMessage::BodyTooLarge(body.len()));
        }
        Ok(Self {
            method: Method::Post,
            resource: resource.into(),
            body,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn resource(&self) -> &str {
        &self.resource
    }

    pub fn body(&self) -> &[u8] {
        &self.body
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.resource.len() + self.body.len() + 16);
        out.extend_from_slice(self.method.as_str().as_bytes());
        out.push(b' ');
        out.extend_from_slice(self.resource.as_bytes());
        if self.method == Method::Post {
            out.push(b' ');
            push_decimal(&mut out, self.body.len());
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LcspResponse {
    Ok(Vec<u8>),
    Error(String),
}

impl LcspResponse {
    pub fn ok(body: impl Into<Vec<u8>>) -> Result<Self, InvalidMessage> {
        let body = body.into();
        if body.len() > MAX_RESPONSE_BODY {
            return Err(InvalidMessage::BodyTooLarge(body.len()));
        }
        Ok(Self::Ok(body))
    }

    pub fn error(reason: &str) -> Result<Self, InvalidMessage> {
        let bytes = reason.as_bytes();
        if bytes.is_empty()
            || bytes.len() > MAX_REASON_LEN
            || !bytes.iter().all(|b| is_reason_byte(*b))
        {
            return Err(InvalidMessage::BadReason);
        }
        Ok(Self::Error(reason.into()))
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Self::Ok(_))
    }

    pub fn body(&self) -> &[u8] {
        match self {
            Self::Ok(b) => b,
            Self::Error(_) => &[],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Self::Ok(body) => {
                out.extend_from_slice(b"OK ");
                push_decimal(&mut out, body.len());
                out.extend_from_slice(b"\r\n");
                out.extend_from_slice(body);
            }
            Self::Error(reason) => {
                out.extend_from_slice(b"ERROR ");
                out.extend_from_slice(reason.as_bytes());
                out.extend_from_slice(b"\r\n");
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(LcspRequest),
    Response(LcspResponse),
}

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            Message::Request(r) => r.encode(),
            Message::Response(r) => r.encode(),
        }
    }
}

/// Which side of the link is decoding: a client reads responses, a server
/// reads requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("incomplete frame")]
    NeedMoreData,
    #[error("malformed frame at byte {position}: {reason}")]
    Malformed {
        position: usize,
        reason: &'static str,
    },
    #[error("declared body length exceeds {limit} bytes")]
    FrameTooLarge { limit: usize },
}

/// Decodes one frame from the front of `input`.
///
/// On success returns the message and the number of bytes it occupied.
pub fn decode(input: &[u8], role: Role) -> Result<(Message, usize), DecodeError> {
    match role {
        Role::Server => decode_request(input).map(|(m, n)| (Message::Request(m), n)),
        Role::Client => decode_response(input).map(|(m, n)| (Message::Response(m), n)),
    }
}

pub fn decode_request(input: &[u8]) -> Result<(LcspRequest, usize), DecodeError> {
    let mut cur = Cursor::new(input);
    let method = match cur.keyword(&[b"GET ", b"POST "])? {
        0 => Method::Get,
        _ => Method::Post,
    };
    let resource_start = cur.pos;
    let resource_end = cur.resource(method == Method::Post)?;
    let resource = ascii_string(&input[resource_start..resource_end]);
    let body_len = if method == Method::Post {
        cur.expect(b' ', "expected space before length")?;
        cur.length(MAX_REQUEST_BODY)?
    } else {
        0
    };
    cur.crlf()?;
    let body = cur.take(body_len)?.to_vec();
    Ok((
        LcspRequest {
            method,
            resource,
            body,
        },
        cur.pos,
    ))
}

pub fn decode_response(input: &[u8]) -> Result<(LcspResponse, usize), DecodeError> {
    let mut cur = Cursor::new(input);
    match cur.keyword(&[b"OK ", b"ERROR "])? {
        0 => {
            let len = cur.length(MAX_RESPONSE_BODY)?;
            cur.crlf()?;
            let body = cur.take(len)?.to_vec();
            Ok((LcspResponse::Ok(body), cur.pos))
        }
        _ => {
            let start = cur.pos;
            let end = cur.reason()?;
            cur.crlf()?;
            Ok((
                LcspResponse::Error(ascii_string(&input[start..end])),
                cur.pos,
            ))
        }
    }
}

fn is_resource_byte(b: u8) -> bool {
    (0x21..=0x7e).contains(&b)
}

fn is_reason_byte(b: u8) -> bool {
    (0x20..=0x7e).contains(&b)
}

fn check_resource(bytes: &[u8]) -> Result<(), InvalidMessage> {
    if bytes.first() != Some(&b'/') || !bytes.iter().all(|b| is_resource_byte(*b)) {
        return Err(InvalidMessage::BadResource);
    }
    if bytes.len() > MAX_RESOURCE_LEN {
        return Err(InvalidMessage::ResourceTooLong);
    }
    Ok(())
}

fn ascii_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| char::from(*b)).collect()
}

fn push_decimal(out: &mut Vec<u8>, mut n: usize) {
    let mut digits = [0u8; 20];
    let mut i = digits.len();
    loop {
        i -= 1;
        digits[i] = b'0' + (n % 10) as u8;
        n /= 10;
        if n == 0 {
            break;
        }
    }
    out.extend_from_slice(&digits[i..]);
}

/// Forward-only scanner. Running off the end of the input is always
/// `NeedMoreData`; every other failure names the offending byte.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn peek(&self) -> Result<u8, DecodeError> {
        self.buf
            .get(self.pos)
            .copied()
            .ok_or(DecodeError::NeedMoreData)
    }

    fn malformed(&self, reason: &'static str) -> DecodeError {
        DecodeError::Malformed {
            position: self.pos,
            reason,
        }
    }

    fn expect(&mut self, byte: u8, reason: &'static str) -> Result<(), DecodeError> {
        if self.peek()? != byte {
            return Err(self.malformed(reason));
        }
        self.pos += 1;
        Ok(())
    }

    /// Matches one of `words` (each ending in a space) and returns its index.
    fn keyword(&mut self, words: &[&[u8]]) -> Result<usize, DecodeError> {
        let start = self.pos;
        loop {
            self.peek()?;
            let seen = &self.buf[start..=self.pos];
            let mut alive = false;
            for (i, w) in words.iter().enumerate() {
                if w.starts_with(seen) {
                    if w.len() == seen.len() {
                        self.pos += 1;
                        return Ok(i);
                    }
                    alive = true;
                }
            }
            if !alive {
                return Err(self.malformed("unknown method or status"));
            }
            self.pos += 1;
        }
    }

    /// Scans a resource; stops before the terminating space (when
    /// `space_terminated`) or CR.
    fn resource(&mut self, space_terminated: bool) -> Result<usize, DecodeError> {
        if self.peek()? != b'/' {
            return Err(self.malformed("resource must start with '/'"));
        }
        let start = self.pos;
        loop {
            let b = self.peek()?;
            match b {
                b' ' if space_terminated => break,
                b' ' => return Err(self.malformed("unexpected space in resource")),
                b'\r' if space_terminated => return Err(self.malformed("missing body length")),
                b'\r' => break,
                b if is_resource_byte(b) => {
                    if self.pos - start >= MAX_RESOURCE_LEN {
                        return Err(self.malformed("resource too long"));
                    }
                    self.pos += 1;
                }
                _ => return Err(self.malformed("invalid byte in resource")),
            }
        }
        Ok(self.pos)
    }

    fn reason(&mut self) -> Result<usize, DecodeError> {
        let start = self.pos;
        loop {
            let b = self.peek()?;
            if b == b'\r' {
                if self.pos == start {
                    return Err(self.malformed("empty error reason"));
                }
                return Ok(self.pos);
            }
            if !is_reason_byte(b) {
                return Err(self.malformed("invalid byte in reason"));
            }
            if self.pos - start >= MAX_REASON_LEN {
                return Err(self.malformed("reason too long"));
            }
            self.pos += 1;
        }
    }

    fn length(&mut self, limit: usize) -> Result<usize, DecodeError> {
        let start = self.pos;
        let mut value: usize = 0;
        loop {
            let b = self.peek()?;
            match b {
                b'0'..=b'9' => {
                    if self.pos > start && value == 0 {
                        return Err(self.malformed("leading zero in length"));
                    }
                    value = value * 10 + usize::from(b - b'0');
                    if value > limit {
                        return Err(DecodeError::FrameTooLarge { limit });
                    }
                    self.pos += 1;
                }
                b'\r' if self.pos > start => return Ok(value),
                _ => return Err(self.malformed("expected decimal length")),
            }
        }
    }

    fn crlf(&mut self) -> Result<(), DecodeError> {
        self.expect(b'\r', "expected CR")?;
        self.expect(b'\n', "expected LF after CR")
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::NeedMoreData)?;
        let slice = self
            .buf
            .get(self.pos..end)
            .ok_or(DecodeError::NeedMoreData)?;
        self.pos = end;
        Ok(slice)
    }
}

/// Failure of the underlying serial link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LinkError {
    #[error("serial channel closed")]
    Closed,
}

/// Byte transport carrying LCSP frames.
pub trait SerialLink {
    fn write(&mut self, bytes: &[u8]) -> Result<(), LinkError>;

    /// Reads whatever arrives within `timeout` into `buf`. `Ok(0)` means the
    /// timeout elapsed with nothing received.
    fn read(&mut self, buf: &mut [u8], timeout: Micros) -> Result<usize, LinkError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    #[error("no response within the timeout")]
    Timeout,
    #[error("channel closed")]
    ChannelClosed,
    #[error("bad response frame: {0}")]
    Decode(DecodeError),
}

impl From<LinkError> for CallError {
    fn from(_: LinkError) -> Self {
        CallError::ChannelClosed
    }
}

/// Stop-and-wait LCSP client owning one serial link.
pub struct LcspClient<L> {
    link: L,
    rx: Vec<u8>,
    resync: bool,
}

impl<L: SerialLink> LcspClient<L> {
    pub fn new(link: L) -> Self {
        Self {
            link,
            rx: Vec::new(),
            resync: false,
        }
    }

    pub fn link(&self) -> &L {
        &self.link
    }

    pub fn link_mut(&mut self) -> &mut L {
        &mut self.link
    }

    pub fn into_link(self) -> L {
        self.link
    }

    /// Sends `request` and waits for exactly one response.
    ///
    /// After a timeout or a garbled response the client discards whatever
    /// is left on the link before the next request goes out, so a late
    /// reply is never mistaken for the answer to a newer request.
    pub fn call(
        &mut self,
        request: &LcspRequest,
        timeout: Micros,
    ) -> Result<LcspResponse, CallError> {
        if self.resync {
            self.drain()?;
            self.resync = false;
        }
        self.link.write(&request.encode())?;
        let mut chunk = [0u8; 512];
        loop {
            match decode_response(&self.rx) {
                Ok((response, used)) => {
                    self.rx.drain(..used);
                    return Ok(response);
                }
                Err(DecodeError::NeedMoreData) => {}
                Err(e) => {
                    self.rx.clear();
                    self.resync = true;
                    return Err(CallError::Decode(e));
                }
            }
            let n = self.link.read(&mut chunk, timeout)?;
            if n == 0 {
                self.resync = true;
                return Err(CallError::Timeout);
            }
            self.rx.extend_from_slice(&chunk[..n]);
        }
    }

    fn drain(&mut self) -> Result<(), LinkError> {
        self.rx.clear();
        let mut chunk = [0u8; 512];
        while self.link.read(&mut chunk, 0)? > 0 {}
        Ok(())
    }
}

/// Request handler on the target side of the link.
pub trait LcspServer {
    fn handle(&mut self, request: &LcspRequest) -> LcspResponse;
}

/// In-process link whose far end is an [`LcspServer`]. Complete request
/// frames are handed to the server as soon as they are written; responses
/// queue up for the client to read. Garbage from the client is answered
/// with an `ERROR` frame and dropped.
pub struct ServerLink<'a, S: ?Sized> {
    server: &'a mut S,
    inbound: Vec<u8>,
    outbound: alloc::collections::VecDeque<u8>,
    closed: bool,
    drop_responses: usize,
    late_responses: Vec<u8>,
}

impl<'a, S: LcspServer + ?Sized> ServerLink<'a, S> {
    pub fn new(server: &'a mut S) -> Self {
        Self {
            server,
            inbound: Vec::new(),
            outbound: Default::default(),
            closed: false,
            drop_responses: 0,
            late_responses: Vec::new(),
        }
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// The next `n` responses are withheld until after the client's read
    /// times out, emulating a slow target.
    pub fn delay_responses(&mut self, n: usize) {
        self.drop_responses = n;
    }

    fn pump(&mut self) {
        loop {
            match decode_request(&self.inbound) {
                Ok((req, used)) => {
                    self.inbound.drain(..used);
                    let resp = self.server.handle(&req).encode();
                    if self.drop_responses > 0 {
                        self.drop_responses -= 1;
                        self.late_responses.extend_from_slice(&resp);
                    } else {
                        self.outbound.extend(resp);
                    }
                }
                Err(DecodeError::NeedMoreData) => break,
                Err(_) => {
                    self.inbound.clear();
                    if let Ok(r) = LcspResponse::error("malformed request") {
                        self.outbound.extend(r.encode());
                    }
                    break;
                }
            }
        }
    }
}

impl<S: LcspServer + ?Sized> SerialLink for ServerLink<'_, S> {
    fn write(&mut self, bytes: &[u8]) -> Result<(), LinkError> {
        if self.closed {
            return Err(LinkError::Closed);
        }
        self.inbound.extend_from_slice(bytes);
        self.pump();
        Ok(())
    }

    fn read(&mut self, buf: &mut [u8], _timeout: Micros) -> Result<usize, LinkError> {
        if self.closed {
            return Err(LinkError::Closed);
        }
        if self.outbound.is_empty() {
            // the withheld reply shows up only after this read has timed out
            let late = core::mem::take(&mut self.late_responses);
            self.outbound.extend(late);
            return Ok(0);
        }
        let n = buf.len().min(self.outbound.len());
        for slot in buf.iter_mut().take(n) {
            *slot = self.outbound.pop_front().unwrap_or_default();
        }
        Ok(n)
    }
}

impl fmt::Display for LcspRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.method.as_str(), self.resource)
    }
}
