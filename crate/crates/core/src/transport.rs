//! Wire protocol: newline-delimited canonical JSON messages, plus the TCP
//! transport for running the three roles as separate processes.
//!
//! Every message is one line of UTF-8 JSON (keys sorted, no embedded
//! newline) terminated by a single `\n`. Unknown top-level fields are
//! ignored; an unknown kind is a protocol error. The source acts as the
//! TCP server and single rendezvous point; the parties connect to it and
//! all party-to-party traffic is relayed through it.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pauli::RawBloch;
use crate::protocol::{
    run_party, run_source, Duplex, MsgReceiver, MsgSender, Role, SessionConfig,
    SessionTranscript,
};
use crate::sampling::MeasurementRecord;
use crate::tomography::Decision;
use crate::witness::Party;

/// Wire protocol version announced in every message and checked at hello.
pub const PROTOCOL_VERSION: u32 = 1;

/// Message kinds of protocol version 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Hello,
    PairCount,
    AxisRequest,
    Outcome,
    RecordsBatch,
    Verdict,
    Bye,
    Error,
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::Hello => "hello",
            MessageKind::PairCount => "pair_count",
            MessageKind::AxisRequest => "axis_request",
            MessageKind::Outcome => "outcome",
            MessageKind::RecordsBatch => "records_batch",
            MessageKind::Verdict => "verdict",
            MessageKind::Bye => "bye",
            MessageKind::Error => "error",
        }
    }

    pub fn parse(text: &str) -> Result<MessageKind> {
        match text {
            "hello" => Ok(MessageKind::Hello),
            "pair_count" => Ok(MessageKind::PairCount),
            "axis_request" => Ok(MessageKind::AxisRequest),
            "outcome" => Ok(MessageKind::Outcome),
            "records_batch" => Ok(MessageKind::RecordsBatch),
            "verdict" => Ok(MessageKind::Verdict),
            "bye" => Ok(MessageKind::Bye),
            "error" => Ok(MessageKind::Error),
            other => Err(Error::Protocol(format!("unknown message kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wire shape of a message; `kind` stays a string here so unknown kinds
/// can be rejected with a protocol error rather than a decode error.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawWireMessage {
    version: u32,
    session_id: String,
    kind: String,
    #[serde(default)]
    payload: Value,
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub version: u32,
    pub session_id: String,
    pub kind: MessageKind,
    pub payload: Value,
}

impl WireMessage {
    pub fn new<T: Serialize>(kind: MessageKind, session_id: &str, payload: &T) -> Result<Self> {
        Ok(WireMessage {
            version: PROTOCOL_VERSION,
            session_id: session_id.to_string(),
            kind,
            payload: serde_json::to_value(payload)?,
        })
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T> {
        T::deserialize(&self.payload)
            .map_err(|e| Error::Protocol(format!("bad {} payload: {e}", self.kind)))
    }

    /// Hex SHA-256 of the canonical payload encoding. Transcripts store
    /// this instead of the payload itself.
    pub fn payload_digest(&self) -> String {
        let canonical = serde_json::to_string(&self.payload)
            .expect("payload round-trips through serde_json");
        sha256_hex(canonical.as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Canonical JSON with sorted keys (the default `serde_json::Value` map is
/// ordered) and no trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// Encode a message as one canonical JSON line plus `\n`.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>> {
    let raw = RawWireMessage {
        version: msg.version,
        session_id: msg.session_id.clone(),
        kind: msg.kind.as_str().to_string(),
        payload: msg.payload.clone(),
    };
    let line = canonical_json(&raw)?;
    if line.contains('\n') {
        return Err(Error::Protocol(
            "encoded message contains an embedded newline".to_string(),
        ));
    }
    let mut bytes = line.into_bytes();
    bytes.push(b'\n');
    Ok(bytes)
}

/// Decode one line (with or without its trailing newline). Malformed
/// input yields a decode error naming the byte offset; a well-formed
/// message with an unknown kind yields a protocol error.
pub fn decode(line: &[u8]) -> Result<WireMessage> {
    let text = std::str::from_utf8(line).map_err(|e| Error::Decode {
        offset: e.valid_up_to(),
        detail: "invalid UTF-8".to_string(),
    })?;
    let trimmed = text.trim_end_matches(['\n', '\r']);
    let raw: RawWireMessage = serde_json::from_str(trimmed).map_err(|e| Error::Decode {
        offset: e.column().saturating_sub(1),
        detail: e.to_string(),
    })?;
    Ok(WireMessage {
        version: raw.version,
        session_id: raw.session_id,
        kind: MessageKind::parse(&raw.kind)?,
        payload: raw.payload,
    })
}

// ---------------------------------------------------------------------------
// Typed payloads
// ---------------------------------------------------------------------------

/// Exact per-cell outcome distributions, indexed [n−1][m−1], each cell
/// ordered (+,+), (+,−), (−,+), (−,−). Sent instead of finite statistics
/// when a session runs in exact mode.
pub type ExactCells = [[[f64; 4]; 3]; 3];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HelloPayload {
    pub role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairCountPayload {
    pub n_pairs: u64,
    /// Present only in exact mode: the infinite-statistics limit of the
    /// measurement phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<ExactCells>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AxisRequestPayload {
    pub pair_id: u64,
    pub axis: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomePayload {
    pub pair_id: u64,
    pub value: i8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordsBatchPayload {
    pub owner: Party,
    pub seq: u32,
    pub total: u32,
    pub records: Vec<MeasurementRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictPayload {
    pub owner: Party,
    pub decision: Decision,
    pub min_eigenvalue: f64,
    pub min_eigenvalue_std: f64,
    pub z_score: f64,
    pub params: RawBloch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: String,
    pub message: String,
}

/// Chunk a record list into batch payloads of at most `batch_size`
/// records. Always emits at least one batch so the count announcement is
/// well defined.
pub fn split_into_batches(
    owner: Party,
    records: &[MeasurementRecord],
    batch_size: usize,
) -> Vec<RecordsBatchPayload> {
    let size = batch_size.max(1);
    let chunks: Vec<&[MeasurementRecord]> = if records.is_empty() {
        vec![&[]]
    } else {
        records.chunks(size).collect()
    };
    let total = chunks.len() as u32;
    chunks
        .into_iter()
        .enumerate()
        .map(|(seq, chunk)| RecordsBatchPayload {
            owner,
            seq: seq as u32,
            total,
            records: chunk.to_vec(),
        })
        .collect()
}

/// Reassembles a record list from a stream of batch payloads, enforcing
/// owner, sequence order, and a consistent total.
pub struct RecordsAssembler {
    owner: Party,
    expected_total: Option<u32>,
    next_seq: u32,
    records: Vec<MeasurementRecord>,
}

impl RecordsAssembler {
    pub fn new(owner: Party) -> Self {
        RecordsAssembler {
            owner,
            expected_total: None,
            next_seq: 0,
            records: Vec::new(),
        }
    }

    /// Feed one batch; returns true once the final batch has arrived.
    pub fn push(&mut self, batch: RecordsBatchPayload) -> Result<bool> {
        if batch.owner != self.owner {
            return Err(Error::Protocol(format!(
                "records batch owned by {:?}, expected {:?}",
                batch.owner, self.owner
            )));
        }
        if batch.seq != self.next_seq {
            return Err(Error::Protocol(format!(
                "records batch out of order: seq {}, expected {}",
                batch.seq, self.next_seq
            )));
        }
        match self.expected_total {
            None => {
                if batch.total == 0 {
                    return Err(Error::Protocol("records batch total is zero".to_string()));
                }
                self.expected_total = Some(batch.total);
            }
            Some(total) if total != batch.total => {
                return Err(Error::Protocol(format!(
                    "records batch total changed from {total} to {}",
                    batch.total
                )));
            }
            Some(_) => {}
        }
        self.records.extend(batch.records);
        self.next_seq += 1;
        Ok(self.next_seq == self.expected_total.unwrap_or(0))
    }

    pub fn is_complete(&self) -> bool {
        self.expected_total == Some(self.next_seq)
    }

    pub fn finish(self) -> Result<Vec<MeasurementRecord>> {
        if !self.is_complete() {
            return Err(Error::Protocol(format!(
                "records stream incomplete: {} of {:?} batches",
                self.next_seq, self.expected_total
            )));
        }
        Ok(self.records)
    }
}

// ---------------------------------------------------------------------------
// TCP transport
// ---------------------------------------------------------------------------

/// Generous per-read timeout so a wedged peer fails the session instead of
/// hanging it.
const READ_TIMEOUT: Duration = Duration::from_secs(120);

struct TcpSender {
    writer: BufWriter<TcpStream>,
}

impl MsgSender for TcpSender {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        let bytes = encode(msg)?;
        self.writer
            .write_all(&bytes)
            .and_then(|_| self.writer.flush())
            .map_err(|e| Error::aborted(format!("tcp send failed: {e}")))
    }
}

struct TcpReceiver {
    reader: BufReader<TcpStream>,
}

impl MsgReceiver for TcpReceiver {
    fn recv(&mut self) -> Result<WireMessage> {
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| Error::aborted(format!("tcp receive failed: {e}")))?;
        if n == 0 {
            return Err(Error::aborted("connection closed by peer".to_string()));
        }
        decode(line.as_bytes())
    }
}

/// Wrap a connected stream as a message duplex.
pub fn tcp_duplex(stream: TcpStream) -> Result<Duplex> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(READ_TIMEOUT))?;
    let reader = BufReader::new(stream.try_clone()?);
    Ok(Duplex {
        tx: Box::new(TcpSender {
            writer: BufWriter::new(stream),
        }),
        rx: Box::new(TcpReceiver { reader }),
    })
}

/// Receiver that yields one already-read message before the underlying
/// stream; used when the server reads hello to learn who connected.
struct PushbackReceiver {
    buffered: Option<WireMessage>,
    inner: Box<dyn MsgReceiver>,
}

impl MsgReceiver for PushbackReceiver {
    fn recv(&mut self) -> Result<WireMessage> {
        if let Some(msg) = self.buffered.take() {
            return Ok(msg);
        }
        self.inner.recv()
    }
}

/// Network location plus connection behavior for `serve`.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub host: String,
    pub port: u16,
    /// How long connecting roles keep retrying before giving up.
    pub connect_retry_ms: u64,
}

impl ServeOptions {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        ServeOptions {
            host: host.into(),
            port,
            connect_retry_ms: 5_000,
        }
    }
}

fn connect_with_retry(opts: &ServeOptions) -> Result<TcpStream> {
    let addr = format!("{}:{}", opts.host, opts.port);
    let deadline = Instant::now() + Duration::from_millis(opts.connect_retry_ms);
    loop {
        match TcpStream::connect(&addr) {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(Error::aborted(format!(
                        "cannot reach source at {addr}: {e}"
                    )));
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

/// Accept both parties, learning each connection's role from its hello.
/// The hello is pushed back so the session state machine sees it again.
fn accept_parties(listener: &TcpListener, cfg: &SessionConfig) -> Result<(Duplex, Duplex)> {
    let session_id = cfg.effective_session_id();
    let mut alice: Option<Duplex> = None;
    let mut bob: Option<Duplex> = None;
    while alice.is_none() || bob.is_none() {
        let (stream, _) = listener.accept()?;
        let duplex = tcp_duplex(stream)?;
        let Duplex { mut tx, mut rx } = duplex;
        let hello = rx.recv()?;
        if hello.kind != MessageKind::Hello {
            return Err(Error::Protocol(format!(
                "expected hello, got {}",
                hello.kind
            )));
        }
        if hello.version != PROTOCOL_VERSION {
            let payload = ErrorPayload {
                code: "version-mismatch".to_string(),
                message: format!(
                    "source speaks version {PROTOCOL_VERSION}, peer sent {}",
                    hello.version
                ),
            };
            tx.send(&WireMessage::new(MessageKind::Error, &session_id, &payload)?)?;
            return Err(Error::VersionMismatch {
                local: PROTOCOL_VERSION,
                remote: hello.version,
            });
        }
        let payload: HelloPayload = hello.payload_as()?;
        let slot = match payload.role {
            Role::Alice => &mut alice,
            Role::Bob => &mut bob,
            Role::Cecil => {
                return Err(Error::Protocol(
                    "a second source tried to join the session".to_string(),
                ))
            }
        };
        if slot.is_some() {
            let role = payload.role;
            let reply = ErrorPayload {
                code: "duplicate-role".to_string(),
                message: format!("{role} already connected"),
            };
            tx.send(&WireMessage::new(MessageKind::Error, &session_id, &reply)?)?;
            return Err(Error::Protocol(format!(
                "duplicate connection for role {role}"
            )));
        }
        *slot = Some(Duplex {
            tx,
            rx: Box::new(PushbackReceiver {
                buffered: Some(hello),
                inner: rx,
            }),
        });
    }
    Ok((alice.unwrap(), bob.unwrap()))
}

/// Run one role of a networked session. The source binds and listens; the
/// parties connect (with retries while the source comes up). The returned
/// transcript is identical to the in-process run with the same config.
pub fn serve(role: Role, cfg: &SessionConfig, opts: &ServeOptions) -> Result<SessionTranscript> {
    cfg.validate()?;
    match role {
        Role::Cecil => {
            let listener = TcpListener::bind(format!("{}:{}", opts.host, opts.port))?;
            let (alice, bob) = accept_parties(&listener, cfg)?;
            let outcome = run_source(&cfg.source_config()?, alice, bob)?;
            Ok(SessionTranscript {
                session_id: cfg.effective_session_id(),
                point_of_view: Role::Cecil,
                entries: outcome.entries,
                estimate: outcome.estimate,
                verdict: outcome.verdict,
            })
        }
        Role::Alice | Role::Bob => {
            let stream = connect_with_retry(opts)?;
            let duplex = tcp_duplex(stream)?;
            let party = match role {
                Role::Alice => Party::Alice,
                _ => Party::Bob,
            };
            let outcome = run_party(&cfg.party_config(party), duplex)?;
            Ok(SessionTranscript {
                session_id: cfg.effective_session_id(),
                point_of_view: role,
                entries: outcome.entries,
                estimate: outcome.estimate,
                verdict: outcome.verdict,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_message() -> WireMessage {
        WireMessage::new(
            MessageKind::AxisRequest,
            "session-1",
            &AxisRequestPayload { pair_id: 7, axis: 2 },
        )
        .unwrap()
    }

    #[test]
    fn encode_is_one_sorted_line() {
        let bytes = encode(&sample_message()).unwrap();
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.matches('\n').count(), 1);
        let kind_pos = text.find("\"kind\"").unwrap();
        let payload_pos = text.find("\"payload\"").unwrap();
        let session_pos = text.find("\"session_id\"").unwrap();
        let version_pos = text.find("\"version\"").unwrap();
        assert!(kind_pos < payload_pos && payload_pos < session_pos && session_pos < version_pos);
    }

    #[test]
    fn round_trip() {
        let msg = sample_message();
        let decoded = decode(&encode(&msg).unwrap()).unwrap();
        assert_eq!(decoded, msg);
    }

    #[test]
    fn malformed_line_names_byte_offset() {
        let err = decode(b"{").unwrap_err();
        match err {
            Error::Decode { offset, .. } => assert!(offset <= 1),
            other => panic!("expected decode error, got {other:?}"),
        }
        let msg = format!("{}", decode(b"{").unwrap_err());
        assert!(msg.contains("byte"), "error should name a byte offset: {msg}");
    }

    #[test]
    fn unknown_kind_is_protocol_error() {
        let line = br#"{"kind":"gossip","payload":{},"session_id":"s","version":1}"#;
        assert!(matches!(decode(line), Err(Error::Protocol(_))));
    }

    #[test]
    fn unknown_fields_ignored() {
        let line = br#"{"kind":"bye","payload":{},"session_id":"s","version":1,"extra":42}"#;
        let msg = decode(line).unwrap();
        assert_eq!(msg.kind, MessageKind::Bye);
    }

    #[test]
    fn batch_splitting_reconstructs_any_chunking() {
        let records: Vec<MeasurementRecord> = (0..25)
            .map(|pair_id| MeasurementRecord {
                pair_id,
                axis: (pair_id % 3) as u8 + 1,
                outcome: if pair_id % 2 == 0 { 1 } else { -1 },
            })
            .collect();
        for batch_size in [1usize, 7, 25, 1000] {
            let batches = split_into_batches(Party::Alice, &records, batch_size);
            let mut assembler = RecordsAssembler::new(Party::Alice);
            for b in batches {
                assembler.push(b).unwrap();
            }
            assert_eq!(assembler.finish().unwrap(), records);
        }
    }

    #[test]
    fn assembler_rejects_disorder_and_wrong_owner() {
        let records: Vec<MeasurementRecord> = (0..4)
            .map(|pair_id| MeasurementRecord { pair_id, axis: 1, outcome: 1 })
            .collect();
        let batches = split_into_batches(Party::Bob, &records, 2);
        let mut assembler = RecordsAssembler::new(Party::Bob);
        assert!(assembler.push(batches[1].clone()).is_err());

        let mut assembler = RecordsAssembler::new(Party::Alice);
        assert!(assembler.push(batches[0].clone()).is_err());
    }

    #[test]
    fn records_batch_payload_round_trips_losslessly() {
        let records: Vec<MeasurementRecord> = (0..10_000)
            .map(|pair_id| MeasurementRecord {
                pair_id,
                axis: (pair_id % 3) as u8 + 1,
                outcome: if (pair_id / 3) % 2 == 0 { 1 } else { -1 },
            })
            .collect();
        let payload = RecordsBatchPayload {
            owner: Party::Bob,
            seq: 0,
            total: 1,
            records: records.clone(),
        };
        let msg = WireMessage::new(MessageKind::RecordsBatch, "s", &payload).unwrap();
        let decoded: RecordsBatchPayload =
            decode(&encode(&msg).unwrap()).unwrap().payload_as().unwrap();
        assert_eq!(decoded.records, records);
    }
}
