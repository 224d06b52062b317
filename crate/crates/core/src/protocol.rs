//! The calibration session: source and party state machines, the channel
//! abstraction they talk over, and the deterministic session transcript.
//!
//! The source (the third lab that prepared the pairs) is the only agent
//! that knows the true state; it samples joint outcomes on request given
//! both parties' chosen axes, and relays all party-to-party traffic so a
//! single rendezvous point serves both the in-process and the networked
//! topology. The parties know only the public procedure (schedule, seed,
//! decision parameters); everything they learn about the state arrives as
//! measurement records. Both parties reconstruct independently and their
//! verdicts are asserted to agree; the verdict blames nobody — it is a
//! statement about the relation between the two frames.
//!
//! Session phases:
//! 1. both parties send `hello`; the source answers with `pair_count`
//!    (zero pairs plus the exact cell distributions in exact mode);
//! 2. per pair, each party sends `axis_request` and receives its
//!    `outcome` component, pipelined up to a window;
//! 3. the parties exchange their full record lists (`records_batch`,
//!    relayed by the source);
//! 4. each side reconstructs, decides, and exchanges `verdict`s, which
//!    must agree bit for bit;
//! 5. `bye`.
//!
//! Every random choice is a pure function of `(seed, label, index)`, so a
//! config determines the whole conversation and the transcript digest is
//! reproducible across runs and transports.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pauli::{BlochParams, StateSpec};
use crate::rng;
use crate::sampling::{
    all_cell_distributions, draw_outcome, party_axis, MeasurementRecord, MeasurementSchedule,
};
use crate::tomography::{self, CalibrationVerdict, Estimate, Mode};
use crate::transport::{
    canonical_json, sha256_hex, AxisRequestPayload, ExactCells, HelloPayload, MessageKind,
    OutcomePayload, PairCountPayload, RecordsAssembler, RecordsBatchPayload, VerdictPayload,
    WireMessage, PROTOCOL_VERSION,
};
use crate::witness::{apply_frame_maps, FrameMap, Party};

/// Records per `records_batch` message.
const RECORDS_BATCH_SIZE: usize = 4096;

/// The three session roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Cecil,
    Alice,
    Bob,
}

impl Role {
    pub fn parse(text: &str) -> Result<Role> {
        match text.trim().to_ascii_lowercase().as_str() {
            "cecil" => Ok(Role::Cecil),
            "alice" => Ok(Role::Alice),
            "bob" => Ok(Role::Bob),
            other => Err(Error::InvalidParameter(format!("unknown role '{other}'"))),
        }
    }
}

impl From<Party> for Role {
    fn from(p: Party) -> Role {
        match p {
            Party::Alice => Role::Alice,
            Party::Bob => Role::Bob,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Role::Cecil => "cecil",
            Role::Alice => "alice",
            Role::Bob => "bob",
        };
        f.write_str(s)
    }
}

// ---------------------------------------------------------------------------
// Channel abstraction
// ---------------------------------------------------------------------------

/// Sending half of an ordered, reliable, message-oriented channel.
pub trait MsgSender: Send {
    fn send(&mut self, msg: &WireMessage) -> Result<()>;
}

/// Receiving half; blocks until a message or a channel failure.
pub trait MsgReceiver: Send {
    fn recv(&mut self) -> Result<WireMessage>;
}

/// A bidirectional message channel. The two halves may be moved to
/// different threads.
pub struct Duplex {
    pub tx: Box<dyn MsgSender>,
    pub rx: Box<dyn MsgReceiver>,
}

/// Optional capture hook for in-memory channels; collects every message
/// that crosses the pair, for tests that inspect the raw traffic.
pub type MessageTap = Arc<Mutex<Vec<WireMessage>>>;

struct MemorySender {
    tx: mpsc::Sender<WireMessage>,
    tap: Option<MessageTap>,
}

impl MsgSender for MemorySender {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        if let Some(tap) = &self.tap {
            tap.lock().expect("tap lock").push(msg.clone());
        }
        self.tx
            .send(msg.clone())
            .map_err(|_| Error::aborted("in-process channel closed"))
    }
}

struct MemoryReceiver {
    rx: mpsc::Receiver<WireMessage>,
}

impl MsgReceiver for MemoryReceiver {
    fn recv(&mut self) -> Result<WireMessage> {
        self.rx
            .recv()
            .map_err(|_| Error::aborted("in-process channel closed"))
    }
}

/// A connected pair of in-process channels.
pub fn memory_pair() -> (Duplex, Duplex) {
    memory_pair_tapped(None)
}

/// Like [`memory_pair`], recording all traffic into `tap` when given.
pub fn memory_pair_tapped(tap: Option<MessageTap>) -> (Duplex, Duplex) {
    let (tx_ab, rx_ab) = mpsc::channel();
    let (tx_ba, rx_ba) = mpsc::channel();
    (
        Duplex {
            tx: Box::new(MemorySender {
                tx: tx_ab,
                tap: tap.clone(),
            }),
            rx: Box::new(MemoryReceiver { rx: rx_ba }),
        },
        Duplex {
            tx: Box::new(MemorySender { tx: tx_ba, tap }),
            rx: Box::new(MemoryReceiver { rx: rx_ab }),
        },
    )
}

// ---------------------------------------------------------------------------
// Session configuration
// ---------------------------------------------------------------------------

fn default_z_threshold() -> f64 {
    5.0
}

fn default_n_bootstrap() -> u32 {
    500
}

fn default_window() -> usize {
    256
}

fn default_schedule() -> MeasurementSchedule {
    MeasurementSchedule::round_robin(1000)
}

fn default_mode() -> Mode {
    Mode::Statistical
}

/// Everything needed to reproduce a session. The seed determines all axis
/// choices, outcomes, and bootstrap resamples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Defaults to a seed-derived identifier when absent.
    #[serde(default)]
    pub session_id: Option<String>,
    pub true_state: StateSpec,
    #[serde(default)]
    pub frame_alice: FrameMap,
    #[serde(default)]
    pub frame_bob: FrameMap,
    #[serde(default = "default_schedule")]
    pub schedule: MeasurementSchedule,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    pub seed: u64,
    #[serde(default = "default_z_threshold")]
    pub z_threshold: f64,
    #[serde(default = "default_n_bootstrap")]
    pub n_bootstrap: u32,
    /// How many axis requests a party keeps in flight ahead of outcomes.
    #[serde(default = "default_window")]
    pub pipeline_window: usize,
}

impl SessionConfig {
    pub fn new(true_state: StateSpec, seed: u64) -> Self {
        SessionConfig {
            session_id: None,
            true_state,
            frame_alice: FrameMap::identity(),
            frame_bob: FrameMap::identity(),
            schedule: default_schedule(),
            mode: default_mode(),
            seed,
            z_threshold: default_z_threshold(),
            n_bootstrap: default_n_bootstrap(),
            pipeline_window: default_window(),
        }
    }

    pub fn effective_session_id(&self) -> String {
        self.session_id
            .clone()
            .unwrap_or_else(|| format!("session-{:016x}", self.seed))
    }

    /// The parameters the parties would reconstruct with infinite
    /// statistics: the true state seen through both frame errors.
    pub fn effective_params(&self) -> Result<BlochParams> {
        apply_frame_maps(
            &self.true_state.bloch_params()?,
            &self.frame_alice,
            &self.frame_bob,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.pipeline_window == 0 {
            return Err(Error::InvalidParameter(
                "pipeline_window must be positive".to_string(),
            ));
        }
        if !(self.z_threshold.is_finite() && self.z_threshold > 0.0) {
            return Err(Error::InvalidParameter(
                "z_threshold must be positive".to_string(),
            ));
        }
        let true_params = self.true_state.bloch_params()?;
        if !true_params.is_physical() {
            return Err(Error::InvalidState(
                "true_state must be a positive density matrix".to_string(),
            ));
        }
        Ok(())
    }

    /// The narrowed view a party runs on: no true state, no frame maps.
    pub fn party_config(&self, party: Party) -> PartyConfig {
        PartyConfig {
            session_id: self.effective_session_id(),
            party,
            schedule: self.schedule,
            mode: self.mode,
            seed: self.seed,
            z_threshold: self.z_threshold,
            n_bootstrap: self.n_bootstrap,
            window: self.pipeline_window.max(1),
        }
    }

    /// The source's view: the effective (frame-corrupted) parameters it
    /// samples from, but not the verdict machinery's inputs it does not
    /// need.
    pub fn source_config(&self) -> Result<SourceConfig> {
        Ok(SourceConfig {
            session_id: self.effective_session_id(),
            effective_params: self.effective_params()?,
            schedule: self.schedule,
            mode: self.mode,
            seed: self.seed,
            z_threshold: self.z_threshold,
            n_bootstrap: self.n_bootstrap,
        })
    }
}

/// What a measuring party knows: the public procedure only.
#[derive(Debug, Clone)]
pub struct PartyConfig {
    pub session_id: String,
    pub party: Party,
    pub schedule: MeasurementSchedule,
    pub mode: Mode,
    pub seed: u64,
    pub z_threshold: f64,
    pub n_bootstrap: u32,
    pub window: usize,
}

/// What the source knows: the state (through the parties' frames) and the
/// procedure. It also reproduces the parties' reconstruction for the
/// session transcript, since as the relay it sees both record lists.
#[derive(Debug, Clone)]
pub struct SourceConfig {
    pub session_id: String,
    pub effective_params: BlochParams,
    pub schedule: MeasurementSchedule,
    pub mode: Mode,
    pub seed: u64,
    pub z_threshold: f64,
    pub n_bootstrap: u32,
}

// ---------------------------------------------------------------------------
// Transcript
// ---------------------------------------------------------------------------

/// One logged message: logical sender and recipient (relays appear once,
/// as party-to-party), kind, and the canonical payload digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub from: Role,
    pub to: Role,
    pub kind: MessageKind,
    pub payload_digest: String,
}

impl TranscriptEntry {
    fn from_msg(from: Role, to: Role, msg: &WireMessage) -> TranscriptEntry {
        TranscriptEntry {
            from,
            to,
            kind: msg.kind,
            payload_digest: msg.payload_digest(),
        }
    }
}

/// The observable result of a session: the ordered message log from one
/// point of view, plus the reconstruction and verdict every agent agreed
/// on. The source's view is the canonical full conversation; a party's
/// view is the subsequence it took part in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub session_id: String,
    pub point_of_view: Role,
    pub entries: Vec<TranscriptEntry>,
    pub estimate: Estimate,
    pub verdict: CalibrationVerdict,
}

impl SessionTranscript {
    /// JSON-lines export: one header line, one line per entry, then the
    /// estimate and verdict lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = serde_json::json!({
            "session_id": self.session_id,
            "point_of_view": self.point_of_view,
        });
        out.push_str(&canonical_json(&header).expect("header serializes"));
        out.push('\n');
        for entry in &self.entries {
            out.push_str(&canonical_json(entry).expect("entry serializes"));
            out.push('\n');
        }
        out.push_str(
            &canonical_json(&serde_json::json!({ "estimate": &self.estimate }))
                .expect("estimate serializes"),
        );
        out.push('\n');
        out.push_str(
            &canonical_json(&serde_json::json!({ "verdict": &self.verdict }))
                .expect("verdict serializes"),
        );
        out.push('\n');
        out
    }

    /// Hex SHA-256 over the JSON-lines export.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Bootstrap seed shared by every agent so independently computed verdicts
/// agree bit for bit.
fn bootstrap_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "bootstrap-stream", 0)
}

/// Reconstruct exact Bloch parameters from per-cell outcome
/// distributions (the infinite-statistics analogue of record averaging).
pub fn exact_params_from_cells(cells: &ExactCells) -> Result<BlochParams> {
    let mut a = [0.0f64; 3];
    let mut b = [0.0f64; 3];
    let mut c = [[0.0f64; 3]; 3];
    for n in 0..3 {
        for m in 0..3 {
            let [pp, pm, mp, mm] = cells[n][m];
            c[n][m] = pp - pm - mp + mm;
            a[n] += (pp + pm - mp - mm) / 3.0;
            b[m] += (pp - pm + mp - mm) / 3.0;
        }
    }
    BlochParams::new(a, b, c)
}

fn expect_kind(msg: &WireMessage, kind: MessageKind) -> Result<()> {
    if msg.kind == MessageKind::Error {
        let detail = msg
            .payload_as::<crate::transport::ErrorPayload>()
            .map(|p| format!("{}: {}", p.code, p.message))
            .unwrap_or_else(|_| "unspecified error".to_string());
        return Err(Error::Protocol(format!("peer reported error: {detail}")));
    }
    if msg.kind != kind {
        return Err(Error::Protocol(format!(
            "expected {kind}, got {}",
            msg.kind
        )));
    }
    Ok(())
}

fn expect_session(msg: &WireMessage, session_id: &str) -> Result<()> {
    if msg.session_id != session_id {
        return Err(Error::Protocol(format!(
            "message for session '{}', expected '{session_id}'",
            msg.session_id
        )));
    }
    Ok(())
}

fn bits_equal(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn params_bits_equal(a: &BlochParams, b: &BlochParams) -> bool {
    (0..3).all(|n| {
        bits_equal(a.a()[n], b.a()[n])
            && bits_equal(a.b()[n], b.b()[n])
            && (0..3).all(|m| bits_equal(a.c()[n][m], b.c()[n][m]))
    })
}

fn verdicts_agree(own: &VerdictPayload, theirs: &VerdictPayload) -> bool {
    own.decision == theirs.decision
        && bits_equal(own.min_eigenvalue, theirs.min_eigenvalue)
        && bits_equal(own.min_eigenvalue_std, theirs.min_eigenvalue_std)
        && bits_equal(own.z_score, theirs.z_score)
}

// ---------------------------------------------------------------------------
// Party state machine
// ---------------------------------------------------------------------------

pub(crate) struct PartyOutcome {
    pub entries: Vec<TranscriptEntry>,
    pub estimate: Estimate,
    pub verdict: CalibrationVerdict,
}

/// Run one measuring party over a connected channel to the source.
pub(crate) fn run_party(cfg: &PartyConfig, chan: Duplex) -> Result<PartyOutcome> {
    let mut entries: Vec<TranscriptEntry> = Vec::new();
    let result = run_party_inner(cfg, chan, &mut entries);
    match result {
        Ok((estimate, verdict)) => Ok(PartyOutcome {
            entries,
            estimate,
            verdict,
        }),
        Err(Error::SessionAborted { detail, .. }) => Err(Error::SessionAborted {
            detail,
            partial: entries,
        }),
        Err(e) => Err(e),
    }
}

fn run_party_inner(
    cfg: &PartyConfig,
    chan: Duplex,
    entries: &mut Vec<TranscriptEntry>,
) -> Result<(Estimate, CalibrationVerdict)> {
    let Duplex { mut tx, mut rx } = chan;
    let sid = cfg.session_id.as_str();
    let me: Role = cfg.party.into();
    let other: Role = cfg.party.other().into();

    let send_logged = |tx: &mut Box<dyn MsgSender>,
                           entries: &mut Vec<TranscriptEntry>,
                           to: Role,
                           msg: &WireMessage|
     -> Result<()> {
        tx.send(msg)?;
        entries.push(TranscriptEntry::from_msg(me, to, msg));
        Ok(())
    };

    // Phase 1: hello / pair_count.
    let hello = WireMessage::new(
        MessageKind::Hello,
        sid,
        &HelloPayload { role: me },
    )?;
    send_logged(&mut tx, entries, Role::Cecil, &hello)?;

    let pc_msg = rx.recv()?;
    expect_kind(&pc_msg, MessageKind::PairCount)?;
    expect_session(&pc_msg, sid)?;
    entries.push(TranscriptEntry::from_msg(Role::Cecil, me, &pc_msg));
    let pair_count: PairCountPayload = pc_msg.payload_as()?;

    // Phase 2 + 3: measure and exchange, or take the exact shortcut.
    let est = match (cfg.mode, &pair_count.cells) {
        (Mode::Exact, Some(cells)) => {
            if pair_count.n_pairs != 0 {
                return Err(Error::Protocol(
                    "exact session announced a nonzero pair count".to_string(),
                ));
            }
            Estimate::exact(exact_params_from_cells(cells)?)
        }
        (Mode::Exact, None) => {
            return Err(Error::Protocol(
                "exact session missing cell distributions".to_string(),
            ))
        }
        (Mode::Statistical, Some(_)) => {
            return Err(Error::Protocol(
                "statistical session received exact cell distributions".to_string(),
            ))
        }
        (Mode::Statistical, None) => {
            let n = cfg.schedule.total_pairs();
            if pair_count.n_pairs != n {
                return Err(Error::Protocol(format!(
                    "source announced {} pairs, schedule expects {n}",
                    pair_count.n_pairs
                )));
            }

            // Measurement: axis requests pipelined up to the window.
            let mut my_records: Vec<MeasurementRecord> = Vec::with_capacity(n as usize);
            let mut pending_axes: VecDeque<u8> = VecDeque::new();
            let mut next_to_send = 0u64;
            for pair_id in 0..n {
                while next_to_send < n && next_to_send < pair_id + cfg.window as u64 {
                    let axis =
                        party_axis(cfg.schedule.axis_policy, cfg.seed, cfg.party, next_to_send);
                    let msg = WireMessage::new(
                        MessageKind::AxisRequest,
                        sid,
                        &AxisRequestPayload {
                            pair_id: next_to_send,
                            axis,
                        },
                    )?;
                    send_logged(&mut tx, entries, Role::Cecil, &msg)?;
                    pending_axes.push_back(axis);
                    next_to_send += 1;
                }
                let msg = rx.recv()?;
                expect_kind(&msg, MessageKind::Outcome)?;
                expect_session(&msg, sid)?;
                entries.push(TranscriptEntry::from_msg(Role::Cecil, me, &msg));
                let outcome: OutcomePayload = msg.payload_as()?;
                if outcome.pair_id != pair_id {
                    return Err(Error::Protocol(format!(
                        "outcome for pair {}, expected {pair_id}",
                        outcome.pair_id
                    )));
                }
                let axis = pending_axes.pop_front().expect("window keeps one axis per pair");
                my_records.push(MeasurementRecord {
                    pair_id,
                    axis,
                    outcome: outcome.value,
                });
            }

            // Record exchange, full and bilateral.
            for batch in
                crate::transport::split_into_batches(cfg.party, &my_records, RECORDS_BATCH_SIZE)
            {
                let msg = WireMessage::new(MessageKind::RecordsBatch, sid, &batch)?;
                send_logged(&mut tx, entries, other, &msg)?;
            }
            let mut assembler = RecordsAssembler::new(cfg.party.other());
            loop {
                let msg = rx.recv()?;
                expect_kind(&msg, MessageKind::RecordsBatch)?;
                expect_session(&msg, sid)?;
                entries.push(TranscriptEntry::from_msg(other, me, &msg));
                if assembler.push(msg.payload_as()?)? {
                    break;
                }
            }
            let their_records = assembler.finish()?;

            let (alice_records, bob_records) = match cfg.party {
                Party::Alice => (&my_records, &their_records),
                Party::Bob => (&their_records, &my_records),
            };
            tomography::estimate(alice_records, bob_records)?
        }
    };

    // Phase 4: decide and compare verdicts.
    let verdict = tomography::verdict(
        &est,
        cfg.mode,
        cfg.z_threshold,
        cfg.n_bootstrap,
        bootstrap_seed(cfg.seed),
    );
    let own_payload = VerdictPayload {
        owner: cfg.party,
        decision: verdict.decision,
        min_eigenvalue: verdict.min_eigenvalue,
        min_eigenvalue_std: verdict.min_eigenvalue_std,
        z_score: verdict.z_score,
        params: est.params.into(),
    };
    let msg = WireMessage::new(MessageKind::Verdict, sid, &own_payload)?;
    send_logged(&mut tx, entries, other, &msg)?;

    let msg = rx.recv()?;
    expect_kind(&msg, MessageKind::Verdict)?;
    expect_session(&msg, sid)?;
    entries.push(TranscriptEntry::from_msg(other, me, &msg));
    let their_payload: VerdictPayload = msg.payload_as()?;
    if their_payload.owner != cfg.party.other() {
        return Err(Error::Protocol(
            "received a verdict owned by the wrong party".to_string(),
        ));
    }
    let their_params: BlochParams = BlochParams::try_from(their_payload.params)?;
    if !verdicts_agree(&own_payload, &their_payload)
        || !params_bits_equal(&est.params, &their_params)
    {
        // Identical records must yield identical reconstructions; this is
        // an internal failure, not a calibration result.
        return Err(Error::Protocol(format!(
            "verdict disagreement: local {} vs remote {}",
            own_payload.decision, their_payload.decision
        )));
    }

    // Phase 5: bye and ack.
    let msg = WireMessage::new(MessageKind::Bye, sid, &serde_json::json!({}))?;
    send_logged(&mut tx, entries, Role::Cecil, &msg)?;
    let msg = rx.recv()?;
    expect_kind(&msg, MessageKind::Bye)?;
    expect_session(&msg, sid)?;
    entries.push(TranscriptEntry::from_msg(Role::Cecil, me, &msg));

    Ok((est, verdict))
}

// ---------------------------------------------------------------------------
// Source state machine
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub(crate) struct SourceOutcome {
    pub entries: Vec<TranscriptEntry>,
    pub estimate: Estimate,
    pub verdict: CalibrationVerdict,
}

/// Everything the source accumulates while serving one party's channel.
#[derive(Default)]
struct PartySide {
    axes: Vec<Option<u8>>,
    request_digests: Vec<Option<String>>,
    batch_digests: Vec<String>,
    records: Vec<MeasurementRecord>,
    verdict: Option<(VerdictPayload, String)>,
    bye_digest: Option<String>,
}

struct SourceState {
    alice: PartySide,
    bob: PartySide,
    failed: bool,
}

struct SourceShared {
    state: Mutex<SourceState>,
    cond: Condvar,
}

impl SourceShared {
    fn fail(&self) {
        self.state.lock().expect("source state lock").failed = true;
        self.cond.notify_all();
    }
}

fn side_of(state: &mut SourceState, party: Party) -> &mut PartySide {
    match party {
        Party::Alice => &mut state.alice,
        Party::Bob => &mut state.bob,
    }
}

/// Reader loop: consume one party's axis requests, then relay its records
/// and verdict to the other party's writer, then acknowledge its bye.
fn source_reader(
    cfg: &SourceConfig,
    party: Party,
    mut rx: Box<dyn MsgReceiver>,
    shared: &SourceShared,
    relay_to_other: mpsc::Sender<WireMessage>,
    ack_to_own: mpsc::Sender<WireMessage>,
    n_pairs: u64,
) -> Result<()> {
    let sid = cfg.session_id.as_str();
    for pair_id in 0..n_pairs {
        let msg = rx.recv()?;
        expect_kind(&msg, MessageKind::AxisRequest)?;
        expect_session(&msg, sid)?;
        let req: AxisRequestPayload = msg.payload_as()?;
        if req.pair_id != pair_id {
            return Err(Error::Protocol(format!(
                "axis request for pair {}, expected {pair_id}",
                req.pair_id
            )));
        }
        if !(1..=3).contains(&req.axis) {
            return Err(Error::Protocol(format!(
                "axis {} outside 1..=3",
                req.axis
            )));
        }
        let mut state = shared.state.lock().expect("source state lock");
        if state.failed {
            return Err(Error::aborted("session already failed"));
        }
        let side = side_of(&mut state, party);
        side.axes[pair_id as usize] = Some(req.axis);
        side.request_digests[pair_id as usize] = Some(msg.payload_digest());
        drop(state);
        shared.cond.notify_all();
    }

    // Relay phase: the party's record batches, then its verdict.
    if cfg.mode == Mode::Statistical {
        let mut assembler = RecordsAssembler::new(party);
        loop {
            let msg = rx.recv()?;
            expect_kind(&msg, MessageKind::RecordsBatch)?;
            expect_session(&msg, sid)?;
            let digest = msg.payload_digest();
            let batch: RecordsBatchPayload = msg.payload_as()?;
            let done = assembler.push(batch)?;
            {
                let mut state = shared.state.lock().expect("source state lock");
                side_of(&mut state, party).batch_digests.push(digest);
            }
            relay_to_other
                .send(msg)
                .map_err(|_| Error::aborted("relay channel closed"))?;
            if done {
                break;
            }
        }
        let records = assembler.finish()?;
        {
            let mut state = shared.state.lock().expect("source state lock");
            side_of(&mut state, party).records = records;
        }
    }

    let msg = rx.recv()?;
    expect_kind(&msg, MessageKind::Verdict)?;
    expect_session(&msg, sid)?;
    let digest = msg.payload_digest();
    let payload: VerdictPayload = msg.payload_as()?;
    if payload.owner != party {
        return Err(Error::Protocol(
            "verdict owner does not match its channel".to_string(),
        ));
    }
    {
        let mut state = shared.state.lock().expect("source state lock");
        side_of(&mut state, party).verdict = Some((payload, digest));
    }
    relay_to_other
        .send(msg)
        .map_err(|_| Error::aborted("relay channel closed"))?;

    let msg = rx.recv()?;
    expect_kind(&msg, MessageKind::Bye)?;
    expect_session(&msg, sid)?;
    {
        let mut state = shared.state.lock().expect("source state lock");
        side_of(&mut state, party).bye_digest = Some(msg.payload_digest());
    }
    let ack = WireMessage::new(MessageKind::Bye, sid, &serde_json::json!({}))?;
    ack_to_own
        .send(ack)
        .map_err(|_| Error::aborted("ack channel closed"))?;
    Ok(())
}

/// Writer loop: deliver outcome components in pair order, then forward
/// relayed messages until all producers hang up.
fn source_writer(
    cfg: &SourceConfig,
    party: Party,
    mut tx: Box<dyn MsgSender>,
    shared: &SourceShared,
    outbox: mpsc::Receiver<WireMessage>,
    cells: &[[[f64; 4]; 3]; 3],
    n_pairs: u64,
) -> Result<()> {
    let sid = cfg.session_id.as_str();
    for pair_id in 0..n_pairs {
        let (axis_a, axis_b) = {
            let mut state = shared.state.lock().expect("source state lock");
            loop {
                if state.failed {
                    return Err(Error::aborted("session already failed"));
                }
                let idx = pair_id as usize;
                if let (Some(a), Some(b)) = (state.alice.axes[idx], state.bob.axes[idx]) {
                    break (a, b);
                }
                state = shared.cond.wait(state).expect("source state lock");
            }
        };
        let cell = &cells[(axis_a - 1) as usize][(axis_b - 1) as usize];
        let (alpha, beta) = draw_outcome(cell, cfg.seed, pair_id);
        let value = match party {
            Party::Alice => alpha,
            Party::Bob => beta,
        };
        let msg = WireMessage::new(
            MessageKind::Outcome,
            sid,
            &OutcomePayload { pair_id, value },
        )?;
        tx.send(&msg)?;
    }
    for msg in outbox.iter() {
        tx.send(&msg)?;
    }
    Ok(())
}

/// Run the source: handshake both parties, then serve the measurement,
/// relay, and farewell phases concurrently per connection. Returns the
/// canonical full-conversation log.
pub(crate) fn run_source(cfg: &SourceConfig, alice: Duplex, bob: Duplex) -> Result<SourceOutcome> {
    let mut entries: Vec<TranscriptEntry> = Vec::new();
    match run_source_inner(cfg, alice, bob, &mut entries) {
        Ok((estimate, verdict)) => Ok(SourceOutcome {
            entries,
            estimate,
            verdict,
        }),
        Err(e @ Error::VersionMismatch { .. }) => Err(e),
        Err(e) => {
            let detail = e.to_string();
            Err(Error::SessionAborted {
                detail,
                partial: entries,
            })
        }
    }
}

fn run_source_inner(
    cfg: &SourceConfig,
    alice: Duplex,
    bob: Duplex,
    entries: &mut Vec<TranscriptEntry>,
) -> Result<(Estimate, CalibrationVerdict)> {
    let sid = cfg.session_id.as_str();
    let Duplex {
        tx: mut a_tx,
        rx: mut a_rx,
    } = alice;
    let Duplex {
        tx: mut b_tx,
        rx: mut b_rx,
    } = bob;

    // Handshake. Each channel must open with a hello for its role.
    for (party, rx) in [(Party::Alice, &mut a_rx), (Party::Bob, &mut b_rx)] {
        let msg = rx.recv()?;
        expect_kind(&msg, MessageKind::Hello)?;
        expect_session(&msg, sid)?;
        if msg.version != PROTOCOL_VERSION {
            return Err(Error::VersionMismatch {
                local: PROTOCOL_VERSION,
                remote: msg.version,
            });
        }
        let hello: HelloPayload = msg.payload_as()?;
        if hello.role != party.into() {
            return Err(Error::Protocol(format!(
                "hello role {} on the {party:?} channel",
                hello.role
            )));
        }
        entries.push(TranscriptEntry::from_msg(party.into(), Role::Cecil, &msg));
    }

    let cells = all_cell_distributions(&cfg.effective_params)?;
    let n_pairs = match cfg.mode {
        Mode::Exact => 0,
        Mode::Statistical => cfg.schedule.total_pairs(),
    };
    let pair_count = PairCountPayload {
        n_pairs,
        cells: match cfg.mode {
            Mode::Exact => Some(cells),
            Mode::Statistical => None,
        },
    };
    let pc_msg = WireMessage::new(MessageKind::PairCount, sid, &pair_count)?;
    a_tx.send(&pc_msg)?;
    entries.push(TranscriptEntry::from_msg(Role::Cecil, Role::Alice, &pc_msg));
    b_tx.send(&pc_msg)?;
    entries.push(TranscriptEntry::from_msg(Role::Cecil, Role::Bob, &pc_msg));

    let shared = Arc::new(SourceShared {
        state: Mutex::new(SourceState {
            alice: PartySide {
                axes: vec![None; n_pairs as usize],
                request_digests: vec![None; n_pairs as usize],
                ..Default::default()
            },
            bob: PartySide {
                axes: vec![None; n_pairs as usize],
                request_digests: vec![None; n_pairs as usize],
                ..Default::default()
            },
            failed: false,
        }),
        cond: Condvar::new(),
    });

    // Outboxes feed each connection's writer with relayed traffic and bye
    // acks; the writer exits when every sender is dropped.
    let (to_alice, alice_outbox) = mpsc::channel::<WireMessage>();
    let (to_bob, bob_outbox) = mpsc::channel::<WireMessage>();

    let results = thread::scope(|scope| {
        let reader_a = {
            let shared = Arc::clone(&shared);
            let relay = to_bob.clone();
            let ack = to_alice.clone();
            scope.spawn(move || {
                let r = source_reader(cfg, Party::Alice, a_rx, &shared, relay, ack, n_pairs);
                if r.is_err() {
                    shared.fail();
                }
                r
            })
        };
        let reader_b = {
            let shared = Arc::clone(&shared);
            let relay = to_alice.clone();
            let ack = to_bob.clone();
            scope.spawn(move || {
                let r = source_reader(cfg, Party::Bob, b_rx, &shared, relay, ack, n_pairs);
                if r.is_err() {
                    shared.fail();
                }
                r
            })
        };
        // The spawned readers hold the only remaining senders.
        drop(to_alice);
        drop(to_bob);

        let writer_a = {
            let shared = Arc::clone(&shared);
            let cells_ref = &cells;
            scope.spawn(move || {
                let r = source_writer(
                    cfg,
                    Party::Alice,
                    a_tx,
                    &shared,
                    alice_outbox,
                    cells_ref,
                    n_pairs,
                );
                if r.is_err() {
                    shared.fail();
                }
                r
            })
        };
        let writer_b = {
            let shared = Arc::clone(&shared);
            let cells_ref = &cells;
            scope.spawn(move || {
                let r = source_writer(
                    cfg,
                    Party::Bob,
                    b_tx,
                    &shared,
                    bob_outbox,
                    cells_ref,
                    n_pairs,
                );
                if r.is_err() {
                    shared.fail();
                }
                r
            })
        };

        [
            reader_a.join(),
            reader_b.join(),
            writer_a.join(),
            writer_b.join(),
        ]
    });
    for result in results {
        result.map_err(|_| Error::Protocol("source worker panicked".to_string()))??;
    }

    let state = shared.state.lock().expect("source state lock");

    // Reconstruct the outcome stream (a pure function of seed and axes)
    // and assemble the canonical per-pair log.
    let mut alice_records = Vec::with_capacity(n_pairs as usize);
    let mut bob_records = Vec::with_capacity(n_pairs as usize);
    for pair_id in 0..n_pairs {
        let idx = pair_id as usize;
        let axis_a = state.alice.axes[idx].ok_or_else(|| {
            Error::Protocol(format!("missing alice axis for pair {pair_id}"))
        })?;
        let axis_b = state.bob.axes[idx].ok_or_else(|| {
            Error::Protocol(format!("missing bob axis for pair {pair_id}"))
        })?;
        let cell = &cells[(axis_a - 1) as usize][(axis_b - 1) as usize];
        let (alpha, beta) = draw_outcome(cell, cfg.seed, pair_id);
        alice_records.push(MeasurementRecord {
            pair_id,
            axis: axis_a,
            outcome: alpha,
        });
        bob_records.push(MeasurementRecord {
            pair_id,
            axis: axis_b,
            outcome: beta,
        });

        entries.push(TranscriptEntry {
            from: Role::Alice,
            to: Role::Cecil,
            kind: MessageKind::AxisRequest,
            payload_digest: state.alice.request_digests[idx]
                .clone()
                .expect("request digest recorded with axis"),
        });
        entries.push(TranscriptEntry {
            from: Role::Bob,
            to: Role::Cecil,
            kind: MessageKind::AxisRequest,
            payload_digest: state.bob.request_digests[idx]
                .clone()
                .expect("request digest recorded with axis"),
        });
        for (party, value) in [(Role::Alice, alpha), (Role::Bob, beta)] {
            let msg = WireMessage::new(
                MessageKind::Outcome,
                sid,
                &OutcomePayload { pair_id, value },
            )?;
            entries.push(TranscriptEntry::from_msg(Role::Cecil, party, &msg));
        }
    }

    let est = match cfg.mode {
        Mode::Exact => Estimate::exact(exact_params_from_cells(&cells)?),
        Mode::Statistical => {
            // The relayed lists must match what the axes and seed imply.
            if state.alice.records != alice_records || state.bob.records != bob_records {
                return Err(Error::Protocol(
                    "relayed records disagree with the sampled outcomes".to_string(),
                ));
            }
            for (digest, from, to) in state
                .alice
                .batch_digests
                .iter()
                .map(|d| (d, Role::Alice, Role::Bob))
                .chain(
                    state
                        .bob
                        .batch_digests
                        .iter()
                        .map(|d| (d, Role::Bob, Role::Alice)),
                )
            {
                entries.push(TranscriptEntry {
                    from,
                    to,
                    kind: MessageKind::RecordsBatch,
                    payload_digest: digest.clone(),
                });
            }
            tomography::estimate(&alice_records, &bob_records)?
        }
    };

    let verdict = tomography::verdict(
        &est,
        cfg.mode,
        cfg.z_threshold,
        cfg.n_bootstrap,
        bootstrap_seed(cfg.seed),
    );

    let (alice_verdict, alice_vdigest) = state
        .alice
        .verdict
        .clone()
        .ok_or_else(|| Error::Protocol("alice sent no verdict".to_string()))?;
    let (bob_verdict, bob_vdigest) = state
        .bob
        .verdict
        .clone()
        .ok_or_else(|| Error::Protocol("bob sent no verdict".to_string()))?;
    entries.push(TranscriptEntry {
        from: Role::Alice,
        to: Role::Bob,
        kind: MessageKind::Verdict,
        payload_digest: alice_vdigest,
    });
    entries.push(TranscriptEntry {
        from: Role::Bob,
        to: Role::Alice,
        kind: MessageKind::Verdict,
        payload_digest: bob_vdigest,
    });
    for payload in [&alice_verdict, &bob_verdict] {
        if payload.decision != verdict.decision
            || !bits_equal(payload.min_eigenvalue, verdict.min_eigenvalue)
            || !bits_equal(payload.min_eigenvalue_std, verdict.min_eigenvalue_std)
            || !bits_equal(payload.z_score, verdict.z_score)
        {
            return Err(Error::Protocol(format!(
                "{:?} verdict diverges from the source's reconstruction",
                payload.owner
            )));
        }
    }
    if !verdicts_agree(&alice_verdict, &bob_verdict) {
        return Err(Error::Protocol(
            "parties disagree on the verdict".to_string(),
        ));
    }

    let bye_ack = WireMessage::new(MessageKind::Bye, sid, &serde_json::json!({}))?;
    for (side, role) in [(&state.alice, Role::Alice), (&state.bob, Role::Bob)] {
        entries.push(TranscriptEntry {
            from: role,
            to: Role::Cecil,
            kind: MessageKind::Bye,
            payload_digest: side
                .bye_digest
                .clone()
                .ok_or_else(|| Error::Protocol(format!("{role} sent no bye")))?,
        });
    }
    for role in [Role::Alice, Role::Bob] {
        entries.push(TranscriptEntry::from_msg(Role::Cecil, role, &bye_ack));
    }

    Ok((est, verdict))
}

// ---------------------------------------------------------------------------
// Whole-session drivers
// ---------------------------------------------------------------------------

fn join_party(
    handle: thread::JoinHandle<Result<PartyOutcome>>,
    who: &str,
) -> Result<PartyOutcome> {
    handle
        .join()
        .map_err(|_| Error::Protocol(format!("{who} thread panicked")))?
}

/// Run a full session in-process: the three agents on their own threads,
/// connected by in-memory channels. Returns the source's canonical
/// transcript; both parties' verdicts are checked for agreement along the
/// way.
pub fn run_session(cfg: &SessionConfig) -> Result<SessionTranscript> {
    run_session_tapped(cfg, None)
}

/// [`run_session`] with an optional tap collecting every message that
/// crosses either channel.
pub fn run_session_tapped(
    cfg: &SessionConfig,
    tap: Option<MessageTap>,
) -> Result<SessionTranscript> {
    cfg.validate()?;
    let (alice_local, alice_remote) = memory_pair_tapped(tap.clone());
    let (bob_local, bob_remote) = memory_pair_tapped(tap);

    let alice_cfg = cfg.party_config(Party::Alice);
    let bob_cfg = cfg.party_config(Party::Bob);
    let source_cfg = cfg.source_config()?;

    let alice_handle = thread::spawn(move || run_party(&alice_cfg, alice_remote));
    let bob_handle = thread::spawn(move || run_party(&bob_cfg, bob_remote));
    let source_result = run_source(&source_cfg, alice_local, bob_local);

    let alice_result = join_party(alice_handle, "alice");
    let bob_result = join_party(bob_handle, "bob");
    let source = source_result?;
    let alice = alice_result?;
    let bob = bob_result?;

    if alice.estimate != bob.estimate || alice.verdict != bob.verdict {
        return Err(Error::Protocol(
            "parties finished with different reconstructions".to_string(),
        ));
    }
    if source.estimate != alice.estimate || source.verdict != alice.verdict {
        return Err(Error::Protocol(
            "source reconstruction differs from the parties'".to_string(),
        ));
    }

    Ok(SessionTranscript {
        session_id: cfg.effective_session_id(),
        point_of_view: Role::Cecil,
        entries: source.entries,
        estimate: source.estimate,
        verdict: source.verdict,
    })
}

/// Time-arrow calibration: identical machinery, with the frame errors
/// restricted to time flips (rotations must be proper — chiralities are
/// assumed already calibrated in this scenario).
pub fn run_time_arrow_session(cfg: &SessionConfig) -> Result<SessionTranscript> {
    if !cfg.frame_alice.is_proper() || !cfg.frame_bob.is_proper() {
        return Err(Error::InvalidFrame(
            "time-arrow sessions require proper rotations; use time_flip for the mismatch"
                .to_string(),
        ));
    }
    run_session(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pauli::Preset;
    use crate::tomography::Decision;
    use approx::assert_abs_diff_eq;

    fn exact_config(state: StateSpec, f_alice: FrameMap, f_bob: FrameMap) -> SessionConfig {
        let mut cfg = SessionConfig::new(state, 11);
        cfg.mode = Mode::Exact;
        cfg.frame_alice = f_alice;
        cfg.frame_bob = f_bob;
        cfg
    }

    #[test]
    fn exact_session_detects_one_reflected_frame() {
        let cfg = exact_config(
            StateSpec::Preset(Preset::Singlet),
            FrameMap::identity(),
            FrameMap::space_reflected(),
        );
        let transcript = run_session(&cfg).unwrap();
        assert_eq!(transcript.verdict.decision, Decision::Incompatible);
        assert_abs_diff_eq!(transcript.verdict.min_eigenvalue, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn exact_session_identity_frames_compatible() {
        let cfg = exact_config(
            StateSpec::Preset(Preset::Singlet),
            FrameMap::identity(),
            FrameMap::identity(),
        );
        let transcript = run_session(&cfg).unwrap();
        assert_eq!(transcript.verdict.decision, Decision::Compatible);
        assert_abs_diff_eq!(transcript.verdict.min_eigenvalue, 0.0, epsilon = 1e-11);
    }

    #[test]
    fn double_reflection_is_invisible() {
        let cfg = exact_config(
            StateSpec::Preset(Preset::Singlet),
            FrameMap::space_reflected(),
            FrameMap::space_reflected(),
        );
        let transcript = run_session(&cfg).unwrap();
        assert_eq!(transcript.verdict.decision, Decision::Compatible);
    }

    #[test]
    fn time_arrow_session_examples() {
        // One time-flipped party on the singlet: detected.
        let mut cfg = exact_config(
            StateSpec::Preset(Preset::Singlet),
            FrameMap::identity(),
            FrameMap::time_reversed(),
        );
        let transcript = run_time_arrow_session(&cfg).unwrap();
        assert_eq!(transcript.verdict.decision, Decision::Incompatible);
        assert_abs_diff_eq!(transcript.verdict.min_eigenvalue, -0.5, epsilon = 1e-12);

        // Separable state: inconclusive by design, reported compatible.
        cfg.true_state = StateSpec::Preset(Preset::Werner { p: 0.25 });
        let transcript = run_time_arrow_session(&cfg).unwrap();
        assert_eq!(transcript.verdict.decision, Decision::Compatible);

        // Both time-flipped: invisible.
        cfg.true_state = StateSpec::Preset(Preset::Singlet);
        cfg.frame_alice = FrameMap::time_reversed();
        let transcript = run_time_arrow_session(&cfg).unwrap();
        assert_eq!(transcript.verdict.decision, Decision::Compatible);

        // Improper rotations are the other calibration's business.
        cfg.frame_alice = FrameMap::space_reflected();
        assert!(run_time_arrow_session(&cfg).is_err());
    }

    #[test]
    fn statistical_session_runs_and_detects() {
        let mut cfg = SessionConfig::new(StateSpec::Preset(Preset::Singlet), 424242);
        cfg.mode = Mode::Statistical;
        cfg.frame_bob = FrameMap::space_reflected();
        cfg.schedule = MeasurementSchedule::round_robin(200);
        cfg.n_bootstrap = 200;
        let transcript = run_session(&cfg).unwrap();
        assert_eq!(transcript.verdict.decision, Decision::Incompatible);
        assert!(transcript.verdict.min_eigenvalue < -0.4);
        assert!(transcript.verdict.z_score < -5.0);
    }

    #[test]
    fn transcript_digest_is_deterministic() {
        let mut cfg = SessionConfig::new(StateSpec::Preset(Preset::Werner { p: 0.9 }), 7);
        cfg.schedule = MeasurementSchedule::round_robin(50);
        cfg.n_bootstrap = 50;
        let t1 = run_session(&cfg).unwrap();
        let t2 = run_session(&cfg).unwrap();
        assert_eq!(t1.digest(), t2.digest());
        assert_eq!(t1.to_jsonl(), t2.to_jsonl());

        let mut other = cfg.clone();
        other.seed = 8;
        let t3 = run_session(&other).unwrap();
        assert_ne!(t1.digest(), t3.digest());
    }

    #[test]
    fn session_messages_never_mention_state_or_frames() {
        let mut cfg = SessionConfig::new(StateSpec::Preset(Preset::Singlet), 5);
        cfg.frame_bob = FrameMap::space_reflected();
        cfg.schedule = MeasurementSchedule::round_robin(5);
        cfg.n_bootstrap = 20;
        let tap: MessageTap = Arc::new(Mutex::new(Vec::new()));
        run_session_tapped(&cfg, Some(Arc::clone(&tap))).unwrap();

        let forbidden = ["true_state", "frame_alice", "frame_bob", "rotation", "time_flip"];
        let messages = tap.lock().unwrap();
        assert!(!messages.is_empty());
        for msg in messages.iter() {
            let text = crate::transport::encode(msg)
                .map(|b| String::from_utf8(b).unwrap())
                .unwrap();
            for key in forbidden {
                assert!(
                    !text.contains(key),
                    "message leaks '{key}': {text}"
                );
            }
        }
    }

    #[test]
    fn aborted_session_reports_partial_transcript() {
        // Parties that greet, accept the pair count, and then vanish: the
        // source must abort and surface the log it assembled so far.
        let cfg = SessionConfig::new(StateSpec::Preset(Preset::Singlet), 3);
        let source_cfg = cfg.source_config().unwrap();
        let sid = cfg.effective_session_id();
        let (alice_local, alice_remote) = memory_pair();
        let (bob_local, bob_remote) = memory_pair();

        let killer = thread::spawn(move || {
            let mut remotes = [alice_remote, bob_remote];
            for (duplex, role) in remotes.iter_mut().zip([Role::Alice, Role::Bob]) {
                let hello =
                    WireMessage::new(MessageKind::Hello, &sid, &HelloPayload { role }).unwrap();
                duplex.tx.send(&hello).unwrap();
            }
            for duplex in remotes.iter_mut() {
                let msg = duplex.rx.recv().unwrap();
                assert_eq!(msg.kind, MessageKind::PairCount);
            }
            // Both duplexes drop here, wedging the source mid-phase.
        });
        let result = run_source(&source_cfg, alice_local, bob_local);
        killer.join().unwrap();
        match result {
            Err(Error::SessionAborted { partial, .. }) => {
                // Hellos and pair counts made it into the log.
                assert!(partial.len() >= 4, "partial log too short: {partial:?}");
            }
            other => panic!("expected aborted session, got {other:?}"),
        }
    }

    #[test]
    fn exact_params_from_cells_round_trip() {
        let p = Preset::PhiMinus.bloch_params().unwrap();
        let cells = all_cell_distributions(&p).unwrap();
        let back = exact_params_from_cells(&cells).unwrap();
        assert!(back.max_abs_diff(&p) < 1e-14);
    }
}
