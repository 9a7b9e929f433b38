//! Round protocol: server orchestration, client evaluation, wire format.
//!
//! One evaluation round runs in four phases. The server publishes an
//! [`EvalTask`] carrying the global model, a fixed-point loss threshold, and
//! a fresh 128-bit nonce. Each client computes its mean local loss, and —
//! only if the encoded loss is strictly below the threshold — proves that
//! fact in zero knowledge, submitting the proof with public inputs (model
//! digest limbs, threshold, nonce); otherwise it declines. The server
//! verifies submissions sequentially against its round state, classifying
//! every failure as one of four reject reasons, then aggregates accept /
//! decline / reject counts into a validation rate.
//!
//! The loss value itself never leaves the client: a submission carries only
//! the round's public values plus the proof, and a decline carries nothing
//! but ids, so the server learns exactly one bit per client.
//!
//! Replay defense: nonces of finished rounds are remembered, and a
//! submission quoting one is rejected as stale; a nonce the server never
//! issued is a bad public input.

use crate::dataio::ClientShard;
use crate::fixedpoint::{encode_fixed, FixedLoss};
use crate::nn::{
    canonical_deserialize, canonical_serialize, model_hash, ModelDigest, ModelParams, NnError,
};
use crate::r1cs::{synthesize_threshold_circuit, ThresholdPublics};
use crate::zkbackend::{
    BackendField, Proof, ProofBackend, ProofDecodeError, ProvingKey, VerifyingKey,
};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{Read, Write};
use std::sync::Arc;
use thiserror::Error;

/// Evaluation batch size used throughout the experiments.
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("round id {got} does not increase over {last}")]
    RoundIdNotIncreasing { last: u64, got: u64 },
    #[error("no active round")]
    NoActiveRound,
    #[error("{participants} participants cannot cover {responses} recorded responses")]
    ParticipantUndercount { participants: u64, responses: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Why the server rejected a submission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    /// A public input (digest limb, threshold, nonce, or round id) does not
    /// match the active round.
    BadPublicInput,
    /// The quoted nonce belongs to an already-finished round: a replay.
    StaleNonce,
    /// Public inputs match but the proof does not verify.
    InvalidProof,
    /// This client already has an accepted submission this round.
    Duplicate,
}

/// Server-side verdict for one submission.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerifyOutcome {
    Accepted,
    Rejected(RejectReason),
}

/// The server's round announcement. The model travels by cheap shared
/// reference in-process; the TCP wire format serializes it in full.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub round_id: u64,
    pub model: Arc<ModelParams>,
    pub model_digest: ModelDigest,
    pub threshold: FixedLoss,
    pub nonce: u128,
}

/// A client's proof that its loss is below the round threshold. Contains no
/// function of the loss beyond that single bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ProofSubmission {
    pub round_id: u64,
    pub client_id: u64,
    /// Instance values in circuit order: digest_lo, digest_hi, threshold,
    /// nonce.
    pub public_inputs: ThresholdPublics,
    pub proof: Proof,
}

/// A contentless "no proof this round" indication.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeclineNotice {
    pub round_id: u64,
    pub client_id: u64,
}

/// Everything a client can send back for a round.
#[derive(Clone, Debug, PartialEq)]
pub enum ClientResponse {
    Submission(ProofSubmission),
    Decline(DeclineNotice),
}

impl ClientResponse {
    pub fn client_id(&self) -> u64 {
        match self {
            ClientResponse::Submission(s) => s.client_id,
            ClientResponse::Decline(d) => d.client_id,
        }
    }
}

/// Aggregated outcome of one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundResult {
    pub round_id: u64,
    pub valid_count: u64,
    pub decline_count: u64,
    pub reject_count: u64,
    pub participants: u64,
    /// `valid_count / participants`; zero for an empty round.
    pub validation_rate: f64,
}

#[derive(Debug)]
struct ActiveRound {
    round_id: u64,
    digest: ModelDigest,
    threshold: FixedLoss,
    nonce: u128,
    accepted_clients: HashSet<u64>,
    valid_count: u64,
    decline_count: u64,
    reject_count: u64,
}

/// Server-side round state: the active round's expectations and tallies,
/// plus every nonce ever issued (the replay blocklist). Mutation points
/// (verify, decline, aggregate) require exclusive access.
#[derive(Debug, Default)]
pub struct RoundRegistry {
    active: Option<ActiveRound>,
    past_nonces: HashSet<u128>,
    last_round_id: Option<u64>,
}

impl RoundRegistry {
    pub fn new() -> RoundRegistry {
        RoundRegistry::default()
    }

    /// The nonce of the round currently accepting submissions.
    pub fn active_nonce(&self) -> Option<u128> {
        self.active.as_ref().map(|r| r.nonce)
    }

    pub fn active_round_id(&self) -> Option<u64> {
        self.active.as_ref().map(|r| r.round_id)
    }
}

/// Opens a round: registers a fresh unique nonce, computes the model
/// digest, and returns the task to broadcast. Any still-open round is
/// retired first (its nonce joins the replay blocklist). Round ids must be
/// strictly increasing.
pub fn server_start_round(
    registry: &mut RoundRegistry,
    model: Arc<ModelParams>,
    threshold: FixedLoss,
    round_id: u64,
    rng: &mut dyn RngCore,
) -> Result<EvalTask, ProtocolError> {
    if let Some(last) = registry.last_round_id {
        if round_id <= last {
            return Err(ProtocolError::RoundIdNotIncreasing {
                last,
                got: round_id,
            });
        }
    }
    if let Some(stale) = registry.active.take() {
        registry.past_nonces.insert(stale.nonce);
    }
    let nonce = loop {
        let candidate = ((rng.next_u64() as u128) << 64) | rng.next_u64() as u128;
        if !registry.past_nonces.contains(&candidate) {
            break candidate;
        }
    };
    let model_digest = model_hash(&model);
    registry.active = Some(ActiveRound {
        round_id,
        digest: model_digest,
        threshold,
        nonce,
        accepted_clients: HashSet::new(),
        valid_count: 0,
        decline_count: 0,
        reject_count: 0,
    });
    registry.last_round_id = Some(round_id);
    Ok(EvalTask {
        round_id,
        model,
        model_digest,
        threshold,
        nonce,
    })
}

/// One client's turn: evaluate the model on the private shard, then either
/// prove "loss < threshold" or decline.
///
/// The digest is recomputed from the received weights before anything else,
/// so a substituted model (digest mismatch) is refused. Every local failure
/// on the proving path — encoding overflow, witness refusal, prover error —
/// degrades to a decline with a logged fault rather than a bogus proof, and
/// the loss value influences nothing but the branch.
pub fn client_evaluate(
    task: &EvalTask,
    shard: &ClientShard,
    pk: &ProvingKey,
    backend: &dyn ProofBackend,
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Result<ClientResponse, ProtocolError> {
    let decline = ClientResponse::Decline(DeclineNotice {
        round_id: task.round_id,
        client_id: shard.client_id,
    });

    if model_hash(&task.model) != task.model_digest {
        log::warn!(
            "client {}: task digest does not match received weights; refusing round {}",
            shard.client_id,
            task.round_id
        );
        return Ok(decline);
    }

    let loss = crate::nn::local_loss(&task.model, &shard.samples, batch_size)?;
    let encoded = match encode_fixed(loss) {
        Ok(encoded) => encoded,
        Err(e) => {
            log::warn!(
                "client {}: loss {loss} not encodable ({e}); declining round {}",
                shard.client_id,
                task.round_id
            );
            return Ok(decline);
        }
    };
    if encoded.raw() >= task.threshold.raw() {
        return Ok(decline);
    }

    let publics = ThresholdPublics {
        digest_lo: task.model_digest.lo_limb(),
        digest_hi: task.model_digest.hi_limb(),
        threshold: task.threshold,
        nonce: task.nonce,
    };
    let circuit = synthesize_threshold_circuit::<BackendField>();
    let assignment = match circuit.build_assignment(&publics, encoded) {
        Ok(assignment) => assignment,
        Err(e) => {
            log::warn!(
                "client {}: witness construction failed on a qualifying loss ({e}); declining",
                shard.client_id
            );
            return Ok(decline);
        }
    };
    match backend.prove(pk, &assignment, rng) {
        Ok(proof) => Ok(ClientResponse::Submission(ProofSubmission {
            round_id: task.round_id,
            client_id: shard.client_id,
            public_inputs: publics,
            proof,
        })),
        Err(e) => {
            log::warn!(
                "client {}: proving failed on a qualifying loss ({e}); declining round {}",
                shard.client_id,
                task.round_id
            );
            Ok(decline)
        }
    }
}

/// Sequentially verifies one submission against the active round.
///
/// Checks run in a fixed order and every failure maps to one reason:
/// nonce/round mismatch (stale if the nonce was ever issued, otherwise bad
/// public input), duplicate client, digest/threshold mismatch, and finally
/// cryptographic verification. Accepted and rejected submissions update the
/// round tallies.
pub fn server_verify_submission(
    registry: &mut RoundRegistry,
    sub: &ProofSubmission,
    vk: &VerifyingKey,
    backend: &dyn ProofBackend,
) -> VerifyOutcome {
    let stale_or_bad = |past: &HashSet<u128>, nonce: u128| {
        if past.contains(&nonce) {
            RejectReason::StaleNonce
        } else {
            RejectReason::BadPublicInput
        }
    };
    let Some(active) = registry.active.as_mut() else {
        return VerifyOutcome::Rejected(stale_or_bad(
            &registry.past_nonces,
            sub.public_inputs.nonce,
        ));
    };
    let reject = |active: &mut ActiveRound, reason| {
        active.reject_count += 1;
        VerifyOutcome::Rejected(reason)
    };

    if sub.public_inputs.nonce != active.nonce {
        let reason = stale_or_bad(&registry.past_nonces, sub.public_inputs.nonce);
        return reject(active, reason);
    }
    if sub.round_id != active.round_id {
        return reject(active, RejectReason::BadPublicInput);
    }
    if active.accepted_clients.contains(&sub.client_id) {
        return reject(active, RejectReason::Duplicate);
    }
    if sub.public_inputs.digest_lo != active.digest.lo_limb()
        || sub.public_inputs.digest_hi != active.digest.hi_limb()
        || sub.public_inputs.threshold != active.threshold
    {
        return reject(active, RejectReason::BadPublicInput);
    }
    if sub.proof.backend() != backend.id() || vk.backend() != backend.id() {
        return reject(active, RejectReason::InvalidProof);
    }
    let publics = sub.public_inputs.to_field_elements::<BackendField>();
    if !backend.verify(vk, &publics, &sub.proof) {
        return reject(active, RejectReason::InvalidProof);
    }
    active.accepted_clients.insert(sub.client_id);
    active.valid_count += 1;
    VerifyOutcome::Accepted
}

/// Records an explicit decline for the active round. Declines quoting a
/// different round are ignored.
pub fn server_record_decline(registry: &mut RoundRegistry, decline: &DeclineNotice) {
    match registry.active.as_mut() {
        Some(active) if active.round_id == decline.round_id => {
            active.decline_count += 1;
        }
        _ => log::debug!(
            "ignoring decline from client {} for inactive round {}",
            decline.client_id,
            decline.round_id
        ),
    }
}

/// Closes the active round and returns its tallies. `participants` is the
/// number of clients the task was broadcast to; clients that never
/// responded (timeouts) count as declines. The round's nonce joins the
/// replay blocklist.
pub fn aggregate(
    registry: &mut RoundRegistry,
    participants: u64,
) -> Result<RoundResult, ProtocolError> {
    let active = registry.active.take().ok_or(ProtocolError::NoActiveRound)?;
    let responses = active.valid_count + active.decline_count + active.reject_count;
    if participants < responses {
        registry.active = Some(active);
        return Err(ProtocolError::ParticipantUndercount {
            participants,
            responses,
        });
    }
    let decline_count = active.decline_count + (participants - responses);
    let validation_rate = if participants == 0 {
        0.0
    } else {
        active.valid_count as f64 / participants as f64
    };
    registry.past_nonces.insert(active.nonce);
    Ok(RoundResult {
        round_id: active.round_id,
        valid_count: active.valid_count,
        decline_count,
        reject_count: active.reject_count,
        participants,
        validation_rate,
    })
}

// ---------------------------------------------------------------------------
// Wire format.
// ---------------------------------------------------------------------------

/// Message type bytes on the wire.
pub const MSG_EVAL_TASK: u8 = 1;
pub const MSG_PROOF_SUBMISSION: u8 = 2;
pub const MSG_DECLINE: u8 = 3;
pub const MSG_ROUND_RESULT: u8 = 4;

/// Upper bound on a frame body; generous for the largest model (~0.5 MiB of
/// hex) while refusing absurd allocations from corrupt length prefixes.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN}-byte limit")]
    Oversized(u32),
    #[error("frame has no message type byte")]
    Empty,
    #[error("unknown message type byte {0:#04x}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid hex field: {0}")]
    Hex(#[from] hex::FromHexError),
    #[error("digest field must be 32 bytes, got {0}")]
    DigestLength(usize),
    #[error("malformed model bytes: {0}")]
    Model(#[from] NnError),
    #[error("malformed proof: {0}")]
    Proof(#[from] ProofDecodeError),
}

/// Any protocol message, for framing.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Task(EvalTask),
    Submission(ProofSubmission),
    Decline(DeclineNotice),
    Result(RoundResult),
}

// Serialized payloads. Field declaration order is alphabetical — serde
// emits fields in declaration order, and alphabetical order is the
// canonical-JSON contract. Byte strings are lowercase hex; integers
// (including 128-bit nonces and digest limbs) are decimal.
#[derive(Serialize, Deserialize)]
struct TaskWire {
    model: String,
    model_digest: String,
    nonce: u128,
    round_id: u64,
    threshold: u32,
}

#[derive(Serialize, Deserialize)]
struct SubmissionWire {
    client_id: u64,
    digest_hi: u128,
    digest_lo: u128,
    nonce: u128,
    proof: String,
    round_id: u64,
    threshold: u32,
}

#[derive(Serialize, Deserialize)]
struct DeclineWire {
    client_id: u64,
    round_id: u64,
}

#[derive(Serialize, Deserialize)]
struct ResultWire {
    decline_count: u64,
    participants: u64,
    reject_count: u64,
    round_id: u64,
    valid_count: u64,
    validation_rate: f64,
}

fn message_payload(message: &Message) -> (u8, Vec<u8>) {
    let json = match message {
        Message::Task(task) => serde_json::to_vec(&TaskWire {
            model: hex::encode(canonical_serialize(&task.model)),
            model_digest: hex::encode(task.model_digest.bytes()),
            nonce: task.nonce,
            round_id: task.round_id,
            threshold: task.threshold.raw(),
        }),
        Message::Submission(sub) => serde_json::to_vec(&SubmissionWire {
            client_id: sub.client_id,
            digest_hi: sub.public_inputs.digest_hi,
            digest_lo: sub.public_inputs.digest_lo,
            nonce: sub.public_inputs.nonce,
            proof: hex::encode(sub.proof.wire_bytes()),
            round_id: sub.round_id,
            threshold: sub.public_inputs.threshold.raw(),
        }),
        Message::Decline(decline) => serde_json::to_vec(&DeclineWire {
            client_id: decline.client_id,
            round_id: decline.round_id,
        }),
        Message::Result(result) => serde_json::to_vec(&ResultWire {
            decline_count: result.decline_count,
            participants: result.participants,
            reject_count: result.reject_count,
            round_id: result.round_id,
            valid_count: result.valid_count,
            validation_rate: result.validation_rate,
        }),
    };
    let type_byte = match message {
        Message::Task(_) => MSG_EVAL_TASK,
        Message::Submission(_) => MSG_PROOF_SUBMISSION,
        Message::Decline(_) => MSG_DECLINE,
        Message::Result(_) => MSG_ROUND_RESULT,
    };
    (type_byte, json.expect("wire structs serialize infallibly"))
}

fn decode_digest(hex_str: &str) -> Result<ModelDigest, WireError> {
    let bytes = hex::decode(hex_str)?;
    let arr: [u8; 32] = bytes
        .as_slice()
        .try_into()
        .map_err(|_| WireError::DigestLength(bytes.len()))?;
    Ok(ModelDigest::from_bytes(arr))
}

fn decode_payload(type_byte: u8, payload: &[u8]) -> Result<Message, WireError> {
    match type_byte {
        MSG_EVAL_TASK => {
            let wire: TaskWire = serde_json::from_slice(payload)?;
            let model = canonical_deserialize(&hex::decode(&wire.model)?)?;
            Ok(Message::Task(EvalTask {
                round_id: wire.round_id,
                model: Arc::new(model),
                model_digest: decode_digest(&wire.model_digest)?,
                threshold: FixedLoss::from_raw(wire.threshold),
                nonce: wire.nonce,
            }))
        }
        MSG_PROOF_SUBMISSION => {
            let wire: SubmissionWire = serde_json::from_slice(payload)?;
            Ok(Message::Submission(ProofSubmission {
                round_id: wire.round_id,
                client_id: wire.client_id,
                public_inputs: ThresholdPublics {
                    digest_lo: wire.digest_lo,
                    digest_hi: wire.digest_hi,
                    threshold: FixedLoss::from_raw(wire.threshold),
                    nonce: wire.nonce,
                },
                proof: Proof::from_wire_bytes(&hex::decode(&wire.proof)?)?,
            }))
        }
        MSG_DECLINE => {
            let wire: DeclineWire = serde_json::from_slice(payload)?;
            Ok(Message::Decline(DeclineNotice {
                round_id: wire.round_id,
                client_id: wire.client_id,
            }))
        }
        MSG_ROUND_RESULT => {
            let wire: ResultWire = serde_json::from_slice(payload)?;
            Ok(Message::Result(RoundResult {
                round_id: wire.round_id,
                valid_count: wire.valid_count,
                decline_count: wire.decline_count,
                reject_count: wire.reject_count,
                participants: wire.participants,
                validation_rate: wire.validation_rate,
            }))
        }
        other => Err(WireError::UnknownType(other)),
    }
}

/// Frames a message: 4-byte big-endian length (covering the type byte and
/// payload), the type byte, then the canonical JSON payload.
pub fn encode_frame(message: &Message) -> Vec<u8> {
    let (type_byte, payload) = message_payload(message);
    let len = (1 + payload.len()) as u32;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_be_bytes());
    out.push(type_byte);
    out.extend_from_slice(&payload);
    out
}

/// Parses one complete frame, returning the message and bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "incomplete frame header",
        )));
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if len == 0 {
        return Err(WireError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::Oversized(len));
    }
    let end = 4 + len as usize;
    if bytes.len() < end {
        return Err(WireError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "incomplete frame body",
        )));
    }
    let message = decode_payload(bytes[4], &bytes[5..end])?;
    Ok((message, end))
}

/// Writes one framed message to a stream.
pub fn write_frame(writer: &mut impl Write, message: &Message) -> Result<(), WireError> {
    writer.write_all(&encode_frame(message))?;
    writer.flush()?;
    Ok(())
}

/// Reads one framed message from a stream.
pub fn read_frame(reader: &mut impl Read) -> Result<Message, WireError> {
    let mut header = [0u8; 4];
    reader.read_exact(&mut header)?;
    let len = u32::from_be_bytes(header);
    if len == 0 {
        return Err(WireError::Empty);
    }
    if len > MAX_FRAME_LEN {
        return Err(WireError::Oversized(len));
    }
    let mut body = vec![0u8; len as usize];
    reader.read_exact(&mut body)?;
    decode_payload(body[0], &body[1..])
}

/// Wire size in bytes of a framed client response — the "submission size"
/// metric, identical whether the round ran in-process or over TCP.
pub fn response_wire_size(response: &ClientResponse) -> usize {
    let message = match response {
        ClientResponse::Submission(sub) => Message::Submission(sub.clone()),
        ClientResponse::Decline(decline) => Message::Decline(*decline),
    };
    encode_frame(&message).len()
}
