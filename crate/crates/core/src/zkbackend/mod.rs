//! Proof backends for constraint-system statements.
//!
//! Two interchangeable backends sit behind [`ProofBackend`]:
//!
//! - [`Groth16Backend`]: a Groth16 SNARK over BLS12-381 with constant
//!   192-byte proofs and millisecond pairing-based verification. Field and
//!   curve arithmetic come from the audited `bls12_381` crate; the protocol
//!   layers (QAP construction, key generation, proving, verification) live
//!   in this module.
//! - [`MockBackend`]: a transparent stand-in that ships the witness itself
//!   (plus a binding commitment) and re-executes the constraint system. It
//!   provides zero secrecy and exists so protocol logic can be exercised
//!   without pairing costs; constructing it under a production policy fails.
//!
//! Proving and verifying keys serialize with a fixed 16-byte header —
//! magic `ZKFE`, format version, backend id, and a circuit-digest prefix —
//! so cached key files are self-describing and mismatches are caught before
//! any group element is parsed.

mod groth16;
mod keycache;

pub use keycache::KeyCache;

use crate::r1cs::{
    field_from_canonical_bytes, Assignment, AssignmentError, CircuitField, ConstraintSystem,
};
use bls12_381::Scalar;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The scalar field proofs are stated over.
pub type BackendField = Scalar;

impl CircuitField for Scalar {
    fn zero() -> Self {
        <Scalar as ff::Field>::ZERO
    }

    fn one() -> Self {
        <Scalar as ff::Field>::ONE
    }

    fn from_u64(value: u64) -> Self {
        Scalar::from(value)
    }

    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }

    fn sub(&self, rhs: &Self) -> Self {
        self - rhs
    }

    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }

    fn neg(&self) -> Self {
        -self
    }

    fn to_canonical_bytes(&self) -> [u8; 32] {
        self.to_bytes()
    }
}

/// Identifies a proof system on the wire and in key files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackendId {
    Groth16Bls12381 = 1,
    Mock = 2,
}

impl BackendId {
    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(byte: u8) -> Option<BackendId> {
        match byte {
            1 => Some(BackendId::Groth16Bls12381),
            2 => Some(BackendId::Mock),
            _ => None,
        }
    }

    /// Whether proofs from this backend hide the witness.
    pub fn is_hiding(self) -> bool {
        matches!(self, BackendId::Groth16Bls12381)
    }
}

/// Where a configuration is allowed to cut cryptographic corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SecurityPolicy {
    /// Real deployments: only hiding backends may be constructed.
    Production,
    /// Tests and benchmarks: anything goes.
    Testing,
}

/// Backend failures. `Unsatisfiable` is the honest-prover refusal: the
/// statement is false and no proof will be attempted.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("assignment does not satisfy the constraint system; refusing to prove")]
    Unsatisfiable,
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error("key belongs to circuit {expected}, but circuit {got} was requested")]
    KeyMismatch { expected: String, got: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed key material: {0}")]
    KeyDecode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A serialized proof plus the backend that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Proof {
    backend: BackendId,
    payload: Vec<u8>,
}

/// Failures while decoding a proof from its wire bytes.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProofDecodeError {
    #[error("proof wire bytes are empty")]
    Empty,
    #[error("unknown backend id byte {0:#04x}")]
    UnknownBackend(u8),
}

impl Proof {
    pub fn new(backend: BackendId, payload: Vec<u8>) -> Self {
        Proof { backend, payload }
    }

    pub fn backend(&self) -> BackendId {
        self.backend
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Wire encoding: one backend id byte, then the backend's payload.
    pub fn wire_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + self.payload.len());
        out.push(self.backend.to_byte());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parses wire bytes. Only the backend id byte is validated here; the
    /// payload is judged by [`ProofBackend::verify`], which treats any
    /// malformed payload as an invalid proof rather than an error.
    pub fn from_wire_bytes(bytes: &[u8]) -> Result<Proof, ProofDecodeError> {
        let (&id, payload) = bytes.split_first().ok_or(ProofDecodeError::Empty)?;
        let backend = BackendId::from_byte(id).ok_or(ProofDecodeError::UnknownBackend(id))?;
        Ok(Proof {
            backend,
            payload: payload.to_vec(),
        })
    }

    /// Total wire size in bytes (id byte included).
    pub fn size_bytes(&self) -> usize {
        1 + self.payload.len()
    }
}

/// Wire size of a proof in bytes.
pub fn proof_size(proof: &Proof) -> usize {
    proof.size_bytes()
}

const KEY_MAGIC: &[u8; 4] = b"ZKFE";
const KEY_FORMAT_VERSION: u8 = 1;
const KEY_HEADER_LEN: usize = 16;

/// Material a client needs to produce proofs for one circuit.
pub struct ProvingKey {
    circuit_digest: [u8; 32],
    payload: PkPayload,
}

enum PkPayload {
    Groth16(Box<groth16::Groth16ProvingKey>),
    Mock(MockKey),
}

/// Material a server needs to check proofs for one circuit.
pub struct VerifyingKey {
    circuit_digest: [u8; 32],
    payload: VkPayload,
}

enum VkPayload {
    Groth16(groth16::Groth16VerifyingKey),
    Mock(MockKey),
}

#[derive(Clone)]
struct MockKey {
    cs_bytes: Vec<u8>,
}

impl ProvingKey {
    pub fn backend(&self) -> BackendId {
        match self.payload {
            PkPayload::Groth16(_) => BackendId::Groth16Bls12381,
            PkPayload::Mock(_) => BackendId::Mock,
        }
    }

    pub fn circuit_digest(&self) -> [u8; 32] {
        self.circuit_digest
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = key_header(self.backend(), &self.circuit_digest);
        out.extend_from_slice(&self.circuit_digest);
        match &self.payload {
            PkPayload::Groth16(pk) => pk.write(&mut out),
            PkPayload::Mock(key) => write_len_prefixed(&mut out, &key.cs_bytes),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ProvingKey, BackendError> {
        let (backend, digest, rest) = parse_key_envelope(bytes)?;
        let payload = match backend {
            BackendId::Groth16Bls12381 => {
                PkPayload::Groth16(Box::new(groth16::Groth16ProvingKey::read(rest)?))
            }
            BackendId::Mock => PkPayload::Mock(read_mock_key(rest)?),
        };
        let key = ProvingKey {
            circuit_digest: digest,
            payload,
        };
        key.check_embedded_digest()?;
        Ok(key)
    }

    /// Cross-checks the stored digest against the circuit actually embedded
    /// in the key, so a corrupted or spliced file cannot masquerade as a
    /// different circuit's key.
    fn check_embedded_digest(&self) -> Result<(), BackendError> {
        let embedded: [u8; 32] = match &self.payload {
            PkPayload::Groth16(pk) => pk.cs.digest(),
            PkPayload::Mock(key) => Sha256::digest(&key.cs_bytes).into(),
        };
        if embedded != self.circuit_digest {
            return Err(BackendError::KeyMismatch {
                expected: hex::encode(self.circuit_digest),
                got: hex::encode(embedded),
            });
        }
        Ok(())
    }
}

impl VerifyingKey {
    pub fn backend(&self) -> BackendId {
        match self.payload {
            VkPayload::Groth16(_) => BackendId::Groth16Bls12381,
            VkPayload::Mock(_) => BackendId::Mock,
        }
    }

    pub fn circuit_digest(&self) -> [u8; 32] {
        self.circuit_digest
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = key_header(self.backend(), &self.circuit_digest);
        out.extend_from_slice(&self.circuit_digest);
        match &self.payload {
            VkPayload::Groth16(vk) => vk.write(&mut out),
            VkPayload::Mock(key) => write_len_prefixed(&mut out, &key.cs_bytes),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<VerifyingKey, BackendError> {
        let (backend, digest, rest) = parse_key_envelope(bytes)?;
        let payload = match backend {
            BackendId::Groth16Bls12381 => {
                VkPayload::Groth16(groth16::Groth16VerifyingKey::read(rest)?)
            }
            BackendId::Mock => {
                let key = read_mock_key(rest)?;
                let embedded: [u8; 32] = Sha256::digest(&key.cs_bytes).into();
                if embedded != digest {
                    return Err(BackendError::KeyMismatch {
                        expected: hex::encode(digest),
                        got: hex::encode(embedded),
                    });
                }
                VkPayload::Mock(key)
            }
        };
        Ok(VerifyingKey {
            circuit_digest: digest,
            payload,
        })
    }
}

fn key_header(backend: BackendId, digest: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(KEY_HEADER_LEN);
    out.extend_from_slice(KEY_MAGIC);
    out.push(KEY_FORMAT_VERSION);
    out.push(backend.to_byte());
    out.extend_from_slice(&digest[..10]);
    out
}

fn parse_key_envelope(bytes: &[u8]) -> Result<(BackendId, [u8; 32], &[u8]), BackendError> {
    if bytes.len() < KEY_HEADER_LEN + 32 {
        return Err(BackendError::KeyDecode("file shorter than header".into()));
    }
    if &bytes[..4] != KEY_MAGIC {
        return Err(BackendError::KeyDecode("bad magic".into()));
    }
    if bytes[4] != KEY_FORMAT_VERSION {
        return Err(BackendError::KeyDecode(format!(
            "unsupported format version {}",
            bytes[4]
        )));
    }
    let backend = BackendId::from_byte(bytes[5])
        .ok_or_else(|| BackendError::KeyDecode(format!("unknown backend id {}", bytes[5])))?;
    let prefix = &bytes[6..KEY_HEADER_LEN];
    let digest: [u8; 32] = bytes[KEY_HEADER_LEN..KEY_HEADER_LEN + 32]
        .try_into()
        .unwrap();
    if prefix != &digest[..10] {
        return Err(BackendError::KeyDecode(
            "header digest prefix disagrees with stored digest".into(),
        ));
    }
    Ok((backend, digest, &bytes[KEY_HEADER_LEN + 32..]))
}

fn write_len_prefixed(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
    out.extend_from_slice(bytes);
}

fn read_mock_key(bytes: &[u8]) -> Result<MockKey, BackendError> {
    let mut reader = ByteReader::new(bytes);
    let cs_bytes = reader.take_len_prefixed()?.to_vec();
    reader.finish()?;
    Ok(MockKey { cs_bytes })
}

/// Cursor over key bytes with truncation-safe reads.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], BackendError> {
        if self.pos + n > self.bytes.len() {
            return Err(BackendError::KeyDecode("truncated".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn take_u32(&mut self) -> Result<u32, BackendError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn take_len_prefixed(&mut self) -> Result<&'a [u8], BackendError> {
        let len = u64::from_be_bytes(self.take(8)?.try_into().unwrap());
        let len = usize::try_from(len)
            .map_err(|_| BackendError::KeyDecode("length overflows usize".into()))?;
        self.take(len)
    }

    pub(crate) fn finish(&self) -> Result<(), BackendError> {
        if self.pos != self.bytes.len() {
            return Err(BackendError::KeyDecode(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// A zero-knowledge (or mock) proof system over [`BackendField`].
///
/// Contract highlights:
/// - `prove` refuses an unsatisfying assignment with
///   [`BackendError::Unsatisfiable`] instead of emitting a doomed proof.
/// - `verify` is total: malformed proof bytes, wrong-length instances, and
///   invalid group encodings all return `false` and never panic.
pub trait ProofBackend: Send + Sync {
    fn id(&self) -> BackendId;

    fn setup(
        &self,
        cs: &ConstraintSystem<BackendField>,
        rng: &mut dyn RngCore,
    ) -> Result<(ProvingKey, VerifyingKey), BackendError>;

    fn prove(
        &self,
        pk: &ProvingKey,
        assignment: &Assignment<BackendField>,
        rng: &mut dyn RngCore,
    ) -> Result<Proof, BackendError>;

    fn verify(&self, vk: &VerifyingKey, publics: &[BackendField], proof: &Proof) -> bool;
}

/// Constructs the backend for an id under a security policy. Non-hiding
/// backends are refused outright in production.
pub fn backend_for(
    id: BackendId,
    policy: SecurityPolicy,
) -> Result<Box<dyn ProofBackend>, BackendError> {
    match id {
        BackendId::Groth16Bls12381 => Ok(Box::new(Groth16Backend)),
        BackendId::Mock => Ok(Box::new(MockBackend::new(policy)?)),
    }
}

/// Groth16 over BLS12-381: 192-byte proofs, pairing-based verification.
pub struct Groth16Backend;

impl ProofBackend for Groth16Backend {
    fn id(&self) -> BackendId {
        BackendId::Groth16Bls12381
    }

    fn setup(
        &self,
        cs: &ConstraintSystem<BackendField>,
        rng: &mut dyn RngCore,
    ) -> Result<(ProvingKey, VerifyingKey), BackendError> {
        let digest = cs.digest();
        let (pk, vk) = groth16::setup(cs, rng)?;
        Ok((
            ProvingKey {
                circuit_digest: digest,
                payload: PkPayload::Groth16(Box::new(pk)),
            },
            VerifyingKey {
                circuit_digest: digest,
                payload: VkPayload::Groth16(vk),
            },
        ))
    }

    fn prove(
        &self,
        pk: &ProvingKey,
        assignment: &Assignment<BackendField>,
        rng: &mut dyn RngCore,
    ) -> Result<Proof, BackendError> {
        let PkPayload::Groth16(inner) = &pk.payload else {
            return Err(BackendError::Config(
                "proving key belongs to a different backend".into(),
            ));
        };
        let payload = groth16::prove(inner, assignment, rng)?;
        Ok(Proof::new(BackendId::Groth16Bls12381, payload))
    }

    fn verify(&self, vk: &VerifyingKey, publics: &[BackendField], proof: &Proof) -> bool {
        let VkPayload::Groth16(inner) = &vk.payload else {
            return false;
        };
        if proof.backend() != BackendId::Groth16Bls12381 {
            return false;
        }
        groth16::verify(inner, publics, proof.payload())
    }
}

/// Transparent stand-in backend: the "proof" is a SHA-256 commitment to the
/// full assignment followed by every private value, and verification
/// re-executes the constraint system. No secrecy whatsoever.
#[derive(Debug)]
pub struct MockBackend {
    _private: (),
}

impl MockBackend {
    /// Fails under [`SecurityPolicy::Production`]: a backend that ships the
    /// witness must never reach a deployment that expects zero knowledge.
    pub fn new(policy: SecurityPolicy) -> Result<MockBackend, BackendError> {
        match policy {
            SecurityPolicy::Production => Err(BackendError::Config(
                "mock backend reveals the witness and is refused under a production policy"
                    .into(),
            )),
            SecurityPolicy::Testing => Ok(MockBackend { _private: () }),
        }
    }
}

fn mock_commitment(z: &[Scalar]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for value in z {
        hasher.update(value.to_bytes());
    }
    hasher.finalize().into()
}

impl ProofBackend for MockBackend {
    fn id(&self) -> BackendId {
        BackendId::Mock
    }

    fn setup(
        &self,
        cs: &ConstraintSystem<BackendField>,
        _rng: &mut dyn RngCore,
    ) -> Result<(ProvingKey, VerifyingKey), BackendError> {
        let key = MockKey {
            cs_bytes: cs.canonical_bytes(),
        };
        let digest = cs.digest();
        Ok((
            ProvingKey {
                circuit_digest: digest,
                payload: PkPayload::Mock(key.clone()),
            },
            VerifyingKey {
                circuit_digest: digest,
                payload: VkPayload::Mock(key),
            },
        ))
    }

    fn prove(
        &self,
        pk: &ProvingKey,
        assignment: &Assignment<BackendField>,
        _rng: &mut dyn RngCore,
    ) -> Result<Proof, BackendError> {
        let PkPayload::Mock(key) = &pk.payload else {
            return Err(BackendError::Config(
                "proving key belongs to a different backend".into(),
            ));
        };
        let cs = ConstraintSystem::<Scalar>::from_canonical_bytes(
            &key.cs_bytes,
            field_from_canonical_bytes,
        )
        .map_err(|e| BackendError::KeyDecode(e.to_string()))?;
        if !cs.is_satisfied(assignment)? {
            return Err(BackendError::Unsatisfiable);
        }
        let z = assignment.to_z();
        let mut payload = Vec::with_capacity(36 + 32 * assignment.privates.len());
        payload.extend_from_slice(&mock_commitment(&z));
        payload.extend_from_slice(&(assignment.privates.len() as u32).to_be_bytes());
        for value in &assignment.privates {
            payload.extend_from_slice(&value.to_bytes());
        }
        Ok(Proof::new(BackendId::Mock, payload))
    }

    fn verify(&self, vk: &VerifyingKey, publics: &[BackendField], proof: &Proof) -> bool {
        let VkPayload::Mock(key) = &vk.payload else {
            return false;
        };
        if proof.backend() != BackendId::Mock {
            return false;
        }
        let Ok(cs) = ConstraintSystem::<Scalar>::from_canonical_bytes(
            &key.cs_bytes,
            field_from_canonical_bytes,
        ) else {
            return false;
        };
        let payload = proof.payload();
        if payload.len() < 36 {
            return false;
        }
        let claimed_commitment = &payload[..32];
        let count = u32::from_be_bytes(payload[32..36].try_into().unwrap()) as usize;
        if count != cs.num_private() || payload.len() != 36 + 32 * count {
            return false;
        }
        let mut privates = Vec::with_capacity(count);
        for chunk in payload[36..].chunks_exact(32) {
            let bytes: [u8; 32] = chunk.try_into().unwrap();
            let Some(value) = Option::<Scalar>::from(Scalar::from_bytes(&bytes)) else {
                return false;
            };
            privates.push(value);
        }
        let assignment = Assignment {
            publics: publics.to_vec(),
            privates,
        };
        if cs.is_satisfied(&assignment) != Ok(true) {
            return false;
        }
        mock_commitment(&assignment.to_z()) == claimed_commitment
    }
}
