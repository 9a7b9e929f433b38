//! Rank-1 constraint systems and the loss-threshold circuit.
//!
//! A constraint system is a list of rows `<A,z> * <B,z> = <C,z>` over a prime
//! field, where `z` is the assignment vector `[1, publics.., privates..]`.
//! Builders allocate all public variables before any private one so the
//! instance/witness split is a single index boundary, which every downstream
//! proof system assumes.
//!
//! The one circuit the protocol needs proves `loss < threshold` for 32-bit
//! fixed-point values while binding the statement to the model digest and the
//! round nonce. Strictly-less is expressed by bit-decomposing the slack
//! `threshold - loss - 1`: the decomposition only exists when the slack is a
//! non-negative 32-bit integer, which over a field of size at least `2^250`
//! is equivalent to `loss < threshold`.

use crate::fixedpoint::FixedLoss;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Field operations a circuit needs: ring arithmetic plus a canonical byte
/// encoding. Kept deliberately smaller than a full prime-field trait so test
/// fields (big-integer arithmetic modulo an arbitrary prime) implement it in
/// a few lines. Soundness of the comparison gadgets additionally requires
/// the field modulus to exceed `2^250`.
pub trait CircuitField:
    Clone + PartialEq + Eq + std::fmt::Debug + Send + Sync + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_u64(value: u64) -> Self;
    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    fn neg(&self) -> Self;

    /// Canonical little-endian encoding of the reduced representative,
    /// padded to 32 bytes. Equal field elements must encode identically.
    fn to_canonical_bytes(&self) -> [u8; 32];

    fn from_u128(value: u128) -> Self {
        let two32 = Self::from_u64(1 << 32);
        let two64 = two32.mul(&two32);
        let hi = Self::from_u64((value >> 64) as u64);
        let lo = Self::from_u64(value as u64);
        hi.mul(&two64).add(&lo)
    }

    fn is_zero(&self) -> bool {
        *self == Self::zero()
    }
}

/// Index into the assignment vector. Index 0 is the constant one; public
/// variables follow, then private ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variable(usize);

impl Variable {
    /// The constant-one variable present in every system.
    pub const ONE: Variable = Variable(0);

    pub fn index(&self) -> usize {
        self.0
    }
}

/// Sparse linear form `sum(coeff_i * var_i)`.
#[derive(Clone, Debug)]
pub struct LinearCombination<F> {
    terms: Vec<(Variable, F)>,
}

impl<F: CircuitField> LinearCombination<F> {
    pub fn zero() -> Self {
        LinearCombination { terms: Vec::new() }
    }

    pub fn from_var(var: Variable) -> Self {
        LinearCombination {
            terms: vec![(var, F::one())],
        }
    }

    pub fn constant(value: F) -> Self {
        LinearCombination {
            terms: vec![(Variable::ONE, value)],
        }
    }

    /// Adds `coeff * var` and returns the extended combination.
    pub fn term(mut self, var: Variable, coeff: F) -> Self {
        self.terms.push((var, coeff));
        self
    }

    pub fn terms(&self) -> &[(Variable, F)] {
        &self.terms
    }

    /// Terms sorted by variable index with duplicates merged and zero
    /// coefficients dropped — the canonical order used for serialization.
    pub fn normalized_terms(&self) -> Vec<(Variable, F)> {
        let mut sorted = self.terms.clone();
        sorted.sort_by_key(|(v, _)| v.index());
        let mut merged: Vec<(Variable, F)> = Vec::with_capacity(sorted.len());
        for (var, coeff) in sorted {
            match merged.last_mut() {
                Some((last_var, last_coeff)) if *last_var == var => {
                    *last_coeff = last_coeff.add(&coeff);
                }
                _ => merged.push((var, coeff)),
            }
        }
        merged.retain(|(_, c)| !c.is_zero());
        merged
    }

    /// Evaluates the form against a full assignment vector `z`.
    pub fn evaluate(&self, z: &[F]) -> F {
        self.terms
            .iter()
            .fold(F::zero(), |acc, (var, coeff)| {
                acc.add(&coeff.mul(&z[var.index()]))
            })
    }

    fn max_index(&self) -> usize {
        self.terms.iter().map(|(v, _)| v.index()).max().unwrap_or(0)
    }
}

/// Construction-time failures.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("public variables must be allocated before any private variable")]
    PublicAfterPrivate,
    #[error("constraint references variable {index}, but only {available} variables exist")]
    UnknownVariable { index: usize, available: usize },
}

/// An assignment that does not match the system's shape.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum AssignmentError {
    #[error("expected {expected} public values, got {got}")]
    PublicLen { expected: usize, got: usize },
    #[error("expected {expected} private values, got {got}")]
    PrivateLen { expected: usize, got: usize },
}

/// Failures while decoding a serialized constraint system.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("serialized constraint system is truncated")]
    Truncated,
    #[error("serialized constraint system has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("term references variable {index}, but the system declares {available}")]
    VariableOutOfRange { index: usize, available: usize },
}

/// Witness-construction failures for the threshold circuit.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WitnessError {
    /// The honest-prover refusal signal: the statement is simply false.
    #[error("loss {loss} is not strictly below threshold {threshold}; no witness exists")]
    LossNotBelowThreshold { loss: u32, threshold: u32 },
    #[error("slack {slack} does not fit in {width} bits")]
    SlackTooWide { slack: u64, width: usize },
}

/// Values for every variable except the constant one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment<F> {
    pub publics: Vec<F>,
    pub privates: Vec<F>,
}

impl<F: CircuitField> Assignment<F> {
    /// The full assignment vector `[1, publics.., privates..]`.
    pub fn to_z(&self) -> Vec<F> {
        let mut z = Vec::with_capacity(1 + self.publics.len() + self.privates.len());
        z.push(F::one());
        z.extend(self.publics.iter().cloned());
        z.extend(self.privates.iter().cloned());
        z
    }
}

/// A rank-1 constraint system under construction or ready for proving.
#[derive(Clone, Debug)]
pub struct ConstraintSystem<F> {
    num_public: usize,
    num_private: usize,
    constraints: Vec<(LinearCombination<F>, LinearCombination<F>, LinearCombination<F>)>,
}

impl<F: CircuitField> Default for ConstraintSystem<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: CircuitField> ConstraintSystem<F> {
    pub fn new() -> Self {
        ConstraintSystem {
            num_public: 0,
            num_private: 0,
            constraints: Vec::new(),
        }
    }

    /// Allocates the next public (instance) variable. Fails once any private
    /// variable exists, keeping instance indices contiguous.
    pub fn alloc_public(&mut self) -> Result<Variable, BuildError> {
        if self.num_private > 0 {
            return Err(BuildError::PublicAfterPrivate);
        }
        self.num_public += 1;
        Ok(Variable(self.num_public))
    }

    /// Allocates the next private (witness) variable.
    pub fn alloc_private(&mut self) -> Variable {
        self.num_private += 1;
        Variable(self.num_public + self.num_private)
    }

    /// Appends the row `a * b = c`.
    pub fn enforce(
        &mut self,
        a: LinearCombination<F>,
        b: LinearCombination<F>,
        c: LinearCombination<F>,
    ) -> Result<(), BuildError> {
        let available = self.num_variables();
        for lc in [&a, &b, &c] {
            let max = lc.max_index();
            if max >= available {
                return Err(BuildError::UnknownVariable {
                    index: max,
                    available,
                });
            }
        }
        self.constraints.push((a, b, c));
        Ok(())
    }

    /// Total variable count including the constant one.
    pub fn num_variables(&self) -> usize {
        1 + self.num_public + self.num_private
    }

    pub fn num_public(&self) -> usize {
        self.num_public
    }

    pub fn num_private(&self) -> usize {
        self.num_private
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn constraints(
        &self,
    ) -> &[(LinearCombination<F>, LinearCombination<F>, LinearCombination<F>)] {
        &self.constraints
    }

    /// Checks every row against the assignment.
    pub fn is_satisfied(&self, assignment: &Assignment<F>) -> Result<bool, AssignmentError> {
        if assignment.publics.len() != self.num_public {
            return Err(AssignmentError::PublicLen {
                expected: self.num_public,
                got: assignment.publics.len(),
            });
        }
        if assignment.privates.len() != self.num_private {
            return Err(AssignmentError::PrivateLen {
                expected: self.num_private,
                got: assignment.privates.len(),
            });
        }
        let z = assignment.to_z();
        Ok(self.constraints.iter().all(|(a, b, c)| {
            a.evaluate(&z).mul(&b.evaluate(&z)) == c.evaluate(&z)
        }))
    }

    /// Deterministic byte encoding: variable counts, then each row's three
    /// linear forms with terms in canonical order. Two systems with the same
    /// logical content always serialize identically, so the SHA-256 of this
    /// encoding identifies the circuit (and keys the proving-key cache).
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.num_public as u32).to_be_bytes());
        out.extend_from_slice(&(self.num_private as u32).to_be_bytes());
        out.extend_from_slice(&(self.constraints.len() as u32).to_be_bytes());
        for (a, b, c) in &self.constraints {
            for lc in [a, b, c] {
                let terms = lc.normalized_terms();
                out.extend_from_slice(&(terms.len() as u32).to_be_bytes());
                for (var, coeff) in terms {
                    out.extend_from_slice(&(var.index() as u32).to_be_bytes());
                    out.extend_from_slice(&coeff.to_canonical_bytes());
                }
            }
        }
        out
    }

    /// SHA-256 of [`Self::canonical_bytes`].
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_bytes());
        hasher.finalize().into()
    }

    /// Inverse of [`Self::canonical_bytes`]. Field elements are decoded with
    /// [`CircuitField::from_u128`] folding over 32 little-endian bytes, so
    /// the caller's field must match the serializer's.
    pub fn from_canonical_bytes(
        bytes: &[u8],
        decode_field: impl Fn(&[u8; 32]) -> F,
    ) -> Result<Self, DecodeError> {
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<&[u8], DecodeError> {
            if cursor + n > bytes.len() {
                return Err(DecodeError::Truncated);
            }
            let slice = &bytes[cursor..cursor + n];
            cursor += n;
            Ok(slice)
        };
        let read_u32 = |slice: &[u8]| u32::from_be_bytes(slice.try_into().unwrap()) as usize;

        let num_public = read_u32(take(4)?);
        let num_private = read_u32(take(4)?);
        let num_constraints = read_u32(take(4)?);
        let available = 1 + num_public + num_private;

        let mut constraints = Vec::with_capacity(num_constraints);
        for _ in 0..num_constraints {
            let mut lcs = Vec::with_capacity(3);
            for _ in 0..3 {
                let term_count = read_u32(take(4)?);
                let mut terms = Vec::with_capacity(term_count);
                for _ in 0..term_count {
                    let index = read_u32(take(4)?);
                    if index >= available {
                        return Err(DecodeError::VariableOutOfRange { index, available });
                    }
                    let coeff_bytes: [u8; 32] = take(32)?.try_into().unwrap();
                    terms.push((Variable(index), decode_field(&coeff_bytes)));
                }
                lcs.push(LinearCombination { terms });
            }
            let c = lcs.pop().unwrap();
            let b = lcs.pop().unwrap();
            let a = lcs.pop().unwrap();
            constraints.push((a, b, c));
        }
        if cursor != bytes.len() {
            return Err(DecodeError::TrailingBytes(bytes.len() - cursor));
        }
        Ok(ConstraintSystem {
            num_public,
            num_private,
            constraints,
        })
    }
}

/// Decodes 32 canonical little-endian bytes into a field element by folding
/// 128-bit halves — the counterpart of [`CircuitField::to_canonical_bytes`]
/// for values produced by the same field.
pub fn field_from_canonical_bytes<F: CircuitField>(bytes: &[u8; 32]) -> F {
    let lo = u128::from_le_bytes(bytes[..16].try_into().unwrap());
    let hi = u128::from_le_bytes(bytes[16..].try_into().unwrap());
    let two64 = F::from_u64(1 << 32).mul(&F::from_u64(1 << 32));
    let two128 = two64.mul(&two64);
    F::from_u128(hi).mul(&two128).add(&F::from_u128(lo))
}

/// Variable handles produced by [`assert_strict_less`], so witness builders
/// can fill the auxiliary values.
#[derive(Clone, Debug)]
pub struct StrictLessVars {
    /// Holds `b - a - 1` in an honest witness. The packing row pins the bit
    /// variables directly to that difference, so this variable carries the
    /// decomposed quantity for witness construction and inspection rather
    /// than appearing in a constraint of its own.
    pub slack: Variable,
    /// Little-endian bits of the slack.
    pub bits: Vec<Variable>,
}

/// Constrains each variable in `bits` to be 0 or 1 and their little-endian
/// packing to equal `target`: `n` booleanity rows plus one packing row.
pub fn bit_decompose_into<F: CircuitField>(
    cs: &mut ConstraintSystem<F>,
    target: LinearCombination<F>,
    width: usize,
) -> Result<Vec<Variable>, BuildError> {
    let bits: Vec<Variable> = (0..width).map(|_| cs.alloc_private()).collect();
    for &bit in &bits {
        // b * b = b forces b in {0, 1}.
        cs.enforce(
            LinearCombination::from_var(bit),
            LinearCombination::from_var(bit),
            LinearCombination::from_var(bit),
        )?;
    }
    let mut packed = LinearCombination::zero();
    let mut power = F::one();
    for &bit in &bits {
        packed = packed.term(bit, power.clone());
        power = power.add(&power);
    }
    cs.enforce(packed, LinearCombination::from_var(Variable::ONE), target)?;
    Ok(bits)
}

/// Appends a strict `a < b` gadget for values known to fit in `width` bits.
///
/// Allocates `width + 1` private variables (slack plus its bits) and adds
/// `width + 1` rows: booleanity for each bit and one packing row equating
/// the bits directly with `b - a - 1`. The decomposition exists exactly when
/// `b - a - 1` is an integer in `[0, 2^width)`; for a field larger than
/// `2^250` and inputs below `2^width`, that is equivalent to `a < b`.
pub fn assert_strict_less<F: CircuitField>(
    cs: &mut ConstraintSystem<F>,
    a: Variable,
    b: Variable,
    width: usize,
) -> Result<StrictLessVars, BuildError> {
    let slack = cs.alloc_private();
    let difference = LinearCombination::from_var(b)
        .term(a, F::one().neg())
        .term(Variable::ONE, F::one().neg());
    let bits = bit_decompose_into(cs, difference, width)?;
    Ok(StrictLessVars { slack, bits })
}

/// Comparison width for fixed-point losses: raw values are `u32`.
pub const LOSS_BIT_WIDTH: usize = 32;

/// The statement a client proves: "my loss, under the model identified by
/// this digest and for this round nonce, is strictly below the threshold".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThresholdPublics {
    /// Low 128 bits of the model digest.
    pub digest_lo: u128,
    /// High 128 bits of the model digest.
    pub digest_hi: u128,
    /// Fixed-point loss threshold.
    pub threshold: FixedLoss,
    /// Round nonce issued by the server.
    pub nonce: u128,
}

impl ThresholdPublics {
    /// Field encoding in the circuit's fixed instance order:
    /// `[digest_lo, digest_hi, threshold, nonce]`.
    pub fn to_field_elements<F: CircuitField>(&self) -> Vec<F> {
        vec![
            F::from_u128(self.digest_lo),
            F::from_u128(self.digest_hi),
            F::from_u64(self.threshold.raw() as u64),
            F::from_u128(self.nonce),
        ]
    }

    /// Deterministic byte image, used to compare submissions for equality
    /// without touching field types: digest_lo, digest_hi, threshold raw,
    /// nonce, each big-endian.
    pub fn canonical_bytes(&self) -> [u8; 52] {
        let mut out = [0u8; 52];
        out[..16].copy_from_slice(&self.digest_lo.to_be_bytes());
        out[16..32].copy_from_slice(&self.digest_hi.to_be_bytes());
        out[32..36].copy_from_slice(&self.threshold.raw().to_be_bytes());
        out[36..].copy_from_slice(&self.nonce.to_be_bytes());
        out
    }
}

/// The compiled threshold circuit with handles to every variable.
#[derive(Clone, Debug)]
pub struct ThresholdCircuit<F> {
    pub cs: ConstraintSystem<F>,
    pub digest_lo: Variable,
    pub digest_hi: Variable,
    pub threshold: Variable,
    pub nonce: Variable,
    pub loss: Variable,
    pub less: StrictLessVars,
    pub width: usize,
}

/// Builds the threshold circuit at the protocol's 32-bit comparison width.
///
/// Instance variables, in order: digest_lo, digest_hi, threshold, nonce.
/// Witness variables: loss, then the strict-less slack and its 32 bits.
/// Rows: one binding `v * 1 = v` per instance variable (anchoring each
/// public input into the proof), 32 booleanity rows, and the packing row —
/// 37 in total. This layout is load-bearing: serialized keys and cached
/// setups identify the circuit by the digest of exactly this encoding.
pub fn synthesize_threshold_circuit<F: CircuitField>() -> ThresholdCircuit<F> {
    synthesize_threshold_circuit_with_width(LOSS_BIT_WIDTH)
}

/// Width-parameterized variant used by tests and size/timing probes. The
/// protocol itself always uses [`LOSS_BIT_WIDTH`].
pub fn synthesize_threshold_circuit_with_width<F: CircuitField>(
    width: usize,
) -> ThresholdCircuit<F> {
    let mut cs = ConstraintSystem::new();
    let digest_lo = cs.alloc_public().expect("first allocation is public");
    let digest_hi = cs.alloc_public().expect("no private variables yet");
    let threshold = cs.alloc_public().expect("no private variables yet");
    let nonce = cs.alloc_public().expect("no private variables yet");
    let loss = cs.alloc_private();

    for v in [digest_lo, digest_hi, threshold, nonce] {
        cs.enforce(
            LinearCombination::from_var(v),
            LinearCombination::from_var(Variable::ONE),
            LinearCombination::from_var(v),
        )
        .expect("binding rows reference allocated variables");
    }
    let less = assert_strict_less(&mut cs, loss, threshold, width)
        .expect("gadget references allocated variables");

    ThresholdCircuit {
        cs,
        digest_lo,
        digest_hi,
        threshold,
        nonce,
        loss,
        less,
        width,
    }
}

impl<F: CircuitField> ThresholdCircuit<F> {
    /// Builds the full assignment for honest public inputs and a private
    /// loss. Refuses when the statement is false — this is the signal an
    /// honest client turns into a decline.
    pub fn build_assignment(
        &self,
        publics: &ThresholdPublics,
        loss: FixedLoss,
    ) -> Result<Assignment<F>, WitnessError> {
        let threshold_raw = publics.threshold.raw();
        if loss.raw() >= threshold_raw {
            return Err(WitnessError::LossNotBelowThreshold {
                loss: loss.raw(),
                threshold: threshold_raw,
            });
        }
        let slack = threshold_raw as u64 - loss.raw() as u64 - 1;
        if self.width < 64 && slack >> self.width != 0 {
            return Err(WitnessError::SlackTooWide {
                slack,
                width: self.width,
            });
        }
        let mut privates = Vec::with_capacity(2 + self.width);
        privates.push(F::from_u64(loss.raw() as u64));
        privates.push(F::from_u64(slack));
        for i in 0..self.width {
            privates.push(F::from_u64((slack >> i) & 1));
        }
        Ok(Assignment {
            publics: publics.to_field_elements(),
            privates,
        })
    }
}
