//! Groth16 proving system over BLS12-381.
//!
//! The constraint system is compiled to a quadratic arithmetic program by
//! evaluating each row's Lagrange basis polynomial at a toxic point τ over a
//! radix-2 evaluation domain. Proofs are the classic three group elements
//! (A in G1, B in G2, C in G1), serialized compressed: 48 + 96 + 48 = 192
//! bytes, independent of witness and instance. Verification is one
//! four-term multi-Miller loop plus a final exponentiation.
//!
//! Sizes here are tiny (tens of constraints), so multiscalar products are
//! computed term by term with the curve library's constant-time scalar
//! multiplication, and the quotient polynomial comes from a single coset
//! FFT of the domain size.

use super::{BackendError, ByteReader};
use crate::r1cs::{field_from_canonical_bytes, Assignment, ConstraintSystem};
use bls12_381::{
    multi_miller_loop, G1Affine, G1Projective, G2Affine, G2Prepared, G2Projective, Gt, Scalar,
};
use ff::{Field, PrimeField};

use rand::RngCore;

/// Compressed A (48) + B (96) + C (48).
pub(super) const PROOF_LEN: usize = 192;

pub(super) struct Groth16ProvingKey {
    /// The circuit itself: the prover re-checks satisfaction and evaluates
    /// the constraint rows to build the quotient polynomial.
    pub cs: ConstraintSystem<Scalar>,
    pub alpha_g1: G1Affine,
    pub beta_g1: G1Affine,
    pub delta_g1: G1Affine,
    pub beta_g2: G2Affine,
    pub delta_g2: G2Affine,
    /// `[A_j(τ)]₁` per variable.
    pub a_query: Vec<G1Affine>,
    /// `[B_j(τ)]₁` per variable.
    pub b_g1_query: Vec<G1Affine>,
    /// `[B_j(τ)]₂` per variable.
    pub b_g2_query: Vec<G2Affine>,
    /// `[τ^k Z(τ)/δ]₁` for k below the quotient degree bound.
    pub h_query: Vec<G1Affine>,
    /// `[(β A_j(τ) + α B_j(τ) + C_j(τ))/δ]₁` per witness variable.
    pub l_query: Vec<G1Affine>,
}

pub(super) struct Groth16VerifyingKey {
    pub alpha_g1: G1Affine,
    pub beta_g2: G2Affine,
    pub gamma_g2: G2Affine,
    pub delta_g2: G2Affine,
    /// `[(β A_j(τ) + α B_j(τ) + C_j(τ))/γ]₁` for the constant one and each
    /// public variable, in instance order.
    pub ic: Vec<G1Affine>,
}

/// Radix-2 multiplicative subgroup of the scalar field, with the coset
/// shifted by the field's multiplicative generator for quotient division.
struct Domain {
    size: usize,
    omega: Scalar,
    omega_inv: Scalar,
    size_inv: Scalar,
    shift: Scalar,
    shift_inv: Scalar,
}

impl Domain {
    fn new(min_size: usize) -> Domain {
        let size = min_size.next_power_of_two().max(2);
        let log_size = size.trailing_zeros();
        assert!(
            log_size <= Scalar::S,
            "domain of size {size} exceeds the field's two-adicity"
        );
        // ROOT_OF_UNITY generates the order-2^S subgroup; raising it to
        // 2^(S - log) leaves an element of order exactly 2^log.
        let omega = Scalar::ROOT_OF_UNITY.pow_vartime(&[1u64 << (Scalar::S - log_size), 0, 0, 0]);
        Domain {
            size,
            omega,
            omega_inv: omega.invert().unwrap(),
            size_inv: Scalar::from(size as u64).invert().unwrap(),
            shift: Scalar::MULTIPLICATIVE_GENERATOR,
            shift_inv: Scalar::MULTIPLICATIVE_GENERATOR.invert().unwrap(),
        }
    }

    /// In-place radix-2 FFT: coefficients to evaluations over the subgroup
    /// when called with `omega`, the inverse transform (up to the 1/n
    /// scaling) with `omega_inv`.
    fn transform(values: &mut [Scalar], root: Scalar) {
        let n = values.len();
        if n <= 1 {
            return;
        }
        let log_n = n.trailing_zeros();
        for i in 0..n {
            let j = (i.reverse_bits() >> (usize::BITS - log_n)) & (n - 1);
            if i < j {
                values.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step_root = root.pow_vartime(&[(n / len) as u64, 0, 0, 0]);
            for start in (0..n).step_by(len) {
                let mut twiddle = Scalar::ONE;
                for k in start..start + len / 2 {
                    let even = values[k];
                    let odd = values[k + len / 2] * twiddle;
                    values[k] = even + odd;
                    values[k + len / 2] = even - odd;
                    twiddle *= step_root;
                }
            }
            len <<= 1;
        }
    }

    fn fft(&self, values: &mut [Scalar]) {
        Self::transform(values, self.omega);
    }

    fn ifft(&self, values: &mut [Scalar]) {
        Self::transform(values, self.omega_inv);
        for v in values.iter_mut() {
            *v *= self.size_inv;
        }
    }

    /// Coefficients to evaluations over the shifted coset `g·H`.
    fn coset_fft(&self, values: &mut [Scalar]) {
        let mut power = Scalar::ONE;
        for v in values.iter_mut() {
            *v *= power;
            power *= self.shift;
        }
        self.fft(values);
    }

    /// Inverse of [`Self::coset_fft`].
    fn coset_ifft(&self, values: &mut [Scalar]) {
        self.ifft(values);
        let mut power = Scalar::ONE;
        for v in values.iter_mut() {
            *v *= power;
            power *= self.shift_inv;
        }
    }

    /// `Z(x) = x^size - 1` evaluated on the coset is the same for every
    /// coset point: `g^size - 1`.
    fn coset_vanishing(&self) -> Scalar {
        self.shift.pow_vartime(&[self.size as u64, 0, 0, 0]) - Scalar::ONE
    }
}

fn sample_nonzero(rng: &mut dyn RngCore) -> Scalar {
    loop {
        let candidate = Scalar::random(&mut *rng);
        if !bool::from(candidate.is_zero()) {
            return candidate;
        }
    }
}

/// Inverts every element in place with a single field inversion
/// (Montgomery's trick). All inputs must be nonzero.
fn batch_invert(values: &mut [Scalar]) {
    let mut running = Scalar::ONE;
    let prefixes: Vec<Scalar> = values
        .iter()
        .map(|v| {
            let before = running;
            running *= v;
            before
        })
        .collect();
    let mut inverse = running.invert().expect("batch_invert requires nonzero inputs");
    for (value, prefix) in values.iter_mut().zip(prefixes).rev() {
        let original = *value;
        *value = inverse * prefix;
        inverse *= original;
    }
}

fn msm_g1(bases: &[G1Affine], scalars: &[Scalar]) -> G1Projective {
    debug_assert_eq!(bases.len(), scalars.len());
    bases
        .iter()
        .zip(scalars)
        .fold(G1Projective::identity(), |acc, (base, scalar)| {
            acc + base * scalar
        })
}

fn msm_g2(bases: &[G2Affine], scalars: &[Scalar]) -> G2Projective {
    debug_assert_eq!(bases.len(), scalars.len());
    bases
        .iter()
        .zip(scalars)
        .fold(G2Projective::identity(), |acc, (base, scalar)| {
            acc + base * scalar
        })
}

fn normalize_g1(points: Vec<G1Projective>) -> Vec<G1Affine> {
    let mut affine = vec![G1Affine::identity(); points.len()];
    G1Projective::batch_normalize(&points, &mut affine);
    affine
}

fn normalize_g2(points: Vec<G2Projective>) -> Vec<G2Affine> {
    let mut affine = vec![G2Affine::identity(); points.len()];
    G2Projective::batch_normalize(&points, &mut affine);
    affine
}

pub(super) fn setup(
    cs: &ConstraintSystem<Scalar>,
    rng: &mut dyn RngCore,
) -> Result<(Groth16ProvingKey, Groth16VerifyingKey), BackendError> {
    if cs.num_constraints() == 0 {
        return Err(BackendError::Config(
            "cannot run setup for an empty constraint system".into(),
        ));
    }
    let num_vars = cs.num_variables();
    let num_instance = 1 + cs.num_public();
    let domain = Domain::new(cs.num_constraints());

    // Toxic waste. τ must avoid the evaluation domain (Z(τ) = 0 would make
    // the key degenerate), which also rules out τ = 0.
    let (tau, z_tau) = loop {
        let candidate = sample_nonzero(rng);
        let vanishing = candidate.pow_vartime(&[domain.size as u64, 0, 0, 0]) - Scalar::ONE;
        if !bool::from(vanishing.is_zero()) {
            break (candidate, vanishing);
        }
    };
    let alpha = sample_nonzero(rng);
    let beta = sample_nonzero(rng);
    let gamma = sample_nonzero(rng);
    let delta = sample_nonzero(rng);
    let gamma_inv = gamma.invert().unwrap();
    let delta_inv = delta.invert().unwrap();

    // Lagrange basis at τ: L_i(τ) = Z(τ)·ω^i / (size·(τ - ω^i)).
    let mut omega_powers = Vec::with_capacity(domain.size);
    let mut power = Scalar::ONE;
    for _ in 0..domain.size {
        omega_powers.push(power);
        power *= domain.omega;
    }
    let mut denominators: Vec<Scalar> = omega_powers.iter().map(|w| tau - w).collect();
    batch_invert(&mut denominators);
    let z_over_size = z_tau * domain.size_inv;
    let lagrange: Vec<Scalar> = omega_powers
        .iter()
        .zip(&denominators)
        .map(|(w, d)| z_over_size * w * d)
        .collect();

    // Per-variable QAP evaluations A_j(τ), B_j(τ), C_j(τ).
    let mut a_eval = vec![Scalar::ZERO; num_vars];
    let mut b_eval = vec![Scalar::ZERO; num_vars];
    let mut c_eval = vec![Scalar::ZERO; num_vars];
    for (i, (a, b, c)) in cs.constraints().iter().enumerate() {
        for (var, coeff) in a.terms() {
            a_eval[var.index()] += coeff * lagrange[i];
        }
        for (var, coeff) in b.terms() {
            b_eval[var.index()] += coeff * lagrange[i];
        }
        for (var, coeff) in c.terms() {
            c_eval[var.index()] += coeff * lagrange[i];
        }
    }

    let g1 = G1Projective::generator();
    let g2 = G2Projective::generator();

    let a_query = normalize_g1(a_eval.iter().map(|e| g1 * e).collect());
    let b_g1_query = normalize_g1(b_eval.iter().map(|e| g1 * e).collect());
    let b_g2_query = normalize_g2(b_eval.iter().map(|e| g2 * e).collect());

    let combined = |j: usize| beta * a_eval[j] + alpha * b_eval[j] + c_eval[j];
    let ic = normalize_g1(
        (0..num_instance)
            .map(|j| g1 * (combined(j) * gamma_inv))
            .collect(),
    );
    let l_query = normalize_g1(
        (num_instance..num_vars)
            .map(|j| g1 * (combined(j) * delta_inv))
            .collect(),
    );

    // [τ^k Z(τ)/δ]₁ up to the quotient degree bound size - 2.
    let z_delta = z_tau * delta_inv;
    let mut h_query = Vec::with_capacity(domain.size - 1);
    let mut tau_power = Scalar::ONE;
    for _ in 0..domain.size - 1 {
        h_query.push(g1 * (tau_power * z_delta));
        tau_power *= tau;
    }
    let h_query = normalize_g1(h_query);

    let pk = Groth16ProvingKey {
        cs: cs.clone(),
        alpha_g1: (g1 * alpha).into(),
        beta_g1: (g1 * beta).into(),
        delta_g1: (g1 * delta).into(),
        beta_g2: (g2 * beta).into(),
        delta_g2: (g2 * delta).into(),
        a_query,
        b_g1_query,
        b_g2_query,
        h_query,
        l_query,
    };
    let vk = Groth16VerifyingKey {
        alpha_g1: pk.alpha_g1,
        beta_g2: pk.beta_g2,
        gamma_g2: (g2 * gamma).into(),
        delta_g2: pk.delta_g2,
        ic,
    };
    Ok((pk, vk))
}

/// Coefficients of the quotient h(X) = (A(X)·B(X) - C(X)) / Z(X), computed
/// by interpolating the constraint-row inner products and dividing on a
/// coset where Z never vanishes. Exactly `size - 1` coefficients: h has
/// degree at most `size - 2` for a satisfying assignment.
fn quotient_coefficients(
    cs: &ConstraintSystem<Scalar>,
    z: &[Scalar],
    domain: &Domain,
) -> Vec<Scalar> {
    let mut a_vals = vec![Scalar::ZERO; domain.size];
    let mut b_vals = vec![Scalar::ZERO; domain.size];
    let mut c_vals = vec![Scalar::ZERO; domain.size];
    for (i, (a, b, c)) in cs.constraints().iter().enumerate() {
        a_vals[i] = a.evaluate(z);
        b_vals[i] = b.evaluate(z);
        c_vals[i] = c.evaluate(z);
    }
    domain.ifft(&mut a_vals);
    domain.ifft(&mut b_vals);
    domain.ifft(&mut c_vals);
    domain.coset_fft(&mut a_vals);
    domain.coset_fft(&mut b_vals);
    domain.coset_fft(&mut c_vals);
    let vanishing_inv = domain.coset_vanishing().invert().unwrap();
    let mut h_vals: Vec<Scalar> = (0..domain.size)
        .map(|i| (a_vals[i] * b_vals[i] - c_vals[i]) * vanishing_inv)
        .collect();
    domain.coset_ifft(&mut h_vals);
    let top = h_vals.pop().expect("domain size is at least 2");
    debug_assert!(
        bool::from(top.is_zero()),
        "quotient degree bound violated; assignment cannot satisfy the system"
    );
    h_vals
}

pub(super) fn prove(
    pk: &Groth16ProvingKey,
    assignment: &Assignment<Scalar>,
    rng: &mut dyn RngCore,
) -> Result<Vec<u8>, BackendError> {
    match pk.cs.is_satisfied(assignment) {
        Ok(true) => {}
        Ok(false) => return Err(BackendError::Unsatisfiable),
        Err(shape) => return Err(shape.into()),
    }
    let z = assignment.to_z();
    let domain = Domain::new(pk.cs.num_constraints());
    let h_coeffs = quotient_coefficients(&pk.cs, &z, &domain);

    let r = Scalar::random(&mut *rng);
    let s = Scalar::random(&mut *rng);
    let num_instance = 1 + pk.cs.num_public();

    let a = pk.alpha_g1 + msm_g1(&pk.a_query, &z) + pk.delta_g1 * r;
    let b_g2 = pk.beta_g2 + msm_g2(&pk.b_g2_query, &z) + pk.delta_g2 * s;
    let b_g1 = pk.beta_g1 + msm_g1(&pk.b_g1_query, &z) + pk.delta_g1 * s;
    let c = msm_g1(&pk.l_query, &z[num_instance..])
        + msm_g1(&pk.h_query, &h_coeffs)
        + a * s
        + b_g1 * r
        - pk.delta_g1 * (r * s);

    let mut payload = Vec::with_capacity(PROOF_LEN);
    payload.extend_from_slice(&G1Affine::from(a).to_compressed());
    payload.extend_from_slice(&G2Affine::from(b_g2).to_compressed());
    payload.extend_from_slice(&G1Affine::from(c).to_compressed());
    Ok(payload)
}

pub(super) fn verify(vk: &Groth16VerifyingKey, publics: &[Scalar], payload: &[u8]) -> bool {
    if payload.len() != PROOF_LEN {
        return false;
    }
    if publics.len() + 1 != vk.ic.len() {
        return false;
    }
    let a_bytes: [u8; 48] = payload[..48].try_into().unwrap();
    let b_bytes: [u8; 96] = payload[48..144].try_into().unwrap();
    let c_bytes: [u8; 48] = payload[144..].try_into().unwrap();
    // from_compressed enforces curve and subgroup membership; anything that
    // fails to parse is simply not a proof.
    let Some(a) = Option::<G1Affine>::from(G1Affine::from_compressed(&a_bytes)) else {
        return false;
    };
    let Some(b) = Option::<G2Affine>::from(G2Affine::from_compressed(&b_bytes)) else {
        return false;
    };
    let Some(c) = Option::<G1Affine>::from(G1Affine::from_compressed(&c_bytes)) else {
        return false;
    };

    let mut acc = G1Projective::from(vk.ic[0]);
    for (value, base) in publics.iter().zip(&vk.ic[1..]) {
        acc += base * value;
    }
    let acc = G1Affine::from(acc);

    // e(A, B) = e(α, β) · e(acc, γ) · e(C, δ), folded into one Miller loop
    // by negating A.
    let b_prepared = G2Prepared::from(b);
    let beta_prepared = G2Prepared::from(vk.beta_g2);
    let gamma_prepared = G2Prepared::from(vk.gamma_g2);
    let delta_prepared = G2Prepared::from(vk.delta_g2);
    let result = multi_miller_loop(&[
        (&-a, &b_prepared),
        (&vk.alpha_g1, &beta_prepared),
        (&acc, &gamma_prepared),
        (&c, &delta_prepared),
    ])
    .final_exponentiation();
    result == Gt::identity()
}

impl Groth16ProvingKey {
    pub(super) fn write(&self, out: &mut Vec<u8>) {
        let cs_bytes = self.cs.canonical_bytes();
        out.extend_from_slice(&(cs_bytes.len() as u64).to_be_bytes());
        out.extend_from_slice(&cs_bytes);
        out.extend_from_slice(&self.alpha_g1.to_compressed());
        out.extend_from_slice(&self.beta_g1.to_compressed());
        out.extend_from_slice(&self.delta_g1.to_compressed());
        out.extend_from_slice(&self.beta_g2.to_compressed());
        out.extend_from_slice(&self.delta_g2.to_compressed());
        write_g1_vec(out, &self.a_query);
        write_g1_vec(out, &self.b_g1_query);
        write_g2_vec(out, &self.b_g2_query);
        write_g1_vec(out, &self.h_query);
        write_g1_vec(out, &self.l_query);
    }

    pub(super) fn read(bytes: &[u8]) -> Result<Groth16ProvingKey, BackendError> {
        let mut reader = ByteReader::new(bytes);
        let cs_bytes = reader.take_len_prefixed()?;
        let cs = ConstraintSystem::<Scalar>::from_canonical_bytes(
            cs_bytes,
            field_from_canonical_bytes,
        )
        .map_err(|e| BackendError::KeyDecode(e.to_string()))?;
        let alpha_g1 = read_g1(&mut reader)?;
        let beta_g1 = read_g1(&mut reader)?;
        let delta_g1 = read_g1(&mut reader)?;
        let beta_g2 = read_g2(&mut reader)?;
        let delta_g2 = read_g2(&mut reader)?;
        let a_query = read_g1_vec(&mut reader)?;
        let b_g1_query = read_g1_vec(&mut reader)?;
        let b_g2_query = read_g2_vec(&mut reader)?;
        let h_query = read_g1_vec(&mut reader)?;
        let l_query = read_g1_vec(&mut reader)?;
        reader.finish()?;
        Ok(Groth16ProvingKey {
            cs,
            alpha_g1,
            beta_g1,
            delta_g1,
            beta_g2,
            delta_g2,
            a_query,
            b_g1_query,
            b_g2_query,
            h_query,
            l_query,
        })
    }
}

impl Groth16VerifyingKey {
    pub(super) fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.alpha_g1.to_compressed());
        out.extend_from_slice(&self.beta_g2.to_compressed());
        out.extend_from_slice(&self.gamma_g2.to_compressed());
        out.extend_from_slice(&self.delta_g2.to_compressed());
        write_g1_vec(out, &self.ic);
    }

    pub(super) fn read(bytes: &[u8]) -> Result<Groth16VerifyingKey, BackendError> {
        let mut reader = ByteReader::new(bytes);
        let alpha_g1 = read_g1(&mut reader)?;
        let beta_g2 = read_g2(&mut reader)?;
        let gamma_g2 = read_g2(&mut reader)?;
        let delta_g2 = read_g2(&mut reader)?;
        let ic = read_g1_vec(&mut reader)?;
        reader.finish()?;
        Ok(Groth16VerifyingKey {
            alpha_g1,
            beta_g2,
            gamma_g2,
            delta_g2,
            ic,
        })
    }
}

fn write_g1_vec(out: &mut Vec<u8>, points: &[G1Affine]) {
    out.extend_from_slice(&(points.len() as u32).to_be_bytes());
    for point in points {
        out.extend_from_slice(&point.to_compressed());
    }
}

fn write_g2_vec(out: &mut Vec<u8>, points: &[G2Affine]) {
    out.extend_from_slice(&(points.len() as u32).to_be_bytes());
    for point in points {
        out.extend_from_slice(&point.to_compressed());
    }
}

fn read_g1(reader: &mut ByteReader<'_>) -> Result<G1Affine, BackendError> {
    let bytes: [u8; 48] = reader.take(48)?.try_into().unwrap();
    Option::<G1Affine>::from(G1Affine::from_compressed(&bytes))
        .ok_or_else(|| BackendError::KeyDecode("invalid G1 point".into()))
}

fn read_g2(reader: &mut ByteReader<'_>) -> Result<G2Affine, BackendError> {
    let bytes: [u8; 96] = reader.take(96)?.try_into().unwrap();
    Option::<G2Affine>::from(G2Affine::from_compressed(&bytes))
        .ok_or_else(|| BackendError::KeyDecode("invalid G2 point".into()))
}

fn read_g1_vec(reader: &mut ByteReader<'_>) -> Result<Vec<G1Affine>, BackendError> {
    let count = reader.take_u32()? as usize;
    (0..count).map(|_| read_g1(reader)).collect()
}

fn read_g2_vec(reader: &mut ByteReader<'_>) -> Result<Vec<G2Affine>, BackendError> {
    let count = reader.take_u32()? as usize;
    (0..count).map(|_| read_g2(reader)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::{
        BackendId, Groth16Backend, Proof, ProofBackend, ProvingKey, VerifyingKey,
    };
    use super::*;
    use crate::fixedpoint::FixedLoss;
    use crate::r1cs::{
        synthesize_threshold_circuit, synthesize_threshold_circuit_with_width, ThresholdPublics,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn publics_fixture() -> ThresholdPublics {
        ThresholdPublics {
            digest_lo: 0x0102_0304_0506_0708_090a_0b0c_0d0e_0f10,
            digest_hi: 0x1112_1314_1516_1718_191a_1b1c_1d1e_1f20,
            threshold: FixedLoss::from_raw(1_500_000),
            nonce: 0xfeed_face_0000_0000_0000_0000_0000_0001,
        }
    }

    fn setup_fixture() -> (ProvingKey, VerifyingKey) {
        let circuit = synthesize_threshold_circuit::<Scalar>();
        Groth16Backend.setup(&circuit.cs, &mut rng(7)).unwrap()
    }

    #[test]
    fn fft_round_trips() {
        let domain = Domain::new(37);
        assert_eq!(domain.size, 64);
        let mut rng = rng(1);
        let original: Vec<Scalar> = (0..64).map(|_| Scalar::random(&mut rng)).collect();
        let mut values = original.clone();
        domain.fft(&mut values);
        domain.ifft(&mut values);
        assert_eq!(values, original);
        domain.coset_fft(&mut values);
        domain.coset_ifft(&mut values);
        assert_eq!(values, original);
    }

    #[test]
    fn fft_matches_naive_evaluation() {
        let domain = Domain::new(3);
        assert_eq!(domain.size, 4);
        let coeffs: Vec<Scalar> = (1u64..=4).map(Scalar::from).collect();
        let mut values = coeffs.clone();
        domain.fft(&mut values);
        let mut point = Scalar::ONE;
        for eval in &values {
            let naive = coeffs
                .iter()
                .rev()
                .fold(Scalar::ZERO, |acc, c| acc * point + c);
            assert_eq!(*eval, naive);
            point *= domain.omega;
        }
    }

    #[test]
    fn proof_round_trip_verifies() {
        let circuit = synthesize_threshold_circuit::<Scalar>();
        let (pk, vk) = setup_fixture();
        let publics = publics_fixture();
        let backend = Groth16Backend;
        for loss_raw in [0u32, 700_000, 1_499_999] {
            let asn = circuit
                .build_assignment(&publics, FixedLoss::from_raw(loss_raw))
                .unwrap();
            let proof = backend.prove(&pk, &asn, &mut rng(loss_raw as u64)).unwrap();
            assert_eq!(proof.payload().len(), PROOF_LEN);
            let instance: Vec<Scalar> = publics.to_field_elements();
            assert!(backend.verify(&vk, &instance, &proof), "loss {loss_raw}");
        }
    }

    #[test]
    fn verify_rejects_wrong_instance() {
        let circuit = synthesize_threshold_circuit::<Scalar>();
        let (pk, vk) = setup_fixture();
        let publics = publics_fixture();
        let backend = Groth16Backend;
        let asn = circuit
            .build_assignment(&publics, FixedLoss::from_raw(1_000))
            .unwrap();
        let proof = backend.prove(&pk, &asn, &mut rng(3)).unwrap();
        let instance: Vec<Scalar> = publics.to_field_elements();

        // Perturb each instance slot in turn.
        for slot in 0..4 {
            let mut wrong = instance.clone();
            wrong[slot] += Scalar::ONE;
            assert!(!backend.verify(&vk, &wrong, &proof), "slot {slot}");
        }
        // Wrong instance arity.
        assert!(!backend.verify(&vk, &instance[..3], &proof));
        let mut extended = instance.clone();
        extended.push(Scalar::ZERO);
        assert!(!backend.verify(&vk, &extended, &proof));
    }

    #[test]
    fn prove_refuses_unsatisfying_assignment() {
        let circuit = synthesize_threshold_circuit::<Scalar>();
        let (pk, _vk) = setup_fixture();
        let publics = publics_fixture();
        let mut asn = circuit
            .build_assignment(&publics, FixedLoss::from_raw(1_000))
            .unwrap();
        // Corrupt one slack bit: booleanity still holds (it stays binary),
        // but the packing row breaks.
        asn.privates[2] = Scalar::ONE - asn.privates[2];
        let err = Groth16Backend.prove(&pk, &asn, &mut rng(4)).unwrap_err();
        assert!(matches!(err, BackendError::Unsatisfiable));
    }

    #[test]
    fn verify_survives_arbitrary_bytes() {
        let (_pk, vk) = setup_fixture();
        let instance: Vec<Scalar> = publics_fixture().to_field_elements();
        let backend = Groth16Backend;
        let mut rng = rng(5);
        for _ in 0..200 {
            let mut payload = vec![0u8; PROOF_LEN];
            rng.fill(&mut payload[..]);
            let proof = Proof::new(BackendId::Groth16Bls12381, payload);
            assert!(!backend.verify(&vk, &instance, &proof));
        }
        for len in [0usize, 1, 48, 191, 193, 500] {
            let proof = Proof::new(BackendId::Groth16Bls12381, vec![0xabu8; len]);
            assert!(!backend.verify(&vk, &instance, &proof));
        }
    }

    #[test]
    fn tampered_proof_fails() {
        let circuit = synthesize_threshold_circuit::<Scalar>();
        let (pk, vk) = setup_fixture();
        let publics = publics_fixture();
        let backend = Groth16Backend;
        let asn = circuit
            .build_assignment(&publics, FixedLoss::from_raw(42))
            .unwrap();
        let proof = backend.prove(&pk, &asn, &mut rng(6)).unwrap();
        let instance: Vec<Scalar> = publics.to_field_elements();
        for position in [0usize, 47, 48, 143, 144, 191] {
            let mut payload = proof.payload().to_vec();
            payload[position] ^= 0x01;
            let tampered = Proof::new(BackendId::Groth16Bls12381, payload);
            assert!(!backend.verify(&vk, &instance, &tampered), "byte {position}");
        }
    }

    #[test]
    fn proofs_are_randomized_but_size_constant() {
        let circuit = synthesize_threshold_circuit::<Scalar>();
        let (pk, vk) = setup_fixture();
        let publics = publics_fixture();
        let backend = Groth16Backend;
        let asn = circuit
            .build_assignment(&publics, FixedLoss::from_raw(99))
            .unwrap();
        let first = backend.prove(&pk, &asn, &mut rng(100)).unwrap();
        let second = backend.prove(&pk, &asn, &mut rng(101)).unwrap();
        // Fresh (r, s) give distinct group elements for the same witness.
        assert_ne!(first.payload(), second.payload());
        assert_eq!(first.payload().len(), second.payload().len());
        let instance: Vec<Scalar> = publics.to_field_elements();
        assert!(backend.verify(&vk, &instance, &first));
        assert!(backend.verify(&vk, &instance, &second));
    }

    #[test]
    fn key_serialization_round_trips() {
        let circuit = synthesize_threshold_circuit::<Scalar>();
        let (pk, vk) = setup_fixture();
        let publics = publics_fixture();
        let backend = Groth16Backend;

        let pk_restored = ProvingKey::from_bytes(&pk.to_bytes()).unwrap();
        let vk_restored = VerifyingKey::from_bytes(&vk.to_bytes()).unwrap();
        assert_eq!(pk_restored.circuit_digest(), circuit.cs.digest());
        assert_eq!(vk_restored.circuit_digest(), circuit.cs.digest());

        // Keys restored from bytes must interoperate with the originals.
        let asn = circuit
            .build_assignment(&publics, FixedLoss::from_raw(77))
            .unwrap();
        let proof = backend.prove(&pk_restored, &asn, &mut rng(8)).unwrap();
        let instance: Vec<Scalar> = publics.to_field_elements();
        assert!(backend.verify(&vk, &instance, &proof));
        assert!(backend.verify(&vk_restored, &instance, &proof));
    }

    #[test]
    fn narrower_width_changes_keys_but_not_proof_size() {
        let narrow = synthesize_threshold_circuit_with_width::<Scalar>(8);
        let backend = Groth16Backend;
        let (pk, vk) = backend.setup(&narrow.cs, &mut rng(9)).unwrap();
        let publics = ThresholdPublics {
            digest_lo: 1,
            digest_hi: 2,
            threshold: FixedLoss::from_raw(200),
            nonce: 3,
        };
        let asn = narrow
            .build_assignment(&publics, FixedLoss::from_raw(180))
            .unwrap();
        let proof = backend.prove(&pk, &asn, &mut rng(10)).unwrap();
        assert_eq!(proof.payload().len(), PROOF_LEN);
        let instance: Vec<Scalar> = publics.to_field_elements();
        assert!(backend.verify(&vk, &instance, &proof));
    }
}
