//! On-disk cache for proving/verifying keys, keyed by circuit digest.
//!
//! Trusted setup is the slowest step of the SNARK lifecycle and its output
//! is reusable for the lifetime of a circuit, so keys are cached as
//! `{circuit_digest_hex}.pk` / `.vk` under a caller-chosen directory.
//! Writes go through a temporary file followed by an atomic rename, and a
//! process-wide lock serializes generation so concurrent experiments do not
//! run redundant setups. Unreadable or mismatched cache files are treated
//! as absent and regenerated in place.

use super::{BackendError, BackendField, ProofBackend, ProvingKey, VerifyingKey};
use crate::r1cs::ConstraintSystem;
use rand::RngCore;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

static GENERATION_LOCK: Mutex<()> = Mutex::new(());

pub struct KeyCache {
    dir: PathBuf,
}

impl KeyCache {
    pub fn new(dir: impl Into<PathBuf>) -> KeyCache {
        KeyCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn paths(&self, backend_byte: u8, digest: &[u8; 32]) -> (PathBuf, PathBuf) {
        // Backend id participates in the file name: the same circuit under
        // different backends yields unrelated key material.
        let stem = format!("{:02x}-{}", backend_byte, hex::encode(digest));
        (
            self.dir.join(format!("{stem}.pk")),
            self.dir.join(format!("{stem}.vk")),
        )
    }

    /// Returns cached keys for the circuit if present and intact, otherwise
    /// runs the backend's setup and persists the result.
    pub fn load_or_generate(
        &self,
        backend: &dyn ProofBackend,
        cs: &ConstraintSystem<BackendField>,
        rng: &mut dyn RngCore,
    ) -> Result<(ProvingKey, VerifyingKey), BackendError> {
        let digest = cs.digest();
        let (pk_path, vk_path) = self.paths(backend.id().to_byte(), &digest);

        let _guard = GENERATION_LOCK
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner());

        if let Some(keys) = self.try_load(&pk_path, &vk_path, &digest) {
            return Ok(keys);
        }

        let (pk, vk) = backend.setup(cs, rng)?;
        fs::create_dir_all(&self.dir)?;
        write_atomic(&pk_path, &pk.to_bytes())?;
        write_atomic(&vk_path, &vk.to_bytes())?;
        Ok((pk, vk))
    }

    fn try_load(
        &self,
        pk_path: &Path,
        vk_path: &Path,
        digest: &[u8; 32],
    ) -> Option<(ProvingKey, VerifyingKey)> {
        let pk_bytes = fs::read(pk_path).ok()?;
        let vk_bytes = fs::read(vk_path).ok()?;
        let pk = match ProvingKey::from_bytes(&pk_bytes) {
            Ok(pk) => pk,
            Err(err) => {
                log::warn!(
                    "discarding unreadable proving key cache {}: {err}",
                    pk_path.display()
                );
                return None;
            }
        };
        let vk = match VerifyingKey::from_bytes(&vk_bytes) {
            Ok(vk) => vk,
            Err(err) => {
                log::warn!(
                    "discarding unreadable verifying key cache {}: {err}",
                    vk_path.display()
                );
                return None;
            }
        };
        if pk.circuit_digest() != *digest || vk.circuit_digest() != *digest {
            log::warn!(
                "key cache {} holds a different circuit; regenerating",
                pk_path.display()
            );
            return None;
        }
        Some((pk, vk))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BackendError> {
    let dir = path.parent().expect("cache paths always have a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| BackendError::Io(e.error))?;
    Ok(())
}
