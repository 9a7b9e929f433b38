//! Experiment harness: dataset loading, round orchestration, metrics.
//!
//! [`run_experiment`] reproduces the evaluation grid: per seed it trains the
//! server model (one epoch on a 10% subset of the training split), partitions
//! the test split across clients, runs one protocol round over the chosen
//! transport, and records a [`MetricsRow`]. Everything except wall-clock
//! timings is deterministic in (config, seed) — model initialization,
//! training order, dropout masks, partitions, nonces, and proof randomness
//! all derive from the seed.
//!
//! Timing methodology: a monotonic clock wraps each client's evaluate +
//! witness + prove work (the "client time"), and wraps each sequential
//! backend verification call on the server (the "verify time"). One-time key
//! setup is logged separately and never folded into round metrics, so the
//! verification-scaling numbers stay clean. Client evaluation runs on a
//! worker pool of min(n_clients, cores); verification is strictly
//! sequential.

pub mod fixtures;

use crate::dataio::{
    parse_har, parse_idx_images, parse_idx_labels, partition_iid, partition_noniid,
    server_train_subset, zip_samples, ClientShard, DataError, Sample,
};
use crate::fixedpoint::encode_fixed;
use crate::nn::{train_one_epoch, Arch, ModelParams, NnError};
use crate::protocol::{
    aggregate, client_evaluate, read_frame, response_wire_size, server_record_decline,
    server_start_round, server_verify_submission, write_frame, ClientResponse, EvalTask, Message,
    ProtocolError, RoundRegistry, RoundResult, VerifyOutcome, WireError, DEFAULT_BATCH_SIZE,
};
use crate::r1cs::synthesize_threshold_circuit;
use crate::zkbackend::{
    backend_for, BackendError, BackendField, BackendId, KeyCache, ProofBackend, ProvingKey,
    SecurityPolicy, VerifyingKey,
};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Fraction of the training split used for the server's one-epoch train.
pub const SERVER_TRAIN_FRACTION: f64 = 0.1;

/// Subdirectory and file names for each dataset under the data directory.
pub const MNIST_DIR: &str = "mnist";
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];
pub const HAR_DIR: &str = "har";
pub const HAR_FILES: [&str; 4] = ["X_train.txt", "y_train.txt", "X_test.txt", "y_test.txt"];

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing data file: expected {}", .0.display())]
    MissingData(PathBuf),
    #[error("checksum mismatch for {}: SHA256SUMS says {expected}, file hashes to {got}", path.display())]
    Checksum {
        path: PathBuf,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// data problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::MissingData(_)
            | HarnessError::Checksum { .. }
            | HarnessError::Data(_) => 3,
            _ => 1,
        }
    }
}

/// Which corpus an experiment runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Har,
}

impl Dataset {
    pub fn arch(self) -> Arch {
        match self {
            Dataset::Mnist => Arch::MnistCnn,
            Dataset::Har => Arch::HarMlp,
        }
    }

    fn dir_and_files(self) -> (&'static str, [&'static str; 4]) {
        match self {
            Dataset::Mnist => (MNIST_DIR, MNIST_FILES),
            Dataset::Har => (HAR_DIR, HAR_FILES),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Mnist => "mnist",
            Dataset::Har => "har",
        })
    }
}

impl FromStr for Dataset {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(Dataset::Mnist),
            "har" => Ok(Dataset::Har),
            other => Err(HarnessError::Config(format!(
                "unknown dataset {other:?} (expected mnist or har)"
            ))),
        }
    }
}

/// How the test split is dealt to clients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistributionKind {
    Iid,
    /// Label-skewed via symmetric Dirichlet(alpha).
    NonIid { alpha: f64 },
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionKind::Iid => f.write_str("iid"),
            DistributionKind::NonIid { alpha } => write!(f, "noniid:{alpha}"),
        }
    }
}

impl FromStr for DistributionKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "iid" {
            return Ok(DistributionKind::Iid);
        }
        if let Some(alpha) = s.strip_prefix("noniid:") {
            let alpha: f64 = alpha.parse().map_err(|_| {
                HarnessError::Config(format!("unparseable Dirichlet alpha in {s:?}"))
            })?;
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(HarnessError::Config(format!(
                    "Dirichlet alpha must be positive and finite, got {alpha}"
                )));
            }
            return Ok(DistributionKind::NonIid { alpha });
        }
        Err(HarnessError::Config(format!(
            "unknown distribution {s:?} (expected iid or noniid:ALPHA)"
        )))
    }
}

/// Which proof system backs the round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendChoice {
    /// Groth16 over BLS12-381 under the production policy.
    Snark,
    /// The non-hiding test backend; refuses the production policy.
    Mock,
}

impl BackendChoice {
    pub fn backend_id(self) -> BackendId {
        match self {
            BackendChoice::Snark => BackendId::Groth16Bls12381,
            BackendChoice::Mock => BackendId::Mock,
        }
    }

    pub fn policy(self) -> SecurityPolicy {
        match self {
            BackendChoice::Snark => SecurityPolicy::Production,
            BackendChoice::Mock => SecurityPolicy::Testing,
        }
    }

    fn build(self) -> Result<Box<dyn ProofBackend>, BackendError> {
        backend_for(self.backend_id(), self.policy())
    }
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendChoice::Snark => "snark",
            BackendChoice::Mock => "mock",
        })
    }
}

impl FromStr for BackendChoice {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "snark" => Ok(BackendChoice::Snark),
            "mock" => Ok(BackendChoice::Mock),
            other => Err(HarnessError::Config(format!(
                "unknown backend {other:?} (expected snark or mock)"
            ))),
        }
    }
}

/// How task and responses travel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    /// Direct calls; the model is shared by reference. Sizes are computed
    /// from the frames that would have been sent.
    InProc,
    /// Localhost TCP with the full framed wire format.
    Tcp,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp => "tcp",
        })
    }
}

impl FromStr for TransportKind {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(TransportKind::InProc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(HarnessError::Config(format!(
                "unknown transport {other:?} (expected inproc or tcp)"
            ))),
        }
    }
}

/// Full description of one experiment (shared across its seeds).
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub n_clients: usize,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub distribution: DistributionKind,
    pub backend: BackendChoice,
    pub transport: TransportKind,
    pub batch_size: usize,
    pub data_dir: PathBuf,
    /// Proving/verifying key cache; defaults to `<data_dir>/keys`.
    pub key_cache_dir: Option<PathBuf>,
    /// TCP response budget; silent clients count as declines.
    pub response_timeout: Duration,
}

impl ExperimentConfig {
    pub fn new(dataset: Dataset, n_clients: usize, threshold: f64, seeds: Vec<u64>) -> Self {
        ExperimentConfig {
            dataset,
            n_clients,
            threshold,
            seeds,
            distribution: DistributionKind::Iid,
            backend: BackendChoice::Snark,
            transport: TransportKind::InProc,
            batch_size: DEFAULT_BATCH_SIZE,
            data_dir: PathBuf::from("data"),
            key_cache_dir: None,
            response_timeout: Duration::from_secs(120),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_clients == 0 {
            return Err(HarnessError::Config("need at least one client".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("need at least one seed".into()));
        }
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(HarnessError::Config(format!(
                "threshold {} must be positive and finite",
                self.threshold
            )));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch size must be positive".into()));
        }
        if self.batch_size != DEFAULT_BATCH_SIZE {
            log::warn!(
                "batch size {} overrides the experiment default of {}",
                self.batch_size,
                DEFAULT_BATCH_SIZE
            );
        }
        Ok(())
    }

    fn key_cache(&self) -> KeyCache {
        KeyCache::new(
            self.key_cache_dir
                .clone()
                .unwrap_or_else(|| self.data_dir.join("keys")),
        )
    }
}

/// One CSV row: the config echo plus one round's measurements. Column order
/// is the declaration order and is the external contract.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub n_clients: usize,
    pub threshold: f64,
    pub distribution: String,
    pub backend: String,
    pub transport: String,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean per-client evaluate+witness+prove wall time.
    pub mean_client_time_s: f64,
    /// Mean wall time of one sequential backend verification.
    pub mean_verify_time_s: f64,
    /// Sum of sequential verification times for the round.
    pub total_verify_time_s: f64,
    /// Wire size of one proof (0 when the round produced none).
    pub proof_size_bytes: usize,
    /// Mean framed size of a proof submission (0 when none).
    pub submission_size_bytes: f64,
    /// Total bytes clients sent upstream (submissions and declines).
    pub total_upload_bytes: usize,
    pub valid_count: u64,
    pub decline_count: u64,
    pub reject_count: u64,
    pub validation_rate: f64,
}

/// Everything measured while one round ran.
struct RoundOutcome {
    result: RoundResult,
    client_seconds: Vec<f64>,
    verify_seconds: Vec<f64>,
    proof_sizes: Vec<usize>,
    submission_sizes: Vec<usize>,
    upload_bytes: usize,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Dataset loading.
// ---------------------------------------------------------------------------

/// Reads `SHA256SUMS` in `dir` (when present) and verifies every listed
/// file that exists on disk.
fn verify_checksums(dir: &Path) -> Result<(), HarnessError> {
    let sums_path = dir.join("SHA256SUMS");
    let Ok(sums) = fs::read_to_string(&sums_path) else {
        return Ok(()); // no checksum file: nothing to verify
    };
    for line in sums.lines() {
        let Some((expected, name)) = line.split_once("  ") else {
            continue;
        };
        let path = dir.join(name.trim());
        let Ok(bytes) = fs::read(&path) else {
            continue; // listed but absent; the loader reports missing files
        };
        let digest: [u8; 32] = Sha256::digest(&bytes).into();
        let got = hex::encode(digest);
        if got != expected.trim() {
            return Err(HarnessError::Checksum {
                path,
                expected: expected.trim().to_string(),
                got,
            });
        }
    }
    Ok(())
}

fn read_file(path: PathBuf) -> Result<Vec<u8>, HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::MissingData(path));
    }
    Ok(fs::read(path)?)
}

/// Loads a dataset's (train, test) splits from `data_dir`, verifying
/// checksums when a `SHA256SUMS` file is present.
pub fn load_dataset(
    dataset: Dataset,
    data_dir: &Path,
) -> Result<(Vec<Sample>, Vec<Sample>), HarnessError> {
    let (subdir, files) = dataset.dir_and_files();
    let dir = data_dir.join(subdir);
    verify_checksums(&dir)?;
    match dataset {
        Dataset::Mnist => {
            let train = zip_samples(
                parse_idx_images(&read_file(dir.join(files[0]))?)?,
                parse_idx_labels(&read_file(dir.join(files[1]))?)?,
            )?;
            let test = zip_samples(
                parse_idx_images(&read_file(dir.join(files[2]))?)?,
                parse_idx_labels(&read_file(dir.join(files[3]))?)?,
            )?;
            Ok((train, test))
        }
        Dataset::Har => {
            let read_text = |path: PathBuf| -> Result<String, HarnessError> {
                String::from_utf8(read_file(path)?)
                    .map_err(|e| HarnessError::Config(format!("data file is not UTF-8: {e}")))
            };
            let train = parse_har(
                &read_text(dir.join(files[0]))?,
                &read_text(dir.join(files[1]))?,
            )?;
            let test = parse_har(
                &read_text(dir.join(files[2]))?,
                &read_text(dir.join(files[3]))?,
            )?;
            Ok((train, test))
        }
    }
}

// ---------------------------------------------------------------------------
// Round execution.
// ---------------------------------------------------------------------------

fn partition(
    test: &[Sample],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<ClientShard>, DataError> {
    match config.distribution {
        DistributionKind::Iid => partition_iid(test, config.n_clients, seed),
        DistributionKind::NonIid { alpha } => {
            partition_noniid(test, config.n_clients, alpha, seed)
        }
    }
}

/// Per-client RNG stream (proof randomness), independent per (seed, id).
fn client_rng(seed: u64, client_id: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(fixtures::derive_seed(seed, 0xc11e_0000 | client_id))
}

/// Client phase on a worker pool of min(n_clients, cores): each client
/// evaluates, branches, and proves; wall time wraps exactly that work.
fn client_phase_inproc(
    task: &EvalTask,
    shards: &[ClientShard],
    pk: &ProvingKey,
    backend: &dyn ProofBackend,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(ClientResponse, f64)>, HarnessError> {
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(shards.len().max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        shards
            .par_iter()
            .map(|shard| {
                let mut rng = client_rng(seed, shard.client_id);
                let start = Instant::now();
                let response =
                    client_evaluate(task, shard, pk, backend, batch_size, &mut rng)?;
                Ok((response, start.elapsed().as_secs_f64()))
            })
            .collect()
    })
}

/// Client phase over localhost TCP: every client runs in its own thread,
/// receives the task as a real frame (parsing its own copy of the model),
/// and sends back a framed response. One socket per client; responses are
/// read with the configured timeout, and silence counts as a timeout.
fn client_phase_tcp(
    task: &EvalTask,
    shards: Vec<ClientShard>,
    pk: &Arc<ProvingKey>,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<(ClientResponse, usize, f64)>, HarnessError> {
    use std::net::{TcpListener, TcpStream};

    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let backend_choice = config.backend;
    let batch_size = config.batch_size;

    let threads: Vec<_> = shards
        .into_iter()
        .map(|shard| {
            let pk = pk.clone();
            std::thread::spawn(move || -> Result<f64, HarnessError> {
                let backend = backend_choice.build()?;
                let mut stream = TcpStream::connect(addr)?;
                let message = read_frame(&mut stream)?;
                let Message::Task(task) = message else {
                    return Err(HarnessError::Config(
                        "client expected a task frame".into(),
                    ));
                };
                let mut rng = client_rng(seed, shard.client_id);
                let start = Instant::now();
                let response = client_evaluate(
                    &task,
                    &shard,
                    &pk,
                    backend.as_ref(),
                    batch_size,
                    &mut rng,
                )?;
                let seconds = start.elapsed().as_secs_f64();
                let message = match response {
                    ClientResponse::Submission(sub) => Message::Submission(sub),
                    ClientResponse::Decline(decline) => Message::Decline(decline),
                };
                write_frame(&mut stream, &message)?;
                Ok(seconds)
            })
        })
        .collect();

    let mut streams: Vec<TcpStream> = Vec::with_capacity(threads.len());
    for _ in 0..threads.len() {
        let (stream, _) = listener.accept()?;
        stream.set_read_timeout(Some(config.response_timeout))?;
        streams.push(stream);
    }
    let task_message = Message::Task(task.clone());
    for stream in &mut streams {
        write_frame(stream, &task_message)?;
    }

    let mut responses = Vec::with_capacity(streams.len());
    for stream in &mut streams {
        match read_frame(stream) {
            Ok(Message::Submission(sub)) => {
                let size = response_wire_size(&ClientResponse::Submission(sub.clone()));
                responses.push((ClientResponse::Submission(sub), size));
            }
            Ok(Message::Decline(decline)) => {
                let size = response_wire_size(&ClientResponse::Decline(decline));
                responses.push((ClientResponse::Decline(decline), size));
            }
            Ok(other) => {
                return Err(HarnessError::Config(format!(
                    "unexpected client message: {other:?}"
                )))
            }
            Err(WireError::Io(e)) => {
                log::warn!("client connection yielded no response ({e}); counting as timeout");
            }
            Err(other) => return Err(other.into()),
        }
    }

    let mut seconds = Vec::with_capacity(threads.len());
    for thread in threads {
        match thread.join() {
            Ok(Ok(s)) => seconds.push(s),
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(HarnessError::Config("client thread panicked".into())),
        }
    }
    Ok(responses
        .into_iter()
        .zip(seconds)
        .map(|((response, size), s)| (response, size, s))
        .collect())
}

/// Sequential server phase: verify submissions in arrival order, record
/// declines, then close the round.
fn server_phase(
    registry: &mut RoundRegistry,
    responses: &[(ClientResponse, usize)],
    vk: &VerifyingKey,
    backend: &dyn ProofBackend,
    participants: u64,
) -> Result<(RoundResult, Vec<f64>, Vec<usize>), HarnessError> {
    let mut verify_seconds = Vec::new();
    let mut proof_sizes = Vec::new();
    for (response, _) in responses {
        match response {
            ClientResponse::Submission(sub) => {
                let start = Instant::now();
                let outcome = server_verify_submission(registry, sub, vk, backend);
                verify_seconds.push(start.elapsed().as_secs_f64());
                if outcome == VerifyOutcome::Accepted {
                    proof_sizes.push(sub.proof.size_bytes());
                }
            }
            ClientResponse::Decline(decline) => server_record_decline(registry, decline),
        }
    }
    let result = aggregate(registry, participants)?;
    Ok((result, verify_seconds, proof_sizes))
}

/// Runs one seed's round end to end and returns its measurements.
fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    train: &[Sample],
    test: &[Sample],
    pk: &Arc<ProvingKey>,
    vk: &VerifyingKey,
    backend: &dyn ProofBackend,
) -> Result<RoundOutcome, HarnessError> {
    let initial = ModelParams::he_init(config.dataset.arch(), seed);
    let subset = server_train_subset(train, SERVER_TRAIN_FRACTION, seed)?;
    let model = Arc::new(train_one_epoch(
        &initial,
        &subset,
        config.batch_size,
        seed,
    )?);
    let shards = partition(test, config, seed)?;
    let threshold = encode_fixed(config.threshold)
        .map_err(|e| HarnessError::Config(format!("threshold: {e}")))?;

    let mut registry = RoundRegistry::new();
    let mut server_rng = ChaCha12Rng::seed_from_u64(fixtures::derive_seed(seed, 0x5e11));
    let task = server_start_round(&mut registry, model, threshold, 1, &mut server_rng)?;

    let participants = shards.len() as u64;
    let (responses, client_seconds): (Vec<(ClientResponse, usize)>, Vec<f64>) =
        match config.transport {
            TransportKind::InProc => {
                let returns =
                    client_phase_inproc(&task, &shards, pk, backend, config.batch_size, seed)?;
                returns
                    .into_iter()
                    .map(|(response, s)| {
                        let size = response_wire_size(&response);
                        ((response, size), s)
                    })
                    .unzip()
            }
            TransportKind::Tcp => {
                let returns = client_phase_tcp(&task, shards, pk, config, seed)?;
                returns
                    .into_iter()
                    .map(|(response, size, s)| ((response, size), s))
                    .unzip()
            }
        };

    let upload_bytes: usize = responses.iter().map(|(_, size)| size).sum();
    let submission_sizes: Vec<usize> = responses
        .iter()
        .filter(|(r, _)| matches!(r, ClientResponse::Submission(_)))
        .map(|(_, size)| *size)
        .collect();
    let (result, verify_seconds, proof_sizes) =
        server_phase(&mut registry, &responses, vk, backend, participants)?;

    Ok(RoundOutcome {
        result,
        client_seconds,
        verify_seconds,
        proof_sizes,
        submission_sizes,
        upload_bytes,
    })
}

/// Runs the configured experiment: one row per seed. The dataset loads
/// once; proving/verifying keys come from the on-disk cache (setup runs and
/// is logged separately on a cache miss).
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRow>, HarnessError> {
    config.validate()?;
    let (train, test) = load_dataset(config.dataset, &config.data_dir)?;
    if config.n_clients > test.len() {
        return Err(HarnessError::Config(format!(
            "{} clients cannot each receive a nonempty shard of {} test samples",
            config.n_clients,
            test.len()
        )));
    }

    let backend = config.backend.build()?;
    let circuit = synthesize_threshold_circuit::<BackendField>();
    let setup_start = Instant::now();
    let mut setup_rng = ChaCha12Rng::from_entropy();
    let (pk, vk) = config
        .key_cache()
        .load_or_generate(backend.as_ref(), &circuit.cs, &mut setup_rng)?;
    log::info!(
        "key material ready in {:.3}s (cache: {})",
        setup_start.elapsed().as_secs_f64(),
        config.key_cache().dir().display()
    );
    let pk = Arc::new(pk);

    let mut rows = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let outcome = run_seed(config, seed, &train, &test, &pk, &vk, backend.as_ref())?;
        let submission_sizes_f: Vec<f64> =
            outcome.submission_sizes.iter().map(|&s| s as f64).collect();
        rows.push(MetricsRow {
            dataset: config.dataset.to_string(),
            n_clients: config.n_clients,
            threshold: config.threshold,
            distribution: config.distribution.to_string(),
            backend: config.backend.to_string(),
            transport: config.transport.to_string(),
            batch_size: config.batch_size,
            seed,
            mean_client_time_s: mean(&outcome.client_seconds),
            mean_verify_time_s: mean(&outcome.verify_seconds),
            total_verify_time_s: outcome.verify_seconds.iter().sum(),
            proof_size_bytes: outcome.proof_sizes.first().copied().unwrap_or(0),
            submission_size_bytes: mean(&submission_sizes_f),
            total_upload_bytes: outcome.upload_bytes,
            valid_count: outcome.result.valid_count,
            decline_count: outcome.result.decline_count,
            reject_count: outcome.result.reject_count,
            validation_rate: outcome.result.validation_rate,
        });
        log::info!(
            "{} seed {seed}: {}/{} valid (rate {:.4})",
            config.dataset,
            outcome.result.valid_count,
            outcome.result.participants,
            outcome.result.validation_rate
        );
    }
    Ok(rows)
}

/// Runs the client-count sweep used for verification-scaling plots: the
/// base config repeated at each client count, all else fixed.
pub fn scaling_run(
    base: &ExperimentConfig,
    client_counts: &[usize],
) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut rows = Vec::new();
    for &n_clients in client_counts {
        let config = ExperimentConfig {
            n_clients,
            ..base.clone()
        };
        rows.extend(run_experiment(&config)?);
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV and summaries.
// ---------------------------------------------------------------------------

pub fn write_rows_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::MissingData(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let rows: Result<Vec<MetricsRow>, csv::Error> = reader.deserialize().collect();
    Ok(rows?)
}

/// Per-(dataset, n_clients) means over rows, ordered by dataset then client
/// count ascending.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub n_clients: usize,
    pub rows: usize,
    pub mean_client_time_s: f64,
    pub mean_verify_time_s: f64,
    pub mean_submission_kib: f64,
    pub proof_size_bytes: usize,
    pub mean_validation_pct: f64,
}

pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.dataset.clone(), row.n_clients))
            .or_default()
            .push(row);
    }
    groups
        .into_iter()
        .map(|((dataset, n_clients), members)| {
            let count = members.len() as f64;
            let mean_of = |f: &dyn Fn(&MetricsRow) -> f64| {
                members.iter().map(|r| f(r)).sum::<f64>() / count
            };
            SummaryRow {
                dataset,
                n_clients,
                rows: members.len(),
                mean_client_time_s: mean_of(&|r| r.mean_client_time_s),
                mean_verify_time_s: mean_of(&|r| r.mean_verify_time_s),
                mean_submission_kib: mean_of(&|r| r.submission_size_bytes) / 1024.0,
                proof_size_bytes: members
                    .iter()
                    .map(|r| r.proof_size_bytes)
                    .find(|&s| s != 0)
                    .unwrap_or(0),
                mean_validation_pct: mean_of(&|r| r.validation_rate) * 100.0,
            }
        })
        .collect()
}

/// Plain-text table for terminal output.
pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>9} {:>5} {:>15} {:>15} {:>15} {:>12} {:>12}\n",
        "dataset",
        "n_clients",
        "rows",
        "client_time_s",
        "verify_time_s",
        "submission_kib",
        "proof_bytes",
        "valid_pct"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<8} {:>9} {:>5} {:>15.4} {:>15.6} {:>15.3} {:>12} {:>12.2}\n",
            row.dataset,
            row.n_clients,
            row.rows,
            row.mean_client_time_s,
            row.mean_verify_time_s,
            row.mean_submission_kib,
            row.proof_size_bytes,
            row.mean_validation_pct
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Linear fit (verification scaling).
// ---------------------------------------------------------------------------

/// Least-squares line fit with its coefficient of determination.
#[derive(Clone, Copy, Debug)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits y = slope·x + intercept. Returns `None` for fewer than two points
/// or when x has no variance. A constant y (zero total variance) fits its
/// horizontal line exactly, so its R² is 1.
pub fn linear_fit(points: &[(f64, f64)]) -> Option<LinearFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ss_xx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let ss_xy: f64 = points
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum();
    if ss_xx == 0.0 {
        return None;
    }
    let slope = ss_xy / ss_xx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}
