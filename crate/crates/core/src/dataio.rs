//! Dataset parsing and client partitioning.
//!
//! Two on-disk formats are understood: the IDX binary format used by the
//! digit images/labels, and the whitespace-separated text tables used by the
//! activity-recognition set (561 features per line, labels 1–6 in a separate
//! file). Parsers are total: any malformed input yields a [`DataError`]
//! locating the problem by byte offset or line number, never a panic.
//!
//! Partitioners are deterministic per seed. IID partitioning deals a uniform
//! shuffle into near-equal shards; the non-IID partitioner draws per-class
//! client proportions from a symmetric Dirichlet(α), so small α concentrates
//! each class on few clients (label skew) while large α approaches IID.

use crate::nn::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Dirichlet, Distribution};
use thiserror::Error;

/// One labeled example. `features` carries its own shape, so the same type
/// serves both image and vector datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub label: usize,
}

/// The slice of a dataset held by one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: u64,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("malformed data at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("malformed data at line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset.checked_add(4).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap())),
        None => Err(DataError::Format {
            offset,
            reason: format!("need 4 bytes, only {} available", bytes.len() - offset.min(bytes.len())),
        }),
    }
}

/// Parses an IDX image file (magic `0x00000803`): header of count/rows/cols,
/// then one unsigned byte per pixel. Pixels are scaled to `[0, 1]` and each
/// image becomes a `[1, rows, cols]` tensor.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>, DataError> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format {
            offset: 0,
            reason: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Format {
            offset: 8,
            reason: format!("degenerate image dimensions {rows}x{cols}"),
        });
    }
    let pixels = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| DataError::Format {
            offset: 4,
            reason: "image dimensions overflow".to_string(),
        })?;
    let expected = 16 + pixels;
    if bytes.len() != expected {
        return Err(DataError::Format {
            offset: bytes.len().min(expected),
            reason: format!("expected {expected} bytes total, got {}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let values: Vec<f64> = bytes[start..start + rows * cols]
            .iter()
            .map(|&p| p as f64 / 255.0)
            .collect();
        images.push(
            Tensor::new(vec![1, rows, cols], values)
                .expect("pixel values are finite and sized to shape"),
        );
    }
    Ok(images)
}

/// Parses an IDX label file (magic `0x00000801`): header of count, then one
/// byte per label. Labels must be 0–9.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format {
            offset: 0,
            reason: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(DataError::Format {
            offset: bytes.len().min(expected),
            reason: format!("expected {expected} bytes total, got {}", bytes.len()),
        });
    }
    let mut labels = Vec::with_capacity(count);
    for (i, &byte) in bytes[8..].iter().enumerate() {
        if byte > 9 {
            return Err(DataError::Format {
                offset: 8 + i,
                reason: format!("label byte {byte} outside 0..=9"),
            });
        }
        labels.push(byte as usize);
    }
    Ok(labels)
}

/// Pairs parsed features with parsed labels, rejecting length mismatches.
pub fn zip_samples(features: Vec<Tensor>, labels: Vec<usize>) -> Result<Vec<Sample>, DataError> {
    if features.len() != labels.len() {
        return Err(DataError::Config(format!(
            "feature/label count mismatch: {} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    Ok(features
        .into_iter()
        .zip(labels)
        .map(|(features, label)| Sample { features, label })
        .collect())
}

/// Parses the activity-recognition text pair: `features_text` holds exactly
/// 561 whitespace-separated decimals per line, `labels_text` one integer in
/// 1..=6 per line (shifted to 0..=5). Line numbers in errors are 1-based.
pub fn parse_har(features_text: &str, labels_text: &str) -> Result<Vec<Sample>, DataError> {
    const HAR_FEATURES: usize = 561;
    const HAR_CLASSES: usize = 6;

    let mut features = Vec::new();
    for (index, line) in features_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = index + 1;
        let mut values = Vec::with_capacity(HAR_FEATURES);
        for token in line.split_whitespace() {
            let value: f64 = token.parse().map_err(|_| DataError::Line {
                line: line_no,
                reason: format!("unparseable feature value {token:?}"),
            })?;
            if !value.is_finite() {
                return Err(DataError::Line {
                    line: line_no,
                    reason: format!("non-finite feature value {token:?}"),
                });
            }
            values.push(value);
        }
        if values.len() != HAR_FEATURES {
            return Err(DataError::Line {
                line: line_no,
                reason: format!("expected {HAR_FEATURES} features, found {}", values.len()),
            });
        }
        features.push(Tensor::new(vec![HAR_FEATURES], values).expect("validated above"));
    }

    let mut labels = Vec::new();
    for (index, line) in labels_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = index + 1;
        let raw: usize = line.trim().parse().map_err(|_| DataError::Line {
            line: line_no,
            reason: format!("unparseable label {:?}", line.trim()),
        })?;
        if !(1..=HAR_CLASSES).contains(&raw) {
            return Err(DataError::Line {
                line: line_no,
                reason: format!("label {raw} outside 1..={HAR_CLASSES}"),
            });
        }
        labels.push(raw - 1);
    }

    zip_samples(features, labels)
}

/// Draws `round(fraction * data.len())` samples without replacement,
/// deterministically per seed. The fraction must lie in (0, 1] and the
/// rounded count must be at least one.
pub fn server_train_subset(
    data: &[Sample],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Sample>, DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Config(format!(
            "subset fraction {fraction} outside (0, 1]"
        )));
    }
    let count = (fraction * data.len() as f64).round() as usize;
    if count == 0 {
        return Err(DataError::Config(format!(
            "subset of {} samples at fraction {fraction} is empty",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order[..count].iter().map(|&i| data[i].clone()).collect())
}

/// Splits the dataset into `n_clients` disjoint shards whose sizes differ by
/// at most one (e.g. 10 samples over 3 clients gives sizes 4, 3, 3), after a
/// seeded uniform shuffle.
pub fn partition_iid(
    data: &[Sample],
    n_clients: usize,
    seed: u64,
) -> Result<Vec<ClientShard>, DataError> {
    if n_clients == 0 {
        return Err(DataError::Config("need at least one client".to_string()));
    }
    if n_clients > data.len() {
        return Err(DataError::Config(format!(
            "cannot split {} samples across {n_clients} clients without empty shards",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let base = data.len() / n_clients;
    let remainder = data.len() % n_clients;
    let mut shards = Vec::with_capacity(n_clients);
    let mut cursor = 0;
    for client_id in 0..n_clients {
        let size = base + usize::from(client_id < remainder);
        let samples = order[cursor..cursor + size]
            .iter()
            .map(|&i| data[i].clone())
            .collect();
        cursor += size;
        shards.push(ClientShard {
            client_id: client_id as u64,
            samples,
        });
    }
    Ok(shards)
}

/// Label-skewed partitioning: for every class, client proportions are drawn
/// from a symmetric Dirichlet(α) and that class's samples are dealt
/// accordingly (largest-remainder rounding keeps counts exact). Low α gives
/// strong skew; α → ∞ recovers IID. Draws are retried (fresh Dirichlet
/// samples from the same stream) until every shard is nonempty.
pub fn partition_noniid(
    data: &[Sample],
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>, DataError> {
    if n_clients == 0 {
        return Err(DataError::Config("need at least one client".to_string()));
    }
    if n_clients > data.len() {
        return Err(DataError::Config(format!(
            "cannot split {} samples across {n_clients} clients without empty shards",
            data.len()
        )));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(DataError::Config(format!(
            "Dirichlet concentration {alpha} must be positive and finite"
        )));
    }
    if n_clients == 1 {
        return Ok(vec![ClientShard {
            client_id: 0,
            samples: data.to_vec(),
        }]);
    }

    let num_classes = data
        .iter()
        .map(|s| s.label)
        .max()
        .expect("nonempty checked above")
        + 1;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (index, sample) in data.iter().enumerate() {
        by_class[sample.label].push(index);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dirichlet = Dirichlet::new(&vec![alpha; n_clients]).map_err(|e| {
        DataError::Config(format!("Dirichlet({alpha}) over {n_clients} clients: {e}"))
    })?;

    const MAX_ATTEMPTS: usize = 1000;
    for _ in 0..MAX_ATTEMPTS {
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for class_indices in by_class.iter().filter(|c| !c.is_empty()) {
            let mut shuffled = class_indices.clone();
            shuffled.shuffle(&mut rng);
            let proportions = dirichlet.sample(&mut rng);
            let counts = apportion(shuffled.len(), &proportions);
            let mut cursor = 0;
            for (client, count) in counts.into_iter().enumerate() {
                assignments[client].extend_from_slice(&shuffled[cursor..cursor + count]);
                cursor += count;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            return Ok(assignments
                .into_iter()
                .enumerate()
                .map(|(client_id, indices)| ClientShard {
                    client_id: client_id as u64,
                    samples: indices.into_iter().map(|i| data[i].clone()).collect(),
                })
                .collect());
        }
    }
    Err(DataError::Config(format!(
        "could not draw nonempty shards for {n_clients} clients (alpha {alpha}) \
         after {MAX_ATTEMPTS} attempts"
    )))
}

/// Largest-remainder apportionment of `total` items by `proportions`:
/// exact totals, deterministic (ties resolved by lower index).
fn apportion(total: usize, proportions: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|p| (p * total as f64).floor() as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(index, _) in remainders.iter().take(total - assigned) {
        counts[index] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::HashMap;

    fn idx_image_bytes(count: usize, rows: usize, cols: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(count as u32).to_be_bytes());
        bytes.extend_from_slice(&(rows as u32).to_be_bytes());
        bytes.extend_from_slice(&(cols as u32).to_be_bytes());
        for i in 0..count * rows * cols {
            bytes.push((i % 256) as u8);
        }
        bytes
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    fn toy_samples(n: usize, num_classes: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                features: Tensor::new(vec![2], vec![i as f64, 1.0]).unwrap(),
                label: i % num_classes,
            })
            .collect()
    }

    /// Multiset of (feature fingerprint, label) pairs for coverage checks.
    fn sample_counts(samples: impl Iterator<Item = Sample>) -> HashMap<(u64, usize), usize> {
        let mut counts = HashMap::new();
        for s in samples {
            let fp = s.features.values()[0].to_bits();
            *counts.entry((fp, s.label)).or_insert(0) += 1;
        }
        counts
    }

    #[test]
    fn parses_wellformed_idx_pair() {
        let images = parse_idx_images(&idx_image_bytes(3, 28, 28)).unwrap();
        assert_eq!(images.len(), 3);
        assert_eq!(images[0].shape(), &[1, 28, 28]);
        assert_eq!(images[0].values()[0], 0.0);
        assert_eq!(images[0].values()[255], 1.0);

        let labels = parse_idx_labels(&idx_label_bytes(&[0, 5, 9])).unwrap();
        assert_eq!(labels, vec![0, 5, 9]);

        let samples = zip_samples(images, labels).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[1].label, 5);
    }

    #[test]
    fn idx_images_rejects_bad_magic_truncation_and_trailing() {
        let mut bad_magic = idx_image_bytes(1, 2, 2);
        bad_magic[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad_magic),
            Err(DataError::Format { offset: 0, .. })
        ));

        let mut truncated = idx_image_bytes(2, 2, 2);
        truncated.pop();
        assert!(matches!(
            parse_idx_images(&truncated),
            Err(DataError::Format { .. })
        ));

        let mut trailing = idx_image_bytes(2, 2, 2);
        trailing.push(0);
        assert!(matches!(
            parse_idx_images(&trailing),
            Err(DataError::Format { .. })
        ));

        assert!(matches!(
            parse_idx_images(&[0x00, 0x00]),
            Err(DataError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn idx_labels_rejects_out_of_range_byte() {
        let bytes = idx_label_bytes(&[1, 2, 10, 3]);
        let err = parse_idx_labels(&bytes).unwrap_err();
        assert_eq!(
            err,
            DataError::Format {
                offset: 10,
                reason: "label byte 10 outside 0..=9".to_string()
            }
        );
    }

    #[test]
    fn zip_samples_rejects_length_mismatch() {
        let images = parse_idx_images(&idx_image_bytes(2, 2, 2)).unwrap();
        assert!(matches!(
            zip_samples(images, vec![1]),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn parses_har_text() {
        let features: String = (0..3)
            .map(|i| {
                (0..561)
                    .map(|j| format!("{:.6}", (i * 561 + j) as f64 * 1e-4))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n");
        let labels = "1\n6\n3\n";
        let samples = parse_har(&features, labels).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].features.shape(), &[561]);
        assert_eq!(samples[0].label, 0);
        assert_eq!(samples[1].label, 5);
        assert_eq!(samples[2].label, 2);
    }

    #[test]
    fn har_rejects_bad_lines_with_position() {
        let good_line = vec!["0.5"; 561].join(" ");
        let short_line = vec!["0.5"; 560].join(" ");
        let text = format!("{good_line}\n{short_line}\n");
        let err = parse_har(&text, "1\n1\n").unwrap_err();
        assert_eq!(
            err,
            DataError::Line {
                line: 2,
                reason: "expected 561 features, found 560".to_string()
            }
        );

        let text = format!("{good_line}\n");
        let err = parse_har(&text, "7\n").unwrap_err();
        assert!(matches!(err, DataError::Line { line: 1, .. }));

        let bad_token = format!("{} xyz\n", vec!["0.5"; 560].join(" "));
        let err = parse_har(&bad_token, "1\n").unwrap_err();
        assert!(matches!(err, DataError::Line { line: 1, .. }));
    }

    #[test]
    fn subset_is_seeded_and_sized() {
        let data = toy_samples(100, 10);
        let a = server_train_subset(&data, 0.1, 42).unwrap();
        let b = server_train_subset(&data, 0.1, 42).unwrap();
        let c = server_train_subset(&data, 0.1, 43).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);

        // Without replacement: all fingerprints distinct.
        let counts = sample_counts(a.into_iter());
        assert!(counts.values().all(|&n| n == 1));

        assert!(server_train_subset(&data, 0.0, 1).is_err());
        assert!(server_train_subset(&data, 1.5, 1).is_err());
        assert_eq!(server_train_subset(&data, 1.0, 1).unwrap().len(), 100);
    }

    #[test]
    fn iid_sizes_differ_by_at_most_one() {
        let data = toy_samples(10, 10);
        let shards = partition_iid(&data, 3, 7).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.samples.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(
            shards.iter().map(|s| s.client_id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn partition_rejects_degenerate_configs() {
        let data = toy_samples(5, 5);
        assert!(partition_iid(&data, 0, 1).is_err());
        assert!(partition_iid(&data, 6, 1).is_err());
        assert!(partition_noniid(&data, 0, 0.5, 1).is_err());
        assert!(partition_noniid(&data, 6, 0.5, 1).is_err());
        assert!(partition_noniid(&data, 2, 0.0, 1).is_err());
        assert!(partition_noniid(&data, 2, f64::NAN, 1).is_err());
    }

    #[test]
    fn noniid_high_alpha_approaches_iid() {
        // With alpha = 1000 every class spreads nearly uniformly: each
        // client's class histogram should be close to the global one.
        let data = toy_samples(2000, 10);
        let shards = partition_noniid(&data, 4, 1000.0, 11).unwrap();
        for shard in &shards {
            let mut histogram = [0usize; 10];
            for s in &shard.samples {
                histogram[s.label] += 1;
            }
            let total: usize = histogram.iter().sum();
            for &count in &histogram {
                let fraction = count as f64 / total as f64;
                assert!(
                    (fraction - 0.1).abs() < 0.05,
                    "client {} class fraction {fraction} far from uniform",
                    shard.client_id
                );
            }
        }
    }

    #[test]
    fn noniid_low_alpha_concentrates_labels() {
        let data = toy_samples(2000, 10);
        let shards = partition_noniid(&data, 5, 0.1, 13).unwrap();
        // At alpha = 0.1 at least one client should hold >= 60% of its mass
        // in at most two classes.
        let concentrated = shards.iter().any(|shard| {
            let mut histogram = [0usize; 10];
            for s in &shard.samples {
                histogram[s.label] += 1;
            }
            let total: usize = histogram.iter().sum();
            let mut sorted = histogram;
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            (sorted[0] + sorted[1]) as f64 >= 0.6 * total as f64
        });
        assert!(concentrated, "no client shows label skew at alpha = 0.1");
        assert!(shards.iter().all(|s| !s.samples.is_empty()));
    }

    #[test]
    fn noniid_is_deterministic_per_seed() {
        let data = toy_samples(500, 6);
        let a = partition_noniid(&data, 5, 0.5, 21).unwrap();
        let b = partition_noniid(&data, 5, 0.5, 21).unwrap();
        let c = partition_noniid(&data, 5, 0.5, 22).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn apportion_is_exact_and_deterministic() {
        let counts = apportion(10, &[0.5, 0.3, 0.2]);
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(counts, vec![5, 3, 2]);
        let counts = apportion(7, &[1.0 / 3.0; 3]);
        assert_eq!(counts.iter().sum::<usize>(), 7);
    }

    proptest! {
        /// Every partition is a disjoint cover: shard multisets union back
        /// to the input multiset exactly.
        #[test]
        fn partitions_cover_exactly(
            n in 10usize..200,
            n_clients in 1usize..8,
            seed in 0u64..1000,
            iid in proptest::bool::ANY,
        ) {
            prop_assume!(n_clients <= n);
            let data = toy_samples(n, 7);
            let shards = if iid {
                partition_iid(&data, n_clients, seed).unwrap()
            } else {
                partition_noniid(&data, n_clients, 0.5, seed).unwrap()
            };
            prop_assert_eq!(shards.len(), n_clients);
            let original = sample_counts(data.into_iter());
            let scattered = sample_counts(
                shards.into_iter().flat_map(|s| s.samples.into_iter()),
            );
            prop_assert_eq!(original, scattered);
        }

        /// IDX parsers never panic on arbitrary bytes.
        #[test]
        fn idx_parsers_are_total(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            let _ = parse_idx_images(&bytes);
            let _ = parse_idx_labels(&bytes);
        }

        /// The HAR parser never panics on arbitrary text.
        #[test]
        fn har_parser_is_total(text in "[ -~\n]{0,400}") {
            let _ = parse_har(&text, &text);
        }
    }

    #[test]
    fn apportion_handles_random_proportions() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let k = rng.gen_range(1..10);
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let total_raw: f64 = raw.iter().sum();
            let proportions: Vec<f64> = raw.iter().map(|r| r / total_raw).collect();
            let total = rng.gen_range(0..500);
            let counts = apportion(total, &proportions);
            assert_eq!(counts.iter().sum::<usize>(), total);
        }
    }
}
