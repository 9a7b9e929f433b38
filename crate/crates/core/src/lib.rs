//! Federated evaluation with zero-knowledge threshold proofs.
//!
//! A server publishes a model, a loss threshold, and a fresh round nonce.
//! Each client evaluates the model on its private shard and either proves in
//! zero knowledge that its local loss is strictly below the threshold or
//! declines. The server verifies proofs, tallies a binary outcome per client,
//! and never learns the loss values themselves.
//!
//! Module map:
//! - [`fixedpoint`]: deterministic fixed-point encoding of loss values.
//! - [`nn`]: small from-scratch neural nets (CNN for image digits, MLP for
//!   activity windows), training, and canonical model hashing.
//! - [`dataio`]: dataset parsing and client shard partitioning.
//! - [`r1cs`]: rank-1 constraint systems and the threshold comparison circuit.
//! - [`zkbackend`]: proof backends — a Groth16 SNARK over BLS12-381 and a
//!   transparent mock for tests.
//! - [`protocol`]: round messages, wire encoding, server/client state
//!   machines, and transports.
//! - [`harness`]: experiment runner, metrics, CSV reporting, and synthetic
//!   dataset fixtures.

pub mod dataio;
pub mod fixedpoint;
pub mod harness;
pub mod nn;
pub mod protocol;
pub mod r1cs;
pub mod zkbackend;
