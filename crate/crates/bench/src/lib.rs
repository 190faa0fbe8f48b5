//! Criterion micro-benchmarks for the sparse engine live under `benches/`.
//! This crate intentionally has no library surface of its own; the
//! macro-level sparse-vs-dense harness is `sparseseg_core::bench`.
