//! Criterion benchmarks for the training engine live in `benches/`.
