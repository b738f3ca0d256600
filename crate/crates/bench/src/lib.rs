//! Criterion benchmarks for the core algorithms live in `benches/`.
