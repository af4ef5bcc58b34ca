//! Criterion benchmarks for the matching pipeline live in `benches/`.
