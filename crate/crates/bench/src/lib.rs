//! Criterion benchmarks for the objectives; see `benches/`.
