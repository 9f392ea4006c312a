//! Criterion benchmarks for the hot pipeline stages; see `benches/`.
