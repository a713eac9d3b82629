//! Criterion benchmarks for the filter hot paths; see `benches/`.
