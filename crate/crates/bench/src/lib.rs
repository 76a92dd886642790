//! Criterion benchmarks for the relpot kernels; see `benches/`.
