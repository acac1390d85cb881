//! Criterion benchmarks for the detector kernels; see `benches/`.
