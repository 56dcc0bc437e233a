//! Criterion benchmarks for the training and evaluation kernels live in
//! `benches/`.
