//! Criterion benchmarks for the tokenization kernels and model forward pass live in `benches/`.
