//! Criterion benchmarks for the convolution kernels and the training step.
//! See `benches/`.
