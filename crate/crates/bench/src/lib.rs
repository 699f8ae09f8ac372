//! Criterion benchmarks for the convolution, network and metric kernels.
//! Run with `cargo bench -p pslnet-bench`.
