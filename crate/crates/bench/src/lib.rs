//! Criterion benchmarks for the frame codec, imaging kernels, replica
//! catalogue and query evaluation. Run with `cargo bench -p gridbox-bench`.
