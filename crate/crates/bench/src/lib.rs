//! Criterion benchmarks for the fixed-point, inference and criticality
//! kernels. Run with `cargo bench -p qdbn-bench`.
