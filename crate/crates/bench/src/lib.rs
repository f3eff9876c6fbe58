//! Criterion benchmarks for `lipode-core`; run with `cargo bench -p lipode-bench`.
//!
//! - `kernels`: spectral norm, GP path sampling, cover search, residual
//!   forward/backward, ODE integration and bound evaluation.
//! - `training`: one penalized minibatch gradient and one short epoch.
