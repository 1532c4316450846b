//! Criterion benchmarks for the tensor kernels and the training loops.
//!
//! Run with `cargo bench -p move-bench`.

use move_core::Tensor;

/// Deterministic, non-trivial fill for benchmark inputs.
pub fn wave(shape: &[usize], phase: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| (i as f32 * 0.37 + phase).sin())
}
