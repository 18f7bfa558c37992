//! Dense tensors, a reverse-mode tape, and the SGD/Adam optimizers.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{Adam, ParamStore, Sgd};
pub use tape::{BatchStats, BnMode, Gradients, Tape, Var, BN_EPS};
pub use tensor::Tensor;

/// Blends batch statistics into running statistics: `r ← (1−m)·r + m·batch`.
pub fn update_running_stats(running_mean: &mut [f64], running_var: &mut [f64], stats: &BatchStats, momentum: f64) {
    for (r, b) in running_mean.iter_mut().zip(&stats.mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, b) in running_var.iter_mut().zip(&stats.var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// He-normal initialisation for a layer with `fan_in` inputs.
pub fn he_init<R: rand::Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
