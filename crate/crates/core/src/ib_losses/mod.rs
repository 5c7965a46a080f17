//! Training objectives and the exact discrete oracle.
//!
//! All losses are in nats; the discrete oracle reports bits.

pub mod discrete;
pub mod kl;
pub mod vib;

pub use discrete::{exact_ib_objective, exact_vib_objective, DiscreteSystem};
pub use kl::{kl_gaussian, kl_log_uniform, kl_log_uniform_with_grad, GaussianKlGrad, KlConstants};
pub use vib::{
    cross_entropy, log_softmax, softmax_checked, vib_loss, vib_loss_per_example, vib_loss_with_noise, vl_vib_loss,
    Sigma2Sampler, VibLossTerms, VibModel,
};
