//! The adversarial disentangling autoencoder.
//!
//! An encoder (dense layer, ReLU, batchnorm) maps a preprocessed embedding `x` to a
//! code `z`. A decoder maps `[z; w]` back to a unit-norm embedding through a dense
//! layer, `tanh` and length normalisation, where `w` is the attribute posterior the
//! output should express. An adversary (two dense layers) tries to predict the
//! attribute from `z`.
//!
//! Training alternates two momentum-SGD updates on each mini-batch:
//!
//! 1. the adversary minimises `-(1/m) Σ log p_i`, where `p_i` is the probability it
//!    gives to item `i`'s true label;
//! 2. encoder and decoder minimise `(1/m) Σ [r(x̂_i, x_i) − log(1 − p_i)]`, with
//!    `r = 1 − cos` and the decoder conditioned on the calibrated posterior `w = ỹ`.
//!
//! Protection decodes with `w = 0.5` so that the output carries no preference for
//! either attribute value.

mod model;
mod network;
mod train;

pub use model::{load, parse, save, to_text, AeModel, Params, Player};
pub use network::{reconstruction_error, PROB_CLAMP};
pub use train::{
    adversary_auc, adversary_loss, autoencoder_loss, loss_and_grads, train, train_step, Batch, EpochLog, Objective,
    OptState, StepLosses, TrainConfig, TrainLog,
};

/// Size of the code `z`.
pub const Z_DIM: usize = 128;
/// Hidden units of the adversary.
pub const ADV_HIDDEN: usize = 64;
/// Batchnorm epsilon, also the floor of the running variances.
pub const BN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
