//! Approximate-multiplier substitution for low-bitwidth quantized CNNs.
//!
//! The pipeline mirrors how an accelerator designer would use a library of
//! LUT-characterized approximate multipliers:
//!
//! 1. [`perturb`] estimates, once per layer, the gradient and a Gauss-Newton
//!    Hessian of the loss with respect to the multiplier error table, so the
//!    loss perturbation of any candidate is a cheap quadratic form.
//! 2. [`select`] picks one multiplier per layer by exactly solving the
//!    multiple-choice knapsack under an energy-ratio budget.
//! 3. [`calib`] recovers accuracy without retraining: per-layer input-range
//!    search followed by learnable weight clipping.
//!
//! [`netsim`] is the bit-exact integer CNN engine everything runs on, with
//! [`quant`] providing the affine quantizer and [`mullib`] the multipliers.

pub mod calib;
pub mod data;
pub mod error;
pub mod modelfile;
pub mod mullib;
pub mod netsim;
pub mod par;
pub mod perturb;
pub mod pipeline;
pub mod quant;
pub mod select;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
