//! Discrete normalizing flows for categorical sequences.
//!
//! A model is a tractable base distribution over a latent sequence `x` plus a
//! stack of invertible modular location-scale transforms `y = f(x)`. Because
//! every transform is a bijection on `{0, …, K−1}^D`, the data likelihood is
//! simply `p(y) = p_base(f⁻¹(y))`. Parameters of the discrete transforms are
//! trained with a straight-through estimator: hard argmax on the forward pass,
//! the Jacobian of a tempered softmax on the backward pass.

pub mod autodiff;
pub mod bases;
pub mod conditioner;
pub mod datagen;
pub mod error;
pub mod flows;
pub mod model;
pub mod modular;
pub mod oracle;

pub use error::{FlowError, Result};
