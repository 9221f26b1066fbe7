//! Dense linear algebra, differentiable layers, Gaussian utilities and Adam.

pub mod adam;
pub mod gaussian;
pub mod gradcheck;
pub mod layers;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gaussian::{
    gaussian_reparameterize, gaussian_reparameterize_backward, kl_diag_gaussian, kl_diag_gaussian_backward,
};
pub use layers::{
    affine_backward, affine_forward, log_softmax, softmax, softmax_backward, softmax_forward, softmax_vjp, softplus,
    softplus_backward, softplus_forward, DenseLayer,
};
pub use tensor::Tensor2;
