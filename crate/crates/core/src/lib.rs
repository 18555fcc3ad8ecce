//! Smooth, band-limited adversarial perturbations of triangle meshes.

pub mod artifacts;
pub mod attacks;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod grad;
pub mod losses;
pub mod mesh;
pub mod nn;
pub mod optim;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use mesh::Mesh;
pub use tensor::Tensor;
