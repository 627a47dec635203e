//! Volumetric image-to-image networks built around global voxel transformer
//! operators (GVTOs), with a CPU tensor engine and reverse-mode autograd.

pub mod autograd;
pub mod data;
pub mod error;
pub mod gvto;
pub mod init;
pub mod metrics;
pub mod model;
pub mod nnops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Matrix, Tensor};
