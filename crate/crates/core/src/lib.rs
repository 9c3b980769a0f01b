//! Feed-forward multi-view reconstruction into Gaussian splats.
//!
//! Posed input images are fused with per-pixel Pluecker rays, tokenized into
//! patches, serialized by a four-direction cross-scan, run through a stack of
//! selective state-space blocks, and decoded into a constrained set of 3-D
//! Gaussians that a differentiable rasterizer renders for supervision. The
//! same splats export to viewer-compatible PLY and, via TSDF fusion plus
//! marching cubes, to OBJ meshes.

pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod mesh;
pub mod model;
pub mod par;
pub mod rng;
pub mod splat;
pub mod ssm;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
