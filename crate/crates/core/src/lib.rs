//! Bird's-eye-view LiDAR global localization.
//!
//! The pipeline projects a point cloud onto a normalized-density BEV image,
//! runs a rotation-equivariant convolutional feature extractor over it,
//! pools the local features into a rotation-invariant global descriptor for
//! place retrieval, and recovers a planar pose by matching FAST keypoints
//! between the query and the retrieved map image.
//!
//! The crate is `no_std` (with `alloc`). The default `std` feature only
//! enables runtime SIMD dispatch in the matrix kernels; results are identical
//! either way. File formats, IO and the command line live in the `bevloc`
//! companion crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod backbone;
pub mod bev;
pub mod database;
pub mod error;
pub mod eval;
pub mod geom;
pub mod pipeline;
pub mod registration;
pub mod rem;
pub mod synth;
pub mod vlad;

mod math;

pub use error::{Error, Result};
pub use geom::{Point3, PointCloud, Se2Pose};
pub use pipeline::{Pipeline, PipelineConfig};
