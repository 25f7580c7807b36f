//! Multi-task LiDAR perception on sparse voxels.
//!
//! The crate covers the whole single-frame inference graph:
//!
//! * [`voxelizer`]: point cloud to voxel grid, voxel feature encoder, de-voxelization
//! * [`sparse`]: hash-indexed sparse tensors, rulebook convolutions and the 3D U-Net
//! * [`dense2d`]: dense BEV convolutions and the dense 3D convolution oracle
//! * [`gcp`]: global context pooling (sparse to BEV, 2D multi-scale extractor, BEV to sparse)
//! * [`heads`]: segmentation, BEV segmentation and center-based detection heads
//! * [`losses`]: loss components and uncertainty-weighted combination with analytic gradients
//! * [`refine`]: second-stage point/box scoring, score fusion and panoptic ids
//! * [`tta`]: test-time augmentation and score ensembling
//! * [`metrics`]: mIoU and PQ/SQ/RQ
//! * [`pipeline`]: configuration, synthetic scenes, weight init and end-to-end orchestration
//!
//! File formats live in [`io`] and [`weights`].

pub mod dense2d;
pub mod error;
pub mod gcp;
pub mod heads;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod refine;
pub mod selftest;
pub mod sparse;
pub mod tta;
pub mod voxelizer;
pub mod weights;

pub use error::{Error, Result};
