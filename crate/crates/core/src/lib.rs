//! Streaming 3D semantic occupancy prediction with an explicit Gaussian world model.
//!
//! The scene is a fixed-size set of semantic 3D Gaussians carried from frame to
//! frame. Each step aligns the carried Gaussians to the current ego frame,
//! replaces the ones that left the perception range with fresh samples in the
//! newly observed region, moves dynamic Gaussians, refines everything against
//! the current observation and finally splats the result into a voxel grid.
//!
//! Module map:
//!
//! * [`gaussian`]: scene state, SE(3) poses, alignment, culling and completion.
//! * [`raster`]: Gaussian-to-voxel splatting, labels, analytic gradients, BEV images.
//! * [`losses`]: cross-entropy and Lovász-softmax objectives, IoU / mIoU metrics.
//! * [`refine`]: evolution and refinement layers driven by a pluggable operator.
//! * [`sim`]: synthetic driving world, ground truth occupancy and ray-cast observations.
//! * [`stream`]: the streaming loop, schedules, ablations, file formats and reports.

pub mod error;
pub mod gaussian;
pub mod losses;
pub mod raster;
pub mod refine;
pub mod seed;
pub mod sim;
pub mod stream;
pub mod taxonomy;

pub use error::{Error, Result};
