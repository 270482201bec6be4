//! Event-based motion deblurring primitives.
//!
//! * [`model`] and [`io`]: events, images, voxel grids and their file formats.
//! * [`simulate`]: threshold-crossing event simulation, blur synthesis and
//!   voxel augmentation.
//! * [`represent`]: SCER, SBT and Stack voxel grids, the event mask and
//!   mask-gated feature mixing.
//! * [`edi`]: event-based double integral inversion.
//! * [`attention`]: reference cross-modal channel attention with analytic
//!   gradients and a finite-difference checker.
//! * [`metrics`]: PSNR, SSIM and relative error-reduction arithmetic.

pub mod attention;
pub mod edi;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod represent;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{Event, EventStream, IntensityImage, LatentImage, Polarity, ThresholdMap, VoxelGrid};
