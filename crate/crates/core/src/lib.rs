//! Pose estimation through tri-axis images: rendering, axis extraction,
//! closed-form pose recovery, guided diffusion and evaluation metrics.

pub mod camera;
pub mod diffusion;
pub mod extract;
pub mod image;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod tbm;

pub use camera::{Axis, CameraIntrinsics, GeometryError, Pose};
pub use extract::{AxisObservation, ExtractError};
pub use image::{QueryImage, TriAxisImage};
pub use tbm::{LegRatios, SolveError};
