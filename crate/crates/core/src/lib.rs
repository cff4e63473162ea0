//! LiDAR-guided differentiable 3D Gaussian splatting on the CPU.
//!
//! A LiDAR cloud seeds the Gaussians, bounds where they may live during
//! densification, steers split directions into the local tangent plane and
//! supplies depth/normal supervision. Cameras use a two-coefficient radial
//! distortion model both for splatting and for LiDAR/image alignment.

pub mod align;
pub mod camera;
pub mod densify;
pub mod error;
pub mod eval;
pub mod io;
pub mod lidar_maps;
pub mod losses;
pub mod math;
pub mod rasterizer;
pub mod scene;
pub mod sh;
pub mod spatial;
pub mod testbed;
pub mod trainer;

pub use error::{Error, Result};
pub use scene::{DepthNormalMaps, DistortedCamera, Gaussian, GaussianSet, Image, LidarCloud, RadialUnits};
