//! Point-cloud iterative reconstruction for 3D photoacoustic imaging.
//!
//! The imaged volume is represented as a cloud of Gaussian-ball acoustic
//! sources. Sensor signals are predicted in closed form ([`radiator`]),
//! the cloud is fitted to measured signals with a coarse-to-fine schedule
//! over temporal sampling rates ([`optimizer`]), and the result is splatted
//! onto a voxel grid ([`render`]). A universal back-projection baseline and
//! image-quality metrics live in [`baseline`].
//!
//! Typical pipeline:
//!
//! ```text
//! sensors ──► geometry::build_envelope ──► geometry::initialize_cloud
//!                                               │
//! signals ──► optimizer::zero_gradient_filter ◄─┘
//!                      │
//!                      ▼
//!        optimizer::run_hierarchical ──► optimizer::positivity_refine
//!                                               │
//!                                               ▼
//!                                       render::voxelize
//! ```

pub mod baseline;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod optimizer;
pub mod phantom;
pub mod pipeline;
pub mod radiator;
pub mod render;

pub use error::{Error, Result};
pub use model::{PointCloud, RngSeed, SensorArray, SignalSet, SourceBall, TimeGrid, Vec3, VoxelGrid};
