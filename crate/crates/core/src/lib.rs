//! Desk-scale driving-scene toolkit: geometry and calibration types, a
//! procedural scene generator with an analytic LiDAR ray caster, a BEV
//! point-cloud codec with volumetric ray rendering, layout-to-view control-map
//! projection, lift-splat image-to-BEV pooling, a small reverse-mode autodiff
//! tape, rectified-flow diffusion blocks, structured caption scoring and
//! fusion, and Chamfer/Fréchet evaluation utilities.

pub mod bev;
pub mod caption;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod layout;
pub mod lss;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod tape;

pub use bev::{BevFeatureGrid, BevGridSpec, BevLatent, CodecParams};
pub use geometry::{CameraIntrinsics, CameraView, PointCloud, Pose};
pub use layout::{ControlMap, LayoutLatent};
pub use lss::{DepthBinning, ImageFeatureMap};
pub use metrics::{CropVolume, GaussianSummary};
pub use render::RayBatch;
pub use scene::{EgoTrajectory, LidarPattern, SceneLayout};
pub use tape::{Tape, TensorHandle};
