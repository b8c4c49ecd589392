//! LiDAR perception pipeline and adversarial spoofing-attack workbench.
//!
//! The perception side turns a point cloud into a bird's-eye feature grid,
//! scores every cell with a detector and clusters high-scoring cells into
//! obstacles. The attack side models what a laser spoofer can inject and
//! searches for a placement of the injected points that makes the pipeline
//! report an obstacle right in front of the vehicle.
//!
//! ```
//! use advlidar::{perceive, PerceptionConfig, Preprocessor, PointCloud, SurrogateDetector};
//!
//! let detector = SurrogateDetector::default();
//! let obstacles = perceive(&PointCloud::empty(), &PerceptionConfig::default(), &Preprocessor::default(), &detector).unwrap();
//! assert!(obstacles.is_empty());
//! ```

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod advgen;
pub mod detector;
pub mod error;
pub mod harness;
pub mod pointcloud;
pub mod postprocess;
pub mod preprocess;
pub mod spoof;

pub use advgen::{
    adv_loss, bilinear_sample, generate_adversarial, is_success, merge, transform_features, vanilla_optimize,
    AttackObjective, AttackResult, AttackTarget, OptimizerMode, SamplingSpec, TransformParams,
};
pub use detector::{extract_attribute, Attribute, DetectionGrid, Detector, SurrogateDetector, SurrogateParams};
pub use error::{Error, Result};
pub use pointcloud::{append, load_pointcloud, save_pointcloud, transform_pose, CloudFormat, Point, PointCloud, Pose};
pub use postprocess::{perceive, Connectivity, Obstacle, PerceptionConfig};
pub use preprocess::{
    extract_features, roi_filter, world_to_cell, Channel, FeatureGrid, GridGeometry, Preprocessor, RoiSpec,
};
pub use spoof::{
    align_trace, apply_capability, sample_trace_library, synthesize_trace, transform_trace_3d, Budget, CapabilityDelta,
    LidarTimingModel, SpoofTrace,
};
