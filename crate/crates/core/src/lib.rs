//! Markerless motion capture from calibrated multi-camera keypoints.
//!
//! The stages are independent modules and can be used alone:
//! [`calib`] estimates cameras, [`triang`] lifts 2D detections to 3D,
//! [`augment`] predicts a dense marker set, [`filt`] smooths trajectories,
//! [`kin`] fits a skeleton and [`anthro`] measures a body mesh.
//! [`pipeline`] chains them and [`synth`] generates test captures.

pub mod anthro;
pub mod augment;
pub mod calib;
pub mod filt;
pub mod io;
pub mod kin;
pub mod landmarks;
pub mod pipeline;
pub mod rig;
pub mod synth;
pub mod triang;

pub use anthro::{BodyMesh, DensityModel, MeasurementReport};
pub use augment::{Augmenter, LandmarkSequence, MarkerSetTemplate};
pub use calib::{CorrespondenceSet, CorrespondenceSource};
pub use filt::{FilterSpec, MarkerTrajectory};
pub use kin::{IkWeights, JointAngleSeries, SkeletonModel};
pub use landmarks::{Landmark, LANDMARK_COUNT};
pub use pipeline::{PipelineConfig, PipelineError};
pub use rig::{CameraModel, Distortion, PixelPoint, ProjectionMatrix, Rig, WorldPoint};
pub use triang::{ExclusionSummary, FrameResult, GateConfig, GatePreset, KeypointFrame, TriangulatedPoint};
