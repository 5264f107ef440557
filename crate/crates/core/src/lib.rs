//! Synthetic RGB-D relocalization stack.
//!
//! The crate is organized as a pipeline over keyframes rendered from a
//! procedural scene:
//!
//! 1. [`geometry`] — SE(3) poses, pinhole projection, trajectory text IO.
//! 2. [`scene`] — procedural scene synthesis, feature selection, patch
//!    extraction, dataset directory IO.
//! 3. [`similarity`] — reprojection-overlap similarity between keyframes.
//! 4. [`embedding`] — patch-set encoder producing compact keyframe codes,
//!    trained against the similarity matrix.
//! 5. [`graph`] — graph convolution over the embedding graph and sub-graph
//!    queries for loop-closure candidates.
//! 6. [`pose_graph`] — pose-graph assembly and Levenberg-Marquardt refinement.
//! 7. [`evaluate`] — absolute trajectory error and heatmap comparison.
//!
//! All numeric code is generic over [`Scalar`]; the aliases at the crate root
//! fix `f64` as the working precision of the pipeline binaries.

pub mod embedding;
pub mod evaluate;
pub mod geometry;
pub mod graph;
pub mod pose_graph;
pub mod scalar;
pub mod scene;
pub mod similarity;

mod sgd;

pub use scalar::Scalar;

/// Working precision of the pipeline binaries.
pub type Real = f64;

pub type Pose64 = geometry::Pose<f64>;
pub type Pose32 = geometry::Pose<f32>;
pub type Twist64 = geometry::Twist<f64>;
pub type Intrinsics64 = geometry::CameraIntrinsics<f64>;
pub type Trajectory64 = geometry::Trajectory<f64>;
pub type DepthMap64 = similarity::DepthMap<f64>;
pub type SimilarityMatrix64 = similarity::SimilarityMatrix<f64>;
pub type EncoderParams64 = embedding::EncoderParams<f64>;
pub type GnnParams64 = graph::GnnParams<f64>;

/// Coarse classification of failures, used by callers that map errors to
/// process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// File IO and format parsing failures.
    Io,
    /// Inputs that violate a documented precondition.
    Validation,
    /// Numeric breakdown at run time (non-finite values, singular systems).
    Numeric,
}
