//! Multiscale image registration with hierarchical convolutional features,
//! and the tools around it: image I/O, evaluation harness and a closed-loop
//! tracking simulator.

pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod imgio;
pub mod matching;
pub mod nnet;
pub mod pipeline;
pub mod texture;
pub mod tracksim;

pub use error::{Error, Result};
pub use features::{CornerGate, DescriptorPyramid, HarrisParams};
pub use geometry::{Correspondence, Homography, Point2, RansacParams};
pub use imgio::ImageBuffer;
pub use matching::{DistanceWeights, FusedDistanceMatrix, MatchParams, MatchSet};
pub use nnet::{NetworkSpec, WeightBundle};
pub use pipeline::{Pipeline, PipelineConfig, RegistrationFailure, RegistrationResult, Stage};
