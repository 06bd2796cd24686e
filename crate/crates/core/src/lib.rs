//! Numerical foundation for autoregressive multi-agent motion generation.
//!
//! Everything in this crate is plain `f64` math with no learned parameters:
//! rotation algebra and per-agent canonicalization, feature layouts for the
//! supported motion representations, window extraction and normalization,
//! a scripted synthetic interaction generator, the on-disk dataset
//! container, deterministic text embeddings and the evaluation metrics.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod layout;
pub mod metrics;
pub mod motion;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
pub use geometry::{
    apply_transform, apply_transform_frames, canonicalize, canonicalize_frames, matrix_to_rot6d,
    relative_transform, rot6d_to_matrix, CanonicalTransform, Rot6D, RotationMatrix3, Vec3,
};
pub use layout::{make_layout, ChannelRole, ChannelSlice, FacingRule, FeatureLayout, LayoutKind};
pub use motion::{extract_windows, foot_contacts, FrameBlock, MotionSequence, Normalizer, WindowSample};
