//! Multi-relational graph learning and multi-scale matching for group
//! re-identification.
//!
//! Groups arrive as member boxes, keypoint counts and per-member
//! embeddings. The pipeline derives explicit relation masks
//! ([`relations`]), builds one global and four relation-specific affinity
//! matrices ([`graphs`]), propagates features over all of them with a
//! multi-graph convolution ([`mgnn`], trained by [`trainer`]), and ranks
//! gallery groups by fusing node-, cluster- and group-level similarity
//! ([`matching`]). [`eval`] scores rankings with CMC and mAP.

pub mod domain;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod graphs;
pub mod linalg;
pub mod matching;
pub mod mgnn;
pub mod relations;
pub mod storage;
pub mod synth;
pub mod trainer;

pub use domain::{
    canonical_order, AffinitySet, ClusterMode, Config, GraphToggles, GroupSample, LossToggles,
    MatchScore, Matrix, MemberBox, ModelParams, RelationMasks,
};
pub use error::{Error, Result};
pub use exec::Execution;
