//! Retrieval of movie key scenes from natural-language descriptions.
//!
//! The library covers the full desk-scale pipeline:
//!
//! * [`tensorio`] — the `CMDT` tensor container, dataset manifests, and a
//!   seeded synthetic dataset generator with planted text/video
//!   correspondences.
//! * [`autodiff`] — a small reverse-mode tape over the operations the model
//!   needs, plus a central-difference gradient checker and the parameter
//!   store.
//! * [`encoders`] — mean temporal aggregation, gated embedding units, and
//!   NetVLAD text aggregation used to embed each feature stream.
//! * [`retrieval`] — text-conditioned mixture weighting of per-expert
//!   similarities across a window of neighbouring clips, and full
//!   similarity-matrix construction.
//! * [`characters`] — the character embedding bank, face-track linking and
//!   labeling, and character occurrence vectors.
//! * [`training`] — bidirectional max-margin ranking loss, Adam, and the
//!   early-stopping training loop with checkpointing.
//! * [`evaluation`] — rank metrics and the cross-movie / within-movie
//!   evaluation protocols.
//! * [`alignment`] — ordered injective alignment of clip sequences onto plot
//!   sentences with coverage statistics.

pub mod alignment;
pub mod autodiff;
mod vecmath;
pub mod characters;
pub mod encoders;
pub mod evaluation;
pub mod model;
pub mod retrieval;
pub mod tensorio;
pub mod training;

pub use tensorio::Tensor;
