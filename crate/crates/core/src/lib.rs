//! Desk-scale mask-classification segmentation pipeline.
//!
//! The crate covers the full two-stage flow: binary mask kernels and the RLE
//! codec, optimal bipartite matching with the set-prediction criterion,
//! region-selection strategies, Endovis-style metrics with oracle upper
//! bounds, a masked-attention set-prediction segmenter trained with a
//! hand-rolled reverse-mode tape, a temporal consistency head, and seeded
//! synthetic data generators backing every test tier.

pub mod error;
pub mod graph;
pub mod inference;
pub mod io;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
pub use inference::{InferenceConfig, ProposalSet, RegionProposal, SelectedRegion, SoftMask, Strategy};
pub use mask::{class_union, mask_iou, rle_decode, rle_encode, BinaryMask, ClassId, RleMask};
pub use matching::{hungarian, pair_cost, set_criterion, Assignment, CostMatrix, MatchWeights};
pub use metrics::{
    aggregate_folds, evaluate, frame_class_ious, upper_bound, EvalReport, FrameAnnotation,
    FramePredictions, UpperBoundMatching, UpperBoundSource,
};
