//! Interactive object retrieval over precomputed region embeddings.
//!
//! A retrieval session keeps an [`IntentState`](intent::IntentState): a set of
//! positive exemplars (the prompt, confirmed cues, refinements) and a set of
//! negative exemplars (regions the user rejected). Every turn, all candidate
//! regions of the target image are re-scored with
//!
//! ```text
//! score(r) = max_{z+ in Z_pos} cos(r, z+) - lambda * max_{z- in Z_neg} cos(r, z-)
//! ```
//!
//! so a rejected region, and everything that looks like it, sinks in the
//! ranking while the rest of the list keeps its Turn-0 order.
//!
//! The crate is encoder-agnostic: embeddings come in through [`data::Bundle`]
//! manifests produced by whatever detector and vision-language model the
//! caller runs.
//!
//! Module map:
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`vecmath`] | unit-norm [`Embedding`], cosine, query fusion |
//! | [`intent`] | intent state, feedback, update rules |
//! | [`ranking`] | contrastive scorer, ablation variants, Sinkhorn baseline |
//! | [`theory`] | single-distractor resolution bound and its checks |
//! | [`data`] | boxes, IoU, bundle/query files, ambiguous-subset mining |
//! | [`session`] | the interaction loop, simulated user, scripted runs |
//! | [`metrics`] | detection AP, turn protocol, score traces |
//! | [`synth`] | seeded generator of ambiguous scenes |

pub mod data;
pub mod error;
pub mod intent;
pub mod metrics;
pub mod ranking;
pub mod session;
pub mod synth;
pub mod theory;
pub mod vecmath;

pub use error::{Error, Result};
pub use vecmath::Embedding;

/// Embedding dimension of the reference encoder setup.
pub const DEFAULT_DIM: usize = 512;
