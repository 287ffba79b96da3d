//! Parameter-efficient transfer learning for dual-encoder image-text retrieval.
//!
//! The crate bundles a small CLIP-style dual encoder on its own autodiff tape,
//! a family of PETL strategies (MRS-Adapter and baselines), the hybrid
//! multi-modal contrastive objective, retrieval metrics, a data pipeline with a
//! synthetic toy dataset, and an experiment runner.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod objectives;
pub mod petl;
pub mod retrieval;
pub mod runner;

pub use encoder::{DualEncoderModel, EncoderConfig, Modality};
pub use error::{PetlError, Result};
pub use petl::{PetlStrategy, StrategyKind};
