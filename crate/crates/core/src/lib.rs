//! Domain-generalizing vessel segmentation from anatomy-consistent
//! pseudo-modalities.
//!
//! Pipeline: [`phantom`] generates vessel trees and renders them in
//! acquisition styles; [`pseudomod`] trains synthesis networks whose latent
//! images form the pseudo-modality bank; [`meta_trainer`] trains the
//! segmentation network [`segnet`] episodically on that bank with
//! [`mixup`] samples and the [`losses`]; [`eval`] scores held-out styles.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod image;
pub mod losses;
pub mod manifest;
pub mod meta_trainer;
pub mod mixup;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod pseudomod;
pub mod rng;
pub mod segnet;

pub use error::{Error, Result};
