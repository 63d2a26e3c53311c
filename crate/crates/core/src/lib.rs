//! Synthetic tumor-bearing brain MRI toolkit.
//!
//! The crate grows multispecies tumors inside labeled atlas brains, enriches
//! tumor-only segmentations with healthy-tissue labels by diffeomorphic atlas
//! registration, synthesizes four-modality intensities, adapts them toward a
//! real-image intensity distribution and scores segmentations with the BraTS
//! region metrics.

pub mod adapt;
pub mod filter;
pub mod growth;
pub mod metrics;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod synth;
pub mod volume;

pub use volume::{brain_mask, labels, GridGeometry, LabelVolume, Mask, Modality, MultimodalCase, ScalarVolume, Volume, VolumeError};
