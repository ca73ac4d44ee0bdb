//! Location-canvas construction: landmark similarity fit, patch placement,
//! alpha compositing with a binary support mask, and the degradation bank.

pub mod canvas;
pub mod degrade;
pub mod similarity;

pub use canvas::{FacePatch, LocationCanvas, PasteRecord, Placement};
pub use degrade::{degrade_patch, Degradation, DegradationBank, DegradationSpec};
pub use similarity::{
    estimate_similarity, patch_to_image_scale, translation_offset, Landmarks5, Similarity,
};
