//! Controllable liver lesion synthesis with decoupled shape and density.
//!
//! A lesion is decomposed into a binary mask (shape) and a 100-bin
//! intensity histogram (density). A conditional U-Net generator with a
//! dense histogram branch learns to reconstruct lesions from that pair;
//! editing either input at inference time steers the synthesized lesion.
//! The crate also covers adversarial training, implanting synthesized
//! lesions into healthy slices and a segmentation benchmark that compares
//! mask-only against mask+density synthesis.

pub mod dataset;
pub mod error;
pub mod export;
pub mod imaging;
pub mod implant;
pub mod lsf;
#[cfg(feature = "nifti")]
pub mod nifti_import;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod seg_eval;
pub mod synthesis;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use imaging::{
    compute_histogram, extract_lesion_sample, histogram_l1, normalize_hu, DensityHistogram, Grid,
    HuWindow, LesionSample, Mask, Provenance, Slice, HIST_BINS,
};
