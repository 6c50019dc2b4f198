//! Consecutive masked-image-modeling pretraining at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, seeded RNG and a
//!   finite-difference gradient oracle.
//! * [`vit`]: patch embedding, sin-cos positions, the ViT encoder and the
//!   lightweight reconstruction decoder.
//! * [`mim`]: mask sampling, visible-token selection and the masked-pixel
//!   L1 reconstruction loss.
//! * [`train`]: AdamW, cosine schedule, checkpoints and stage orchestration
//!   (pretrain, continue, finetune).
//! * [`data`]: PPM/PGM I/O, manifests, tiling, augmentation and the
//!   synthetic two-domain corpus generator.
//! * [`eval`]: Top-1/mIoU, strategy comparisons and figure emitters.

pub mod data;
pub mod error;
pub mod image;
pub mod eval;
pub mod mim;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use image::ImageTensor;

/// Environment variable that forces single-threaded reference execution.
pub const REFERENCE_MODE_ENV: &str = "MIMCSPT_REFERENCE_MODE";

/// True when `MIMCSPT_REFERENCE_MODE=1` is set.
pub fn reference_mode_forced() -> bool {
    std::env::var(REFERENCE_MODE_ENV).is_ok_and(|v| v == "1")
}
