//! Structured dropout and training-time image transforms.

mod augment;
mod dropblock;

pub use augment::{augment, normalize, AugmentConfig, IMAGENET_MEAN, IMAGENET_STD};
pub use dropblock::{dropblock, dropblock_on_tape, sample_keep_mask, seed_probability, DropBlockConfig, KeepMask};
