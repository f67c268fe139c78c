//! Image container, restoration filters and seeded augmentations.

mod augment;
mod filters;
mod image;

pub use augment::{
    add_gaussian_noise, augment, brightness_contrast, hflip, hsv_jitter, mixup, mosaic, rotate, Policy, Sample,
    MIN_VISIBLE_FRACTION,
};
pub use filters::{
    adaptive_median, gaussian_blur, gaussian_kernel, richardson_lucy, unsharp_mask, FilterChain, FilterSettings,
    FilterStep, Psf, DEFAULT_VARIANCE_THRESHOLD, RL_EPSILON,
};
pub use image::{normalize_ir, resize_bilinear, Image};
