//! Image, volume and field containers plus the sampling and filtering
//! kernels every stage builds on.

mod field;
mod image;
mod ops;
mod sector;

pub use field::DeformationField2D;
pub use image::{Image2D, Mask2D, Volume3D};
pub use ops::{
    bilinear_sample, extract_slice, gaussian_blur, gaussian_blur_field, gaussian_kernel, gradient_xy, warp,
    window_level, window_level_volume,
};
pub use sector::SectorGeometry;

pub(crate) use ops::{bilinear_cell, bilinear_mix, blur_plane};
