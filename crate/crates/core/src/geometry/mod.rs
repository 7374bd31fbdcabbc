//! Point-cloud containers, augmentation and sampling.

mod augment;
mod cloud;
pub mod io;
mod sampling;

pub use augment::{apply, augment, random_rotation, rotation_z, AugmentParams, Mat3, RotationMode};
pub use cloud::{norm, normalize_unit_sphere, sq_dist, Point3, PointCloud};
pub use sampling::{
    fps, knn, patch_radius, sample_patches, KernelSelection, PatchSet, SamplerConfig, SamplingMethod,
    CUBOID_CUT_HALF_EXTENT, SLICE_CUT_HALF_WIDTH, SPHERE_CUT_RADIUS,
};
