//! Geometry-aligned fusion of voxel and multi-view image features into
//! per-Gaussian updates.

mod fusion;
mod image;
mod model;
mod ops;
mod voxel;

pub use fusion::{
    decode_update, film, fuse_levels, gaf_forward_var, gaf_layout, geo_vlad, guided_offsets, init_gaf, level_attention,
    level_tokens, offset_grid, raw_slots, sample_locations, update_gaussian, GafConfig, LevelTokens, Named, ViewVars,
    UPDATE_GEOMETRY,
};
pub use image::{backbone_layout, check_strides, extract_pyramid, image_tensor, init_backbone, pyramid_var, FeaturePyramid, LevelVar};
pub use model::{constant_gaussians, gaf_forward, gaussians_from_vars, OccNet, SceneInput};
pub use ops::{
    anchor_geometry_feature, bilinear_sample, bilinear_value, gather_rows, project, project_var, sparse_conv, tap_index,
    NeighborTable, Projection, VoxelIndex, CENTER_TAP,
};
pub use voxel::{encode_values, encoder_layout, init_encoder, psi, sparse_encode, voxelize, SparseVoxelGrid, PSI_DIM};


#[cfg(test)]
mod tests;
