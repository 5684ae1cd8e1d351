//! Exact conversion of 2D convolution layers into patch-input multi-head
//! self-attention layers, with rank-based head-count certification and a
//! toy two-phase (convolution → attention) training pipeline.

pub mod attention;
pub mod construction;
pub mod conv;
pub mod error;
pub mod io;
pub mod rank;
pub mod scalar;
pub mod tensor;
pub mod two_phase;

pub use attention::{
    mhsa_forward, mhsa_forward_traced, mhsa_forward_with_biases, softmax_row, AttentionHead,
    AttentionTrace, MhsaWeights, RelativeBiasTable,
};
pub use construction::{
    build_hard_bias, build_output_projection, conv_to_mhsa, evaluate_converted,
    evaluate_converted_traced, head_count, image_max_abs_diff, interior_patches, ring_radius,
    BoundaryMode, ConvertedModel, ConvertedTrace, OffsetSet, DEFAULT_BIAS_SCALE,
};
pub use conv::{conv2d, conv_as_linear_map, conv_as_linear_map_with_cap, ConvKernel};
pub use error::{Error, Result};
pub use scalar::{max_abs_diff, DType, Real};
pub use tensor::{
    crop_patch_grid, pad_patch_grid, patchify, unpatchify, GridWindow, Image, Matrix,
    PatchGeometry, PatchSequence,
};
