//! Analytical FLOPs, masking precision against lesion ground truth, and
//! overlay export.

pub mod flops;
pub mod overlay;
pub mod precision;

pub use flops::{count_flops, count_pretrain_flops, FlopsReport, MacConvention};
pub use overlay::{export_overlays, heatmap_overlay, partition_overlay};
pub use precision::{lesion_patches, mask_precision, MaskPrecisionReport, LESION_PATCH_THRESHOLD};
