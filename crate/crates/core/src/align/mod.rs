//! Instance-level prototype contrast and image-level feature alignment against
//! the stored VFM features, with analytic gradients.

pub mod contrastive;
pub mod head;
pub mod image;
pub mod queries;
pub mod sinkhorn;

pub use contrastive::{
    contrastive_loss, BatchPrototypes, ContrastiveConfig, ContrastiveOutput, SimilarityMode,
};
pub use head::{Linear, Mlp};
pub use image::{image_alignment_loss, image_alignment_loss_with_targets, ImageAlignOutput};
pub use queries::{aggregate_backward, aggregate_prototypes, collect_class_queries, QueryBatch};
pub use sinkhorn::{sinkhorn_assign, AssignmentMatrix, SinkhornConfig};
