//! Deterministic kernels shared by every stage: dense maps, bilinear sampling,
//! ROI-align, cosine/IoU/softmax and the seeded generator.

pub mod interp;
pub mod ops;
pub mod rng;
pub mod roi;
pub mod tensor;

pub use interp::{bilinear_sample, resize_bilinear};
pub use ops::{
    argmax, cosine_similarity, dot, log_sum_exp, norm, sigmoid, softmax, squared_distance,
};
pub use rng::{streams, Rng};
pub use roi::{roi_align, roi_align_with, RoiAlignConfig, RoiWeights};
pub use tensor::{BBox, FeatureMap};
