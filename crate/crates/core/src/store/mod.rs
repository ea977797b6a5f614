//! On-disk formats: `.vgfm` feature maps, `index.json`, `prototypes.json`, `runlog.jsonl`.

pub mod dataset;
pub mod prototypes;
pub mod runlog;
pub mod vgfm;

pub use dataset::{
    load_dataset, write_dataset, DatasetIndex, Detection, ImageEntry, Split, Splits,
};
pub use prototypes::{read_prototypes, write_prototypes};
pub use runlog::{read_runlog, write_runlog, RunLog, StepRecord};
pub use vgfm::{read_feature_map, write_feature_map};
