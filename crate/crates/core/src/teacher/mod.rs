//! Toy proposal classifier trained as a mean-teacher pair: EMA teacher,
//! pseudo-label mining, alignment losses and stability diagnostics.

pub mod data;
pub mod detector;
pub mod ema;
pub mod eval;
pub mod loss;
pub mod trainer;

pub use data::{proposal_targets, Corpus, SimImage};
pub use detector::{
    avg_pool2, backward, forward, Forward, ForwardGrads, Model, ModelDims, ToyDetector, LEVELS,
};
pub use ema::{ema_update, ema_update_slice};
pub use eval::{
    average_precision, evaluate, proposal_predictions, stability_report, StabilityMetric,
    StabilityReport,
};
pub use loss::{detection_loss, DetectionLoss};
pub use trainer::{
    alignment_metrics, corpus_prototypes, fit_supervised, high_shift_world, mining_benchmark,
    pretrain_source, simulate, simulate_from, AlignMetrics, Checkpoint, EvalModel,
    MiningComparison, Mode, Simulation, SinkhornInit, Trainer, TrainerConfig,
};
