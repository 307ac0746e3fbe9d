//! Normalization layers for online continual learning, a from-scratch
//! training stack, and the diagnostics used to study how batch statistics
//! drift across a task stream.

pub mod continual;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod norm;
pub mod rng;
pub mod tensor;

pub use continual::{
    bn_star_recalibrate, build_pmnist_stream, build_split_stream, evaluate, measure_drift,
    train_online, DriftRecord, EpisodicMemory, InputLayout, LayerDrift, MemoryItem, MemoryPolicy,
    Strategy, StreamKind, Task, TaskStream, TrainOptions, TrainOutcome,
};
pub use data::Dataset;
pub use error::{Error, Result};
pub use metrics::{acc, fm, la, mean_sd, AccuracyMatrix};
pub use net::{
    cnn_small, cross_entropy_loss, grad_check, mlp, mlp_toy, mse_logits_loss, sgd_step, softmax,
    GradCheckReport, Layer, LayerStack, NormConfig, NormSelect, SgdConfig,
};
pub use norm::{
    region_moments, z_normalize, AffineParams, Average, Mode, NormKind, NormLayer, Pattern,
    RunningStats, StageOrder,
};
pub use rng::SeededRng;
pub use tensor::{reduce_mean_var, Axis, FeatureMap, Moments};
