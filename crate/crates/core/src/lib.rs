//! Causal and dilated causal 1D convolution models for continuous,
//! per-second QoE prediction in video streaming sessions.
//!
//! The crate covers the full pipeline: numerical kernels with hand-derived
//! gradients ([`numerics`]), model assembly and complexity accounting
//! ([`architecture`]), the binary model file ([`model_file`]), trace
//! ingestion and synthetic data ([`data`]), training and grid search
//! ([`training`]) and evaluation metrics ([`eval`]).

pub mod architecture;
pub mod data;
pub mod error;
pub mod eval;
pub mod model_file;
pub mod numerics;
pub mod rng;
pub mod training;

pub use architecture::{
    build_model, check_config, complexity, count_flops, count_params, dilation_schedule,
    pure_dilated_receptive_field, receptive_field, validate_config, ComplexityReport, Gradients,
    Model, ModelConfig, Variant,
};
pub use data::{NormalizationStats, NormalizedTrace, QoETrace, SplitProtocol};
pub use error::{QoeError, Result, Violation};
pub use eval::{bench_inference, pcc, rmse, srocc, EvalReport};
pub use model_file::{load_model, save_model};
pub use numerics::{Kernel, Series};
pub use training::{train, TrainConfig, WindowSample};
