//! Two-stage long-tail training over temporal feature tensors.
//!
//! Stage 1 trains a classifier with instance-balanced sampling. Stage 2
//! fine-tunes it with class-balanced sampling while refining every batch
//! with long-tailed mixed reconstruction (LMR). Inference aggregates over
//! time and classifies; refinement never runs there.

pub mod bench;
pub mod config;
pub mod crop;
pub mod dataset;
pub mod error;
pub mod lmr;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod tensor;

pub use config::ExperimentConfig;
pub use dataset::{load_dataset, save_dataset, FeatureDataset, SoftLabelMatrix};
pub use error::{Error, Result};
pub use metrics::{evaluate, MetricsReport};
pub use model::{Architecture, ClassifierParams};
pub use pipeline::{run_experiment, ComparisonReport, Method, TrainedModel};
pub use sampling::Strategy;
pub use synth::{generate, make_meteor_like, SynthSpec};
pub use tensor::Matrix;
