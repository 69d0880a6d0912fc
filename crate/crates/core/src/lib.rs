//! QRS-complex detection as per-sample segmentation.
//!
//! The pipeline resamples a single-lead ECG to a working rate (100 Hz),
//! cuts it into 3 s windows, z-scores each window and feeds it through a
//! small same-padded 1D convolutional network whose two output planes mark
//! every sample as QRS or background. The resulting binary stream is
//! cleaned by one of three rule-based refinement levels before one R-peak
//! is placed per surviving run of ones.
//!
//! Modules follow the data flow:
//!
//! - [`signal_io`]: records, annotations, file formats, synthetic ECG.
//! - [`preprocess`]: resampling, masks, segmentation, normalisation.
//! - [`cnn`]: the network, its gradients, serialisation and cost counters.
//! - [`training`]: subject-wise folds, Adam, plateau schedule, early stop.
//! - [`postprocess`]: stitching, the three refinement levels, localisation.
//! - [`eval`]: beat matching, F1, dataset aggregation, complexity sweeps.
//! - [`pipeline`]: run configuration and the end-to-end experiment driver.

pub mod cnn;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod rng;
pub mod signal_io;
pub mod training;

pub use cnn::{CnnModel, ConvLayer, FeatureMap, Gradients, LogitPlane, ModelConfig};
pub use error::{Error, Result};
pub use eval::{EvalReport, MatchResult};
pub use pipeline::RunConfig;
pub use postprocess::{PpLevel, PredictionStream};
pub use preprocess::{BinaryMask, Segment};
pub use signal_io::{AnnotationSet, EcgRecord, SynthParams};
pub use training::{TrainConfig, TrainHistory};
