//! Joint cascade regression of facial landmarks and facial action units.
//!
//! Landmark locations and AU activation probabilities are refined together
//! over a short cascade of linear regressors. Each stage is pulled toward a
//! joint shape/AU prior learned by a Gaussian–Bernoulli RBM. The crate also
//! contains the evaluation metrics, a procedural data generator and the
//! `cjcrf` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod cli;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod jointmodel;
pub mod linalg;
pub mod metrics;
pub mod model_file;
pub mod rng;
pub mod synth;

pub use cascade::{
    infer, infer_observed, infer_sdm, train, CascadeConfig, CascadeModel, Detection,
    InferenceObserver, StageModel, Trace, Variant,
};
pub use error::{Error, Result};
pub use features::{extract_descriptor, stacked_features, DescriptorConfig, FeatureVector};
pub use geometry::{
    from_canonical, interocular_distance, mean_shape, to_canonical, AuLabels, AuProbs, FaceBox,
    FaceShape, Frame, GrayImage, Point2, Sample,
};
pub use jointmodel::{cd_train, CdConfig, JointPrior, RbmParams};
pub use linalg::{fit_linear_stage, Matrix};
pub use metrics::{auc_scores, evaluate, f1_scores, normalized_error, EvalReport};
pub use model_file::ModelFile;
pub use synth::{generate, SynthConfig};
