//! JSON model files.
//!
//! Every real is written in shortest round-trip decimal, so a saved model
//! loads back bit-identical. Matrices are stored row-major with explicit
//! `rows`/`cols`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, CascadeModel, StageModel};
use crate::error::{Error, Result};
use crate::features::DescriptorConfig;
use crate::geometry::{FaceShape, Frame};
use crate::jointmodel::{AuShapes, CdConfig, JointPrior, RbmParams, Standardization};
use crate::linalg::Matrix;

pub const FORMAT_VERSION: u32 = 1;

/// How every random stream is seeded; stored in the file for reference.
pub const SEED_SCHEME: &str =
    "ChaCha8 seeded with splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index); \
streams: 1 synth deformations, 2 synth samples, 3 synth appearance layout, 10 cd init, \
11 cd shuffle, 12 cd gibbs, 20 cascade augmentation";

#[derive(Serialize, Deserialize)]
struct ConfigEcho {
    cascade: CascadeConfig,
    descriptor: DescriptorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cd: Option<CdConfig>,
}

#[derive(Serialize, Deserialize)]
struct RbmDoc {
    #[serde(rename = "W_x")]
    shape_weights: Matrix,
    #[serde(rename = "W_a")]
    au_weights: Matrix,
    b_x: Vec<f64>,
    b_a: Vec<f64>,
    c: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AuShapesDoc {
    shapes: Vec<Vec<f64>>,
    absent: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct StageDoc {
    #[serde(rename = "R")]
    shape_regressor: Matrix,
    #[serde(rename = "T")]
    prob_regressor: Matrix,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    seed_scheme: String,
    config: ConfigEcho,
    mean_shape: Vec<f64>,
    fallback_shape: Vec<f64>,
    standardization: Standardization,
    rbm: RbmDoc,
    au_shapes: AuShapesDoc,
    stages: Vec<StageDoc>,
    eye_indices: [usize; 2],
}

/// A trained model plus the CD settings used for its prior, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: CascadeModel,
    pub cd: Option<CdConfig>,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let doc = ModelDoc {
            format_version: FORMAT_VERSION,
            seed_scheme: SEED_SCHEME.to_string(),
            config: ConfigEcho {
                cascade: m.config,
                descriptor: m.descriptor,
                cd: self.cd,
            },
            mean_shape: m.mean_shape.to_flat(),
            fallback_shape: m.prior.fallback_shape.to_flat(),
            standardization: m.prior.standardization.clone(),
            rbm: RbmDoc {
                shape_weights: m.prior.rbm.shape_weights.clone(),
                au_weights: m.prior.rbm.au_weights.clone(),
                b_x: m.prior.rbm.shape_bias.clone(),
                b_a: m.prior.rbm.au_bias.clone(),
                c: m.prior.rbm.hidden_bias.clone(),
            },
            au_shapes: AuShapesDoc {
                shapes: m
                    .prior
                    .au_shapes
                    .shapes
                    .iter()
                    .map(FaceShape::to_flat)
                    .collect(),
                absent: m.prior.au_shapes.absent.clone(),
            },
            stages: m
                .stages
                .iter()
                .map(|s| StageDoc {
                    shape_regressor: s.shape_regressor.clone(),
                    prob_regressor: s.prob_regressor.clone(),
                })
                .collect(),
            eye_indices: [m.eye_indices.0, m.eye_indices.1],
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format_version {}",
                doc.format_version
            )));
        }
        let canonical = |v: &[f64]| FaceShape::from_flat(v, Frame::Canonical);
        for m in [&doc.rbm.shape_weights, &doc.rbm.au_weights]
            .into_iter()
            .chain(
                doc.stages
                    .iter()
                    .flat_map(|s| [&s.shape_regressor, &s.prob_regressor]),
            )
        {
            if m.as_slice().len() != m.rows() * m.cols() {
                return Err(Error::ModelFormat(
                    "matrix data length disagrees with rows × cols".into(),
                ));
            }
        }
        let prior = JointPrior {
            rbm: RbmParams {
                shape_weights: doc.rbm.shape_weights,
                au_weights: doc.rbm.au_weights,
                shape_bias: doc.rbm.b_x,
                au_bias: doc.rbm.b_a,
                hidden_bias: doc.rbm.c,
            },
            standardization: doc.standardization,
            au_shapes: AuShapes {
                shapes: doc
                    .au_shapes
                    .shapes
                    .iter()
                    .map(|s| canonical(s))
                    .collect::<Result<_>>()?,
                absent: doc.au_shapes.absent,
            },
            fallback_shape: canonical(&doc.fallback_shape)?,
        };
        let model = CascadeModel {
            config: doc.config.cascade,
            descriptor: doc.config.descriptor,
            mean_shape: canonical(&doc.mean_shape)?,
            prior,
            stages: doc
                .stages
                .into_iter()
                .map(|s| StageModel {
                    shape_regressor: s.shape_regressor,
                    prob_regressor: s.prob_regressor,
                })
                .collect(),
            eye_indices: (doc.eye_indices[0], doc.eye_indices[1]),
        };
        model
            .validate()
            .map_err(|e| Error::ModelFormat(format!("inconsistent model: {e}")))?;
        Ok(Self {
            model,
            cd: doc.config.cd,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
