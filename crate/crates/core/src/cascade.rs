//! Joint cascade regression of landmark locations and AU probabilities.
//!
//! Each stage `t` holds two linear maps over the stacked features `Φ`:
//! `R` predicts a shape update and `T` a probability update. With a
//! quadratic penalty of weight `λ` standing in for the equality constraint,
//! both updates have closed forms:
//!
//! ```text
//! xᵗ = (xᵗ⁻¹ + R·Φ(xᵗ⁻¹) + λ_shape·x̄(pᵗ⁻¹)) / (1 + λ_shape)
//! pᵗ = clamp₀₁((pᵗ⁻¹ + T·Φ(xᵗ) + λ_prob·P(a=1 | xᵗ)) / (1 + λ_prob))
//! ```
//!
//! where `x̄` is the probability-weighted AU-dependent shape from the joint
//! prior. Training fits every stage by ridge regression on rollouts that use
//! the same constrained updates as inference.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{stacked_features_into, DescriptorConfig, FeatureVector, GradientField};
use crate::geometry::{
    from_canonical, mean_shape, to_canonical, AuLabels, AuProbs, FaceBox, FaceShape, Frame,
    GrayImage, Sample,
};
use crate::jointmodel::JointPrior;
use crate::linalg::{dot, Matrix, RidgeSolver};
use crate::rng::{stream, stream_rng};

/// Initial AU probability for every AU before the first stage.
pub const INITIAL_AU_PROB: f64 = 0.5;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Which of the two equality constraints are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    NoConstraint,
    ConstraintLandmark,
    ConstraintAu,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoConstraint,
        Variant::ConstraintLandmark,
        Variant::ConstraintAu,
        Variant::Full,
    ];

    pub fn constrains_shape(self) -> bool {
        matches!(self, Variant::ConstraintLandmark | Variant::Full)
    }

    pub fn constrains_probs(self) -> bool {
        matches!(self, Variant::ConstraintAu | Variant::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoConstraint => "noconstraint",
            Variant::ConstraintLandmark => "constraint-landmark",
            Variant::ConstraintAu => "constraint-au",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noconstraint" | "no-constraint" => Ok(Variant::NoConstraint),
            "constraint-landmark" => Ok(Variant::ConstraintLandmark),
            "constraint-au" => Ok(Variant::ConstraintAu),
            "full" => Ok(Variant::Full),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub stages: usize,
    pub lambda_shape: f64,
    pub lambda_prob: f64,
    /// Ridge weight per feature column; the penalty is `ridge * P`.
    pub ridge: f64,
    /// Perturbed initializations per training sample.
    pub augmentations: usize,
    /// Relative scale jitter `s`: factors drawn from `[1 − s, 1 + s]`.
    pub perturb_scale: f64,
    /// Maximum rotation jitter in degrees.
    pub perturb_rotation: f64,
    /// Maximum translation jitter as a fraction of the face size.
    pub perturb_translation: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            stages: 4,
            lambda_shape: 0.5,
            lambda_prob: 0.5,
            ridge: 1e-2,
            augmentations: 10,
            perturb_scale: 0.1,
            perturb_rotation: 15.0,
            perturb_translation: 0.05,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidConfig(
                "at least one cascade stage is required".into(),
            ));
        }
        if !(self.lambda_shape >= 0.0 && self.lambda_prob >= 0.0)
            || !self.lambda_shape.is_finite()
            || !self.lambda_prob.is_finite()
        {
            return Err(Error::InvalidConfig(
                "relaxation weights must be finite and non-negative".into(),
            ));
        }
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge must be positive, got {}",
                self.ridge
            )));
        }
        if self.augmentations == 0 {
            return Err(Error::InvalidConfig(
                "augmentations must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.perturb_scale)
            || self.perturb_rotation < 0.0
            || self.perturb_translation < 0.0
        {
            return Err(Error::InvalidConfig("invalid perturbation ranges".into()));
        }
        Ok(())
    }

    /// Shape relaxation weight actually applied, zero when the variant
    /// disables the landmark constraint.
    pub fn effective_lambda_shape(&self) -> f64 {
        if self.variant.constrains_shape() {
            self.lambda_shape
        } else {
            0.0
        }
    }

    pub fn effective_lambda_prob(&self) -> f64 {
        if self.variant.constrains_probs() {
            self.lambda_prob
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    /// `R`, 2D × (F·D + 1).
    pub shape_regressor: Matrix,
    /// `T`, N × (F·D + 1).
    pub prob_regressor: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub config: CascadeConfig,
    pub descriptor: DescriptorConfig,
    pub mean_shape: FaceShape,
    pub prior: JointPrior,
    pub stages: Vec<StageModel>,
    pub eye_indices: (usize, usize),
}

impl CascadeModel {
    pub fn n_landmarks(&self) -> usize {
        self.mean_shape.len()
    }

    pub fn n_aus(&self) -> usize {
        self.prior.n_aus()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.descriptor.validate()?;
        self.prior.validate()?;
        self.mean_shape.expect_frame(Frame::Canonical)?;
        let d = self.n_landmarks();
        let n = self.n_aus();
        if self.prior.n_landmarks() != d {
            return Err(Error::DimensionMismatch(
                "joint prior and mean shape disagree on landmark count".into(),
            ));
        }
        if self.stages.len() != self.config.stages {
            return Err(Error::DimensionMismatch(format!(
                "{} stage models for a {}-stage cascade",
                self.stages.len(),
                self.config.stages
            )));
        }
        let p = self.descriptor.feature_len(d);
        for s in &self.stages {
            let ok = s.shape_regressor.rows() == 2 * d
                && s.shape_regressor.cols() == p
                && s.prob_regressor.rows() == n
                && s.prob_regressor.cols() == p
                && s.shape_regressor.is_finite()
                && s.prob_regressor.is_finite();
            if !ok {
                return Err(Error::DimensionMismatch(
                    "stage regressor dimensions do not match the model".into(),
                ));
            }
        }
        let (l, r) = self.eye_indices;
        if l == r || l >= d || r >= d {
            return Err(Error::InvalidIndex(format!(
                "eye indices ({l}, {r}) invalid for {d} landmarks"
            )));
        }
        Ok(())
    }
}

/// Relaxed landmark update: the minimizer over `Δx` of
/// `‖Δx − R·φ‖² + λ‖x_prev + Δx − x̄‖²`, returned as `x_prev + Δx`.
pub fn constrained_shape_update(
    x_prev: &FaceShape,
    phi: &FeatureVector,
    shape_regressor: &Matrix,
    x_bar: &FaceShape,
    lambda: f64,
) -> Result<FaceShape> {
    x_prev.expect_frame(Frame::Canonical)?;
    x_bar.expect_frame(Frame::Canonical)?;
    if x_bar.len() != x_prev.len() || shape_regressor.rows() != 2 * x_prev.len() {
        return Err(Error::DimensionMismatch(
            "shape update operands disagree on landmark count".into(),
        ));
    }
    check_lambda(lambda)?;
    let g = shape_regressor.mul_vec(phi.as_slice())?;
    let next = relaxed_combination(&x_prev.to_flat(), &g, &x_bar.to_flat(), lambda);
    FaceShape::from_flat(&next, Frame::Canonical)
}

/// Relaxed probability update projected onto `[0, 1]^N`.
pub fn constrained_prob_update(
    p_prev: &AuProbs,
    phi: &FeatureVector,
    prob_regressor: &Matrix,
    q: &AuProbs,
    lambda: f64,
) -> Result<AuProbs> {
    if q.len() != p_prev.len() || prob_regressor.rows() != p_prev.len() {
        return Err(Error::DimensionMismatch(
            "probability update operands disagree on AU count".into(),
        ));
    }
    check_lambda(lambda)?;
    let d = prob_regressor.mul_vec(phi.as_slice())?;
    Ok(AuProbs::from_clamped(relaxed_combination(
        p_prev.as_slice(),
        &d,
        q.as_slice(),
        lambda,
    )))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "relaxation weight must be finite and non-negative, got {lambda}"
        )))
    }
}

/// `(prev + step + λ·target) / (1 + λ)`; exactly `prev + step` when `λ = 0`.
fn relaxed_combination(prev: &[f64], step: &[f64], target: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 0.0 {
        return prev.iter().zip(step).map(|(p, s)| p + s).collect();
    }
    prev.iter()
        .zip(step)
        .zip(target)
        .map(|((p, s), t)| (p + s + lambda * t) / (1.0 + lambda))
        .collect()
}

/// Random similarity jitter of `shape` about its centroid.
fn perturb_shape(shape: &[f64], cfg: &CascadeConfig, rng: &mut impl Rng) -> Vec<f64> {
    let s = if cfg.perturb_scale > 0.0 {
        rng.random_range(1.0 - cfg.perturb_scale..=1.0 + cfg.perturb_scale)
    } else {
        1.0
    };
    let max_rot = cfg.perturb_rotation * PI / 180.0;
    let theta = if max_rot > 0.0 {
        rng.random_range(-max_rot..=max_rot)
    } else {
        0.0
    };
    let t = cfg.perturb_translation;
    let (tx, ty) = if t > 0.0 {
        (rng.random_range(-t..=t), rng.random_range(-t..=t))
    } else {
        (0.0, 0.0)
    };
    let d = shape.len() / 2;
    let cx = shape.iter().step_by(2).sum::<f64>() / d as f64;
    let cy = shape.iter().skip(1).step_by(2).sum::<f64>() / d as f64;
    let (sin, cos) = theta.sin_cos();
    let mut out = Vec::with_capacity(shape.len());
    for p in shape.chunks_exact(2) {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        out.push(cx + s * (cos * dx - sin * dy) + tx);
        out.push(cy + s * (sin * dx + cos * dy) + ty);
    }
    out
}

struct Instance {
    sample: usize,
    shape: Vec<f64>,
    probs: Vec<f64>,
}

fn pixel_shape(canonical: &[f64], face_box: &FaceBox) -> Result<FaceShape> {
    from_canonical(
        &FaceShape::from_flat(canonical, Frame::Canonical)?,
        face_box,
    )
}

/// Stacked features of every instance, one row each. Instances of one
/// sample should be contiguous so the gradient field is built once per image.
fn feature_matrix(
    instances: &[Instance],
    samples: &[Sample],
    desc: &DescriptorConfig,
    n_landmarks: usize,
) -> Result<Mat<f64>> {
    // rows are staged in a row-major block, then copied column by column
    const BLOCK: usize = 64;
    let p = desc.feature_len(n_landmarks);
    let mut design = Mat::<f64>::zeros(instances.len(), p);
    let mut block = vec![0.0; BLOCK * p];
    let mut field: Option<(usize, GradientField<'_>)> = None;
    for (b, chunk) in instances.chunks(BLOCK).enumerate() {
        for (r, inst) in chunk.iter().enumerate() {
            let sample = &samples[inst.sample];
            if field.as_ref().is_none_or(|(s, _)| *s != inst.sample) {
                field = Some((inst.sample, GradientField::new(&sample.image)));
            }
            let (_, grad) = field.as_ref().expect("set above");
            let radius = desc.radius_fraction * sample.face_box.face_size();
            let shape = pixel_shape(&inst.shape, &sample.face_box)?;
            stacked_features_into(grad, &shape, radius, desc, &mut block[r * p..(r + 1) * p]);
        }
        let row0 = b * BLOCK;
        for j in 0..p {
            for r in 0..chunk.len() {
                design[(row0 + r, j)] = block[r * p + j];
            }
        }
    }
    Ok(design)
}

fn ridge_solver(design: Mat<f64>, cfg: &CascadeConfig) -> Result<RidgeSolver> {
    let ridge = cfg.ridge * design.ncols() as f64;
    RidgeSolver::from_faer(design, ridge)
}

fn targets(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
    Matrix::from_fn(rows, cols, f)
}

/// Trains the cascade on `samples` given an already-fitted joint prior.
pub fn train(
    samples: &[Sample],
    cfg: &CascadeConfig,
    desc: &DescriptorConfig,
    prior: &JointPrior,
    eye_indices: (usize, usize),
) -> Result<CascadeModel> {
    cfg.validate()?;
    desc.validate()?;
    prior.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("cascade training set"));
    }
    let d = prior.n_landmarks();
    let n = prior.n_aus();
    for s in samples {
        s.validate(d, n)?;
    }

    let gt: Vec<FaceShape> = samples
        .iter()
        .map(|s| to_canonical(&s.gt_shape, &s.face_box))
        .collect::<Result<_>>()?;
    let gt_flat: Vec<Vec<f64>> = gt.iter().map(FaceShape::to_flat).collect();
    let gt_probs: Vec<Vec<f64>> = samples.iter().map(|s| s.gt_labels.to_f64()).collect();
    let mean = mean_shape(&gt)?;
    let mean_flat = mean.to_flat();

    let mut instances = Vec::with_capacity(samples.len() * cfg.augmentations);
    for s in 0..samples.len() {
        for k in 0..cfg.augmentations {
            let mut rng = stream_rng(
                cfg.seed,
                stream::AUGMENT,
                (s * cfg.augmentations + k) as u64,
            );
            instances.push(Instance {
                sample: s,
                shape: perturb_shape(&mean_flat, cfg, &mut rng),
                probs: vec![INITIAL_AU_PROB; n],
            });
        }
    }
    let m = instances.len();
    let lambda_shape = cfg.effective_lambda_shape();
    let lambda_prob = cfg.effective_lambda_prob();

    let mut solver = ridge_solver(feature_matrix(&instances, samples, desc, d)?, cfg)?;
    let mut stages = Vec::with_capacity(cfg.stages);
    for _ in 0..cfg.stages {
        // shape regressor on Φ(xᵗ⁻¹)
        let dx = targets(m, 2 * d, |i, j| {
            gt_flat[instances[i].sample][j] - instances[i].shape[j]
        });
        let shape_regressor = solver.solve(&dx)?;
        let steps = solver.predict(&shape_regressor);
        for (i, inst) in instances.iter_mut().enumerate() {
            let step: Vec<f64> = (0..2 * d).map(|j| steps[(i, j)]).collect();
            let x_bar = if lambda_shape > 0.0 {
                prior
                    .shape_prior(&AuProbs::new(inst.probs.clone())?)?
                    .to_flat()
            } else {
                Vec::new()
            };
            inst.shape = relaxed_combination(&inst.shape, &step, &x_bar, lambda_shape);
        }

        // probability regressor on Φ(xᵗ)
        solver = ridge_solver(feature_matrix(&instances, samples, desc, d)?, cfg)?;
        let dp = targets(m, n, |i, j| {
            gt_probs[instances[i].sample][j] - instances[i].probs[j]
        });
        let prob_regressor = solver.solve(&dp)?;
        let steps = solver.predict(&prob_regressor);
        for (i, inst) in instances.iter_mut().enumerate() {
            let step: Vec<f64> = (0..n).map(|j| steps[(i, j)]).collect();
            let q = if lambda_prob > 0.0 {
                let shape = FaceShape::from_flat(&inst.shape, Frame::Canonical)?;
                prior.au_posterior(&shape)?.probs.as_slice().to_vec()
            } else {
                Vec::new()
            };
            inst.probs = relaxed_combination(&inst.probs, &step, &q, lambda_prob)
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect();
        }

        stages.push(StageModel {
            shape_regressor,
            prob_regressor,
        });
    }

    let model = CascadeModel {
        config: *cfg,
        descriptor: *desc,
        mean_shape: mean,
        prior: prior.clone(),
        stages,
        eye_indices,
    };
    model.validate()?;
    Ok(model)
}

/// Hooks into the inference loop, used for tracing and instrumentation.
pub trait InferenceObserver {
    /// Called with `(x⁰, p⁰)` before the first stage (`t = 0`) and with
    /// `(xᵗ, pᵗ)` after each stage. Shapes are in the canonical frame.
    fn on_stage(&mut self, _t: usize, _shape: &FaceShape, _probs: &AuProbs) {}
    fn on_shape_prior(&mut self) {}
    fn on_au_posterior(&mut self) {}
}

pub struct NoopObserver;

impl InferenceObserver for NoopObserver {}

/// Records `x⁰..x^T` and `p⁰..p^T`.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    pub shapes: Vec<FaceShape>,
    pub probs: Vec<AuProbs>,
    pub shape_prior_calls: usize,
    pub au_posterior_calls: usize,
}

impl InferenceObserver for Trace {
    fn on_stage(&mut self, _t: usize, shape: &FaceShape, probs: &AuProbs) {
        self.shapes.push(shape.clone());
        self.probs.push(probs.clone());
    }

    fn on_shape_prior(&mut self) {
        self.shape_prior_calls += 1;
    }

    fn on_au_posterior(&mut self) {
        self.au_posterior_calls += 1;
    }
}

impl Trace {
    /// Recorded shapes mapped back to image pixels.
    pub fn pixel_shapes(&self, face_box: &FaceBox) -> Result<Vec<FaceShape>> {
        self.shapes
            .iter()
            .map(|s| from_canonical(s, face_box))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Landmarks in image pixels.
    pub shape: FaceShape,
    pub probs: AuProbs,
    /// `probs` thresholded at [`DEFAULT_THRESHOLD`].
    pub labels: AuLabels,
}

fn features_at(
    field: &GradientField<'_>,
    shape: &FaceShape,
    face_box: &FaceBox,
    model: &CascadeModel,
) -> Result<FeatureVector> {
    let px = from_canonical(shape, face_box)?;
    let radius = model.descriptor.radius_fraction * face_box.face_size();
    let mut out = vec![0.0; model.descriptor.feature_len(model.n_landmarks())];
    stacked_features_into(field, &px, radius, &model.descriptor, &mut out);
    Ok(FeatureVector::from_vec(out))
}

/// Runs the joint cascade, reporting progress to `observer`.
pub fn infer_observed(
    image: &GrayImage,
    face_box: &FaceBox,
    model: &CascadeModel,
    observer: &mut dyn InferenceObserver,
) -> Result<Detection> {
    face_box.validate()?;
    let field = GradientField::new(image);
    let lambda_shape = model.config.effective_lambda_shape();
    let lambda_prob = model.config.effective_lambda_prob();

    let mut shape = model.mean_shape.clone();
    let mut probs = AuProbs::uniform(model.n_aus(), INITIAL_AU_PROB);
    observer.on_stage(0, &shape, &probs);
    let mut phi = features_at(&field, &shape, face_box, model)?;
    for (t, stage) in model.stages.iter().enumerate() {
        let x_bar = if lambda_shape > 0.0 {
            observer.on_shape_prior();
            model.prior.shape_prior(&probs)?
        } else {
            shape.clone()
        };
        shape =
            constrained_shape_update(&shape, &phi, &stage.shape_regressor, &x_bar, lambda_shape)?;
        phi = features_at(&field, &shape, face_box, model)?;
        let q = if lambda_prob > 0.0 {
            observer.on_au_posterior();
            model.prior.au_posterior(&shape)?.probs
        } else {
            probs.clone()
        };
        probs = constrained_prob_update(&probs, &phi, &stage.prob_regressor, &q, lambda_prob)?;
        observer.on_stage(t + 1, &shape, &probs);
    }
    Ok(Detection {
        shape: from_canonical(&shape, face_box)?,
        labels: probs.threshold(DEFAULT_THRESHOLD),
        probs,
    })
}

pub fn infer(image: &GrayImage, face_box: &FaceBox, model: &CascadeModel) -> Result<Detection> {
    infer_observed(image, face_box, model, &mut NoopObserver)
}

/// Shape-only cascade: `xᵗ = xᵗ⁻¹ + R·Φ(xᵗ⁻¹)` at every stage.
pub fn infer_sdm(image: &GrayImage, face_box: &FaceBox, model: &CascadeModel) -> Result<FaceShape> {
    face_box.validate()?;
    let field = GradientField::new(image);
    let mut shape = model.mean_shape.to_flat();
    for stage in &model.stages {
        let current = FaceShape::from_flat(&shape, Frame::Canonical)?;
        let phi = features_at(&field, &current, face_box, model)?;
        for (j, x) in shape.iter_mut().enumerate() {
            *x += dot(stage.shape_regressor.row(j), phi.as_slice());
        }
    }
    from_canonical(&FaceShape::from_flat(&shape, Frame::Canonical)?, face_box)
}
