//! Joint prior over face shapes and AU labels.
//!
//! A restricted Boltzmann machine with unit-variance Gaussian visible units
//! for the shape coordinates `x`, Bernoulli visible units for the AU labels
//! `a`, and `K` binary hidden units `h`:
//!
//! ```text
//! E(a, x, h) = Σⱼ (xⱼ − b_x,ⱼ)²/2 − b_aᵀa − cᵀh − xᵀW_x h − aᵀW_a h
//! ```
//!
//! The partition function is never computed. Conditional AU probabilities
//! `P(aᵢ = 1 | x)` are obtained by summing the hidden units out in closed form
//! and enumerating label vectors (exact for small `N`), or by a damped
//! mean-field fixed point for larger label sets.
//!
//! The prior also carries the AU-dependent expected shapes: the empirical
//! mean training shape among samples that activate each AU.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{mean_shape, AuLabels, AuProbs, FaceShape, Frame};
use crate::linalg::Matrix;
use crate::rng::{stream, stream_rng};

/// Label counts up to this size use exact enumeration for the AU posterior.
pub const EXACT_POSTERIOR_MAX_AUS: usize = 20;

const MEAN_FIELD_DAMPING: f64 = 0.5;
const MEAN_FIELD_MAX_ITERS: usize = 200;
const MEAN_FIELD_TOL: f64 = 1e-8;

/// Below this total weight the probability-weighted shape prior falls back
/// to the mean shape.
pub const SHAPE_PRIOR_MIN_WEIGHT: f64 = 1e-9;

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᵗ)` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbmParams {
    /// `W_x`, 2D×K.
    pub shape_weights: Matrix,
    /// `W_a`, N×K.
    pub au_weights: Matrix,
    /// `b_x`, length 2D.
    pub shape_bias: Vec<f64>,
    /// `b_a`, length N.
    pub au_bias: Vec<f64>,
    /// `c`, length K.
    pub hidden_bias: Vec<f64>,
}

impl RbmParams {
    pub fn zeros(n_shape: usize, n_aus: usize, n_hidden: usize) -> Self {
        Self {
            shape_weights: Matrix::zeros(n_shape, n_hidden),
            au_weights: Matrix::zeros(n_aus, n_hidden),
            shape_bias: vec![0.0; n_shape],
            au_bias: vec![0.0; n_aus],
            hidden_bias: vec![0.0; n_hidden],
        }
    }

    pub fn n_shape(&self) -> usize {
        self.shape_bias.len()
    }

    pub fn n_aus(&self) -> usize {
        self.au_bias.len()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n, k) = (self.n_shape(), self.n_aus(), self.n_hidden());
        if self.shape_weights.rows() != d
            || self.shape_weights.cols() != k
            || self.au_weights.rows() != n
            || self.au_weights.cols() != k
        {
            return Err(Error::DimensionMismatch(format!(
                "RBM weights {}x{} and {}x{} inconsistent with biases ({d}, {n}, {k})",
                self.shape_weights.rows(),
                self.shape_weights.cols(),
                self.au_weights.rows(),
                self.au_weights.cols()
            )));
        }
        let finite = self.shape_weights.is_finite()
            && self.au_weights.is_finite()
            && self
                .shape_bias
                .iter()
                .chain(&self.au_bias)
                .chain(&self.hidden_bias)
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("RBM parameters"));
        }
        Ok(())
    }

    fn check_visible(&self, labels: &[f64], shape: &[f64]) -> Result<()> {
        if labels.len() != self.n_aus() || shape.len() != self.n_shape() {
            return Err(Error::DimensionMismatch(format!(
                "visible units ({} labels, {} coords) vs model ({}, {})",
                labels.len(),
                shape.len(),
                self.n_aus(),
                self.n_shape()
            )));
        }
        Ok(())
    }

    /// `c + W_xᵀx` (labels excluded).
    fn hidden_input_from_shape(&self, shape: &[f64]) -> Vec<f64> {
        let mut acc = self.hidden_bias.clone();
        for (j, &xj) in shape.iter().enumerate() {
            if xj != 0.0 {
                for (a, w) in acc.iter_mut().zip(self.shape_weights.row(j)) {
                    *a += xj * w;
                }
            }
        }
        acc
    }

    /// `c + W_xᵀx + W_aᵀa`.
    fn hidden_input(&self, shape: &[f64], labels: &[f64]) -> Vec<f64> {
        let mut acc = self.hidden_input_from_shape(shape);
        for (i, &ai) in labels.iter().enumerate() {
            if ai != 0.0 {
                for (a, w) in acc.iter_mut().zip(self.au_weights.row(i)) {
                    *a += ai * w;
                }
            }
        }
        acc
    }

    fn quadratic_term(&self, shape: &[f64]) -> f64 {
        shape
            .iter()
            .zip(&self.shape_bias)
            .map(|(x, b)| (x - b) * (x - b) / 2.0)
            .sum()
    }
}

/// `E(a, x, h; θ)`.
pub fn energy(labels: &AuLabels, shape: &[f64], hidden: &[u8], params: &RbmParams) -> Result<f64> {
    let a = labels.to_f64();
    params.check_visible(&a, shape)?;
    if hidden.len() != params.n_hidden() {
        return Err(Error::DimensionMismatch(format!(
            "{} hidden states for {} hidden units",
            hidden.len(),
            params.n_hidden()
        )));
    }
    let input = params.hidden_input(shape, &a);
    let coupling: f64 = input
        .iter()
        .zip(hidden)
        .filter(|(_, &h)| h != 0)
        .map(|(v, _)| v)
        .sum();
    let label_term: f64 = a.iter().zip(&params.au_bias).map(|(a, b)| a * b).sum();
    Ok(params.quadratic_term(shape) - label_term - coupling)
}

/// `F(a, x; θ) = −ln Σ_h exp(−E(a, x, h; θ))`, in closed form.
pub fn free_energy(labels: &AuLabels, shape: &[f64], params: &RbmParams) -> Result<f64> {
    let a = labels.to_f64();
    params.check_visible(&a, shape)?;
    let label_term: f64 = a.iter().zip(&params.au_bias).map(|(a, b)| a * b).sum();
    let hidden: f64 = params
        .hidden_input(shape, &a)
        .into_iter()
        .map(softplus)
        .sum();
    Ok(params.quadratic_term(shape) - label_term - hidden)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub cd_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for CdConfig {
    fn default() -> Self {
        Self {
            hidden: 150,
            epochs: 800,
            learning_rate: 0.01,
            batch_size: 64,
            cd_steps: 1,
            momentum: 0.5,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "hidden unit count must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.cd_steps == 0 {
            return Err(Error::InvalidConfig("cd_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(
                "momentum must lie in [0, 1) and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn sample_bernoulli(rng: &mut impl Rng, probs: &[f64], out: &mut [f64]) {
    for (o, &p) in out.iter_mut().zip(probs) {
        *o = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
}

fn add_outer(grad: &mut Matrix, left: &[f64], right: &[f64], sign: f64) {
    for (i, &l) in left.iter().enumerate() {
        if l != 0.0 {
            let s = sign * l;
            for (g, &r) in grad.row_mut(i).iter_mut().zip(right) {
                *g += s * r;
            }
        }
    }
}

struct Velocity {
    shape_weights: Matrix,
    au_weights: Matrix,
    shape_bias: Vec<f64>,
    au_bias: Vec<f64>,
    hidden_bias: Vec<f64>,
}

fn step_weights(w: &mut [f64], vel: &mut [f64], grad: &[f64], lr: f64, momentum: f64, decay: f64) {
    for ((w, v), g) in w.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + lr * (g - decay * *w);
        *w += *v;
    }
}

fn step_bias(b: &mut [f64], vel: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((b, v), g) in b.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = momentum * *v + lr * g;
        *b += *v;
    }
}

/// Trains an RBM by CD-k on `(labels, shape)` pairs.
///
/// Positive statistics use hidden probabilities given the data. The negative
/// chain samples `h`, reconstructs the shape as its conditional mean
/// `b_x + W_x h`, samples labels from `σ(b_a + W_a h)`, and recomputes hidden
/// probabilities. Weight decay applies to the pairwise weights only.
pub fn cd_train(data: &[(AuLabels, Vec<f64>)], cfg: &CdConfig) -> Result<RbmParams> {
    cfg.validate()?;
    let (first_labels, first_shape) = data.first().ok_or(Error::Empty("RBM training set"))?;
    let (n_shape, n_aus, n_hidden) = (first_shape.len(), first_labels.len(), cfg.hidden);
    for (a, x) in data {
        if a.len() != n_aus || x.len() != n_shape {
            return Err(Error::DimensionMismatch(
                "RBM training pairs have inconsistent dimensions".into(),
            ));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("RBM training shape"));
        }
    }
    let labels: Vec<Vec<f64>> = data.iter().map(|(a, _)| a.to_f64()).collect();

    let mut params = RbmParams::zeros(n_shape, n_aus, n_hidden);
    let mut init_rng = stream_rng(cfg.seed, stream::CD_INIT, 0);
    for w in params
        .shape_weights
        .as_mut_slice()
        .iter_mut()
        .chain(params.au_weights.as_mut_slice().iter_mut())
    {
        *w = init_rng.random_range(-0.01..0.01);
    }

    let mut vel = Velocity {
        shape_weights: Matrix::zeros(n_shape, n_hidden),
        au_weights: Matrix::zeros(n_aus, n_hidden),
        shape_bias: vec![0.0; n_shape],
        au_bias: vec![0.0; n_aus],
        hidden_bias: vec![0.0; n_hidden],
    };
    let mut grad = RbmParams::zeros(n_shape, n_aus, n_hidden);

    let mut shuffle_rng = stream_rng(cfg.seed, stream::CD_SHUFFLE, 0);
    let mut gibbs_rng = stream_rng(cfg.seed, stream::CD_GIBBS, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let mut h_sample = vec![0.0; n_hidden];
    let mut x_recon = vec![0.0; n_shape];
    let mut a_prob = vec![0.0; n_aus];
    let mut a_recon = vec![0.0; n_aus];

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.shape_weights.as_mut_slice().fill(0.0);
            grad.au_weights.as_mut_slice().fill(0.0);
            grad.shape_bias.fill(0.0);
            grad.au_bias.fill(0.0);
            grad.hidden_bias.fill(0.0);

            for &m in batch {
                let x0 = &data[m].1;
                let a0 = &labels[m];
                let h0: Vec<f64> = params
                    .hidden_input(x0, a0)
                    .into_iter()
                    .map(sigmoid)
                    .collect();

                let mut h_prob = h0.clone();
                for _ in 0..cfg.cd_steps {
                    sample_bernoulli(&mut gibbs_rng, &h_prob, &mut h_sample);
                    for (j, xr) in x_recon.iter_mut().enumerate() {
                        *xr = params.shape_bias[j]
                            + crate::linalg::dot(params.shape_weights.row(j), &h_sample);
                    }
                    for (i, ap) in a_prob.iter_mut().enumerate() {
                        *ap = sigmoid(
                            params.au_bias[i]
                                + crate::linalg::dot(params.au_weights.row(i), &h_sample),
                        );
                    }
                    sample_bernoulli(&mut gibbs_rng, &a_prob, &mut a_recon);
                    h_prob = params
                        .hidden_input(&x_recon, &a_recon)
                        .into_iter()
                        .map(sigmoid)
                        .collect();
                }

                add_outer(&mut grad.shape_weights, x0, &h0, 1.0);
                add_outer(&mut grad.shape_weights, &x_recon, &h_prob, -1.0);
                add_outer(&mut grad.au_weights, a0, &h0, 1.0);
                add_outer(&mut grad.au_weights, &a_recon, &h_prob, -1.0);
                for j in 0..n_shape {
                    grad.shape_bias[j] += x0[j] - x_recon[j];
                }
                for i in 0..n_aus {
                    grad.au_bias[i] += a0[i] - a_recon[i];
                }
                for k in 0..n_hidden {
                    grad.hidden_bias[k] += h0[k] - h_prob[k];
                }
            }

            let scale = 1.0 / batch.len() as f64;
            let scale_all = |v: &mut [f64]| v.iter_mut().for_each(|g| *g *= scale);
            scale_all(grad.shape_weights.as_mut_slice());
            scale_all(grad.au_weights.as_mut_slice());
            scale_all(&mut grad.shape_bias);
            scale_all(&mut grad.au_bias);
            scale_all(&mut grad.hidden_bias);

            let (lr, mom, wd) = (cfg.learning_rate, cfg.momentum, cfg.weight_decay);
            step_weights(
                params.shape_weights.as_mut_slice(),
                vel.shape_weights.as_mut_slice(),
                grad.shape_weights.as_slice(),
                lr,
                mom,
                wd,
            );
            step_weights(
                params.au_weights.as_mut_slice(),
                vel.au_weights.as_mut_slice(),
                grad.au_weights.as_slice(),
                lr,
                mom,
                wd,
            );
            step_bias(
                &mut params.shape_bias,
                &mut vel.shape_bias,
                &grad.shape_bias,
                lr,
                mom,
            );
            step_bias(
                &mut params.au_bias,
                &mut vel.au_bias,
                &grad.au_bias,
                lr,
                mom,
            );
            step_bias(
                &mut params.hidden_bias,
                &mut vel.hidden_bias,
                &grad.hidden_bias,
                lr,
                mom,
            );
        }
    }
    params.validate()?;
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorMethod {
    Exact,
    MeanField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuPosterior {
    pub probs: AuProbs,
    pub method: PosteriorMethod,
    /// False only when mean-field hit its iteration cap; `probs` then holds
    /// the last iterate.
    pub converged: bool,
}

/// Unnormalized `ln P(a | x)` for every label vector `a` (indexed by its bit
/// pattern), with the hidden units summed out:
/// `b_aᵀa + Σₖ ln(1 + exp(cₖ + xᵀW_x[:,k] + aᵀW_a[:,k]))`.
///
/// Labels are visited in Gray-code order so each step flips one AU. Hidden
/// units whose input stays within a safe exponent range are tracked as
/// `exp(z)` and multiplied in groups (one `ln` per group); the rest go
/// through `softplus` directly.
fn label_log_weights(params: &RbmParams, shape: &[f64]) -> Vec<f64> {
    const SAFE_EXP: f64 = 600.0;
    const GROUP_BUDGET: f64 = 650.0;

    let n = params.n_aus();
    let k = params.n_hidden();
    let base = params.hidden_input_from_shape(shape);

    let mut fast = Vec::new();
    let mut slow = Vec::new();
    for (h, &b) in base.iter().enumerate() {
        let (mut hi, mut lo) = (b, b);
        for i in 0..n {
            let w = params.au_weights.get(i, h);
            if w > 0.0 {
                hi += w;
            } else {
                lo += w;
            }
        }
        if hi < SAFE_EXP && lo > -SAFE_EXP {
            fast.push((h, hi));
        } else {
            slow.push(h);
        }
    }

    // split the fast units into groups whose product cannot overflow
    let mut group_ends = Vec::new();
    let mut budget = 0.0;
    for (pos, &(_, hi)) in fast.iter().enumerate() {
        let bound = hi.max(0.0) + std::f64::consts::LN_2;
        if budget + bound > GROUP_BUDGET && pos > 0 {
            group_ends.push(pos);
            budget = 0.0;
        }
        budget += bound;
    }
    group_ends.push(fast.len());

    let mut exp_input: Vec<f64> = fast.iter().map(|&(h, _)| base[h].exp()).collect();
    let up: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            fast.iter()
                .map(|&(h, _)| params.au_weights.get(i, h).exp())
                .collect()
        })
        .collect();
    let down: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            fast.iter()
                .map(|&(h, _)| (-params.au_weights.get(i, h)).exp())
                .collect()
        })
        .collect();
    let mut slow_input: Vec<f64> = slow.iter().map(|&h| base[h]).collect();
    debug_assert!(fast.len() + slow.len() == k);

    let total = 1usize << n;
    let mut out = vec![0.0; total];
    let mut bias_term = 0.0;
    let mut labels = 0usize;
    for g in 0..total {
        if g > 0 {
            let i = g.trailing_zeros() as usize;
            labels ^= 1 << i;
            let on = labels & (1 << i) != 0;
            let factors = if on { &up[i] } else { &down[i] };
            for (e, f) in exp_input.iter_mut().zip(factors) {
                *e *= f;
            }
            let sign = if on { 1.0 } else { -1.0 };
            for (z, &h) in slow_input.iter_mut().zip(&slow) {
                *z += sign * params.au_weights.get(i, h);
            }
            bias_term += sign * params.au_bias[i];
        }
        let mut logw = bias_term;
        let mut start = 0;
        for &end in &group_ends {
            let prod: f64 = exp_input[start..end].iter().map(|e| 1.0 + e).product();
            logw += prod.ln();
            start = end;
        }
        logw += slow_input.iter().map(|&z| softplus(z)).sum::<f64>();
        out[labels] = logw;
    }
    out
}

/// Exact `P(a | x)` over all `2^N` label vectors, indexed by bit pattern
/// (bit `i` set means AU `i` active). Requires `N ≤ 20`.
pub fn au_joint_posterior(shape: &[f64], params: &RbmParams) -> Result<Vec<f64>> {
    if shape.len() != params.n_shape() {
        return Err(Error::DimensionMismatch(format!(
            "shape of length {} for RBM with {} shape units",
            shape.len(),
            params.n_shape()
        )));
    }
    if params.n_aus() > EXACT_POSTERIOR_MAX_AUS {
        return Err(Error::InvalidConfig(format!(
            "exact label enumeration limited to {EXACT_POSTERIOR_MAX_AUS} AUs, model has {}",
            params.n_aus()
        )));
    }
    let logw = label_log_weights(params, shape);
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(probs)
}

fn exact_marginals(shape: &[f64], params: &RbmParams) -> Result<Vec<f64>> {
    let joint = au_joint_posterior(shape, params)?;
    let n = params.n_aus();
    let mut marg = vec![0.0; n];
    for (bits, p) in joint.iter().enumerate() {
        for (i, m) in marg.iter_mut().enumerate() {
            if bits & (1 << i) != 0 {
                *m += p;
            }
        }
    }
    Ok(marg)
}

fn mean_field_marginals(shape: &[f64], params: &RbmParams) -> (Vec<f64>, bool) {
    let base = params.hidden_input_from_shape(shape);
    let n = params.n_aus();
    let mut mu_a = vec![0.5; n];
    let mut mu_h = vec![0.5; params.n_hidden()];
    for _ in 0..MEAN_FIELD_MAX_ITERS {
        let mut change: f64 = 0.0;
        let mut input_h = base.clone();
        for (i, &m) in mu_a.iter().enumerate() {
            for (z, w) in input_h.iter_mut().zip(params.au_weights.row(i)) {
                *z += m * w;
            }
        }
        for (mh, z) in mu_h.iter_mut().zip(&input_h) {
            let next = MEAN_FIELD_DAMPING * *mh + (1.0 - MEAN_FIELD_DAMPING) * sigmoid(*z);
            change = change.max((next - *mh).abs());
            *mh = next;
        }
        for (i, ma) in mu_a.iter_mut().enumerate() {
            let z = params.au_bias[i] + crate::linalg::dot(params.au_weights.row(i), &mu_h);
            let next = MEAN_FIELD_DAMPING * *ma + (1.0 - MEAN_FIELD_DAMPING) * sigmoid(z);
            change = change.max((next - *ma).abs());
            *ma = next;
        }
        if change < MEAN_FIELD_TOL {
            return (mu_a, true);
        }
    }
    (mu_a, false)
}

/// `P(aᵢ = 1 | x; θ)` for every AU, using exact enumeration when
/// `N ≤ exact_max_aus` and mean-field otherwise.
pub fn au_posterior_with(
    shape: &[f64],
    params: &RbmParams,
    exact_max_aus: usize,
) -> Result<AuPosterior> {
    if shape.len() != params.n_shape() {
        return Err(Error::DimensionMismatch(format!(
            "shape of length {} for RBM with {} shape units",
            shape.len(),
            params.n_shape()
        )));
    }
    let (probs, method, converged) = if params.n_aus() <= exact_max_aus.min(EXACT_POSTERIOR_MAX_AUS)
    {
        (
            exact_marginals(shape, params)?,
            PosteriorMethod::Exact,
            true,
        )
    } else {
        let (m, ok) = mean_field_marginals(shape, params);
        (m, PosteriorMethod::MeanField, ok)
    };
    Ok(AuPosterior {
        probs: AuProbs::from_clamped(probs),
        method,
        converged,
    })
}

pub fn au_posterior(shape: &[f64], params: &RbmParams) -> Result<AuPosterior> {
    au_posterior_with(shape, params, EXACT_POSTERIOR_MAX_AUS)
}

/// Per-coordinate affine standardization applied to shapes before they
/// enter the RBM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl Standardization {
    /// Coordinates with (near-)zero spread keep unit scale.
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or(Error::Empty("standardization data"))?;
        let d = first.len();
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; d];
        for v in vectors {
            if v.len() != d {
                return Err(Error::DimensionMismatch(
                    "ragged standardization data".into(),
                ));
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for v in vectors {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let stddev = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-8 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, stddev })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            stddev: vec![1.0; d],
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }
}

/// Empirical AU-conditional mean shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AuShapes {
    pub shapes: Vec<FaceShape>,
    /// `absent[i]` is set when no training sample activates AU `i`; its shape
    /// is then the global mean.
    pub absent: Vec<bool>,
}

/// Mean canonical shape over the samples activating each AU.
pub fn au_dependent_shapes(data: &[(AuLabels, FaceShape)], mean: &FaceShape) -> Result<AuShapes> {
    let (first_labels, _) = data.first().ok_or(Error::Empty("AU shape data"))?;
    mean.expect_frame(Frame::Canonical)?;
    let n = first_labels.len();
    let mut shapes = Vec::with_capacity(n);
    let mut absent = Vec::with_capacity(n);
    for i in 0..n {
        let members: Vec<FaceShape> = data
            .iter()
            .filter(|(a, _)| a.len() == n && a.is_active(i))
            .map(|(_, s)| s.clone())
            .collect();
        if members.is_empty() {
            shapes.push(mean.clone());
            absent.push(true);
        } else {
            let m = mean_shape(&members)?;
            if m.len() != mean.len() {
                return Err(Error::DimensionMismatch(
                    "AU shapes and mean shape differ in landmark count".into(),
                ));
            }
            shapes.push(m);
            absent.push(false);
        }
    }
    if data.iter().any(|(a, _)| a.len() != n) {
        return Err(Error::DimensionMismatch(
            "AU label vectors differ in length".into(),
        ));
    }
    Ok(AuShapes { shapes, absent })
}

/// RBM joint prior plus the AU-dependent expected shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPrior {
    pub rbm: RbmParams,
    pub standardization: Standardization,
    pub au_shapes: AuShapes,
    pub fallback_shape: FaceShape,
}

impl JointPrior {
    /// Standardizes the canonical shapes, trains the RBM by CD, and averages
    /// the AU-conditional shapes.
    pub fn fit(data: &[(AuLabels, FaceShape)], cd: &CdConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("joint prior training set"));
        }
        let shapes: Vec<FaceShape> = data.iter().map(|(_, s)| s.clone()).collect();
        let mean = mean_shape(&shapes)?;
        let flat: Vec<Vec<f64>> = shapes.iter().map(FaceShape::to_flat).collect();
        let standardization = Standardization::fit(&flat)?;
        let rbm_data: Vec<(AuLabels, Vec<f64>)> = data
            .iter()
            .zip(&flat)
            .map(|((a, _), x)| (a.clone(), standardization.apply(x)))
            .collect();
        let rbm = cd_train(&rbm_data, cd)?;
        let au_shapes = au_dependent_shapes(data, &mean)?;
        Ok(Self {
            rbm,
            standardization,
            au_shapes,
            fallback_shape: mean,
        })
    }

    pub fn n_aus(&self) -> usize {
        self.rbm.n_aus()
    }

    pub fn n_landmarks(&self) -> usize {
        self.fallback_shape.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.rbm.validate()?;
        let d2 = 2 * self.n_landmarks();
        if self.rbm.n_shape() != d2
            || self.standardization.mean.len() != d2
            || self.standardization.stddev.len() != d2
        {
            return Err(Error::DimensionMismatch(
                "joint prior shape dimensions disagree".into(),
            ));
        }
        if self.au_shapes.shapes.len() != self.n_aus()
            || self.au_shapes.absent.len() != self.n_aus()
        {
            return Err(Error::DimensionMismatch(
                "joint prior AU shape table has the wrong length".into(),
            ));
        }
        for s in self
            .au_shapes
            .shapes
            .iter()
            .chain(std::iter::once(&self.fallback_shape))
        {
            s.expect_frame(Frame::Canonical)?;
            if s.len() != self.n_landmarks() {
                return Err(Error::DimensionMismatch(
                    "AU shape landmark count differs from mean shape".into(),
                ));
            }
        }
        Ok(())
    }

    /// `P(aᵢ = 1 | x)` for a canonical shape.
    pub fn au_posterior(&self, shape: &FaceShape) -> Result<AuPosterior> {
        shape.expect_frame(Frame::Canonical)?;
        let z = self.standardization.apply(&shape.to_flat());
        au_posterior(&z, &self.rbm)
    }

    pub fn shape_prior(&self, probs: &AuProbs) -> Result<FaceShape> {
        shape_prior(probs, self)
    }
}

/// Probability-weighted combination of the AU-dependent shapes:
/// `x̄ = Σᵢ shapeᵢ · pᵢ / Σₗ pₗ`, or the fallback shape when `Σ p` is ~0.
pub fn shape_prior(probs: &AuProbs, prior: &JointPrior) -> Result<FaceShape> {
    let n = prior.au_shapes.shapes.len();
    if probs.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} AU probabilities for a prior over {n} AUs",
            probs.len()
        )));
    }
    let total: f64 = probs.as_slice().iter().sum();
    if total < SHAPE_PRIOR_MIN_WEIGHT {
        return Ok(prior.fallback_shape.clone());
    }
    let mut acc = vec![0.0; 2 * prior.n_landmarks()];
    for (shape, &p) in prior.au_shapes.shapes.iter().zip(probs.as_slice()) {
        let w = p / total;
        for (a, v) in acc.iter_mut().zip(shape.to_flat()) {
            *a += w * v;
        }
    }
    FaceShape::from_flat(&acc, Frame::Canonical)
}
