//! Stochastic encoding `Y = h + ε`, projection onto the kernel complement of
//! `W_d`, the variational models `q(z)` and `r(c|z)`, and the objective
//! assembled from them.
//!
//! Monte Carlo samples are stored as rows of an `[N·S, dim]` matrix, sample
//! `s` of input `n` at row `n·S + s`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ProjectionMatrix, DEFAULT_RANK_TOLERANCE};
use crate::nn::{cross_entropy, log_softmax_at, BoundModel, DecoderHead, EncoderNetwork, Mode};
use crate::tensor::{sigmoid, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QModel {
    /// Two-component Gaussian mixture per coordinate.
    #[default]
    Bimodal,
    /// One Gaussian per coordinate.
    SingleGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReveConfig {
    /// Variance of the encoding noise, per coordinate.
    pub sigma2: f64,
    pub beta: f64,
    /// Monte Carlo samples per input.
    pub samples: usize,
    pub variance_floor: f64,
    /// Mixture weights are clamped to `[alpha_floor, 1 − alpha_floor]`.
    pub alpha_floor: f64,
    pub rank_tolerance: f64,
    /// Parameter updates between SVD recomputations.
    pub svd_refresh_period: usize,
    pub q_model: QModel,
    /// Weight kept from the previous batch's `q` parameters. Unset fits
    /// every batch from scratch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_ema: Option<f64>,
}

impl Default for ReveConfig {
    fn default() -> Self {
        Self {
            sigma2: 1e-2,
            beta: 1e-4,
            samples: 12,
            variance_floor: 1e-4,
            alpha_floor: 1e-3,
            rank_tolerance: DEFAULT_RANK_TOLERANCE,
            svd_refresh_period: 1,
            q_model: QModel::Bimodal,
            q_ema: None,
        }
    }
}

impl ReveConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return fail(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return fail(format!(
                "variance_floor must be positive, got {}",
                self.variance_floor
            ));
        }
        if !(self.alpha_floor > 0.0 && self.alpha_floor < 0.5) {
            return fail(format!(
                "alpha_floor must lie in (0, 0.5), got {}",
                self.alpha_floor
            ));
        }
        if !(self.rank_tolerance > 0.0 && self.rank_tolerance < 1.0) {
            return fail(format!(
                "rank_tolerance must lie in (0, 1), got {}",
                self.rank_tolerance
            ));
        }
        if self.svd_refresh_period == 0 {
            return fail("svd_refresh_period must be at least 1".into());
        }
        if let Some(keep) = self.q_ema {
            if !(0.0..1.0).contains(&keep) {
                return fail(format!("q_ema must lie in [0, 1), got {keep}"));
            }
        }
        Ok(())
    }
}

/// Per-coordinate mixture `α·N(μ₁, σ₁²) + (1 − α)·N(μ₀, σ₀²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub alpha: Vec<f64>,
    pub mu1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mu0: Vec<f64>,
    pub var0: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Fitted parameters of `q(z)`. They enter the tape as constants.
#[derive(Clone, Debug, PartialEq)]
pub enum QParams {
    Bimodal(GmmParams),
    SingleGaussian(GaussianParams),
}

impl QParams {
    pub fn fit(z: &Tensor, config: &ReveConfig) -> Result<Self> {
        Ok(match config.q_model {
            QModel::Bimodal => QParams::Bimodal(m_step(
                z,
                &responsibilities(z),
                config.variance_floor,
                config.alpha_floor,
            )?),
            QModel::SingleGaussian => {
                QParams::SingleGaussian(gaussian_fit(z, config.variance_floor)?)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            QParams::Bimodal(p) => p.alpha.len(),
            QParams::SingleGaussian(p) => p.mean.len(),
        }
    }

    /// `keep·self + (1 − keep)·fresh`, field by field. Returns `fresh` when
    /// the two disagree in kind or dimension.
    pub fn blend(&self, fresh: &QParams, keep: f64) -> QParams {
        let mix = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter()
                .zip(new)
                .map(|(o, n)| keep * o + (1.0 - keep) * n)
                .collect()
        };
        if self.dim() != fresh.dim() {
            return fresh.clone();
        }
        match (self, fresh) {
            (QParams::Bimodal(o), QParams::Bimodal(n)) => QParams::Bimodal(GmmParams {
                alpha: mix(&o.alpha, &n.alpha),
                mu1: mix(&o.mu1, &n.mu1),
                var1: mix(&o.var1, &n.var1),
                mu0: mix(&o.mu0, &n.mu0),
                var0: mix(&o.var0, &n.var0),
            }),
            (QParams::SingleGaussian(o), QParams::SingleGaussian(n)) => {
                QParams::SingleGaussian(GaussianParams {
                    mean: mix(&o.mean, &n.mean),
                    var: mix(&o.var, &n.var),
                })
            }
            _ => fresh.clone(),
        }
    }
}

/// Samples of `Z` with their source labels, one label per row.
#[derive(Clone, Debug)]
pub struct ZBatch<'t> {
    /// `[N·S, dim]`
    pub z: Var<'t>,
    pub labels: Vec<usize>,
    pub inputs: usize,
    pub samples: usize,
}

/// `σ·ξ` with `ξ ~ N(0, 1)`, shape `[inputs·samples, dim]`.
pub fn sample_noise<R: Rng + ?Sized>(
    inputs: usize,
    dim: usize,
    sigma2: f64,
    samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if !(sigma2 > 0.0) {
        return Err(Error::Domain {
            op: "sample_noise",
            detail: format!("sigma2 = {sigma2}"),
        });
    }
    let sigma = sigma2.sqrt();
    let len = inputs * samples * dim;
    let data = (0..len)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new([inputs * samples, dim], data)
}

/// Repeats each row of `h` `samples` times and adds the constant `noise`.
pub fn perturb<'t>(h: Var<'t>, noise: &Tensor, samples: usize) -> Result<Var<'t>> {
    let shape = h.shape();
    let &[n, d] = shape.as_slice() else {
        return Err(Error::InvalidShape {
            shape,
            reason: "encoding must be [N, dim]".into(),
        });
    };
    if noise.shape() != [n * samples, d] {
        return Err(Error::ShapeMismatch {
            op: "perturb",
            lhs: vec![n * samples, d],
            rhs: noise.shape().to_vec(),
        });
    }
    let repeated = h
        .reshape([n, 1, d])?
        .broadcast_to(&[n, samples, d])?
        .reshape([n * samples, d])?;
    repeated.add(h.tape().constant(noise.clone()))
}

/// `y = h + ε` for `samples` independent draws per input. Returns the samples
/// and the noise that produced them.
pub fn sample_encoding<'t, R: Rng + ?Sized>(
    h: Var<'t>,
    sigma2: f64,
    samples: usize,
    rng: &mut R,
) -> Result<(Var<'t>, Tensor)> {
    let shape = h.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            shape,
            reason: "encoding must be [N, dim]".into(),
        });
    }
    let noise = sample_noise(shape[0], shape[1], sigma2, samples, rng)?;
    Ok((perturb(h, &noise, samples)?, noise))
}

/// `z = P·y` per row. `labels` holds one label per input.
pub fn project_to_z<'t>(
    y: Var<'t>,
    projection: &ProjectionMatrix,
    labels: &[usize],
    samples: usize,
) -> Result<ZBatch<'t>> {
    let shape = y.shape();
    if shape.len() != 2 || shape[1] != projection.dim() {
        return Err(Error::ShapeMismatch {
            op: "project_to_z",
            lhs: shape,
            rhs: vec![projection.dim(), projection.dim()],
        });
    }
    if samples == 0 || labels.len() * samples != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "project_to_z",
            lhs: shape,
            rhs: vec![labels.len(), samples],
        });
    }
    // P is exactly symmetric, so the row form y·P equals (P·yᵀ)ᵀ.
    let z = y.matmul(y.tape().constant(projection.to_tensor()?))?;
    Ok(ZBatch {
        z,
        labels: labels
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c, samples))
            .collect(),
        inputs: labels.len(),
        samples,
    })
}

/// Elementwise logistic of `z`.
pub fn responsibilities(z: &Tensor) -> Tensor {
    z.map(sigmoid)
}

fn columns(z: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *z.shape() {
        [m, d] if m >= 2 => Ok((m, d)),
        _ => Err(Error::InvalidShape {
            shape: z.shape().to_vec(),
            reason: format!("{op} needs at least 2 samples as [M, dim]"),
        }),
    }
}

/// Weighted mean and variance of each column. Falls back to unweighted
/// moments when the weights underflow to zero.
fn weighted_moments(
    z: &Tensor,
    w: impl Fn(usize) -> f64,
    variance_floor: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, d) = (z.shape()[0], z.shape()[1]);
    let mut total = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for (r, row) in z.data().chunks(d).enumerate() {
        for (i, &x) in row.iter().enumerate() {
            let wi = w(r * d + i);
            total[i] += wi;
            mean[i] += wi * x;
        }
    }
    let degenerate: Vec<bool> = total.iter().map(|&t| t <= 0.0).collect();
    for i in 0..d {
        mean[i] = if degenerate[i] {
            z.data().iter().skip(i).step_by(d).sum::<f64>() / m as f64
        } else {
            mean[i] / total[i]
        };
    }
    let mut var = vec![0.0; d];
    for (r, row) in z.data().chunks(d).enumerate() {
        for (i, &x) in row.iter().enumerate() {
            let wi = if degenerate[i] { 1.0 } else { w(r * d + i) };
            var[i] += wi * (x - mean[i]).powi(2);
        }
    }
    for i in 0..d {
        let t = if degenerate[i] { m as f64 } else { total[i] };
        var[i] = (var[i] / t).max(variance_floor);
    }
    (total, mean, var)
}

/// Weighted-moment M-step of the per-coordinate two-mode mixture, with
/// weights `π` for mode 1 and `1 − π` for mode 0.
pub fn m_step(z: &Tensor, pi: &Tensor, variance_floor: f64, alpha_floor: f64) -> Result<GmmParams> {
    let (m, _) = columns(z, "m_step")?;
    if pi.shape() != z.shape() {
        return Err(Error::ShapeMismatch {
            op: "m_step",
            lhs: z.shape().to_vec(),
            rhs: pi.shape().to_vec(),
        });
    }
    let p = pi.data();
    let (mass1, mu1, var1) = weighted_moments(z, |k| p[k], variance_floor);
    let (_, mu0, var0) = weighted_moments(z, |k| 1.0 - p[k], variance_floor);
    let alpha = mass1
        .iter()
        .map(|&s| (s / m as f64).clamp(alpha_floor, 1.0 - alpha_floor))
        .collect();
    Ok(GmmParams {
        alpha,
        mu1,
        var1,
        mu0,
        var0,
    })
}

/// Batch mean and floored population variance of each coordinate.
pub fn gaussian_fit(z: &Tensor, variance_floor: f64) -> Result<GaussianParams> {
    columns(z, "gaussian_fit")?;
    let (_, mean, var) = weighted_moments(z, |_| 1.0, variance_floor);
    Ok(GaussianParams { mean, var })
}

/// `log w + log N(z | μ, σ²)` per element, with per-coordinate constants.
fn log_component<'t>(z: Var<'t>, log_weight: &[f64], mu: &[f64], var: &[f64]) -> Result<Var<'t>> {
    let tape = z.tape();
    let d = mu.len();
    let row = |v: Vec<f64>| Tensor::new([1, d], v).map(|t| tape.constant(t));
    let mu = row(mu.to_vec())?;
    let precision = row(var.iter().map(|v| -0.5 / v).collect())?;
    let offset = row(log_weight
        .iter()
        .zip(var)
        .map(|(lw, v)| lw - 0.5 * (2.0 * PI * v).ln())
        .collect())?;
    z.sub(mu)?.square().mul(precision)?.add(offset)
}

/// Mean-field `log q(z)` of each row of `z`, shape `[M]`.
pub fn log_q<'t>(z: Var<'t>, q: &QParams) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 2 || shape[1] != q.dim() {
        return Err(Error::ShapeMismatch {
            op: "log_q",
            lhs: shape,
            rhs: vec![q.dim()],
        });
    }
    let per_coordinate = match q {
        QParams::Bimodal(p) => {
            let log_a: Vec<f64> = p.alpha.iter().map(|a| a.ln()).collect();
            let log_b: Vec<f64> = p.alpha.iter().map(|a| (1.0 - a).ln()).collect();
            let mode1 = log_component(z, &log_a, &p.mu1, &p.var1)?;
            let mode0 = log_component(z, &log_b, &p.mu0, &p.var0)?;
            mode1.logaddexp(mode0)?
        }
        QParams::SingleGaussian(p) => log_component(z, &vec![0.0; p.mean.len()], &p.mean, &p.var)?,
    };
    per_coordinate.sum_axis(1, false)
}

/// `log r(c|z) = log softmax(W_d·z + b)_c` of each row, shape `[M]`.
pub fn log_r<'t>(z: Var<'t>, labels: &[usize], weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    log_softmax_at(DecoderHead::logits(weight, bias, z)?, labels)
}

/// The regularization term of one batch and what is needed to replay it.
#[derive(Clone, Debug)]
pub struct ReveLoss<'t> {
    /// `−(1/(N·S)) Σ [log r(c|z) + log q(z)]`
    pub omega: Var<'t>,
    /// `−mean log q(z)`
    pub neg_log_q: f64,
    /// `−mean log r(c|z)`
    pub neg_log_r: f64,
    pub noise: Tensor,
    pub q: QParams,
}

fn assemble<'t>(
    batch: &ZBatch<'t>,
    q: &QParams,
    bound: &BoundModel<'t>,
) -> Result<(Var<'t>, f64, f64)> {
    let lq = log_q(batch.z, q)?.mean();
    let lr = log_r(batch.z, &batch.labels, bound.weight, bound.bias)?.mean();
    let omega = lr.add(lq)?.neg();
    Ok((omega, -lq.item(), -lr.item()))
}

/// Draws fresh noise, fits `q` on the projected samples (blended with
/// `previous` when `config.q_ema` is set) and evaluates the loss.
pub fn reve_loss<'t, R: Rng + ?Sized>(
    h: Var<'t>,
    labels: &[usize],
    bound: &BoundModel<'t>,
    projection: &ProjectionMatrix,
    config: &ReveConfig,
    previous: Option<&QParams>,
    rng: &mut R,
) -> Result<ReveLoss<'t>> {
    let (y, noise) = sample_encoding(h, config.sigma2, config.samples, rng)?;
    let batch = project_to_z(y, projection, labels, config.samples)?;
    let fresh = QParams::fit(&batch.z.value(), config)?;
    let q = match (previous, config.q_ema) {
        (Some(old), Some(keep)) => old.blend(&fresh, keep),
        _ => fresh,
    };
    let (omega, neg_log_q, neg_log_r) = assemble(&batch, &q, bound)?;
    Ok(ReveLoss {
        omega,
        neg_log_q,
        neg_log_r,
        noise,
        q,
    })
}

/// The loss with noise, projection and `q` held fixed.
pub fn reve_loss_frozen<'t>(
    h: Var<'t>,
    labels: &[usize],
    bound: &BoundModel<'t>,
    projection: &ProjectionMatrix,
    noise: &Tensor,
    q: &QParams,
) -> Result<Var<'t>> {
    let samples = noise.shape()[0] / labels.len().max(1);
    let y = perturb(h, noise, samples)?;
    let batch = project_to_z(y, projection, labels, samples)?;
    Ok(assemble(&batch, q, bound)?.0)
}

/// Regularizer inputs for one training step.
pub struct ReveStep<'a, R: ?Sized> {
    pub config: &'a ReveConfig,
    pub projection: &'a ProjectionMatrix,
    pub previous_q: Option<&'a QParams>,
    pub rng: &'a mut R,
}

#[derive(Clone, Debug)]
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub cross_entropy: Var<'t>,
    pub reve: Option<ReveLoss<'t>>,
}

/// Cross-entropy of the deterministic encoding plus `β·Ω`. With `β = 0` the
/// regularizer is still evaluated (for logging) but not added.
pub fn total_objective<'t, R: Rng + ?Sized>(
    encoder: &EncoderNetwork,
    bound: &BoundModel<'t>,
    x: Var<'t>,
    labels: &[usize],
    mode: Mode<'_>,
    reve: Option<ReveStep<'_, R>>,
) -> Result<Objective<'t>> {
    let h = encoder.encode(&bound.encoder, x, mode)?;
    let ce = cross_entropy(DecoderHead::logits(bound.weight, bound.bias, h)?, labels)?;
    let Some(step) = reve else {
        return Ok(Objective {
            total: ce,
            cross_entropy: ce,
            reve: None,
        });
    };
    let loss = reve_loss(
        h,
        labels,
        bound,
        step.projection,
        step.config,
        step.previous_q,
        step.rng,
    )?;
    let total = if step.config.beta > 0.0 {
        ce.add(loss.omega.scale(step.config.beta))?
    } else {
        ce
    };
    Ok(Objective {
        total,
        cross_entropy: ce,
        reve: Some(loss),
    })
}
