//! Probability families used by both models: diagonal Gaussians with
//! reparameterized sampling and analytic KL, and the discretized logistic
//! mixture likelihood for 8-bit images.
//!
//! Each operation exists twice: a plain `f64` entry point, and a `_t` variant
//! that assembles the same computation on a [`Tape`] so gradients flow to the
//! parameters (and through sampled values). The discretized logistic log-mass
//! has a single source of truth: the plain version evaluates the tape graph
//! without recording.

use crate::autodiff::{sigmoid_scalar, Tape, Var};
use crate::downscale::DiscreteImage;
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, RngStream};

pub const LOG_VAR_MIN: f64 = -7.0;
pub const LOG_VAR_MAX: f64 = 7.0;
pub const LOG_SCALE_MIN: f64 = -7.0;

/// Half-width of a pixel bin on the `[-1, 1]` scale.
const BIN_HALF_WIDTH: f64 = 1.0 / 255.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Mean and log-variance of a diagonal Gaussian. The log-variance is clamped
/// into `[-7, 7]` at construction.
#[derive(Clone, Debug)]
pub struct DiagGaussianParams {
    pub mean: DenseArray,
    pub log_var: DenseArray,
}

impl DiagGaussianParams {
    pub fn new(mean: DenseArray, log_var: DenseArray) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mean {:?} vs log_var {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        Ok(Self {
            mean,
            log_var: log_var.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)),
        })
    }

    /// Standard normal over `shape`.
    pub fn standard(shape: &[usize]) -> Self {
        Self {
            mean: DenseArray::zeros(shape),
            log_var: DenseArray::zeros(shape),
        }
    }
}

/// Per-value mixture of discretized logistics: the three arrays share shape
/// `[.., n_mix]`, one mixture per image scalar. Log-scales are clamped to
/// `>= -7` at construction.
#[derive(Clone, Debug)]
pub struct DLogisticMixtureParams {
    pub logit_weights: DenseArray,
    pub means: DenseArray,
    pub log_scales: DenseArray,
}

impl DLogisticMixtureParams {
    pub fn new(
        logit_weights: DenseArray,
        means: DenseArray,
        log_scales: DenseArray,
    ) -> Result<Self> {
        if logit_weights.shape() != means.shape() || means.shape() != log_scales.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?}, means {:?}, log_scales {:?} must share a shape",
                logit_weights.shape(),
                means.shape(),
                log_scales.shape()
            )));
        }
        let n_mix = *logit_weights.shape().last().unwrap_or(&0);
        if n_mix == 0 {
            return Err(Error::InvalidArgument(
                "mixture needs a trailing extent n_mix >= 1".into(),
            ));
        }
        Ok(Self {
            logit_weights,
            means,
            log_scales: log_scales.map(|v| v.max(LOG_SCALE_MIN)),
        })
    }

    pub fn n_mix(&self) -> usize {
        *self.logit_weights.shape().last().unwrap()
    }

    /// Number of image scalars covered (product of the leading extents).
    pub fn pixel_count(&self) -> usize {
        self.logit_weights.len() / self.n_mix()
    }
}

// ── diagonal Gaussian ────────────────────────────────────────────────

/// Reparameterized sample `mean + exp(log_var / 2) * noise`.
pub fn gaussian_sample(params: &DiagGaussianParams, noise: &DenseArray) -> Result<DenseArray> {
    if noise.shape() != params.mean.shape() {
        return Err(Error::ShapeMismatch(format!(
            "noise {:?} vs mean {:?}",
            noise.shape(),
            params.mean.shape()
        )));
    }
    let std = params.log_var.map(|v| (0.5 * v).exp());
    Ok(params
        .mean
        .zip_map(&std.zip_map(noise, |s, e| s * e), |m, d| m + d))
}

/// Log-density in nats, summed over all coordinates.
pub fn gaussian_log_prob(params: &DiagGaussianParams, value: &DenseArray) -> Result<f64> {
    if value.shape() != params.mean.shape() {
        return Err(Error::ShapeMismatch(format!(
            "value {:?} vs mean {:?}",
            value.shape(),
            params.mean.shape()
        )));
    }
    let mut total = 0.0;
    for ((&v, &m), &lv) in value
        .data()
        .iter()
        .zip(params.mean.data())
        .zip(params.log_var.data())
    {
        let d = v - m;
        total += -0.5 * (LN_2PI + lv + d * d * (-lv).exp());
    }
    Ok(total)
}

/// Analytic `KL(q || p)` between diagonal Gaussians, in nats.
pub fn gaussian_kl(q: &DiagGaussianParams, p: &DiagGaussianParams) -> Result<f64> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::ShapeMismatch(format!(
            "q {:?} vs p {:?}",
            q.mean.shape(),
            p.mean.shape()
        )));
    }
    let mut total = 0.0;
    for i in 0..q.mean.len() {
        let (mq, lq) = (q.mean.data()[i], q.log_var.data()[i]);
        let (mp, lp) = (p.mean.data()[i], p.log_var.data()[i]);
        let dm = mq - mp;
        total += 0.5 * ((lq - lp).exp() + dm * dm * (-lp).exp() - 1.0 + lp - lq);
    }
    Ok(total)
}

// ── discretized logistic mixture ─────────────────────────────────────

/// Log-likelihood of an 8-bit image under the mixture, in nats.
///
/// Per scalar, value `x` maps to `xt = x / 127.5 - 1`; a component with
/// location `mu` and scale `s` assigns the bin `[xt - 1/255, xt + 1/255]`
/// the mass `sigma(b) - sigma(a)` of the logistic CDF, with the lower edge
/// at `-inf` for `x = 0` and the upper at `+inf` for `x = 255`. Components
/// combine through their softmax weights in log space.
pub fn dlogistic_log_prob(params: &DLogisticMixtureParams, pixels: &DiscreteImage) -> Result<f64> {
    let tape = Tape::no_grad();
    let vars = MixtureVars {
        logit_weights: tape.constant(params.logit_weights.clone()),
        means: tape.constant(params.means.clone()),
        log_scales: tape.constant(params.log_scales.clone()),
    };
    let lp = dlogistic_log_prob_t(&tape, &vars, pixels)?;
    Ok(tape.item(lp))
}

/// Ancestral sample from the mixture, quantized to `{0..255}`.
///
/// Per scalar, in row-major order: one uniform selects the component, one
/// uniform `t` in `(1e-5, 1 - 1e-5)` drives the logistic inverse CDF
/// `mu + s (ln t - ln(1 - t))`; the result is clamped to `[-1, 1]` and
/// rounded to the nearest bin centre.
pub fn dlogistic_sample(
    params: &DLogisticMixtureParams,
    height: usize,
    width: usize,
    channels: usize,
    rng: &mut RngStream,
) -> Result<DiscreteImage> {
    let n_mix = params.n_mix();
    let count = params.pixel_count();
    if count != height * width * channels {
        return Err(Error::ShapeMismatch(format!(
            "params cover {count} scalars, image wants {}",
            height * width * channels
        )));
    }
    const EPS: f64 = 1e-5;
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let logits = &params.logit_weights.data()[i * n_mix..(i + 1) * n_mix];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let u = rng.uniform() * norm;
        let mut cum = 0.0;
        let mut k = n_mix - 1;
        for (j, &e) in exps.iter().enumerate() {
            cum += e;
            if u < cum {
                k = j;
                break;
            }
        }
        let mu = params.means.data()[i * n_mix + k];
        let s = params.log_scales.data()[i * n_mix + k].exp();
        let t = EPS + rng.uniform() * (1.0 - 2.0 * EPS);
        let v = (mu + s * (t.ln() - (1.0 - t).ln())).clamp(-1.0, 1.0);
        values.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
    }
    DiscreteImage::new(height, width, channels, values)
}

// ── tape variants ────────────────────────────────────────────────────

/// Gaussian parameters living on a tape. The log-variance is expected to be
/// clamped already (the network heads and `leaf` constructors do this).
#[derive(Clone, Copy)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Put existing parameters on a tape as constants (no gradient).
    pub fn constant(tape: &Tape, params: &DiagGaussianParams) -> Self {
        Self {
            mean: tape.constant(params.mean.clone()),
            log_var: tape.constant(params.log_var.clone()),
        }
    }

    /// Put existing parameters on a tape as differentiable leaves.
    pub fn leaf(tape: &Tape, params: &DiagGaussianParams) -> Self {
        Self {
            mean: tape.leaf(params.mean.clone()),
            log_var: tape.leaf(params.log_var.clone()),
        }
    }
}

pub fn gaussian_sample_t(tape: &Tape, g: GaussianVars, noise: Var) -> Var {
    let std = tape.exp(tape.mul_scalar(g.log_var, 0.5));
    tape.add(g.mean, tape.mul(std, noise))
}

pub fn gaussian_log_prob_t(tape: &Tape, g: GaussianVars, value: Var) -> Var {
    let dim = tape.shape(value).iter().product::<usize>() as f64;
    let diff = tape.sub(value, g.mean);
    let sq = tape.mul(diff, diff);
    let pre = tape.exp(tape.neg(g.log_var));
    let inner = tape.add(g.log_var, tape.mul(sq, pre));
    let total = tape.add_scalar(tape.sum(inner), dim * LN_2PI);
    tape.mul_scalar(total, -0.5)
}

pub fn gaussian_kl_t(tape: &Tape, q: GaussianVars, p: GaussianVars) -> Var {
    let dl = tape.sub(q.log_var, p.log_var);
    let var_ratio = tape.exp(dl);
    let dm = tape.sub(q.mean, p.mean);
    let maha = tape.mul(tape.mul(dm, dm), tape.exp(tape.neg(p.log_var)));
    let inner = tape.sub(tape.add(var_ratio, maha), tape.add_scalar(dl, 1.0));
    tape.mul_scalar(tape.sum(inner), 0.5)
}

/// Mixture parameters living on a tape, shape `[.., n_mix]` each.
#[derive(Clone, Copy)]
pub struct MixtureVars {
    pub logit_weights: Var,
    pub means: Var,
    pub log_scales: Var,
}

/// Discretized-logistic mixture log-likelihood as a tape graph.
///
/// The bin mass is evaluated through the exact stable decomposition
/// `log(sigma(b) - sigma(a)) = -a + ln(-expm1(-(b - a))) - softplus(-a)
/// - softplus(-b)`, which stays accurate across the whole scale range; the
/// edge bins use the one-sided CDF forms.
pub fn dlogistic_log_prob_t(tape: &Tape, mix: &MixtureVars, pixels: &DiscreteImage) -> Result<Var> {
    let shape = tape.shape(mix.logit_weights);
    let n_mix = *shape.last().ok_or_else(|| {
        Error::InvalidArgument("mixture parameters must have a trailing mixture axis".into())
    })?;
    let count: usize = shape.iter().product::<usize>() / n_mix;
    if count != pixels.len() {
        return Err(Error::ShapeMismatch(format!(
            "mixture covers {count} scalars, image has {}",
            pixels.len()
        )));
    }

    // Per-scalar constants, repeated across the mixture axis.
    let mut upper = Vec::with_capacity(count * n_mix);
    let mut lower = Vec::with_capacity(count * n_mix);
    let mut is_low = Vec::with_capacity(count * n_mix);
    let mut is_high = Vec::with_capacity(count * n_mix);
    for &v in pixels.values() {
        let xt = v as f64 / 127.5 - 1.0;
        for _ in 0..n_mix {
            upper.push(xt + BIN_HALF_WIDTH);
            lower.push(xt - BIN_HALF_WIDTH);
            is_low.push(if v == 0 { 1.0 } else { 0.0 });
            is_high.push(if v == 255 { 1.0 } else { 0.0 });
        }
    }
    let flat = vec![count, n_mix];
    let upper = tape.constant(DenseArray::new(flat.clone(), upper)?);
    let lower = tape.constant(DenseArray::new(flat.clone(), lower)?);
    let mask_low = tape.constant(DenseArray::new(flat.clone(), is_low)?);
    let mask_high = tape.constant(DenseArray::new(flat.clone(), is_high)?);

    let logits = tape.reshape(mix.logit_weights, &flat);
    let means = tape.reshape(mix.means, &flat);
    let log_scales = tape.reshape(mix.log_scales, &flat);

    let inv_s = tape.exp(tape.neg(log_scales));
    let b = tape.mul(tape.sub(upper, means), inv_s);
    let a = tape.mul(tape.sub(lower, means), inv_s);
    let delta = tape.mul_scalar(inv_s, 2.0 * BIN_HALF_WIDTH);
    // ln(1 - exp(-delta)) without cancellation for small or large delta.
    let ln_diff = tape.ln(tape.neg(tape.expm1(tape.neg(delta))));

    let neg_a = tape.neg(a);
    let sp_neg_a = tape.softplus(neg_a);
    let sp_neg_b = tape.softplus(tape.neg(b));
    let interior = tape.sub(tape.sub(tape.add(neg_a, ln_diff), sp_neg_a), sp_neg_b);
    let low_edge = tape.neg(sp_neg_b);
    let high_edge = tape.neg(tape.softplus(a));

    let per_comp = tape.select_mask(mask_low, low_edge, interior);
    let per_comp = tape.select_mask(mask_high, high_edge, per_comp);

    let log_w = tape.sub(logits, tape.broadcast_last(tape.lse_last(logits), n_mix));
    let per_scalar = tape.lse_last(tape.add(per_comp, log_w));
    Ok(tape.sum(per_scalar))
}

/// Exact bin mass of one discretized-logistic component, evaluated directly
/// from the CDF. Test oracle and sampling reference; not the training path.
pub fn dlogistic_component_mass(value: u8, mu: f64, log_scale: f64) -> f64 {
    let xt = value as f64 / 127.5 - 1.0;
    let inv_s = (-log_scale).exp();
    let upper = if value == 255 {
        1.0
    } else {
        sigmoid_scalar((xt + BIN_HALF_WIDTH - mu) * inv_s)
    };
    let lower = if value == 0 {
        0.0
    } else {
        sigmoid_scalar((xt - BIN_HALF_WIDTH - mu) * inv_s)
    };
    upper - lower
}

/// Mixture bin mass by direct CDF evaluation (brute-force oracle).
pub fn dlogistic_mass_oracle(params: &DLogisticMixtureParams, index: usize, value: u8) -> f64 {
    let n_mix = params.n_mix();
    let logits = &params.logit_weights.data()[index * n_mix..(index + 1) * n_mix];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let norm: f64 = exps.iter().sum();
    let mut mass = 0.0;
    for k in 0..n_mix {
        let w = exps[k] / norm;
        mass += w
            * dlogistic_component_mass(
                value,
                params.means.data()[index * n_mix + k],
                params.log_scales.data()[index * n_mix + k],
            );
    }
    mass
}
