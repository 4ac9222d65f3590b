//! Bijective prior over a flat latent vector: stacked affine coupling layers
//! with exact inverses and log-determinants over a standard-normal base.
//!
//! A coupling layer passes the masked coordinates through unchanged and maps
//! the rest to `v * exp(s) + t`, where `s` and `t` are small MLPs of the
//! masked part and `s` is tanh-bounded into `[-2, 2]`. Depth 0 degenerates to
//! the standard normal itself.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, RngStream};
use crate::params::{join, Binder, HasParams};

/// Bound on the per-coordinate log-scale of a coupling layer.
pub const SCALE_CAP: f64 = 2.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Two-layer perceptron `in -> hidden -> out` with ELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
}

pub struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl Mlp {
    /// He-initialized hidden layer; the output layer starts at zero so the
    /// surrounding transform begins as the identity.
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let std1 = (2.0 / in_dim.max(1) as f64).sqrt();
        let w1 = rng.normal_array(&[in_dim, hidden]).map(|v| v * std1);
        Self {
            w1,
            b1: DenseArray::zeros(&[hidden]),
            w2: DenseArray::zeros(&[hidden, out_dim]),
            b2: DenseArray::zeros(&[out_dim]),
        }
    }

    pub fn forward_plain(&self, x: &[f64]) -> Vec<f64> {
        let hidden = self.b1.len();
        let out_dim = self.b2.len();
        let mut h = self.b1.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w1.data()[i * hidden..(i + 1) * hidden];
            for (hv, &wv) in h.iter_mut().zip(row) {
                *hv += xi * wv;
            }
        }
        for hv in &mut h {
            if *hv <= 0.0 {
                *hv = hv.exp_m1();
            }
        }
        let mut out = self.b2.data().to_vec();
        for (i, &hi) in h.iter().enumerate() {
            if hi == 0.0 {
                continue;
            }
            let row = &self.w2.data()[i * out_dim..(i + 1) * out_dim];
            for (ov, &wv) in out.iter_mut().zip(row) {
                *ov += hi * wv;
            }
        }
        out
    }

    pub fn forward_t(&self, tape: &Tape, vars: &MlpVars, x: Var) -> Var {
        let h = tape.elu(tape.linear(x, vars.w1, vars.b1));
        tape.linear(h, vars.w2, vars.b2)
    }

    pub fn bind(&self, binder: &mut Binder) -> MlpVars {
        MlpVars {
            w1: binder.leaf(&self.w1),
            b1: binder.leaf(&self.b1),
            w2: binder.leaf(&self.w2),
            b2: binder.leaf(&self.b2),
        }
    }
}

impl HasParams for Mlp {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray)) {
        f(&join(prefix, "w1"), &self.w1);
        f(&join(prefix, "b1"), &self.b1);
        f(&join(prefix, "w2"), &self.w2);
        f(&join(prefix, "b2"), &self.b2);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        f(&join(prefix, "w1"), &mut self.w1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "w2"), &mut self.w2);
        f(&join(prefix, "b2"), &mut self.b2);
    }
}

/// One affine coupling layer over a flat vector.
///
/// `mask` entries are 0 or 1; 1 marks pass-through coordinates. For
/// dimension 1 the only usable mask is all-zero (nothing to condition on),
/// which reduces the layer to a learnable elementwise affine map.
#[derive(Clone, Debug)]
pub struct CouplingLayer {
    mask: DenseArray,
    pub scale_net: Mlp,
    pub translate_net: Mlp,
}

pub struct CouplingVars {
    mask: Var,
    inv_mask: Var,
    scale_net: MlpVars,
    translate_net: MlpVars,
}

impl CouplingLayer {
    pub fn new(mask: Vec<f64>, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        let dim = mask.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("empty coupling mask".into()));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("coupling mask must be 0/1".into()));
        }
        let ones = mask.iter().filter(|&&m| m == 1.0).count();
        if ones == dim {
            return Err(Error::InvalidArgument(
                "coupling mask transforms no coordinate".into(),
            ));
        }
        if ones == 0 && dim > 1 {
            return Err(Error::InvalidArgument(
                "coupling mask must pass at least one coordinate through".into(),
            ));
        }
        Ok(Self {
            mask: DenseArray::from_vec(mask),
            scale_net: Mlp::new(dim, hidden, dim, rng),
            translate_net: Mlp::new(dim, hidden, dim, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &DenseArray {
        &self.mask
    }

    /// Bounded log-scale and shift as functions of the masked coordinates.
    fn scale_translate(&self, v: &DenseArray) -> (Vec<f64>, Vec<f64>) {
        let masked: Vec<f64> = v
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let s_raw = self.scale_net.forward_plain(&masked);
        let t_raw = self.translate_net.forward_plain(&masked);
        let s: Vec<f64> = s_raw
            .iter()
            .zip(self.mask.data())
            .map(|(&r, &m)| SCALE_CAP * r.tanh() * (1.0 - m))
            .collect();
        let t: Vec<f64> = t_raw
            .iter()
            .zip(self.mask.data())
            .map(|(&r, &m)| r * (1.0 - m))
            .collect();
        (s, t)
    }

    /// Map `v` forward; returns the output and the log-determinant.
    pub fn forward(&self, v: &DenseArray) -> Result<(DenseArray, f64)> {
        self.check_dim(v)?;
        let (s, t) = self.scale_translate(v);
        let out: Vec<f64> = v
            .data()
            .iter()
            .zip(s.iter().zip(&t))
            .map(|(&x, (&si, &ti))| x * si.exp() + ti)
            .collect();
        Ok((DenseArray::from_vec(out), s.iter().sum()))
    }

    /// Exact algebraic inverse; the returned log-determinant is the negative
    /// of the matching forward one.
    pub fn inverse(&self, v_out: &DenseArray) -> Result<(DenseArray, f64)> {
        self.check_dim(v_out)?;
        let (s, t) = self.scale_translate(v_out);
        let v: Vec<f64> = v_out
            .data()
            .iter()
            .zip(s.iter().zip(&t))
            .map(|(&x, (&si, &ti))| (x - ti) * (-si).exp())
            .collect();
        Ok((DenseArray::from_vec(v), -s.iter().sum::<f64>()))
    }

    fn check_dim(&self, v: &DenseArray) -> Result<()> {
        if v.len() != self.dim() || v.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "coupling layer has dim {}, input shape {:?}",
                self.dim(),
                v.shape()
            )));
        }
        Ok(())
    }

    pub fn bind(&self, binder: &mut Binder) -> CouplingVars {
        CouplingVars {
            mask: binder.tape.constant(self.mask.clone()),
            inv_mask: binder.tape.constant(self.mask.map(|m| 1.0 - m)),
            scale_net: self.scale_net.bind(binder),
            translate_net: self.translate_net.bind(binder),
        }
    }

    /// Inverse map on a tape: `(v, sum_log_scale)` from `v_out`.
    fn inverse_t(&self, tape: &Tape, vars: &CouplingVars, v_out: Var) -> (Var, Var) {
        let masked = tape.mul(v_out, vars.mask);
        let s_raw = self.scale_net.forward_t(tape, &vars.scale_net, masked);
        let t_raw = self
            .translate_net
            .forward_t(tape, &vars.translate_net, masked);
        let s = tape.mul(tape.mul_scalar(tape.tanh(s_raw), SCALE_CAP), vars.inv_mask);
        let t = tape.mul(t_raw, vars.inv_mask);
        let v = tape.mul(tape.sub(v_out, t), tape.exp(tape.neg(s)));
        (v, tape.sum(s))
    }
}

impl HasParams for CouplingLayer {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray)) {
        self.scale_net.for_each_param(&join(prefix, "scale"), f);
        self.translate_net
            .for_each_param(&join(prefix, "translate"), f);
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        self.scale_net.for_each_param_mut(&join(prefix, "scale"), f);
        self.translate_net
            .for_each_param_mut(&join(prefix, "translate"), f);
    }
}

/// Stack of coupling layers defining `p(u)` via the change of variables
/// from a standard-normal base `p(v)`.
#[derive(Clone, Debug)]
pub struct FlowPrior {
    layers: Vec<CouplingLayer>,
    dim: usize,
}

pub struct FlowVars {
    layers: Vec<CouplingVars>,
}

impl FlowPrior {
    /// Build `depth` layers with alternating even/odd parity masks and
    /// coupling MLPs of hidden width `4 * dim`. Depth 0 is the standard
    /// normal. The net output layers start at zero, so a fresh flow is the
    /// identity map.
    pub fn new(dim: usize, depth: usize, rng: &mut RngStream) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("flow dimension must be >= 1".into()));
        }
        let hidden = 4 * dim;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let mask: Vec<f64> = if dim == 1 {
                vec![0.0]
            } else {
                (0..dim)
                    .map(|i| if (i + l) % 2 == 0 { 1.0 } else { 0.0 })
                    .collect()
            };
            layers.push(CouplingLayer::new(
                mask,
                hidden,
                &mut rng.child(&format!("coupling{l}")),
            )?);
        }
        Ok(Self { layers, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Randomize the zero-initialized coupling-net output layers. Gives a
    /// genuinely non-identity flow without training; weights are scaled by
    /// the layer fan-in so the effect of `std` is width-independent and the
    /// tanh-bounded scales stay away from saturation for modest `std`.
    pub fn jitter_couplings(&mut self, std: f64, rng: &mut RngStream) {
        for layer in &mut self.layers {
            for net in [&mut layer.scale_net, &mut layer.translate_net] {
                let fan_in = net.b1.len().max(1);
                let w_std = std / (fan_in as f64).sqrt();
                for v in net.w2.data_mut() {
                    *v = rng.normal() * w_std;
                }
                for v in net.b2.data_mut() {
                    *v = rng.normal() * std;
                }
            }
        }
    }

    /// Base -> latent: apply layers in order; returns `(u, log_det)`.
    pub fn forward(&self, v: &DenseArray) -> Result<(DenseArray, f64)> {
        let mut cur = v.clone();
        let mut log_det = 0.0;
        for layer in &self.layers {
            let (next, ld) = layer.forward(&cur)?;
            cur = next;
            log_det += ld;
        }
        Ok((cur, log_det))
    }

    /// Latent -> base: invert layers in reverse order; returns
    /// `(v, log_det_inv)` where `log_det_inv` is minus the forward total.
    pub fn inverse(&self, u: &DenseArray) -> Result<(DenseArray, f64)> {
        let mut cur = u.clone();
        let mut log_det_inv = 0.0;
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = layer.inverse(&cur)?;
            if !prev.all_finite() || !ld.is_finite() {
                return Err(Error::NonFinite(format!(
                    "flow inverse produced a non-finite value at layer {idx}"
                )));
            }
            cur = prev;
            log_det_inv += ld;
        }
        Ok((cur, log_det_inv))
    }

    /// `log p(u)` in nats: standard-normal density of the inverted point
    /// minus the accumulated forward log-determinants.
    pub fn log_prob(&self, u: &DenseArray) -> Result<f64> {
        if u.len() != self.dim || u.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "flow has dim {}, input shape {:?}",
                self.dim,
                u.shape()
            )));
        }
        let (v, log_det_inv) = self.inverse(u)?;
        Ok(std_normal_log_prob(&v) + log_det_inv)
    }

    /// Draw `v ~ N(0, I)` and push it through the forward layers.
    pub fn sample(&self, rng: &mut RngStream) -> DenseArray {
        let v = rng.normal_array(&[self.dim]);
        let (u, _) = self.forward(&v).expect("forward of finite base draw");
        u
    }

    pub fn bind(&self, binder: &mut Binder) -> FlowVars {
        FlowVars {
            layers: self.layers.iter().map(|l| l.bind(binder)).collect(),
        }
    }

    /// Differentiable `log p(u)` on a tape (w.r.t. layer parameters and `u`).
    pub fn log_prob_t(&self, tape: &Tape, vars: &FlowVars, u: Var) -> Var {
        let mut cur = u;
        let mut neg_log_det = None;
        for (layer, lv) in self.layers.iter().zip(&vars.layers).rev() {
            let (prev, sum_s) = layer.inverse_t(tape, lv, cur);
            cur = prev;
            neg_log_det = Some(match neg_log_det {
                None => sum_s,
                Some(acc) => tape.add(acc, sum_s),
            });
        }
        let sq = tape.mul(cur, cur);
        let base = tape.mul_scalar(
            tape.add_scalar(tape.sum(sq), self.dim as f64 * LN_2PI),
            -0.5,
        );
        match neg_log_det {
            None => base,
            Some(total) => tape.sub(base, total),
        }
    }
}

impl HasParams for FlowPrior {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each_param(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_param_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

pub fn std_normal_log_prob(v: &DenseArray) -> f64 {
    let sq: f64 = v.data().iter().map(|x| x * x).sum();
    -0.5 * (v.len() as f64 * LN_2PI + sq)
}
