//! Tape-based reverse-mode differentiation over [`DenseArray`] values.
//!
//! The op set is scoped to the network and distribution graphs this crate
//! builds: elementwise math, 3x3 convolutions, dense layers, channel
//! slicing/concatenation, spatial up-sampling and log-sum-exp reductions.
//! A tape created with [`Tape::no_grad`] evaluates the same graphs without
//! recording, which is how the sampling pipelines and oracles run.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::numerics::DenseArray;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var(pub(crate) usize);

type Backward = Box<dyn Fn(&[&DenseArray], &DenseArray, &DenseArray) -> Vec<Option<DenseArray>>>;

struct Node {
    value: DenseArray,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn take(&mut self, var: Var) -> Option<DenseArray> {
        self.grads[var.0].take()
    }

    pub fn get(&self, var: Var) -> Option<&DenseArray> {
        self.grads[var.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates values but records no backward graph.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: DenseArray,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<Backward>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Differentiable input (model parameter or sampled latent).
    pub fn leaf(&self, value: DenseArray) -> Var {
        let rg = self.recording;
        self.push(value, rg, Vec::new(), None)
    }

    /// Non-differentiable input (data, noise, masks).
    pub fn constant(&self, value: DenseArray) -> Var {
        self.push(value, false, Vec::new(), None)
    }

    pub fn value(&self, var: Var) -> DenseArray {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, var: Var) -> f64 {
        self.nodes.borrow()[var.0].value.item()
    }

    fn op(
        &self,
        value: DenseArray,
        parents: &[Var],
        make_backward: impl FnOnce() -> Backward,
    ) -> Var {
        let track = self.recording && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        if track {
            let ids = parents.iter().map(|p| p.0).collect();
            self.push(value, true, ids, Some(make_backward()))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_map(&nodes[b.0].value, |x, y| x + y)
        };
        self.op(value, &[a, b], || {
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_map(&nodes[b.0].value, |x, y| x - y)
        };
        self.op(value, &[a, b], || {
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_map(&nodes[b.0].value, |x, y| x * y)
        };
        self.op(value, &[a, b], || {
            Box::new(|ps, _, g| {
                vec![
                    Some(g.zip_map(ps[1], |gv, bv| gv * bv)),
                    Some(g.zip_map(ps[0], |gv, av| gv * av)),
                ]
            })
        })
    }

    pub fn neg(&self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v + c);
        self.op(value, &[a], || Box::new(|_, _, g| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * c);
        self.op(value, &[a], move || {
            Box::new(move |_, _, g| vec![Some(g.map(|v| v * c))])
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::exp);
        self.op(value, &[a], || {
            Box::new(|_, out, g| vec![Some(g.zip_map(out, |gv, ov| gv * ov))])
        })
    }

    /// `exp(x) - 1`, accurate near zero.
    pub fn expm1(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::exp_m1);
        self.op(value, &[a], || {
            Box::new(|_, out, g| vec![Some(g.zip_map(out, |gv, ov| gv * (ov + 1.0)))])
        })
    }

    /// Natural log; the caller guarantees strictly positive inputs.
    pub fn ln(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::ln);
        self.op(value, &[a], || {
            Box::new(|ps, _, g| vec![Some(g.zip_map(ps[0], |gv, pv| gv / pv))])
        })
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(f64::tanh);
        self.op(value, &[a], || {
            Box::new(|_, out, g| vec![Some(g.zip_map(out, |gv, ov| gv * (1.0 - ov * ov)))])
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(sigmoid_scalar);
        self.op(value, &[a], || {
            Box::new(|_, out, g| vec![Some(g.zip_map(out, |gv, ov| gv * ov * (1.0 - ov)))])
        })
    }

    /// `ln(1 + exp(x))` computed without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(softplus_scalar);
        self.op(value, &[a], || {
            Box::new(|ps, _, g| vec![Some(g.zip_map(ps[0], |gv, pv| gv * sigmoid_scalar(pv)))])
        })
    }

    pub fn elu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0]
            .value
            .map(|v| if v > 0.0 { v } else { v.exp_m1() });
        self.op(value, &[a], || {
            Box::new(|ps, out, g| {
                let mut grad = g.clone();
                for ((gv, &pv), &ov) in grad
                    .data_mut()
                    .iter_mut()
                    .zip(ps[0].data())
                    .zip(out.data())
                {
                    if pv <= 0.0 {
                        *gv *= ov + 1.0;
                    }
                }
                vec![Some(grad)]
            })
        })
    }

    /// Hard clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.clamp(lo, hi));
        self.op(value, &[a], move || {
            Box::new(move |ps, _, g| {
                vec![Some(g.zip_map(ps[0], |gv, pv| {
                    if pv > lo && pv < hi {
                        gv
                    } else {
                        0.0
                    }
                }))]
            })
        })
    }

    /// Elementwise `max(x, c)`; gradient passes where `x > c`.
    pub fn max_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.map(|v| v.max(c));
        self.op(value, &[a], move || {
            Box::new(move |ps, _, g| {
                vec![Some(
                    g.zip_map(ps[0], |gv, pv| if pv > c { gv } else { 0.0 }),
                )]
            })
        })
    }

    /// `out_i = if cond_i > 0.5 { a_i } else { b_i }`; the condition is
    /// treated as constant and receives no gradient.
    pub fn select_mask(&self, cond: Var, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let cv = &nodes[cond.0].value;
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            assert_eq!(cv.shape(), av.shape(), "select_mask cond/a shape");
            assert_eq!(av.shape(), bv.shape(), "select_mask a/b shape");
            let data = cv
                .data()
                .iter()
                .zip(av.data().iter().zip(bv.data()))
                .map(|(&c, (&x, &y))| if c > 0.5 { x } else { y })
                .collect();
            DenseArray::new(av.shape().to_vec(), data).expect("same shape")
        };
        self.op(value, &[cond, a, b], || {
            Box::new(|ps, _, g| {
                let cond = ps[0];
                let ga = g.zip_map(cond, |gv, c| if c > 0.5 { gv } else { 0.0 });
                let gb = g.zip_map(cond, |gv, c| if c > 0.5 { 0.0 } else { gv });
                vec![None, Some(ga), Some(gb)]
            })
        })
    }

    // ── reductions & shape ops ───────────────────────────────────────

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&self, a: Var) -> Var {
        let value = DenseArray::scalar(self.nodes.borrow()[a.0].value.sum());
        self.op(value, &[a], || {
            Box::new(|ps, _, g| {
                let gv = g.item();
                vec![Some(DenseArray::full(ps[0].shape(), gv))]
            })
        })
    }

    /// `log(sum(exp(.)))` over the last axis: `[.., m] -> [..]`.
    pub fn lse_last(&self, a: Var) -> Var {
        let value = {
            let av = &self.nodes.borrow()[a.0].value;
            let m = *av.shape().last().expect("lse_last needs rank >= 1");
            let rows = av.len() / m;
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &av.data()[r * m..(r + 1) * m];
                out.push(lse_slice(row));
            }
            let out_shape = av.shape()[..av.shape().len() - 1].to_vec();
            DenseArray::new(out_shape, out).expect("row count matches")
        };
        self.op(value, &[a], || {
            Box::new(|ps, out, g| {
                let av = ps[0];
                let m = *av.shape().last().unwrap();
                let rows = av.len() / m;
                let mut grad = DenseArray::zeros(av.shape());
                for r in 0..rows {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for j in 0..m {
                        grad.data_mut()[r * m + j] = gr * (av.data()[r * m + j] - lse).exp();
                    }
                }
                vec![Some(grad)]
            })
        })
    }

    /// Repeat each element `m` times along a new last axis: `[..] -> [.., m]`.
    pub fn broadcast_last(&self, a: Var, m: usize) -> Var {
        let value = {
            let av = &self.nodes.borrow()[a.0].value;
            let mut shape = av.shape().to_vec();
            shape.push(m);
            let mut data = Vec::with_capacity(av.len() * m);
            for &v in av.data() {
                data.extend(std::iter::repeat(v).take(m));
            }
            DenseArray::new(shape, data).expect("sized to match")
        };
        self.op(value, &[a], move || {
            Box::new(move |ps, _, g| {
                let mut grad = DenseArray::zeros(ps[0].shape());
                for (r, gv) in grad.data_mut().iter_mut().enumerate() {
                    *gv = g.data()[r * m..(r + 1) * m].iter().sum();
                }
                vec![Some(grad)]
            })
        })
    }

    /// Slice `[from, to)` of the last axis.
    pub fn slice_last(&self, a: Var, from: usize, to: usize) -> Var {
        let value = {
            let av = &self.nodes.borrow()[a.0].value;
            let m = *av.shape().last().expect("slice_last needs rank >= 1");
            assert!(from < to && to <= m, "slice_last range {from}..{to} of {m}");
            let rows = av.len() / m;
            let width = to - from;
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                data.extend_from_slice(&av.data()[r * m + from..r * m + to]);
            }
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = width;
            DenseArray::new(shape, data).expect("sized to match")
        };
        self.op(value, &[a], move || {
            Box::new(move |ps, _, g| {
                let m = *ps[0].shape().last().unwrap();
                let rows = ps[0].len() / m;
                let width = to - from;
                let mut grad = DenseArray::zeros(ps[0].shape());
                for r in 0..rows {
                    grad.data_mut()[r * m + from..r * m + to]
                        .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                vec![Some(grad)]
            })
        })
    }

    /// Concatenate along the last axis; all other extents must agree.
    pub fn concat_last(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last of no parts");
        let (value, widths) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let lead = &first.shape()[..first.shape().len() - 1];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(
                    &v.shape()[..v.shape().len() - 1],
                    lead,
                    "concat_last leading extents differ"
                );
                widths.push(*v.shape().last().unwrap());
            }
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    let v = &nodes[p.0].value;
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (DenseArray::new(shape, data).expect("sized to match"), widths)
        };
        self.op(value, parts, move || {
            Box::new(move |ps, _, g| {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut grads: Vec<DenseArray> =
                    ps.iter().map(|p| DenseArray::zeros(p.shape())).collect();
                for r in 0..rows {
                    let mut offset = 0;
                    for (k, &w) in widths.iter().enumerate() {
                        grads[k].data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        offset += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            })
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes.borrow()[a.0]
            .value
            .reshaped(shape)
            .expect("reshape preserves element count");
        self.op(value, &[a], || {
            Box::new(|ps, _, g| {
                vec![Some(
                    g.reshaped(ps[0].shape()).expect("reshape back to parent"),
                )]
            })
        })
    }

    // ── spatial ops (HWC layout) ─────────────────────────────────────

    /// Broadcast a flat vector `[d]` over a spatial grid: `-> [h, w, d]`.
    pub fn broadcast_spatial(&self, a: Var, h: usize, w: usize) -> Var {
        let value = {
            let av = &self.nodes.borrow()[a.0].value;
            assert_eq!(av.shape().len(), 1, "broadcast_spatial expects a vector");
            let d = av.len();
            let mut data = Vec::with_capacity(h * w * d);
            for _ in 0..h * w {
                data.extend_from_slice(av.data());
            }
            DenseArray::new(vec![h, w, d], data).expect("sized to match")
        };
        self.op(value, &[a], move || {
            Box::new(move |ps, _, g| {
                let d = ps[0].len();
                let mut grad = DenseArray::zeros(&[d]);
                for cell in g.data().chunks_exact(d) {
                    for (gv, &c) in grad.data_mut().iter_mut().zip(cell) {
                        *gv += c;
                    }
                }
                vec![Some(grad)]
            })
        })
    }

    /// Nearest-neighbour 2x up-sampling of an `[h, w, c]` array.
    pub fn upsample_nearest2x(&self, a: Var) -> Var {
        let value = {
            let av = &self.nodes.borrow()[a.0].value;
            upsample_nearest2x_value(av)
        };
        self.op(value, &[a], || {
            Box::new(|ps, _, g| {
                let (h, w, c) = hwc(ps[0]);
                let mut grad = DenseArray::zeros(ps[0].shape());
                let ow = 2 * w;
                for y in 0..h {
                    for x in 0..w {
                        let base = (y * w + x) * c;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let src = ((2 * y + dy) * ow + 2 * x + dx) * c;
                            for k in 0..c {
                                grad.data_mut()[base + k] += g.data()[src + k];
                            }
                        }
                    }
                }
                vec![Some(grad)]
            })
        })
    }

    /// Bilinear resize of an `[h, w, c]` array to `(out_h, out_w)` using
    /// half-pixel-centre sampling with edge clamping.
    pub fn upsample_bilinear(&self, a: Var, out_h: usize, out_w: usize) -> Var {
        let (value, taps_y, taps_x) = {
            let av = &self.nodes.borrow()[a.0].value;
            let (h, w, c) = hwc(av);
            let taps_y = bilinear_taps(h, out_h);
            let taps_x = bilinear_taps(w, out_w);
            let mut out = DenseArray::zeros(&[out_h, out_w, c]);
            for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                    let dst = (oy * out_w + ox) * c;
                    for k in 0..c {
                        let v00 = av.data()[(y0 * w + x0) * c + k];
                        let v01 = av.data()[(y0 * w + x1) * c + k];
                        let v10 = av.data()[(y1 * w + x0) * c + k];
                        let v11 = av.data()[(y1 * w + x1) * c + k];
                        let top = v00 + (v01 - v00) * fx;
                        let bot = v10 + (v11 - v10) * fx;
                        out.data_mut()[dst + k] = top + (bot - top) * fy;
                    }
                }
            }
            (out, taps_y, taps_x)
        };
        self.op(value, &[a], move || {
            Box::new(move |ps, _, g| {
                let (_, w, c) = hwc(ps[0]);
                let out_w = taps_x.len();
                let mut grad = DenseArray::zeros(ps[0].shape());
                for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                        let src = (oy * out_w + ox) * c;
                        for k in 0..c {
                            let gv = g.data()[src + k];
                            let d = grad.data_mut();
                            d[(y0 * w + x0) * c + k] += gv * (1.0 - fy) * (1.0 - fx);
                            d[(y0 * w + x1) * c + k] += gv * (1.0 - fy) * fx;
                            d[(y1 * w + x0) * c + k] += gv * fy * (1.0 - fx);
                            d[(y1 * w + x1) * c + k] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(grad)]
            })
        })
    }

    // ── network layers ───────────────────────────────────────────────

    /// Dense layer `x W + b` with `x: [n]`, `w: [n, m]`, `b: [m]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let bv = &nodes[b.0].value;
            let n = xv.len();
            assert_eq!(wv.shape(), &[n, bv.len()], "linear weight shape");
            let m = bv.len();
            let mut out = bv.data().to_vec();
            for (i, &xi) in xv.data().iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &wv.data()[i * m..(i + 1) * m];
                for (o, &wv_) in out.iter_mut().zip(row) {
                    *o += xi * wv_;
                }
            }
            DenseArray::new(vec![m], out).expect("sized to match")
        };
        self.op(value, &[x, w, b], || {
            Box::new(|ps, _, g| {
                let (xv, wv) = (ps[0], ps[1]);
                let n = xv.len();
                let m = g.len();
                let mut gx = DenseArray::zeros(&[n]);
                let mut gw = DenseArray::zeros(wv.shape());
                for i in 0..n {
                    let row = &wv.data()[i * m..(i + 1) * m];
                    let mut acc = 0.0;
                    for (&wv_, &gv) in row.iter().zip(g.data()) {
                        acc += wv_ * gv;
                    }
                    gx.data_mut()[i] = acc;
                    let xi = xv.data()[i];
                    let grow = &mut gw.data_mut()[i * m..(i + 1) * m];
                    for (gw_, &gv) in grow.iter_mut().zip(g.data()) {
                        *gw_ += xi * gv;
                    }
                }
                vec![Some(gx), Some(gw), Some(g.clone())]
            })
        })
    }

    /// 3x3 convolution over an `[h, w, c_in]` array with SAME padding of 1.
    ///
    /// `weight: [3, 3, c_in, c_out]`, `bias: [c_out]`, `stride` in {1, 2};
    /// output extents are `ceil(h / stride) x ceil(w / stride)`.
    pub fn conv3x3(&self, input: Var, weight: Var, bias: Var, stride: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv3x3_forward(
                &nodes[input.0].value,
                &nodes[weight.0].value,
                &nodes[bias.0].value,
                stride,
            )
        };
        self.op(value, &[input, weight, bias], move || {
            Box::new(move |ps, _, g| {
                let (gi, gw, gb) = conv3x3_backward(ps[0], ps[1], g, stride);
                vec![Some(gi), Some(gw), Some(gb)]
            })
        })
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Run reverse-mode accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        if !self.recording {
            return Err(Error::InvalidArgument(
                "backward on a no-grad tape".into(),
            ));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; nodes.len()];
        grads[root.0] = Some(DenseArray::full(nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(grad_out) = grads[i].clone() else {
                continue;
            };
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let parent_values: Vec<&DenseArray> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let parent_grads = backward(&parent_values, &node.value, &grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(existing) => existing.axpy(1.0, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn lse_slice(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn hwc(a: &DenseArray) -> (usize, usize, usize) {
    assert_eq!(a.shape().len(), 3, "expected [h, w, c], got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2])
}

/// `(lo, hi, frac)` source taps per output index for a bilinear resize with
/// half-pixel centres and clamped edges.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let floor = s.floor();
            let frac = s - floor;
            let lo = (floor.max(0.0) as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if floor < 0.0 { 0.0 } else { frac };
            (lo, hi, frac)
        })
        .collect()
}

fn upsample_nearest2x_value(a: &DenseArray) -> DenseArray {
    let (h, w, c) = hwc(a);
    let ow = 2 * w;
    let mut out = DenseArray::zeros(&[2 * h, ow, c]);
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let dst = ((2 * y + dy) * ow + 2 * x + dx) * c;
                out.data_mut()[dst..dst + c].copy_from_slice(&a.data()[src..src + c]);
            }
        }
    }
    out
}

fn conv3x3_forward(
    input: &DenseArray,
    weight: &DenseArray,
    bias: &DenseArray,
    stride: usize,
) -> DenseArray {
    let (h, w, cin) = hwc(input);
    let cout = bias.len();
    assert_eq!(weight.shape(), &[3, 3, cin, cout], "conv weight shape");
    assert!(stride == 1 || stride == 2, "conv stride {stride}");
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut out = DenseArray::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = (oy * ow + ox) * cout;
            out.data_mut()[dst..dst + cout].copy_from_slice(bias.data());
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * cin;
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = input.data()[src + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &weight.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let orow = &mut out.data_mut()[dst..dst + cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += v * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward(
    input: &DenseArray,
    weight: &DenseArray,
    grad_out: &DenseArray,
    stride: usize,
) -> (DenseArray, DenseArray, DenseArray) {
    let (h, w, cin) = hwc(input);
    let cout = weight.shape()[3];
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let mut gi = DenseArray::zeros(input.shape());
    let mut gw = DenseArray::zeros(weight.shape());
    let mut gb = DenseArray::zeros(&[cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            let gbase = (oy * ow + ox) * cout;
            let grow = &grad_out.data()[gbase..gbase + cout];
            for (b, &gv) in gb.data_mut().iter_mut().zip(grow) {
                *b += gv;
            }
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= w {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * cin;
                    let wbase = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = &weight.data()[wbase + ci * cout..wbase + (ci + 1) * cout];
                        let mut acc = 0.0;
                        for (&wv, &gv) in wrow.iter().zip(grow) {
                            acc += wv * gv;
                        }
                        gi.data_mut()[src + ci] += acc;
                        let v = input.data()[src + ci];
                        if v != 0.0 {
                            let gwrow =
                                &mut gw.data_mut()[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (gw_, &gv) in gwrow.iter_mut().zip(grow) {
                                *gw_ += v * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, RngStream};

    /// Gradient-check a graph builder against central differences, using a
    /// fixed weighting of the output so permutation bugs change the loss.
    fn check_graph(build: impl Fn(&Tape, Var) -> Var, input: DenseArray, tol: f64) {
        let weighted_loss = |tape: &Tape, out: Var| {
            let out_shape = tape.shape(out);
            let n: usize = out_shape.iter().product();
            let weights = DenseArray::new(
                out_shape,
                (0..n).map(|i| 0.25 + ((i % 7) as f64) / 7.0).collect(),
            )
            .unwrap();
            let w = tape.constant(weights);
            tape.sum(tape.mul(out, w))
        };
        let err = grad_check(
            |p| {
                let tape = Tape::no_grad();
                let x = tape.leaf(p.clone());
                let out = build(&tape, x);
                Ok(tape.item(weighted_loss(&tape, out)))
            },
            |p| {
                let tape = Tape::new();
                let x = tape.leaf(p.clone());
                let out = build(&tape, x);
                let loss = weighted_loss(&tape, out);
                let mut grads = tape.backward(loss)?;
                Ok(grads
                    .take(x)
                    .unwrap_or_else(|| DenseArray::zeros(p.shape())))
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < tol, "max relative error {err}");
    }

    fn rand_array(shape: &[usize], rng: &mut RngStream) -> DenseArray {
        rng.normal_array(shape)
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = RngStream::new(11);
        let x = rand_array(&[12], &mut rng);
        check_graph(|t, v| t.exp(t.mul_scalar(v, 0.3)), x.clone(), 1e-7);
        check_graph(|t, v| t.tanh(v), x.clone(), 1e-7);
        check_graph(|t, v| t.sigmoid(v), x.clone(), 1e-7);
        check_graph(|t, v| t.softplus(v), x.clone(), 1e-7);
        check_graph(|t, v| t.elu(v), x.clone(), 1e-6);
        check_graph(|t, v| t.mul(v, t.add_scalar(v, 0.5)), x.clone(), 1e-7);
        check_graph(|t, v| t.expm1(t.neg(t.max_scalar(v, 0.1))), x, 1e-7);
    }

    #[test]
    fn ln_gradient_on_positive_input() {
        let x = DenseArray::from_vec(vec![0.3, 1.7, 2.4, 0.05]);
        check_graph(|t, v| t.ln(v), x, 1e-7);
    }

    #[test]
    fn reduction_gradients() {
        let mut rng = RngStream::new(12);
        let x = rand_array(&[3, 4], &mut rng);
        check_graph(|t, v| t.lse_last(v), x.clone(), 1e-7);
        check_graph(|t, v| t.broadcast_last(t.lse_last(v), 4), x, 1e-7);
    }

    #[test]
    fn slice_concat_reshape_gradients() {
        let mut rng = RngStream::new(13);
        let x = rand_array(&[2, 6], &mut rng);
        check_graph(
            |t, v| {
                let a = t.slice_last(v, 0, 2);
                let b = t.slice_last(v, 2, 6);
                let joined = t.concat_last(&[t.exp(a), b]);
                t.reshape(joined, &[12])
            },
            x,
            1e-7,
        );
    }

    #[test]
    fn select_mask_routes_gradients() {
        let x = DenseArray::from_vec(vec![1.0, -2.0, 3.0, -4.0]);
        check_graph(
            |t, v| {
                let mask = t.constant(DenseArray::from_vec(vec![1.0, 0.0, 1.0, 0.0]));
                t.select_mask(mask, t.exp(v), t.tanh(v))
            },
            x,
            1e-7,
        );
    }

    #[test]
    fn spatial_op_gradients() {
        let mut rng = RngStream::new(14);
        let img = rand_array(&[4, 4, 2], &mut rng);
        check_graph(|t, v| t.upsample_nearest2x(v), img.clone(), 1e-7);
        check_graph(|t, v| t.upsample_bilinear(v, 8, 8), img, 1e-7);
        let vec = rand_array(&[5], &mut rng);
        check_graph(|t, v| t.broadcast_spatial(v, 3, 2), vec, 1e-7);
    }

    #[test]
    fn linear_gradients_all_parameters() {
        let mut rng = RngStream::new(15);
        let x = rand_array(&[4], &mut rng);
        let w = rand_array(&[4, 3], &mut rng);
        let b = rand_array(&[3], &mut rng);
        check_graph(
            |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                t.linear(v, wv, bv)
            },
            x.clone(),
            1e-7,
        );
        check_graph(
            |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                t.linear(xv, v, bv)
            },
            w.clone(),
            1e-7,
        );
        check_graph(
            |t, v| {
                let xv = t.constant(x.clone());
                let wv = t.constant(w.clone());
                t.linear(xv, wv, v)
            },
            b,
            1e-7,
        );
    }

    #[test]
    fn conv_gradients_all_parameters_both_strides() {
        let mut rng = RngStream::new(16);
        for stride in [1, 2] {
            let img = rand_array(&[4, 4, 2], &mut rng);
            let w = rand_array(&[3, 3, 2, 3], &mut rng);
            let b = rand_array(&[3], &mut rng);
            check_graph(
                |t, v| {
                    let wv = t.constant(w.clone());
                    let bv = t.constant(b.clone());
                    t.conv3x3(v, wv, bv, stride)
                },
                img.clone(),
                1e-6,
            );
            check_graph(
                |t, v| {
                    let iv = t.constant(img.clone());
                    let bv = t.constant(b.clone());
                    t.conv3x3(iv, v, bv, stride)
                },
                w.clone(),
                1e-6,
            );
            check_graph(
                |t, v| {
                    let iv = t.constant(img.clone());
                    let wv = t.constant(w.clone());
                    t.conv3x3(iv, wv, v, stride)
                },
                b,
                1e-7,
            );
        }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // Kernel with 1 at the centre reproduces the input exactly.
        let img = DenseArray::new(vec![3, 3, 1], (0..9).map(|v| v as f64).collect()).unwrap();
        let mut w = DenseArray::zeros(&[3, 3, 1, 1]);
        w.data_mut()[4] = 1.0; // centre tap (ky=1, kx=1)
        let tape = Tape::no_grad();
        let out = tape.conv3x3(
            tape.constant(img.clone()),
            tape.constant(w),
            tape.constant(DenseArray::zeros(&[1])),
            1,
        );
        assert_eq!(tape.value(out).data(), img.data());
    }

    #[test]
    fn conv_stride2_extents() {
        let tape = Tape::no_grad();
        let out = tape.conv3x3(
            tape.constant(DenseArray::zeros(&[8, 6, 2])),
            tape.constant(DenseArray::zeros(&[3, 3, 2, 4])),
            tape.constant(DenseArray::zeros(&[4])),
            2,
        );
        assert_eq!(tape.shape(out), vec![4, 3, 4]);
    }

    #[test]
    fn gradient_accumulates_over_shared_subexpression() {
        // f(x) = sum(x * x + x) => df/dx = 2x + 1.
        let tape = Tape::new();
        let x = tape.leaf(DenseArray::from_vec(vec![1.5, -2.0]));
        let loss = tape.sum(tape.add(tape.mul(x, x), x));
        let mut grads = tape.backward(loss).unwrap();
        let gx = grads.take(x).unwrap();
        assert!((gx.data()[0] - 4.0).abs() < 1e-12);
        assert!((gx.data()[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(DenseArray::from_vec(vec![2.0]));
        let c = tape.constant(DenseArray::from_vec(vec![3.0]));
        let loss = tape.sum(tape.mul(x, c));
        let mut grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.take(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn no_grad_tape_rejects_backward() {
        let tape = Tape::no_grad();
        let x = tape.leaf(DenseArray::from_vec(vec![1.0]));
        let loss = tape.sum(x);
        assert!(tape.backward(loss).is_err());
    }
}
