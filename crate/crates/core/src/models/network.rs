//! Small convolutional encoder/decoder stacks: a layer list interpreted on a
//! tape, with deterministic seeded He initialization.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, RngStream};
use crate::params::{join, Binder, HasParams};

#[derive(Clone, Debug)]
pub enum LayerParams {
    Conv3x3 {
        weight: DenseArray,
        bias: DenseArray,
        stride: usize,
    },
    Linear {
        weight: DenseArray,
        bias: DenseArray,
    },
    Elu,
    UpsampleNearest2x,
    Reshape(Vec<usize>),
}

pub enum LayerVars {
    Conv3x3 { weight: Var, bias: Var, stride: usize },
    Linear { weight: Var, bias: Var },
    Elu,
    UpsampleNearest2x,
    Reshape(Vec<usize>),
}

/// An ordered layer stack with declared input/output shapes.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

fn he_conv(c_in: usize, c_out: usize, rng: &mut RngStream) -> DenseArray {
    let std = (2.0 / (9 * c_in) as f64).sqrt();
    rng.normal_array(&[3, 3, c_in, c_out]).map(|v| v * std)
}

fn he_linear(n_in: usize, n_out: usize, rng: &mut RngStream) -> DenseArray {
    let std = (2.0 / n_in as f64).sqrt();
    rng.normal_array(&[n_in, n_out]).map(|v| v * std)
}

fn conv(c_in: usize, c_out: usize, stride: usize, rng: &mut RngStream) -> LayerParams {
    LayerParams::Conv3x3 {
        weight: he_conv(c_in, c_out, rng),
        bias: DenseArray::zeros(&[c_out]),
        stride,
    }
}

fn linear(n_in: usize, n_out: usize, rng: &mut RngStream) -> LayerParams {
    LayerParams::Linear {
        weight: he_linear(n_in, n_out, rng),
        bias: DenseArray::zeros(&[n_out]),
    }
}

impl NetworkParams {
    /// Image `[h, w, c]` to a flat vector of `out_dim` values through three
    /// 3x3 convolutions (downsampling by 4, or by 2 for tiny inputs) and a
    /// dense head.
    pub fn conv_encoder(
        h: usize,
        w: usize,
        c: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let s3 = if h.min(w) >= 8 { 2 } else { 1 };
        if h % (2 * s3) != 0 || w % (2 * s3) != 0 {
            return Err(Error::InvalidArgument(format!(
                "encoder input {h}x{w} not divisible by its stride plan"
            )));
        }
        let (fh, fw) = (h / (2 * s3), w / (2 * s3));
        let layers = vec![
            conv(c, hidden, 1, rng),
            LayerParams::Elu,
            conv(hidden, hidden, 2, rng),
            LayerParams::Elu,
            conv(hidden, hidden, s3, rng),
            LayerParams::Elu,
            LayerParams::Reshape(vec![fh * fw * hidden]),
            linear(fh * fw * hidden, out_dim, rng),
        ];
        Ok(Self {
            layers,
            input_shape: vec![h, w, c],
            output_shape: vec![out_dim],
        })
    }

    /// Flat latent to an `[h, w, planes]` parameter map: dense projection to
    /// an `h/4 x w/4` grid, two nearest-neighbour doublings with 3x3
    /// convolutions, and a 3x3 head.
    pub fn conv_decoder(
        latent_dim: usize,
        h: usize,
        w: usize,
        planes: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "decoder output {h}x{w} must be divisible by 4"
            )));
        }
        let (gh, gw) = (h / 4, w / 4);
        let layers = vec![
            linear(latent_dim, gh * gw * hidden, rng),
            LayerParams::Reshape(vec![gh, gw, hidden]),
            LayerParams::Elu,
            LayerParams::UpsampleNearest2x,
            conv(hidden, hidden, 1, rng),
            LayerParams::Elu,
            LayerParams::UpsampleNearest2x,
            conv(hidden, hidden, 1, rng),
            LayerParams::Elu,
            conv(hidden, planes, 1, rng),
        ];
        Ok(Self {
            layers,
            input_shape: vec![latent_dim],
            output_shape: vec![h, w, planes],
        })
    }

    /// Full-resolution tower `[h, w, c_in] -> [h, w, planes]`: two hidden
    /// 3x3 convolutions and a 3x3 head, all stride 1.
    pub fn conv_tower(
        h: usize,
        w: usize,
        c_in: usize,
        planes: usize,
        hidden: usize,
        rng: &mut RngStream,
    ) -> Self {
        let layers = vec![
            conv(c_in, hidden, 1, rng),
            LayerParams::Elu,
            conv(hidden, hidden, 1, rng),
            LayerParams::Elu,
            conv(hidden, planes, 1, rng),
        ];
        Self {
            layers,
            input_shape: vec![h, w, c_in],
            output_shape: vec![h, w, planes],
        }
    }

    pub fn bind(&self, binder: &mut Binder) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|layer| match layer {
                LayerParams::Conv3x3 {
                    weight,
                    bias,
                    stride,
                } => LayerVars::Conv3x3 {
                    weight: binder.leaf(weight),
                    bias: binder.leaf(bias),
                    stride: *stride,
                },
                LayerParams::Linear { weight, bias } => LayerVars::Linear {
                    weight: binder.leaf(weight),
                    bias: binder.leaf(bias),
                },
                LayerParams::Elu => LayerVars::Elu,
                LayerParams::UpsampleNearest2x => LayerVars::UpsampleNearest2x,
                LayerParams::Reshape(shape) => LayerVars::Reshape(shape.clone()),
            })
            .collect()
    }

    pub fn forward_t(&self, tape: &Tape, vars: &[LayerVars], input: Var) -> Var {
        debug_assert_eq!(tape.shape(input), self.input_shape, "network input shape");
        let mut cur = input;
        for layer in vars {
            cur = match layer {
                LayerVars::Conv3x3 {
                    weight,
                    bias,
                    stride,
                } => tape.conv3x3(cur, *weight, *bias, *stride),
                LayerVars::Linear { weight, bias } => tape.linear(cur, *weight, *bias),
                LayerVars::Elu => tape.elu(cur),
                LayerVars::UpsampleNearest2x => tape.upsample_nearest2x(cur),
                LayerVars::Reshape(shape) => tape.reshape(cur, shape),
            };
        }
        debug_assert_eq!(tape.shape(cur), self.output_shape, "network output shape");
        cur
    }
}

impl HasParams for NetworkParams {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &DenseArray)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Conv3x3 { weight, bias, .. }
                | LayerParams::Linear { weight, bias } => {
                    f(&join(prefix, &format!("l{i}.weight")), weight);
                    f(&join(prefix, &format!("l{i}.bias")), bias);
                }
                _ => {}
            }
        }
    }

    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DenseArray)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerParams::Conv3x3 { weight, bias, .. }
                | LayerParams::Linear { weight, bias } => {
                    f(&join(prefix, &format!("l{i}.weight")), weight);
                    f(&join(prefix, &format!("l{i}.bias")), bias);
                }
                _ => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_shapes_flow_through() {
        let mut rng = RngStream::new(1);
        let net = NetworkParams::conv_encoder(16, 16, 3, 8, 64, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = net.bind(&mut binder);
        let x = tape.constant(DenseArray::zeros(&[16, 16, 3]));
        let out = net.forward_t(&tape, &vars, x);
        assert_eq!(tape.shape(out), vec![64]);
    }

    #[test]
    fn small_encoder_uses_shallow_stride_plan() {
        let mut rng = RngStream::new(2);
        let net = NetworkParams::conv_encoder(4, 4, 1, 8, 16, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = net.bind(&mut binder);
        let x = tape.constant(DenseArray::zeros(&[4, 4, 1]));
        let out = net.forward_t(&tape, &vars, x);
        assert_eq!(tape.shape(out), vec![16]);
    }

    #[test]
    fn decoder_shapes_flow_through() {
        let mut rng = RngStream::new(3);
        let net = NetworkParams::conv_decoder(32, 16, 16, 45, 8, &mut rng).unwrap();
        let tape = Tape::no_grad();
        let mut binder = Binder::new(&tape);
        let vars = net.bind(&mut binder);
        let z = tape.constant(DenseArray::zeros(&[32]));
        let out = net.forward_t(&tape, &vars, z);
        assert_eq!(tape.shape(out), vec![16, 16, 45]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = NetworkParams::conv_encoder(8, 8, 1, 4, 8, &mut RngStream::new(7)).unwrap();
        let b = NetworkParams::conv_encoder(8, 8, 1, 4, 8, &mut RngStream::new(7)).unwrap();
        let mut eq = true;
        a.for_each_param("", &mut |name, arr| {
            b.for_each_param("", &mut |name2, arr2| {
                if name == name2 && arr.data() != arr2.data() {
                    eq = false;
                }
            });
        });
        assert!(eq);
    }

    #[test]
    fn bind_order_matches_param_traversal() {
        let net = NetworkParams::conv_decoder(8, 8, 8, 6, 4, &mut RngStream::new(9)).unwrap();
        let tape = Tape::new();
        let mut binder = Binder::new(&tape);
        net.bind(&mut binder);
        let mut shapes = Vec::new();
        net.for_each_param("", &mut |_, arr| shapes.push(arr.shape().to_vec()));
        let bound: Vec<Vec<usize>> = binder.leaves().iter().map(|&v| tape.shape(v)).collect();
        assert_eq!(shapes, bound);
    }
}
