//! Network building blocks.
//!
//! A [`LayerSpec`] is a plain description of one layer (kind + sizes). It is
//! used three ways:
//!   * [`Layer::init`] turns a spec into registered parameters,
//!   * [`Layer::forward`] runs the layer on a tape with shape validation,
//!   * the `Display` form of a spec is the unit of the checkpoint manifest,
//!     so loading a checkpoint can verify its architecture matches the code.

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected `[b, inp] -> [b, out]`.
    Affine { inp: usize, out: usize },
    /// 3x3 convolution, stride 1 or 2, padding 1.
    Conv2d { inp: usize, out: usize, stride: usize },
    /// Nearest 2x upsample followed by a stride-1 3x3 convolution.
    UpsampleConv { inp: usize, out: usize },
    /// Group normalization with learned per-channel scale/shift.
    GroupNorm { channels: usize, groups: usize },
    /// Parameter-free SiLU activation.
    Silu,
    /// Parameter-free sigmoid activation.
    Sigmoid,
    /// Sinusoidal scalar embedding `[b] -> [b, dim]`.
    SinEmbed { dim: usize },
    /// Learned frame-mixing matrix over `[b, frames, f]`.
    TemporalMix { frames: usize },
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            LayerSpec::Affine { inp, out } => write!(f, "affine({inp}->{out})"),
            LayerSpec::Conv2d { inp, out, stride } => write!(f, "conv2d({inp}->{out},s{stride})"),
            LayerSpec::UpsampleConv { inp, out } => write!(f, "upconv({inp}->{out})"),
            LayerSpec::GroupNorm { channels, groups } => write!(f, "groupnorm({channels},g{groups})"),
            LayerSpec::Silu => write!(f, "silu"),
            LayerSpec::Sigmoid => write!(f, "sigmoid"),
            LayerSpec::SinEmbed { dim } => write!(f, "sin_embed({dim})"),
            LayerSpec::TemporalMix { frames } => write!(f, "temporal_mix({frames})"),
        }
    }
}

/// A spec plus the parameters it owns in some [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<ParamId>,
}

impl Layer {
    /// Register freshly initialized parameters for `spec`.
    ///
    /// Weights use He-style fan-in scaling; biases start at zero; norms start
    /// at identity; the temporal mix starts near the identity matrix so early
    /// training passes frames through unchanged.
    pub fn init(spec: LayerSpec, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Vec::new();
        match spec {
            LayerSpec::Affine { inp, out } => {
                if inp == 0 || out == 0 {
                    return Err(Error::Config(format!("affine layer with zero size: {spec}")));
                }
                let std = (2.0 / inp as f32).sqrt();
                let w = Tensor::randn([inp, out], rng).scale(std);
                params.push(store.register(format!("{name}.w"), w));
                params.push(store.register(format!("{name}.b"), Tensor::zeros([out])));
            }
            LayerSpec::Conv2d { inp, out, stride } => {
                if inp == 0 || out == 0 {
                    return Err(Error::Config(format!("conv layer with zero channels: {spec}")));
                }
                if stride != 1 && stride != 2 {
                    return Err(Error::Config(format!("conv stride must be 1 or 2: {spec}")));
                }
                let std = (2.0 / (inp * 9) as f32).sqrt();
                let w = Tensor::randn([out, inp, 3, 3], rng).scale(std);
                params.push(store.register(format!("{name}.w"), w));
                params.push(store.register(format!("{name}.b"), Tensor::zeros([out])));
            }
            LayerSpec::UpsampleConv { inp, out } => {
                if inp == 0 || out == 0 {
                    return Err(Error::Config(format!("upconv layer with zero channels: {spec}")));
                }
                let std = (2.0 / (inp * 9) as f32).sqrt();
                let w = Tensor::randn([out, inp, 3, 3], rng).scale(std);
                params.push(store.register(format!("{name}.w"), w));
                params.push(store.register(format!("{name}.b"), Tensor::zeros([out])));
            }
            LayerSpec::GroupNorm { channels, groups } => {
                if groups == 0 || channels == 0 || channels % groups != 0 {
                    return Err(Error::Config(format!(
                        "group_norm needs channels divisible by groups: {spec}"
                    )));
                }
                params.push(store.register(format!("{name}.gamma"), Tensor::full([channels], 1.0)));
                params.push(store.register(format!("{name}.beta"), Tensor::zeros([channels])));
            }
            LayerSpec::Silu | LayerSpec::Sigmoid => {}
            LayerSpec::SinEmbed { dim } => {
                if dim < 2 || dim % 2 != 0 {
                    return Err(Error::Config(format!("sin_embed dim must be even >= 2: {spec}")));
                }
            }
            LayerSpec::TemporalMix { frames } => {
                if frames == 0 {
                    return Err(Error::Config(format!("temporal_mix with zero frames: {spec}")));
                }
                let mut w = Tensor::randn([frames, frames], rng).scale(0.02);
                for i in 0..frames {
                    w.data_mut()[i * frames + i] += 1.0;
                }
                params.push(store.register(format!("{name}.w"), w));
                params.push(store.register(format!("{name}.b"), Tensor::zeros([frames])));
            }
        }
        Ok(Layer { spec, params })
    }

    /// Run the layer. `trainable` decides whether its parameters are bound
    /// for gradients or frozen; input shapes are validated before any tape
    /// node is created.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, trainable: bool) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let bind = |tape: &mut Tape, id: ParamId| {
            if trainable {
                tape.param(store, id)
            } else {
                tape.frozen_param(store, id)
            }
        };
        match self.spec {
            LayerSpec::Affine { inp, out: _ } => {
                if shape.len() != 2 || shape[1] != inp {
                    return Err(Error::shape(
                        "forward_layer",
                        format!("{} expects [b,{inp}], got {:?}", self.spec, shape),
                    ));
                }
                let w = bind(tape, self.params[0]);
                let b = bind(tape, self.params[1]);
                let y = tape.matmul(x, w);
                Ok(tape.add_bias(y, b))
            }
            LayerSpec::Conv2d { inp, out: _, stride } => {
                if shape.len() != 4 || shape[1] != inp {
                    return Err(Error::shape(
                        "forward_layer",
                        format!("{} expects [b,{inp},h,w], got {:?}", self.spec, shape),
                    ));
                }
                let w = bind(tape, self.params[0]);
                let b = bind(tape, self.params[1]);
                Ok(tape.conv2d(x, w, b, stride))
            }
            LayerSpec::UpsampleConv { inp, out: _ } => {
                if shape.len() != 4 || shape[1] != inp {
                    return Err(Error::shape(
                        "forward_layer",
                        format!("{} expects [b,{inp},h,w], got {:?}", self.spec, shape),
                    ));
                }
                let up = tape.upsample2(x);
                let w = bind(tape, self.params[0]);
                let b = bind(tape, self.params[1]);
                Ok(tape.conv2d(up, w, b, 1))
            }
            LayerSpec::GroupNorm { channels, groups } => {
                if shape.len() != 4 || shape[1] != channels {
                    return Err(Error::shape(
                        "forward_layer",
                        format!("{} expects [b,{channels},h,w], got {:?}", self.spec, shape),
                    ));
                }
                let gamma = bind(tape, self.params[0]);
                let beta = bind(tape, self.params[1]);
                Ok(tape.group_norm(x, gamma, beta, groups))
            }
            LayerSpec::Silu => Ok(tape.silu(x)),
            LayerSpec::Sigmoid => Ok(tape.sigmoid(x)),
            LayerSpec::SinEmbed { dim } => {
                if shape.len() != 1 {
                    return Err(Error::shape(
                        "forward_layer",
                        format!("{} expects [b], got {:?}", self.spec, shape),
                    ));
                }
                Ok(tape.sin_embed(x, dim))
            }
            LayerSpec::TemporalMix { frames } => {
                if shape.len() != 3 || shape[1] != frames {
                    return Err(Error::shape(
                        "forward_layer",
                        format!("{} expects [b,{frames},f], got {:?}", self.spec, shape),
                    ));
                }
                let w = bind(tape, self.params[0]);
                let b = bind(tape, self.params[1]);
                Ok(tape.temporal_mix(x, w, b))
            }
        }
    }

    /// Manifest line for this layer.
    pub fn describe(&self) -> String {
        self.spec.to_string()
    }
}

/// Build the manifest string for a network: one line per layer plus free-form
/// glue notes the model wants to pin (embedding table sizes etc).
pub fn manifest_of(layers: &[&Layer], extra: &[String]) -> String {
    let mut lines: Vec<String> = layers.iter().map(|l| l.describe()).collect();
    lines.extend(extra.iter().cloned());
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn init_rejects_bad_specs() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, 0, 0);
        assert!(Layer::init(LayerSpec::Conv2d { inp: 1, out: 1, stride: 3 }, &mut store, "x", &mut r).is_err());
        assert!(Layer::init(LayerSpec::GroupNorm { channels: 6, groups: 4 }, &mut store, "x", &mut r).is_err());
        assert!(Layer::init(LayerSpec::SinEmbed { dim: 3 }, &mut store, "x", &mut r).is_err());
        assert!(Layer::init(LayerSpec::Affine { inp: 0, out: 4 }, &mut store, "x", &mut r).is_err());
    }

    #[test]
    fn forward_rejects_wrong_shapes() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, 0, 1);
        let layer = Layer::init(LayerSpec::Affine { inp: 4, out: 2 }, &mut store, "fc", &mut r).unwrap();
        let mut tape = Tape::new();
        let bad = tape.input(Tensor::zeros([2, 3]));
        assert!(layer.forward(&mut tape, &store, bad, true).is_err());
        let good = tape.input(Tensor::zeros([2, 4]));
        let y = layer.forward(&mut tape, &store, good, true).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
    }

    #[test]
    fn manifest_lines_are_stable() {
        assert_eq!(LayerSpec::Conv2d { inp: 8, out: 16, stride: 2 }.to_string(), "conv2d(8->16,s2)");
        assert_eq!(LayerSpec::TemporalMix { frames: 16 }.to_string(), "temporal_mix(16)");
    }

    #[test]
    fn temporal_mix_starts_near_identity() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, 0, 2);
        let layer = Layer::init(LayerSpec::TemporalMix { frames: 4 }, &mut store, "tm", &mut r).unwrap();
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::from_fn([1, 4, 2], |i| i as f32));
        let y = layer.forward(&mut tape, &store, x, false).unwrap();
        let diff = tape.value(y).max_abs_diff(tape.value(x));
        assert!(diff < 0.5, "identity init drifted: {diff}");
    }
}
