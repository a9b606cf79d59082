//! Layers, decoder head, optimizer and checkpoint container.

mod checkpoint;
mod head;
mod optim;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use head::{cross_entropy, log_softmax_at, predict, DecoderHead, ProjectionCache};
pub use optim::{ParamUpdate, SgdMomentum};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
    },
    MaxPool2d {
        size: usize,
    },
    Flatten,
    Dropout {
        keep: f64,
    },
}

/// Forward-pass mode. Dropout draws its masks from the training RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    /// Indices into the network's parameter list.
    params: Vec<usize>,
}

/// Feed-forward encoder `h(Wₑ, x)`.
#[derive(Clone, Debug)]
pub struct EncoderNetwork {
    input_shape: Vec<usize>,
    output_dim: usize,
    layers: Vec<Layer>,
    params: Vec<Param>,
}

fn glorot<R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    Tensor::new(
        shape,
        (0..len).map(|_| rng.random_range(-limit..=limit)).collect(),
    )
}

impl EncoderNetwork {
    /// Builds the network for per-sample inputs of `input_shape`
    /// (`[features]` or `[channels, height, width]`).
    pub fn new<R: Rng + ?Sized>(
        input_shape: &[usize],
        specs: &[LayerSpec],
        rng: &mut R,
    ) -> Result<Self> {
        let shape_err = |reason: String| Error::Config(format!("encoder: {reason}"));
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();

        for (i, spec) in specs.iter().enumerate() {
            let mut owned = Vec::new();
            match *spec {
                LayerSpec::Dense { units, .. } => {
                    let &[fan_in] = shape.as_slice() else {
                        return Err(shape_err(format!(
                            "dense layer {i} needs flat input, got {shape:?}"
                        )));
                    };
                    if units == 0 {
                        return Err(shape_err(format!("dense layer {i} has zero units")));
                    }
                    owned.push(params.len());
                    params.push(Param {
                        name: format!("encoder.{i}.weight"),
                        value: glorot(rng, vec![fan_in, units], fan_in, units)?,
                    });
                    owned.push(params.len());
                    params.push(Param {
                        name: format!("encoder.{i}.bias"),
                        value: Tensor::zeros([units])?,
                    });
                    shape = vec![units];
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    padding,
                    ..
                } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(shape_err(format!(
                            "conv layer {i} needs [C, H, W] input, got {shape:?}"
                        )));
                    };
                    if filters == 0
                        || kernel == 0
                        || kernel > h + 2 * padding
                        || kernel > w + 2 * padding
                    {
                        return Err(shape_err(format!("conv layer {i} does not fit {shape:?}")));
                    }
                    let area = kernel * kernel;
                    owned.push(params.len());
                    params.push(Param {
                        name: format!("encoder.{i}.weight"),
                        value: glorot(
                            rng,
                            vec![filters, c, kernel, kernel],
                            c * area,
                            filters * area,
                        )?,
                    });
                    owned.push(params.len());
                    params.push(Param {
                        name: format!("encoder.{i}.bias"),
                        value: Tensor::zeros([filters])?,
                    });
                    shape = vec![
                        filters,
                        h + 2 * padding - kernel + 1,
                        w + 2 * padding - kernel + 1,
                    ];
                }
                LayerSpec::MaxPool2d { size } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(shape_err(format!("pool layer {i} needs [C, H, W] input")));
                    };
                    if size == 0 || size > h || size > w {
                        return Err(shape_err(format!("pool layer {i} window {size} too large")));
                    }
                    shape = vec![c, h / size, w / size];
                }
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::Dropout { keep } => {
                    if !(keep > 0.0 && keep <= 1.0) {
                        return Err(shape_err(format!(
                            "dropout keep probability {keep} outside (0, 1]"
                        )));
                    }
                }
            }
            layers.push(Layer {
                spec: spec.clone(),
                params: owned,
            });
        }
        let &[output_dim] = shape.as_slice() else {
            return Err(shape_err(format!("output must be flat, got {shape:?}")));
        };
        Ok(Self {
            input_shape: input_shape.to_vec(),
            output_dim,
            layers,
            params,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// `dim(Y)`
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Registers every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Registers every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// `h(Wₑ, x)` for a batch `x` of shape `[N, input_shape..]`.
    pub fn encode<'t>(&self, bound: &[Var<'t>], x: Var<'t>, mut mode: Mode<'_>) -> Result<Var<'t>> {
        let expected: Vec<usize> = std::iter::once(x.shape()[0])
            .chain(self.input_shape.iter().copied())
            .collect();
        if x.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: x.shape(),
                rhs: expected,
            });
        }
        let mut h = x;
        for layer in &self.layers {
            let p = |k: usize| bound[layer.params[k]];
            h = match layer.spec {
                LayerSpec::Dense { activation, .. } => activation.apply(h.matmul(p(0))?.add(p(1))?),
                LayerSpec::Conv2d {
                    padding,
                    activation,
                    ..
                } => {
                    let filters = p(1).shape()[0];
                    let bias = p(1).reshape([1, filters, 1, 1])?;
                    activation.apply(h.conv2d(p(0), padding)?.add(bias)?)
                }
                LayerSpec::MaxPool2d { size } => h.max_pool2d(size)?,
                LayerSpec::Flatten => {
                    let shape = h.shape();
                    h.reshape([shape[0], shape[1..].iter().product()])?
                }
                LayerSpec::Dropout { keep } => match &mut mode {
                    Mode::Train(rng) if keep < 1.0 => {
                        let shape = h.shape();
                        let len = shape.iter().product();
                        let mask: Vec<f64> = (0..len)
                            .map(|_| {
                                if rng.random_bool(keep) {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        h.mul(h.tape().constant(Tensor::new(shape, mask)?))?
                    }
                    _ => h,
                },
            };
        }
        Ok(h)
    }

    /// Deterministic mean encoding of plain values, off any training tape.
    pub fn encode_values(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let h = self.encode(&bound, tape.constant(x.clone()), Mode::Eval)?;
        let value = h.value().clone();
        Ok(value)
    }
}

/// Model parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel<'t> {
    pub encoder: Vec<Var<'t>>,
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

/// Encoder plus decoder head, the unit that is trained and checkpointed.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: EncoderNetwork,
    pub head: DecoderHead,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        input_shape: &[usize],
        layers: &[LayerSpec],
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = EncoderNetwork::new(input_shape, layers, rng)?;
        let head = DecoderHead::new(classes, encoder.output_dim(), rng)?;
        Ok(Self { encoder, head })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        BoundModel {
            encoder: self.encoder.bind(tape),
            weight: tape.leaf(self.head.weight().clone()),
            bias: tape.leaf(self.head.bias().clone()),
        }
    }

    /// Pairs every parameter with its gradient from `grads`, in the order
    /// the optimizer tracks them.
    pub fn updates<'a>(
        &'a mut self,
        bound: &BoundModel<'_>,
        grads: &mut Gradients,
    ) -> Vec<ParamUpdate<'a>> {
        let mut out: Vec<ParamUpdate<'a>> = self
            .encoder
            .params
            .iter_mut()
            .zip(&bound.encoder)
            .map(|(p, &var)| ParamUpdate {
                name: &p.name,
                value: &mut p.value,
                grad: grads.take(var),
            })
            .collect();
        let (weight, bias) = self.head.parameters_mut();
        out.push(ParamUpdate {
            name: DecoderHead::WEIGHT,
            value: weight,
            grad: grads.take(bound.weight),
        });
        out.push(ParamUpdate {
            name: DecoderHead::BIAS,
            value: bias,
            grad: grads.take(bound.bias),
        });
        out
    }

    /// All parameters with their checkpoint names, encoder first.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.encoder
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .chain([
                (DecoderHead::WEIGHT.to_string(), self.head.weight().clone()),
                (DecoderHead::BIAS.to_string(), self.head.bias().clone()),
            ])
            .collect()
    }

    /// Replaces parameter values by name; every parameter must be present
    /// with its current shape.
    pub fn load_named_params(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let find = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let (_, t) = entries.iter().find(|(n, _)| n == name).ok_or_else(|| {
                Error::ArchitectureMismatch(format!("missing parameter `{name}`"))
            })?;
            if t.shape() != shape {
                return Err(Error::ArchitectureMismatch(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let mut encoder_values = Vec::with_capacity(self.encoder.params.len());
        for p in &self.encoder.params {
            encoder_values.push(find(&p.name, p.value.shape())?);
        }
        let weight = find(DecoderHead::WEIGHT, self.head.weight().shape())?;
        let bias = find(DecoderHead::BIAS, self.head.bias().shape())?;
        for (p, v) in self.encoder.params.iter_mut().zip(encoder_values) {
            p.value = v;
        }
        self.head.set_parameters(weight, bias)?;
        Ok(())
    }
}
