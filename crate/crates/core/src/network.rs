//! Sequential networks: shape validation, masked forward pass, and the
//! reverse pass that yields activation and parameter gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::layers::{self, ConvGeometry, LayerSpec};
use crate::tensor::Tensor;

/// Ordered layer list plus the single-image input dims and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks every structural invariant and returns the output dims of
    /// each layer.
    pub fn layer_output_dims(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return Err(Error::invalid("input dims must be non-empty and positive"));
        }
        let heads = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::SoftmaxCeHead))
            .count();
        if heads != 1 || !matches!(self.layers.last(), Some(LayerSpec::SoftmaxCeHead)) {
            return Err(Error::invalid(
                "network needs exactly one softmax_ce_head, as its last layer",
            ));
        }
        if !self.layers.iter().any(LayerSpec::is_conv) {
            return Err(Error::invalid("network needs at least one conv2d layer"));
        }
        let mut dims = self.input_dims.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            dims = layer
                .output_dims(&dims)
                .map_err(|e| Error::invalid(format!("layer {k} ({layer:?}): {e}")))?;
            out.push(dims.clone());
        }
        ensure_dim("logit count", self.num_classes, dims.iter().product())?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_output_dims().map(|_| ())
    }

    /// Positions (in `layers`) of the conv layers, in order.
    pub fn conv_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(k, _)| k)
            .collect()
    }

    /// Input dims of layer `k`.
    pub fn input_dims_of(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 {
            return Ok(self.input_dims.clone());
        }
        let dims = self.layer_output_dims()?;
        dims.get(k - 1)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("layer {k} out of range")))
    }

    /// Conv stack `channels[0] -> channels[1] -> ...` of 3x3 same-padding
    /// convolutions, each followed by ReLU, with 2x2 max-pools after the
    /// layers listed in `pool_after`, then a linear head.
    pub fn conv_stack(
        input_dims: [usize; 3],
        channels: &[usize],
        pool_after: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        let [c, mut h, mut w] = input_dims;
        let mut layers = Vec::new();
        let mut prev = c;
        for (idx, &ch) in channels.iter().enumerate() {
            layers.push(LayerSpec::conv3x3(prev, ch));
            layers.push(LayerSpec::Relu);
            if pool_after.contains(&idx) {
                layers.push(LayerSpec::Maxpool2d { window: 2, stride: 2 });
                h /= 2;
                w /= 2;
            }
            prev = ch;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            in_features: prev * h * w,
            out_features: num_classes,
        });
        layers.push(LayerSpec::SoftmaxCeHead);
        let spec = NetworkSpec {
            input_dims: input_dims.to_vec(),
            num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Weight and bias of one parameterised layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A network description together with its parameters (`None` for layers
/// without parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub params: Vec<Option<LayerParams>>,
}

/// Per-layer input-channel masks; `None` entries (or a short slice) keep
/// every channel.
pub type MaskSet = [Option<Vec<bool>>];

fn mask_for(masks: &MaskSet, k: usize) -> Option<&[bool]> {
    masks.get(k).and_then(|m| m.as_deref())
}

impl Model {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layers
            .iter()
            .map(|layer| {
                layer.param_dims().map(|(wdims, nbias)| {
                    let fan_in: usize = wdims[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let n: usize = wdims.iter().product();
                    let data = (0..n).map(|_| normal.sample(rng)).collect();
                    LayerParams {
                        weight: Tensor::new(wdims, data).expect("sized"),
                        bias: Tensor::zeros(&[nbias]),
                    }
                })
            })
            .collect();
        Ok(Model { spec, params })
    }

    /// Verifies that every parameter tensor matches its layer description.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        ensure_dim("parameter slots", self.spec.layers.len(), self.params.len())?;
        for (k, (layer, p)) in self.spec.layers.iter().zip(&self.params).enumerate() {
            match (layer.param_dims(), p) {
                (None, None) => {}
                (Some((wdims, nbias)), Some(p)) => {
                    if p.weight.dims() != wdims.as_slice() {
                        return Err(Error::invalid(format!(
                            "layer {k}: weight dims {:?}, expected {:?}",
                            p.weight.dims(),
                            wdims
                        )));
                    }
                    if p.bias.dims() != [nbias] {
                        return Err(Error::invalid(format!(
                            "layer {k}: bias dims {:?}, expected [{nbias}]",
                            p.bias.dims()
                        )));
                    }
                }
                (Some(_), None) => return Err(Error::invalid(format!("layer {k}: missing parameters"))),
                (None, Some(_)) => {
                    return Err(Error::invalid(format!("layer {k}: unexpected parameters")))
                }
            }
        }
        Ok(())
    }

    fn params_of(&self, k: usize) -> Result<&LayerParams> {
        self.params
            .get(k)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::invalid(format!("layer {k}: missing parameters")))
    }

    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Applies layer `k` to `input`.
    pub fn apply_layer(&self, k: usize, input: &Tensor, masks: &MaskSet) -> Result<Tensor> {
        match &self.spec.layers[k] {
            &LayerSpec::Conv2d { stride, padding, .. } => {
                let p = self.params_of(k)?;
                layers::conv2d_forward(
                    input,
                    &p.weight,
                    p.bias.data(),
                    mask_for(masks, k),
                    ConvGeometry { stride, padding },
                )
            }
            LayerSpec::Relu => Ok(layers::relu_forward(input)),
            &LayerSpec::Maxpool2d { window, stride } => layers::maxpool_forward(input, window, stride),
            LayerSpec::Flatten => {
                let n = input.len();
                input.clone().reshape(vec![n])
            }
            LayerSpec::Linear { .. } => {
                let p = self.params_of(k)?;
                layers::linear_forward(input, &p.weight, p.bias.data())
            }
            LayerSpec::SoftmaxCeHead => Ok(input.clone()),
        }
    }

    /// Runs layers `start..` on `input` (the input of layer `start`) and
    /// returns each layer's output.
    pub fn forward_from(&self, start: usize, input: &Tensor, masks: &MaskSet) -> Result<Vec<Tensor>> {
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.spec.layers.len().saturating_sub(start));
        for k in start..self.spec.layers.len() {
            let x = outputs.last().unwrap_or(input);
            let y = self.apply_layer(k, x, masks)?;
            outputs.push(y);
        }
        Ok(outputs)
    }

    pub fn logits(&self, input: &Tensor) -> Result<Vec<f64>> {
        let outs = self.forward_from(0, input, &[])?;
        Ok(outs.last().expect("non-empty network").data().to_vec())
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(input)?))
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Every layer output of one forward pass, kept for the reverse pass.
///
/// Conv outputs are the linear (pre-activation) responses; activation
/// function outputs are stored at the following `relu` layer.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub activations: Vec<Tensor>,
    pub masks: Vec<Option<Vec<bool>>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("non-empty network").data()
    }

    /// Input of layer `k`.
    pub fn layer_input(&self, k: usize) -> &Tensor {
        if k == 0 {
            &self.input
        } else {
            &self.activations[k - 1]
        }
    }
}

pub fn forward_collect(model: &Model, input: &Tensor, masks: &MaskSet) -> Result<ForwardTrace> {
    if input.dims() != model.spec.input_dims.as_slice() {
        return Err(Error::invalid(format!(
            "input dims {:?} do not match network input {:?}",
            input.dims(),
            model.spec.input_dims
        )));
    }
    let activations = model.forward_from(0, input, masks)?;
    Ok(ForwardTrace {
        input: input.clone(),
        activations,
        masks: masks.to_vec(),
    })
}

/// Softmax cross-entropy loss and its gradients for one image.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// `dC/d(output of layer k)` for every layer.
    pub activations: Vec<Tensor>,
    /// `dC/d(network input)`.
    pub input: Tensor,
    /// Parameter gradients, shaped like `Model::params`.
    pub params: Vec<Option<LayerParams>>,
}

pub fn backward_collect(model: &Model, trace: &ForwardTrace, label: usize) -> Result<Gradients> {
    let n = model.spec.layers.len();
    if trace.activations.len() != n {
        return Err(Error::shape("trace activations", n, trace.activations.len()));
    }
    let logits = trace.logits();
    let loss = layers::cross_entropy(logits, label)?;
    let mut grad = Tensor::new(vec![logits.len()], layers::cross_entropy_grad(logits, label)?)?;

    let mut act_grads: Vec<Option<Tensor>> = vec![None; n];
    let mut param_grads: Vec<Option<LayerParams>> = vec![None; n];
    for k in (0..n).rev() {
        act_grads[k] = Some(grad.clone());
        let x = trace.layer_input(k);
        grad = match &model.spec.layers[k] {
            &LayerSpec::Conv2d { stride, padding, .. } => {
                let p = model.params_of(k)?;
                let g = layers::conv2d_backward(
                    x,
                    &p.weight,
                    &grad,
                    mask_for(&trace.masks, k),
                    ConvGeometry { stride, padding },
                )?;
                param_grads[k] = Some(LayerParams {
                    weight: g.weights,
                    bias: Tensor::from_vec(g.bias),
                });
                g.input
            }
            LayerSpec::Relu => layers::relu_backward(x, &grad)?,
            &LayerSpec::Maxpool2d { window, stride } => layers::maxpool_backward(x, &grad, window, stride)?,
            LayerSpec::Flatten => grad.reshape(x.dims().to_vec())?,
            LayerSpec::Linear { .. } => {
                let p = model.params_of(k)?;
                let g = layers::linear_backward(x, &p.weight, &grad)?;
                param_grads[k] = Some(LayerParams {
                    weight: g.weights,
                    bias: Tensor::from_vec(g.bias),
                });
                g.input
            }
            // Logits pass through unchanged; the loss gradient was seeded above.
            LayerSpec::SoftmaxCeHead => grad,
        };
    }
    Ok(Gradients {
        loss,
        activations: act_grads.into_iter().map(|g| g.expect("filled")).collect(),
        input: grad,
        params: param_grads,
    })
}
