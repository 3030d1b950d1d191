//! Stochastic gradient descent with classic momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::LayerParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Vec<Option<LayerParams>>);

impl Velocity {
    pub fn zeros_like(params: &[Option<LayerParams>]) -> Self {
        Velocity(
            params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.dims()),
                        bias: Tensor::zeros(p.bias.dims()),
                    })
                })
                .collect(),
        )
    }
}

/// One step, applied in place:
///
/// ```text
/// d = g + weight_decay * w
/// v = momentum * v + d
/// w -= lr * (d + momentum * v)   (nesterov)
/// w -= lr * v                    (otherwise)
/// ```
pub fn sgd_step(
    params: &mut [Option<LayerParams>],
    grads: &[Option<LayerParams>],
    velocity: &mut Velocity,
    cfg: &SgdConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != velocity.0.len() {
        return Err(Error::shape("sgd parameter slots", params.len(), grads.len()));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.0.iter_mut()) {
        match (p, g, v) {
            (None, None, None) => {}
            (Some(p), Some(g), Some(v)) => {
                update(&mut p.weight, &g.weight, &mut v.weight, cfg)?;
                update(&mut p.bias, &g.bias, &mut v.bias, cfg)?;
            }
            _ => return Err(Error::invalid("parameter, gradient and velocity layouts differ")),
        }
    }
    Ok(())
}

fn update(w: &mut Tensor, g: &Tensor, v: &mut Tensor, cfg: &SgdConfig) -> Result<()> {
    if !w.same_shape(g) || !w.same_shape(v) {
        return Err(Error::shape("sgd tensor", w.len(), g.len()));
    }
    for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        let d = gi + cfg.weight_decay * *wi;
        *vi = cfg.momentum * *vi + d;
        let step = if cfg.nesterov { d + cfg.momentum * *vi } else { *vi };
        *wi -= cfg.lr * step;
    }
    Ok(())
}
