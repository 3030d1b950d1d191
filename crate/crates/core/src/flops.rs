//! Floating-point operation counts.
//!
//! A conv layer costs `2 * c_out * c_in * kh * kw * h_out * w_out` and a
//! linear layer `2 * in * out` (multiplies and adds counted separately);
//! activations, pooling and reshapes are free.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::LayerSpec;
use crate::network::NetworkSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

pub fn flops_count(spec: &NetworkSpec) -> Result<FlopsReport> {
    let mut dims = spec.input_dims.clone();
    let mut per_layer = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let out = layer.output_dims(&dims)?;
        let flops = match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => 2 * (out_channels * in_channels * kernel_h * kernel_w * out[1] * out[2]) as u64,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => 2 * (in_features * out_features) as u64,
            _ => 0,
        };
        per_layer.push(flops);
        dims = out;
    }
    let total = per_layer.iter().sum();
    Ok(FlopsReport { per_layer, total })
}

/// `before / after`.
pub fn compression_ratio(before: &NetworkSpec, after: &NetworkSpec) -> Result<f64> {
    Ok(flops_count(before)?.total as f64 / flops_count(after)?.total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_formula() {
        let spec = NetworkSpec {
            input_dims: vec![3, 16, 16],
            num_classes: 8 * 16 * 16,
            layers: vec![LayerSpec::conv3x3(3, 8), LayerSpec::Flatten, LayerSpec::SoftmaxCeHead],
        };
        let report = flops_count(&spec).unwrap();
        assert_eq!(report.per_layer[0], 110_592);
        assert_eq!(report.total, 110_592);
    }

    #[test]
    fn empty_spec_costs_nothing() {
        let spec = NetworkSpec {
            input_dims: vec![1, 4, 4],
            num_classes: 1,
            layers: vec![],
        };
        assert_eq!(flops_count(&spec).unwrap().total, 0);
    }

    #[test]
    fn three_layer_spec_matches_hand_ledger() {
        // conv 1->4 3x3 pad 1 on 8x8, relu, pool to 4x4, conv 4->6 3x3 pad 1,
        // relu, flatten 96, linear 96->5.
        let spec = NetworkSpec::conv_stack([1, 8, 8], &[4, 6], &[0], 5).unwrap();
        let ledger: u64 = 2 * 4 * 9 * 64 // conv1: 4608
            + 2 * 6 * 4 * 9 * 16 // conv2: 6912
            + 2 * 96 * 5; // linear: 960
        assert_eq!(ledger, 12_480);
        assert_eq!(flops_count(&spec).unwrap().total, ledger);
    }
}
