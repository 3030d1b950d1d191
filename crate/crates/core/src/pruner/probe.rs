//! Feature probes: sampled layer responses of the uncompressed and the
//! partially compressed model, with per-channel contributions and patches.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{self, conv_patch, ConvGeometry, LayerSpec};
use crate::model_io::Dataset;
use crate::network::{backward_collect, forward_collect, Model};

/// Geometry of the conv layer a probe set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSite {
    /// Position in `NetworkSpec::layers`.
    pub position: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub geom: ConvGeometry,
}

impl ConvSite {
    pub fn of(model: &Model, position: usize) -> Result<Self> {
        match model.spec.layers.get(position) {
            Some(&LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            }) => Ok(ConvSite {
                position,
                in_channels,
                out_channels,
                kernel: (kernel_h, kernel_w),
                geom: ConvGeometry { stride, padding },
            }),
            _ => Err(Error::invalid(format!("layer {position} is not a conv layer"))),
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

/// One sampled location of one probe image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProbeLocation {
    /// Index into the dataset the probes were drawn from.
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

/// Probe records of one layer. Responses are bias-free conv outputs.
///
/// With `P` probes, `c_out` output and `c_in` input channels:
/// `y0`, `ystar` and `grad` are `[P, c_out]`, `z` is `[P, c_out, c_in]`
/// and `patches` is `[P, c_in * kh * kw]`, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProbe {
    pub site: ConvSite,
    pub locations: Vec<ProbeLocation>,
    pub y0: Vec<f64>,
    pub ystar: Vec<f64>,
    pub grad: Vec<f64>,
    pub z: Vec<f64>,
    pub patches: Vec<f64>,
    /// The feature map had fewer than the requested number of locations,
    /// so every location was used.
    pub locations_clamped: bool,
}

impl FeatureProbe {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// `z[p, i, :]`.
    pub fn contributions(&self, p: usize, i: usize) -> &[f64] {
        let c_in = self.site.in_channels;
        let start = (p * self.site.out_channels + i) * c_in;
        &self.z[start..start + c_in]
    }

    pub fn patch(&self, p: usize) -> &[f64] {
        let w = self.site.in_channels * self.site.kernel_len();
        &self.patches[p * w..(p + 1) * w]
    }
}

/// Draws `count` distinct dataset indices (all of them when the dataset is
/// smaller), in ascending order.
pub fn sample_probe_images(dataset_len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= dataset_len {
        return (0..dataset_len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, dataset_len, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Seed of the location stream for one (layer, image) pair.
fn location_seed(seed: u64, position: usize, image: usize) -> u64 {
    // splitmix64 finaliser over the packed key.
    let mut z = seed
        ^ (position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (image as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Distinct flat locations out of `positions`, in draw order.
pub fn sample_locations(positions: usize, count: usize, seed: u64, position: usize, image: usize) -> Vec<usize> {
    if count >= positions {
        return (0..positions).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(location_seed(seed, position, image));
    index::sample(&mut rng, positions, count).into_vec()
}

struct ImageProbes {
    locations: Vec<ProbeLocation>,
    y0: Vec<f64>,
    ystar: Vec<f64>,
    grad: Vec<f64>,
    z: Vec<f64>,
    patches: Vec<f64>,
}

/// Probes conv layer `position` over `images`.
///
/// `uncompressed` supplies `y0`. `compressed` must agree with it from layer
/// `position` on (same layer kinds, and the original weights at `position`);
/// its forward pass supplies the input feature `X`, `ystar` and, through a
/// batch-size-1 backward pass with each image's true label, `grad`.
pub fn extract_probes(
    uncompressed: &Model,
    compressed: &Model,
    position: usize,
    data: &Dataset,
    images: &[usize],
    num_locations: usize,
    seed: u64,
) -> Result<FeatureProbe> {
    if num_locations == 0 {
        return Err(Error::invalid("num_locations must be positive"));
    }
    if images.is_empty() {
        return Err(Error::invalid("no probe images"));
    }
    let site = ConvSite::of(compressed, position)?;
    let orig_site = ConvSite::of(uncompressed, position)?;
    if orig_site.out_channels != site.out_channels || orig_site.kernel != site.kernel {
        return Err(Error::invalid(format!(
            "layer {position}: compressed and uncompressed outputs differ"
        )));
    }
    let w0 = &compressed.params[position].as_ref().expect("conv has parameters").weight;
    let b_comp = compressed.params[position].as_ref().expect("conv has parameters").bias.data();
    let b_orig = uncompressed.params[position].as_ref().expect("conv has parameters").bias.data();
    let (c_in, c_out, klen) = (site.in_channels, site.out_channels, site.kernel_len());

    let per_image: Vec<Result<(ImageProbes, bool)>> = images
        .par_iter()
        .map(|&n| {
            let x = data.image(n);
            let label = data.labels[n];
            let orig = forward_collect(uncompressed, &x, &[])?;
            let comp = forward_collect(compressed, &x, &[])?;
            let grads = backward_collect(compressed, &comp, label)?;
            let y_orig = &orig.activations[position];
            let y_comp = &comp.activations[position];
            let g = &grads.activations[position];
            let input = comp.layer_input(position);
            let (h_out, w_out) = (y_comp.dims()[1], y_comp.dims()[2]);
            let plane = h_out * w_out;
            let flat = sample_locations(plane, num_locations, seed, position, n);
            let clamped = num_locations > plane;

            let mut out = ImageProbes {
                locations: Vec::with_capacity(flat.len()),
                y0: Vec::with_capacity(flat.len() * c_out),
                ystar: Vec::with_capacity(flat.len() * c_out),
                grad: Vec::with_capacity(flat.len() * c_out),
                z: Vec::with_capacity(flat.len() * c_out * c_in),
                patches: Vec::with_capacity(flat.len() * c_in * klen),
            };
            for m in flat {
                let (oy, ox) = (m / w_out, m % w_out);
                let patch = conv_patch(input, site.kernel, site.geom, oy, ox)?;
                for i in 0..c_out {
                    out.y0.push(y_orig.data()[i * plane + m] - b_orig[i]);
                    out.ystar.push(y_comp.data()[i * plane + m] - b_comp[i]);
                    out.grad.push(g.data()[i * plane + m]);
                    let filter = &w0.data()[i * c_in * klen..(i + 1) * c_in * klen];
                    for j in 0..c_in {
                        let r = j * klen..(j + 1) * klen;
                        out.z.push(layers::dot(&patch[r.clone()], &filter[r]));
                    }
                }
                out.patches.extend_from_slice(&patch);
                out.locations.push(ProbeLocation { image: n, y: oy, x: ox });
            }
            Ok((out, clamped))
        })
        .collect();

    let mut probe = FeatureProbe {
        site,
        locations: Vec::new(),
        y0: Vec::new(),
        ystar: Vec::new(),
        grad: Vec::new(),
        z: Vec::new(),
        patches: Vec::new(),
        locations_clamped: false,
    };
    for item in per_image {
        let (p, clamped) = item?;
        probe.locations_clamped |= clamped;
        probe.locations.extend(p.locations);
        probe.y0.extend(p.y0);
        probe.ystar.extend(p.ystar);
        probe.grad.extend(p.grad);
        probe.z.extend(p.z);
        probe.patches.extend(p.patches);
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::synth_dataset;
    use crate::network::NetworkSpec;
    use std::collections::BTreeSet;

    fn setup() -> (Model, Dataset) {
        let spec = NetworkSpec::conv_stack([1, 6, 6], &[3, 4], &[], 3).unwrap();
        let model = Model::init(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (model, synth_dataset(9, 6, 3, [1, 6, 6]).unwrap())
    }

    #[test]
    fn identical_models_give_ystar_equal_y0() {
        let (model, data) = setup();
        let probe = extract_probes(&model, &model, 2, &data, &[0, 3, 5], 4, 1).unwrap();
        assert_eq!(probe.len(), 12);
        assert_eq!(probe.y0, probe.ystar);
        assert!(!probe.locations_clamped);
    }

    #[test]
    fn exhaustive_sampling_covers_each_location_once() {
        let (model, data) = setup();
        let probe = extract_probes(&model, &model, 2, &data, &[1, 2], 36, 3).unwrap();
        for n in [1, 2] {
            let seen: BTreeSet<(usize, usize)> = probe
                .locations
                .iter()
                .filter(|l| l.image == n)
                .map(|l| (l.y, l.x))
                .collect();
            assert_eq!(seen.len(), 36);
        }
        assert_eq!(probe.len(), 72);
        let clamped = extract_probes(&model, &model, 2, &data, &[1], 40, 3).unwrap();
        assert!(clamped.locations_clamped);
        assert_eq!(clamped.len(), 36);
    }

    #[test]
    fn contributions_sum_to_direct_convolution() {
        let (orig, data) = setup();
        // A compressed model whose first conv differs, so X != X0.
        let mut comp = orig.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w = &mut comp.params[0].as_mut().unwrap().weight;
        for v in w.data_mut() {
            *v += rand::Rng::random_range(&mut rng, -0.3..0.3);
        }
        let probe = extract_probes(&orig, &comp, 2, &data, &[0, 4], 5, 8).unwrap();
        let w0 = &orig.params[2].as_ref().unwrap().weight;
        for (p, loc) in probe.locations.iter().enumerate() {
            let x = forward_collect(&comp, &data.image(loc.image), &[]).unwrap();
            let input = x.layer_input(2);
            for i in 0..4 {
                // Direct per-location dot product over the padded input.
                let mut direct = 0.0;
                for j in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            let iy = loc.y as isize + a as isize - 1;
                            let ix = loc.x as isize + b as isize - 1;
                            if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                direct += input.data()[(j * 6 + iy as usize) * 6 + ix as usize]
                                    * w0.data()[((i * 3 + j) * 3 + a) * 3 + b];
                            }
                        }
                    }
                }
                let sum: f64 = probe.contributions(p, i).iter().sum();
                assert!((sum - direct).abs() <= 1e-10);
                assert!((probe.ystar[p * 4 + i] - direct).abs() <= 1e-10);
            }
        }
        assert_ne!(probe.y0, probe.ystar);
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(sample_locations(100, 10, 4, 2, 7), sample_locations(100, 10, 4, 2, 7));
        assert_ne!(sample_locations(100, 10, 4, 2, 7), sample_locations(100, 10, 4, 2, 8));
        let s = sample_locations(100, 10, 4, 2, 7);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 10);
        assert_eq!(sample_probe_images(50, 8, 1), sample_probe_images(50, 8, 1));
        assert_eq!(sample_probe_images(5, 8, 1), vec![0, 1, 2, 3, 4]);
    }
}
