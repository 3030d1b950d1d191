use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled images, `images` shaped `[count, channels, height, width]`
/// with pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            num_classes,
            split: split.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rank() != 4 {
            return Err(Error::shape("dataset image rank", 4, self.images.rank()));
        }
        if self.images.dims()[0] != self.labels.len() {
            return Err(Error::shape("dataset label count", self.images.dims()[0], self.labels.len()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]`.
    pub fn image_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    pub fn image(&self, index: usize) -> Tensor {
        self.images.outer(index).expect("index within dataset")
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Result<Self> {
        let per: usize = self.image_dims().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("subset index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut dims = self.images.dims().to_vec();
        dims[0] = indices.len();
        Dataset::new(Tensor::new(dims, data)?, labels, self.num_classes, split)
    }

    /// Mean and standard deviation over every pixel.
    pub fn pixel_stats(&self) -> (f64, f64) {
        let data = self.images.data();
        if data.is_empty() {
            return (0.0, 1.0);
        }
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Copy with every pixel mapped to `(v - mean) / std`.
    pub fn standardized(&self, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!("bad normalisation mean {mean}, std {std}")));
        }
        let mut out = self.clone();
        for v in out.images.data_mut() {
            *v = (*v - mean) / std;
        }
        Ok(out)
    }

    /// First `count` records (or all of them).
    pub fn take(&self, count: usize, split: impl Into<String>) -> Result<Self> {
        let n = count.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>(), split)
    }
}
