//! Dataset ingestion and normalization.
//!
//! Loaders produce raw `[0,1]`-scaled pixel tensors, compute normalization
//! statistics on the training pixels only, and apply the same statistics to
//! the test split. Augmentation operates on normalized tensors with the
//! normalized value of a zero pixel as the pad fill.

pub mod augment;
pub mod cifar;
pub mod mnist;
pub mod synthetic;

pub use augment::AugmentPolicy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// Normalization statistics, computed on train pixels in `[0,1]` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Norm {
    Scalar { mean: f32, std: f32 },
    PerChannel(Vec<(f32, f32)>),
}

impl Norm {
    pub fn compute_scalar(images: &Tensor<f32>) -> Norm {
        let n = images.len() as f64;
        let mut sum = 0.0f64;
        for &v in images.data() {
            sum += v as f64;
        }
        let mean = sum / n;
        let mut var = 0.0f64;
        for &v in images.data() {
            let d = v as f64 - mean;
            var += d * d;
        }
        Norm::Scalar {
            mean: mean as f32,
            std: (var / n).sqrt() as f32,
        }
    }

    pub fn compute_per_channel(images: &Tensor<f32>) -> Norm {
        let c = images.dims()[1];
        let plane = images.dims()[2] * images.dims()[3];
        let per = images.len() / c;
        let mut stats = Vec::with_capacity(c);
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for n in 0..images.dims()[0] {
                let base = ((n * c) + ci) * plane;
                for &v in &images.data()[base..base + plane] {
                    sum += v as f64;
                }
                count += plane;
            }
            debug_assert_eq!(count, per);
            let mean = sum / per as f64;
            let mut var = 0.0f64;
            for n in 0..images.dims()[0] {
                let base = ((n * c) + ci) * plane;
                for &v in &images.data()[base..base + plane] {
                    let d = v as f64 - mean;
                    var += d * d;
                }
            }
            stats.push((mean as f32, (var / per as f64).sqrt() as f32));
        }
        Norm::PerChannel(stats)
    }

    /// (mean, std) for a given channel.
    pub fn for_channel(&self, c: usize) -> (f32, f32) {
        match self {
            Norm::Scalar { mean, std } => (*mean, *std),
            Norm::PerChannel(v) => v[c],
        }
    }

    fn apply(&self, images: &mut Tensor<f32>) {
        let c = images.dims()[1];
        let plane = images.dims()[2] * images.dims()[3];
        let batch = images.dims()[0];
        for n in 0..batch {
            for ci in 0..c {
                let (mean, std) = self.for_channel(ci);
                let base = ((n * c) + ci) * plane;
                for v in &mut images.data_mut()[base..base + plane] {
                    *v = (*v - mean) / std;
                }
            }
        }
    }

    /// Normalized value of a raw zero pixel, per channel. Padding fill.
    pub fn zero_value(&self, c: usize) -> f32 {
        let (mean, std) = self.for_channel(c);
        -mean / std
    }

    /// Normalized bounds of the valid raw pixel range [0, 1], per channel.
    pub fn clip_range(&self, c: usize) -> (f32, f32) {
        let (mean, std) = self.for_channel(c);
        ((0.0 - mean) / std, (1.0 - mean) / std)
    }
}

/// An immutable, normalized image-classification split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub split: Split,
    images: Tensor<f32>,
    labels: Vec<u8>,
    pub num_classes: usize,
    pub norm: Norm,
}

impl Dataset {
    /// Build from `[0,1]`-scaled images. With `norm: None` the statistics
    /// are computed from these images (train split); otherwise the provided
    /// (train) statistics are applied.
    pub fn from_raw(
        id: impl Into<String>,
        split: Split,
        mut images: Tensor<f32>,
        labels: Vec<u8>,
        num_classes: usize,
        norm: Option<Norm>,
        per_channel: bool,
    ) -> Result<Dataset> {
        if images.dims().len() != 4 {
            return Err(Error::InvalidConfig("images must be [N,C,H,W]".into()));
        }
        if images.dims()[0] != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.len()
            )));
        }
        if images.dims()[0] == 0 {
            return Err(Error::EmptyInput("dataset with zero examples".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                num_classes,
            });
        }
        let norm = norm.unwrap_or_else(|| {
            if per_channel {
                Norm::compute_per_channel(&images)
            } else {
                Norm::compute_scalar(&images)
            }
        });
        norm.apply(&mut images);
        Ok(Dataset {
            id: id.into(),
            split,
            images,
            labels,
            num_classes,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> [usize; 3] {
        [self.images.dims()[1], self.images.dims()[2], self.images.dims()[3]]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    /// Gather a batch tensor and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u8>) {
        let [c, h, w] = self.image_dims();
        let img_len = c * h * w;
        let mut out = Tensor::zeros(&[indices.len(), c, h, w]);
        for (row, &i) in indices.iter().enumerate() {
            out.data_mut()[row * img_len..(row + 1) * img_len]
                .copy_from_slice(&self.images.data()[i * img_len..(i + 1) * img_len]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }

    /// A new dataset holding only the selected examples (stats unchanged).
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("empty selection".into()));
        }
        let (images, labels) = self.batch(indices);
        Ok(Dataset {
            id: self.id.clone(),
            split: self.split,
            images,
            labels,
            num_classes: self.num_classes,
            norm: self.norm.clone(),
        })
    }

    /// First `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_images(n: usize) -> (Tensor<f32>, Vec<u8>) {
        let mut data = Vec::with_capacity(n * 4);
        for i in 0..n * 4 {
            data.push((i % 7) as f32 / 7.0);
        }
        (
            Tensor::from_vec(&[n, 1, 2, 2], data).unwrap(),
            (0..n).map(|i| (i % 3) as u8).collect(),
        )
    }

    #[test]
    fn train_normalizes_to_zero_mean_unit_std() {
        let (img, labels) = toy_images(50);
        let ds = Dataset::from_raw("toy", Split::Train, img, labels, 3, None, false).unwrap();
        let n = ds.images.len() as f64;
        let mean: f64 = ds.images.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = ds.images.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn test_split_reuses_train_stats() {
        let (img, labels) = toy_images(50);
        let train = Dataset::from_raw("toy", Split::Train, img, labels, 3, None, false).unwrap();
        let (img2, labels2) = toy_images(10);
        let test = Dataset::from_raw(
            "toy",
            Split::Test,
            img2,
            labels2,
            3,
            Some(train.norm.clone()),
            false,
        )
        .unwrap();
        assert_eq!(train.norm, test.norm);
    }

    #[test]
    fn label_range_checked() {
        let (img, mut labels) = toy_images(5);
        labels[2] = 9;
        assert!(Dataset::from_raw("toy", Split::Train, img, labels, 3, None, false).is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let (img, labels) = toy_images(6);
        let ds = Dataset::from_raw("toy", Split::Train, img, labels, 3, None, false).unwrap();
        let (b, y) = ds.batch(&[4, 1]);
        assert_eq!(b.dims(), &[2, 1, 2, 2]);
        assert_eq!(y, vec![ds.labels[4], ds.labels[1]]);
        assert_eq!(b.data()[..4], ds.images.data()[16..20]);
    }
}
