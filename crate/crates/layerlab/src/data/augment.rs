//! Training-time augmentation: zero-pad + random crop and horizontal flip.

use serde::{Deserialize, Serialize};

use crate::data::Norm;
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Zero-pad this many pixels on every side before cropping.
    pub pad: usize,
    pub random_crop: bool,
    pub horizontal_flip: bool,
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            pad: 0,
            random_crop: false,
            horizontal_flip: false,
        }
    }

    /// The recipe used for 32x32 color images.
    pub fn pad_crop_flip() -> Self {
        AugmentPolicy {
            pad: 4,
            random_crop: true,
            horizontal_flip: true,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.random_crop || self.horizontal_flip
    }
}

/// Crop one channel plane out of a virtual zero-padded image.
/// `dy`/`dx` index the crop origin inside the padded canvas.
fn crop_plane(
    src: &[f32],
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
    flip: bool,
    fill: f32,
    dst: &mut [f32],
) {
    for oy in 0..h {
        let iy = (oy + dy) as isize - pad as isize;
        for ox in 0..w {
            let sx = if flip { w - 1 - ox } else { ox };
            let ix = (sx + dx) as isize - pad as isize;
            dst[oy * w + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                src[iy as usize * w + ix as usize]
            } else {
                fill
            };
        }
    }
}

/// Augment a batch. Each image draws its own crop offsets and flip bit from
/// the stream (in the order dy, dx, flip), so results are deterministic
/// given the stream state. Padding uses the normalized value of a raw zero
/// pixel. Labels are untouched and dims are preserved.
pub fn augment_batch(batch: &Tensor<f32>, policy: &AugmentPolicy, norm: &Norm, stream: &mut Stream) -> Tensor<f32> {
    if !policy.is_enabled() {
        return batch.clone();
    }
    let (n, c, h, w) = (batch.dims()[0], batch.dims()[1], batch.dims()[2], batch.dims()[3]);
    let mut out = Tensor::zeros(batch.dims());
    let span = 2 * policy.pad + 1;
    for i in 0..n {
        let (dy, dx) = if policy.random_crop && policy.pad > 0 {
            (stream.below(span), stream.below(span))
        } else {
            (policy.pad, policy.pad)
        };
        let flip = policy.horizontal_flip && stream.below(2) == 1;
        for ci in 0..c {
            let base = ((i * c) + ci) * h * w;
            let src = &batch.data()[base..base + h * w];
            // borrow juggling: copy out the slice bounds first
            let fill = norm.zero_value(ci);
            let dst = &mut out.data_mut()[base..base + h * w];
            crop_plane(src, h, w, policy.pad, dy, dx, flip, fill, dst);
        }
    }
    out
}
