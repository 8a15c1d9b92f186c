//! Forward and backward passes for the closed layer set.
//!
//! The layer set is fixed (dense, conv2d, relu, max-pool, global avg-pool,
//! batch norm, flatten, residual blocks), so there is no generic autodiff:
//! each kind has a hand-written backward, checked against central finite
//! differences in the test suite via the `f64` instantiation.
//!
//! All reductions run in a fixed order; given equal inputs, outputs are
//! bitwise identical run to run.

use crate::arch::{ArchSpec, LayerKind, LayerSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gemm::{matmul, matmul_at_acc, matmul_bt, matmul_bt_acc};
use crate::params::{LayerParams, ParamSet};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// primitive ops
// ---------------------------------------------------------------------------

fn dense_fwd<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (batch, in_f) = (x.dims()[0], x.dims()[1]);
    let out_f = w.dims()[0];
    let mut y = Tensor::zeros(&[batch, out_f]);
    matmul_bt(batch, in_f, out_f, x.data(), w.data(), y.data_mut());
    for r in 0..batch {
        let row = &mut y.data_mut()[r * out_f..(r + 1) * out_f];
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v = *v + *bias;
        }
    }
    y
}

/// Returns (dx, dw, db); dw/db accumulate into the provided buffers.
fn dense_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    dw: &mut Tensor<E>,
    db: &mut Tensor<E>,
) -> Tensor<E> {
    let (batch, in_f) = (x.dims()[0], x.dims()[1]);
    let out_f = w.dims()[0];
    let mut dx = Tensor::zeros(&[batch, in_f]);
    matmul(batch, out_f, in_f, dy.data(), w.data(), dx.data_mut());
    matmul_at_acc(out_f, batch, in_f, dy.data(), x.data(), dw.data_mut());
    for r in 0..batch {
        let row = &dy.data()[r * out_f..(r + 1) * out_f];
        for (acc, v) in db.data_mut().iter_mut().zip(row) {
            *acc = *acc + *v;
        }
    }
    dx
}

fn relu_fwd<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v > E::zero() { v } else { E::zero() })
}

/// Backward through ReLU using the forward output as the mask.
fn relu_bwd_from_out<E: Element>(out: &Tensor<E>, dy: &Tensor<E>) -> Tensor<E> {
    let data = out
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > E::zero() { g } else { E::zero() })
        .collect();
    Tensor::from_vec(out.dims(), data).expect("same dims")
}

struct ConvGeom {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &Tensor<impl Element>, w: &[usize], stride: usize, padding: usize) -> ConvGeom {
        let (h, wd) = (x.dims()[2], x.dims()[3]);
        let kernel = w[2];
        ConvGeom {
            in_ch: w[1],
            out_ch: w[0],
            kernel,
            stride,
            padding,
            h,
            w: wd,
            oh: (h + 2 * padding - kernel) / stride + 1,
            ow: (wd + 2 * padding - kernel) / stride + 1,
        }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn npix(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one image [c,h,w] into a [c*k*k, oh*ow] patch matrix.
fn im2col<E: Element>(img: &[E], g: &ConvGeom, cols: &mut [E]) {
    for v in cols.iter_mut() {
        *v = E::zero();
    }
    for ci in 0..g.in_ch {
        let chan = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((ci * g.kernel + ky) * g.kernel + kx) * g.npix();
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch matrix back onto an image.
fn col2im_add<E: Element>(cols: &[E], g: &ConvGeom, img: &mut [E]) {
    for ci in 0..g.in_ch {
        let chan = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = ((ci * g.kernel + ky) * g.kernel + kx) * g.npix();
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst_row = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Tensor<E> {
    let g = ConvGeom::new(x, w.dims(), stride, padding);
    let batch = x.dims()[0];
    let mut y = Tensor::zeros(&[batch, g.out_ch, g.oh, g.ow]);
    let mut cols = vec![E::zero(); g.col_rows() * g.npix()];
    let img_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * g.npix();
    for n in 0..batch {
        im2col(&x.data()[n * img_len..(n + 1) * img_len], &g, &mut cols);
        let out = &mut y.data_mut()[n * out_len..(n + 1) * out_len];
        matmul(g.out_ch, g.col_rows(), g.npix(), w.data(), &cols, out);
        for co in 0..g.out_ch {
            let bias = b.data()[co];
            for v in &mut out[co * g.npix()..(co + 1) * g.npix()] {
                *v = *v + bias;
            }
        }
    }
    y
}

fn conv_bwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &Tensor<E>,
    stride: usize,
    padding: usize,
    dw: &mut Tensor<E>,
    db: &mut Tensor<E>,
) -> Tensor<E> {
    let g = ConvGeom::new(x, w.dims(), stride, padding);
    let batch = x.dims()[0];
    let mut dx = Tensor::zeros(x.dims());
    let mut cols = vec![E::zero(); g.col_rows() * g.npix()];
    let mut dcols = vec![E::zero(); g.col_rows() * g.npix()];
    let img_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * g.npix();
    for n in 0..batch {
        let dy_n = &dy.data()[n * out_len..(n + 1) * out_len];
        im2col(&x.data()[n * img_len..(n + 1) * img_len], &g, &mut cols);
        // dW[o,r] += dY[o,p] * cols[r,p]
        matmul_bt_acc(g.out_ch, g.npix(), g.col_rows(), dy_n, &cols, dw.data_mut());
        // dcols[r,p] = W[o,r]^T dY[o,p]
        matmul_at_acc_zeroed(g.col_rows(), g.out_ch, g.npix(), w.data(), dy_n, &mut dcols);
        col2im_add(&dcols, &g, &mut dx.data_mut()[n * img_len..(n + 1) * img_len]);
        for co in 0..g.out_ch {
            let mut acc = E::zero();
            for &v in &dy_n[co * g.npix()..(co + 1) * g.npix()] {
                acc = acc + v;
            }
            db.data_mut()[co] = db.data_mut()[co] + acc;
        }
    }
    dx
}

fn matmul_at_acc_zeroed<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    for v in c.iter_mut() {
        *v = E::zero();
    }
    matmul_at_acc(m, k, n, a, b, c);
}

fn maxpool_fwd<E: Element>(x: &Tensor<E>, kernel: usize, stride: usize) -> (Tensor<E>, Vec<usize>) {
    let (batch, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut y = Tensor::zeros(&[batch, c, oh, ow]);
    let mut argmax = vec![0usize; batch * c * oh * ow];
    let mut oi = 0;
    for n in 0..batch {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = E::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let idx = x.idx4(n, ci, iy, ix);
                            let v = x.data()[idx];
                            // strict comparison keeps the first (lowest index) max
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    y.data_mut()[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    (y, argmax)
}

fn maxpool_bwd<E: Element>(in_dims: &[usize], argmax: &[usize], dy: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(in_dims);
    for (&src, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[src] = dx.data_mut()[src] + g;
    }
    dx
}

fn gap_fwd<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (batch, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let inv = E::from_f64(1.0 / (h * w) as f64);
    let mut y = Tensor::zeros(&[batch, c]);
    for n in 0..batch {
        for ci in 0..c {
            let base = x.idx4(n, ci, 0, 0);
            let mut acc = E::zero();
            for &v in &x.data()[base..base + h * w] {
                acc = acc + v;
            }
            y.data_mut()[n * c + ci] = acc * inv;
        }
    }
    y
}

fn gap_bwd<E: Element>(in_dims: &[usize], dy: &Tensor<E>) -> Tensor<E> {
    let (c, h, w) = (in_dims[1], in_dims[2], in_dims[3]);
    let inv = E::from_f64(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(in_dims);
    for n in 0..in_dims[0] {
        for ci in 0..c {
            let g = dy.data()[n * c + ci] * inv;
            let base = ((n * c) + ci) * h * w;
            for v in &mut dx.data_mut()[base..base + h * w] {
                *v = g;
            }
        }
    }
    dx
}

pub(crate) struct BnCache<E: Element> {
    xhat: Tensor<E>,
    inv_std: Vec<E>,
    mode: Mode,
    /// elements per channel in the reduction
    n: usize,
}

/// Channel-major iteration helper: yields (channel, flat index) pairs.
fn bn_channel_of(dims: &[usize], idx: usize) -> usize {
    if dims.len() == 4 {
        (idx / (dims[2] * dims[3])) % dims[1]
    } else {
        idx % dims[1]
    }
}

fn bn_fwd<E: Element>(
    x: &Tensor<E>,
    lp: &mut LayerParams<E>,
    prefix: &str,
    mode: Mode,
) -> (Tensor<E>, BnCache<E>) {
    let dims = x.dims().to_vec();
    let channels = dims[1];
    let n = x.len() / channels;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![E::zero(); channels];
            let mut var = vec![E::zero(); channels];
            for (i, &v) in x.data().iter().enumerate() {
                mean[bn_channel_of(&dims, i)] = mean[bn_channel_of(&dims, i)] + v;
            }
            let inv_n = E::from_f64(1.0 / n as f64);
            for m in mean.iter_mut() {
                *m = *m * inv_n;
            }
            for (i, &v) in x.data().iter().enumerate() {
                let c = bn_channel_of(&dims, i);
                let d = v - mean[c];
                var[c] = var[c] + d * d;
            }
            for v in var.iter_mut() {
                *v = *v * inv_n;
            }
            // update running stats
            let mom = E::from_f64(BN_MOMENTUM);
            let keep = E::one() - mom;
            {
                let rm = lp
                    .tensor_mut(&format!("{}running_mean", prefix))
                    .expect("bn tensors present");
                for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = *r * keep + *m * mom;
                }
            }
            {
                let rv = lp
                    .tensor_mut(&format!("{}running_var", prefix))
                    .expect("bn tensors present");
                for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = *r * keep + *v * mom;
                }
            }
            (mean, var)
        }
        Mode::Eval => {
            let rm = lp.tensor(&format!("{}running_mean", prefix)).expect("bn");
            let rv = lp.tensor(&format!("{}running_var", prefix)).expect("bn");
            (rm.data().to_vec(), rv.data().to_vec())
        }
    };
    let eps = E::from_f64(BN_EPS);
    let inv_std: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let gamma = lp.tensor(&format!("{}gamma", prefix)).expect("bn").data().to_vec();
    let beta = lp.tensor(&format!("{}beta", prefix)).expect("bn").data().to_vec();
    let mut xhat = Tensor::zeros(&dims);
    let mut y = Tensor::zeros(&dims);
    for (i, &v) in x.data().iter().enumerate() {
        let c = bn_channel_of(&dims, i);
        let xh = (v - mean[c]) * inv_std[c];
        xhat.data_mut()[i] = xh;
        y.data_mut()[i] = gamma[c] * xh + beta[c];
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mode,
            n,
        },
    )
}

fn bn_bwd<E: Element>(
    cache: &BnCache<E>,
    lp: &LayerParams<E>,
    prefix: &str,
    dy: &Tensor<E>,
    dgamma: &mut Tensor<E>,
    dbeta: &mut Tensor<E>,
) -> Tensor<E> {
    let dims = cache.xhat.dims().to_vec();
    let channels = dims[1];
    let gamma = lp.tensor(&format!("{}gamma", prefix)).expect("bn").data();
    let mut sum_dy = vec![E::zero(); channels];
    let mut sum_dy_xhat = vec![E::zero(); channels];
    for (i, &g) in dy.data().iter().enumerate() {
        let c = bn_channel_of(&dims, i);
        sum_dy[c] = sum_dy[c] + g;
        sum_dy_xhat[c] = sum_dy_xhat[c] + g * cache.xhat.data()[i];
    }
    for c in 0..channels {
        dbeta.data_mut()[c] = dbeta.data_mut()[c] + sum_dy[c];
        dgamma.data_mut()[c] = dgamma.data_mut()[c] + sum_dy_xhat[c];
    }
    let mut dx = Tensor::zeros(&dims);
    match cache.mode {
        Mode::Train => {
            let inv_n = E::from_f64(1.0 / cache.n as f64);
            for (i, &g) in dy.data().iter().enumerate() {
                let c = bn_channel_of(&dims, i);
                let term = g - sum_dy[c] * inv_n - cache.xhat.data()[i] * sum_dy_xhat[c] * inv_n;
                dx.data_mut()[i] = gamma[c] * cache.inv_std[c] * term;
            }
        }
        Mode::Eval => {
            for (i, &g) in dy.data().iter().enumerate() {
                let c = bn_channel_of(&dims, i);
                dx.data_mut()[i] = gamma[c] * cache.inv_std[c] * g;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// residual blocks
// ---------------------------------------------------------------------------

struct ResStructure {
    bottleneck: bool,
    batchnorm: bool,
    /// stride of the spatial-reducing conv (1 for identity blocks)
    stride: usize,
    /// projection skip present (downsample blocks)
    proj: bool,
}

impl ResStructure {
    fn of(kind: &LayerKind) -> Option<ResStructure> {
        match *kind {
            LayerKind::ResBlockIdentity {
                bottleneck,
                batchnorm,
                ..
            } => Some(ResStructure {
                bottleneck,
                batchnorm,
                stride: 1,
                proj: false,
            }),
            LayerKind::ResBlockDownsample {
                stride,
                bottleneck,
                batchnorm,
                ..
            } => Some(ResStructure {
                bottleneck,
                batchnorm,
                stride,
                proj: true,
            }),
            _ => None,
        }
    }
}

pub(crate) struct ResCache<E: Element> {
    bn1: Option<BnCache<E>>,
    /// post first ReLU; input to conv1 and the projection
    h: Tensor<E>,
    bn2: Option<BnCache<E>>,
    /// post second ReLU; input to conv2
    z2: Tensor<E>,
    bn3: Option<BnCache<E>>,
    /// post third ReLU (bottleneck only); input to conv3
    z3: Option<Tensor<E>>,
}

fn resblock_fwd<E: Element>(
    kind: &LayerKind,
    lp: &mut LayerParams<E>,
    x: &Tensor<E>,
    mode: Mode,
) -> (Tensor<E>, ResCache<E>) {
    let s = ResStructure::of(kind).expect("residual kind");
    let (bn1, pre) = if s.batchnorm {
        let (y, c) = bn_fwd(x, lp, "bn1.", mode);
        (Some(c), y)
    } else {
        (None, x.clone())
    };
    let h = relu_fwd(&pre);

    let w1 = lp.tensor("conv1.weight").expect("conv1").clone();
    let b1 = lp.tensor("conv1.bias").expect("conv1").clone();
    // basic blocks downsample in conv1; bottlenecks in conv2
    let conv1_stride = if s.bottleneck { 1 } else { s.stride };
    let a1 = conv_fwd(&h, &w1, &b1, conv1_stride, if w1.dims()[2] == 1 { 0 } else { 1 });

    let (bn2, pre2) = if s.batchnorm {
        let (y, c) = bn_fwd(&a1, lp, "bn2.", mode);
        (Some(c), y)
    } else {
        (None, a1)
    };
    let z2 = relu_fwd(&pre2);

    let w2 = lp.tensor("conv2.weight").expect("conv2").clone();
    let b2 = lp.tensor("conv2.bias").expect("conv2").clone();
    let conv2_stride = if s.bottleneck { s.stride } else { 1 };
    let a2 = conv_fwd(&z2, &w2, &b2, conv2_stride, 1);

    let (bn3, z3, body) = if s.bottleneck {
        let (bn3, pre3) = if s.batchnorm {
            let (y, c) = bn_fwd(&a2, lp, "bn3.", mode);
            (Some(c), y)
        } else {
            (None, a2)
        };
        let z3 = relu_fwd(&pre3);
        let w3 = lp.tensor("conv3.weight").expect("conv3").clone();
        let b3 = lp.tensor("conv3.bias").expect("conv3").clone();
        let body = conv_fwd(&z3, &w3, &b3, 1, 0);
        (bn3, Some(z3), body)
    } else {
        (None, None, a2)
    };

    let skip = if s.proj {
        let wp = lp.tensor("proj.weight").expect("proj").clone();
        let bp = lp.tensor("proj.bias").expect("proj").clone();
        conv_fwd(&h, &wp, &bp, s.stride, 0)
    } else {
        x.clone()
    };

    let mut y = skip;
    for (o, &b) in y.data_mut().iter_mut().zip(body.data()) {
        *o = *o + b;
    }
    (
        y,
        ResCache {
            bn1,
            h,
            bn2,
            z2,
            bn3,
            z3,
        },
    )
}

fn resblock_bwd<E: Element>(
    kind: &LayerKind,
    lp: &LayerParams<E>,
    cache: &ResCache<E>,
    dy: &Tensor<E>,
    grads: &mut LayerParams<E>,
) -> Tensor<E> {
    let s = ResStructure::of(kind).expect("residual kind");
    let w1 = lp.tensor("conv1.weight").expect("conv1");
    let w2 = lp.tensor("conv2.weight").expect("conv2");
    let conv1_stride = if s.bottleneck { 1 } else { s.stride };
    let conv2_stride = if s.bottleneck { s.stride } else { 1 };

    // back through the residual body
    let d_a2 = if s.bottleneck {
        let z3 = cache.z3.as_ref().expect("bottleneck cache");
        let w3 = lp.tensor("conv3.weight").expect("conv3");
        let (mut dw3, mut db3) = (Tensor::zeros(w3.dims()), Tensor::zeros(&[w3.dims()[0]]));
        let dz3 = conv_bwd(z3, w3, dy, 1, 0, &mut dw3, &mut db3);
        *grads.tensor_mut("conv3.weight").unwrap() = dw3;
        *grads.tensor_mut("conv3.bias").unwrap() = db3;
        let dpre3 = relu_bwd_from_out(z3, &dz3);
        if let Some(bn3) = &cache.bn3 {
            let mut dg = std::mem::take(grads.tensor_mut("bn3.gamma").unwrap());
            let mut db = std::mem::take(grads.tensor_mut("bn3.beta").unwrap());
            let dx = bn_bwd(bn3, lp, "bn3.", &dpre3, &mut dg, &mut db);
            *grads.tensor_mut("bn3.gamma").unwrap() = dg;
            *grads.tensor_mut("bn3.beta").unwrap() = db;
            dx
        } else {
            dpre3
        }
    } else {
        dy.clone()
    };

    let (mut dw2, mut db2) = (Tensor::zeros(w2.dims()), Tensor::zeros(&[w2.dims()[0]]));
    let dz2 = conv_bwd(&cache.z2, w2, &d_a2, conv2_stride, 1, &mut dw2, &mut db2);
    *grads.tensor_mut("conv2.weight").unwrap() = dw2;
    *grads.tensor_mut("conv2.bias").unwrap() = db2;
    let dpre2 = relu_bwd_from_out(&cache.z2, &dz2);
    let d_a1 = if let Some(bn2) = &cache.bn2 {
        let mut dg = std::mem::take(grads.tensor_mut("bn2.gamma").unwrap());
        let mut db = std::mem::take(grads.tensor_mut("bn2.beta").unwrap());
        let dx = bn_bwd(bn2, lp, "bn2.", &dpre2, &mut dg, &mut db);
        *grads.tensor_mut("bn2.gamma").unwrap() = dg;
        *grads.tensor_mut("bn2.beta").unwrap() = db;
        dx
    } else {
        dpre2
    };

    let (mut dw1, mut db1) = (Tensor::zeros(w1.dims()), Tensor::zeros(&[w1.dims()[0]]));
    let mut dh = conv_bwd(
        &cache.h,
        w1,
        &d_a1,
        conv1_stride,
        if w1.dims()[2] == 1 { 0 } else { 1 },
        &mut dw1,
        &mut db1,
    );
    *grads.tensor_mut("conv1.weight").unwrap() = dw1;
    *grads.tensor_mut("conv1.bias").unwrap() = db1;

    // skip path
    if s.proj {
        let wp = lp.tensor("proj.weight").expect("proj");
        let (mut dwp, mut dbp) = (Tensor::zeros(wp.dims()), Tensor::zeros(&[wp.dims()[0]]));
        let dh_proj = conv_bwd(&cache.h, wp, dy, s.stride, 0, &mut dwp, &mut dbp);
        *grads.tensor_mut("proj.weight").unwrap() = dwp;
        *grads.tensor_mut("proj.bias").unwrap() = dbp;
        for (a, b) in dh.data_mut().iter_mut().zip(dh_proj.data()) {
            *a = *a + *b;
        }
    }

    let dpre = relu_bwd_from_out(&cache.h, &dh);
    let mut dx = if let Some(bn1) = &cache.bn1 {
        let mut dg = std::mem::take(grads.tensor_mut("bn1.gamma").unwrap());
        let mut db = std::mem::take(grads.tensor_mut("bn1.beta").unwrap());
        let dxx = bn_bwd(bn1, lp, "bn1.", &dpre, &mut dg, &mut db);
        *grads.tensor_mut("bn1.gamma").unwrap() = dg;
        *grads.tensor_mut("bn1.beta").unwrap() = db;
        dxx
    } else {
        dpre
    };

    if !s.proj {
        // identity skip passes the gradient straight through
        for (a, b) in dx.data_mut().iter_mut().zip(dy.data()) {
            *a = *a + *b;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// whole-network passes
// ---------------------------------------------------------------------------

pub(crate) enum LayerCache<E: Element> {
    Flatten { in_dims: Vec<usize> },
    Relu { out: Tensor<E> },
    Dense { input: Tensor<E> },
    Conv { input: Tensor<E> },
    MaxPool { in_dims: Vec<usize>, argmax: Vec<usize> },
    Gap { in_dims: Vec<usize> },
    Bn(BnCache<E>),
    Res(ResCache<E>),
}

pub struct ForwardPass<E: Element> {
    pub logits: Tensor<E>,
    caches: Vec<LayerCache<E>>,
}

fn check_input<E: Element>(arch: &ArchSpec, x: &Tensor<E>) -> Result<()> {
    let d = x.dims();
    if d.len() != 4 || d[1] != arch.input[0] || d[2] != arch.input[1] || d[3] != arch.input[2] {
        return Err(Error::ShapeMismatch {
            layer: "<input>".into(),
            detail: format!(
                "expected [batch, {}, {}, {}], got {:?}",
                arch.input[0], arch.input[1], arch.input[2], d
            ),
        });
    }
    if d[0] == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    Ok(())
}

fn layer_fwd<E: Element>(
    l: &LayerSpec,
    params: &mut ParamSet<E>,
    x: Tensor<E>,
    mode: Mode,
) -> Result<(Tensor<E>, LayerCache<E>)> {
    let shape_err = |detail: String| Error::ShapeMismatch {
        layer: l.name.clone(),
        detail,
    };
    Ok(match &l.kind {
        LayerKind::Flatten => {
            let in_dims = x.dims().to_vec();
            let n: usize = in_dims[1..].iter().product();
            let y = x.reshaped(&[in_dims[0], n]).map_err(|e| shape_err(e.to_string()))?;
            (y, LayerCache::Flatten { in_dims })
        }
        LayerKind::Relu => {
            let y = relu_fwd(&x);
            (y.clone(), LayerCache::Relu { out: y })
        }
        LayerKind::Dense { in_features, .. } => {
            if x.dims().len() != 2 || x.dims()[1] != *in_features {
                return Err(shape_err(format!(
                    "expected [batch, {}], got {:?}",
                    in_features,
                    x.dims()
                )));
            }
            let lp = params.layer(&l.name)?;
            let y = dense_fwd(&x, lp.tensor("weight").unwrap(), lp.tensor("bias").unwrap());
            (y, LayerCache::Dense { input: x })
        }
        LayerKind::Conv2d {
            in_ch,
            stride,
            padding,
            ..
        } => {
            if x.dims().len() != 4 || x.dims()[1] != *in_ch {
                return Err(shape_err(format!("expected {} channels, got {:?}", in_ch, x.dims())));
            }
            let lp = params.layer(&l.name)?;
            let y = conv_fwd(
                &x,
                lp.tensor("weight").unwrap(),
                lp.tensor("bias").unwrap(),
                *stride,
                *padding,
            );
            (y, LayerCache::Conv { input: x })
        }
        LayerKind::MaxPool { kernel, stride } => {
            if x.dims().len() != 4 {
                return Err(shape_err(format!("expected rank-4 input, got {:?}", x.dims())));
            }
            let (y, argmax) = maxpool_fwd(&x, *kernel, *stride);
            (
                y,
                LayerCache::MaxPool {
                    in_dims: x.dims().to_vec(),
                    argmax,
                },
            )
        }
        LayerKind::GlobalAvgPool => {
            if x.dims().len() != 4 {
                return Err(shape_err(format!("expected rank-4 input, got {:?}", x.dims())));
            }
            let y = gap_fwd(&x);
            (
                y,
                LayerCache::Gap {
                    in_dims: x.dims().to_vec(),
                },
            )
        }
        LayerKind::BatchNorm { features } => {
            if x.dims()[1] != *features {
                return Err(shape_err(format!(
                    "normalizes {} features, got {:?}",
                    features,
                    x.dims()
                )));
            }
            let lp = params.layer_mut(&l.name)?;
            let (y, cache) = bn_fwd(&x, lp, "", mode);
            (y, LayerCache::Bn(cache))
        }
        LayerKind::ResBlockIdentity { channels, .. } => {
            if x.dims().len() != 4 || x.dims()[1] != *channels {
                return Err(shape_err(format!("expected {} channels, got {:?}", channels, x.dims())));
            }
            let lp = params.layer_mut(&l.name)?;
            let (y, cache) = resblock_fwd(&l.kind, lp, &x, mode);
            (y, LayerCache::Res(cache))
        }
        LayerKind::ResBlockDownsample { in_ch, .. } => {
            if x.dims().len() != 4 || x.dims()[1] != *in_ch {
                return Err(shape_err(format!("expected {} channels, got {:?}", in_ch, x.dims())));
            }
            let lp = params.layer_mut(&l.name)?;
            let (y, cache) = resblock_fwd(&l.kind, lp, &x, mode);
            (y, LayerCache::Res(cache))
        }
    })
}

/// Eval-mode forward pass without gradient bookkeeping. Eval mode never
/// writes to the parameters, so this works on a scratch copy.
pub fn forward<E: Element>(arch: &ArchSpec, params: &ParamSet<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut scratch = params.clone();
    Ok(forward_cached(arch, &mut scratch, x, Mode::Eval)?.logits)
}

/// Forward pass that records per-layer caches for [`backward`]. In train
/// mode, batch-norm layers update their running statistics inside `params`.
pub fn forward_cached<E: Element>(
    arch: &ArchSpec,
    params: &mut ParamSet<E>,
    x: &Tensor<E>,
    mode: Mode,
) -> Result<ForwardPass<E>> {
    check_input(arch, x)?;
    let mut caches = Vec::with_capacity(arch.layers.len());
    let mut cur = x.clone();
    for l in &arch.layers {
        let (y, cache) = layer_fwd(l, params, cur, mode)?;
        caches.push(cache);
        cur = y;
    }
    Ok(ForwardPass { logits: cur, caches })
}

/// Back-propagate `dlogits` through the recorded pass. Returns the gradient
/// set (same structure as the learnable parameters) and the input gradient.
pub fn backward<E: Element>(
    arch: &ArchSpec,
    params: &ParamSet<E>,
    pass: &ForwardPass<E>,
    dlogits: &Tensor<E>,
) -> Result<(ParamSet<E>, Tensor<E>)> {
    let mut grads = zero_grads(arch);
    let mut d = dlogits.clone();
    for (l, cache) in arch.layers.iter().zip(pass.caches.iter()).rev() {
        d = match (&l.kind, cache) {
            (LayerKind::Flatten, LayerCache::Flatten { in_dims }) => d.reshaped(in_dims)?,
            (LayerKind::Relu, LayerCache::Relu { out }) => relu_bwd_from_out(out, &d),
            (LayerKind::Dense { .. }, LayerCache::Dense { input }) => {
                let lp = params.layer(&l.name)?;
                let g = grads.layer_mut(&l.name)?;
                let mut dw = std::mem::take(g.tensor_mut("weight").unwrap());
                let mut db = std::mem::take(g.tensor_mut("bias").unwrap());
                let dx = dense_bwd(input, lp.tensor("weight").unwrap(), &d, &mut dw, &mut db);
                *g.tensor_mut("weight").unwrap() = dw;
                *g.tensor_mut("bias").unwrap() = db;
                dx
            }
            (
                LayerKind::Conv2d {
                    stride, padding, ..
                },
                LayerCache::Conv { input },
            ) => {
                let lp = params.layer(&l.name)?;
                let g = grads.layer_mut(&l.name)?;
                let mut dw = std::mem::take(g.tensor_mut("weight").unwrap());
                let mut db = std::mem::take(g.tensor_mut("bias").unwrap());
                let dx = conv_bwd(
                    input,
                    lp.tensor("weight").unwrap(),
                    &d,
                    *stride,
                    *padding,
                    &mut dw,
                    &mut db,
                );
                *g.tensor_mut("weight").unwrap() = dw;
                *g.tensor_mut("bias").unwrap() = db;
                dx
            }
            (LayerKind::MaxPool { .. }, LayerCache::MaxPool { in_dims, argmax }) => {
                maxpool_bwd(in_dims, argmax, &d)
            }
            (LayerKind::GlobalAvgPool, LayerCache::Gap { in_dims }) => gap_bwd(in_dims, &d),
            (LayerKind::BatchNorm { .. }, LayerCache::Bn(cache)) => {
                let lp = params.layer(&l.name)?;
                let g = grads.layer_mut(&l.name)?;
                let mut dg = std::mem::take(g.tensor_mut("gamma").unwrap());
                let mut db = std::mem::take(g.tensor_mut("beta").unwrap());
                let dx = bn_bwd(cache, lp, "", &d, &mut dg, &mut db);
                *g.tensor_mut("gamma").unwrap() = dg;
                *g.tensor_mut("beta").unwrap() = db;
                dx
            }
            (
                LayerKind::ResBlockIdentity { .. } | LayerKind::ResBlockDownsample { .. },
                LayerCache::Res(cache),
            ) => {
                let lp = params.layer(&l.name)?;
                let g = grads.layer_mut(&l.name)?;
                resblock_bwd(&l.kind, lp, cache, &d, g)
            }
            _ => unreachable!("cache kind matches layer kind"),
        };
    }
    Ok((grads, d))
}

/// A gradient holder with the same tensor layout as the learnable params
/// (running statistics get zero tensors that stay zero).
pub fn zero_grads<E: Element>(arch: &ArchSpec) -> ParamSet<E> {
    crate::params::zeros_like(arch)
}

// ---------------------------------------------------------------------------
// loss and error
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_xent<E: Element>(logits: &Tensor<E>, labels: &[u8], num_classes: usize) -> Result<(E, Tensor<E>)> {
    let batch = logits.dims()[0];
    let k = logits.dims()[1];
    if batch == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    if k != num_classes {
        return Err(Error::ShapeMismatch {
            layer: "<loss>".into(),
            detail: format!("logits have {} classes, expected {}", k, num_classes),
        });
    }
    for &l in labels {
        if (l as usize) >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l as u32,
                num_classes,
            });
        }
    }
    let mut dlogits = Tensor::zeros(logits.dims());
    let inv_b = E::from_f64(1.0 / batch as f64);
    let mut loss = E::zero();
    for r in 0..batch {
        let row = logits.row(r);
        let mut maxv = row[0];
        for &v in row {
            if v > maxv {
                maxv = v;
            }
        }
        let mut sum = E::zero();
        for &v in row {
            sum = sum + (v - maxv).exp();
        }
        let log_z = sum.ln() + maxv;
        let y = labels[r] as usize;
        loss = loss + (log_z - row[y]);
        let drow = &mut dlogits.data_mut()[r * k..(r + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let t = if j == y { E::one() } else { E::zero() };
            drow[j] = (p - t) * inv_b;
        }
    }
    Ok((loss * inv_b, dlogits))
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row<E: Element>(row: &[E]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of examples whose argmax prediction differs from the label.
pub fn eval_error(arch: &ArchSpec, params: &ParamSet<f32>, ds: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    eval_error_subset(arch, params, ds, &idx)
}

/// `eval_error` over an explicit index subset.
pub fn eval_error_subset(
    arch: &ArchSpec,
    params: &ParamSet<f32>,
    ds: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyInput("empty evaluation set".into()));
    }
    let mut wrong = 0usize;
    let mut scratch = params.clone();
    for chunk in indices.chunks(256) {
        let (x, y) = ds.batch(chunk);
        let logits = forward_cached(arch, &mut scratch, &x, Mode::Eval)?.logits;
        let k = logits.dims()[1];
        for (r, &label) in y.iter().enumerate() {
            if argmax_row(&logits.data()[r * k..(r + 1) * k]) != label as usize {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / indices.len() as f64)
}

/// Loss and gradient w.r.t. the input batch, in eval mode (running batch-norm
/// statistics, no mutation). Used by the adversarial attacks.
pub fn input_gradient(
    arch: &ArchSpec,
    params: &ParamSet<f32>,
    x: &Tensor<f32>,
    labels: &[u8],
) -> Result<(f32, Tensor<f32>)> {
    let mut scratch = params.clone();
    let pass = forward_cached(arch, &mut scratch, x, Mode::Eval)?;
    let (loss, dlogits) = softmax_xent(&pass.logits, labels, arch.num_classes)?;
    let (_, dx) = backward(arch, params, &pass, &dlogits)?;
    Ok((loss, dx))
}
