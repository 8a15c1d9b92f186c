//! Analytic gradients vs central finite differences, for every layer kind,
//! on small random instances in the 64-bit reference path.

mod common;

use common::{check_gradients, rand_batch, rand_labels};
use layerlab::arch::{presets, ArchSpec, InitFamily, LayerKind, LayerSpec};
use layerlab::nn::Mode;
use layerlab::params::{init_params, ParamSet};

const TOL: f64 = 1e-4;

fn assert_grads(arch: &ArchSpec, seed: u64, mode: Mode, check_input: bool) {
    assert!(arch.total_params() <= 1000, "keep oracle instances small");
    let params: ParamSet<f64> = init_params(arch, seed);
    let x = rand_batch(
        &[2, arch.input[0], arch.input[1], arch.input[2]],
        seed ^ 0xabcd,
    );
    let labels = rand_labels(2, arch.num_classes, seed ^ 0x77);
    let report = check_gradients(arch, &params, &x, &labels, mode, check_input);
    assert!(
        report.max_rel <= TOL,
        "{}: max rel err {:.3e} over {} grads at {}",
        arch.name,
        report.max_rel,
        report.checked,
        report.worst
    );
}

#[test]
fn dense_relu_flatten() {
    let arch = presets::fcn(2, 9, [1, 3, 3], 4);
    assert_grads(&arch, 1, Mode::Eval, true);
}

#[test]
fn conv_stride_one_and_two() {
    let arch = ArchSpec {
        name: "convnet".into(),
        input: [2, 6, 6],
        num_classes: 3,
        layers: vec![
            LayerSpec::new(
                "conv1",
                LayerKind::Conv2d {
                    in_ch: 2,
                    out_ch: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                InitFamily::UniformHe,
            ),
            LayerSpec::new("relu1", LayerKind::Relu, InitFamily::Constant(0.0)),
            LayerSpec::new(
                "conv2",
                LayerKind::Conv2d {
                    in_ch: 3,
                    out_ch: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                InitFamily::UniformHe,
            ),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool, InitFamily::Constant(0.0)),
            LayerSpec::new(
                "final_linear",
                LayerKind::Dense {
                    in_features: 4,
                    out_features: 3,
                },
                InitFamily::UniformGlorot,
            ),
        ],
        stages: vec![],
        identity_skips_only: false,
    };
    arch.validate().unwrap();
    assert_grads(&arch, 2, Mode::Eval, true);
}

#[test]
fn maxpool_path() {
    let arch = ArchSpec {
        name: "poolnet".into(),
        input: [1, 6, 6],
        num_classes: 3,
        layers: vec![
            LayerSpec::new(
                "conv1",
                LayerKind::Conv2d {
                    in_ch: 1,
                    out_ch: 3,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                InitFamily::UniformHe,
            ),
            LayerSpec::new("relu1", LayerKind::Relu, InitFamily::Constant(0.0)),
            LayerSpec::new("pool", LayerKind::MaxPool { kernel: 2, stride: 2 }, InitFamily::Constant(0.0)),
            LayerSpec::new("flatten", LayerKind::Flatten, InitFamily::Constant(0.0)),
            LayerSpec::new(
                "final_linear",
                LayerKind::Dense {
                    in_features: 27,
                    out_features: 3,
                },
                InitFamily::UniformGlorot,
            ),
        ],
        stages: vec![],
        identity_skips_only: false,
    };
    arch.validate().unwrap();
    assert_grads(&arch, 3, Mode::Eval, true);
}

#[test]
fn batchnorm_conv_train_and_eval() {
    let arch = ArchSpec {
        name: "bn-conv".into(),
        input: [2, 4, 4],
        num_classes: 3,
        layers: vec![
            LayerSpec::new(
                "conv1",
                LayerKind::Conv2d {
                    in_ch: 2,
                    out_ch: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                InitFamily::UniformHe,
            ),
            LayerSpec::new("bn1", LayerKind::BatchNorm { features: 4 }, InitFamily::Constant(0.0)),
            LayerSpec::new("relu1", LayerKind::Relu, InitFamily::Constant(0.0)),
            LayerSpec::new("gap", LayerKind::GlobalAvgPool, InitFamily::Constant(0.0)),
            LayerSpec::new(
                "final_linear",
                LayerKind::Dense {
                    in_features: 4,
                    out_features: 3,
                },
                InitFamily::UniformGlorot,
            ),
        ],
        stages: vec![],
        identity_skips_only: false,
    };
    arch.validate().unwrap();
    assert_grads(&arch, 4, Mode::Train, true);
    assert_grads(&arch, 5, Mode::Eval, true);
}

#[test]
fn batchnorm_dense_train() {
    let arch = ArchSpec {
        name: "bn-dense".into(),
        input: [1, 3, 3],
        num_classes: 3,
        layers: vec![
            LayerSpec::new("flatten", LayerKind::Flatten, InitFamily::Constant(0.0)),
            LayerSpec::new(
                "layer1",
                LayerKind::Dense {
                    in_features: 9,
                    out_features: 6,
                },
                InitFamily::UniformHe,
            ),
            LayerSpec::new("bn1", LayerKind::BatchNorm { features: 6 }, InitFamily::Constant(0.0)),
            LayerSpec::new("relu1", LayerKind::Relu, InitFamily::Constant(0.0)),
            LayerSpec::new(
                "final_linear",
                LayerKind::Dense {
                    in_features: 6,
                    out_features: 3,
                },
                InitFamily::UniformGlorot,
            ),
        ],
        stages: vec![],
        identity_skips_only: false,
    };
    arch.validate().unwrap();
    assert_grads(&arch, 6, Mode::Train, true);
}

#[test]
fn residual_identity_basic() {
    let arch = presets::resnet(&[1], 4, [3, 6, 6], 3, false, false);
    assert_grads(&arch, 7, Mode::Eval, true);
}

#[test]
fn residual_identity_bottleneck_with_bn() {
    let arch = presets::resnet(&[1], 8, [1, 4, 4], 3, true, true);
    assert_grads(&arch, 8, Mode::Train, false);
}

#[test]
fn residual_downsample_basic() {
    let arch = presets::resnet(&[1, 1], 3, [1, 8, 8], 3, false, false);
    assert_grads(&arch, 9, Mode::Eval, true);
}

#[test]
fn residual_downsample_bottleneck() {
    let arch = presets::resnet(&[1, 1], 4, [1, 8, 8], 3, false, true);
    assert_grads(&arch, 10, Mode::Eval, false);
}

#[test]
fn identity_variant_downsample_conv() {
    let arch = presets::resnet_identity(&[1, 1], 3, [1, 8, 8], 3, false);
    assert_grads(&arch, 11, Mode::Eval, true);
}
