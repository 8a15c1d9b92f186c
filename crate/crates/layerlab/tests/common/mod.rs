//! Shared helpers for integration tests: the central-finite-difference
//! gradient oracle and dataset fixture lookup.

#![allow(dead_code)]

use std::path::PathBuf;

use layerlab::arch::ArchSpec;
use layerlab::nn::{self, Mode};
use layerlab::params::ParamSet;
use layerlab::rng::Stream;
use layerlab::tensor::Tensor;

/// Scalar loss of one (train- or eval-mode) pass, side-effect free.
pub fn loss_of(arch: &ArchSpec, params: &ParamSet<f64>, x: &Tensor<f64>, labels: &[u8], mode: Mode) -> f64 {
    let mut scratch = params.clone();
    let pass = nn::forward_cached(arch, &mut scratch, x, mode).expect("forward");
    let (loss, _) = nn::softmax_xent(&pass.logits, labels, arch.num_classes).expect("loss");
    loss
}

pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative mismatch with an absolute cushion for the oracle's own
/// truncation noise at step size `h`.
fn rel_err(analytic: f64, numeric: f64, cushion: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if diff <= cushion {
        0.0
    } else {
        diff / scale.max(1e-12)
    }
}

/// Compare every learnable parameter gradient (and optionally the input
/// gradient) against central finite differences of the loss.
pub fn check_gradients(
    arch: &ArchSpec,
    params: &ParamSet<f64>,
    x: &Tensor<f64>,
    labels: &[u8],
    mode: Mode,
    check_input: bool,
) -> GradReport {
    let h = 1e-3;
    let cushion = 1e-6;
    let mut scratch = params.clone();
    let pass = nn::forward_cached(arch, &mut scratch, x, mode).expect("forward");
    let (_, dlogits) = nn::softmax_xent(&pass.logits, labels, arch.num_classes).expect("loss");
    let (grads, dinput) = nn::backward(arch, params, &pass, &dlogits).expect("backward");

    let mut report = GradReport {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    let layer_names: Vec<String> = arch.parametric_layers().iter().map(|l| l.name.clone()).collect();
    for lname in &layer_names {
        let n_tensors = params.layer(lname).unwrap().tensors.len();
        for ti in 0..n_tensors {
            let (tname, role) = {
                let lp = params.layer(lname).unwrap();
                (lp.tensors[ti].0.clone(), lp.tensors[ti].2)
            };
            if !role.is_learnable() {
                continue;
            }
            let n = params.layer(lname).unwrap().tensors[ti].1.len();
            for ei in 0..n {
                let mut plus = params.clone();
                plus.layer_mut(lname).unwrap().tensors[ti].1.data_mut()[ei] += h;
                let lp = loss_of(arch, &plus, x, labels, mode);
                let mut minus = params.clone();
                minus.layer_mut(lname).unwrap().tensors[ti].1.data_mut()[ei] -= h;
                let lm = loss_of(arch, &minus, x, labels, mode);
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grads.layer(lname).unwrap().tensors[ti].1.data()[ei];
                let r = rel_err(analytic, numeric, cushion);
                report.checked += 1;
                if r > report.max_rel {
                    report.max_rel = r;
                    report.worst = format!(
                        "{}/{}[{}]: analytic {analytic:.3e} vs numeric {numeric:.3e}",
                        lname, tname, ei
                    );
                }
            }
        }
    }
    if check_input {
        for ei in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[ei] += h;
            let lp = loss_of(arch, params, &xp, labels, mode);
            let mut xm = x.clone();
            xm.data_mut()[ei] -= h;
            let lm = loss_of(arch, params, &xm, labels, mode);
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = dinput.data()[ei];
            let r = rel_err(analytic, numeric, cushion);
            report.checked += 1;
            if r > report.max_rel {
                report.max_rel = r;
                report.worst = format!("input[{}]: analytic {analytic:.3e} vs numeric {numeric:.3e}", ei);
            }
        }
    }
    report
}

/// Random input batch with values spread away from zero crossings.
pub fn rand_batch(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = Stream::new(seed, "test-batch", 0);
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| s.gauss_f64() * 0.8).collect()).unwrap()
}

pub fn rand_labels(n: usize, k: usize, seed: u64) -> Vec<u8> {
    let mut s = Stream::new(seed, "test-labels", 0);
    (0..n).map(|_| s.below(k) as u8).collect()
}

/// Directory holding the desk-scale dataset fixtures, overridable through
/// LAYERLAB_DATA_DIR.
pub fn data_dir() -> PathBuf {
    if let Ok(d) = std::env::var("LAYERLAB_DATA_DIR") {
        return PathBuf::from(d);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}
