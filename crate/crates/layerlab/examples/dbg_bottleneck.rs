use layerlab::arch::{presets, LayerKind};
use layerlab::nn::{self, Mode};
use layerlab::params::{init_params, ParamSet};
use layerlab::rng::Stream;
use layerlab::tensor::Tensor;

fn loss_of(arch: &layerlab::ArchSpec, p: &ParamSet<f64>, x: &Tensor<f64>, labels: &[u8]) -> f64 {
    let mut s = p.clone();
    let pass = nn::forward_cached(arch, &mut s, x, Mode::Eval).unwrap();
    nn::softmax_xent(&pass.logits, labels, arch.num_classes).unwrap().0
}

fn main() {
    let arch = presets::resnet(&[1], 4, [1, 6, 6], 3, false, true);
    for l in &arch.layers { println!("{} {:?}", l.name, l.kind); }
    let p: ParamSet<f64> = init_params(&arch, 7);
    let mut s = Stream::new(1, "x", 0);
    let x = Tensor::from_vec(&[1, 1, 6, 6], (0..36).map(|_| s.gauss_f64() * 0.8).collect()).unwrap();
    let labels = vec![1u8];
    let mut scratch = p.clone();
    let pass = nn::forward_cached(&arch, &mut scratch, &x, Mode::Eval).unwrap();
    let (_, dl) = nn::softmax_xent(&pass.logits, &labels, 3).unwrap();
    let (grads, _) = nn::backward(&arch, &p, &pass, &dl).unwrap();
    let h = 1e-4;
    for lname in ["stage0.conv", "stage1.resblk1", "final_linear"] {
        let nt = p.layer(lname).unwrap().tensors.len();
        for ti in 0..nt {
            let tname = p.layer(lname).unwrap().tensors[ti].0.clone();
            let n = p.layer(lname).unwrap().tensors[ti].1.len();
            let mut worst = (0.0f64, 0usize, 0.0, 0.0);
            for ei in 0..n {
                let mut pp = p.clone();
                pp.layer_mut(lname).unwrap().tensors[ti].1.data_mut()[ei] += h;
                let lp = loss_of(&arch, &pp, &x, &labels);
                let mut pm = p.clone();
                pm.layer_mut(lname).unwrap().tensors[ti].1.data_mut()[ei] -= h;
                let lm = loss_of(&arch, &pm, &x, &labels);
                let num = (lp - lm) / (2.0 * h);
                let ana = grads.layer(lname).unwrap().tensors[ti].1.data()[ei];
                let d = (ana - num).abs();
                if d > worst.0 { worst = (d, ei, ana, num); }
            }
            println!("{lname}/{tname}: worst abs diff {:.3e} at [{}] ana {:.4e} num {:.4e}", worst.0, worst.1, worst.2, worst.3);
        }
    }
}
