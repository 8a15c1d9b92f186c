//! Per-layer parameter storage and initialization.
//!
//! A [`ParamSet`] maps each parametric layer name to its named tensors in the
//! layer's fixed tensor order. Batch-norm running statistics live here too,
//! so saving, restoring and resetting a layer always moves the whole of its
//! state at once.

use std::collections::BTreeMap;

use crate::arch::{ArchSpec, InitFamily, TensorRole};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<E: Element = f32> {
    /// (tensor name, values, role), in the layer kind's canonical order.
    pub tensors: Vec<(String, Tensor<E>, TensorRole)>,
}

impl<E: Element> LayerParams<E> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.tensors
            .iter_mut()
            .find(|(n, _, _)| n == name)
            .map(|(_, t, _)| t)
    }

    /// All values of this layer flattened in tensor order.
    pub fn flat(&self) -> Vec<E> {
        let mut out = Vec::new();
        for (_, t, _) in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<E: Element = f32> {
    entries: BTreeMap<String, LayerParams<E>>,
}

impl<E: Element> ParamSet<E> {
    pub fn layer(&self, name: &str) -> Result<&LayerParams<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_mut(&mut self, name: &str) -> Result<&mut LayerParams<E>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy one layer's entire state from another set.
    pub fn assign_layer_from(&mut self, source: &ParamSet<E>, layer: &str) -> Result<()> {
        let src = source.layer(layer)?.clone();
        let dst = self.layer_mut(layer)?;
        if src.tensors.len() != dst.tensors.len()
            || src
                .tensors
                .iter()
                .zip(&dst.tensors)
                .any(|((an, at, _), (bn, bt, _))| an != bn || at.dims() != bt.dims())
        {
            return Err(Error::ShapeMismatch {
                layer: layer.to_string(),
                detail: "source layer has a different tensor layout".into(),
            });
        }
        *dst = src;
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        LayerParams {
                            tensors: v
                                .tensors
                                .iter()
                                .map(|(n, t, r)| (n.clone(), t.cast::<F>(), *r))
                                .collect(),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|lp| lp.tensors.iter().all(|(_, t, _)| t.all_finite()))
    }

    /// Confirm the key set and tensor dims match the architecture.
    pub fn validate_against(&self, arch: &ArchSpec) -> Result<()> {
        let mut expected = 0;
        for l in arch.parametric_layers() {
            expected += 1;
            let lp = self.entries.get(&l.name).ok_or_else(|| Error::ShapeMismatch {
                layer: l.name.clone(),
                detail: "missing from parameter set".into(),
            })?;
            let defs = l.kind.tensor_defs();
            if defs.len() != lp.tensors.len() {
                return Err(Error::ShapeMismatch {
                    layer: l.name.clone(),
                    detail: format!("expected {} tensors, found {}", defs.len(), lp.tensors.len()),
                });
            }
            for (def, (name, t, _)) in defs.iter().zip(&lp.tensors) {
                if def.name != name || def.dims != t.dims() {
                    return Err(Error::ShapeMismatch {
                        layer: l.name.clone(),
                        detail: format!(
                            "tensor `{}` dims {:?} do not match expected `{}` {:?}",
                            name,
                            t.dims(),
                            def.name,
                            def.dims
                        ),
                    });
                }
            }
        }
        if expected != self.entries.len() {
            return Err(Error::InvalidArch(format!(
                "parameter set has {} layers, architecture has {}",
                self.entries.len(),
                expected
            )));
        }
        Ok(())
    }
}

impl ParamSet<f32> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, va), (kb, vb))| {
                ka == kb
                    && va.tensors.len() == vb.tensors.len()
                    && va
                        .tensors
                        .iter()
                        .zip(&vb.tensors)
                        .all(|((na, ta, _), (nb, tb, _))| na == nb && ta.bit_eq(tb))
            })
    }
}

/// Sample a fresh parameter set for `arch`. Bitwise reproducible: each tensor
/// draws from its own stream named by layer and tensor, so resampling a
/// single layer later reproduces exactly the same distribution family.
pub fn init_params<E: Element>(arch: &ArchSpec, seed: u64) -> ParamSet<E> {
    let mut entries = BTreeMap::new();
    for l in arch.parametric_layers() {
        entries.insert(l.name.clone(), init_layer(l.name.as_str(), &l.kind, l.init, seed));
    }
    ParamSet { entries }
}

/// A parameter set of the right shape with every tensor zeroed. Used for
/// gradients and momentum buffers.
pub fn zeros_like<E: Element>(arch: &ArchSpec) -> ParamSet<E> {
    let mut entries = BTreeMap::new();
    for l in arch.parametric_layers() {
        let tensors = l
            .kind
            .tensor_defs()
            .into_iter()
            .map(|def| (def.name.to_string(), Tensor::zeros(&def.dims), def.role))
            .collect();
        entries.insert(l.name.clone(), LayerParams { tensors });
    }
    ParamSet { entries }
}

/// Sample one layer's tensors from its init distribution.
pub fn init_layer<E: Element>(
    layer_name: &str,
    kind: &crate::arch::LayerKind,
    family: InitFamily,
    seed: u64,
) -> LayerParams<E> {
    let mut tensors = Vec::new();
    for def in kind.tensor_defs() {
        let n: usize = def.dims.iter().product();
        let t = match def.role {
            TensorRole::Weight { fan_in, fan_out } => match family {
                InitFamily::Constant(v) => Tensor::filled(&def.dims, E::from_f64(v)),
                fam => {
                    let bound = fam.bound(fan_in, fan_out);
                    let mut s = Stream::new(seed, &format!("init/{}/{}", layer_name, def.name), 0);
                    let data: Vec<E> = (0..n)
                        .map(|_| E::from_f64(s.uniform_symmetric_f64(bound)))
                        .collect();
                    Tensor::from_vec(&def.dims, data).expect("def dims consistent")
                }
            },
            TensorRole::Bias | TensorRole::Beta | TensorRole::RunningMean => Tensor::zeros(&def.dims),
            TensorRole::Gamma | TensorRole::RunningVar => Tensor::filled(&def.dims, E::one()),
        };
        tensors.push((def.name.to_string(), t, def.role));
    }
    LayerParams { tensors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::presets;

    #[test]
    fn init_is_bitwise_reproducible() {
        let arch = presets::fcn(3, 32, [1, 8, 8], 10);
        let a: ParamSet = init_params(&arch, 42);
        let b: ParamSet = init_params(&arch, 42);
        assert!(a.bit_eq(&b));
        let c: ParamSet = init_params(&arch, 43);
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn he_bound_holds() {
        let arch = presets::fcn(1, 256, [1, 28, 28], 10);
        let p: ParamSet = init_params(&arch, 7);
        let w = p.layer("layer1").unwrap().tensor("weight").unwrap();
        let b = (6.0f64 / 784.0).sqrt() as f32;
        assert!((b - 0.0875).abs() < 5e-4);
        assert!(w.data().iter().all(|v| v.abs() <= b));
        // and actually spreads over the range
        let max = w.data().iter().cloned().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max > 0.9 * b);
    }

    #[test]
    fn constant_zero_gives_zero_tensor() {
        let mut arch = presets::fcn(1, 4, [1, 2, 2], 3);
        arch.layers[1].init = InitFamily::Constant(0.0);
        let p: ParamSet = init_params(&arch, 1);
        let w = p.layer("layer1").unwrap().tensor("weight").unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn biases_zero_gamma_one() {
        let arch = presets::resnet(&[2, 2], 8, [3, 32, 32], 10, true, false);
        let p: ParamSet = init_params(&arch, 3);
        let blk = p.layer("stage1.resblk1").unwrap();
        assert!(blk
            .tensor("conv1.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(blk.tensor("bn1.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(blk
            .tensor("bn1.running_var")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        p.validate_against(&arch).unwrap();
    }

    #[test]
    fn assign_layer_replaces_exactly_one() {
        let arch = presets::fcn(2, 8, [1, 4, 4], 5);
        let a: ParamSet = init_params(&arch, 1);
        let b: ParamSet = init_params(&arch, 2);
        let mut c = a.clone();
        c.assign_layer_from(&b, "layer2").unwrap();
        assert!(c.layer("layer1").unwrap() == a.layer("layer1").unwrap());
        assert!(c.layer("layer2").unwrap() == b.layer("layer2").unwrap());
        assert!(c.assign_layer_from(&b, "nope").is_err());
    }
}
