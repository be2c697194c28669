//! Layer building blocks shared by the backbone and the task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::tape::BnUpdate;
use crate::tensor::{Activation, Element, EntryKind, Owner, ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass context: the tape being recorded, the parameters, and
/// whether batch norm uses batch statistics.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub train: bool,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self { tape, store, train }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Registers layers in a [`ParamStore`]. Every layer draws its initial weights
/// from an RNG keyed by `(seed, layer name)`, so a layer's initialization does
/// not depend on which other layers were built.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    owner: Owner,
}

impl<'a, T: Element> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64, owner: Owner) -> Self {
        Self { store, seed, owner }
    }

    pub fn set_owner(&mut self, owner: Owner) {
        self.owner = owner;
    }

    /// He-normal initialized conv weight, optional zero bias, "same" padding.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        self.conv_gain(name, cin, cout, k, stride, bias, 2.0)
    }

    /// Like [`Builder::conv`] with weight variance `gain / fan_in`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_gain(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, gain: f64) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let data: Vec<T> = (0..cout * cin * k * k).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
        let w = self.store.add(
            format!("{name}.weight"),
            EntryKind::Param,
            self.owner,
            Tensor::new(vec![cout, cin, k, k], data).expect("conv weight shape"),
        );
        let b = bias.then(|| self.store.add(format!("{name}.bias"), EntryKind::Param, self.owner, Tensor::zeros(&[cout])));
        Conv { weight: w, bias: b, stride, pad: k / 2 }
    }

    pub fn batchnorm(&mut self, name: &str, c: usize) -> BatchNorm {
        let o = self.owner;
        BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), EntryKind::Param, o, Tensor::full(&[c], T::one())),
            beta: self.store.add(format!("{name}.beta"), EntryKind::Param, o, Tensor::zeros(&[c])),
            running_mean: self.store.add(format!("{name}.running_mean"), EntryKind::Buffer, o, Tensor::zeros(&[c])),
            running_var: self.store.add(format!("{name}.running_var"), EntryKind::Buffer, o, Tensor::full(&[c], T::one())),
        }
    }

    /// Conv (no bias) followed by batch norm and an activation.
    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, act: Activation) -> ConvBn {
        ConvBn {
            conv: self.conv(name, cin, cout, k, stride, false),
            bn: self.batchnorm(&format!("{name}.bn"), cout),
            act,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        if cx.train {
            let (y, mean, var) = cx.tape.batchnorm_train(x, g, b, BN_EPS)?;
            cx.tape.record_bn_update(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch_mean: mean,
                batch_var: var,
            });
            Ok(y)
        } else {
            let mean = cx.store.get(self.running_mean).data();
            let var = cx.store.get(self.running_var).data();
            cx.tape.batchnorm_eval(x, g, b, mean, var, BN_EPS)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Activation,
}

impl ConvBn {
    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(cx.tape.activation(y, self.act))
    }
}

/// Folds recorded batch statistics into the running statistics:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn apply_bn_updates<T: Element>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m = T::from_f64(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            for (r, &b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = keep * *r + m * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        {
            let mut ba = Builder::new(&mut a, 3, Owner::Segment);
            ba.conv("x", 2, 3, 3, 1, true);
            ba.conv("y", 3, 3, 1, 1, false);
        }
        {
            let mut bb = Builder::new(&mut b, 3, Owner::Segment);
            bb.conv("y", 3, 3, 1, 1, false);
        }
        let ya = a.get(a.find("y.weight").unwrap());
        let yb = b.get(b.find("y.weight").unwrap());
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        let bn = Builder::new(&mut s, 0, Owner::Pose).batchnorm("bn", 1);
        let up = BnUpdate { running_mean: bn.running_mean, running_var: bn.running_var, batch_mean: vec![2.0], batch_var: vec![3.0] };
        apply_bn_updates(&mut s, &[up], 0.1);
        assert!((s.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((s.get(bn.running_var).data()[0] - 1.2).abs() < 1e-12);
    }
}
