use super::store::{Entry, EntryKind, ParamStore};
use super::Element;

/// One SGD-with-momentum update of a single parameter buffer:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_momentum_step<T: Element>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// Rescales every accumulated gradient so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.param_ids().collect();
    let sq: f64 = ids
        .iter()
        .filter_map(|&id| store.get(id).grad.as_ref())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = T::from_f64(max_norm / norm);
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

/// Momentum SGD over a [`ParamStore`], with one zero-initialized velocity
/// buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Applies one step. `lr_for` gives the learning rate of each entry; an
    /// entry with rate zero or without a gradient is left untouched, including
    /// its velocity.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_for: impl Fn(&Entry<T>) -> f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize_with(store.len(), || None);
        }
        let ids: Vec<_> = store.param_ids().collect();
        for id in ids {
            let entry = store.entry(id);
            debug_assert_eq!(entry.kind, EntryKind::Param);
            let lr = lr_for(entry);
            if lr == 0.0 || entry.tensor.grad.is_none() {
                continue;
            }
            let n = entry.tensor.numel();
            let vel = self.velocity[id.0].get_or_insert_with(|| vec![T::zero(); n]);
            let t = store.get_mut(id);
            let grad = t.grad.take().expect("checked above");
            sgd_momentum_step(t.data_mut(), &grad, vel, lr, self.momentum, self.weight_decay);
            t.grad = Some(grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", EntryKind::Param, crate::tensor::Owner::Pose, crate::tensor::Tensor::zeros(&[2]));
        store.get_mut(a).grad = Some(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 10.0), 5.0);
        assert_eq!(store.get(a).grad.as_deref(), Some(&[3.0, 4.0][..]));
        clip_grad_norm(&mut store, 1.0);
        let g = store.get(a).grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut p = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[0.5, 0.25], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = vec![3.0f64, 4.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[0.0, 0.0], &mut v, 0.5, 0.9, 0.0);
        assert_eq!(p, vec![3.0, 4.0]);
    }

    #[test]
    fn two_momentum_steps_on_quadratic() {
        // f(w) = w^2, grad = 2w; hand-rolled recurrence.
        let (lr, mu) = (0.1, 0.9);
        let mut w = vec![1.0f64];
        let mut v = vec![0.0];
        let (mut rw, mut rv) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            let g = vec![2.0 * w[0]];
            sgd_momentum_step(&mut w, &g, &mut v, lr, mu, 0.0);
            rv = mu * rv + 2.0 * rw;
            rw -= lr * rv;
        }
        // step 1: v = 2, w = 0.8; step 2: v = 0.9*2 + 1.6 = 3.4, w = 0.8 - 0.34 = 0.46
        assert!((w[0] - 0.46).abs() < 1e-12);
        assert!((w[0] - rw).abs() < 1e-15);
    }
}
