//! Adaptive-moment gradient descent.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tape::{Arr, Gradients};

struct Moment {
    m: Arr,
    v: Arr,
    step: u64,
}

/// Classic Adam with per-parameter step counts and bias correction.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: HashMap<ParamId, Moment>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
        }
    }

    /// Apply one update for every trainable parameter that received a
    /// gradient. Iterates parameters in id order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let entry = self.state.entry(id).or_insert_with(|| Moment {
                m: Arr::zeros(g.raw_dim()),
                v: Arr::zeros(g.raw_dim()),
                step: 0,
            });
            entry.step += 1;
            let b1 = self.beta1;
            let b2 = self.beta2;
            entry.m.zip_mut_with(g, |m, &gr| *m = b1 * *m + (1.0 - b1) * gr);
            entry
                .v
                .zip_mut_with(g, |v, &gr| *v = b2 * *v + (1.0 - b2) * gr * gr);
            let bc1 = 1.0 - b1.powi(entry.step as i32);
            let bc2 = 1.0 - b2.powi(entry.step as i32);
            let lr = self.lr;
            let eps = self.eps;
            let value = params.get_mut(id);
            let ms = entry.m.as_slice().unwrap();
            let vs = entry.v.as_slice().unwrap();
            for (i, p) in value.as_slice_mut().unwrap().iter_mut().enumerate() {
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;
    use ndarray::IxDyn;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Arr::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut t = Tape::new();
            let xv = t.param(&ps, x);
            let xc = t.value(xv).clone();
            let loss_val: f32 = xc.iter().map(|v| v * v).sum();
            let back = crate::nn::tape::BackOp {
                parents: vec![xv],
                run: Box::new(move |dy: &Arr| {
                    let g = dy.iter().next().copied().unwrap();
                    vec![xc.mapv(|v| 2.0 * v * g)]
                }),
            };
            let loss = t.push(Arr::from_elem(IxDyn(&[]), loss_val), None, Some(back));
            let grads = t.backward(loss);
            opt.step(&mut ps, &grads);
        }
        assert!(ps.get(x).iter().all(|v| v.abs() < 1e-2));
    }
}
