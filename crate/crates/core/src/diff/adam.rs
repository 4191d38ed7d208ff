//! Adam over a [`ParamSet`], with per-parameter enable flags and rate scales.

use super::param::{ParamId, ParamSet};
use crate::num::Real;

pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    enabled: Vec<bool>,
    lr_scale: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: T) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.values.len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            t: 0,
            enabled: vec![true; params.len()],
            lr_scale: vec![T::one(); params.len()],
            m,
            v,
        }
    }

    pub fn set_enabled(&mut self, id: ParamId, on: bool) {
        self.enabled[id.index()] = on;
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: T) {
        self.lr_scale[id.index()] = scale;
    }

    /// One update from the accumulated gradients. Does not zero them.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        self.t += 1;
        let t = T::of(self.t as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            if !self.enabled[i] {
                continue;
            }
            let rate = self.lr * self.lr_scale[i];
            let g: Vec<T> = params.grad(id).to_vec();
            let vals = params.values_mut(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..vals.len() {
                m[k] = self.beta1 * m[k] + (T::one() - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (T::one() - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                vals[k] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.register("x", vec![3.0, -2.0]);
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..400 {
            ps.zero_grads();
            let x = ps.values(id).to_vec();
            let g = ps.grad_mut(id);
            g[0] = 2.0 * x[0];
            g[1] = 2.0 * x[1];
            opt.step(&mut ps);
        }
        let x = ps.values(id);
        assert!(x[0].abs() < 1e-3 && x[1].abs() < 1e-3, "x = {x:?}");
    }
}
