//! Adam with bias correction. Moment state lives in f64 regardless of the
//! training precision and is keyed by parameter name in sorted order, so
//! update order is deterministic.

use std::collections::BTreeMap;

use crate::nn::HasParams;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient entry are left untouched.
    pub fn step<T: Scalar, M: HasParams<T> + ?Sized>(
        &mut self,
        model: &mut M,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        model.visit_mut("", &mut |name, param| {
            let g = match grads.get(&name) {
                Some(g) => g,
                None => return,
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; param.len()]);
            let data = param.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let delta = lr * mhat / (vhat.sqrt() + self.eps);
                data[i] = T::from_f64(data[i].to_f64() - delta);
            }
        });
    }
}

/// Pull gradients for every tracked parameter of a model into a name map.
pub fn collect_grads<T: Scalar, M: HasParams<T> + ?Sized>(
    tracked: &M,
    grads: &Gradients<T>,
) -> BTreeMap<String, Tensor<T>> {
    let mut out = BTreeMap::new();
    tracked.visit("", &mut |name, t| {
        if let Some(g) = grads.wrt(t) {
            out.insert(name, g.detached());
        }
    });
    out
}

/// Sum of squared parameter values (reported when training aborts on a
/// non-finite loss).
pub fn param_sq_norm<T: Scalar, M: HasParams<T> + ?Sized>(model: &M) -> f64 {
    let mut acc = 0.0;
    model.visit("", &mut |_, t| {
        for &v in t.data() {
            let v = v.to_f64();
            acc += v * v;
        }
    });
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ConvLayer, Init};
    use crate::tensor::{ops, GradientTape};

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut init = Init::new(0);
        let mut layer: ConvLayer<f64> = ConvLayer::new(1, 1, 1, 1, 0, &mut init);
        let target = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let mut adam = Adam::new();
        let mut first_loss = None;
        let mut last_loss = 0.0;
        for _ in 0..200 {
            let tape = GradientTape::new();
            let mut tracked = layer.clone();
            crate::nn::track_params(&mut tracked, &tape);
            let y = tracked.forward(&x).unwrap();
            let loss = ops::mse(&y, &target).unwrap();
            last_loss = loss.value();
            first_loss.get_or_insert(last_loss);
            let grads = tape.backward(&loss).unwrap();
            let gmap = collect_grads(&tracked, &grads);
            adam.step(&mut layer, &gmap, 0.05);
        }
        assert!(last_loss < first_loss.unwrap() * 1e-3, "{} -> {}", first_loss.unwrap(), last_loss);
    }
}
