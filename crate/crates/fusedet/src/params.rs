//! Named parameter storage shared by the network modules, plus the Adam
//! optimizer that updates it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// Stable handle into a [`ParamSet`]. Registration order is the model
/// construction order, which the checkpoint codec relies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamSet<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Uniform init in `[-bound, bound]` with `bound = sqrt(1/fan_in)`.
pub fn init_uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data)
}

/// Adam with bias correction; hyperparameters beyond the learning rate use
/// the conventional (0.9, 0.999, 1e-8).
pub struct Adam<F: Scalar> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
    beta1: F,
    beta2: F,
    eps: F,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            m: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
        }
    }

    /// One optimizer step. Entries of `grads` index into `params`; parameters
    /// without a gradient this step keep their moments unchanged.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[(ParamId, Tensor<F>)], lr: F) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (pid, g) in grads {
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            let w = &mut params.tensors[pid.0];
            for ((mv, vv), (wv, &gv)) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(w.data_mut().iter_mut().zip(g.data()))
            {
                *mv = self.beta1 * *mv + (F::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (F::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *wv = *wv - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_lr_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.register("w", init_uniform(&mut rng, &[4, 4], 4));
        let before = ps.get(id).clone();
        let mut adam = Adam::new(&ps);
        let grad = init_uniform::<f64>(&mut rng, &[4, 4], 4);
        adam.step(&mut ps, &[(id, grad)], 0.0);
        assert_eq!(ps.get(id).data(), before.data());
    }

    #[test]
    fn adam_moves_toward_minimum() {
        // minimize (w - 3)^2 elementwise
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.register("w", Tensor::zeros(&[2]));
        let mut adam = Adam::new(&ps);
        for _ in 0..2000 {
            let g = ps.get(id).map(|w| 2.0 * (w - 3.0));
            adam.step(&mut ps, &[(id, g)], 0.05);
        }
        for &w in ps.get(id).data() {
            assert!((w - 3.0).abs() < 1e-3, "w = {w}");
        }
    }
}
