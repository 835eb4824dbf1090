//! Adam with global-norm gradient clipping.

use super::tape::{Gradients, ParamStore};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, clip: Option<f64>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips `grads` in place, applies one update, and returns the pre-clip norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut Gradients) -> f64 {
        let norm = grads.global_norm();
        if let Some(c) = self.clip {
            if norm > c {
                grads.scale(c / norm);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.tensors.iter_mut().enumerate() {
            let g = &grads.tensors[k].data;
            let m = &mut self.m.tensors[k].data;
            let v = &mut self.v.tensors[k].data;
            for i in 0..p.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tape::Tensor;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut ps = ParamStore::default();
        ps.add("w", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = Adam::new(&ps, 0.1, None);
        let mut g = ps.zeros_like();
        g.tensors[0].data = vec![3.0, -0.5];
        opt.step(&mut ps, &mut g);
        assert!((ps.tensors[0].data[0] - 0.9).abs() < 1e-6);
        assert!((ps.tensors[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut ps = ParamStore::default();
        ps.add("w", Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let mut opt = Adam::new(&ps, 0.1, Some(5.0));
        let mut g = ps.zeros_like();
        g.tensors[0].data = vec![30.0, 40.0];
        let pre = opt.step(&mut ps, &mut g);
        assert_eq!(pre, 50.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
    }
}
