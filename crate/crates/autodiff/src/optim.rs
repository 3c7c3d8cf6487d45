use crate::params::{ParamId, ParamStore, Parameter};
use crate::scalar::Real;

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Applies one update to every parameter using its stored gradient.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>) {
        for p in store.iter_mut() {
            self.update(p);
        }
    }

    /// Updates only the listed parameters; the rest keep their values and moments.
    pub fn step_only<T: Real>(&self, store: &mut ParamStore<T>, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            self.update(store.get_mut(id));
        }
    }

    fn update<T: Real>(&self, p: &mut Parameter<T>) {
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = T::of(1.0 - self.beta1.powi(t));
            let bc2 = T::of(1.0 - self.beta2.powi(t));
            let lr = T::of(self.lr);
            let g = p.grad.data();
            let m = p.adam_m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = p.adam_v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (p.adam_m.data(), p.adam_v.data());
            for ((x, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    #[test]
    fn zero_gradient_leaves_fresh_parameter_unchanged() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
        Adam::default().step(&mut s);
        assert_eq!(s.value(id).data(), &[1.5, -2.0]);
        assert_eq!(s.get(id).step_count, 1);
    }

    #[test]
    fn zero_gradient_decays_existing_moments() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::scalar(1.0)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(0.5);
        let adam = Adam::default();
        adam.step(&mut s);
        let (m1, v1) = (s.get(id).adam_m.item(), s.get(id).adam_v.item());
        s.zero_grad();
        adam.step(&mut s);
        assert!((s.get(id).adam_m.item() - 0.9 * m1).abs() < 1e-15);
        assert!((s.get(id).adam_v.item() - 0.999 * v1).abs() < 1e-15);
    }

    #[test]
    fn step_only_touches_listed_parameters() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::scalar(1.0)).unwrap();
        let b = s.add("b", Tensor::scalar(1.0)).unwrap();
        s.get_mut(a).grad = Tensor::scalar(1.0);
        s.get_mut(b).grad = Tensor::scalar(1.0);
        Adam::default().step_only(&mut s, [a]);
        assert!(s.value(a).item() < 1.0);
        assert_eq!(s.value(b).item(), 1.0);
        assert_eq!(s.get(b).step_count, 0);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::scalar(2.0)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(3.0);
        let adam = Adam::with_lr(0.01);
        adam.step(&mut s);
        // m = 0.3, v = 0.009; mhat = 3, vhat = 9 → step = lr * 3 / (3 + eps)
        let expected = 2.0 - 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::scalar(0.0)).unwrap();
        let adam = Adam::with_lr(0.1);
        for _ in 0..500 {
            s.zero_grad();
            let grads = {
                let mut g = Graph::with_params(&s);
                let x = g.param(id).unwrap();
                let five = g.input(Tensor::scalar(5.0));
                let d = g.sub(x, five).unwrap();
                let sq = g.mul(d, d).unwrap();
                let loss = g.sum(sq).unwrap();
                g.backward(loss).unwrap()
            };
            s.accumulate(&grads);
            adam.step(&mut s);
        }
        assert!((s.value(id).item() - 5.0).abs() < 1e-2);
    }
}
