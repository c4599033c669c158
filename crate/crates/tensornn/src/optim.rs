use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected moments and L2 weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Updates every trainable parameter from its accumulated gradient and clears the gradients.
    pub fn step<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((name, _)) = store.params().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGradient(name.clone()));
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (eps, wd, lr) = (T::of(self.eps), T::of(self.weight_decay), T::of(self.lr));
        for (_, p) in store.params_mut() {
            if !p.trainable {
                p.grad = None;
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let shape = p.value.shape().to_vec();
            let m = p.moment1.get_or_insert_with(|| Tensor::zeros(&shape));
            let v = p.moment2.get_or_insert_with(|| Tensor::zeros(&shape));
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (x, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi + wd * *x;
                md[i] = b1 * md[i] + (T::one() - b1) * gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[3], value)).unwrap();
        s.param_mut("w").unwrap().grad = Some(Tensor::full(&[3], grad));
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = store_with(0.7, 0.0);
        Adam { weight_decay: 0.0, ..Adam::default() }.step(&mut s).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[0.7; 3]);
    }

    #[test]
    fn first_step_unit_gradient() {
        // t = 1: m̂ = g = 1, v̂ = g² = 1, Δ = -lr / (1 + eps)
        let mut s = store_with(0.0, 1.0);
        Adam { lr: 1e-3, weight_decay: 0.0, ..Adam::default() }.step(&mut s).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        for &x in s.value("w").unwrap().data() {
            assert!((x - expected).abs() < 1e-15);
        }
        assert_eq!(s.param("w").unwrap().step_count(), 1);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = store_with(0.0, 1.0);
        s.insert("other", Tensor::zeros(&[1])).unwrap();
        let err = Adam::default().step(&mut s).unwrap_err();
        assert!(err.to_string().contains("other"));
    }

    #[test]
    fn identical_stores_stay_bit_identical() {
        let mut a = store_with(0.3, 0.5);
        let mut b = store_with(0.3, 0.5);
        for _ in 0..5 {
            Adam::default().step(&mut a).unwrap();
            Adam::default().step(&mut b).unwrap();
            for s in [&mut a, &mut b] {
                s.param_mut("w").unwrap().grad = Some(Tensor::full(&[3], -0.25));
            }
        }
        assert_eq!(a.value("w").unwrap(), b.value("w").unwrap());
    }
}
