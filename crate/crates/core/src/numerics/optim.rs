//! Decoupled-weight-decay Adam.

use super::params::ParameterStore;
use super::tensor::Real;
use super::NumericsError;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParameterStore<T>,
    v: ParameterStore<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParameterStore<T>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay applies to tensors of rank >= 2 (matrices and embeddings).
    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &ParameterStore<T>) -> Result<(), NumericsError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(NumericsError::Shape(format!("gradient shape mismatch for {name}")));
            }
            let m = self.m.get_mut(name).ok_or_else(|| NumericsError::MissingParameter(name.to_string()))?;
            let v = self.v.get_mut(name).ok_or_else(|| NumericsError::MissingParameter(name.to_string()))?;
            let decay = if p.shape().len() >= 2 { T::lit(1.0 - self.lr * self.weight_decay) } else { T::one() };
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                pd[i] = pd[i] * decay - step_size * md[i] / (vd[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Real>(grads: &mut ParameterStore<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale_all(T::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParameterStore::<f64>::new();
        p.register("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&p, 0.05, 0.0);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().clone();
            let mut g = ParameterStore::new();
            g.insert("w", w.map(|x| 2.0 * x));
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn decay_skips_vectors() {
        let mut p = ParameterStore::<f64>::new();
        p.register("b", Tensor::new(&[1], vec![1.0]).unwrap()).unwrap();
        p.register("w", Tensor::new(&[1, 1], vec![1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&p, 0.1, 0.5);
        let zeros = p.zeros_like();
        opt.step(&mut p, &zeros).unwrap();
        assert_eq!(p.get("b").unwrap().item(), 1.0);
        assert!((p.get("w").unwrap().item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut g = ParameterStore::<f64>::new();
        g.insert("a", Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
