use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam optimiser state with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        Self { lr, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` see a zero gradient.
    /// Any non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.first.len() != store.len() {
            return Err(Error::Shape("optimiser state does not match the parameter store".into()));
        }
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(Error::Shape(format!("gradient shape mismatch for `{}`", store.name(*id))));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
            }
        }
        let mut dense: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            dense[id.index()] = Some(g);
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for id in store.ids().collect::<Vec<_>>() {
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            let grad = dense[id.index()];
            let param = store.get_mut(id).data_mut();
            for i in 0..param.len() {
                let g = grad.map_or(0.0, |g| g.data()[i] as f64);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
                param[i] = (param[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = single(0.3);
        let mut adam = AdamState::new(&store, 0.1);
        adam.step(&mut store, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(store.get(id).item(), 0.3);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for &g in &[2.5f32, -0.01] {
            let (mut store, id) = single(1.0);
            let mut adam = AdamState::new(&store, 0.05);
            adam.step(&mut store, &[(id, Tensor::scalar(g))]).unwrap();
            let moved = store.get(id).item() as f64 - 1.0;
            assert!((moved + 0.05 * (g as f64).signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn quadratic_matches_scalar_reference() {
        // Independent scalar Adam on f(w) = w².
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let (mut store, id) = single(1.0);
        let mut adam = AdamState::new(&store, lr);
        for t in 1..=10 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            w = w as f32 as f64;

            let cur = store.get(id).item();
            adam.step(&mut store, &[(id, Tensor::scalar(2.0 * cur))]).unwrap();
        }
        assert!((store.get(id).item() as f64 - w).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_is_rejected_with_name() {
        let (mut store, id) = single(1.0);
        let mut adam = AdamState::new(&store, 0.1);
        let err = adam.step(&mut store, &[(id, Tensor::scalar(f32::NAN))]).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(store.get(id).item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }
}
