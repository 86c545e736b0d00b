use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

/// First and second moments for every parameter of a store, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update of every parameter in `store` using the
/// gradients accumulated there.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if state.m.len() != store.params().len() {
        return Err(TensorError::State(format!(
            "optimizer tracks {} tensors, store has {}",
            state.m.len(),
            store.params().len()
        )));
    }
    if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
        return Err(TensorError::State(format!("parameter {} has no gradient", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let (c1, c2, lr, eps) = (T::of(c1), T::of(c2), T::of(lr), T::of(cfg.eps));
    for ((p, m), v) in store.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.as_ref().expect("checked above");
        for (((w, &g), m), v) in
            p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add("w", &[values.len()], Init::Zeros, &mut rng);
        store.param_mut(id).value.data_mut().copy_from_slice(values);
        store
    }

    fn set_grad(store: &mut ParamStore<f64>, g: Vec<f64>) {
        let n = g.len();
        store.params_mut()[0].grad = Some(Tensor::new([n], g).unwrap());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = store_with(&[1.0, 1.0]);
        let mut state = AdamState::new(&store);
        set_grad(&mut store, vec![3.0, -0.5]);
        adam_step(&mut store, &mut state, &AdamConfig::default(), 1e-3).unwrap();
        let w = store.params()[0].value.data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((w[1] - (1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut store = store_with(&[0.25]);
        let mut state = AdamState::new(&store);
        set_grad(&mut store, vec![0.0]);
        adam_step(&mut store, &mut state, &AdamConfig::default(), 1e-2).unwrap();
        assert_eq!(store.params()[0].value.data(), &[0.25]);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut store = store_with(&[0.0]);
        let mut state = AdamState::new(&store);
        assert!(matches!(
            adam_step(&mut store, &mut state, &AdamConfig::default(), 1e-3),
            Err(TensorError::State(_))
        ));
    }

    /// Scalar Adam written directly from the update rule.
    fn reference(theta0: f64, grad: impl Fn(f64) -> f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.99f64, 1e-8);
        let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(theta);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn trajectory_matches_reference_on_quadratic() {
        // f(θ) = 2(θ - 3)^2
        let grad = |th: f64| 4.0 * (th - 3.0);
        let expected = reference(-1.0, grad, 10, 0.1);
        let mut store = store_with(&[-1.0]);
        let mut state = AdamState::new(&store);
        for &e in &expected {
            let th = store.params()[0].value.data()[0];
            set_grad(&mut store, vec![grad(th)]);
            adam_step(&mut store, &mut state, &AdamConfig::default(), 0.1).unwrap();
            assert!((store.params()[0].value.data()[0] - e).abs() < 1e-10);
        }
        let end = store.params()[0].value.data()[0];
        assert!((end - 3.0).abs() < 4.0);
    }
}
