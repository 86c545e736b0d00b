//! Named parameter and buffer storage shared by every model component.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(pub usize);

/// How a parameter was initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingNormal { fan_in: usize },
    Zeros,
    Ones,
    /// Identity matrix plus uniform noise in `(-a, a)`; real part of a complex identity.
    IdentityPlusUniform(f64),
    /// Uniform in `(-a, a)`.
    Uniform(f64),
}

impl Init {
    pub fn sample<T: Scalar>(self, shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        match self {
            Init::KaimingNormal { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(rng)))
            }
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::Uniform(a) => Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(-a..a))),
            Init::IdentityPlusUniform(a) => {
                let side = shape[shape.len() - 1];
                Tensor::from_fn(shape.to_vec(), |i| {
                    let diag = if i / side == i % side { 1.0 } else { 0.0 };
                    T::of(diag + rng.gen_range(-a..a))
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub init: Init,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashSet<String>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: HashSet::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str) {
        assert!(self.names.insert(name.to_string()), "duplicate parameter name {name}");
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        self.claim(&name);
        let value = init.sample(shape, rng);
        self.params.push(Parameter { name, value, grad: None, init });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        self.claim(&name);
        self.buffers.push(Buffer { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalars of every parameter whose name starts with `prefix`.
    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape`; index the result with [`ParamId`].
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().enumerate().map(|(i, p)| tape.param(ParamId(i), p.value.clone())).collect()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        p.value.expect_same_shape(grad).map_err(|_| {
            TensorError::Shape(format!("gradient for {} has shape {:?}", p.name, grad.shape()))
        })?;
        match &mut p.grad {
            Some(acc) => acc.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// FNV-1a over every parameter and buffer bit pattern, in order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let values = self.params.iter().map(|p| &p.value).chain(self.buffers.iter().map(|b| &b.value));
        for t in values {
            for v in t.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn names_are_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        store.add("a.weight", &[2], Init::Zeros, &mut rng);
        store.add("a.weight", &[2], Init::Zeros, &mut rng);
    }

    #[test]
    fn identity_init_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = Init::IdentityPlusUniform(0.01).sample(&[4, 4], &mut rng);
        for r in 0..4 {
            for c in 0..4 {
                let expected = if r == c { 1.0 } else { 0.0 };
                assert!((t.data()[r * 4 + c] - expected).abs() < 0.01);
            }
        }
    }

    #[test]
    fn kaiming_std_is_plausible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Tensor<f64> = Init::KaimingNormal { fan_in: 50 }.sample(&[20_000], &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "variance {var}");
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", &[2], Init::Zeros, &mut rng);
        let g = Tensor::ones([2]);
        store.accumulate_grad(id, &g).unwrap();
        store.accumulate_grad(id, &g).unwrap();
        assert_eq!(store.param(id).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
        assert!(store.accumulate_grad(id, &Tensor::ones([3])).is_err());
        store.zero_grad();
        assert!(store.param(id).grad.is_none());
    }
}
