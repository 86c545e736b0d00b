use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{OpKind, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // Branch keeps exp() from overflowing for large |x|.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.try_value()?, other.try_value()?);
        let out = a.zip_map(&b, |x, y| x + y)?;
        self.record(
            OpKind::Add,
            &[*self, *other],
            out,
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.try_value()?, other.try_value()?);
        let out = a.zip_map(&b, |x, y| x - y)?;
        self.record(
            OpKind::Sub,
            &[*self, *other],
            out,
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.try_value()?, other.try_value()?);
        let out = a.zip_map(&b, |x, y| x * y)?;
        self.record(
            OpKind::Mul,
            &[*self, *other],
            out,
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |g, y| g * y).expect("shapes checked in forward")),
                    needs[1].then(|| g.zip_map(&a, |g, x| g * x).expect("shapes checked in forward")),
                ]
            }),
        )
    }

    /// Multiplies by a constant.
    pub fn scale(&self, s: T) -> Result<Var<'t, T>> {
        let out = self.try_value()?.scale(s);
        self.record(OpKind::Scale, &[*self], out, Box::new(move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let shape = x.shape().to_vec();
        self.record(
            OpKind::Sum,
            &[*self],
            Tensor::scalar(x.sum()),
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&self) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let shape = x.shape().to_vec();
        let n = T::of(x.numel() as f64);
        self.record(
            OpKind::Mean,
            &[*self],
            Tensor::scalar(x.sum() / n),
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0] / n))]),
        )
    }

    pub fn activation(&self, kind: Activation) -> Result<Var<'t, T>> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Silu => self.silu(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let out = x.map(|v| v.max(T::zero()));
        self.record(
            OpKind::Relu,
            &[*self],
            out,
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |g, v| if v > T::zero() { g } else { T::zero() }).unwrap())]
            }),
        )
    }

    pub fn silu(&self) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let out = x.map(|v| v * sigmoid(v));
        self.record(
            OpKind::Silu,
            &[*self],
            out,
            Box::new(move |g, _| {
                let d = x.map(|v| {
                    let s = sigmoid(v);
                    s * (T::one() + v * (T::one() - s))
                });
                vec![Some(g.zip_map(&d, |g, d| g * d).unwrap())]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        let out = Rc::new(self.try_value()?.map(sigmoid));
        let saved = Rc::clone(&out);
        self.record(
            OpKind::Sigmoid,
            &[*self],
            (*out).clone(),
            Box::new(move |g, _| vec![Some(g.zip_map(&saved, |g, s| g * s * (T::one() - s)).unwrap())]),
        )
    }

    /// `x[M,K] @ w[K,N] + b[N]`.
    pub fn linear(&self, weight: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, w) = (self.try_value()?, weight.try_value()?);
        let (m, k) = match x.shape() {
            &[m, k] => (m, k),
            s => return Err(TensorError::Shape(format!("linear input must be [M,K], got {s:?}"))),
        };
        let n = match w.shape() {
            &[wk, n] if wk == k => n,
            s => return Err(TensorError::Shape(format!("linear weight {s:?} incompatible with K={k}"))),
        };
        let b = bias.map(|b| b.try_value()).transpose()?;
        if let Some(b) = &b {
            if b.shape() != [n] {
                return Err(TensorError::Shape(format!("linear bias {:?}, expected [{n}]", b.shape())));
            }
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = &b {
            for row in out.chunks_mut(n) {
                row.copy_from_slice(b.data());
            }
        }
        gemm_nn(m, k, n, x.data(), w.data(), &mut out);
        let mut inputs = vec![*self, *weight];
        inputs.extend(bias.copied());
        self.record(
            OpKind::Linear,
            &inputs,
            Tensor::from_parts(vec![m, n], out),
            Box::new(move |g, needs| {
                let mut grads = Vec::with_capacity(3);
                grads.push(needs[0].then(|| {
                    let mut dx = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g.data(), w.data(), &mut dx);
                    Tensor::from_parts(vec![m, k], dx)
                }));
                grads.push(needs[1].then(|| {
                    let mut dw = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, x.data(), g.data(), &mut dw);
                    Tensor::from_parts(vec![k, n], dw)
                }));
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        Tensor::from_parts(vec![n], db)
                    }));
                }
                grads
            }),
        )
    }
}
