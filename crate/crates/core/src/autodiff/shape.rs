use super::{OpKind, Tape, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// `(outer, axis, inner)` extents of `shape` split around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, axis: usize, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| TensorError::Argument("concat of nothing".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.try_value()).collect::<Result<_>>()?;
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Argument(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape(format!("concat along {axis}: {base:?} vs {s:?}")));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = split_dims(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        first.record(
            OpKind::Concat,
            parts,
            Tensor::from_parts(shape, data),
            Box::new(move |g, needs| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let start = offset;
                        offset += len;
                        need.then(|| {
                            let mut part = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let row = o * total * inner;
                                part.extend_from_slice(
                                    &g.data()[row + start * inner..row + (start + len) * inner],
                                );
                            }
                            let mut shape = base.clone();
                            shape[axis] = len;
                            Tensor::from_parts(shape, part)
                        })
                    })
                    .collect()
            }),
        )
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Argument(format!("narrow axis {axis} for rank {}", shape.len())));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::Argument(format!(
                "narrow {start}..{} outside axis {axis} of size {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, size, inner) = split_dims(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let row = o * size * inner;
            data.extend_from_slice(&x.data()[row + start * inner..row + (start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.record(
            OpKind::Narrow,
            &[*self],
            Tensor::from_parts(out_shape, data),
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros(shape.clone());
                let d = dx.data_mut();
                for o in 0..outer {
                    let row = o * size * inner;
                    d[row + start * inner..row + (start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let original = x.shape().to_vec();
        let out = (*x).clone().reshape(shape.to_vec())?;
        self.record(
            OpKind::Reshape,
            &[*self],
            out,
            Box::new(move |g, _| vec![Some(g.clone().reshape(original.clone()).expect("same numel"))]),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([2, 1, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([2, 3, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(c.shape(), vec![2, 4, 2, 2]);
        assert_eq!(*c.narrow(1, 0, 1).unwrap().value(), *a.value());
        assert_eq!(*c.narrow(1, 1, 3).unwrap().value(), *b.value());
    }

    #[test]
    fn concat_rejects_mismatched_spatial_size() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros([1, 1, 3, 2]));
        assert!(matches!(tape.concat(1, &[a, b]), Err(TensorError::Shape(_))));
    }

    #[test]
    fn narrow_out_of_range() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        assert!(a.narrow(1, 2, 2).is_err());
        assert!(a.narrow(2, 0, 1).is_err());
    }
}
