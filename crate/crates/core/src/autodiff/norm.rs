use super::{OpKind, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Per-channel statistics of one train-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Biased variance (used for normalization).
    pub var: Vec<T>,
    /// Unbiased variance (folded into running statistics).
    pub var_unbiased: Vec<T>,
}

fn check_affine<T: Scalar>(gamma: &Tensor<T>, beta: &Tensor<T>, c: usize) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::Shape(format!(
            "batch norm affine params {:?}/{:?}, expected [{c}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Normalizes each channel of `self[N,C,H,W]` by its batch statistics.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let (x, gm, bt) = (self.try_value()?, gamma.try_value()?, beta.try_value()?);
        let (n, c, h, w) = x.dims4()?;
        check_affine(&gm, &bt, c)?;
        let hw = h * w;
        let count = n * hw;
        if count < 2 {
            return Err(TensorError::DegenerateVariance { count });
        }
        let m = T::of(count as f64);
        let eps = T::of(eps);
        let xd = x.data();

        let mut stats = BatchStats { mean: vec![T::zero(); c], var: vec![T::zero(); c], var_unbiased: vec![T::zero(); c] };
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                sum = sum + xd[base..base + hw].iter().copied().sum::<T>();
            }
            let mean = sum / m;
            let mut sq = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for &v in &xd[base..base + hw] {
                    sq = sq + (v - mean) * (v - mean);
                }
            }
            stats.mean[ch] = mean;
            stats.var[ch] = sq / m;
            stats.var_unbiased[ch] = sq / (m - T::one());
            inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
        }

        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (mu, is, g, b) = (stats.mean[ch], inv_std[ch], gm.data()[ch], bt.data()[ch]);
                for j in base..base + hw {
                    xhat[j] = (xd[j] - mu) * is;
                    out[j] = g * xhat[j] + b;
                }
            }
        }

        let var = self.record(
            OpKind::BatchNormTrain,
            &[*self, *gamma, *beta],
            Tensor::from_parts(vec![n, c, h, w], out),
            Box::new(move |grad, needs| {
                let gd = grad.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] = dgamma[ch] + gd[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + gd[j];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); gd.len()];
                    for ch in 0..c {
                        // dxhat = g * gamma; sums over the channel reduce to dbeta/dgamma.
                        let g = gm.data()[ch];
                        let k = g * inv_std[ch] / m;
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                dx[j] = k * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    Tensor::from_parts(vec![n, c, h, w], dx)
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                    needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        )?;
        Ok((var, stats))
    }

    /// Normalizes with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let (x, gm, bt) = (self.try_value()?, gamma.try_value()?, beta.try_value()?);
        let (n, c, h, w) = x.dims4()?;
        check_affine(&gm, &bt, c)?;
        check_affine(running_mean, running_var, c)?;
        let hw = h * w;
        let eps = T::of(eps);
        let mean = running_mean.data().to_vec();
        let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    out[j] = gm.data()[ch] * (xd[j] - mean[ch]) * inv_std[ch] + bt.data()[ch];
                }
            }
        }
        self.record(
            OpKind::BatchNormEval,
            &[*self, *gamma, *beta],
            Tensor::from_parts(vec![n, c, h, w], out),
            Box::new(move |grad, needs| {
                let gd = grad.data();
                let xd = x.data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            let xhat = (xd[j] - mean[ch]) * inv_std[ch];
                            dx[j] = gd[j] * gm.data()[ch] * inv_std[ch];
                            dgamma[ch] = dgamma[ch] + gd[j] * xhat;
                            dbeta[ch] = dbeta[ch] + gd[j];
                        }
                    }
                }
                vec![
                    needs[0].then(|| Tensor::from_parts(vec![n, c, h, w], dx)),
                    needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                    needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        )
    }
}
