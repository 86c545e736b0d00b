use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use super::{OpKind, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Output extent of a strided window along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * padding;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation of `self[N,C_in,H,W]` with `weight[C_out,C_in,kH,kW]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, T>,
        bias: Option<&Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let (x, w) = (self.try_value()?, weight.try_value()?);
        let (n, c_in, h, wd) = x.dims4()?;
        let (c_out, wc_in, kh, kw) = w.dims4()?;
        if wc_in != c_in {
            return Err(TensorError::Shape(format!(
                "conv2d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::Argument("conv2d stride must be >= 1".into()));
        }
        let (Some(out_h), Some(out_w)) =
            (conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding))
        else {
            return Err(TensorError::Shape(format!(
                "conv2d: {kh}x{kw} kernel does not fit {h}x{wd} input with padding {padding}"
            )));
        };
        let b = bias.map(|b| b.try_value()).transpose()?;
        if let Some(b) = &b {
            if b.shape() != [c_out] {
                return Err(TensorError::Shape(format!("conv2d bias {:?}, expected [{c_out}]", b.shape())));
            }
        }
        let g = ConvGeometry { c_in, h, w: wd, kh, kw, stride, pad: padding, out_h, out_w };
        let (k, p) = (g.patch_len(), g.positions());
        let mut out = vec![T::zero(); n * c_out * p];
        let mut cols = vec![T::zero(); k * p];
        for i in 0..n {
            im2col(&g, &x.data()[i * c_in * h * wd..(i + 1) * c_in * h * wd], &mut cols);
            let dst = &mut out[i * c_out * p..(i + 1) * c_out * p];
            if let Some(b) = &b {
                for (row, &bv) in dst.chunks_mut(p).zip(b.data()) {
                    row.fill(bv);
                }
            }
            gemm_nn(c_out, k, p, w.data(), &cols, dst);
        }

        let mut inputs = vec![*self, *weight];
        inputs.extend(bias.copied());
        self.record(
            OpKind::Conv2d,
            &inputs,
            Tensor::from_parts(vec![n, c_out, out_h, out_w], out),
            Box::new(move |grad, needs| {
                let gd = grad.data();
                let mut dx = needs[0].then(|| vec![T::zero(); n * c_in * h * wd]);
                let mut dw = needs[1].then(|| vec![T::zero(); c_out * k]);
                let mut cols = vec![T::zero(); k * p];
                let mut dcols = vec![T::zero(); k * p];
                for i in 0..n {
                    let g_i = &gd[i * c_out * p..(i + 1) * c_out * p];
                    if let Some(dw) = dw.as_mut() {
                        im2col(&g, &x.data()[i * c_in * h * wd..(i + 1) * c_in * h * wd], &mut cols);
                        gemm_nt(c_out, p, k, g_i, &cols, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.fill(T::zero());
                        gemm_tn(k, c_out, p, w.data(), g_i, &mut dcols);
                        col2im(&g, &dcols, &mut dx[i * c_in * h * wd..(i + 1) * c_in * h * wd]);
                    }
                }
                let mut grads = vec![
                    dx.map(|d| Tensor::from_parts(vec![n, c_in, h, wd], d)),
                    dw.map(|d| Tensor::from_parts(vec![c_out, c_in, kh, kw], d)),
                ];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); c_out];
                        for (j, row) in gd.chunks(p).enumerate() {
                            let s: T = row.iter().copied().sum();
                            db[j % c_out] = db[j % c_out] + s;
                        }
                        Tensor::from_parts(vec![c_out], db)
                    }));
                }
                grads
            }),
        )
    }
}
