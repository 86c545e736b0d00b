use super::conv::conv_output_size;
use super::{OpKind, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Spatial pooling flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Window max with the given kernel and stride.
    Max { kernel: usize, stride: usize },
    /// Window mean with the given kernel and stride.
    Avg { kernel: usize, stride: usize },
    /// Mean over `size x size` bins covering the whole input.
    AdaptiveAvg { size: usize },
}

/// Input range `[start, end)` covered by adaptive bin `i` of `bins`.
pub fn adaptive_bin(i: usize, bins: usize, input: usize) -> (usize, usize) {
    let start = i * input / bins;
    let end = ((i + 1) * input).div_ceil(bins);
    (start, end)
}

/// Bilinear source taps for output index `dst` with half-pixel centers:
/// `(lo, hi, weight_of_hi)`.
pub fn half_pixel_taps(dst: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, src - lo as f64)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn pool(&self, kind: Pool) -> Result<Var<'t, T>> {
        match kind {
            Pool::Max { kernel, stride } => self.max_pool2d(kernel, stride),
            Pool::Avg { kernel, stride } => self.avg_pool2d(kernel, stride),
            Pool::AdaptiveAvg { size } => self.adaptive_avg_pool2d(size, size),
        }
    }

    pub fn max_pool2d(&self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = window_output(h, w, kernel, stride)?;
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let j = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[j] > xd[best] {
                                best = j;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let len = xd.len();
        self.record(
            OpKind::MaxPool,
            &[*self],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); len];
                for (&j, &gv) in argmax.iter().zip(g.data()) {
                    dx[j] = dx[j] + gv;
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
            }),
        )
    }

    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let (_, _, h, w) = x.dims4()?;
        let (oh, ow) = window_output(h, w, kernel, stride)?;
        let rows: Vec<_> = (0..oh).map(|o| (o * stride, o * stride + kernel)).collect();
        let cols: Vec<_> = (0..ow).map(|o| (o * stride, o * stride + kernel)).collect();
        self.bin_average(OpKind::AvgPool, rows, cols)
    }

    /// Averages over `out_h x out_w` bins that partition the input.
    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let (_, _, h, w) = self.try_value()?.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Argument("adaptive pool target size must be >= 1".into()));
        }
        if out_h > h || out_w > w {
            return Err(TensorError::Argument(format!(
                "adaptive pool target {out_h}x{out_w} exceeds input {h}x{w}"
            )));
        }
        let rows = (0..out_h).map(|i| adaptive_bin(i, out_h, h)).collect();
        let cols = (0..out_w).map(|i| adaptive_bin(i, out_w, w)).collect();
        self.bin_average(OpKind::AdaptiveAvgPool, rows, cols)
    }

    fn bin_average(&self, op: OpKind, rows: Vec<(usize, usize)>, cols: Vec<(usize, usize)>) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (rows.len(), cols.len());
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let mut s = T::zero();
                    for y in y0..y1 {
                        s = s + xd[base + y * w + x0..base + y * w + x1].iter().copied().sum::<T>();
                    }
                    out.push(s / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        self.record(
            op,
            &[*self],
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Box::new(move |g, _| {
                let mut dx = vec![T::zero(); n * c * h * w];
                let gd = g.data();
                let mut k = 0;
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for &(y0, y1) in &rows {
                        for &(x0, x1) in &cols {
                            let share = gd[k] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            k += 1;
                            for y in y0..y1 {
                                for v in &mut dx[base + y * w + x0..base + y * w + x1] {
                                    *v = *v + share;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
            }),
        )
    }

    /// Bilinear resize with half-pixel centers (corners not aligned).
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.try_value()?;
        let (n, c, h, w) = x.dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::Argument("upsample target size must be >= 1".into()));
        }
        if out_h < h || out_w < w {
            return Err(TensorError::Argument(format!(
                "upsample target {out_h}x{out_w} smaller than input {h}x{w}"
            )));
        }
        let ys: Vec<_> = (0..out_h).map(|o| half_pixel_taps(o, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|o| half_pixel_taps(o, w, out_w)).collect();
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * out_h * out_w);
        for plane in 0..n * c {
            let p = &xd[plane * h * w..(plane + 1) * h * w];
            for &(y0, y1, ly) in &ys {
                let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                for &(x0, x1, lx) in &xs {
                    let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                    let top = p[y0 * w + x0] * lx0 + p[y0 * w + x1] * lx1;
                    let bottom = p[y1 * w + x0] * lx0 + p[y1 * w + x1] * lx1;
                    out.push(top * ly0 + bottom * ly1);
                }
            }
        }
        self.record(
            OpKind::Upsample,
            &[*self],
            Tensor::from_parts(vec![n, c, out_h, out_w], out),
            Box::new(move |g, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                let mut k = 0;
                for plane in 0..n * c {
                    let p = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for &(y0, y1, ly) in &ys {
                        let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                        for &(x0, x1, lx) in &xs {
                            let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                            let gv = gd[k];
                            k += 1;
                            p[y0 * w + x0] = p[y0 * w + x0] + gv * ly0 * lx0;
                            p[y0 * w + x1] = p[y0 * w + x1] + gv * ly0 * lx1;
                            p[y1 * w + x0] = p[y1 * w + x0] + gv * ly1 * lx0;
                            p[y1 * w + x1] = p[y1 * w + x1] + gv * ly1 * lx1;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
            }),
        )
    }
}

fn window_output(h: usize, w: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(TensorError::Argument("pool kernel and stride must be >= 1".into()));
    }
    match (conv_output_size(h, kernel, stride, 0), conv_output_size(w, kernel, stride, 0)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(TensorError::Argument(format!("pool window {kernel} larger than input {h}x{w}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn max_pool_picks_maximum() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.pool(Pool::Max { kernel: 2, stride: 2 }).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn adaptive_to_one_of_constant() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 2, 5, 7], 3.5));
        let y = x.pool(Pool::AdaptiveAvg { size: 1 }).unwrap().value();
        assert_eq!(y.shape(), &[1, 2, 1, 1]);
        assert!(y.data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn adaptive_zero_target_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 4, 4]));
        assert!(matches!(x.pool(Pool::AdaptiveAvg { size: 0 }), Err(TensorError::Argument(_))));
        assert!(matches!(x.pool(Pool::AdaptiveAvg { size: 5 }), Err(TensorError::Argument(_))));
    }

    #[test]
    fn adaptive_bins_cover_input() {
        for input in 1..20 {
            for bins in 1..=input {
                let mut covered = vec![false; input];
                for i in 0..bins {
                    let (s, e) = adaptive_bin(i, bins, input);
                    assert!(s < e && e <= input);
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 1, 1, 1], 0.75));
        let y = x.upsample_bilinear(4, 4).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.75));
        let x = tape.constant(Tensor::full([1, 3, 3, 5], -2.0));
        let y = x.upsample_bilinear(7, 11).unwrap().value();
        assert!(y.data().iter().all(|&v| (v + 2.0).abs() < 1e-6));
        assert!(matches!(x.upsample_bilinear(0, 11), Err(TensorError::Argument(_))));
    }

    #[test]
    fn upsample_doubling_matches_hand_values() {
        // 1-D row [0, 1] doubled: centers at -0.25, 0.25, 0.75, 1.25 -> clamp/interp
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = x.upsample_bilinear(1, 4).unwrap().value();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
