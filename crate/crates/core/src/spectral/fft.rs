//! One-dimensional complex transforms used along the channel axis.
//!
//! Lengths that are powers of two go through an iterative radix-2
//! Cooley-Tukey transform; every other length uses a direct O(n^2) sum with a
//! precomputed twiddle table. Twiddles are computed in f64 and rounded once.

use std::f64::consts::PI;

use crate::tensor::Scalar;

/// Transform direction: `Forward` uses `e^{-j2πkn/N}`, `Inverse` uses `e^{+j2πkn/N}`.
/// Neither direction normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Inverse,
            Direction::Inverse => Direction::Forward,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Forward => -1.0,
            Direction::Inverse => 1.0,
        }
    }
}

/// Reusable transform of a fixed length.
#[derive(Debug, Clone)]
pub struct Plan<T: Scalar> {
    len: usize,
    direction: Direction,
    /// `twiddle[m] = e^{sign·j2πm/len}` for `m < len`.
    cos: Vec<T>,
    sin: Vec<T>,
    scratch_re: Vec<T>,
    scratch_im: Vec<T>,
}

impl<T: Scalar> Plan<T> {
    pub fn new(len: usize, direction: Direction) -> Self {
        assert!(len > 0, "transform length must be positive");
        let sign = direction.sign();
        let (cos, sin) = (0..len)
            .map(|m| {
                let angle = sign * 2.0 * PI * m as f64 / len as f64;
                (T::of(angle.cos()), T::of(angle.sin()))
            })
            .unzip();
        Self { len, direction, cos, sin, scratch_re: vec![T::zero(); len], scratch_im: vec![T::zero(); len] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Transforms `(re, im)` in place.
    pub fn process(&mut self, re: &mut [T], im: &mut [T]) {
        assert_eq!(re.len(), self.len);
        assert_eq!(im.len(), self.len);
        if self.len.is_power_of_two() {
            self.radix2(re, im);
        } else {
            self.direct(re, im);
        }
    }

    fn direct(&mut self, re: &mut [T], im: &mut [T]) {
        let n = self.len;
        for k in 0..n {
            let (mut acc_re, mut acc_im) = (T::zero(), T::zero());
            for c in 0..n {
                let m = (k * c) % n;
                let (wr, wi) = (self.cos[m], self.sin[m]);
                acc_re = acc_re + re[c] * wr - im[c] * wi;
                acc_im = acc_im + re[c] * wi + im[c] * wr;
            }
            self.scratch_re[k] = acc_re;
            self.scratch_im[k] = acc_im;
        }
        re.copy_from_slice(&self.scratch_re);
        im.copy_from_slice(&self.scratch_im);
    }

    fn radix2(&mut self, re: &mut [T], im: &mut [T]) {
        let n = self.len;
        if n == 1 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let (wr, wi) = (self.cos[k * stride], self.sin[k * stride]);
                    let (u, v) = (start + k, start + k + half);
                    let tr = re[v] * wr - im[v] * wi;
                    let ti = re[v] * wi + im[v] * wr;
                    re[v] = re[u] - tr;
                    im[v] = im[u] - ti;
                    re[u] = re[u] + tr;
                    im[u] = im[u] + ti;
                }
            }
            size *= 2;
        }
    }
}

/// Applies `plan` to every channel vector of an `[N, C, H, W]` buffer pair and
/// multiplies the result by `scale`.
pub fn transform_channels<T: Scalar>(
    plan: &mut Plan<T>,
    dims: (usize, usize, usize, usize),
    re: &mut [T],
    im: &mut [T],
    scale: T,
) {
    let (n, c, h, w) = dims;
    assert_eq!(c, plan.len());
    let hw = h * w;
    let mut vr = vec![T::zero(); c];
    let mut vi = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            for ch in 0..c {
                vr[ch] = re[base + ch * hw + p];
                vi[ch] = im[base + ch * hw + p];
            }
            plan.process(&mut vr, &mut vi);
            for ch in 0..c {
                re[base + ch * hw + p] = vr[ch] * scale;
                im[base + ch * hw + p] = vi[ch] * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(re: &[f64], im: &[f64], sign: f64) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let mut out = (vec![0.0; n], vec![0.0; n]);
        for k in 0..n {
            for c in 0..n {
                let a = sign * 2.0 * PI * (k * c) as f64 / n as f64;
                out.0[k] += re[c] * a.cos() - im[c] * a.sin();
                out.1[k] += re[c] * a.sin() + im[c] * a.cos();
            }
        }
        out
    }

    #[test]
    fn radix2_and_direct_match_naive() {
        for n in [1, 2, 3, 4, 5, 8, 12, 16, 64] {
            let re: Vec<f64> = (0..n).map(|i| (i as f64 * 1.3).sin()).collect();
            let im: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
            for dir in [Direction::Forward, Direction::Inverse] {
                let (er, ei) = naive(&re, &im, dir.sign());
                let (mut r, mut i) = (re.clone(), im.clone());
                Plan::new(n, dir).process(&mut r, &mut i);
                for k in 0..n {
                    assert!((r[k] - er[k]).abs() < 1e-10, "n={n} k={k}");
                    assert!((i[k] - ei[k]).abs() < 1e-10, "n={n} k={k}");
                }
            }
        }
    }

    #[test]
    fn forward_then_inverse_scales_by_length() {
        let n = 16;
        let re: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (mut r, mut i) = (re.clone(), vec![0.0; n]);
        Plan::new(n, Direction::Forward).process(&mut r, &mut i);
        Plan::new(n, Direction::Inverse).process(&mut r, &mut i);
        for k in 0..n {
            assert!((r[k] / n as f64 - re[k]).abs() < 1e-12);
            assert!(i[k].abs() < 1e-12);
        }
    }
}
