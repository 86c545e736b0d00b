//! Channel-axis Fourier transforms and the ChangeFFT module.
//!
//! For every spatial position of an `[N, C, H, W]` feature map the `C`
//! channel values are treated as a signal and transformed with the
//! unnormalized DFT `X[k] = Σ_c x[c]·e^{-j2πkc/C}`; the inverse carries the
//! `1/C` factor. ChangeFFT maps each level of a feature-difference pyramid
//! through `DFT → FDConv → SiLU(re), SiLU(im) → FDConv → IDFT → real part`,
//! where an FDConv is a complex `C×C` linear map over frequency bins plus a
//! complex bias.

pub mod fft;

use rand::Rng;

use crate::autodiff::{OpKind, Var};
use crate::nn::Ctx;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tensor, TensorError};
use fft::{transform_channels, Direction, Plan};

/// Noise amplitude added to the identity initialization of FDConv weights.
pub const FDCONV_INIT_NOISE: f64 = 0.01;

/// Plain complex tensor: real and imaginary planes of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor<T: Scalar = f32> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(re: Tensor<T>, im: Tensor<T>) -> Result<Self> {
        re.expect_same_shape(&im)?;
        Ok(Self { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }
}

/// Complex value on the tape, carried as two real vars.
#[derive(Debug, Clone, Copy)]
pub struct ComplexVar<'t, T: Scalar = f32> {
    pub re: Var<'t, T>,
    pub im: Var<'t, T>,
}

impl<'t, T: Scalar> ComplexVar<'t, T> {
    pub fn value(&self) -> ComplexTensor<T> {
        ComplexTensor { re: (*self.re.value()).clone(), im: (*self.im.value()).clone() }
    }

    /// SiLU applied to the real and imaginary parts independently.
    pub fn silu(&self) -> Result<Self> {
        Ok(Self { re: self.re.silu()?, im: self.im.silu()? })
    }
}

/// Channel transform of `re + j·im` (imaginary part zero when `im` is `None`),
/// multiplied by `scale`. The adjoint of `scale·F` is `scale·F^H`, i.e. the
/// same transform in the opposite direction.
fn channel_transform<'t, T: Scalar>(
    re: &Var<'t, T>,
    im: Option<&Var<'t, T>>,
    direction: Direction,
    scale: f64,
) -> Result<ComplexVar<'t, T>> {
    let xr = re.try_value()?;
    let dims = xr.dims4()?;
    let (n, c, h, w) = dims;
    let mut out_re = xr.data().to_vec();
    let mut out_im = match im {
        Some(im) => {
            let xi = im.try_value()?;
            xr.expect_same_shape(&xi)?;
            xi.data().to_vec()
        }
        None => vec![T::zero(); out_re.len()],
    };
    let s = T::of(scale);
    transform_channels(&mut Plan::new(c, direction), dims, &mut out_re, &mut out_im, s);

    // Packed [N, 2C, H, W]: real channels first, then imaginary.
    let hw = h * w;
    let mut packed = Vec::with_capacity(2 * out_re.len());
    for b in 0..n {
        packed.extend_from_slice(&out_re[b * c * hw..(b + 1) * c * hw]);
        packed.extend_from_slice(&out_im[b * c * hw..(b + 1) * c * hw]);
    }
    let mut inputs = vec![*re];
    inputs.extend(im.copied());
    let node = re.record(
        OpKind::ChannelDft,
        &inputs,
        Tensor::from_parts(vec![n, 2 * c, h, w], packed),
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut gr = Vec::with_capacity(n * c * hw);
            let mut gi = Vec::with_capacity(n * c * hw);
            for b in 0..n {
                gr.extend_from_slice(&gd[(2 * b) * c * hw..(2 * b + 1) * c * hw]);
                gi.extend_from_slice(&gd[(2 * b + 1) * c * hw..(2 * b + 2) * c * hw]);
            }
            transform_channels(&mut Plan::new(c, direction.flip()), dims, &mut gr, &mut gi, s);
            let mut grads = vec![needs[0].then(|| Tensor::from_parts(vec![n, c, h, w], gr))];
            if needs.len() > 1 {
                grads.push(needs[1].then(|| Tensor::from_parts(vec![n, c, h, w], gi)));
            }
            grads
        }),
    )?;
    Ok(ComplexVar { re: node.narrow(1, 0, c)?, im: node.narrow(1, c, c)? })
}

/// Unnormalized forward DFT along the channel axis of a real `[N, C, H, W]` map.
pub fn dft_channels<'t, T: Scalar>(x: &Var<'t, T>) -> Result<ComplexVar<'t, T>> {
    channel_transform(x, None, Direction::Forward, 1.0)
}

/// Forward DFT of a complex input.
pub fn dft_channels_complex<'t, T: Scalar>(x: &ComplexVar<'t, T>) -> Result<ComplexVar<'t, T>> {
    channel_transform(&x.re, Some(&x.im), Direction::Forward, 1.0)
}

/// Inverse DFT along the channel axis with `1/C` normalization.
pub fn idft_channels<'t, T: Scalar>(spec: &ComplexVar<'t, T>) -> Result<ComplexVar<'t, T>> {
    let c = spec.re.try_value()?.dims4()?.1;
    channel_transform(&spec.re, Some(&spec.im), Direction::Inverse, 1.0 / c as f64)
}

/// Learnable complex linear map over frequency bins:
/// `out[k] = Σ_c W[k,c]·spec[c] + B[k]`.
#[derive(Debug, Clone)]
pub struct FdConv {
    pub channels: usize,
    pub weight_re: ParamId,
    pub weight_im: ParamId,
    pub bias_re: ParamId,
    pub bias_im: ParamId,
}

impl FdConv {
    /// Complex identity plus uniform noise; zero bias.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            weight_re: store.add(
                format!("{name}.weight_re"),
                &[channels, channels],
                Init::IdentityPlusUniform(FDCONV_INIT_NOISE),
                rng,
            ),
            weight_im: store.add(
                format!("{name}.weight_im"),
                &[channels, channels],
                Init::Uniform(FDCONV_INIT_NOISE),
                rng,
            ),
            bias_re: store.add(format!("{name}.bias_re"), &[channels], Init::Zeros, rng),
            bias_im: store.add(format!("{name}.bias_im"), &[channels], Init::Zeros, rng),
        }
    }

    /// Real scalars held by one FDConv: `2·(C² + C)`.
    pub fn scalar_count(&self) -> usize {
        2 * (self.channels * self.channels + self.channels)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, spec: &ComplexVar<'t, T>) -> Result<ComplexVar<'t, T>> {
        let c = self.channels;
        let wr = ctx.p(self.weight_re);
        let wi = ctx.p(self.weight_im);
        let (br, bi) = (ctx.p(self.bias_re), ctx.p(self.bias_im));
        fdconv(spec, &wr, &wi, &br, &bi).map_err(|e| match e {
            TensorError::Shape(msg) => TensorError::Shape(format!("fdconv with {c} channels: {msg}")),
            other => other,
        })
    }
}

/// Complex linear map with explicitly supplied weight/bias vars, expanded as
/// `re = F^R·W^R − F^I·W^I + B_R`, `im = F^R·W^I + F^I·W^R + B_I`.
pub fn fdconv<'t, T: Scalar>(
    spec: &ComplexVar<'t, T>,
    weight_re: &Var<'t, T>,
    weight_im: &Var<'t, T>,
    bias_re: &Var<'t, T>,
    bias_im: &Var<'t, T>,
) -> Result<ComplexVar<'t, T>> {
    let (_, c, _, _) = spec.re.try_value()?.dims4()?;
    let side = weight_re.try_value()?.shape().to_vec();
    if side != [c, c] || weight_im.try_value()?.shape() != [c, c] {
        return Err(TensorError::Shape(format!("spectrum has {c} bins, weight is {side:?}")));
    }
    let wr = weight_re.reshape(&[c, c, 1, 1])?;
    let wi = weight_im.reshape(&[c, c, 1, 1])?;
    let re = spec.re.conv2d(&wr, Some(bias_re), 1, 0)?.sub(&spec.im.conv2d(&wi, None, 1, 0)?)?;
    let im = spec.re.conv2d(&wi, Some(bias_im), 1, 0)?.add(&spec.im.conv2d(&wr, None, 1, 0)?)?;
    Ok(ComplexVar { re, im })
}

/// Two FDConv stages per pyramid level.
#[derive(Debug, Clone)]
pub struct ChangeFft {
    pub levels: Vec<[FdConv; 2]>,
}

impl ChangeFft {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: &[usize], rng: &mut impl Rng) -> Self {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                [
                    FdConv::new(store, &format!("{prefix}.level{}.stage1", l + 1), c, rng),
                    FdConv::new(store, &format!("{prefix}.level{}.stage2", l + 1), c, rng),
                ]
            })
            .collect();
        Self { levels }
    }

    /// Real scalars of the two stages at level `l` (0-based).
    pub fn level_scalar_count(&self, l: usize) -> usize {
        self.levels[l].iter().map(FdConv::scalar_count).sum()
    }

    pub fn forward_level<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, l: usize, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let [first, second] = &self.levels[l];
        let spec = dft_channels(x)?;
        let spec = first.forward(ctx, &spec)?.silu()?;
        let spec = second.forward(ctx, &spec)?;
        Ok(idft_channels(&spec)?.re)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, diffs: &[Var<'t, T>]) -> Result<Vec<Var<'t, T>>> {
        if diffs.len() != self.levels.len() {
            return Err(TensorError::Config(format!(
                "ChangeFFT has {} levels, pyramid has {}",
                self.levels.len(),
                diffs.len()
            )));
        }
        diffs.iter().enumerate().map(|(l, x)| self.forward_level(ctx, l, x)).collect()
    }
}
