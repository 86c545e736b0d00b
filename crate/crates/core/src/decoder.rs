//! UperNet-style decoder: pyramid pooling over the deepest level, a top-down
//! feature pyramid, multi-level fusion and a sigmoid change head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Pool, Var};
use crate::encoder::FeaturePyramid;
use crate::nn::{Conv2d, Ctx};
use crate::params::ParamStore;
use crate::tensor::{Result, Scalar, TensorError};

/// Total upsampling from the finest pyramid level to the input resolution.
pub const HEAD_UPSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default = "default_fpn_channels")]
    pub fpn_channels: usize,
    #[serde(default = "default_ppm_scales")]
    pub ppm_scales: Vec<usize>,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
}

fn default_fpn_channels() -> usize {
    128
}

fn default_ppm_scales() -> Vec<usize> {
    vec![1, 2, 3, 6]
}

fn default_out_channels() -> usize {
    1
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { fpn_channels: default_fpn_channels(), ppm_scales: default_ppm_scales(), out_channels: 1 }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let d = self.fpn_channels;
        if d < 8 {
            return Err(TensorError::Config(format!("fpn_channels must be >= 8, got {d}")));
        }
        let scales = &self.ppm_scales;
        if scales.is_empty() || scales[0] == 0 || scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TensorError::Config(format!(
                "ppm_scales must be non-empty, positive and strictly increasing, got {scales:?}"
            )));
        }
        if !d.is_multiple_of(scales.len()) {
            return Err(TensorError::Config(format!(
                "fpn_channels {d} is not divisible by the {} pooling scales",
                scales.len()
            )));
        }
        if self.out_channels != 1 {
            return Err(TensorError::Config(format!(
                "the change head produces one probability channel, got out_channels {}",
                self.out_channels
            )));
        }
        Ok(())
    }
}

fn upsample_to<'t, T: Scalar>(x: &Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let (_, _, xh, xw) = x.try_value()?.dims4()?;
    if (xh, xw) == (h, w) {
        Ok(*x)
    } else {
        x.upsample_bilinear(h, w)
    }
}

/// Pyramid pooling over the deepest level.
#[derive(Debug, Clone)]
pub struct Ppm {
    pub scales: Vec<usize>,
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Ppm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.fpn_channels;
        let branch = d / cfg.ppm_scales.len();
        let branches = (0..cfg.ppm_scales.len())
            .map(|i| Conv2d::new(store, &format!("{prefix}.branch{}", i + 1), c_in, branch, 1, 1, 0, true, rng))
            .collect();
        let fuse = Conv2d::new(store, &format!("{prefix}.fuse"), c_in + d, d, 3, 1, 1, true, rng);
        Self { scales: cfg.ppm_scales.clone(), branches, fuse }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, _, h, w) = x.try_value()?.dims4()?;
        let largest = *self.scales.last().expect("validated non-empty");
        if largest > h || largest > w {
            return Err(TensorError::Config(format!(
                "pooling scale {largest} exceeds the deepest feature map {h}x{w}"
            )));
        }
        let mut parts = vec![*x];
        for (&s, conv) in self.scales.iter().zip(&self.branches) {
            let pooled = x.pool(Pool::AdaptiveAvg { size: s })?;
            let y = conv.forward(ctx, &pooled)?.relu()?;
            parts.push(upsample_to(&y, h, w)?);
        }
        let cat = ctx.tape.concat(1, &parts)?;
        self.fuse.forward(ctx, &cat)?.relu()
    }
}

/// Top-down feature pyramid with lateral projections and multi-level fusion.
#[derive(Debug, Clone)]
pub struct Fpn {
    pub laterals: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
    pub fuse: Conv2d,
    level_channels: [usize; 4],
}

impl Fpn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        level_channels: [usize; 4],
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let laterals = (0..3)
            .map(|l| Conv2d::new(store, &format!("{prefix}.lateral{}", l + 1), level_channels[l], d, 1, 1, 0, true, rng))
            .collect();
        let smooth =
            (0..3).map(|l| Conv2d::new(store, &format!("{prefix}.smooth{}", l + 1), d, d, 3, 1, 1, true, rng)).collect();
        let fuse = Conv2d::new(store, &format!("{prefix}.fuse"), 4 * d, d, 3, 1, 1, true, rng);
        Self { laterals, smooth, fuse, level_channels }
    }

    /// The four `D`-channel pyramid outputs before fusion; the deepest one is
    /// `ppm_out` itself.
    pub fn levels<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        pyramid: &FeaturePyramid<'t, T>,
        ppm_out: &Var<'t, T>,
    ) -> Result<Vec<Var<'t, T>>> {
        if pyramid.levels.len() != 4 {
            return Err(TensorError::Shape(format!("expected 4 pyramid levels, got {}", pyramid.levels.len())));
        }
        for (l, (level, &c)) in pyramid.levels.iter().zip(&self.level_channels).enumerate() {
            let got = level.try_value()?.dims4()?.1;
            if got != c {
                return Err(TensorError::Shape(format!("pyramid level {} has {got} channels, expected {c}", l + 1)));
            }
        }
        let mut inner = *ppm_out;
        let mut outs = vec![*ppm_out];
        for l in (0..3).rev() {
            let lateral = self.laterals[l].forward(ctx, &pyramid.levels[l])?;
            let (_, _, h, w) = lateral.try_value()?.dims4()?;
            inner = lateral.add(&upsample_to(&inner, h, w)?)?;
            outs.push(self.smooth[l].forward(ctx, &inner)?);
        }
        outs.reverse();
        Ok(outs)
    }

    /// Fused `[N, D, H/4, W/4]` representation.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        pyramid: &FeaturePyramid<'t, T>,
        ppm_out: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let levels = self.levels(ctx, pyramid, ppm_out)?;
        let (_, _, h, w) = levels[0].try_value()?.dims4()?;
        let up = levels.iter().map(|v| upsample_to(v, h, w)).collect::<Result<Vec<_>>>()?;
        let cat = ctx.tape.concat(1, &up)?;
        self.fuse.forward(ctx, &cat)?.relu()
    }
}

/// `3x3 conv → ReLU → 1x1 conv → bilinear ×4 → sigmoid`.
#[derive(Debug, Clone)]
pub struct ChangeHead {
    pub conv: Conv2d,
    pub out: Conv2d,
}

impl ChangeHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{prefix}.conv"), d, d, 3, 1, 1, true, rng),
            out: Conv2d::new(store, &format!("{prefix}.out"), d, 1, 1, 1, 0, true, rng),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, fused: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, _, h, w) = fused.try_value()?.dims4()?;
        let y = self.conv.forward(ctx, fused)?.relu()?;
        let logits = self.out.forward(ctx, &y)?;
        logits.upsample_bilinear(h * HEAD_UPSAMPLE, w * HEAD_UPSAMPLE)?.sigmoid()
    }
}

#[derive(Debug, Clone)]
pub struct UperNetDecoder {
    pub ppm: Ppm,
    pub fpn: Fpn,
    pub head: ChangeHead,
}

impl UperNetDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        level_channels: [usize; 4],
        cfg: &DecoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.fpn_channels;
        Ok(Self {
            ppm: Ppm::new(store, &format!("{prefix}.ppm"), level_channels[3], cfg, rng),
            fpn: Fpn::new(store, &format!("{prefix}.fpn"), level_channels, d, rng),
            head: ChangeHead::new(store, &format!("{prefix}.head"), d, rng),
        })
    }

    /// Change probabilities `[N, 1, H, W]` from a change-aware pyramid.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, pyramid: &FeaturePyramid<'t, T>) -> Result<Var<'t, T>> {
        let deepest = pyramid
            .levels
            .last()
            .ok_or_else(|| TensorError::Shape("empty pyramid".into()))?;
        let ppm_out = self.ppm.forward(ctx, deepest)?;
        let fused = self.fpn.forward(ctx, pyramid, &ppm_out)?;
        self.head.forward(ctx, &fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Direct per-element reference implementations.

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let xv = |b: usize, c: usize, i: isize, j: isize| {
            if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
                0.0
            } else {
                x.data()[((b * ci + c) * h + i as usize) * wd + j as usize]
            }
        };
        Tensor::from_fn([n, co, oh, ow], |idx| {
            let (j, i) = (idx % ow, (idx / ow) % oh);
            let (o, bb) = ((idx / (ow * oh)) % co, idx / (ow * oh * co));
            let mut acc = b.data()[o];
            for c in 0..ci {
                for u in 0..k {
                    for v in 0..k {
                        let wv = w.data()[((o * ci + c) * k + u) * k + v];
                        acc += wv * xv(bb, c, (i + u) as isize - pad as isize, (j + v) as isize - pad as isize);
                    }
                }
            }
            acc
        })
    }

    fn naive_adaptive(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        Tensor::from_fn([n, c, s, s], |idx| {
            let (j, i, plane) = (idx % s, (idx / s) % s, idx / (s * s));
            let (r0, r1) = (i * h / s, ((i + 1) * h).div_ceil(s));
            let (c0, c1) = (j * w / s, ((j + 1) * w).div_ceil(s));
            let mut acc = 0.0;
            for r in r0..r1 {
                for q in c0..c1 {
                    acc += x.data()[plane * h * w + r * w + q];
                }
            }
            acc / ((r1 - r0) * (c1 - c0)) as f64
        })
    }

    fn naive_upsample(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let src = |o: usize, out: usize, inp: usize| {
            let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, s - lo as f64)
        };
        Tensor::from_fn([n, c, oh, ow], |idx| {
            let (j, i, plane) = (idx % ow, (idx / ow) % oh, idx / (ow * oh));
            let (r0, r1, fr) = src(i, oh, h);
            let (c0, c1, fc) = src(j, ow, w);
            let at = |r: usize, q: usize| x.data()[plane * h * w + r * w + q];
            (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1)) + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
        })
    }

    fn relu(x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| v.max(0.0))
    }

    fn cat(parts: &[Tensor<f64>]) -> Tensor<f64> {
        let (n, _, h, w) = parts[0].dims4().unwrap();
        let c: usize = parts.iter().map(|p| p.dims4().unwrap().1).sum();
        let mut data = Vec::new();
        for b in 0..n {
            for p in parts {
                let per = p.numel() / n;
                data.extend_from_slice(&p.data()[b * per..(b + 1) * per]);
            }
        }
        Tensor::new([n, c, h, w], data).unwrap()
    }

    fn conv_ref(store: &ParamStore<f64>, conv: &Conv2d, x: &Tensor<f64>) -> Tensor<f64> {
        let w = &store.param(conv.weight).value;
        let b = &store.param(conv.bias.unwrap()).value;
        naive_conv(x, w, b, conv.padding)
    }

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        for p in store.params_mut() {
            if p.name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
            }
        }
    }

    fn micro() -> DecoderConfig {
        DecoderConfig { fpn_channels: 16, ppm_scales: vec![1, 2], out_channels: 1 }
    }

    #[test]
    fn config_validation() {
        assert!(DecoderConfig::default().validate().is_ok());
        assert!(micro().validate().is_ok());
        let bad = |f: fn(&mut DecoderConfig)| {
            let mut c = DecoderConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(TensorError::Config(_)))
        };
        assert!(bad(|c| c.ppm_scales = vec![2, 1, 3, 6]));
        assert!(bad(|c| c.ppm_scales = vec![0, 1, 2, 3]));
        assert!(bad(|c| c.fpn_channels = 4));
        assert!(bad(|c| c.fpn_channels = 130));
        assert!(bad(|c| c.out_channels = 2));
    }

    #[test]
    fn ppm_matches_composition_oracle_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cfg = DecoderConfig::default();
        let ppm = Ppm::new(&mut store, "ppm", 12, &cfg, &mut rng);
        randomize_biases(&mut store, &mut rng);
        let x = random(&mut rng, [2, 12, 8, 8]);

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let out = ppm.forward(&ctx, &tape.constant(x.clone())).unwrap().value();
        assert_eq!(out.shape(), &[2, 128, 8, 8]);

        let mut parts = vec![x.clone()];
        for (&s, conv) in ppm.scales.iter().zip(&ppm.branches) {
            let pooled = naive_adaptive(&x, s);
            assert_eq!(pooled.shape(), &[2, 12, s, s]);
            let y = relu(&conv_ref(&store, conv, &pooled));
            parts.push(naive_upsample(&y, 8, 8));
        }
        let expected = relu(&conv_ref(&store, &ppm.fuse, &cat(&parts)));
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-10);
    }

    #[test]
    fn ppm_constant_input_gives_constant_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let ppm = Ppm::new(&mut store, "ppm", 4, &micro(), &mut rng);
        // Fuse with a pointwise kernel so zero padding cannot break spatial constancy.
        let fuse_w = &mut store.param_mut(ppm.fuse.weight).value;
        let (co, ci) = (fuse_w.shape()[0], fuse_w.shape()[1]);
        for o in 0..co {
            for c in 0..ci {
                for t in 0..9 {
                    fuse_w.data_mut()[(o * ci + c) * 9 + t] = if t == 4 { 0.1 * ((o + c) % 5) as f64 } else { 0.0 };
                }
            }
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let x = tape.constant(Tensor::full([1, 4, 6, 6], 0.7));
        let out = ppm.forward(&ctx, &x).unwrap().value();
        for plane in out.data().chunks(36) {
            assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn ppm_rejects_scale_above_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let ppm = Ppm::new(&mut store, "ppm", 4, &DecoderConfig::default(), &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let x = tape.constant(Tensor::zeros([1, 4, 4, 4]));
        assert!(matches!(ppm.forward(&ctx, &x), Err(TensorError::Config(_))));
    }

    fn pyramid_tensors(rng: &mut ChaCha8Rng, c: usize, size: usize) -> Vec<Tensor<f64>> {
        (0..4).map(|l| random(rng, [1, c << l, size >> (l + 2), size >> (l + 2)])).collect()
    }

    #[test]
    fn fpn_matches_composition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let d = 8;
        let fpn = Fpn::new(&mut store, "fpn", [4, 8, 16, 32], d, &mut rng);
        randomize_biases(&mut store, &mut rng);
        let levels = pyramid_tensors(&mut rng, 4, 64);
        let ppm_out = random(&mut rng, [1, d, 2, 2]);

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let pyramid = FeaturePyramid { levels: levels.iter().map(|t| tape.constant(t.clone())).collect() };
        let out = fpn.forward(&ctx, &pyramid, &tape.constant(ppm_out.clone())).unwrap().value();
        assert_eq!(out.shape(), &[1, d, 16, 16]);

        let mut inner = ppm_out.clone();
        let mut outs = vec![ppm_out];
        for l in (0..3).rev() {
            let lateral = conv_ref(&store, &fpn.laterals[l], &levels[l]);
            let (_, _, h, w) = lateral.dims4().unwrap();
            inner = lateral.zip_map(&naive_upsample(&inner, h, w), |a, b| a + b).unwrap();
            outs.push(conv_ref(&store, &fpn.smooth[l], &inner));
        }
        outs.reverse();
        let up: Vec<_> = outs.iter().map(|t| naive_upsample(t, 16, 16)).collect();
        let expected = relu(&conv_ref(&store, &fpn.fuse, &cat(&up)));
        assert!(out.max_abs_diff(&expected).unwrap() < 1e-6);
    }

    fn set_identity(store: &mut ParamStore<f64>, conv: &Conv2d) {
        let w = &mut store.param_mut(conv.weight).value;
        let (co, ci, k, _) = w.dims4().unwrap();
        let centre = (k / 2) * k + k / 2;
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let (t, c, o) = (i % (k * k), (i / (k * k)) % ci, i / (k * k * ci));
            *v = if o == c && t == centre { 1.0 } else { 0.0 };
        }
        assert!(co <= ci);
    }

    #[test]
    fn null_top_down_path_passes_level_one_lateral() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let d = 8;
        let fpn = Fpn::new(&mut store, "fpn", [8, 16, 32, 64], d, &mut rng);
        for conv in &fpn.smooth {
            set_identity(&mut store, conv);
        }
        let mut levels = pyramid_tensors(&mut rng, 8, 64);
        for l in &mut levels[1..] {
            *l = Tensor::zeros(l.shape().to_vec());
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let pyramid = FeaturePyramid { levels: levels.iter().map(|t| tape.constant(t.clone())).collect() };
        let ppm_out = tape.constant(Tensor::zeros([1, d, 2, 2]));
        let outs = fpn.levels(&ctx, &pyramid, &ppm_out).unwrap();
        let lateral = fpn.laterals[0].forward(&ctx, &pyramid.levels[0]).unwrap();
        assert_eq!(*outs[0].value(), *lateral.value());
        let wrong = FeaturePyramid { levels: vec![pyramid.levels[1]; 4] };
        assert!(matches!(fpn.levels(&ctx, &wrong, &ppm_out), Err(TensorError::Shape(_))));
    }

    #[test]
    fn head_outputs_probabilities_at_full_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let dec = UperNetDecoder::new(&mut store, "decoder", [8, 16, 32, 64], &micro(), &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let levels = (0..4)
            .map(|l| tape.constant(Tensor::from_fn([2, 8 << l, 16 >> l, 16 >> l], |_| rng.gen_range(-3.0..3.0))))
            .collect();
        let out = dec.forward(&ctx, &FeaturePyramid { levels }).unwrap().value();
        assert_eq!(out.shape(), &[2, 1, 64, 64]);
        assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
