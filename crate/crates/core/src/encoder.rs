//! Weight-shared backbone over the bi-temporal pair and level-wise feature
//! differencing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Pool, Var};
use crate::nn::{BatchNorm2d, Conv2d, Ctx};
use crate::params::ParamStore;
use crate::tensor::{Result, Scalar, TensorError};

/// Total downsampling of the deepest pyramid level.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone_kind: String,
    pub base_channels: usize,
    pub blocks: [usize; 4],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
}

fn default_in_channels() -> usize {
    3
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { backbone_kind: RESNET_TINY.into(), base_channels: 64, blocks: [1, 1, 1, 1], in_channels: 3 }
    }
}

pub const RESNET_TINY: &str = "resnet-tiny";

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_kind != RESNET_TINY {
            return Err(TensorError::Config(format!(
                "unknown backbone_kind {:?}; available: [{RESNET_TINY:?}]",
                self.backbone_kind
            )));
        }
        if self.base_channels < 8 {
            return Err(TensorError::Config(format!("base_channels must be >= 8, got {}", self.base_channels)));
        }
        if self.blocks.contains(&0) {
            return Err(TensorError::Config(format!("every stage needs at least one block, got {:?}", self.blocks)));
        }
        if self.in_channels == 0 {
            return Err(TensorError::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of each pyramid level: `C, 2C, 4C, 8C`.
    pub fn level_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

/// Four feature maps at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'t, T: Scalar> {
    pub levels: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> FeaturePyramid<'t, T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|v| v.shape()).collect()
    }

    /// Batch slice `[start, start + len)` of every level.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        let levels = self.levels.iter().map(|v| v.narrow(0, start, len)).collect::<Result<_>>()?;
        Ok(Self { levels })
    }
}

/// `a_l - b_l` for every level.
pub fn feature_difference<'t, T: Scalar>(
    a: &FeaturePyramid<'t, T>,
    b: &FeaturePyramid<'t, T>,
) -> Result<FeaturePyramid<'t, T>> {
    if a.levels.len() != b.levels.len() {
        return Err(TensorError::Shape(format!(
            "pyramids have {} and {} levels",
            a.levels.len(),
            b.levels.len()
        )));
    }
    let levels = a.levels.iter().zip(&b.levels).map(|(x, y)| x.sub(y)).collect::<Result<_>>()?;
    Ok(FeaturePyramid { levels })
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let down = (stride != 1 || c_in != c_out).then(|| {
            (
                Conv2d::new(store, &format!("{name}.down.conv"), c_in, c_out, 1, stride, 0, false, rng),
                BatchNorm2d::new(store, &format!("{name}.down.bn"), c_out, rng),
            )
        });
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c_out, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c_out, rng),
            down,
        }
    }

    fn forward<'t, T: Scalar>(&self, ctx: &mut Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, &y)?.relu()?;
        let y = self.conv2.forward(ctx, &y)?;
        let y = self.bn2.forward(ctx, &y)?;
        let skip = match &self.down {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, &s)?
            }
            None => *x,
        };
        y.add(&skip)?.relu()
    }
}

/// Compact residual CNN: stride-2 stem conv and stride-2 max pool, then four
/// stages of basic residual blocks with channels `C, 2C, 4C, 8C`.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: EncoderConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let channels = config.level_channels();
        let c = config.base_channels;
        let stem_conv = Conv2d::new(store, &format!("{prefix}.stem.conv"), config.in_channels, c, 3, 2, 1, false, rng);
        let stem_bn = BatchNorm2d::new(store, &format!("{prefix}.stem.bn"), c, rng);
        let mut stages = Vec::new();
        let mut c_in = c;
        for (s, (&c_out, &n)) in channels.iter().zip(&config.blocks).enumerate() {
            let blocks = (0..n)
                .map(|b| {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    let name = format!("{prefix}.stage{}.block{}", s + 1, b + 1);
                    BasicBlock::new(store, &name, if b == 0 { c_in } else { c_out }, c_out, stride, rng)
                })
                .collect();
            stages.push(blocks);
            c_in = c_out;
        }
        Ok(Self { config: config.clone(), stem_conv, stem_bn, stages })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Pyramid of a single `[N, in_channels, H, W]` batch.
    pub fn forward<'t, T: Scalar>(&self, ctx: &mut Ctx<'t, '_, T>, image: &Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let (_, c, h, w) = image.try_value()?.dims4()?;
        if c != self.config.in_channels {
            return Err(TensorError::Shape(format!(
                "backbone expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(TensorError::Shape(format!("input {h}x{w} is not divisible by {MAX_STRIDE}")));
        }
        let x = self.stem_conv.forward(ctx, image)?;
        let x = self.stem_bn.forward(ctx, &x)?.relu()?;
        let mut x = x.pool(Pool::Max { kernel: 2, stride: 2 })?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, &x)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

/// Runs one backbone over both temporal images. The pair is stacked along the
/// batch axis so both streams see the same parameters in a single pass.
#[derive(Debug, Clone)]
pub struct SiameseEncoder {
    pub backbone: Backbone,
}

impl SiameseEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self { backbone: Backbone::new(store, prefix, config, rng)? })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &mut Ctx<'t, '_, T>,
        a: &Var<'t, T>,
        b: &Var<'t, T>,
    ) -> Result<(FeaturePyramid<'t, T>, FeaturePyramid<'t, T>)> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb {
            return Err(TensorError::Shape(format!("image pair shapes differ: {sa:?} vs {sb:?}")));
        }
        let n = sa[0];
        let both = ctx.tape.concat(0, &[*a, *b])?;
        let pyramid = self.backbone.forward(ctx, &both)?;
        Ok((pyramid.narrow_batch(0, n)?, pyramid.narrow_batch(n, n)?))
    }

    /// Feature-difference pyramid `F_l = F_l^A - F_l^B`.
    pub fn difference<'t, T: Scalar>(
        &self,
        ctx: &mut Ctx<'t, '_, T>,
        a: &Var<'t, T>,
        b: &Var<'t, T>,
    ) -> Result<FeaturePyramid<'t, T>> {
        let (fa, fb) = self.forward(ctx, a, b)?;
        feature_difference(&fa, &fb)
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

    fn config(c: usize) -> EncoderConfig {
        EncoderConfig { base_channels: c, ..EncoderConfig::default() }
    }

    fn image(seed: u64, n: usize, size: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3, size, size], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn pyramid_shape_law() {
        for (size, c) in [(64, 16), (128, 32)] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut store = ParamStore::new();
            let enc = SiameseEncoder::new(&mut store, "encoder", &config(c), &mut rng).unwrap();
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &mut store, Mode::Train);
            let a = tape.constant(image(1, 1, size));
            let b = tape.constant(image(2, 1, size));
            let (fa, fb) = enc.forward(&mut ctx, &a, &b).unwrap();
            let expected: Vec<Vec<usize>> =
                (0..4).map(|l| vec![1, c << l, size >> (l + 2), size >> (l + 2)]).collect();
            assert_eq!(fa.shapes(), expected);
            assert_eq!(fb.shapes(), expected);
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = SiameseEncoder::new(&mut store, "encoder", &config(8), &mut rng).unwrap();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let a = tape.constant(Tensor::<f32>::zeros([1, 3, 48, 48]));
        assert!(matches!(enc.forward(&mut ctx, &a, &a), Err(TensorError::Shape(_))));
    }

    #[test]
    fn identical_images_give_zero_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = SiameseEncoder::new(&mut store, "encoder", &config(8), &mut rng).unwrap();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Train);
        let a = tape.constant(image(5, 2, 64));
        let b = tape.constant(image(5, 2, 64));
        let diff = enc.difference(&mut ctx, &a, &b).unwrap();
        for level in &diff.levels {
            assert!(level.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn difference_is_antisymmetric_and_identity_on_zero() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rand = |s: [usize; 4]| tape.constant(Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0)));
        let a = FeaturePyramid { levels: vec![rand([1, 2, 4, 4]), rand([1, 4, 2, 2])] };
        let b = FeaturePyramid { levels: vec![rand([1, 2, 4, 4]), rand([1, 4, 2, 2])] };
        let ab = feature_difference(&a, &b).unwrap();
        let ba = feature_difference(&b, &a).unwrap();
        for (x, y) in ab.levels.iter().zip(&ba.levels) {
            assert_eq!(*x.value(), y.value().map(|v| -v));
        }
        let zero = FeaturePyramid {
            levels: vec![tape.constant(Tensor::zeros([1, 2, 4, 4])), tape.constant(Tensor::zeros([1, 4, 2, 2]))],
        };
        let same = feature_difference(&a, &zero).unwrap();
        for (x, y) in same.levels.iter().zip(&a.levels) {
            assert_eq!(*x.value(), *y.value());
        }
        let short = FeaturePyramid { levels: vec![a.levels[0]] };
        assert!(feature_difference(&a, &short).is_err());
        let wrong = FeaturePyramid { levels: vec![a.levels[1], a.levels[0]] };
        assert!(matches!(feature_difference(&a, &wrong), Err(TensorError::Shape(_))));
    }

    #[test]
    fn shared_parameter_affects_both_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = SiameseEncoder::new(&mut store, "encoder", &config(8), &mut rng).unwrap();
        let run = |store: &mut ParamStore<f32>| {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, store, Mode::Eval);
            let a = tape.constant(image(1, 1, 64));
            let b = tape.constant(image(2, 1, 64));
            let (fa, fb) = enc.forward(&mut ctx, &a, &b).unwrap();
            ((*fa.levels[3].value()).clone(), (*fb.levels[3].value()).clone())
        };
        let (a0, b0) = run(&mut store);
        let (a1, b1) = run(&mut store);
        assert_eq!((&a0, &b0), (&a1, &b1));
        let id = store.find("encoder.stem.conv.weight").unwrap();
        store.param_mut(id).value.data_mut()[0] += 0.5;
        let (a2, b2) = run(&mut store);
        assert_ne!(a0, a2);
        assert_ne!(b0, b2);
    }
}
