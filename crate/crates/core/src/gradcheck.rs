//! Central finite-difference checks of reverse-mode gradients.
//!
//! All checks run at f64. A coordinate passes when
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor) < tolerance`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, OpKind, Pool, Tape, Var};
use crate::model::{ChangeDetector, ModelConfig};
use crate::nn::Mode;
use crate::spectral::{dft_channels, fdconv, idft_channels, ComplexVar};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

impl GradCheckConfig {
    pub fn relative_error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub label: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.mismatches.extend(other.mismatches);
    }

    fn record(&mut self, cfg: &GradCheckConfig, label: &str, index: usize, analytic: f64, numeric: f64) {
        let rel_err = cfg.relative_error(analytic, numeric);
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err);
        if !(rel_err < cfg.tolerance) {
            self.mismatches.push(Mismatch { label: label.to_string(), index, analytic, numeric, rel_err });
        }
    }
}

/// Compares analytic gradients with central differences on an arbitrary
/// state. `perturb(state, coord, delta)` shifts one coordinate and `loss`
/// re-evaluates the objective.
pub fn check_coordinates<S, C: Copy>(
    state: &mut S,
    cfg: &GradCheckConfig,
    coords: &[(String, C, usize, f64)],
    mut perturb: impl FnMut(&mut S, C, usize, f64),
    mut loss: impl FnMut(&mut S) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for (label, coord, index, analytic) in coords {
        perturb(state, *coord, *index, cfg.step);
        let plus = loss(state)?;
        perturb(state, *coord, *index, -2.0 * cfg.step);
        let minus = loss(state)?;
        perturb(state, *coord, *index, cfg.step);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        report.record(cfg, label, *index, *analytic, numeric);
    }
    Ok(report)
}

type OpFn = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// One differentiable primitive with fixed inputs.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub kind: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    pub op: OpFn,
}

/// Checks every input coordinate of `case` against the projection
/// `L = Σ r ⊙ op(inputs)` with a fixed random `r`.
pub fn check_primitive(
    case: &PrimitiveCase,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
    seed: u64,
) -> Result<GradCheckReport> {
    let projection = |out: &Tensor<f64>| -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(out.shape().to_vec(), |_| rng.gen_range(-1.0..1.0))
    };

    let tape = Tape::<f64>::new();
    tape.inject_adjoint_fault(fault);
    let vars: Vec<_> = case.inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (case.op)(&tape, &vars)?;
    let r = tape.constant(projection(&*out.try_value()?));
    let loss = out.mul(&r)?.sum()?;
    let grads = tape.backward(loss)?;
    let mut coords = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let Some(g) = grads.wrt(v) else {
            return Err(TensorError::State(format!("{}: input {i} received no gradient", case.name)));
        };
        for (j, &a) in g.data().iter().enumerate() {
            coords.push((format!("{}[input {i}]", case.name), i, j, a));
        }
    }

    let mut inputs = case.inputs.clone();
    check_coordinates(
        &mut inputs,
        cfg,
        &coords,
        |inputs, i, j, delta| inputs[i].data_mut()[j] += delta,
        |inputs| {
            let tape = Tape::<f64>::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = (case.op)(&tape, &vars)?.try_value()?;
            let r = projection(&out);
            Ok(out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
        },
    )
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Every differentiable primitive on randomized small shapes.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let case = |name, kind, inputs, op: OpFn| PrimitiveCase { name, kind, inputs, op };
    vec![
        case("add", OpKind::Add, vec![random(r, &[2, 3]), random(r, &[2, 3])], Box::new(|_, v| v[0].add(&v[1]))),
        case("sub", OpKind::Sub, vec![random(r, &[2, 3]), random(r, &[2, 3])], Box::new(|_, v| v[0].sub(&v[1]))),
        case("mul", OpKind::Mul, vec![random(r, &[2, 3]), random(r, &[2, 3])], Box::new(|_, v| v[0].mul(&v[1]))),
        case("scale", OpKind::Scale, vec![random(r, &[4])], Box::new(|_, v| v[0].scale(-1.7))),
        case("sum", OpKind::Sum, vec![random(r, &[3, 2])], Box::new(|_, v| v[0].sum())),
        case("mean", OpKind::Mean, vec![random(r, &[3, 2])], Box::new(|_, v| v[0].mean())),
        case(
            "concat",
            OpKind::Concat,
            vec![random(r, &[2, 1, 2, 2]), random(r, &[2, 3, 2, 2])],
            Box::new(|t, v| t.concat(1, &[v[0], v[1]])),
        ),
        case("narrow", OpKind::Narrow, vec![random(r, &[2, 5, 2])], Box::new(|_, v| v[0].narrow(1, 1, 3))),
        case("reshape", OpKind::Reshape, vec![random(r, &[2, 6])], Box::new(|_, v| v[0].reshape(&[3, 2, 2]))),
        case(
            "linear",
            OpKind::Linear,
            vec![random(r, &[3, 4]), random(r, &[4, 2]), random(r, &[2])],
            Box::new(|_, v| v[0].linear(&v[1], Some(&v[2]))),
        ),
        case(
            "sigmoid(linear)",
            OpKind::Linear,
            vec![random(r, &[3, 4]), random(r, &[4, 2]), random(r, &[2])],
            Box::new(|_, v| v[0].linear(&v[1], Some(&v[2]))?.sigmoid()),
        ),
        case(
            "conv2d 3x3 pad 1",
            OpKind::Conv2d,
            vec![random(r, &[2, 3, 5, 5]), random(r, &[4, 3, 3, 3]), random(r, &[4])],
            Box::new(|_, v| v[0].conv2d(&v[1], Some(&v[2]), 1, 1)),
        ),
        case(
            "conv2d 3x3 stride 2",
            OpKind::Conv2d,
            vec![random(r, &[1, 2, 6, 6]), random(r, &[3, 2, 3, 3])],
            Box::new(|_, v| v[0].conv2d(&v[1], None, 2, 1)),
        ),
        case(
            "batch_norm train",
            OpKind::BatchNormTrain,
            vec![random(r, &[2, 3, 3, 3]), random(r, &[3]), random(r, &[3])],
            Box::new(|_, v| Ok(v[0].batch_norm_train(&v[1], &v[2], 1e-5)?.0)),
        ),
        case(
            "batch_norm eval",
            OpKind::BatchNormEval,
            vec![random(r, &[2, 3, 2, 2]), random(r, &[3]), random(r, &[3])],
            Box::new(|_, v| {
                let mean = Tensor::from_f64([3], &[0.1, -0.2, 0.3])?;
                let var = Tensor::from_f64([3], &[0.5, 1.5, 2.0])?;
                v[0].batch_norm_eval(&v[1], &v[2], &mean, &var, 1e-5)
            }),
        ),
        case("relu", OpKind::Relu, vec![away_from_zero(r, &[3, 4])], Box::new(|_, v| v[0].activation(Activation::Relu))),
        case("silu", OpKind::Silu, vec![random(r, &[3, 4])], Box::new(|_, v| v[0].activation(Activation::Silu))),
        case(
            "sigmoid",
            OpKind::Sigmoid,
            vec![random(r, &[3, 4])],
            Box::new(|_, v| v[0].activation(Activation::Sigmoid)),
        ),
        case(
            "max_pool",
            OpKind::MaxPool,
            vec![random(r, &[1, 2, 4, 4])],
            Box::new(|_, v| v[0].pool(Pool::Max { kernel: 2, stride: 2 })),
        ),
        case(
            "avg_pool",
            OpKind::AvgPool,
            vec![random(r, &[1, 2, 5, 5])],
            Box::new(|_, v| v[0].pool(Pool::Avg { kernel: 3, stride: 2 })),
        ),
        case(
            "adaptive_avg_pool",
            OpKind::AdaptiveAvgPool,
            vec![random(r, &[1, 2, 7, 7])],
            Box::new(|_, v| v[0].pool(Pool::AdaptiveAvg { size: 3 })),
        ),
        case(
            "upsample_bilinear",
            OpKind::Upsample,
            vec![random(r, &[1, 2, 3, 2])],
            Box::new(|_, v| v[0].upsample_bilinear(7, 5)),
        ),
        case(
            "dft_channels",
            OpKind::ChannelDft,
            vec![random(r, &[2, 6, 2, 2])],
            Box::new(|t, v| {
                let s = dft_channels(&v[0])?;
                t.concat(1, &[s.re, s.im])
            }),
        ),
        case(
            "idft_channels",
            OpKind::ChannelDft,
            vec![random(r, &[1, 8, 2, 3]), random(r, &[1, 8, 2, 3])],
            Box::new(|t, v| {
                let s = idft_channels(&ComplexVar { re: v[0], im: v[1] })?;
                t.concat(1, &[s.re, s.im])
            }),
        ),
        case(
            "fdconv",
            OpKind::Conv2d,
            vec![
                random(r, &[1, 4, 2, 2]),
                random(r, &[1, 4, 2, 2]),
                random(r, &[4, 4]),
                random(r, &[4, 4]),
                random(r, &[4]),
                random(r, &[4]),
            ],
            Box::new(|t, v| {
                let s = fdconv(&ComplexVar { re: v[0], im: v[1] }, &v[2], &v[3], &v[4], &v[5])?;
                t.concat(1, &[s.re, s.im])
            }),
        ),
        case(
            "bce_loss",
            OpKind::Bce,
            vec![Tensor::from_fn([1, 1, 3, 3], |i| 0.1 + 0.09 * i as f64)],
            Box::new(|t, v| {
                let target = t.constant(Tensor::from_fn([1, 1, 3, 3], |i| (i % 2) as f64));
                crate::training::bce_loss(&v[0], &target)
            }),
        ),
    ]
}

/// Runs [`primitive_cases`] and returns one report per case.
pub fn check_all_primitives(
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    primitive_cases(seed)
        .iter()
        .enumerate()
        .map(|(i, case)| Ok((case.name, check_primitive(case, cfg, fault, seed.wrapping_add(i as u64))?)))
        .collect()
}

/// Fixed inputs for an end-to-end check of the model at f64.
pub struct PipelineCase {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    pub target: Tensor<f64>,
}

impl PipelineCase {
    pub fn random(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = || Tensor::from_fn([n, 3, size, size], |_| rng.gen_range(0.0..1.0));
        let (a, b) = (image(), image());
        let target = Tensor::from_fn([n, 1, size, size], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        Self { a, b, target }
    }
}

fn pipeline_loss(model: &mut ChangeDetector<f64>, case: &PipelineCase) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(case.a.clone()), tape.constant(case.b.clone()));
    let probs = model.forward(&tape, Mode::Train, &a, &b)?;
    let loss = crate::training::bce_loss(&probs, &tape.constant(case.target.clone()))?;
    let value = loss.try_value()?.item()?;
    Ok(value)
}

/// Compares the BCE-loss gradient of `samples` randomly chosen model
/// parameters with central differences.
pub fn check_model(
    model: &mut ChangeDetector<f64>,
    case: &PipelineCase,
    samples: usize,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
    seed: u64,
) -> Result<GradCheckReport> {
    model.store_mut().zero_grad();
    {
        let tape = Tape::new();
        tape.inject_adjoint_fault(fault);
        let (a, b) = (tape.constant(case.a.clone()), tape.constant(case.b.clone()));
        let probs = model.forward(&tape, Mode::Train, &a, &b)?;
        let loss = crate::training::bce_loss(&probs, &tape.constant(case.target.clone()))?;
        tape.backward_into(loss, model.store_mut())?;
    }

    let sizes: Vec<usize> = model.store().params().iter().map(|p| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = rand::seq::index::sample(&mut rng, total, samples.min(total)).into_vec();
    flat.sort_unstable();
    let mut coords = Vec::with_capacity(flat.len());
    let (mut param, mut offset) = (0, 0);
    for f in flat {
        while f >= offset + sizes[param] {
            offset += sizes[param];
            param += 1;
        }
        let p = &model.store().params()[param];
        let analytic = p.grad.as_ref().map_or(0.0, |g| g.data()[f - offset]);
        coords.push((p.name.clone(), param, f - offset, analytic));
    }

    check_coordinates(
        model,
        cfg,
        &coords,
        |m, p, i, delta| m.store_mut().params_mut()[p].value.data_mut()[i] += delta,
        |m| pipeline_loss(m, case),
    )
}

/// Micro-model pipeline check with the default sample count, as run by the
/// `gradcheck` command.
pub fn check_micro_pipeline(cfg: &GradCheckConfig, fault: Option<OpKind>, seed: u64) -> Result<GradCheckReport> {
    let mut model = ChangeDetector::<f64>::new(&ModelConfig::micro(), seed)?;
    let case = PipelineCase::random(1, 64, seed.wrapping_add(1));
    check_model(&mut model, &case, PIPELINE_SAMPLES, cfg, fault, seed.wrapping_add(2))
}

/// Parameters sampled by [`check_micro_pipeline`].
pub const PIPELINE_SAMPLES: usize = 256;
