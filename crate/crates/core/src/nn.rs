//! Parameterized layers and the forward context that binds them to a tape.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{BufferId, Init, ParamId, ParamStore};
use crate::tensor::{Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Running statistics, no state mutation.
    Eval,
}

/// Everything a layer needs during one forward pass: the tape, every parameter
/// recorded as a leaf, and mutable access to buffers for train-mode updates.
pub struct Ctx<'t, 's, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub mode: Mode,
    params: Vec<Var<'t, T>>,
    store: &'s mut ParamStore<T>,
}

impl<'t, 's, T: Scalar> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        let params = store.bind(tape);
        Self { tape, mode, params, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.params[id.0]
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::KaimingNormal { fan_in },
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[c_out], Init::Zeros, rng));
        Self { weight, bias, stride, padding }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.bias.map(|b| ctx.p(b));
        x.conv2d(&ctx.p(self.weight), b.as_ref(), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), &[channels], Init::Ones, rng),
            beta: store.add(format!("{name}.bias"), &[channels], Init::Zeros, rng),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros([channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones([channels])),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &mut Ctx<'t, '_, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Eval => {
                let rm = ctx.store.buffer(self.running_mean);
                let rv = ctx.store.buffer(self.running_var);
                x.batch_norm_eval(&gamma, &beta, rm, rv, self.eps)
            }
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(&gamma, &beta, self.eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                for (r, &s) in ctx.store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * s;
                }
                for (r, &s) in
                    ctx.store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&stats.var_unbiased)
                {
                    *r = keep * *r + m * s;
                }
                Ok(y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_updates_running_stats_only_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1, &mut rng);
        let input = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let x = tape.constant(input.clone());
        bn.forward(&mut ctx, &x).unwrap();
        assert_eq!(store.buffer(bn.running_mean).data(), &[0.0]);

        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Train);
        let x = tape.constant(input);
        bn.forward(&mut ctx, &x).unwrap();
        // mean 2.5, unbiased var 5/3
        assert!((store.buffer(bn.running_mean).data()[0] - 0.25).abs() < 1e-12);
        assert!((store.buffer(bn.running_var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
