use super::BCE_EPS;
use crate::autodiff::{OpKind, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Mean pixel-wise binary cross-entropy between probabilities `pred` and a
/// binary `target` of the same shape. Probabilities are clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`; the gradient is zero where the clamp is active.
pub fn bce_loss<'t, T: Scalar>(pred: &Var<'t, T>, target: &Var<'t, T>) -> Result<Var<'t, T>> {
    let p = pred.try_value()?;
    let y = target.try_value()?;
    p.expect_same_shape(&y)?;
    if let Some(bad) = y.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(TensorError::Argument(format!("bce target must be 0 or 1, found {bad}")));
    }
    let n = p.numel() as f64;
    let lo = BCE_EPS;
    let hi = 1.0 - BCE_EPS;
    let total: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = p.as_f64().clamp(lo, hi);
            if y == T::one() {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    let shape = p.shape().to_vec();
    pred.record(
        OpKind::Bce,
        &[*pred, *target],
        Tensor::scalar(T::of(total / n)),
        Box::new(move |g, needs| {
            let scale = g.data()[0].as_f64() / n;
            let dp = needs[0].then(|| {
                let data = p
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &y)| {
                        let p = p.as_f64();
                        if !(lo..=hi).contains(&p) {
                            return T::zero();
                        }
                        let d = if y == T::one() { -1.0 / p } else { 1.0 / (1.0 - p) };
                        T::of(scale * d)
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), data)
            });
            vec![dp, None]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_of(p: Tensor<f64>, y: Tensor<f64>) -> f64 {
        let tape = Tape::new();
        let (p, y) = (tape.constant(p), tape.constant(y));
        bce_loss(&p, &y).unwrap().value().item().unwrap()
    }

    #[test]
    fn half_probability_costs_ln2() {
        let l = loss_of(Tensor::full([1, 1, 4, 4], 0.5), Tensor::ones([1, 1, 4, 4]));
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero_in_f32() {
        let tape = Tape::<f32>::new();
        let p = tape.constant(Tensor::full([1, 1, 8, 8], 1.0 - 1e-7));
        let y = tape.constant(Tensor::ones([1, 1, 8, 8]));
        let l = bce_loss(&p, &y).unwrap().value().item().unwrap();
        assert!((0.0..=1.2e-7).contains(&l), "{l}");
        let p = tape.constant(Tensor::ones([1, 1, 8, 8]));
        let l = bce_loss(&p, &y).unwrap().value().item().unwrap();
        assert!(l.is_finite() && l <= 1.2e-7);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::from_fn([2, 1, 5, 5], |_| rng.gen_range(0.01..0.99));
        let y = Tensor::from_fn([2, 1, 5, 5], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let direct: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| -(y * f64::ln(p) + (1.0 - y) * f64::ln(1.0 - p)))
            .sum::<f64>()
            / 50.0;
        assert!((loss_of(p, y) - direct).abs() < 1e-7);
    }

    #[test]
    fn extreme_probabilities_stay_finite() {
        let p = Tensor::new([4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = Tensor::new([4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = loss_of(p, y);
        assert!(l.is_finite());
        assert!((l - 0.5 * -f64::ln(1e-7)).abs() < 1e-6);
    }

    #[test]
    fn clamped_pixels_have_zero_gradient() {
        let tape = Tape::<f64>::new();
        let p = tape.variable(Tensor::new([3], vec![0.0, 0.5, 1.0]).unwrap());
        let y = tape.constant(Tensor::new([3], vec![1.0, 1.0, 0.0]).unwrap());
        let g = tape.backward(bce_loss(&p, &y).unwrap()).unwrap();
        let g = g.wrt(&p).unwrap().data().to_vec();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - (-2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn rejects_non_binary_target() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([2], 0.5));
        let y = tape.constant(Tensor::full([2], 0.5));
        assert!(matches!(bce_loss(&p, &y), Err(TensorError::Argument(_))));
    }
}
