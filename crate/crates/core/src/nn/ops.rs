//! One-shot versions of the differentiable primitives, for callers that do
//! not need gradients.

use rand::Rng;

use super::{NnError, Scalar, Tape, Tensor};

fn unary<T: Scalar>(
    input: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, super::Var) -> Result<super::Var, NnError>,
) -> Result<Tensor<T>, NnError> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.into_value(y))
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<Tensor<T>, NnError> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(kernels.clone());
    let b = tape.leaf(bias.clone());
    let y = tape.conv2d(x, w, b, padding, stride)?;
    Ok(tape.into_value(y))
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>, NnError> {
    unary(input, |t, x| t.maxpool2d(x, window))
}

pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(weights.clone());
    let b = tape.leaf(bias.clone());
    let y = tape.dense(x, w, b)?;
    Ok(tape.into_value(y))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    unary(input, |t, x| Ok(t.relu(x))).expect("relu is infallible")
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>, NnError> {
    unary(input, |t, x| t.dropout(x, rate, training, rng))
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    unary(input, |t, x| t.global_avg_pool(x))
}

pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, NnError> {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let y = tape.leaf(target.clone());
    let l = tape.mse(p, y)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv2d_examples() {
        let ones = t(&[1, 3, 3], &[1.0; 9]);
        let k = t(&[1, 1, 3, 3], &[1.0; 9]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&ones, &k, &b, 0, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);

        let y = conv2d(&ones, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[2.0]), &t(&[1], &[1.0]), 0, 1).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv2d_is_cross_correlation() {
        // An unflipped kernel picks the top-left neighbour.
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let y = conv2d(&x, &k, &t(&[1], &[0.0]), 0, 1).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn conv2d_channel_mismatch_is_dimension_error() {
        let x = t(&[2, 3, 3], &[0.0; 18]);
        let k = t(&[1, 1, 3, 3], &[0.0; 9]);
        assert!(matches!(conv2d(&x, &k, &t(&[1], &[0.0]), 0, 1), Err(NnError::Dimension(_))));
        assert!(matches!(conv2d(&x, &t(&[1, 2, 5, 5], &[0.0; 50]), &t(&[1], &[0.0]), 0, 1), Err(NnError::Dimension(_))));
    }

    #[test]
    fn maxpool_examples() {
        let y = maxpool2d(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let y = maxpool2d(&t(&[1, 4, 4], &[2.5; 16]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[2.5; 4]);
        assert!(matches!(maxpool2d(&t(&[1, 3, 4], &[0.0; 12]), 2), Err(NnError::Dimension(_))));
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let y = tape.maxpool2d(x, 2).unwrap();
        let s = tape.sum(y);
        let mut g = tape.backward(s).unwrap();
        assert_eq!(g.take(x).data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_examples() {
        let x = t(&[3], &[1.0, -2.0, 5.0]);
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&x, &eye, &t(&[3], &[0.0; 3])).unwrap().data(), x.data());
        let y = dense(&t(&[2], &[1.0, 2.0]), &t(&[1, 2], &[1.0, 1.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert!(matches!(dense(&x, &t(&[1, 2], &[1.0, 1.0]), &t(&[1], &[0.0])), Err(NnError::Dimension(_))));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, -0.5, -3.0]).with_grad());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().take(x).data(), &[0.0; 3]);
        // subgradient at zero is zero
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]).with_grad());
        let y = tape.relu(x);
        let s = tape.sum(y);
        assert_eq!(tape.backward(s).unwrap().take(x).data(), &[0.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t(&[5], &[1.0, -2.0, 3.0, 4.0, 0.5]);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.7, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::full(&[100_000], 1.0);
        let y = dropout(&x, 0.5, true, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn global_avg_pool_examples() {
        let y = global_avg_pool(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let y = global_avg_pool(&t(&[1, 3, 3], &[-0.75; 9])).unwrap();
        assert_eq!(y.data(), &[-0.75]);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2, 3], &[1.0; 6]).with_grad());
        let y = tape.global_avg_pool(x).unwrap();
        let s = tape.sum(y);
        for g in tape.backward(s).unwrap().take(x).data() {
            assert!((g - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mse_examples() {
        let target = t(&[1, 3], &[1.0, 2.0, 3.0]);
        assert_eq!(mse_loss(&target, &target).unwrap(), 0.0);
        let shifted = t(&[1, 3], &[2.0, 3.0, 4.0]);
        assert_eq!(mse_loss(&shifted, &target).unwrap(), 1.0);
        let zeros = t(&[1, 3], &[0.0; 3]);
        assert!((mse_loss(&zeros, &target).unwrap() - 14.0 / 3.0).abs() < 1e-15);
        assert!(matches!(mse_loss(&zeros, &t(&[3, 1], &[0.0; 3])), Err(NnError::Dimension(_))));
    }

    proptest! {
        #[test]
        fn conv2d_output_shape_formula(
            h in 1usize..9, w in 1usize..9, k in 1usize..4, pad in 0usize..3, stride in 1usize..4,
        ) {
            prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
            let x = Tensor::<f64>::zeros(&[1, h, w]);
            let kern = Tensor::<f64>::zeros(&[2, 1, k, k]);
            let y = conv2d(&x, &kern, &Tensor::zeros(&[2]), pad, stride).unwrap();
            prop_assert_eq!(y.shape(), &[2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
        }

        #[test]
        fn relu_is_idempotent(v in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            let x = Tensor::<f64>::new(&[v.len()], v).unwrap();
            prop_assert_eq!(relu(&relu(&x)), relu(&x));
        }

        #[test]
        fn mse_nonnegative_zero_iff_equal(
            a in proptest::collection::vec(-5.0f64..5.0, 3..=12),
            shift in proptest::collection::vec(-1.0f64..1.0, 3..=12),
        ) {
            let n = a.len().min(shift.len()) / 3 * 3;
            let p = Tensor::<f64>::new(&[n / 3, 3], a[..n].to_vec()).unwrap();
            let q: Vec<f64> = a[..n].iter().zip(&shift).map(|(x, s)| x + s).collect();
            let q = Tensor::<f64>::new(&[n / 3, 3], q).unwrap();
            let l = mse_loss(&p, &q).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, p == q);
        }
    }
}
