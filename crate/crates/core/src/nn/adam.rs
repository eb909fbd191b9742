use super::{NnError, Scalar, Tensor};

/// Moment estimates for the Adam optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for the given parameter list, default betas and epsilon.
    pub fn new(params: &[Tensor<T>], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

pub fn adam_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Dimension(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(NnError::Dimension(format!(
                "adam: parameter {i} shape {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(state.lr), T::of(state.eps));
    let one = T::one();
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let g = vec![Tensor::<f64>::zeros(&[3])];
        let mut s = AdamState::new(&p, 0.001);
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(s.t, 2);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1 and v_hat = 1 after one step with gradient 1.
        let mut p = vec![Tensor::<f64>::from_f64(&[1], &[0.3]).unwrap()];
        let g = vec![Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap()];
        let mut s = AdamState::new(&p, 0.001);
        adam_step(&mut p, &g, &mut s).unwrap();
        let expected = 0.3 - 0.001 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_unrolled_updates() {
        let grads = [0.5, -1.0, 2.0];
        let mut p = vec![Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap()];
        let mut s = AdamState::new(&p, 0.01);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (i, &gv) in grads.iter().enumerate() {
            adam_step(&mut p, &[Tensor::from_f64(&[1], &[gv]).unwrap()], &mut s).unwrap();
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let k = (i + 1) as i32;
            w -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((p[0].data()[0] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_f64(&[2], &[0.1, 0.2]).unwrap()];
            let mut s = AdamState::new(&p, 0.001);
            for i in 0..50 {
                let g = Tensor::<f32>::from_f64(&[2], &[(i as f64).sin(), (i as f64).cos()]).unwrap();
                adam_step(&mut p, &[g], &mut s).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        let bits = |p: &[Tensor<f32>]| p[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let mut s = AdamState::new(&p, 0.001);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s).is_err());
    }
}
