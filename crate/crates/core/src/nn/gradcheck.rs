//! Central finite-difference verification of tape gradients.

use rand::Rng;

use super::{NnError, Tape, Tensor, Var};

/// Worst relative error seen while checking one function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Below this magnitude both gradients count as zero.
const ZERO_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ZERO_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `eps` on up to `per_input` randomly chosen entries
/// of every input. `f` must be deterministic.
pub fn check_gradients<F, R>(f: F, inputs: &[Tensor<f64>], eps: f64, per_input: usize, rng: &mut R) -> Result<GradCheck, NnError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NnError>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take(v)).collect();

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let picks: Vec<usize> = if n <= per_input { (0..n).collect() } else { (0..per_input).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck { max_rel_err: worst, checked })
}
