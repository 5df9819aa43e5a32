//! Central finite-difference oracle for tape operations (test only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Builds `sum(f(inputs) ⊙ R)` for a fixed random `R`, then compares the
/// tape gradient of every input against central differences with step `h`.
/// Returns the worst relative error `‖a − n‖ / max(‖a‖, ‖n‖)` over inputs.
pub fn max_relative_error(
    inputs: &[Tensor<f64>],
    h: f64,
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
        let r = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
        let prod = tape.mul(out, r).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
            })
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            *slot = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 0.0 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}
