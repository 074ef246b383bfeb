#![allow(dead_code)]

use fieldiff::numerics::{Tape, Tensor, Var};
use fieldiff::Result;

/// Relative error with a small absolute floor so exactly-zero gradients do
/// not divide by zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite difference of `f` at `x` along element `i`.
pub fn central_diff(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> f64,
    inputs: &[Tensor<f64>],
    which: usize,
    i: usize,
    h: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    plus[which].data_mut()[i] += h;
    let mut minus = inputs.to_vec();
    minus[which].data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Builds the graph with `build` on fresh tapes, compares the tape gradient
/// of every input element against central differences, and returns the
/// maximum relative error.
pub fn max_grad_error<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let loss = build(&mut tape, &vars).unwrap();
        tape.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (w, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..inputs[w].numel() {
            let numeric = central_diff(&mut eval, inputs, w, i, 1e-5);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Central difference of `loss` with respect to element `i` of parameter
/// `id` of a score net.
pub fn central_diff_params(
    net: &fieldiff::scorenet::ScoreNet<f64>,
    id: fieldiff::numerics::ParamId,
    i: usize,
    loss: impl Fn(&fieldiff::scorenet::ScoreNet<f64>) -> Result<f64>,
) -> f64 {
    let h = 1e-5;
    let mut plus = net.clone();
    plus.params_mut().get_mut(id).data_mut()[i] += h;
    let mut minus = net.clone();
    minus.params_mut().get_mut(id).data_mut()[i] -= h;
    (loss(&plus).unwrap() - loss(&minus).unwrap()) / (2.0 * h)
}
