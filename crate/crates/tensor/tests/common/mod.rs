#![allow(dead_code)]

use fedsparse_tensor::{Tape, Tensor, Var};

/// Five-point central-difference gradient oracle.
///
/// `f` builds a scalar loss from fresh leaves of `inputs`. Returns, for each
/// input, `(analytic, numeric)` gradients; the numeric one perturbs each
/// element by `±h` and `±2h` and re-runs the forward pass from scratch. The
/// O(h⁴) stencil allows a step large enough to keep f32 roundoff small.
pub fn grad_pair<F>(inputs: &[Tensor], h: f32, f: F) -> Vec<(Vec<f32>, Vec<f32>)>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss)[0] as f64
    };

    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = tracked.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");

    let mut out = Vec::new();
    for (i, t) in tracked.iter().enumerate() {
        let analytic = grads.get(t).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let at = |step: f32| {
                let mut moved = tracked.clone();
                moved[i].data_mut()[k] += step;
                eval(&moved)
            };
            let near = at(h) - at(-h);
            let far = at(2.0 * h) - at(-2.0 * h);
            *slot = ((8.0 * near - far) / (12.0 * h as f64)) as f32;
        }
        out.push((analytic, numeric));
    }
    out
}

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂), or the absolute error when both are ~0.
pub fn rel_error(a: &[f32], n: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    grad_pair(inputs, 1e-3, f).iter().map(|(a, n)| rel_error(a, n)).fold(0.0, f64::max)
}

/// Relative error of the whole gradient, at the step in `steps` where the
/// oracle agrees best. An f32 forward pass resolves `f(x ± h)` only to about
/// `eps·|f|/h`, so a flat loss needs a larger step than a steep one.
pub fn best_global_error<F>(inputs: &[Tensor], steps: &[f32], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    steps
        .iter()
        .map(|&h| {
            let pairs = grad_pair(inputs, h, &f);
            let a: Vec<f32> = pairs.iter().flat_map(|p| p.0.iter().copied()).collect();
            let n: Vec<f32> = pairs.iter().flat_map(|p| p.1.iter().copied()).collect();
            rel_error(&a, &n)
        })
        .fold(f64::INFINITY, f64::min)
}
