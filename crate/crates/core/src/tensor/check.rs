//! Finite-difference validation of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Worst relative disagreement between the tape gradient of `f` and a
/// central finite difference with step `eps`, over every element of every
/// input. `f` must produce a scalar node.
///
/// Relative error uses a unit floor: |a - n| / max(1, |a|, |n|), so
/// near-zero gradients are compared absolutely.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let picks: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    grad_check_at(f, inputs, eps, &picks)
}

/// Like [`grad_check`] but probing at most `max_per_input` seeded-random
/// elements of each input. Used where a full sweep is too expensive
/// (whole-network loss checks).
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= max_per_input {
                (0..n).collect()
            } else {
                let mut idx: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut idx);
                idx.truncate(max_per_input);
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    grad_check_at(f, inputs, eps, &picks)
}

fn grad_check_at<F>(mut f: F, inputs: &[Tensor], eps: f64, picks: &[Vec<usize>]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("grad_check", "inputs must be finite"));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("f must be scalar-valued, got shape {:?}", tape.shape(out)),
        ));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf was tracked").to_vec())
        .collect();
    drop(tape);

    let eval = |f: &mut F, tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t, false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, elems) in picks.iter().enumerate() {
        for &j in elems {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let plus = eval(&mut f, &work)?;
            work[ti].data_mut()[j] = orig - eps;
            let minus = eval(&mut f, &work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
