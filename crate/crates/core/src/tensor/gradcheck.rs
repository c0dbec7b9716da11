//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the backward pass, so it stays an
//! independent oracle for it.

use super::tape::{Tape, VarId};
use super::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Build-and-evaluate closure: given a tape and leaf ids (one per input, in
/// order), return the scalar loss node.
pub type GraphFn<'f> = &'f dyn Fn(&mut Tape, &[VarId]) -> Result<VarId>;

/// Analytic gradients of `f` at `inputs` via one backward pass.
pub fn analytic_grads(f: GraphFn, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    Ok(ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
        .collect())
}

fn eval(f: GraphFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    Ok(tape.value(loss).item())
}

/// Central finite-difference gradients, step `h`, one entry at a time.
pub fn numeric_grads(f: GraphFn, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = vec![0.0; inputs[i].numel()];
        let mut work: Vec<Tensor> = inputs.to_vec();
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(f, &work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(f, &work)?;
            work[i].data_mut()[j] = orig;
            gi[j] = (up - down) / (2.0 * h);
        }
        out.push(gi);
    }
    Ok(out)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between analytic and central-difference gradients.
pub fn max_grad_err(f: GraphFn, inputs: &[Tensor], h: f64) -> Result<f64> {
    let ana = analytic_grads(f, inputs)?;
    let num = numeric_grads(f, inputs, h)?;
    let mut worst = 0.0f64;
    for (ga, gn) in ana.iter().zip(&num) {
        for (&a, &n) in ga.iter().zip(gn) {
            worst = worst.max(rel_err(a, n));
        }
    }
    Ok(worst)
}
