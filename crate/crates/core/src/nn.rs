//! Graph builders shared by the frozen text encoder and the diffusion
//! transformer: linear layers, multi-head attention, and the pre-norm
//! residual block.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, VarId};

pub fn linear(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let h = tape.matmul(x, w)?;
    tape.add_rows(h, b)
}

/// Bidirectional multi-head self-attention over an n x d token matrix.
/// `qkv_w` is d x 3d laid out as [q | k | v] along columns.
pub fn attention(
    tape: &mut Tape,
    x: VarId,
    qkv_w: VarId,
    qkv_b: VarId,
    proj_w: VarId,
    proj_b: VarId,
    heads: usize,
) -> Result<VarId> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Invalid { what: format!("{heads} heads do not divide width {d}") });
    }
    let hd = d / heads;
    let qkv = linear(tape, x, qkv_w, qkv_b)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice(qkv, 1, h * hd, hd)?;
        let k = tape.slice(qkv, 1, d + h * hd, hd)?;
        let v = tape.slice(qkv, 1, 2 * d + h * hd, hd)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.mul_scalar(scores, scale)?;
        let att = tape.softmax(scaled)?;
        ctx.push(tape.matmul(att, v)?);
    }
    let cat = tape.concat(&ctx, 1)?;
    linear(tape, cat, proj_w, proj_b)
}

/// Bound parameter ids for one transformer block.
#[derive(Clone, Copy)]
pub struct BlockVars {
    pub ln1_g: VarId,
    pub ln1_b: VarId,
    pub qkv_w: VarId,
    pub qkv_b: VarId,
    pub proj_w: VarId,
    pub proj_b: VarId,
    pub ln2_g: VarId,
    pub ln2_b: VarId,
    pub ff1_w: VarId,
    pub ff1_b: VarId,
    pub ff2_w: VarId,
    pub ff2_b: VarId,
}

/// Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x)).
pub fn block(tape: &mut Tape, x: VarId, v: &BlockVars, heads: usize) -> Result<VarId> {
    let h = tape.layer_norm(x)?;
    let h = tape.mul_rows(h, v.ln1_g)?;
    let h = tape.add_rows(h, v.ln1_b)?;
    let a = attention(tape, h, v.qkv_w, v.qkv_b, v.proj_w, v.proj_b, heads)?;
    let x = tape.add(x, a)?;

    let h = tape.layer_norm(x)?;
    let h = tape.mul_rows(h, v.ln2_g)?;
    let h = tape.add_rows(h, v.ln2_b)?;
    let m = linear(tape, h, v.ff1_w, v.ff1_b)?;
    let m = tape.gelu(m)?;
    let m = linear(tape, m, v.ff2_w, v.ff2_b)?;
    tape.add(x, m)
}

/// Mean over rows of an n x d matrix, as a rank-1 d-vector.
pub fn mean_rows(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let n = tape.value(x).rows();
    let d = tape.value(x).cols();
    let w = tape.constant(crate::tensor::Tensor::new(vec![1, n], vec![1.0 / n as f64; n])?);
    let m = tape.matmul(w, x)?;
    tape.reshape(m, vec![d])
}
