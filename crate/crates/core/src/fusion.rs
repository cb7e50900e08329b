//! Cross-modal fusion: learned modality embeddings, multi-head attention over
//! the two-token (GPR, IRT) sequence, and the fused-representation MLP, plus
//! the classification and variance output heads.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

pub struct FusionVars {
    /// modality embeddings, each [d]
    pub e_gpr: Var,
    pub e_irt: Var,
    /// attention projections, each [d, d]
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// fused-representation MLP: [2d, d] and [d]
    pub fuse_w: Var,
    pub fuse_b: Var,
}

pub struct HeadVars {
    pub cls_w1: Var,
    pub cls_b1: Var,
    pub cls_w2: Var,
    pub cls_b2: Var,
    pub var_w1: Var,
    pub var_b1: Var,
    pub var_w2: Var,
    pub var_b2: Var,
}

/// Per-class variance floor/ceiling after softplus.
pub const SIGMA2_MIN: f64 = 1e-6;
pub const SIGMA2_MAX: f64 = 10.0;

/// Attention matrices captured for inspection (detached from the graph).
pub struct CrossRecord<E> {
    /// [N*h, 2, 2] row-stochastic per-head attention
    pub per_head: Tensor<E>,
    /// [N, 2, 2] head-averaged attention
    pub mean: Tensor<E>,
}

/// (f_gpr, f_irt) each [N,d] -> token sequence [N,2,d] with the per-modality
/// embedding added to every row.
pub fn add_modality_embeddings<E: Element>(
    tape: &mut Tape<E>,
    f_gpr: Var,
    f_irt: Var,
    p: &FusionVars,
) -> Result<Var> {
    let tg = tape.add_bias_row(f_gpr, p.e_gpr)?;
    let ti = tape.add_bias_row(f_irt, p.e_irt)?;
    tape.stack_pair(tg, ti)
}

/// Multi-head self-attention over [N,2,d] with output projection.
pub fn multi_head_cross_attention<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    p: &FusionVars,
    heads: usize,
) -> Result<(Var, CrossRecord<E>)> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 3 || s[1] != 2 {
        return Err(Error::shape(format!("fusion expects [N,2,d] tokens, got {s:?}")));
    }
    let (n, d) = (s[0], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Parameter(format!(
            "head count {heads} must divide token width {d}"
        )));
    }
    let dh = d / heads;
    let flat = tape.reshape(x, &[n * 2, d])?;
    let q = tape.matmul(flat, p.wq)?;
    let k = tape.matmul(flat, p.wk)?;
    let v = tape.matmul(flat, p.wv)?;
    let q = tape.reshape(q, &[n, 2, d])?;
    let k = tape.reshape(k, &[n, 2, d])?;
    let v = tape.reshape(v, &[n, 2, d])?;
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let scores = tape.bmm(qh, kh, true)?;
    let scaled = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
    let attn = tape.softmax_last(scaled)?;
    let zh = tape.bmm(attn, vh, false)?;
    let z = tape.merge_heads(zh, heads)?;
    let zflat = tape.reshape(z, &[n * 2, d])?;
    let out = tape.matmul(zflat, p.wo)?;
    let out = tape.reshape(out, &[n, 2, d])?;
    let mean_attn = tape.mean_heads(attn, heads)?;
    let record = CrossRecord {
        per_head: tape.value(attn).clone(),
        mean: tape.value(mean_attn).clone(),
    };
    Ok((out, record))
}

/// [N,2,d] attended tokens -> fused representation [N,d]: concatenate the two
/// rows and pass through the linear+ReLU projection.
pub fn fuse<E: Element>(tape: &mut Tape<E>, z_tokens: Var, p: &FusionVars) -> Result<Var> {
    let a = tape.slice_axis1(z_tokens, 0)?;
    let b = tape.slice_axis1(z_tokens, 1)?;
    let cat = tape.concat_last(a, b)?;
    let proj = tape.matmul(cat, p.fuse_w)?;
    let proj = tape.add_bias_row(proj, p.fuse_b)?;
    Ok(tape.relu(proj))
}

/// Fused representation [N,d] -> class logits [N,3].
pub fn classify<E: Element>(tape: &mut Tape<E>, z: Var, p: &HeadVars) -> Result<Var> {
    let h = tape.matmul(z, p.cls_w1)?;
    let h = tape.add_bias_row(h, p.cls_b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.cls_w2)?;
    tape.add_bias_row(o, p.cls_b2)
}

/// Fused representation [N,d] -> per-class aleatoric variance [N,3],
/// softplus-activated and clamped to [SIGMA2_MIN, SIGMA2_MAX].
pub fn predict_variance<E: Element>(tape: &mut Tape<E>, z: Var, p: &HeadVars) -> Result<Var> {
    let h = tape.matmul(z, p.var_w1)?;
    let h = tape.add_bias_row(h, p.var_b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.var_w2)?;
    let o = tape.add_bias_row(o, p.var_b2)?;
    let sp = tape.softplus(o);
    Ok(tape.clamp_range(sp, SIGMA2_MIN, SIGMA2_MAX))
}
