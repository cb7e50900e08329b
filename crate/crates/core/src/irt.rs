//! IRT thermal-patch encoder: three conv/BN/ReLU/max-pool blocks followed by
//! channel attention (pooled-descriptor MLP) and spatial attention (7x7 conv
//! over stacked channel statistics), both applied multiplicatively before
//! global average pooling.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Bound parameter handles for one conv block.
pub struct IrtBlockVars {
    pub conv_w: Var,
    pub conv_b: Var,
    pub gamma: Var,
    pub beta: Var,
}

pub struct IrtVars {
    pub blocks: [IrtBlockVars; 3],
    /// shared channel-attention MLP: C -> C/r -> C
    pub catt_w1: Var,
    pub catt_b1: Var,
    pub catt_w2: Var,
    pub catt_b2: Var,
    /// spatial-attention conv: 2 channels -> 1, 7x7, pad 3
    pub satt_w: Var,
    pub satt_b: Var,
}

/// Per-block batchnorm running moments, updated in train phase.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> BnState<E> {
    pub fn identity(channels: usize) -> Self {
        BnState {
            mean: vec![E::zero(); channels],
            var: vec![E::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Momentum update of the running moments with the unbiased batch variance,
/// matching the prevailing framework convention.
fn update_running<E: Element>(bn: &mut BnState<E>, conv_shape: &[usize], mean: &[E], var: &[E]) {
    let m = (conv_shape[0] * conv_shape[2] * conv_shape[3]) as f64;
    let bessel = E::from_real(m / (m - 1.0));
    let keep = E::from_real(1.0 - BN_MOMENTUM);
    let mom = E::from_real(BN_MOMENTUM);
    for c in 0..mean.len() {
        bn.mean[c] = keep * bn.mean[c] + mom * mean[c];
        bn.var[c] = keep * bn.var[c] + mom * var[c] * bessel;
    }
}

/// [N,3,H,W] -> [N,C,H/8,W/8] feature map through the three blocks.
/// In train phase, batch moments update `bn` in place (momentum update with
/// the unbiased batch variance, matching the prevailing framework convention).
pub fn irt_conv_stack<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    p: &IrtVars,
    bn: &mut [BnState<E>; 3],
    phase: Phase,
    residual_skip: bool,
) -> Result<Var> {
    let s = tape.value(x).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("IRT batch must be [N,C,H,W], got {s:?}")));
    }
    let mut cur = x;
    for (i, block) in p.blocks.iter().enumerate() {
        let conv = tape.conv2d(cur, block.conv_w, block.conv_b, 1, 1)?;
        if !residual_skip {
            // fused normalize/activate/pool, same values as the chain below
            cur = match phase {
                Phase::Train => {
                    let (y, mean, var) =
                        tape.bn_relu_pool_train(conv, block.gamma, block.beta, BN_EPS, 2)?;
                    update_running(&mut bn[i], tape.value(conv).shape(), &mean, &var);
                    y
                }
                Phase::Eval => tape.bn_relu_pool_eval(
                    conv,
                    block.gamma,
                    block.beta,
                    &bn[i].mean,
                    &bn[i].var,
                    BN_EPS,
                    2,
                )?,
            };
            continue;
        }
        let normed = match phase {
            Phase::Train => {
                let (y, mean, var) = tape.batchnorm_train(conv, block.gamma, block.beta, BN_EPS)?;
                update_running(&mut bn[i], tape.value(conv).shape(), &mean, &var);
                y
            }
            Phase::Eval => tape.batchnorm_eval(
                conv,
                block.gamma,
                block.beta,
                &bn[i].mean,
                &bn[i].var,
                BN_EPS,
            )?,
        };
        // identity shortcut, zero-padded over the new channels
        let si = tape.value(cur).shape().to_vec();
        let so = tape.value(normed).shape().to_vec();
        if so[1] < si[1] {
            return Err(Error::shape(format!(
                "identity shortcut needs non-decreasing channels, got {} -> {}",
                si[1], so[1]
            )));
        }
        let shortcut = if si[1] == so[1] {
            cur
        } else {
            let pad = tape.constant(Tensor::zeros(&[si[0], so[1] - si[1], si[2], si[3]]));
            tape.chan_concat(cur, pad)?
        };
        let pre_act = tape.add(normed, shortcut)?;
        let act = tape.relu(pre_act);
        cur = tape.maxpool2d(act, 2)?;
    }
    Ok(cur)
}

/// [N,C,H,W] -> channel mask [N,C] in (0,1): shared MLP over the sum of the
/// global average and global max descriptors, then sigmoid.
pub fn channel_attention<E: Element>(tape: &mut Tape<E>, f: Var, p: &IrtVars) -> Result<Var> {
    let avg = tape.global_avg2d(f)?;
    let max = tape.global_max2d(f)?;
    let desc = tape.add(avg, max)?;
    let h = tape.matmul(desc, p.catt_w1)?;
    let h = tape.add_bias_row(h, p.catt_b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, p.catt_w2)?;
    let o = tape.add_bias_row(o, p.catt_b2)?;
    Ok(tape.sigmoid(o))
}

/// [N,C,H,W] -> spatial mask [N,1,H,W] in (0,1): 7x7 conv over the stacked
/// channel-mean and channel-max maps, then sigmoid.
pub fn spatial_attention<E: Element>(tape: &mut Tape<E>, f: Var, p: &IrtVars) -> Result<Var> {
    let mean = tape.mean_chan(f)?;
    let max = tape.max_chan(f)?;
    let stacked = tape.chan_concat(mean, max)?;
    let k = tape.value(p.satt_w).shape()[2];
    let conv = tape.conv2d(stacked, p.satt_w, p.satt_b, 1, k / 2)?;
    Ok(tape.sigmoid(conv))
}

pub struct IrtEncoded {
    /// [N, C] pooled feature
    pub f_irt: Var,
    /// [N, C] channel mask; None when attention is bypassed
    pub m_c: Option<Var>,
    /// [N, 1, H', W'] spatial mask; None when attention is bypassed
    pub m_s: Option<Var>,
}

/// Full encoder. With `use_attention` false (spatial-ablation mode), both
/// masks act as identity and the output is the plain global average.
pub fn irt_encode<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    p: &IrtVars,
    bn: &mut [BnState<E>; 3],
    phase: Phase,
    residual_skip: bool,
    use_attention: bool,
) -> Result<IrtEncoded> {
    let f = irt_conv_stack(tape, x, p, bn, phase, residual_skip)?;
    if !use_attention {
        let pooled = tape.global_avg2d(f)?;
        return Ok(IrtEncoded { f_irt: pooled, m_c: None, m_s: None });
    }
    let m_c = channel_attention(tape, f, p)?;
    let m_s = spatial_attention(tape, f, p)?;
    let fc = tape.mul_chan_mask(f, m_c)?;
    let fcs = tape.mul_spat_mask(fc, m_s)?;
    let pooled = tape.global_avg2d(fcs)?;
    Ok(IrtEncoded { f_irt: pooled, m_c: Some(m_c), m_s: Some(m_s) })
}
