//! GPR A-scan encoder: a three-layer 1-D conv stack pooled to a short
//! sequence, followed by temporal attention that produces a single feature
//! vector plus per-time-step attention weights.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Element;

/// Bound parameter handles for the encoder. Kernel sizes are fixed at 7/5/3
/// with stride 1 and floor(k/2) padding, so the conv stack preserves length.
pub struct GprVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
    pub conv3_w: Var,
    pub conv3_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    /// additive-variant scoring MLP
    pub wh: Var,
    pub bh: Var,
    pub wa: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    ScaledDot,
    Additive,
}

/// [N, L] signals -> [N, T_seq, d] per-time-step features.
pub fn gpr_conv_stack<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    p: &GprVars,
    t_seq: usize,
) -> Result<Var> {
    if !tape.value(x).all_finite() {
        return Err(Error::Numeric("GPR input contains non-finite values".into()));
    }
    let s = tape.value(x).shape().to_vec();
    if s.len() != 2 {
        return Err(Error::shape(format!("GPR batch must be [N, L], got {s:?}")));
    }
    let (n, l) = (s[0], s[1]);
    let x3 = tape.reshape(x, &[n, 1, l])?;
    let k1 = tape.value(p.conv1_w).shape()[2];
    let c1 = tape.conv1d(x3, p.conv1_w, p.conv1_b, 1, k1 / 2)?;
    let a1 = tape.relu(c1);
    let k2 = tape.value(p.conv2_w).shape()[2];
    let c2 = tape.conv1d(a1, p.conv2_w, p.conv2_b, 1, k2 / 2)?;
    let a2 = tape.relu(c2);
    let k3 = tape.value(p.conv3_w).shape()[2];
    let c3 = tape.conv1d(a2, p.conv3_w, p.conv3_b, 1, k3 / 2)?;
    let a3 = tape.relu(c3);
    let pooled = tape.adaptive_avg1d(a3, t_seq)?; // [N, d, T]
    tape.transpose12(pooled) // [N, T, d]
}

/// Scaled dot-product self-attention over time steps with `heads` heads.
/// Returns the pooled feature (row mean of the context) and the reported
/// attention weights: column means of the head-averaged attention matrix,
/// i.e. average attention received per time step.
pub fn temporal_attention_scaled<E: Element>(
    tape: &mut Tape<E>,
    h_feat: Var,
    p: &GprVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = tape.value(h_feat).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("attention input must be [N,T,d], got {s:?}")));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Parameter(format!("head count {heads} must divide feature dim {d}")));
    }
    let dh = d / heads;
    let flat = tape.reshape(h_feat, &[n * t, d])?;
    let q = tape.matmul(flat, p.wq)?;
    let k = tape.matmul(flat, p.wk)?;
    let v = tape.matmul(flat, p.wv)?;
    let q = tape.reshape(q, &[n, t, d])?;
    let k = tape.reshape(k, &[n, t, d])?;
    let v = tape.reshape(v, &[n, t, d])?;
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let scores = tape.bmm(qh, kh, true)?;
    let scaled = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
    let attn = tape.softmax_last(scaled)?; // [N*heads, T, T]
    let ctx = tape.bmm(attn, vh, false)?;
    let merged = tape.merge_heads(ctx, heads)?; // [N, T, d]
    let f = tape.mean_axis1(merged)?;
    let a_mean = tape.mean_heads(attn, heads)?; // [N, T, T]
    let weights = tape.mean_axis1(a_mean)?; // column means -> [N, T]
    Ok((f, weights))
}

/// Additive scoring attention: alpha = softmax_t(wa . tanh(H wh + bh)),
/// f = sum_t alpha_t H_t.
pub fn temporal_attention_additive<E: Element>(
    tape: &mut Tape<E>,
    h_feat: Var,
    p: &GprVars,
) -> Result<(Var, Var)> {
    let s = tape.value(h_feat).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("attention input must be [N,T,d], got {s:?}")));
    }
    let (n, t, d) = (s[0], s[1], s[2]);
    let flat = tape.reshape(h_feat, &[n * t, d])?;
    let hid = tape.matmul(flat, p.wh)?;
    let hid = tape.add_bias_row(hid, p.bh)?;
    let hid = tape.tanh_act(hid);
    let scores = tape.matmul(hid, p.wa)?; // [N*T, 1]
    let scores = tape.reshape(scores, &[n, t])?;
    let alpha = tape.softmax_last(scores)?; // [N, T]
    let alpha3 = tape.reshape(alpha, &[n, 1, t])?;
    let f = tape.bmm(alpha3, h_feat, false)?; // [N, 1, d]
    let f = tape.reshape(f, &[n, d])?;
    Ok((f, alpha))
}

/// Full encoder: conv stack then attention in the requested mode. `heads`
/// applies to scaled-dot mode only.
pub fn gpr_encode<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    p: &GprVars,
    t_seq: usize,
    mode: TemporalMode,
    heads: usize,
) -> Result<(Var, Var)> {
    let h = gpr_conv_stack(tape, x, p, t_seq)?;
    match mode {
        TemporalMode::ScaledDot => temporal_attention_scaled(tape, h, p, heads),
        TemporalMode::Additive => temporal_attention_additive(tape, h, p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_id, Domain, RngStream};
    use crate::tensor::Tensor;

    fn rand_tensor(shape: &[usize], a: u32, scale: f64) -> Tensor<f64> {
        let mut r = RngStream::new(11, stream_id(Domain::Init, a, 0));
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.uniform_in(-scale, scale)).collect()).unwrap()
    }

    /// Tiny encoder: d=4, kernels 3/3/3, channels 2->3->4.
    fn toy_vars(tape: &mut Tape<f64>, zero_bias: bool, grad: bool) -> GprVars {
        let bias = |tape: &mut Tape<f64>, shape: &[usize], a: u32| {
            if zero_bias {
                tape.leaf(Tensor::zeros(shape), grad)
            } else {
                let t = rand_tensor(shape, a, 0.1);
                tape.leaf(t, grad)
            }
        };
        GprVars {
            conv1_w: tape.leaf(rand_tensor(&[2, 1, 3], 1, 0.5), grad),
            conv1_b: bias(tape, &[2], 2),
            conv2_w: tape.leaf(rand_tensor(&[3, 2, 3], 3, 0.5), grad),
            conv2_b: bias(tape, &[3], 4),
            conv3_w: tape.leaf(rand_tensor(&[4, 3, 3], 5, 0.5), grad),
            conv3_b: bias(tape, &[4], 6),
            wq: tape.leaf(rand_tensor(&[4, 4], 7, 0.5), grad),
            wk: tape.leaf(rand_tensor(&[4, 4], 8, 0.5), grad),
            wv: tape.leaf(rand_tensor(&[4, 4], 9, 0.5), grad),
            wh: tape.leaf(rand_tensor(&[4, 3], 10, 0.5), grad),
            bh: bias(tape, &[3], 11),
            wa: tape.leaf(rand_tensor(&[3, 1], 12, 0.5), grad),
        }
    }

    #[test]
    fn zero_signal_zero_bias_gives_zero_features() {
        let mut tape = Tape::<f64>::new();
        let p = toy_vars(&mut tape, true, false);
        let x = tape.leaf(Tensor::zeros(&[2, 16]), false);
        let h = gpr_conv_stack(&mut tape, x, &p, 4).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(h).shape(), &[2, 4, 4]);
    }

    #[test]
    fn rejects_non_finite_signal() {
        let mut tape = Tape::<f64>::new();
        let p = toy_vars(&mut tape, true, false);
        let x = tape.leaf(Tensor::from_vec(vec![f64::INFINITY; 16]).reshaped(&[1, 16]).unwrap(), false);
        assert!(gpr_conv_stack(&mut tape, x, &p, 4).is_err());
    }

    #[test]
    fn single_conv_layer_matches_direct_summation_on_ramp() {
        // One k=3 layer, one output channel, fixed weights, on a ramp signal;
        // oracle computed by explicit summation below.
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::new(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap(), false);
        let b = tape.leaf(Tensor::from_vec(vec![0.25]), false);
        let ramp: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let x = tape.leaf(Tensor::new(&[1, 1, 8], ramp.clone()).unwrap(), false);
        let y = tape.conv1d(x, w, b, 1, 1).unwrap();
        let mut expect = vec![0.0; 8];
        let kernel = [0.5, -1.0, 2.0];
        for (o, e) in expect.iter_mut().enumerate() {
            let mut acc = 0.25;
            for (j, kj) in kernel.iter().enumerate() {
                let idx = o as isize + j as isize - 1;
                if (0..8).contains(&idx) {
                    acc += kj * ramp[idx as usize];
                }
            }
            *e = acc;
        }
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_uniform_attention_in_both_modes() {
        let mut tape = Tape::<f64>::new();
        let p = toy_vars(&mut tape, false, false);
        let row: Vec<f64> = vec![0.3, -0.7, 1.1, 0.2];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend(&row);
        }
        let h = tape.leaf(Tensor::new(&[1, 4, 4], data).unwrap(), false);
        for heads in [1usize, 2] {
            let (_, w) = temporal_attention_scaled(&mut tape, h, &p, heads).unwrap();
            for &v in tape.value(w).data() {
                assert!((v - 0.25).abs() < 1e-9, "scaled-dot weight {v}");
            }
        }
        let (f, w) = temporal_attention_additive(&mut tape, h, &p).unwrap();
        for &v in tape.value(w).data() {
            assert!((v - 0.25).abs() < 1e-9, "additive weight {v}");
        }
        // f is the convex combination of identical rows = that row
        for (a, b) in tape.value(f).data().iter().zip(&row) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn additive_with_zero_scorer_is_column_mean() {
        let mut tape = Tape::<f64>::new();
        let mut p = toy_vars(&mut tape, false, false);
        p.wa = tape.leaf(Tensor::zeros(&[3, 1]), false);
        let h = tape.leaf(rand_tensor(&[2, 4, 4], 20, 1.0), false);
        let (f, w) = temporal_attention_additive(&mut tape, h, &p).unwrap();
        for &v in tape.value(w).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let expect = {
            let hd = tape.value(h).data();
            let mut m = vec![0.0; 2 * 4];
            for n in 0..2 {
                for t in 0..4 {
                    for d in 0..4 {
                        m[n * 4 + d] += hd[(n * 4 + t) * 4 + d] / 4.0;
                    }
                }
            }
            m
        };
        for (a, b) in tape.value(f).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_dot_tiny_case_matches_hand_evaluation() {
        // T=2, d=2, hand-set asymmetric projections; oracle is straight-line
        // scalar arithmetic below.
        let mut tape = Tape::<f64>::new();
        let mut p = toy_vars(&mut tape, true, false);
        p.wq = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap(), false);
        p.wk = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        p.wv = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let h = tape.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let (f, w) = temporal_attention_scaled(&mut tape, h, &p, 1).unwrap();
        // With H = I: Q = wq, K = wk = I, V = wv. scores = Q, scaled by 1/sqrt(2).
        let s = 1.0 / 2.0f64.sqrt();
        let (a00, a01) = {
            let (e0, e1) = ((1.0 * s).exp(), (0.0f64).exp());
            (e0 / (e0 + e1), e1 / (e0 + e1))
        };
        let (a10, a11) = {
            let (e0, e1) = ((0.0f64).exp(), (2.0 * s).exp());
            (e0 / (e0 + e1), e1 / (e0 + e1))
        };
        let c = [
            [a00 * 1.0 + a01 * 3.0, a00 * 2.0 + a01 * 4.0],
            [a10 * 1.0 + a11 * 3.0, a10 * 2.0 + a11 * 4.0],
        ];
        let f_expect = [(c[0][0] + c[1][0]) / 2.0, (c[0][1] + c[1][1]) / 2.0];
        let w_expect = [(a00 + a10) / 2.0, (a01 + a11) / 2.0];
        for (a, b) in tape.value(f).data().iter().zip(&f_expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(w).data().iter().zip(&w_expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w_expect[0] + w_expect[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_weights_are_probability_vectors() {
        let mut tape = Tape::<f64>::new();
        let p = toy_vars(&mut tape, false, false);
        for i in 0..20 {
            let x = tape.leaf(rand_tensor(&[2, 16], 100 + i, 2.0), false);
            for mode in [TemporalMode::ScaledDot, TemporalMode::Additive] {
                let (_, w) = gpr_encode(&mut tape, x, &p, 4, mode, 2).unwrap();
                for row in tape.value(w).data().chunks_exact(4) {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "sum {s}");
                }
            }
        }
    }

    #[test]
    fn additive_output_in_convex_hull_of_rows() {
        let mut tape = Tape::<f64>::new();
        let p = toy_vars(&mut tape, false, false);
        let h = tape.leaf(rand_tensor(&[3, 4, 4], 55, 1.5), false);
        let (f, _) = temporal_attention_additive(&mut tape, h, &p).unwrap();
        let hd = tape.value(h).data();
        let fd = tape.value(f).data();
        for n in 0..3 {
            for d in 0..4 {
                let col: Vec<f64> = (0..4).map(|t| hd[(n * 4 + t) * 4 + d]).collect();
                let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
                let v = fd[n * 4 + d];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} not in [{lo},{hi}]");
            }
        }
    }

    #[test]
    fn permuting_time_steps_permutes_additive_weights() {
        let mut tape = Tape::<f64>::new();
        let p = toy_vars(&mut tape, false, false);
        let h = rand_tensor(&[1, 4, 4], 66, 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut hp = Tensor::zeros(&[1, 4, 4]);
        for (dst, &src) in perm.iter().enumerate() {
            let row: Vec<f64> = h.data()[src * 4..(src + 1) * 4].to_vec();
            hp.data_mut()[dst * 4..(dst + 1) * 4].copy_from_slice(&row);
        }
        let hv = tape.leaf(h, false);
        let hpv = tape.leaf(hp, false);
        let (_, w) = temporal_attention_additive(&mut tape, hv, &p).unwrap();
        let (_, wp) = temporal_attention_additive(&mut tape, hpv, &p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = tape.value(w).data()[src];
            let b = tape.value(wp).data()[dst];
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn paper_dims_shape_is_16_by_128() {
        let mut tape = Tape::<f32>::new();
        let mk = |tape: &mut Tape<f32>, shape: &[usize], a: u32| {
            let mut r = RngStream::new(3, stream_id(Domain::Init, a, 0));
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, (0..n).map(|_| r.uniform_in(-0.1, 0.1) as f32).collect())
                .unwrap();
            tape.leaf(t, false)
        };
        let p = GprVars {
            conv1_w: mk(&mut tape, &[32, 1, 7], 0),
            conv1_b: mk(&mut tape, &[32], 1),
            conv2_w: mk(&mut tape, &[64, 32, 5], 2),
            conv2_b: mk(&mut tape, &[64], 3),
            conv3_w: mk(&mut tape, &[128, 64, 3], 4),
            conv3_b: mk(&mut tape, &[128], 5),
            wq: mk(&mut tape, &[128, 128], 6),
            wk: mk(&mut tape, &[128, 128], 7),
            wv: mk(&mut tape, &[128, 128], 8),
            wh: mk(&mut tape, &[128, 64], 9),
            bh: mk(&mut tape, &[64], 10),
            wa: mk(&mut tape, &[64, 1], 11),
        };
        let x = mk(&mut tape, &[1, 512], 12);
        let h = gpr_conv_stack(&mut tape, x, &p, 16).unwrap();
        assert_eq!(tape.value(h).shape(), &[1, 16, 128]);
        let (f, w) = temporal_attention_scaled(&mut tape, h, &p, 8).unwrap();
        assert_eq!(tape.value(f).shape(), &[1, 128]);
        assert_eq!(tape.value(w).shape(), &[1, 16]);
    }
}
