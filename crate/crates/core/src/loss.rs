//! Training objective: (focal) cross-entropy, misclassification-gated
//! variance regularization, attention-entropy regularization, and their
//! weighted sum.

use crate::error::{Error, Result};
use crate::fusion::{SIGMA2_MAX, SIGMA2_MIN};
use crate::model::ForwardOut;
use crate::tape::{Tape, Var};
use crate::tensor::Element;

pub const N_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// focusing exponent; 0 recovers plain cross-entropy
    pub focal_gamma: f64,
    /// per-class CE weights; None = unweighted
    pub class_weights: Option<[f64; N_CLASSES]>,
    /// variance-regularizer coefficient
    pub lambda1: f64,
    /// attention-entropy coefficient
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { focal_gamma: 0.0, class_weights: None, lambda1: 0.1, lambda2: 0.01 }
    }
}

/// Scalar values of each term, read back in double precision. `total`
/// satisfies total = ce + lambda1*uncertainty + lambda2*attention.
#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub uncertainty: f64,
    pub attention: f64,
    pub total: f64,
}

pub struct LossTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Labels arrive 1-based from storage; convert and validate.
pub fn class_indices(labels: &[u8]) -> Result<Vec<u32>> {
    labels
        .iter()
        .map(|&l| {
            if (1..=N_CLASSES as u8).contains(&l) {
                Ok((l - 1) as u32)
            } else {
                Err(Error::Label(l as i64))
            }
        })
        .collect()
}

/// w_c = N / (3 N_c): inverse-frequency class weights for the loss.
pub fn inverse_frequency_weights(labels: &[u8]) -> Result<[f64; N_CLASSES]> {
    let idx = class_indices(labels)?;
    let mut counts = [0usize; N_CLASSES];
    for i in idx {
        counts[i as usize] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Input(format!(
            "inverse-frequency weights need every class present, counts {counts:?}"
        )));
    }
    let n = labels.len() as f64;
    Ok([
        n / (N_CLASSES as f64 * counts[0] as f64),
        n / (N_CLASSES as f64 * counts[1] as f64),
        n / (N_CLASSES as f64 * counts[2] as f64),
    ])
}

/// (Focal) cross-entropy: sum_i w_{y_i} (1-p_i)^gamma (-log p_i) / sum_i w_{y_i}
/// with p_i the predicted probability of the true class. gamma = 0 gives the
/// plain weighted cross-entropy.
pub fn cross_entropy<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &[u8],
    class_weights: Option<&[f64; N_CLASSES]>,
    gamma: f64,
) -> Result<Var> {
    let idx = class_indices(labels)?;
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 || s[1] != N_CLASSES {
        return Err(Error::shape(format!(
            "logits must be [N, {N_CLASSES}], got {s:?}"
        )));
    }
    if s[0] != labels.len() {
        return Err(Error::shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            s[0]
        )));
    }
    if gamma < 0.0 {
        return Err(Error::Parameter(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let w: Vec<f64> = idx
        .iter()
        .map(|&i| class_weights.map_or(1.0, |cw| cw[i as usize]))
        .collect();
    let w_sum: f64 = w.iter().sum();
    let lsm = tape.log_softmax_last(logits)?;
    let lp = tape.pick_per_row(lsm, &idx)?; // [N] log p_i
    let coef: Vec<E> = w.iter().map(|&wi| E::from_real(-wi / w_sum)).collect();
    if gamma == 0.0 {
        return tape.weighted_sum(lp, &coef);
    }
    let p = tape.exp(lp);
    let one_minus = tape.affine(p, -1.0, 1.0);
    let focus = tape.pow_const(one_minus, gamma);
    let term = tape.mul(focus, lp)?;
    tape.weighted_sum(term, &coef)
}

/// Variance regularizer: -(1/N) sum over misclassified i of
/// log sigma2[i, argmax_i], pushing predicted variance up on mistakes.
/// The misclassification gate uses the logit values, not the graph.
pub fn uncertainty_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    sigma2: Var,
    labels: &[u8],
) -> Result<Var> {
    let idx = class_indices(labels)?;
    let sv = tape.value(sigma2);
    let tol = 1e-9;
    if sv
        .data()
        .iter()
        .any(|v| v.to_real() < SIGMA2_MIN - tol || v.to_real() > SIGMA2_MAX + tol)
    {
        return Err(Error::Contract(format!(
            "variance outside [{SIGMA2_MIN}, {SIGMA2_MAX}] reached the loss"
        )));
    }
    let pred = tape.value(logits).argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} labels for {} prediction rows",
            labels.len(),
            pred.len()
        )));
    }
    let n = labels.len() as f64;
    let picked = tape.pick_per_row(sigma2, &pred)?;
    let lg = tape.log(picked);
    let coef: Vec<E> = pred
        .iter()
        .zip(&idx)
        .map(|(&p, &y)| if p != y { E::from_real(-1.0 / n) } else { E::zero() })
        .collect();
    tape.weighted_sum(lg, &coef)
}

/// Mean per-sample entropy of the temporal weights plus the row-normalized
/// spatial mask. Lower values mean sharper attention.
pub fn attention_entropy<E: Element>(
    tape: &mut Tape<E>,
    temporal: Option<Var>,
    spatial: Option<Var>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut n_rows = 0usize;
    if let Some(tw) = temporal {
        let s = tape.value(tw).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("temporal weights must be [N, T], got {s:?}")));
        }
        for row in tape.value(tw).data().chunks(s[1]) {
            let sum: f64 = row.iter().map(|v| v.to_real()).sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|v| v.to_real() < 0.0) {
                return Err(Error::Contract(format!(
                    "temporal attention row not a probability vector (sum {sum})"
                )));
            }
        }
        n_rows = s[0];
        let h = tape.xlogx(tw);
        total = Some(tape.sum_all(h));
    }
    if let Some(ms) = spatial {
        let s = tape.value(ms).shape().to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(format!("spatial mask must be [N, 1, H, W], got {s:?}")));
        }
        let (n, hw) = (s[0], s[2] * s[3]);
        if n_rows != 0 && n_rows != n {
            return Err(Error::shape(format!(
                "temporal and spatial batch sizes disagree: {n_rows} vs {n}"
            )));
        }
        n_rows = n;
        let flat = tape.reshape(ms, &[n, hw])?;
        let norm = tape.normalize_rows(flat)?;
        let h = tape.xlogx(norm);
        let se = tape.sum_all(h);
        total = Some(match total {
            Some(t) => tape.add(t, se)?,
            None => se,
        });
    }
    match total {
        Some(t) if n_rows > 0 => Ok(tape.affine(t, -1.0 / n_rows as f64, 0.0)),
        _ => Ok(tape.constant(crate::tensor::Tensor::scalar(E::zero()))),
    }
}

/// total = ce + lambda1 * uncertainty + lambda2 * attention, with each term's
/// double-precision value reported alongside.
pub fn composite_loss<E: Element>(
    tape: &mut Tape<E>,
    out: &ForwardOut<E>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let ce = cross_entropy(tape, out.logits, labels, cfg.class_weights.as_ref(), cfg.focal_gamma)?;
    let unc = uncertainty_loss(tape, out.logits, out.sigma2, labels)?;
    let att = attention_entropy(tape, out.temporal, out.spatial)?;
    let unc_scaled = tape.affine(unc, cfg.lambda1, 0.0);
    let att_scaled = tape.affine(att, cfg.lambda2, 0.0);
    let partial = tape.add(ce, unc_scaled)?;
    let total = tape.add(partial, att_scaled)?;
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item().to_real(),
        uncertainty: tape.value(unc).item().to_real(),
        attention: tape.value(att).item().to_real(),
        total: tape.value(total).item().to_real(),
    };
    Ok(LossTerms { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits_var(tape: &mut Tape<f64>, rows: &[[f64; 3]]) -> Var {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let t = Tensor::new(&[rows.len(), 3], data).unwrap();
        tape.leaf(t, true)
    }

    fn softmax3(row: &[f64; 3]) -> [f64; 3] {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        [e[0] / s, e[1] / s, e[2] / s]
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut tape = Tape::new();
        let rows = [[2.0, -1.0, 0.5], [-0.3, 0.8, 0.1]];
        let logits = logits_var(&mut tape, &rows);
        let loss = cross_entropy(&mut tape, logits, &[1, 2], None, 0.0).unwrap();
        let want = -(softmax3(&rows[0])[0].ln() + softmax3(&rows[1])[1].ln()) / 2.0;
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn weighted_cross_entropy_uses_per_class_weights() {
        let mut tape = Tape::new();
        let rows = [[2.0, -1.0, 0.5], [-0.3, 0.8, 0.1], [0.0, 0.1, 1.4]];
        let logits = logits_var(&mut tape, &rows);
        let w = [0.5, 2.0, 1.5];
        let loss = cross_entropy(&mut tape, logits, &[1, 2, 3], Some(&w), 0.0).unwrap();
        let nll = [
            -softmax3(&rows[0])[0].ln(),
            -softmax3(&rows[1])[1].ln(),
            -softmax3(&rows[2])[2].ln(),
        ];
        let want = (0.5 * nll[0] + 2.0 * nll[1] + 1.5 * nll[2]) / (0.5 + 2.0 + 1.5);
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_focal_equals_cross_entropy_value_and_gradient() {
        let rows = [[1.2, -0.7, 0.3], [-2.0, 0.4, 1.9], [0.0, 0.0, 0.0]];
        let labels = [3u8, 1, 2];
        let run = |gamma: f64| {
            let mut tape = Tape::new();
            let logits = logits_var(&mut tape, &rows);
            let loss = cross_entropy(&mut tape, logits, &labels, None, gamma).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item(),
                tape.grad(logits).unwrap().data().to_vec(),
            )
        };
        let (v0, g0) = run(0.0);
        // gamma -> 0 limit through the focal path: (1-p)^0 = 1 exactly
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, &rows);
        let idx = class_indices(&labels).unwrap();
        let lsm = tape.log_softmax_last(logits).unwrap();
        let lp = tape.pick_per_row(lsm, &idx).unwrap();
        let p = tape.exp(lp);
        let one_minus = tape.affine(p, -1.0, 1.0);
        let focus = tape.pow_const(one_minus, 0.0);
        let term = tape.mul(focus, lp).unwrap();
        let coef = vec![-1.0 / 3.0; 3];
        let loss = tape.weighted_sum(term, &coef).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.value(loss).item() - v0).abs() < 1e-12);
        for (a, b) in tape.grad(logits).unwrap().data().iter().zip(&g0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn focal_matches_hand_value_and_downweights_easy_samples() {
        let mut tape = Tape::new();
        let rows = [[4.0, -2.0, -2.0], [0.2, 0.0, -0.1]];
        let labels = [1u8, 1];
        let logits = logits_var(&mut tape, &rows);
        let ce = cross_entropy(&mut tape, logits, &labels, None, 0.0).unwrap();
        let fl = cross_entropy(&mut tape, logits, &labels, None, 2.0).unwrap();
        let want: f64 = rows
            .iter()
            .map(|r| {
                let p = softmax3(r)[0];
                (1.0 - p).powi(2) * (-p.ln())
            })
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(fl).item() - want).abs() < 1e-12);
        // the confident row dominates CE reduction: focal strictly below CE
        assert!(tape.value(fl).item() < tape.value(ce).item());
    }

    #[test]
    fn uncertainty_loss_zero_when_all_correct() {
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, &[[3.0, 0.0, 0.0], [0.0, 3.0, 0.0]]);
        let s2 = tape.leaf(Tensor::full(&[2, 3], 0.5), true);
        let loss = uncertainty_loss(&mut tape, logits, s2, &[1, 2]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(s2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uncertainty_loss_matches_hand_value_on_mistakes() {
        let mut tape = Tape::new();
        // row 0 predicts class 2 but label is 1; row 1 correct
        let logits = logits_var(&mut tape, &[[0.0, 2.0, 0.0], [0.0, 0.0, 2.0]]);
        let s2v = [[0.4, 0.9, 0.2], [0.3, 0.3, 0.7]];
        let s2 = tape.leaf(
            Tensor::new(&[2, 3], s2v.iter().flatten().copied().collect()).unwrap(),
            true,
        );
        let loss = uncertainty_loss(&mut tape, logits, s2, &[1, 3]).unwrap();
        let want = -(0.9f64.ln()) / 2.0; // only row 0, predicted class 2
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(s2).unwrap().data();
        assert!((g[1] - (-1.0 / (2.0 * 0.9))).abs() < 1e-12);
        assert!(g.iter().enumerate().all(|(i, &v)| i == 1 || v == 0.0));
    }

    #[test]
    fn uncertainty_loss_rejects_out_of_range_variance() {
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, &[[1.0, 0.0, 0.0]]);
        let s2 = tape.leaf(Tensor::full(&[1, 3], 11.0), false);
        assert!(matches!(
            uncertainty_loss(&mut tape, logits, s2, &[1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn attention_entropy_of_uniform_weights_is_log_cardinality() {
        let mut tape = Tape::new();
        let tw = tape.leaf(Tensor::full(&[2, 4], 0.25), false);
        let ms = tape.leaf(Tensor::full(&[2, 1, 2, 2], 0.5), false);
        let loss = attention_entropy(&mut tape, Some(tw), Some(ms)).unwrap();
        // temporal: ln 4 per row; spatial normalizes to uniform over 4 cells
        let want = 4.0f64.ln() + 4.0f64.ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn attention_entropy_decreases_as_weights_sharpen() {
        let mut tape = Tape::new();
        let flat = tape.leaf(Tensor::full(&[1, 4], 0.25), false);
        let peak = tape.leaf(Tensor::new(&[1, 4], vec![0.97, 0.01, 0.01, 0.01]).unwrap(), false);
        let hf = attention_entropy(&mut tape, Some(flat), None).unwrap();
        let hp = attention_entropy(&mut tape, Some(peak), None).unwrap();
        assert!(tape.value(hp).item() < tape.value(hf).item());
        assert!(tape.value(hp).item() > 0.0);
    }

    #[test]
    fn attention_entropy_rejects_unnormalized_rows() {
        let mut tape = Tape::new();
        let tw = tape.leaf(Tensor::full(&[1, 4], 0.3), false);
        assert!(matches!(
            attention_entropy(&mut tape, Some(tw), None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn missing_attention_terms_give_zero() {
        let mut tape = Tape::<f64>::new();
        let loss = attention_entropy(&mut tape, None, None).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn labels_outside_range_rejected() {
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, &[[1.0, 0.0, 0.0]]);
        for bad in [0u8, 4] {
            assert!(matches!(
                cross_entropy(&mut tape, logits, &[bad], None, 0.0),
                Err(Error::Label(_))
            ));
        }
    }

    #[test]
    fn inverse_frequency_weights_match_count_formula() {
        let labels = [1u8, 1, 1, 2, 2, 3];
        let w = inverse_frequency_weights(&labels).unwrap();
        assert!((w[0] - 6.0 / 9.0).abs() < 1e-15);
        assert!((w[1] - 1.0).abs() < 1e-15);
        assert!((w[2] - 2.0).abs() < 1e-15);
        assert!(inverse_frequency_weights(&[1, 1, 2]).is_err());
    }

    #[test]
    fn composite_total_matches_breakdown_sum() {
        use crate::model::ForwardOut;
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, &[[0.6, -0.2, 1.1], [2.0, 0.3, -0.8]]);
        let s2 = tape.leaf(Tensor::new(&[2, 3], vec![0.2, 0.5, 1.3, 0.9, 0.4, 0.7]).unwrap(), true);
        let tw = tape.leaf(
            Tensor::new(&[2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25]).unwrap(),
            true,
        );
        let ms = tape.leaf(Tensor::full(&[2, 1, 2, 2], 0.6), true);
        let z = tape.leaf(Tensor::zeros(&[2, 4]), false);
        let out = ForwardOut {
            logits,
            sigma2: s2,
            z,
            temporal: Some(tw),
            spatial: Some(ms),
            cross: None,
        };
        let cfg = LossConfig { focal_gamma: 1.5, class_weights: None, lambda1: 0.1, lambda2: 0.01 };
        // both rows misclassified: row 0 predicts 3 with label 1, row 1
        // predicts 1 with label 2, so every loss term is active
        let terms = composite_loss(&mut tape, &out, &[1, 2], &cfg).unwrap();
        let b = terms.breakdown;
        assert!((b.total - (b.ce + 0.1 * b.uncertainty + 0.01 * b.attention)).abs() < 1e-9);
        assert!((tape.value(terms.total).item() - b.total).abs() < 1e-12);
        // all three terms active for this input
        assert!(b.ce > 0.0 && b.uncertainty != 0.0 && b.attention > 0.0);
        tape.backward(terms.total).unwrap();
        assert!(tape.grad(logits).unwrap().all_finite());
        assert!(tape.grad(s2).unwrap().all_finite());
        assert!(tape.grad(tw).unwrap().all_finite());
        assert!(tape.grad(ms).unwrap().all_finite());
    }
}
