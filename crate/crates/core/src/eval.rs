//! Classification metrics and post-hoc confidence calibration, all in double
//! precision: confusion/F1, one-vs-rest AUC, expected calibration error, and
//! temperature fitting.

use crate::error::{Error, Result};
use crate::loss::{class_indices, N_CLASSES};

pub const ECE_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    /// confusion[truth][pred], zero-based classes
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
    pub accuracy: f64,
    pub precision: [f64; N_CLASSES],
    pub recall: [f64; N_CLASSES],
    pub f1: [f64; N_CLASSES],
    pub macro_f1: f64,
}

/// Confusion matrix and derived scores. Classes with no support and no
/// predictions score zero precision/recall/F1 rather than NaN.
pub fn confusion_and_f1(pred: &[u8], truth: &[u8]) -> Result<EvalMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("metrics need at least one sample".into()));
    }
    let p = class_indices(pred)?;
    let t = class_indices(truth)?;
    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    let mut hits = 0usize;
    for (&pi, &ti) in p.iter().zip(&t) {
        confusion[ti as usize][pi as usize] += 1;
        if pi == ti {
            hits += 1;
        }
    }
    let mut precision = [0.0; N_CLASSES];
    let mut recall = [0.0; N_CLASSES];
    let mut f1 = [0.0; N_CLASSES];
    for c in 0..N_CLASSES {
        let tp = confusion[c][c];
        let pred_c: usize = (0..N_CLASSES).map(|r| confusion[r][c]).sum();
        let truth_c: usize = confusion[c].iter().sum();
        precision[c] = if pred_c == 0 { 0.0 } else { tp as f64 / pred_c as f64 };
        recall[c] = if truth_c == 0 { 0.0 } else { tp as f64 / truth_c as f64 };
        let denom = precision[c] + recall[c];
        f1[c] = if denom == 0.0 { 0.0 } else { 2.0 * precision[c] * recall[c] / denom };
    }
    Ok(EvalMetrics {
        confusion,
        accuracy: hits as f64 / pred.len() as f64,
        precision,
        recall,
        f1,
        macro_f1: f1.iter().sum::<f64>() / N_CLASSES as f64,
    })
}

/// Area under the ROC curve for one score column, computed from average
/// ranks (ties contribute 1/2).
fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&b| b).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must be comparable"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank over the tie group [i, j]
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Mean one-vs-rest AUC over the classes that actually have both positive
/// and negative samples. Errors if no class qualifies.
pub fn macro_auc(probs: &[[f64; N_CLASSES]], truth: &[u8]) -> Result<f64> {
    if probs.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            truth.len()
        )));
    }
    let t = class_indices(truth)?;
    let mut acc = 0.0;
    let mut valid = 0usize;
    for c in 0..N_CLASSES {
        let scores: Vec<f64> = probs.iter().map(|row| row[c]).collect();
        let positive: Vec<bool> = t.iter().map(|&y| y as usize == c).collect();
        if let Some(a) = auc_binary(&scores, &positive) {
            acc += a;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::UndefinedAuc);
    }
    Ok(acc / valid as f64)
}

/// Expected calibration error with equal-width confidence bins over (0, 1].
/// Confidence is the max predicted probability.
pub fn ece(probs: &[[f64; N_CLASSES]], truth: &[u8], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Parameter("ECE needs at least one bin".into()));
    }
    if probs.len() != truth.len() || probs.is_empty() {
        return Err(Error::shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            truth.len()
        )));
    }
    let t = class_indices(truth)?;
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut hit_sum = vec![0.0f64; bins];
    for (row, &y) in probs.iter().zip(&t) {
        let (mut best, mut conf) = (0usize, row[0]);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > conf {
                best = j;
                conf = v;
            }
        }
        if !(0.0..=1.0 + 1e-9).contains(&conf) {
            return Err(Error::Numeric(format!("confidence {conf} outside [0,1]")));
        }
        // bins are (k/B, (k+1)/B]; conf > 0 always holds for a softmax max
        let b = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        hit_sum[b] += if best == y as usize { 1.0 } else { 0.0 };
    }
    let n = probs.len() as f64;
    let mut e = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let cb = count[b] as f64;
        e += (cb / n) * (hit_sum[b] / cb - conf_sum[b] / cb).abs();
    }
    Ok(e)
}

pub fn softmax3(row: &[f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; N_CLASSES];
    let mut s = 0.0;
    for (o, &v) in e.iter_mut().zip(row) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in e.iter_mut() {
        *o /= s;
    }
    e
}

/// Mean negative log-likelihood of temperature-scaled logits.
pub fn nll_at_temperature(logits: &[[f64; N_CLASSES]], truth: &[u32], tau: f64) -> f64 {
    let mut acc = 0.0;
    for (row, &y) in logits.iter().zip(truth) {
        let scaled = [row[0] / tau, row[1] / tau, row[2] / tau];
        let p = softmax3(&scaled);
        acc -= p[y as usize].ln();
    }
    acc / logits.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureFit {
    pub tau: f64,
    pub nll_before: f64,
    pub nll_after: f64,
}

pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 10.0;
pub const TAU_GRID_STEP: f64 = 0.05;
pub const TAU_REFINE_TOL: f64 = 1e-4;

/// Single-parameter temperature scaling: coarse grid over
/// [TAU_MIN, TAU_MAX], then golden-section refinement of the best bracket.
/// The fitted NLL never exceeds the tau = 1 baseline.
pub fn fit_temperature(logits: &[[f64; N_CLASSES]], truth: &[u8]) -> Result<TemperatureFit> {
    if logits.len() != truth.len() || logits.is_empty() {
        return Err(Error::Calibration(format!(
            "{} logit rows for {} labels",
            logits.len(),
            truth.len()
        )));
    }
    if logits.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Calibration("non-finite logits".into()));
    }
    let t = class_indices(truth)?;
    let nll = |tau: f64| nll_at_temperature(logits, &t, tau);
    let nll_before = nll(1.0);

    let steps = ((TAU_MAX - TAU_MIN) / TAU_GRID_STEP).round() as usize;
    let mut best_i = 0usize;
    let mut best_v = f64::INFINITY;
    for i in 0..=steps {
        let v = nll(TAU_MIN + i as f64 * TAU_GRID_STEP);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut a = TAU_MIN + best_i.saturating_sub(1) as f64 * TAU_GRID_STEP;
    let mut b = (TAU_MIN + (best_i + 1) as f64 * TAU_GRID_STEP).min(TAU_MAX);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = nll(x1);
    let mut f2 = nll(x2);
    while b - a > TAU_REFINE_TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = nll(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = nll(x2);
        }
    }
    let mut tau = 0.5 * (a + b);
    let mut nll_after = nll(tau);
    // golden section assumes unimodality; guard the contract regardless
    if best_v < nll_after {
        tau = TAU_MIN + best_i as f64 * TAU_GRID_STEP;
        nll_after = best_v;
    }
    if nll_before < nll_after {
        tau = 1.0;
        nll_after = nll_before;
    }
    Ok(TemperatureFit { tau, nll_before, nll_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_id, Domain, RngStream};

    #[test]
    fn confusion_matches_hand_table() {
        let truth = [1u8, 1, 1, 2, 2, 3, 3, 3, 3, 1];
        let pred = [1u8, 2, 1, 2, 2, 3, 1, 3, 3, 1];
        let m = confusion_and_f1(&pred, &truth).unwrap();
        assert_eq!(m.confusion, [[3, 1, 0], [0, 2, 0], [1, 0, 3]]);
        assert!((m.accuracy - 0.8).abs() < 1e-15);
        // class 1: P = 3/4, R = 3/4 -> F1 = 3/4
        assert!((m.f1[0] - 0.75).abs() < 1e-12);
        // class 2: P = 2/3, R = 1 -> F1 = 0.8
        assert!((m.f1[1] - 0.8).abs() < 1e-12);
        // class 3: P = 1, R = 3/4 -> F1 = 6/7
        assert!((m.f1[2] - 6.0 / 7.0).abs() < 1e-12);
        assert!((m.macro_f1 - (0.75 + 0.8 + 6.0 / 7.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truth = [1u8, 2, 3, 1, 2, 3];
        let m = confusion_and_f1(&truth, &truth).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn collapsed_predictor_gets_zero_f1_for_missing_classes() {
        let truth = [1u8, 2, 3, 2, 3];
        let pred = [1u8, 1, 1, 1, 1];
        let m = confusion_and_f1(&pred, &truth).unwrap();
        assert_eq!(m.f1[1], 0.0);
        assert_eq!(m.f1[2], 0.0);
        assert!(m.macro_f1 < 0.2);
        // accuracy - macroF1 gap is what the imbalance check measures
        assert!(m.accuracy > m.macro_f1);
    }

    #[test]
    fn auc_extremes_and_ties() {
        // every class column perfectly separates its positives
        let probs = [
            [0.9, 0.05, 0.05],
            [0.8, 0.1, 0.1],
            [0.1, 0.8, 0.1],
            [0.1, 0.1, 0.8],
        ];
        let auc = macro_auc(&probs, &[1, 1, 2, 3]).unwrap();
        assert!((auc - 1.0).abs() < 1e-12);
        // permuted labels invert most pairs: (0 + 0 + 1/2) / 3
        let auc = macro_auc(&probs, &[2, 3, 1, 1]).unwrap();
        assert!((auc - 1.0 / 6.0).abs() < 1e-12, "got {auc}");
        // all-tied scores give exactly 1/2 everywhere
        let flat = [[1.0 / 3.0; 3]; 6];
        let auc = macro_auc(&flat, &[1, 2, 3, 1, 2, 3]).unwrap();
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_skips_absent_classes_and_errors_when_none_valid() {
        let probs = [[0.6, 0.2, 0.2], [0.3, 0.5, 0.2], [0.7, 0.2, 0.1], [0.2, 0.6, 0.2]];
        // class 3 absent: average over classes 1 and 2 only
        let auc = macro_auc(&probs, &[1, 2, 1, 2]).unwrap();
        assert!((auc - 1.0).abs() < 1e-12);
        assert!(matches!(
            macro_auc(&probs, &[1, 1, 1, 1]),
            Err(Error::UndefinedAuc)
        ));
    }

    #[test]
    fn ece_zero_for_perfectly_confident_correct_predictions() {
        let probs = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let e = ece(&probs, &[1, 2, 3], ECE_BINS).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn ece_matches_hand_binning() {
        // two samples in the (0.6, 0.667] bin (conf 0.62, 0.65: one hit),
        // one in (0.933, 1.0] (conf 0.99, hit)
        let probs = [
            [0.62, 0.19, 0.19],
            [0.65, 0.2, 0.15],
            [0.99, 0.005, 0.005],
        ];
        let truth = [1u8, 2, 1];
        let e = ece(&probs, &truth, ECE_BINS).unwrap();
        let bin_low = (2.0 / 3.0) * (0.5f64 - 0.635).abs();
        let bin_high = (1.0 / 3.0) * (1.0f64 - 0.99).abs();
        assert!((e - (bin_low + bin_high)).abs() < 1e-12, "got {e}");
    }

    #[test]
    fn ece_respects_bin_count_argument() {
        let probs = [[0.34, 0.33, 0.33], [0.9, 0.05, 0.05]];
        let truth = [1u8, 1];
        let coarse = ece(&probs, &truth, 1).unwrap();
        // single bin: mean conf 0.62, acc 1.0
        assert!((coarse - (1.0 - 0.62)).abs() < 1e-12);
        assert!(ece(&probs, &truth, 0).is_err());
    }

    fn sample_calibration_set(
        tau_true: f64,
        n: usize,
        seed: u64,
    ) -> (Vec<[f64; 3]>, Vec<u8>) {
        let mut rng = RngStream::new(seed, stream_id(Domain::Data, 3, 1));
        let mut logits = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let base = [
                rng.normal() * 1.5,
                rng.normal() * 1.5,
                rng.normal() * 1.5,
            ];
            let p = softmax3(&base);
            let u = rng.uniform();
            let y = if u < p[0] {
                1u8
            } else if u < p[0] + p[1] {
                2
            } else {
                3
            };
            // observed logits are over-sharpened by tau_true
            logits.push([base[0] * tau_true, base[1] * tau_true, base[2] * tau_true]);
            labels.push(y);
        }
        (logits, labels)
    }

    #[test]
    fn temperature_recovers_known_sharpening() {
        let (logits, labels) = sample_calibration_set(2.0, 4000, 90);
        let fit = fit_temperature(&logits, &labels).unwrap();
        assert!(
            (1.8..=2.2).contains(&fit.tau),
            "fitted tau {} outside [1.8, 2.2]",
            fit.tau
        );
        assert!(fit.nll_after <= fit.nll_before);
        // calibration reduces ECE on the same set
        let before: Vec<[f64; 3]> = logits.iter().map(softmax3).collect();
        let after: Vec<[f64; 3]> = logits
            .iter()
            .map(|r| softmax3(&[r[0] / fit.tau, r[1] / fit.tau, r[2] / fit.tau]))
            .collect();
        let e_before = ece(&before, &labels, ECE_BINS).unwrap();
        let e_after = ece(&after, &labels, ECE_BINS).unwrap();
        assert!(e_after < e_before, "{e_after} !< {e_before}");
    }

    #[test]
    fn calibrated_input_keeps_tau_near_one() {
        let (logits, labels) = sample_calibration_set(1.0, 4000, 91);
        let fit = fit_temperature(&logits, &labels).unwrap();
        assert!((0.9..=1.1).contains(&fit.tau), "tau {}", fit.tau);
    }

    #[test]
    fn fitted_nll_never_worse_than_identity() {
        for seed in 0..5 {
            let (logits, labels) = sample_calibration_set(0.5 + seed as f64 * 0.7, 500, 92 + seed);
            let fit = fit_temperature(&logits, &labels).unwrap();
            assert!(fit.nll_after <= fit.nll_before + 1e-12);
        }
    }

    #[test]
    fn calibration_rejects_degenerate_input() {
        assert!(fit_temperature(&[], &[]).is_err());
        let logits = [[f64::NAN, 0.0, 0.0]];
        assert!(fit_temperature(&logits, &[1]).is_err());
    }
}
