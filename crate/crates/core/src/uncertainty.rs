//! Monte-Carlo dropout inference: repeated stochastic passes decompose
//! predictive uncertainty into an aleatoric part (mean of the variance head)
//! and an epistemic part (variance of the class probabilities across passes).

use crate::error::{Error, Result};
use crate::irt::BnState;
use crate::loss::N_CLASSES;
use crate::model::{forward_full, Ablation, DropoutMode, ForwardOpts, Model};
use crate::gpr::TemporalMode;
use crate::irt::Phase;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// Largest batch evaluated at once; results do not depend on this value
/// because every sample draws its own mask streams.
const MC_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McConfig {
    /// number of stochastic passes T
    pub passes: usize,
    pub dropout_p: f64,
    /// seed for the per-sample mask streams
    pub seed: u64,
    pub ablation: Ablation,
    pub temporal_mode: TemporalMode,
    pub heads: usize,
    pub residual_skip: bool,
    /// calibration temperature dividing the logits of every pass; 1 = none
    pub temperature: f64,
    /// dataset-global index of the first sample, so a slice evaluated on its
    /// own draws the same per-sample mask streams as the full run
    pub index_offset: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct McOutput {
    pub mean_probs: [f64; N_CLASSES],
    pub aleatoric: [f64; N_CLASSES],
    pub epistemic: [f64; N_CLASSES],
    /// aleatoric + epistemic, per class
    pub total: [f64; N_CLASSES],
    /// 1-based argmax of mean_probs, ties to the lower class
    pub predicted_class: u8,
}

impl McOutput {
    /// Scalar uncertainty used for rejection ranking.
    pub fn total_uncertainty(&self) -> f64 {
        self.total.iter().sum()
    }
}

/// Run `cfg.passes` stochastic forward passes over the dataset and decompose
/// the predictive uncertainty per sample. Batchnorm stays in eval mode; only
/// the dropout masks vary between passes.
pub fn mc_predict<E: Element>(
    model: &Model<E>,
    gpr: &Tensor<E>,
    irt: &Tensor<E>,
    cfg: &McConfig,
) -> Result<Vec<McOutput>> {
    if cfg.passes == 0 {
        return Err(Error::Parameter("Monte-Carlo inference needs at least one pass".into()));
    }
    if cfg.passes * 4 > u16::MAX as usize {
        return Err(Error::Parameter(format!("pass count {} too large", cfg.passes)));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be a positive finite number, got {}",
            cfg.temperature
        )));
    }
    let n = gpr.shape()[0];
    if irt.shape()[0] != n {
        return Err(Error::shape(format!(
            "modality batch sizes disagree: {n} vs {}",
            irt.shape()[0]
        )));
    }
    if n == 0 {
        return Err(Error::Input("Monte-Carlo inference on an empty batch".into()));
    }
    let gpr_w: usize = gpr.shape()[1..].iter().product();
    let irt_w: usize = irt.shape()[1..].iter().product();
    let t = cfg.passes;

    let mut prob_sum = vec![[0.0f64; N_CLASSES]; n];
    let mut prob_sq_sum = vec![[0.0f64; N_CLASSES]; n];
    let mut var_sum = vec![[0.0f64; N_CLASSES]; n];

    let mut start = 0usize;
    while start < n {
        let len = (n - start).min(MC_CHUNK);
        let g_chunk = Tensor::new(
            &[len, gpr.shape()[1]],
            gpr.data()[start * gpr_w..(start + len) * gpr_w].to_vec(),
        )?;
        let i_shape: Vec<usize> =
            std::iter::once(len).chain(irt.shape()[1..].iter().copied()).collect();
        let i_chunk = Tensor::new(
            &i_shape,
            irt.data()[start * irt_w..(start + len) * irt_w].to_vec(),
        )?;
        for pass in 0..t {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut bn: [BnState<E>; 3] = model.bn.clone();
            let g = tape.leaf(g_chunk.clone(), false);
            let i = tape.leaf(i_chunk.clone(), false);
            let out = forward_full(
                &mut tape,
                &bound,
                &mut bn,
                &model.dims,
                g,
                i,
                ForwardOpts {
                    bn_phase: Phase::Eval,
                    dropout_p: cfg.dropout_p,
                    dropout: DropoutMode::PerSample {
                        seed: cfg.seed,
                        pass: pass as u16,
                        base_index: cfg.index_offset + start as u32,
                    },
                    ablation: cfg.ablation,
                    temporal_mode: cfg.temporal_mode,
                    heads: cfg.heads,
                    residual_skip: cfg.residual_skip,
                },
            )?;
            let logits = tape.value(out.logits);
            let sigma2 = tape.value(out.sigma2);
            for row in 0..len {
                let lr = [
                    logits.data()[row * N_CLASSES].to_real() / cfg.temperature,
                    logits.data()[row * N_CLASSES + 1].to_real() / cfg.temperature,
                    logits.data()[row * N_CLASSES + 2].to_real() / cfg.temperature,
                ];
                let p = crate::eval::softmax3(&lr);
                for c in 0..N_CLASSES {
                    prob_sum[start + row][c] += p[c];
                    prob_sq_sum[start + row][c] += p[c] * p[c];
                    var_sum[start + row][c] += sigma2.data()[row * N_CLASSES + c].to_real();
                }
            }
        }
        start += len;
    }

    let tf = t as f64;
    Ok((0..n)
        .map(|i| {
            let mut mean_probs = [0.0; N_CLASSES];
            let mut aleatoric = [0.0; N_CLASSES];
            let mut epistemic = [0.0; N_CLASSES];
            let mut total = [0.0; N_CLASSES];
            for c in 0..N_CLASSES {
                mean_probs[c] = prob_sum[i][c] / tf;
                aleatoric[c] = var_sum[i][c] / tf;
                // population variance across passes; exact zero when T = 1
                epistemic[c] = (prob_sq_sum[i][c] / tf - mean_probs[c] * mean_probs[c]).max(0.0);
                total[c] = aleatoric[c] + epistemic[c];
            }
            let mut best = 0usize;
            for c in 1..N_CLASSES {
                if mean_probs[c] > mean_probs[best] {
                    best = c;
                }
            }
            McOutput {
                mean_probs,
                aleatoric,
                epistemic,
                total,
                predicted_class: best as u8 + 1,
            }
        })
        .collect())
}

/// Split sample indices into (kept, rejected) by total uncertainty,
/// rejecting the `reject_fraction` most uncertain. Equal scores keep the
/// lower index first.
pub fn selective_predict(
    outputs: &[McOutput],
    reject_fraction: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if outputs.is_empty() {
        return Err(Error::Input("selective prediction needs at least one sample".into()));
    }
    if !(0.0..1.0).contains(&reject_fraction) {
        return Err(Error::Parameter(format!(
            "reject fraction must be in [0, 1), got {reject_fraction}"
        )));
    }
    let k = (outputs.len() as f64 * reject_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.sort_by(|&a, &b| {
        outputs[b]
            .total_uncertainty()
            .partial_cmp(&outputs[a].total_uncertainty())
            .expect("uncertainty scores must be comparable")
            .then(b.cmp(&a))
    });
    let mut rejected: Vec<usize> = order[..k].to_vec();
    let mut kept: Vec<usize> = order[k..].to_vec();
    rejected.sort_unstable();
    kept.sort_unstable();
    Ok((kept, rejected))
}
