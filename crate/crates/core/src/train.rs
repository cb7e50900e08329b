//! End-to-end training: stratified split, per-step augmentation, AdamW with
//! cosine-annealed learning rate, global-norm clipping, and best-checkpoint
//! selection by validation macro-F1.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{confusion_and_f1, macro_auc, softmax3};
use crate::gpr::TemporalMode;
use crate::irt::Phase;
use crate::loss::{composite_loss, LossConfig};
use crate::model::{forward_full, Ablation, DropoutMode, ForwardOpts, Model, ModelDims};
use crate::optim::{clip_global_norm, cosine_lr, AdamConfig, AdamW};
use crate::rng::{stream_id, Domain, RngStream};
use crate::sampler::epoch_indices;
use crate::synth::Dataset;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Samples evaluated per forward pass outside training.
pub const EVAL_CHUNK: usize = 32;

const TRAIN_FRACTION: f64 = 0.85;

/// Borrowed view of a paired dataset with explicit model dimensions, so the
/// same loop drives both generated corpora and toy fixtures.
#[derive(Clone, Copy)]
pub struct DataView<'a> {
    pub gpr: &'a [f32],
    pub irt: &'a [f32],
    pub labels: &'a [u8],
    pub dims: ModelDims,
}

impl<'a> DataView<'a> {
    pub fn new(
        gpr: &'a [f32],
        irt: &'a [f32],
        labels: &'a [u8],
        dims: ModelDims,
    ) -> Result<Self> {
        dims.validate()?;
        let n = labels.len();
        if gpr.len() != n * dims.gpr_len
            || irt.len() != n * dims.irt_c * dims.irt_h * dims.irt_w
        {
            return Err(Error::shape(format!(
                "data blocks do not match {n} samples at the given dimensions"
            )));
        }
        Ok(DataView {
            gpr,
            irt,
            labels,
            dims,
        })
    }

    pub fn from_dataset(ds: &'a Dataset) -> Result<Self> {
        let dims = ModelDims::paper();
        let m = &ds.manifest;
        if m.gpr_len != dims.gpr_len
            || m.irt_h != dims.irt_h
            || m.irt_w != dims.irt_w
            || m.irt_c != dims.irt_c
        {
            return Err(Error::shape(format!(
                "dataset extents {}×{}×{}×{} do not match the model input",
                m.gpr_len, m.irt_h, m.irt_w, m.irt_c
            )));
        }
        DataView::new(&ds.gpr, &ds.irt, &ds.labels, dims)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn gpr_batch(&self, idx: &[usize]) -> Tensor<f32> {
        let w = self.dims.gpr_len;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.gpr[i * w..(i + 1) * w]);
        }
        Tensor::new(&[idx.len(), w], data).expect("batch shape consistent")
    }

    pub fn irt_batch(&self, idx: &[usize]) -> Tensor<f32> {
        let d = &self.dims;
        let w = d.irt_c * d.irt_h * d.irt_w;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.irt[i * w..(i + 1) * w]);
        }
        Tensor::new(&[idx.len(), d.irt_c, d.irt_h, d.irt_w], data).expect("batch shape consistent")
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Network-shape settings shared by training and inference.
#[derive(Clone, Copy, Debug)]
pub struct NetSettings {
    pub ablation: Ablation,
    pub temporal: TemporalMode,
    pub heads: usize,
    pub residual_skip: bool,
}

impl NetSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        NetSettings {
            ablation: cfg.train.ablation,
            temporal: cfg.train.temporal_attention,
            heads: cfg.train.heads,
            residual_skip: cfg.train.residual_skip,
        }
    }
}

/// Split sample indices per class, `train_fraction` of each class (at least
/// one) into train. Deterministic given the seed.
pub fn stratified_split(
    labels: &[u8],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if labels.is_empty() {
        return Err(Error::Stratification("no samples to split".into()));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "train fraction must be in (0, 1], got {train_fraction}"
        )));
    }
    let mut by_class: [Vec<usize>; 3] = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        if !(1..=3).contains(&l) {
            return Err(Error::Label(l as i64));
        }
        by_class[l as usize - 1].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c, idx) in by_class.iter_mut().enumerate() {
        if idx.is_empty() {
            return Err(Error::Stratification(format!(
                "class {} has no samples; every class must appear in the training split",
                c + 1
            )));
        }
        let mut rng = RngStream::new(seed, stream_id(Domain::Split, c as u32, 0));
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.below(i as u32 + 1) as usize);
        }
        let k = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..k]);
        val.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Additive Gaussian noise at 2% of each signal's own standard deviation.
pub fn augment_gpr(batch: &mut Tensor<f32>, rng: &mut RngStream) {
    let shape = batch.shape().to_vec();
    let (n, l) = (shape[0], shape[1]);
    let data = batch.data_mut();
    for i in 0..n {
        let row = &mut data[i * l..(i + 1) * l];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / l as f64;
        let sd = (row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / l as f64).sqrt();
        let sigma = 0.02 * sd;
        for v in row.iter_mut() {
            *v += (sigma * rng.normal()) as f32;
        }
    }
}

/// Random crop to the 104/112 fraction, nearest-neighbor resize back, then a
/// rotation by a multiple of 90°. Per sample: crop offsets, then rotation.
pub fn augment_irt(batch: &mut Tensor<f32>, rng: &mut RngStream) {
    let shape = batch.shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(h, w, "rotation augmentation needs square patches");
    let s = ((h as f64 * 104.0 / 112.0).round() as usize).max(1);
    let data = batch.data_mut();
    let mut tmp = vec![0.0f32; h * w];
    for i in 0..n {
        let oy = rng.below((h - s + 1) as u32) as usize;
        let ox = rng.below((w - s + 1) as u32) as usize;
        let rot = rng.below(4);
        for ch in 0..c {
            let plane = &mut data[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for y in 0..h {
                let sy = oy + y * s / h;
                for x in 0..w {
                    let sx = ox + x * s / w;
                    tmp[y * w + x] = plane[sy * w + sx];
                }
            }
            for y in 0..h {
                for x in 0..w {
                    // clockwise quarter turns
                    plane[y * w + x] = match rot {
                        0 => tmp[y * w + x],
                        1 => tmp[(h - 1 - x) * w + y],
                        2 => tmp[(h - 1 - y) * w + (w - 1 - x)],
                        _ => tmp[x * w + (w - 1 - y)],
                    };
                }
            }
        }
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub unc: f64,
    pub att: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub train_unc: f64,
    pub train_att: f64,
    pub train_total: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    /// absent when no class has both positives and negatives in validation
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_macro_f1: Option<f64>,
    /// measured wall time; excluded from JSON so identical runs serialize
    /// to identical bytes
    #[serde(skip, default)]
    pub wall_seconds: f64,
    pub checkpoint_path: Option<String>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub steps: Vec<StepRecord>,
    /// weights of the best validation epoch (initial weights when epochs=0)
    pub model: Model<f32>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Class probabilities for the given samples under deterministic inference
/// (dropout off, frozen batchnorm), chunked to bound memory. Results do not
/// depend on the chunk size.
pub fn model_probs(
    model: &Model<f32>,
    view: &DataView,
    idx: &[usize],
    net: &NetSettings,
) -> Result<Vec<[f64; 3]>> {
    Ok(model_logits(model, view, idx, net)?
        .iter()
        .map(softmax3)
        .collect())
}

/// Raw logits under deterministic inference.
pub fn model_logits(
    model: &Model<f32>,
    view: &DataView,
    idx: &[usize],
    net: &NetSettings,
) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(idx.len());
    let mut bn = model.bn.clone();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let g = tape.leaf(view.gpr_batch(chunk), false);
        let i = tape.leaf(view.irt_batch(chunk), false);
        let fwd = forward_full(
            &mut tape,
            &bound,
            &mut bn,
            &view.dims,
            g,
            i,
            ForwardOpts::eval(net.ablation, net.temporal, net.heads, net.residual_skip),
        )?;
        let logits = tape.value(fwd.logits);
        for row in 0..chunk.len() {
            out.push([
                logits.data()[row * 3] as f64,
                logits.data()[row * 3 + 1] as f64,
                logits.data()[row * 3 + 2] as f64,
            ]);
        }
    }
    Ok(out)
}

/// 1-based argmax classes from probability (or logit) rows.
pub fn argmax_classes(rows: &[[f64; 3]]) -> Vec<u8> {
    rows.iter()
        .map(|r| {
            let mut best = 0;
            for c in 1..3 {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best as u8 + 1
        })
        .collect()
}

/// Run the full training loop on the view's samples.
pub fn train(view: &DataView, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let dims = view.dims;
    let net = NetSettings::from_config(cfg);
    if dims.d % net.heads != 0 {
        return Err(Error::Config(format!(
            "head count {} must divide feature width {}",
            net.heads, dims.d
        )));
    }
    let (train_idx, val_idx) = stratified_split(view.labels, TRAIN_FRACTION, cfg.seed)?;
    let epochs = cfg.train.epochs;
    if epochs > 0 && val_idx.is_empty() {
        return Err(Error::Stratification(
            "validation split is empty; need more samples per class".into(),
        ));
    }
    let train_labels = view.labels_at(&train_idx);
    let loss_cfg: LossConfig = cfg.loss.to_loss_config(&train_labels)?;

    let mut model: Model<f32> = Model::new(dims, cfg.seed)?;
    let mut opt = AdamW::new(AdamConfig::default());
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut epoch_records: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let mut step_no: u64 = 0;

    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, cfg.train.lr_init, cfg.train.lr_min)?;
        let mut order_rng = RngStream::new(cfg.seed, stream_id(Domain::Sampler, epoch as u32, 0));
        let order = epoch_indices(cfg.train.sampler, &train_labels, &mut order_rng)?;

        let mut sums = [0.0f64; 4];
        let mut sum_steps = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            // a trailing single sample cannot provide batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = chunk.iter().map(|&k| train_idx[k]).collect();
            let labels = view.labels_at(&idx);
            let mut g_batch = view.gpr_batch(&idx);
            let mut i_batch = view.irt_batch(&idx);
            let mut aug = RngStream::new(cfg.seed, stream_id(Domain::Augment, step_no as u32, 0));
            augment_gpr(&mut g_batch, &mut aug);
            augment_irt(&mut i_batch, &mut aug);

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let g = tape.leaf(g_batch, false);
            let i = tape.leaf(i_batch, false);
            let mut streams: [RngStream; 3] = std::array::from_fn(|site| {
                RngStream::new(cfg.seed, stream_id(Domain::Dropout, step_no as u32, site as u16))
            });
            let out = forward_full(
                &mut tape,
                &bound,
                &mut model.bn,
                &dims,
                g,
                i,
                ForwardOpts {
                    bn_phase: Phase::Train,
                    dropout_p: cfg.train.dropout,
                    dropout: DropoutMode::SharedStreams(&mut streams),
                    ablation: net.ablation,
                    temporal_mode: net.temporal,
                    heads: net.heads,
                    residual_skip: net.residual_skip,
                },
            )?;
            let logits_val = tape.value(out.logits).clone();
            let terms = composite_loss(&mut tape, &out, &labels, &loss_cfg)?;
            tape.backward(terms.total)?;

            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, var) in &bound.vars {
                let g = tape.grad_or_zeros(*var);
                grads.insert(name.clone(), g.data().iter().map(|&v| v as f64).collect());
            }
            if let Some(max_norm) = cfg.train.grad_clip_norm {
                clip_global_norm(&mut grads, max_norm)?;
            }
            opt.step(&mut model.params, &grads, lr)?;

            let preds = logits_val.argmax_rows()?;
            for (p, &l) in preds.iter().zip(&labels) {
                if *p as u8 + 1 == l {
                    correct += 1;
                }
            }
            seen += labels.len();
            let b = &terms.breakdown;
            steps.push(StepRecord {
                step: step_no,
                epoch,
                lr,
                ce: b.ce,
                unc: b.uncertainty,
                att: b.attention,
                total: b.total,
            });
            sums[0] += b.ce;
            sums[1] += b.uncertainty;
            sums[2] += b.attention;
            sums[3] += b.total;
            sum_steps += 1;
            step_no += 1;
        }

        let val_probs = model_probs(&model, view, &val_idx, &net)?;
        let val_preds = argmax_classes(&val_probs);
        let val_labels = view.labels_at(&val_idx);
        let metrics = confusion_and_f1(&val_preds, &val_labels)?;
        let val_auc = match macro_auc(&val_probs, &val_labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        };
        let denom = sum_steps.max(1) as f64;
        epoch_records.push(EpochRecord {
            epoch,
            lr,
            train_ce: sums[0] / denom,
            train_unc: sums[1] / denom,
            train_att: sums[2] / denom,
            train_total: sums[3] / denom,
            train_accuracy: if seen == 0 {
                0.0
            } else {
                correct as f64 / seen as f64
            },
            val_accuracy: metrics.accuracy,
            val_macro_f1: metrics.macro_f1,
            val_auc,
        });
        let better = match &best {
            None => true,
            Some((_, f1, _)) => metrics.macro_f1 > *f1,
        };
        if better {
            best = Some((
                epoch,
                metrics.macro_f1,
                Model {
                    dims,
                    params: model.params.clone(),
                    bn: model.bn.clone(),
                },
            ));
        }
    }

    let (best_epoch, best_f1, best_model) = match best {
        Some((e, f1, m)) => (Some(e), Some(f1), m),
        None => (None, None, model),
    };
    Ok(TrainOutcome {
        report: TrainReport {
            epochs: epoch_records,
            best_epoch,
            best_val_macro_f1: best_f1,
            wall_seconds: start.elapsed().as_secs_f64(),
            checkpoint_path: None,
        },
        steps,
        model: best_model,
        train_idx,
        val_idx,
    })
}
