//! Manual timing probe for one training step at full dimensions. Ignored by
//! default; run with --ignored --nocapture to measure.

use std::collections::BTreeMap;
use std::time::Instant;

use mmdelam_core::config::ExperimentConfig;
use mmdelam_core::irt::Phase;
use mmdelam_core::loss::{composite_loss, LossConfig};
use mmdelam_core::model::{forward_full, Ablation, DropoutMode, ForwardOpts, Model, ModelDims};
use mmdelam_core::optim::{AdamConfig, AdamW};
use mmdelam_core::rng::{stream_id, Domain, RngStream};
use mmdelam_core::synth::generate_dataset;
use mmdelam_core::tape::Tape;
use mmdelam_core::train::DataView;

#[test]
#[ignore]
fn time_one_training_step() {
    let mut gen = ExperimentConfig::default().generator;
    gen.n_samples = 64;
    gen.seed = 5;
    let ds = generate_dataset(&gen).unwrap();
    let view = DataView::from_dataset(&ds).unwrap();
    let dims = ModelDims::paper();
    let model = Model::<f32>::new(dims, 0).unwrap();
    let mut opt = AdamW::new(AdamConfig::default());
    let idx: Vec<usize> = (0..32).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| view.labels[i]).collect();
    let loss_cfg = LossConfig::default();

    let modes = [
        ("cross-modal", Ablation::CrossModal, 4u32),
        ("gpr-only", Ablation::GprOnly, 3),
        ("irt-only", Ablation::IrtOnly, 3),
    ];
    for (label, ablation, rounds) in modes {
        for round in 0..rounds {
            let t0 = Instant::now();
            let gx_t = view.gpr_batch(&idx);
            let ix_t = view.irt_batch(&idx);
            let mut tape = Tape::<f32>::new();
            let gx = tape.leaf(gx_t, false);
            let ix = tape.leaf(ix_t, false);
            let bound = model.bind(&mut tape);
            let mut bn = model.bn.clone();
            let mut streams = [
                RngStream::new(0, stream_id(Domain::Dropout, round, 0)),
                RngStream::new(0, stream_id(Domain::Dropout, round, 1)),
                RngStream::new(0, stream_id(Domain::Dropout, round, 2)),
            ];
            let opts = ForwardOpts {
                bn_phase: Phase::Train,
                dropout_p: 0.3,
                dropout: DropoutMode::SharedStreams(&mut streams),
                ablation,
                temporal_mode: mmdelam_core::gpr::TemporalMode::ScaledDot,
                heads: 8,
                residual_skip: false,
            };
            let out = forward_full(&mut tape, &bound, &mut bn, &dims, gx, ix, opts).unwrap();
            let t_fwd = t0.elapsed();
            let terms = composite_loss(&mut tape, &out, &labels, &loss_cfg).unwrap();
            tape.backward(terms.total).unwrap();
            let t_bwd = t0.elapsed();
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (name, &var) in &bound.vars {
                grads.insert(
                    name.clone(),
                    tape.grad_or_zeros(var).data().iter().map(|&g| g as f64).collect(),
                );
            }
            let mut params = model.params.clone();
            opt.step(&mut params, &grads, 1e-4).unwrap();
            let t_all = t0.elapsed();
            println!(
                "{label} round {round}: forward {:.3}s  +backward {:.3}s  full step {:.3}s",
                t_fwd.as_secs_f64(),
                t_bwd.as_secs_f64(),
                t_all.as_secs_f64()
            );
        }
    }
}
