//! Runtime-invokable gradient verification: every differentiable tape
//! operation on several random instances, then the assembled network swept
//! coordinate-by-coordinate at toy dimensions. Double precision throughout.
//!
//! Shared by the test suite and the command-line gradient check so both run
//! the identical cases.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::gpr::TemporalMode;
use crate::gradcheck::{check_function, GradReport, FD_STEP, TOL_COMPOSED, TOL_PRIMITIVE};
use crate::irt::{BnState, Phase};
use crate::loss::{composite_loss, LossConfig};
use crate::model::{
    forward_full, Ablation, BoundParams, DropoutMode, ForwardOpts, Model, ModelDims,
};
use crate::rng::{stream_id, Domain, RngStream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fresh random input draws per primitive case.
pub const INSTANCES_PER_CASE: usize = 5;

/// Worst relative error across a case's instances, with the tolerance it
/// must beat.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub rel_err: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tol
    }
}

/// Weighted scalar head with distinct weights, so a gradient error in any
/// output coordinate shows up instead of cancelling.
fn spiky(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    let w: Vec<f64> = (0..n).map(|i| (1.7 * i as f64 + 0.3).sin() + 0.1).collect();
    tape.weighted_sum(v, &w)
}

/// Flatten leaf tensors of the given shapes from one parameter vector,
/// rebuild the graph per evaluation, and compare backward against central
/// differences.
fn fd_case(
    shapes: &[Vec<usize>],
    x0: &[f64],
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let eval = |x: &[f64], want: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            vars.push(tape.leaf(Tensor::new(s, x[off..off + n].to_vec())?, true));
            off += n;
        }
        debug_assert_eq!(off, x.len(), "input vector length mismatch");
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        let g = if want {
            tape.backward(loss)?;
            let mut out = Vec::new();
            for &var in &vars {
                out.extend(tape.grad_or_zeros(var).data().iter().copied());
            }
            Some(out)
        } else {
            None
        };
        Ok((v, g))
    };
    check_function(x0, eval, FD_STEP)
}

fn uniform(r: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.uniform_in(-1.0, 1.0)).collect()
}

/// Draws pushed away from zero (relu) and spread apart (pool ties):
/// |v| >= 0.2 and values distinct at the 1e-3 scale.
fn off_kinks(r: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let u = r.uniform_in(0.2, 1.0) + 1e-3 * i as f64;
            if r.uniform() < 0.5 {
                -u
            } else {
                u
            }
        })
        .collect()
}

fn positive(r: &mut RngStream, n: usize) -> Vec<f64> {
    uniform(r, n).iter().map(|v| v.abs() + 0.3).collect()
}

struct Suite {
    outcomes: Vec<CheckOutcome>,
    ord: u32,
}

impl Suite {
    /// Run one named case on `INSTANCES_PER_CASE` fresh draws and record the
    /// worst relative error. `build` receives the instance index so cases
    /// with internal randomness (dropout masks) can vary it too.
    fn case(
        &mut self,
        name: &'static str,
        tol: f64,
        shapes: &[Vec<usize>],
        draw: &dyn Fn(&mut RngStream, usize) -> Vec<f64>,
        build: &dyn Fn(&mut Tape<f64>, &[Var], usize) -> Result<Var>,
    ) -> Result<()> {
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let mut worst = 0.0f64;
        for inst in 0..INSTANCES_PER_CASE {
            let mut r =
                RngStream::new(7, stream_id(Domain::Data, 9000 + self.ord, inst as u16));
            let x0 = draw(&mut r, n);
            let report = fd_case(shapes, &x0, &|t, v| build(t, v, inst))?;
            worst = worst.max(report.rel_err);
        }
        self.ord += 1;
        self.outcomes.push(CheckOutcome { name, rel_err: worst, tol });
        Ok(())
    }
}

/// Every case in the suite, in report order.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let mut s = Suite { outcomes: Vec::new(), ord: 0 };
    linear_cases(&mut s)?;
    pointwise_cases(&mut s)?;
    normalization_cases(&mut s)?;
    pooling_cases(&mut s)?;
    structural_cases(&mut s)?;
    composed_cases(&mut s)?;
    Ok(s.outcomes)
}

fn linear_cases(s: &mut Suite) -> Result<()> {
    s.case("matmul", TOL_PRIMITIVE, &[vec![3, 4], vec![4, 2]], &uniform, &|t, v, _| {
        let y = t.matmul(v[0], v[1])?;
        spiky(t, y)
    })?;
    s.case("bmm", TOL_PRIMITIVE, &[vec![2, 3, 4], vec![2, 4, 5]], &uniform, &|t, v, _| {
        let y = t.bmm(v[0], v[1], false)?;
        spiky(t, y)
    })?;
    s.case(
        "bmm-transposed",
        TOL_PRIMITIVE,
        &[vec![2, 3, 4], vec![2, 5, 4]],
        &uniform,
        &|t, v, _| {
            let y = t.bmm(v[0], v[1], true)?;
            spiky(t, y)
        },
    )?;
    s.case(
        "conv1d-stride1",
        TOL_PRIMITIVE,
        &[vec![2, 3, 10], vec![4, 3, 5], vec![4]],
        &uniform,
        &|t, v, _| {
            let y = t.conv1d(v[0], v[1], v[2], 1, 2)?;
            spiky(t, y)
        },
    )?;
    s.case(
        "conv1d-stride2",
        TOL_PRIMITIVE,
        &[vec![2, 3, 10], vec![4, 3, 5], vec![4]],
        &uniform,
        &|t, v, _| {
            let y = t.conv1d(v[0], v[1], v[2], 2, 1)?;
            spiky(t, y)
        },
    )?;
    s.case(
        "conv2d-stride1",
        TOL_PRIMITIVE,
        &[vec![2, 2, 6, 6], vec![3, 2, 3, 3], vec![3]],
        &uniform,
        &|t, v, _| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            spiky(t, y)
        },
    )?;
    s.case(
        "conv2d-stride2",
        TOL_PRIMITIVE,
        &[vec![2, 2, 6, 6], vec![3, 2, 3, 3], vec![3]],
        &uniform,
        &|t, v, _| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
            spiky(t, y)
        },
    )?;
    // 7x7 kernel with pad 3 over a 4x4 map: every window overlaps padding.
    s.case(
        "conv2d-wide-kernel",
        TOL_PRIMITIVE,
        &[vec![1, 2, 4, 4], vec![1, 2, 7, 7], vec![1]],
        &uniform,
        &|t, v, _| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 3)?;
            spiky(t, y)
        },
    )?;
    s.case("add", TOL_PRIMITIVE, &[vec![3, 4], vec![3, 4]], &uniform, &|t, v, _| {
        let y = t.add(v[0], v[1])?;
        spiky(t, y)
    })?;
    s.case("mul", TOL_PRIMITIVE, &[vec![3, 4], vec![3, 4]], &uniform, &|t, v, _| {
        let y = t.mul(v[0], v[1])?;
        spiky(t, y)
    })?;
    // gradient accumulation when both factors are the same leaf
    s.case("mul-same-var", TOL_PRIMITIVE, &[vec![5]], &uniform, &|t, v, _| {
        let y = t.mul(v[0], v[0])?;
        spiky(t, y)
    })?;
    s.case("add-bias-row", TOL_PRIMITIVE, &[vec![3, 4], vec![4]], &uniform, &|t, v, _| {
        let y = t.add_bias_row(v[0], v[1])?;
        spiky(t, y)
    })?;
    s.case("affine", TOL_PRIMITIVE, &[vec![3, 4]], &uniform, &|t, v, _| {
        let y = t.affine(v[0], 1.7, -0.2);
        spiky(t, y)
    })?;
    s.case("weighted-sum", TOL_PRIMITIVE, &[vec![7]], &uniform, &|t, v, _| spiky(t, v[0]))?;
    s.case("sum-all", TOL_PRIMITIVE, &[vec![3, 4]], &uniform, &|t, v, _| Ok(t.sum_all(v[0])))?;
    Ok(())
}

fn pointwise_cases(s: &mut Suite) -> Result<()> {
    s.case("relu", TOL_PRIMITIVE, &[vec![2, 5]], &off_kinks, &|t, v, _| {
        let y = t.relu(v[0]);
        spiky(t, y)
    })?;
    s.case("tanh", TOL_PRIMITIVE, &[vec![2, 5]], &uniform, &|t, v, _| {
        let y = t.tanh_act(v[0]);
        spiky(t, y)
    })?;
    s.case("sigmoid", TOL_PRIMITIVE, &[vec![2, 5]], &uniform, &|t, v, _| {
        let y = t.sigmoid(v[0]);
        spiky(t, y)
    })?;
    s.case("softplus", TOL_PRIMITIVE, &[vec![2, 5]], &uniform, &|t, v, _| {
        let y = t.softplus(v[0]);
        spiky(t, y)
    })?;
    s.case("exp", TOL_PRIMITIVE, &[vec![2, 5]], &uniform, &|t, v, _| {
        let y = t.exp(v[0]);
        spiky(t, y)
    })?;
    s.case("log", TOL_PRIMITIVE, &[vec![6]], &positive, &|t, v, _| {
        let y = t.log(v[0]);
        spiky(t, y)
    })?;
    s.case("xlogx", TOL_PRIMITIVE, &[vec![6]], &positive, &|t, v, _| {
        let y = t.xlogx(v[0]);
        spiky(t, y)
    })?;
    s.case("pow-const-2", TOL_PRIMITIVE, &[vec![6]], &positive, &|t, v, _| {
        let y = t.pow_const(v[0], 2.0);
        spiky(t, y)
    })?;
    s.case("pow-const-half", TOL_PRIMITIVE, &[vec![6]], &positive, &|t, v, _| {
        let y = t.pow_const(v[0], 0.5);
        spiky(t, y)
    })?;
    // values strictly inside the band, so the gradient passes through
    s.case(
        "clamp-range",
        TOL_PRIMITIVE,
        &[vec![6]],
        &|r, n| uniform(r, n).iter().map(|v| v * 0.4).collect(),
        &|t, v, _| {
            let y = t.clamp_range(v[0], -1.0, 1.0);
            spiky(t, y)
        },
    )?;
    s.case("dropout", TOL_PRIMITIVE, &[vec![40]], &uniform, &|t, v, inst| {
        // same stream state on every FD evaluation => identical mask
        let mut rng = RngStream::new(77, stream_id(Domain::Dropout, inst as u32, 0));
        let y = t.dropout(v[0], 0.4, true, &mut rng)?;
        spiky(t, y)
    })?;
    Ok(())
}

fn normalization_cases(s: &mut Suite) -> Result<()> {
    s.case("softmax-last", TOL_PRIMITIVE, &[vec![3, 4]], &uniform, &|t, v, _| {
        let y = t.softmax_last(v[0])?;
        spiky(t, y)
    })?;
    s.case("log-softmax-last", TOL_PRIMITIVE, &[vec![3, 4]], &uniform, &|t, v, _| {
        let y = t.log_softmax_last(v[0])?;
        spiky(t, y)
    })?;
    // gamma remapped into (0.7, 1.3) so the scale stays away from zero
    let bn_draw = |r: &mut RngStream, n: usize| {
        let mut x = uniform(r, n);
        x[32] = 1.0 + 0.3 * x[32];
        x[33] = 1.0 + 0.3 * x[33];
        x
    };
    s.case(
        "batchnorm-train",
        TOL_PRIMITIVE,
        &[vec![4, 2, 2, 2], vec![2], vec![2]],
        &bn_draw,
        &|t, v, _| {
            let (y, _, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            spiky(t, y)
        },
    )?;
    s.case(
        "batchnorm-eval",
        TOL_PRIMITIVE,
        &[vec![4, 2, 2, 2], vec![2], vec![2]],
        &bn_draw,
        &|t, v, _| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.9, 1.1], 1e-5)?;
            spiky(t, y)
        },
    )?;
    s.case(
        "bn-relu-pool-train",
        TOL_PRIMITIVE,
        &[vec![4, 2, 4, 4], vec![2], vec![2]],
        &bn_pool_draw,
        &|t, v, _| {
            let (y, _, _) = t.bn_relu_pool_train(v[0], v[1], v[2], 1e-5, 2)?;
            spiky(t, y)
        },
    )?;
    s.case(
        "bn-relu-pool-eval",
        TOL_PRIMITIVE,
        &[vec![4, 2, 4, 4], vec![2], vec![2]],
        &bn_pool_draw,
        &|t, v, _| {
            let y = t.bn_relu_pool_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.9, 1.1], 1e-5, 2)?;
            spiky(t, y)
        },
    )?;
    s.case("normalize-rows", TOL_PRIMITIVE, &[vec![3, 4]], &positive, &|t, v, _| {
        let y = t.normalize_rows(v[0])?;
        spiky(t, y)
    })?;
    Ok(())
}

/// Spread inputs like `off_kinks` (the fused op has ReLU and pool kinks) and
/// remap the two gamma entries into (0.7, 1.3).
fn bn_pool_draw(r: &mut RngStream, n: usize) -> Vec<f64> {
    let mut x = off_kinks(r, n);
    x[128] = 1.0 + 0.3 * uniform(r, 1)[0];
    x[129] = 1.0 + 0.3 * uniform(r, 1)[0];
    x
}

fn pooling_cases(s: &mut Suite) -> Result<()> {
    s.case("maxpool2d", TOL_PRIMITIVE, &[vec![2, 2, 4, 4]], &off_kinks, &|t, v, _| {
        let y = t.maxpool2d(v[0], 2)?;
        spiky(t, y)
    })?;
    s.case("global-avg2d", TOL_PRIMITIVE, &[vec![2, 2, 4, 4]], &uniform, &|t, v, _| {
        let y = t.global_avg2d(v[0])?;
        spiky(t, y)
    })?;
    s.case("global-max2d", TOL_PRIMITIVE, &[vec![2, 2, 4, 4]], &off_kinks, &|t, v, _| {
        let y = t.global_max2d(v[0])?;
        spiky(t, y)
    })?;
    s.case("mean-chan", TOL_PRIMITIVE, &[vec![2, 3, 2, 2]], &uniform, &|t, v, _| {
        let y = t.mean_chan(v[0])?;
        spiky(t, y)
    })?;
    s.case("max-chan", TOL_PRIMITIVE, &[vec![2, 3, 2, 2]], &off_kinks, &|t, v, _| {
        let y = t.max_chan(v[0])?;
        spiky(t, y)
    })?;
    s.case("adaptive-avg1d", TOL_PRIMITIVE, &[vec![2, 3, 8]], &uniform, &|t, v, _| {
        let y = t.adaptive_avg1d(v[0], 3)?;
        spiky(t, y)
    })?;
    s.case("mean-axis1", TOL_PRIMITIVE, &[vec![2, 3, 8]], &uniform, &|t, v, _| {
        let y = t.mean_axis1(v[0])?;
        spiky(t, y)
    })?;
    Ok(())
}

fn structural_cases(s: &mut Suite) -> Result<()> {
    s.case(
        "mul-chan-mask",
        TOL_PRIMITIVE,
        &[vec![2, 3, 2, 2], vec![2, 3]],
        &uniform,
        &|t, v, _| {
            let y = t.mul_chan_mask(v[0], v[1])?;
            spiky(t, y)
        },
    )?;
    s.case(
        "mul-spat-mask",
        TOL_PRIMITIVE,
        &[vec![2, 3, 2, 2], vec![2, 1, 2, 2]],
        &uniform,
        &|t, v, _| {
            let y = t.mul_spat_mask(v[0], v[1])?;
            spiky(t, y)
        },
    )?;
    s.case("split-merge-heads", TOL_PRIMITIVE, &[vec![2, 3, 4]], &uniform, &|t, v, _| {
        let s = t.split_heads(v[0], 2)?;
        let m = t.merge_heads(s, 2)?;
        spiky(t, m)
    })?;
    s.case("mean-heads", TOL_PRIMITIVE, &[vec![4, 3, 3]], &uniform, &|t, v, _| {
        let y = t.mean_heads(v[0], 2)?;
        spiky(t, y)
    })?;
    s.case("stack-pair", TOL_PRIMITIVE, &[vec![2, 3], vec![2, 3]], &uniform, &|t, v, _| {
        let y = t.stack_pair(v[0], v[1])?;
        spiky(t, y)
    })?;
    s.case("slice-axis1", TOL_PRIMITIVE, &[vec![2, 3, 8]], &uniform, &|t, v, _| {
        let y = t.slice_axis1(v[0], 1)?;
        spiky(t, y)
    })?;
    s.case("concat-last", TOL_PRIMITIVE, &[vec![2, 3], vec![2, 3]], &uniform, &|t, v, _| {
        let y = t.concat_last(v[0], v[1])?;
        spiky(t, y)
    })?;
    s.case(
        "chan-concat",
        TOL_PRIMITIVE,
        &[vec![2, 1, 2, 3], vec![2, 2, 2, 3]],
        &uniform,
        &|t, v, _| {
            let y = t.chan_concat(v[0], v[1])?;
            spiky(t, y)
        },
    )?;
    s.case("reshape", TOL_PRIMITIVE, &[vec![2, 6]], &uniform, &|t, v, _| {
        let y = t.reshape(v[0], &[3, 4])?;
        spiky(t, y)
    })?;
    s.case("transpose12", TOL_PRIMITIVE, &[vec![2, 3, 4]], &uniform, &|t, v, _| {
        let y = t.transpose12(v[0])?;
        spiky(t, y)
    })?;
    s.case("pick-per-row", TOL_PRIMITIVE, &[vec![3, 4]], &uniform, &|t, v, _| {
        let y = t.pick_per_row(v[0], &[2, 0, 3])?;
        spiky(t, y)
    })?;
    Ok(())
}

fn composed_cases(s: &mut Suite) -> Result<()> {
    // conv2d -> relu -> global avg -> linear -> log-softmax -> picked NLL
    s.case(
        "composed-conv-classifier",
        TOL_COMPOSED,
        &[vec![2, 1, 6, 6], vec![3, 1, 3, 3], vec![3], vec![3, 2], vec![2]],
        &off_kinks,
        &|t, v, _| {
            let c = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let a = t.relu(c);
            let p = t.global_avg2d(a)?;
            let z = t.matmul(p, v[3])?;
            let z = t.add_bias_row(z, v[4])?;
            let ls = t.log_softmax_last(z)?;
            let picked = t.pick_per_row(ls, &[1, 0])?;
            t.weighted_sum(picked, &[-0.5; 2])
        },
    )?;
    // shared Q=K=V leaf through split-heads scaled-dot attention: exercises
    // gradient accumulation across three uses of one tensor
    s.case(
        "composed-self-attention",
        TOL_COMPOSED,
        &[vec![1, 4, 6]],
        &uniform,
        &|t, v, _| {
            let q = t.split_heads(v[0], 2)?;
            let scores = t.bmm(q, q, true)?;
            let scaled = t.affine(scores, 1.0 / (3.0f64).sqrt(), 0.0);
            let attn = t.softmax_last(scaled)?;
            let ctx = t.bmm(attn, q, false)?;
            let merged = t.merge_heads(ctx, 2)?;
            let pooled = t.mean_axis1(merged)?;
            spiky(t, pooled)
        },
    )?;
    for (name, temporal, residual_skip) in [
        ("network-scaled-dot", TemporalMode::ScaledDot, false),
        ("network-additive", TemporalMode::Additive, false),
        ("network-residual-skip", TemporalMode::ScaledDot, true),
    ] {
        let report = network_case(temporal, residual_skip)?;
        s.outcomes.push(CheckOutcome { name, rel_err: report.rel_err, tol: TOL_COMPOSED });
    }
    Ok(())
}

/// Sweep every parameter coordinate of the assembled network: composite loss
/// on a fixed 4-sample batch at toy dimensions, training-phase batchnorm
/// (statistics rebuilt from scratch each evaluation), dropout off.
fn network_case(temporal: TemporalMode, residual_skip: bool) -> Result<GradReport> {
    let dims = ModelDims::toy();
    let model = Model::<f64>::new(dims, 11)?;
    let names: Vec<String> = model.params.keys().cloned().collect();
    let shapes: Vec<Vec<usize>> =
        names.iter().map(|n| model.params[n].shape().to_vec()).collect();
    let mut x0: Vec<f64> = Vec::new();
    for n in &names {
        x0.extend(model.params[n].data().iter().copied());
    }

    let nb = 4usize;
    let labels = [1u8, 2, 3, 1];
    let mut r = RngStream::new(7, stream_id(Domain::Data, 9900, 0));
    let gpr: Vec<f64> = (0..nb * dims.gpr_len).map(|_| r.uniform_in(-1.0, 1.0)).collect();
    let irt: Vec<f64> =
        (0..nb * dims.irt_c * dims.irt_h * dims.irt_w).map(|_| r.uniform_in(0.0, 1.0)).collect();
    let loss_cfg = LossConfig::default();

    let eval = |x: &[f64], want: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let mut vars = BTreeMap::new();
        let mut off = 0;
        for (name, shape) in names.iter().zip(&shapes) {
            let n: usize = shape.iter().product();
            vars.insert(
                name.clone(),
                tape.leaf(Tensor::new(shape, x[off..off + n].to_vec())?, true),
            );
            off += n;
        }
        let bound = BoundParams { vars };
        let mut bn = [
            BnState::identity(dims.irt_chans[0]),
            BnState::identity(dims.irt_chans[1]),
            BnState::identity(dims.irt_chans[2]),
        ];
        let gx = tape.constant(Tensor::new(&[nb, dims.gpr_len], gpr.clone())?);
        let ix =
            tape.constant(Tensor::new(&[nb, dims.irt_c, dims.irt_h, dims.irt_w], irt.clone())?);
        let opts = ForwardOpts {
            bn_phase: Phase::Train,
            dropout_p: 0.0,
            dropout: DropoutMode::Off,
            ablation: Ablation::CrossModal,
            temporal_mode: temporal,
            heads: 2,
            residual_skip,
        };
        let out = forward_full(&mut tape, &bound, &mut bn, &dims, gx, ix, opts)?;
        let terms = composite_loss(&mut tape, &out, &labels, &loss_cfg)?;
        let v = tape.value(terms.total).item();
        let g = if want {
            tape.backward(terms.total)?;
            let mut all = Vec::with_capacity(x.len());
            for name in &names {
                all.extend(tape.grad_or_zeros(bound.vars[name]).data().iter().copied());
            }
            Some(all)
        } else {
            None
        };
        Ok((v, g))
    };
    check_function(&x0, eval, FD_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The misclassification-gated variance term must actually fire in the
    /// network sweep, otherwise the variance head goes unexercised.
    #[test]
    fn network_sweep_reaches_variance_head() {
        let dims = ModelDims::toy();
        let model = Model::<f64>::new(dims, 11).unwrap();
        let names: Vec<String> = model.params.keys().cloned().collect();
        let mut x0: Vec<f64> = Vec::new();
        for n in &names {
            x0.extend(model.params[n].data().iter().copied());
        }
        // rebuild the same evaluation as network_case and inspect gradients
        let mut tape = Tape::<f64>::new();
        let mut vars = BTreeMap::new();
        let mut off = 0;
        for n in &names {
            let t = &model.params[n];
            let len = t.data().len();
            vars.insert(
                n.clone(),
                tape.leaf(Tensor::new(t.shape(), x0[off..off + len].to_vec()).unwrap(), true),
            );
            off += len;
        }
        let bound = BoundParams { vars };
        let mut bn = [
            BnState::identity(dims.irt_chans[0]),
            BnState::identity(dims.irt_chans[1]),
            BnState::identity(dims.irt_chans[2]),
        ];
        let mut r = RngStream::new(7, stream_id(Domain::Data, 9900, 0));
        let nb = 4usize;
        let gpr: Vec<f64> = (0..nb * dims.gpr_len).map(|_| r.uniform_in(-1.0, 1.0)).collect();
        let irt: Vec<f64> = (0..nb * dims.irt_c * dims.irt_h * dims.irt_w)
            .map(|_| r.uniform_in(0.0, 1.0))
            .collect();
        let gx = tape.constant(Tensor::new(&[nb, dims.gpr_len], gpr).unwrap());
        let ix =
            tape.constant(Tensor::new(&[nb, dims.irt_c, dims.irt_h, dims.irt_w], irt).unwrap());
        let opts = ForwardOpts {
            bn_phase: Phase::Train,
            dropout_p: 0.0,
            dropout: DropoutMode::Off,
            ablation: Ablation::CrossModal,
            temporal_mode: TemporalMode::ScaledDot,
            heads: 2,
            residual_skip: false,
        };
        let out = forward_full(&mut tape, &bound, &mut bn, &dims, gx, ix, opts).unwrap();
        let terms = composite_loss(&mut tape, &out, &[1, 2, 3, 1], &LossConfig::default()).unwrap();
        tape.backward(terms.total).unwrap();
        let var_grad_norm: f64 = bound
            .vars
            .iter()
            .filter(|(n, _)| n.starts_with("head.var."))
            .map(|(_, &v)| tape.grad_or_zeros(v).data().iter().map(|g| g * g).sum::<f64>())
            .sum();
        assert!(var_grad_norm > 0.0, "variance head received no gradient");
    }
}
