//! Whole-network assembly: parameter inventory, seeded initialization, tape
//! binding, and the ablation-aware forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::{self, CrossRecord, FusionVars, HeadVars};
use crate::gpr::{self, GprVars, TemporalMode};
use crate::init::{conv_fan_in, init_tensor, Init};
use crate::irt::{self, BnState, IrtBlockVars, IrtVars, Phase};
use crate::rng::{stream_id, Domain, RngStream};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Network dimensions. `d` is the shared feature width: both encoders emit
/// [N, d] and fusion operates on d-wide tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub gpr_len: usize,
    pub gpr_chans: [usize; 3],
    pub gpr_kernels: [usize; 3],
    pub t_seq: usize,
    pub d: usize,
    /// additive temporal-attention hidden width
    pub d_a: usize,
    pub irt_h: usize,
    pub irt_w: usize,
    pub irt_c: usize,
    pub irt_chans: [usize; 3],
    pub catt_hidden: usize,
    pub cls_hidden: usize,
    pub n_classes: usize,
}

impl ModelDims {
    /// Full-size network from the reference configuration.
    pub fn paper() -> Self {
        ModelDims {
            gpr_len: 512,
            gpr_chans: [32, 64, 128],
            gpr_kernels: [7, 5, 3],
            t_seq: 16,
            d: 128,
            d_a: 64,
            irt_h: 112,
            irt_w: 112,
            irt_c: 3,
            irt_chans: [32, 64, 128],
            catt_hidden: 8,
            cls_hidden: 64,
            n_classes: 3,
        }
    }

    /// Scaled-down network for double-precision gradient checking and fast
    /// structural tests.
    pub fn toy() -> Self {
        ModelDims {
            gpr_len: 32,
            gpr_chans: [4, 6, 8],
            gpr_kernels: [7, 5, 3],
            t_seq: 4,
            d: 8,
            d_a: 4,
            irt_h: 16,
            irt_w: 16,
            irt_c: 3,
            irt_chans: [4, 6, 8],
            catt_hidden: 1,
            cls_hidden: 4,
            n_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpr_chans[2] != self.d || self.irt_chans[2] != self.d {
            return Err(Error::Dimension(format!(
                "encoder output channels ({}, {}) must both equal feature width {}",
                self.gpr_chans[2], self.irt_chans[2], self.d
            )));
        }
        if self.irt_h % 8 != 0 || self.irt_w % 8 != 0 {
            return Err(Error::Dimension(format!(
                "IRT patch {}x{} must be divisible by 8 (three 2x2 pools)",
                self.irt_h, self.irt_w
            )));
        }
        if self.irt_chans[0] < self.irt_c || self.irt_chans[1] < self.irt_chans[0] || self.irt_chans[2] < self.irt_chans[1]
        {
            return Err(Error::Dimension(
                "IRT channel counts must be non-decreasing for the identity shortcut".into(),
            ));
        }
        Ok(())
    }
}

/// Which parts of the network participate in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    CrossModal,
    EarlyFusion,
    GprOnly,
    IrtOnly,
    NoTemporal,
    NoSpatial,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::CrossModal => "cross-modal",
            Ablation::EarlyFusion => "early-fusion",
            Ablation::GprOnly => "gpr-only",
            Ablation::IrtOnly => "irt-only",
            Ablation::NoTemporal => "no-temporal",
            Ablation::NoSpatial => "no-spatial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross-modal" => Ok(Ablation::CrossModal),
            "early-fusion" => Ok(Ablation::EarlyFusion),
            "gpr-only" => Ok(Ablation::GprOnly),
            "irt-only" => Ok(Ablation::IrtOnly),
            "no-temporal" => Ok(Ablation::NoTemporal),
            "no-spatial" => Ok(Ablation::NoSpatial),
            other => Err(Error::Config(format!("unknown ablation mode {other:?}"))),
        }
    }
}

/// One network instance: named parameter tensors plus batchnorm running
/// moments. Parameters are stored sorted by name; every routine that walks
/// them relies on that order.
pub struct Model<E> {
    pub dims: ModelDims,
    pub params: BTreeMap<String, Tensor<E>>,
    pub bn: [BnState<E>; 3],
}

/// Name, shape, and init scheme for every parameter of a given size.
pub fn param_specs(dims: &ModelDims) -> Vec<(String, Vec<usize>, Init)> {
    let d = dims.d;
    let xav = |fi: usize, fo: usize| Init::XavierUniform { fan_in: fi, fan_out: fo };
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: Init| v.push((name.into(), shape, init));

    for i in 0..3 {
        let c_in = if i == 0 { 1 } else { dims.gpr_chans[i - 1] };
        let shape = vec![dims.gpr_chans[i], c_in, dims.gpr_kernels[i]];
        let fan = conv_fan_in(&shape);
        push(&format!("gpr.conv{}.w", i + 1), shape, Init::KaimingUniform { fan_in: fan });
        push(&format!("gpr.conv{}.b", i + 1), vec![dims.gpr_chans[i]], Init::Zeros);
    }
    for name in ["wq", "wk", "wv"] {
        push(&format!("gpr.attn.{name}"), vec![d, d], xav(d, d));
    }
    push("gpr.attn_add.wh", vec![d, dims.d_a], xav(d, dims.d_a));
    push("gpr.attn_add.bh", vec![dims.d_a], Init::Zeros);
    push("gpr.attn_add.wa", vec![dims.d_a, 1], xav(dims.d_a, 1));

    for i in 0..3 {
        let c_in = if i == 0 { dims.irt_c } else { dims.irt_chans[i - 1] };
        let c_out = dims.irt_chans[i];
        let shape = vec![c_out, c_in, 3, 3];
        let fan = conv_fan_in(&shape);
        let base = format!("irt.block{}", i + 1);
        push(&format!("{base}.conv.w"), shape, Init::KaimingUniform { fan_in: fan });
        push(&format!("{base}.conv.b"), vec![c_out], Init::Zeros);
        push(&format!("{base}.bn.gamma"), vec![c_out], Init::Ones);
        push(&format!("{base}.bn.beta"), vec![c_out], Init::Zeros);
    }
    push(
        "irt.catt.w1",
        vec![d, dims.catt_hidden],
        Init::KaimingUniform { fan_in: d },
    );
    push("irt.catt.b1", vec![dims.catt_hidden], Init::Zeros);
    push("irt.catt.w2", vec![dims.catt_hidden, d], xav(dims.catt_hidden, d));
    push("irt.catt.b2", vec![d], Init::Zeros);
    push("irt.satt.w", vec![1, 2, 7, 7], xav(2 * 49, 49));
    push("irt.satt.b", vec![1], Init::Zeros);

    push("fusion.e_gpr", vec![d], Init::Normal { std: 0.02 });
    push("fusion.e_irt", vec![d], Init::Normal { std: 0.02 });
    for name in ["wq", "wk", "wv", "wo"] {
        push(&format!("fusion.{name}"), vec![d, d], xav(d, d));
    }
    push("fusion.fuse.w", vec![2 * d, d], Init::KaimingUniform { fan_in: 2 * d });
    push("fusion.fuse.b", vec![d], Init::Zeros);

    for head in ["cls", "var"] {
        push(
            &format!("head.{head}.w1"),
            vec![d, dims.cls_hidden],
            Init::KaimingUniform { fan_in: d },
        );
        push(&format!("head.{head}.b1"), vec![dims.cls_hidden], Init::Zeros);
        push(
            &format!("head.{head}.w2"),
            vec![dims.cls_hidden, dims.n_classes],
            xav(dims.cls_hidden, dims.n_classes),
        );
        push(&format!("head.{head}.b2"), vec![dims.n_classes], Init::Zeros);
    }
    v
}

impl<E: Element> Model<E> {
    /// Fresh network. Each parameter draws from its own counter-based stream
    /// (ordinal of the name in sorted order), so adding or removing a module
    /// elsewhere cannot silently shift another module's initial weights.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let specs = param_specs(&dims);
        let mut names: Vec<&str> = specs.iter().map(|(n, _, _)| n.as_str()).collect();
        names.sort_unstable();
        let ordinal: BTreeMap<&str, u32> =
            names.iter().enumerate().map(|(i, n)| (*n, i as u32)).collect();
        let mut params = BTreeMap::new();
        for (name, shape, init) in &specs {
            let mut rng = RngStream::new(seed, stream_id(Domain::Init, ordinal[name.as_str()], 0));
            params.insert(name.clone(), init_tensor::<E>(shape, *init, &mut rng));
        }
        let bn = [
            BnState::identity(dims.irt_chans[0]),
            BnState::identity(dims.irt_chans[1]),
            BnState::identity(dims.irt_chans[2]),
        ];
        Ok(Model { dims, params, bn })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Put every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<E>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), true)))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for all parameters, plus views shaped for each module.
pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing from bound set"))
    }

    pub fn gpr_vars(&self) -> GprVars {
        GprVars {
            conv1_w: self.get("gpr.conv1.w"),
            conv1_b: self.get("gpr.conv1.b"),
            conv2_w: self.get("gpr.conv2.w"),
            conv2_b: self.get("gpr.conv2.b"),
            conv3_w: self.get("gpr.conv3.w"),
            conv3_b: self.get("gpr.conv3.b"),
            wq: self.get("gpr.attn.wq"),
            wk: self.get("gpr.attn.wk"),
            wv: self.get("gpr.attn.wv"),
            wh: self.get("gpr.attn_add.wh"),
            bh: self.get("gpr.attn_add.bh"),
            wa: self.get("gpr.attn_add.wa"),
        }
    }

    pub fn irt_vars(&self) -> IrtVars {
        let block = |i: usize| IrtBlockVars {
            conv_w: self.get(&format!("irt.block{i}.conv.w")),
            conv_b: self.get(&format!("irt.block{i}.conv.b")),
            gamma: self.get(&format!("irt.block{i}.bn.gamma")),
            beta: self.get(&format!("irt.block{i}.bn.beta")),
        };
        IrtVars {
            blocks: [block(1), block(2), block(3)],
            catt_w1: self.get("irt.catt.w1"),
            catt_b1: self.get("irt.catt.b1"),
            catt_w2: self.get("irt.catt.w2"),
            catt_b2: self.get("irt.catt.b2"),
            satt_w: self.get("irt.satt.w"),
            satt_b: self.get("irt.satt.b"),
        }
    }

    pub fn fusion_vars(&self) -> FusionVars {
        FusionVars {
            e_gpr: self.get("fusion.e_gpr"),
            e_irt: self.get("fusion.e_irt"),
            wq: self.get("fusion.wq"),
            wk: self.get("fusion.wk"),
            wv: self.get("fusion.wv"),
            wo: self.get("fusion.wo"),
            fuse_w: self.get("fusion.fuse.w"),
            fuse_b: self.get("fusion.fuse.b"),
        }
    }

    pub fn head_vars(&self) -> HeadVars {
        HeadVars {
            cls_w1: self.get("head.cls.w1"),
            cls_b1: self.get("head.cls.b1"),
            cls_w2: self.get("head.cls.w2"),
            cls_b2: self.get("head.cls.b2"),
            var_w1: self.get("head.var.w1"),
            var_b1: self.get("head.var.b1"),
            var_w2: self.get("head.var.w2"),
            var_b2: self.get("head.var.b2"),
        }
    }
}

/// How the three dropout sites (GPR feature, IRT feature, fused
/// representation) draw their masks.
pub enum DropoutMode<'a> {
    Off,
    /// one stream per site, shared across the batch (training steps)
    SharedStreams(&'a mut [RngStream; 3]),
    /// every batch row draws its own stream keyed by global sample index and
    /// pass number (Monte-Carlo inference); results are independent of how
    /// samples are batched
    PerSample { seed: u64, pass: u16, base_index: u32 },
}

/// Forward-pass controls. Dropout mode and batchnorm phase are independent so
/// MC inference can keep running statistics frozen while dropout stays live.
pub struct ForwardOpts<'a> {
    pub bn_phase: Phase,
    pub dropout_p: f64,
    pub dropout: DropoutMode<'a>,
    pub ablation: Ablation,
    pub temporal_mode: TemporalMode,
    pub heads: usize,
    pub residual_skip: bool,
}

impl<'a> ForwardOpts<'a> {
    /// Deterministic evaluation: no dropout, frozen batchnorm.
    pub fn eval(
        ablation: Ablation,
        temporal_mode: TemporalMode,
        heads: usize,
        residual_skip: bool,
    ) -> Self {
        ForwardOpts {
            bn_phase: Phase::Eval,
            dropout_p: 0.0,
            dropout: DropoutMode::Off,
            ablation,
            temporal_mode,
            heads,
            residual_skip,
        }
    }
}

pub struct ForwardOut<E> {
    /// [N, 3] class logits
    pub logits: Var,
    /// [N, 3] per-class aleatoric variance in [SIGMA2_MIN, SIGMA2_MAX]
    pub sigma2: Var,
    /// [N, d] representation fed to both heads
    pub z: Var,
    /// [N, T] temporal attention weights (rows sum to 1)
    pub temporal: Option<Var>,
    /// [N, 1, H', W'] spatial attention mask in (0,1)
    pub spatial: Option<Var>,
    pub cross: Option<CrossRecord<E>>,
}

fn site_dropout<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    p: f64,
    mode: &mut DropoutMode<'_>,
    site: usize,
) -> Result<Var> {
    match mode {
        DropoutMode::Off => Ok(x),
        DropoutMode::SharedStreams(s) => tape.dropout(x, p, true, &mut s[site]),
        DropoutMode::PerSample { seed, pass, base_index } => {
            if p == 0.0 {
                return Ok(x);
            }
            let s = tape.value(x).shape().to_vec();
            let n = s[0];
            let width: usize = s[1..].iter().product();
            let scale = E::from_real(1.0 / (1.0 - p));
            let threshold = (p * 4294967296.0) as u64;
            let mut factors = Tensor::zeros(&s);
            for row in 0..n {
                let stream = stream_id(Domain::Mc, *base_index + row as u32, *pass * 4 + site as u16);
                let mut rng = RngStream::new(*seed, stream);
                for v in factors.data_mut()[row * width..(row + 1) * width].iter_mut() {
                    *v = if (rng.next_u32() as u64) < threshold { E::zero() } else { scale };
                }
            }
            let mask = tape.constant(factors);
            tape.mul(x, mask)
        }
    }
}

/// Run the network on a batch. `gpr` is [N, gpr_len], `irt` is
/// [N, irt_c, irt_h, irt_w]; both must already live on `tape`.
pub fn forward_full<E: Element>(
    tape: &mut Tape<E>,
    bound: &BoundParams,
    bn: &mut [BnState<E>; 3],
    dims: &ModelDims,
    gpr_x: Var,
    irt_x: Var,
    mut opts: ForwardOpts<'_>,
) -> Result<ForwardOut<E>> {
    let gs = tape.value(gpr_x).shape().to_vec();
    let is = tape.value(irt_x).shape().to_vec();
    if gs.len() != 2 || gs[1] != dims.gpr_len {
        return Err(Error::shape(format!(
            "GPR batch must be [N, {}], got {gs:?}",
            dims.gpr_len
        )));
    }
    if is.len() != 4 || is[1] != dims.irt_c || is[2] != dims.irt_h || is[3] != dims.irt_w {
        return Err(Error::shape(format!(
            "IRT batch must be [N, {}, {}, {}], got {is:?}",
            dims.irt_c, dims.irt_h, dims.irt_w
        )));
    }
    if gs[0] != is[0] {
        return Err(Error::shape(format!(
            "modality batch sizes disagree: {} vs {}",
            gs[0], is[0]
        )));
    }
    let n = gs[0];
    let p = opts.dropout_p;
    let gvars = bound.gpr_vars();
    let ivars = bound.irt_vars();
    let fvars = bound.fusion_vars();
    let hvars = bound.head_vars();

    // single-modality modes never touch the other encoder
    match opts.ablation {
        Ablation::GprOnly => {
            let (f, w) = gpr::gpr_encode(tape, gpr_x, &gvars, dims.t_seq, opts.temporal_mode, opts.heads)?;
            let z = site_dropout(tape, f, p, &mut opts.dropout, 0)?;
            let logits = fusion::classify(tape, z, &hvars)?;
            let sigma2 = fusion::predict_variance(tape, z, &hvars)?;
            return Ok(ForwardOut { logits, sigma2, z, temporal: Some(w), spatial: None, cross: None });
        }
        Ablation::IrtOnly => {
            let enc = irt::irt_encode(tape, irt_x, &ivars, bn, opts.bn_phase, opts.residual_skip, true)?;
            let z = site_dropout(tape, enc.f_irt, p, &mut opts.dropout, 1)?;
            let logits = fusion::classify(tape, z, &hvars)?;
            let sigma2 = fusion::predict_variance(tape, z, &hvars)?;
            return Ok(ForwardOut { logits, sigma2, z, temporal: None, spatial: enc.m_s, cross: None });
        }
        _ => {}
    }

    // GPR branch
    let (f_gpr, temporal) = match opts.ablation {
        Ablation::NoTemporal => {
            let h = gpr::gpr_conv_stack(tape, gpr_x, &gvars, dims.t_seq)?;
            let f = tape.mean_axis1(h)?;
            let w = tape.constant(Tensor::full(&[n, dims.t_seq], E::from_real(1.0 / dims.t_seq as f64)));
            (f, w)
        }
        _ => gpr::gpr_encode(tape, gpr_x, &gvars, dims.t_seq, opts.temporal_mode, opts.heads)?,
    };

    // IRT branch
    let use_attention = opts.ablation != Ablation::NoSpatial;
    let enc = irt::irt_encode(tape, irt_x, &ivars, bn, opts.bn_phase, opts.residual_skip, use_attention)?;
    let spatial = match opts.ablation {
        Ablation::NoSpatial => {
            let (hp, wp) = (dims.irt_h / 8, dims.irt_w / 8);
            Some(tape.constant(Tensor::full(&[n, 1, hp, wp], E::one())))
        }
        _ => enc.m_s,
    };

    let f_gpr = site_dropout(tape, f_gpr, p, &mut opts.dropout, 0)?;
    let f_irt = site_dropout(tape, enc.f_irt, p, &mut opts.dropout, 1)?;

    let (z, cross) = match opts.ablation {
        Ablation::EarlyFusion => {
            let cat = tape.concat_last(f_gpr, f_irt)?;
            let proj = tape.matmul(cat, fvars.fuse_w)?;
            let proj = tape.add_bias_row(proj, fvars.fuse_b)?;
            (tape.relu(proj), None)
        }
        _ => {
            let tokens = fusion::add_modality_embeddings(tape, f_gpr, f_irt, &fvars)?;
            let (zt, record) = fusion::multi_head_cross_attention(tape, tokens, &fvars, opts.heads)?;
            let z = fusion::fuse(tape, zt, &fvars)?;
            (z, Some(record))
        }
    };
    let z = site_dropout(tape, z, p, &mut opts.dropout, 2)?;
    let logits = fusion::classify(tape, z, &hvars)?;
    let sigma2 = fusion::predict_variance(tape, z, &hvars)?;
    Ok(ForwardOut { logits, sigma2, z, temporal: Some(temporal), spatial, cross })
}
