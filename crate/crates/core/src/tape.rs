//! Reverse-mode automatic differentiation on an arena tape.
//!
//! Ops are recorded in creation order; `backward` walks the arena in reverse,
//! accumulating gradients into every node on a `requires_grad` path. Values
//! are computed eagerly at record time, so a [`Var`] always has a concrete
//! tensor behind it.

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Op<E> {
    Leaf,
    Matmul { a: Var, b: Var },
    /// Batched matmul; `tb` multiplies by the transpose of b's trailing matrix.
    Bmm { a: Var, b: Var, tb: bool },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    SoftmaxLast { x: Var },
    LogSoftmaxLast { x: Var },
    BatchnormTrain { x: Var, gamma: Var, beta: Var, mean: Vec<E>, invstd: Vec<E> },
    BatchnormEval { x: Var, gamma: Var, beta: Var, mean: Vec<E>, invstd: Vec<E> },
    /// Fused batchnorm + ReLU + max-pool; identical semantics to the three
    /// separate ops but without materializing the intermediate maps.
    BnReluPoolTrain { x: Var, gamma: Var, beta: Var, mean: Vec<E>, invstd: Vec<E>, argmax: Vec<u32> },
    BnReluPoolEval { x: Var, gamma: Var, beta: Var, mean: Vec<E>, invstd: Vec<E>, argmax: Vec<u32> },
    Dropout { x: Var, factors: Vec<E> },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    GlobalAvg2d { x: Var },
    GlobalMax2d { x: Var, argmax: Vec<u32> },
    MeanChan { x: Var },
    MaxChan { x: Var, argmax: Vec<u32> },
    AdaptiveAvg1d { x: Var },
    MeanAxis1 { x: Var },
    AddBiasRow { x: Var, b: Var },
    Add { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Affine { x: Var, mul: E },
    PowConst { x: Var, p: E },
    Log { x: Var },
    Exp { x: Var },
    /// x * ln(x) with 0 * ln(0) := 0.
    XLogX { x: Var },
    ClampRange { x: Var, lo: E, hi: E },
    /// [N,C,H,W] * m[N,C], mask broadcast over space.
    MulChanMask { x: Var, m: Var },
    /// [N,C,H,W] * m[N,1,H,W], mask broadcast over channels.
    MulSpatMask { x: Var, m: Var },
    /// [N,A,B] -> [N,B,A]
    Transpose12 { x: Var },
    /// [N,T,h*d] -> [N*h,T,d]
    SplitHeads { x: Var, h: usize },
    /// [N*h,T,d] -> [N,T,h*d]
    MergeHeads { x: Var, h: usize },
    /// [N*h,T,U] -> [N,T,U], mean over heads.
    MeanHeads { x: Var, h: usize },
    /// two [N,D] -> [N,2,D]
    StackPair { a: Var, b: Var },
    /// [N,T,D] -> [N,D] at fixed axis-1 index.
    SliceAxis1 { x: Var, idx: usize },
    /// [N,D1],[N,D2] -> [N,D1+D2]
    ConcatLast { a: Var, b: Var },
    /// [N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W] along channels.
    ChanConcat { a: Var, b: Var },
    Reshape { x: Var },
    /// rows scaled to sum 1.
    NormalizeRows { x: Var },
    /// [N,C] -> [N] picking one column per row.
    PickPerRow { x: Var, idx: Vec<u32> },
    /// constant-weighted dot -> scalar.
    WeightedSumConst { x: Var, w: Vec<E> },
    SumAll { x: Var },
}

struct Node<E> {
    value: Tensor<E>,
    grad: Option<Tensor<E>>,
    needs: bool,
    op: Op<E>,
}

pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros when the loss never reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<E> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        }
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<E>, needs: bool, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul shapes incompatible: {sa:?} x {sb:?}"
            )));
        }
        let y = crate::tensor::matmul2d(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::Matmul { a, b }))
    }

    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "bmm needs matching rank-3 batches: {sa:?} x {sb:?}"
            )));
        }
        let (bs, p, q) = (sa[0], sa[1], sa[2]);
        let (q2, r) = if transpose_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if q != q2 {
            return Err(Error::Dimension(format!(
                "bmm inner extents differ: {sa:?} x {sb:?} (transpose_b={transpose_b})"
            )));
        }
        let mut y = Tensor::zeros(&[bs, p, r]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let yd = y.data_mut();
            for i in 0..bs {
                let (rsb, csb) = if transpose_b {
                    (1isize, q as isize)
                } else {
                    (r as isize, 1isize)
                };
                E::gemm(
                    p,
                    q,
                    r,
                    E::one(),
                    &ad[i * p * q..(i + 1) * p * q],
                    q as isize,
                    1,
                    &bd[i * q * r..(i + 1) * q * r],
                    rsb,
                    csb,
                    E::zero(),
                    &mut yd[i * p * r..(i + 1) * p * r],
                    r as isize,
                    1,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::Bmm { a, b, tb: transpose_b }))
    }

    // ---- convolutions ----

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let lifted = match self.value(x).rank() {
            2 => {
                let s = self.value(x).shape().to_vec();
                Some(self.reshape(x, &[1, s[0], s[1]])?)
            }
            3 => None,
            r => {
                return Err(Error::shape(format!("conv1d input must be rank 2 or 3, got rank {r}")))
            }
        };
        let x3 = lifted.unwrap_or(x);
        let (sx, sw) = (self.value(x3).shape().to_vec(), self.value(w).shape().to_vec());
        if sw.len() != 3 || self.value(b).shape() != [sw[0]] {
            return Err(Error::shape(format!(
                "conv1d weight/bias shapes invalid: w {sw:?}, b {:?}",
                self.value(b).shape()
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::Dimension(format!(
                "conv1d channel mismatch: input {sx:?} vs weight {sw:?}"
            )));
        }
        if stride < 1 {
            return Err(Error::Parameter("conv stride must be >= 1".into()));
        }
        if sw[2] > sx[2] + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv1d kernel {} larger than padded input {}",
                sw[2],
                sx[2] + 2 * pad
            )));
        }
        let y = kernels::conv1d_forward(self.value(x3), self.value(w), self.value(b), stride, pad);
        let needs = self.needs(x3) || self.needs(w) || self.needs(b);
        let out = self.push(y, needs, Op::Conv1d { x: x3, w, b, stride, pad });
        if lifted.is_some() {
            let so = self.value(out).shape().to_vec();
            self.reshape(out, &[so[1], so[2]])
        } else {
            Ok(out)
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let lifted = match self.value(x).rank() {
            3 => {
                let s = self.value(x).shape().to_vec();
                Some(self.reshape(x, &[1, s[0], s[1], s[2]])?)
            }
            4 => None,
            r => {
                return Err(Error::shape(format!("conv2d input must be rank 3 or 4, got rank {r}")))
            }
        };
        let x4 = lifted.unwrap_or(x);
        let (sx, sw) = (self.value(x4).shape().to_vec(), self.value(w).shape().to_vec());
        if sw.len() != 4 || sw[2] != sw[3] || self.value(b).shape() != [sw[0]] {
            return Err(Error::shape(format!(
                "conv2d weight/bias shapes invalid: w {sw:?}, b {:?}",
                self.value(b).shape()
            )));
        }
        if sx[1] != sw[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {sx:?} vs weight {sw:?}"
            )));
        }
        if stride < 1 {
            return Err(Error::Parameter("conv stride must be >= 1".into()));
        }
        if sw[2] > sx[2] + 2 * pad || sw[2] > sx[3] + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {} larger than padded input {}x{}",
                sw[2],
                sx[2] + 2 * pad,
                sx[3] + 2 * pad
            )));
        }
        let y = kernels::conv2d_forward(self.value(x4), self.value(w), self.value(b), stride, pad);
        let needs = self.needs(x4) || self.needs(w) || self.needs(b);
        let out = self.push(y, needs, Op::Conv2d { x: x4, w, b, stride, pad });
        if lifted.is_some() {
            let so = self.value(out).shape().to_vec();
            self.reshape(out, &[so[1], so[2], so[3]])
        } else {
            Ok(out)
        }
    }

    // ---- activations ----

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op<E>) -> Var {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            *v = f(*v);
        }
        self.push(y, self.nodes[x.0].needs, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > E::zero() { v } else { E::zero() }, Op::Relu { x })
    }

    pub fn tanh_act(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        // max(x,0) + ln(1 + exp(-|x|)): overflow-safe for large |x|, and the
        // log argument sits in (1,2] where plain ln is accurate.
        self.unary(
            x,
            |v| v.max(E::zero()) + (E::one() + (-v.abs()).exp()).ln(),
            Op::Softplus { x },
        )
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let shape = self.value(x).shape().to_vec();
        let row = *shape.last().ok_or_else(|| Error::shape("softmax needs rank >= 1"))?;
        let mut y = self.value(x).clone();
        kernels::softmax_rows(y.data_mut(), row);
        Ok(self.push(y, self.needs(x), Op::SoftmaxLast { x }))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        if !self.value(x).all_finite() {
            return Err(Error::Numeric("log-softmax input contains non-finite values".into()));
        }
        let shape = self.value(x).shape().to_vec();
        let row = *shape.last().ok_or_else(|| Error::shape("log-softmax needs rank >= 1"))?;
        let mut y = self.value(x).clone();
        kernels::log_softmax_rows(y.data_mut(), row);
        Ok(self.push(y, self.needs(x), Op::LogSoftmaxLast { x }))
    }

    // ---- batchnorm ----

    /// Train-mode batchnorm over [N,C,H,W]. Returns the output plus the batch
    /// moments (biased variance) so the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<E>, Vec<E>)> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("batchnorm expects rank-4 input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm affine params must be [{c}], got {:?}/{:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let (mean, var) = kernels::bn_batch_stats(self.value(x).data(), n, c, hw);
        let invstd: Vec<E> = var
            .iter()
            .map(|&v| E::one() / (v + E::from_real(eps)).sqrt())
            .collect();
        let mut y = Tensor::zeros(&s);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let yd = y.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (g, b, mu, is) = (gd[ci], bd[ci], mean[ci], invstd[ci]);
                    for i in base..base + hw {
                        yd[i] = g * (xd[i] - mu) * is + b;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            y,
            needs,
            Op::BatchnormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
            },
        );
        Ok((out, mean, var))
    }

    /// Eval-mode batchnorm using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
    ) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("batchnorm expects rank-4 input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("running moments length != channel count"));
        }
        let invstd: Vec<E> = running_var
            .iter()
            .map(|&v| E::one() / (v + E::from_real(eps)).sqrt())
            .collect();
        let mut y = Tensor::zeros(&s);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let yd = y.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (g, b, mu, is) = (gd[ci], bd[ci], running_mean[ci], invstd[ci]);
                    for i in base..base + hw {
                        yd[i] = g * (xd[i] - mu) * is + b;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            y,
            needs,
            Op::BatchnormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
            },
        ))
    }

    /// Fused train-mode batchnorm + ReLU + max-pool k x k. Produces the same
    /// values, batch moments, and gradients as the three ops chained, but in
    /// one pass (the dominant memory-bound path of image encoders).
    pub fn bn_relu_pool_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        k: usize,
    ) -> Result<(Var, Vec<E>, Vec<E>)> {
        let (n, c) = self.bn_pool_check(x, gamma, beta, k)?;
        let s = self.value(x).shape().to_vec();
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let (mean, var) = kernels::bn_batch_stats(self.value(x).data(), n, c, s[2] * s[3]);
        let invstd: Vec<E> = var
            .iter()
            .map(|&v| E::one() / (v + E::from_real(eps)).sqrt())
            .collect();
        let (y, argmax) = kernels::bn_relu_pool_apply(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &invstd,
            k,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(
            y,
            needs,
            Op::BnReluPoolTrain { x, gamma, beta, mean: mean.clone(), invstd, argmax },
        );
        Ok((out, mean, var))
    }

    /// Fused eval-mode batchnorm (running moments) + ReLU + max-pool k x k.
    pub fn bn_relu_pool_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
        k: usize,
    ) -> Result<Var> {
        let (_, c) = self.bn_pool_check(x, gamma, beta, k)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("running moments length != channel count"));
        }
        let invstd: Vec<E> = running_var
            .iter()
            .map(|&v| E::one() / (v + E::from_real(eps)).sqrt())
            .collect();
        let (y, argmax) = kernels::bn_relu_pool_apply(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            &invstd,
            k,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            y,
            needs,
            Op::BnReluPoolEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
                argmax,
            },
        ))
    }

    fn bn_pool_check(&self, x: Var, gamma: Var, beta: Var, k: usize) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("batchnorm expects rank-4 input, got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm affine params must be [{c}], got {:?}/{:?}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        if s[2] < k || s[3] < k {
            return Err(Error::Dimension(format!(
                "pool window {k}x{k} larger than input {}x{}",
                s[2], s[3]
            )));
        }
        Ok((n, c))
    }

    // ---- stochastic ----

    /// Inverted dropout. Each element consumes exactly one u32 from `rng`, so
    /// the mask is a pure function of the stream state and element index.
    pub fn dropout(&mut self, x: Var, p: f64, enabled: bool, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate must be in [0,1), got {p}")));
        }
        if !enabled || p == 0.0 {
            return Ok(x);
        }
        let scale = E::from_real(1.0 / (1.0 - p));
        let threshold = (p * 4294967296.0) as u64;
        let n = self.value(x).len();
        let factors: Vec<E> = (0..n)
            .map(|_| {
                if (rng.next_u32() as u64) < threshold {
                    E::zero()
                } else {
                    scale
                }
            })
            .collect();
        let mut y = self.value(x).clone();
        for (v, f) in y.data_mut().iter_mut().zip(&factors) {
            *v = *v * *f;
        }
        Ok(self.push(y, self.needs(x), Op::Dropout { x, factors }))
    }

    // ---- pooling / reductions ----

    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("maxpool expects rank-4 input, got {s:?}")));
        }
        if s[2] < k || s[3] < k {
            return Err(Error::Dimension(format!(
                "pool window {k}x{k} larger than input {}x{}",
                s[2], s[3]
            )));
        }
        let (y, argmax) = kernels::maxpool2d_forward(self.value(x), k);
        Ok(self.push(y, self.needs(x), Op::MaxPool2d { x, argmax }))
    }

    /// [N,C,H,W] -> [N,C] mean over space.
    pub fn global_avg2d(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("global_avg2d expects rank-4 input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut y = Tensor::zeros(&[n, c]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            let inv = E::from_real(1.0 / hw as f64);
            for nc in 0..n * c {
                let s: E = xd[nc * hw..(nc + 1) * hw].iter().copied().sum();
                yd[nc] = s * inv;
            }
        }
        Ok(self.push(y, self.needs(x), Op::GlobalAvg2d { x }))
    }

    /// [N,C,H,W] -> [N,C] max over space.
    pub fn global_max2d(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("global_max2d expects rank-4 input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut y = Tensor::zeros(&[n, c]);
        let mut argmax = vec![0u32; n * c];
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for nc in 0..n * c {
                let mut best = xd[nc * hw];
                let mut bi = nc * hw;
                for i in nc * hw..(nc + 1) * hw {
                    if xd[i] > best {
                        best = xd[i];
                        bi = i;
                    }
                }
                yd[nc] = best;
                argmax[nc] = bi as u32;
            }
        }
        Ok(self.push(y, self.needs(x), Op::GlobalMax2d { x, argmax }))
    }

    /// [N,C,H,W] -> [N,1,H,W] mean over channels.
    pub fn mean_chan(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("mean_chan expects rank-4 input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut y = Tensor::zeros(&[n, 1, s[2], s[3]]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            let inv = E::from_real(1.0 / c as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        yd[ni * hw + i] = yd[ni * hw + i] + xd[base + i];
                    }
                }
                for i in 0..hw {
                    yd[ni * hw + i] = yd[ni * hw + i] * inv;
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::MeanChan { x }))
    }

    /// [N,C,H,W] -> [N,1,H,W] max over channels.
    pub fn max_chan(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("max_chan expects rank-4 input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut y = Tensor::zeros(&[n, 1, s[2], s[3]]);
        let mut argmax = vec![0u32; n * hw];
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for ni in 0..n {
                for i in 0..hw {
                    let mut best = xd[ni * c * hw + i];
                    let mut bi = ni * c * hw + i;
                    for ci in 1..c {
                        let idx = (ni * c + ci) * hw + i;
                        if xd[idx] > best {
                            best = xd[idx];
                            bi = idx;
                        }
                    }
                    yd[ni * hw + i] = best;
                    argmax[ni * hw + i] = bi as u32;
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::MaxChan { x, argmax }))
    }

    /// [N,C,L] -> [N,C,T]; bin t averages input positions
    /// [floor(t*L/T), floor((t+1)*L/T)).
    pub fn adaptive_avg1d(&mut self, x: Var, t_out: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("adaptive_avg1d expects rank-3 input, got {s:?}")));
        }
        let (n, c, l) = (s[0], s[1], s[2]);
        if t_out == 0 || t_out > l {
            return Err(Error::Dimension(format!(
                "adaptive target {t_out} must be in [1, input length {l}]"
            )));
        }
        let mut y = Tensor::zeros(&[n, c, t_out]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for nc in 0..n * c {
                let row = &xd[nc * l..(nc + 1) * l];
                let orow = &mut yd[nc * t_out..(nc + 1) * t_out];
                for (t, o) in orow.iter_mut().enumerate() {
                    let (a, b) = (t * l / t_out, (t + 1) * l / t_out);
                    let s: E = row[a..b].iter().copied().sum();
                    *o = s * E::from_real(1.0 / (b - a) as f64);
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::AdaptiveAvg1d { x }))
    }

    /// [N,T,D] -> [N,D] mean over axis 1.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("mean_axis1 expects rank-3 input, got {s:?}")));
        }
        let (n, t, d) = (s[0], s[1], s[2]);
        let mut y = Tensor::zeros(&[n, d]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            let inv = E::from_real(1.0 / t as f64);
            for ni in 0..n {
                for ti in 0..t {
                    let base = (ni * t + ti) * d;
                    for di in 0..d {
                        yd[ni * d + di] = yd[ni * d + di] + xd[base + di];
                    }
                }
                for di in 0..d {
                    yd[ni * d + di] = yd[ni * d + di] * inv;
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::MeanAxis1 { x }))
    }

    // ---- elementwise / structural ----

    /// [R,C] + b[C] broadcast over rows.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || self.value(b).shape() != [s[1]] {
            return Err(Error::shape(format!(
                "add_bias_row shapes: x {s:?}, b {:?}",
                self.value(b).shape()
            )));
        }
        let mut y = self.value(x).clone();
        {
            let bd = self.value(b).data().to_vec();
            for row in y.data_mut().chunks_exact_mut(s[1]) {
                for (v, bb) in row.iter_mut().zip(&bd) {
                    *v = *v + *bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(y, needs, Op::AddBiasRow { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        for (v, w) in y.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v = *v + *w;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        for (v, w) in y.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *v = *v * *w;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::MulElem { a, b }))
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let (m, a) = (E::from_real(mul), E::from_real(add));
        self.unary(x, |v| v * m + a, Op::Affine { x, mul: m })
    }

    pub fn pow_const(&mut self, x: Var, p: f64) -> Var {
        let pe = E::from_real(p);
        self.unary(x, |v| v.powf(pe), Op::PowConst { x, p: pe })
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    /// x ln x with 0 ln 0 := 0 (entropy summand).
    pub fn xlogx(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v == E::zero() { E::zero() } else { v * v.ln() },
            Op::XLogX { x },
        )
    }

    pub fn clamp_range(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (E::from_real(lo), E::from_real(hi));
        self.unary(x, |v| v.max(l).min(h), Op::ClampRange { x, lo: l, hi: h })
    }

    /// [N,C,H,W] * m[N,C]
    pub fn mul_chan_mask(&mut self, x: Var, m: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || self.value(m).shape() != [s[0], s[1]] {
            return Err(Error::shape(format!(
                "mul_chan_mask shapes: x {s:?}, m {:?}",
                self.value(m).shape()
            )));
        }
        let hw = s[2] * s[3];
        let mut y = self.value(x).clone();
        {
            let md = self.nodes[m.0].value.data().to_vec();
            for (nc, chunk) in y.data_mut().chunks_exact_mut(hw).enumerate() {
                let f = md[nc];
                for v in chunk {
                    *v = *v * f;
                }
            }
        }
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(y, needs, Op::MulChanMask { x, m }))
    }

    /// [N,C,H,W] * m[N,1,H,W]
    pub fn mul_spat_mask(&mut self, x: Var, m: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || self.value(m).shape() != [s[0], 1, s[2], s[3]] {
            return Err(Error::shape(format!(
                "mul_spat_mask shapes: x {s:?}, m {:?}",
                self.value(m).shape()
            )));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut y = self.value(x).clone();
        {
            let md = self.nodes[m.0].value.data().to_vec();
            let yd = y.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        yd[base + i] = yd[base + i] * md[ni * hw + i];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(y, needs, Op::MulSpatMask { x, m }))
    }

    /// [N,A,B] -> [N,B,A]
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("transpose12 expects rank-3, got {s:?}")));
        }
        let (n, a, b) = (s[0], s[1], s[2]);
        let mut y = Tensor::zeros(&[n, b, a]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for ni in 0..n {
                for ai in 0..a {
                    for bi in 0..b {
                        yd[(ni * b + bi) * a + ai] = xd[(ni * a + ai) * b + bi];
                    }
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::Transpose12 { x }))
    }

    /// [N,T,h*d] -> [N*h,T,d]
    pub fn split_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s[2] % h != 0 {
            return Err(Error::shape(format!(
                "split_heads: shape {s:?} not divisible into {h} heads"
            )));
        }
        let (n, t, hd) = (s[0], s[1], s[2]);
        let d = hd / h;
        let mut y = Tensor::zeros(&[n * h, t, d]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for ni in 0..n {
                for hi in 0..h {
                    for ti in 0..t {
                        let src = (ni * t + ti) * hd + hi * d;
                        let dst = ((ni * h + hi) * t + ti) * d;
                        yd[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                    }
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::SplitHeads { x, h }))
    }

    /// [N*h,T,d] -> [N,T,h*d]
    pub fn merge_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s[0] % h != 0 {
            return Err(Error::shape(format!(
                "merge_heads: batch {s:?} not divisible by {h} heads"
            )));
        }
        let (nh, t, d) = (s[0], s[1], s[2]);
        let n = nh / h;
        let mut y = Tensor::zeros(&[n, t, h * d]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for ni in 0..n {
                for hi in 0..h {
                    for ti in 0..t {
                        let src = ((ni * h + hi) * t + ti) * d;
                        let dst = (ni * t + ti) * (h * d) + hi * d;
                        yd[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                    }
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::MergeHeads { x, h }))
    }

    /// [N*h,T,U] -> [N,T,U] averaging over heads.
    pub fn mean_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || s[0] % h != 0 {
            return Err(Error::shape(format!(
                "mean_heads: batch {s:?} not divisible by {h} heads"
            )));
        }
        let (nh, t, u) = (s[0], s[1], s[2]);
        let n = nh / h;
        let mut y = Tensor::zeros(&[n, t, u]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            let inv = E::from_real(1.0 / h as f64);
            for ni in 0..n {
                for hi in 0..h {
                    let src = (ni * h + hi) * t * u;
                    for i in 0..t * u {
                        yd[ni * t * u + i] = yd[ni * t * u + i] + xd[src + i];
                    }
                }
                for i in 0..t * u {
                    yd[ni * t * u + i] = yd[ni * t * u + i] * inv;
                }
            }
        }
        Ok(self.push(y, self.needs(x), Op::MeanHeads { x, h }))
    }

    /// two [N,D] -> [N,2,D]
    pub fn stack_pair(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape(format!("stack_pair shapes: {sa:?} vs {sb:?}")));
        }
        let (n, d) = (sa[0], sa[1]);
        let mut y = Tensor::zeros(&[n, 2, d]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let yd = y.data_mut();
            for ni in 0..n {
                yd[ni * 2 * d..ni * 2 * d + d].copy_from_slice(&ad[ni * d..(ni + 1) * d]);
                yd[ni * 2 * d + d..(ni + 1) * 2 * d].copy_from_slice(&bd[ni * d..(ni + 1) * d]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::StackPair { a, b }))
    }

    /// [N,T,D] -> [N,D] at a fixed index along axis 1.
    pub fn slice_axis1(&mut self, x: Var, idx: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 || idx >= s[1] {
            return Err(Error::shape(format!("slice_axis1 index {idx} out of {s:?}")));
        }
        let (t, d) = (s[1], s[2]);
        let mut y = Tensor::zeros(&[s[0], d]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for ni in 0..s[0] {
                yd[ni * d..(ni + 1) * d]
                    .copy_from_slice(&xd[(ni * t + idx) * d..(ni * t + idx) * d + d]);
            }
        }
        Ok(self.push(y, self.needs(x), Op::SliceAxis1 { x, idx }))
    }

    /// [N,D1],[N,D2] -> [N,D1+D2]
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!("concat_last shapes: {sa:?} vs {sb:?}")));
        }
        let (n, d1, d2) = (sa[0], sa[1], sb[1]);
        let mut y = Tensor::zeros(&[n, d1 + d2]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let yd = y.data_mut();
            for ni in 0..n {
                yd[ni * (d1 + d2)..ni * (d1 + d2) + d1]
                    .copy_from_slice(&ad[ni * d1..(ni + 1) * d1]);
                yd[ni * (d1 + d2) + d1..(ni + 1) * (d1 + d2)]
                    .copy_from_slice(&bd[ni * d2..(ni + 1) * d2]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::ConcatLast { a, b }))
    }

    /// [N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W] along channels.
    pub fn chan_concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 4
            || sb.len() != 4
            || sa[0] != sb[0]
            || sa[2] != sb[2]
            || sa[3] != sb[3]
        {
            return Err(Error::shape(format!("chan_concat shapes: {sa:?} vs {sb:?}")));
        }
        let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let mut y = Tensor::zeros(&[n, c1 + c2, sa[2], sa[3]]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let yd = y.data_mut();
            for ni in 0..n {
                let dst = ni * (c1 + c2) * hw;
                yd[dst..dst + c1 * hw].copy_from_slice(&ad[ni * c1 * hw..(ni + 1) * c1 * hw]);
                yd[dst + c1 * hw..dst + (c1 + c2) * hw]
                    .copy_from_slice(&bd[ni * c2 * hw..(ni + 1) * c2 * hw]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(y, needs, Op::ChanConcat { a, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(y, self.needs(x), Op::Reshape { x }))
    }

    /// Scale each row of [N,D] to sum 1.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(format!("normalize_rows expects rank-2, got {s:?}")));
        }
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_exact_mut(s[1]) {
            let sum: E = row.iter().copied().sum();
            for v in row {
                *v = *v / sum;
            }
        }
        Ok(self.push(y, self.needs(x), Op::NormalizeRows { x }))
    }

    /// [N,C] -> [N], picking column idx[n] from row n.
    pub fn pick_per_row(&mut self, x: Var, idx: &[u32]) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(Error::shape(format!(
                "pick_per_row: x {s:?} with {} indices",
                idx.len()
            )));
        }
        if let Some(bad) = idx.iter().find(|&&i| i as usize >= s[1]) {
            return Err(Error::shape(format!("pick_per_row index {bad} out of {} columns", s[1])));
        }
        let mut y = Tensor::zeros(&[s[0]]);
        {
            let xd = self.value(x).data();
            let yd = y.data_mut();
            for (n, &i) in idx.iter().enumerate() {
                yd[n] = xd[n * s[1] + i as usize];
            }
        }
        Ok(self.push(y, self.needs(x), Op::PickPerRow { x, idx: idx.to_vec() }))
    }

    /// Constant-weighted sum of all elements -> scalar.
    pub fn weighted_sum(&mut self, x: Var, w: &[E]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} weights for {} elements",
                w.len(),
                self.value(x).len()
            )));
        }
        let s: E = self
            .value(x)
            .data()
            .iter()
            .zip(w)
            .map(|(&v, &wi)| v * wi)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            self.needs(x),
            Op::WeightedSumConst { x, w: w.to_vec() },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: E = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), self.needs(x), Op::SumAll { x })
    }

    // ---- backward ----

    /// Accumulate gradients of `loss` into every reachable requires_grad node.
    /// Calling twice without clearing accumulates (documented; the trainer
    /// rebuilds the tape each step instead).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // Leaf grads persist across calls (accumulation) and are pre-allocated
        // so unreachable leaves end up holding zeros, per the tensor contract.
        // Intermediate grads are scratch for this pass: dropped here, then
        // created lazily by the first contribution (a move when possible).
        for node in self.nodes.iter_mut() {
            if !node.needs {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if node.grad.is_none() {
                    node.grad = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].needs {
            return Ok(()); // loss doesn't depend on any requires_grad leaf
        }
        {
            let ln = &mut self.nodes[loss.0];
            match &mut ln.grad {
                Some(g) => g.data_mut()[0] = g.data()[0] + E::one(),
                None => {
                    let mut seed = Tensor::zeros(ln.value.shape());
                    seed.data_mut()[0] = E::one();
                    ln.grad = Some(seed);
                }
            }
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else { continue };
            backprop_one(node, g, before);
        }
        Ok(())
    }
}

fn sigmoid_scalar<E: Element>(v: E) -> E {
    // Stable in both tails.
    if v >= E::zero() {
        E::one() / (E::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::one() + e)
    }
}

fn add_into<E: Element>(dst: &mut Option<Tensor<E>>, shape: &[usize], f: impl FnOnce(&mut [E])) {
    if dst.is_none() {
        *dst = Some(Tensor::zeros(shape));
    }
    f(dst.as_mut().expect("just set").data_mut());
}

#[allow(clippy::too_many_lines)]
fn backprop_one<E: Element>(node: &Node<E>, g: &Tensor<E>, before: &mut [Node<E>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = {
                let s = before[a.0].value.shape();
                (s[0], s[1])
            };
            let n = before[b.0].value.shape()[1];
            if before[a.0].needs {
                // da = g . b^T
                let bd = before[b.0].value.data().to_vec();
                let na = &mut before[a.0];
                add_into(&mut na.grad, &[m, k], |ga| {
                    E::gemm(
                        m,
                        n,
                        k,
                        E::one(),
                        g.data(),
                        n as isize,
                        1,
                        &bd,
                        1,
                        n as isize,
                        E::one(),
                        ga,
                        k as isize,
                        1,
                    );
                });
            }
            if before[b.0].needs {
                // db = a^T . g
                let ad = before[a.0].value.data().to_vec();
                let nb = &mut before[b.0];
                add_into(&mut nb.grad, &[k, n], |gb| {
                    E::gemm(
                        k,
                        m,
                        n,
                        E::one(),
                        &ad,
                        1,
                        k as isize,
                        g.data(),
                        n as isize,
                        1,
                        E::one(),
                        gb,
                        n as isize,
                        1,
                    );
                });
            }
        }
        Op::Bmm { a, b, tb } => {
            let sa = before[a.0].value.shape().to_vec();
            let sb = before[b.0].value.shape().to_vec();
            let (bs, p, q) = (sa[0], sa[1], sa[2]);
            let r = g.shape()[2];
            if before[a.0].needs {
                let bd = before[b.0].value.data().to_vec();
                let na = &mut before[a.0];
                add_into(&mut na.grad, &sa, |ga| {
                    for i in 0..bs {
                        let gi = &g.data()[i * p * r..(i + 1) * p * r];
                        let bi = &bd[i * sb[1] * sb[2]..(i + 1) * sb[1] * sb[2]];
                        // tb=false: da = g . b^T ; tb=true: da = g . b
                        let (rsb, csb) = if *tb { (q as isize, 1) } else { (1, r as isize) };
                        E::gemm(
                            p,
                            r,
                            q,
                            E::one(),
                            gi,
                            r as isize,
                            1,
                            bi,
                            rsb,
                            csb,
                            E::one(),
                            &mut ga[i * p * q..(i + 1) * p * q],
                            q as isize,
                            1,
                        );
                    }
                });
            }
            if before[b.0].needs {
                let ad = before[a.0].value.data().to_vec();
                let nb = &mut before[b.0];
                add_into(&mut nb.grad, &sb, |gb| {
                    for i in 0..bs {
                        let gi = &g.data()[i * p * r..(i + 1) * p * r];
                        let ai = &ad[i * p * q..(i + 1) * p * q];
                        if *tb {
                            // y = a b^T => db = g^T a : [r,p]x[p,q]
                            E::gemm(
                                r,
                                p,
                                q,
                                E::one(),
                                gi,
                                1,
                                r as isize,
                                ai,
                                q as isize,
                                1,
                                E::one(),
                                &mut gb[i * r * q..(i + 1) * r * q],
                                q as isize,
                                1,
                            );
                        } else {
                            // db = a^T g : [q,p]x[p,r]
                            E::gemm(
                                q,
                                p,
                                r,
                                E::one(),
                                ai,
                                1,
                                q as isize,
                                gi,
                                r as isize,
                                1,
                                E::one(),
                                &mut gb[i * q * r..(i + 1) * q * r],
                                r as isize,
                                1,
                            );
                        }
                    }
                });
            }
        }
        Op::Conv1d { x, w, b, stride, pad } => {
            let need_dx = before[x.0].needs;
            let (dx, dw, db) = kernels::conv1d_backward(
                &before[x.0].value,
                &before[w.0].value,
                g,
                *stride,
                *pad,
                need_dx,
            );
            if let Some(dx) = dx {
                accumulate(&mut before[x.0], dx);
            }
            if before[w.0].needs {
                accumulate(&mut before[w.0], dw);
            }
            if before[b.0].needs {
                accumulate(&mut before[b.0], db);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let need_dx = before[x.0].needs;
            let (dx, dw, db) = kernels::conv2d_backward(
                &before[x.0].value,
                &before[w.0].value,
                g,
                *stride,
                *pad,
                need_dx,
            );
            if let Some(dx) = dx {
                accumulate(&mut before[x.0], dx);
            }
            if before[w.0].needs {
                accumulate(&mut before[w.0], dw);
            }
            if before[b.0].needs {
                accumulate(&mut before[b.0], db);
            }
        }
        Op::Relu { x } => {
            unary_bwd(before, *x, g, |xv, _yv, gv| {
                if xv > E::zero() {
                    gv
                } else {
                    E::zero()
                }
            }, &node.value);
        }
        Op::Tanh { x } => {
            unary_bwd(before, *x, g, |_xv, yv, gv| gv * (E::one() - yv * yv), &node.value);
        }
        Op::Sigmoid { x } => {
            unary_bwd(before, *x, g, |_xv, yv, gv| gv * yv * (E::one() - yv), &node.value);
        }
        Op::Softplus { x } => {
            unary_bwd(before, *x, g, |xv, _yv, gv| gv * sigmoid_scalar(xv), &node.value);
        }
        Op::SoftmaxLast { x } => {
            let row = *node.value.shape().last().expect("rank >= 1");
            let xn = &mut before[x.0];
            if xn.needs {
                let shape = xn.value.shape().to_vec();
                add_into(&mut xn.grad, &shape, |gx| {
                    for (ri, (gr, pr)) in g
                        .data()
                        .chunks_exact(row)
                        .zip(node.value.data().chunks_exact(row))
                        .enumerate()
                    {
                        let dot: E = gr.iter().zip(pr).map(|(&gv, &pv)| gv * pv).sum();
                        for j in 0..row {
                            gx[ri * row + j] = gx[ri * row + j] + pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
        }
        Op::LogSoftmaxLast { x } => {
            let row = *node.value.shape().last().expect("rank >= 1");
            let xn = &mut before[x.0];
            if xn.needs {
                let shape = xn.value.shape().to_vec();
                add_into(&mut xn.grad, &shape, |gx| {
                    for (ri, (gr, lr)) in g
                        .data()
                        .chunks_exact(row)
                        .zip(node.value.data().chunks_exact(row))
                        .enumerate()
                    {
                        let gsum: E = gr.iter().copied().sum();
                        for j in 0..row {
                            gx[ri * row + j] =
                                gx[ri * row + j] + gr[j] - lr[j].exp() * gsum;
                        }
                    }
                });
            }
        }
        Op::BatchnormTrain { x, gamma, beta, mean, invstd } => {
            let s = before[x.0].value.shape().to_vec();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let m_count = E::from_real((n * hw) as f64);
            // Per-channel reductions of g and g*xhat.
            let mut sum_g = vec![E::zero(); c];
            let mut sum_gx = vec![E::zero(); c];
            {
                let xd = before[x.0].value.data();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (mu, is) = (mean[ci], invstd[ci]);
                        for i in base..base + hw {
                            let xhat = (xd[i] - mu) * is;
                            sum_g[ci] = sum_g[ci] + g.data()[i];
                            sum_gx[ci] = sum_gx[ci] + g.data()[i] * xhat;
                        }
                    }
                }
            }
            if before[gamma.0].needs {
                accumulate(
                    &mut before[gamma.0],
                    Tensor::new(&[c], sum_gx.clone()).expect("shape"),
                );
            }
            if before[beta.0].needs {
                accumulate(
                    &mut before[beta.0],
                    Tensor::new(&[c], sum_g.clone()).expect("shape"),
                );
            }
            if before[x.0].needs {
                let gd = before[gamma.0].value.data().to_vec();
                let xn = &mut before[x.0];
                let (value, grad) = (&xn.value, &mut xn.grad);
                add_into(grad, &s, |gx| {
                    let xd = value.data();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let (mu, is, ga) = (mean[ci], invstd[ci], gd[ci]);
                            let coeff = ga * is / m_count;
                            for i in base..base + hw {
                                let xhat = (xd[i] - mu) * is;
                                gx[i] = gx[i]
                                    + coeff
                                        * (m_count * g.data()[i] - sum_g[ci] - xhat * sum_gx[ci]);
                            }
                        }
                    }
                });
            }
        }
        Op::BatchnormEval { x, gamma, beta, mean, invstd } => {
            let s = before[x.0].value.shape().to_vec();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let mut sum_g = vec![E::zero(); c];
            let mut sum_gx = vec![E::zero(); c];
            {
                let xd = before[x.0].value.data();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in base..base + hw {
                            sum_g[ci] = sum_g[ci] + g.data()[i];
                            sum_gx[ci] = sum_gx[ci] + g.data()[i] * (xd[i] - mean[ci]) * invstd[ci];
                        }
                    }
                }
            }
            if before[gamma.0].needs {
                accumulate(&mut before[gamma.0], Tensor::new(&[c], sum_gx).expect("shape"));
            }
            if before[beta.0].needs {
                accumulate(&mut before[beta.0], Tensor::new(&[c], sum_g).expect("shape"));
            }
            if before[x.0].needs {
                let gd = before[gamma.0].value.data().to_vec();
                let xn = &mut before[x.0];
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let f = gd[ci] * invstd[ci];
                            for i in base..base + hw {
                                gx[i] = gx[i] + g.data()[i] * f;
                            }
                        }
                    }
                });
            }
        }
        Op::BnReluPoolTrain { x, gamma, beta, mean, invstd, argmax } => {
            let s = before[x.0].value.shape().to_vec();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let hw_out = node.value.shape()[2] * node.value.shape()[3];
            let gd = before[gamma.0].value.data().to_vec();
            let bd = before[beta.0].value.data().to_vec();
            let (sum_g, sum_gx, gate) = kernels::bn_relu_pool_sums(
                before[x.0].value.data(),
                g.data(),
                argmax,
                &gd,
                &bd,
                mean,
                invstd,
                c,
                hw_out,
            );
            if before[gamma.0].needs {
                accumulate(
                    &mut before[gamma.0],
                    Tensor::new(&[c], sum_gx.clone()).expect("shape"),
                );
            }
            if before[beta.0].needs {
                accumulate(
                    &mut before[beta.0],
                    Tensor::new(&[c], sum_g.clone()).expect("shape"),
                );
            }
            if before[x.0].needs {
                let xn = &mut before[x.0];
                let (value, grad) = (&xn.value, &mut xn.grad);
                add_into(grad, &s, |gx| {
                    kernels::bn_relu_pool_dx_train(
                        value.data(),
                        g.data(),
                        argmax,
                        &gate,
                        &gd,
                        mean,
                        invstd,
                        n,
                        c,
                        hw,
                        hw_out,
                        &sum_g,
                        &sum_gx,
                        gx,
                    );
                });
            }
        }
        Op::BnReluPoolEval { x, gamma, beta, mean, invstd, argmax } => {
            let s = before[x.0].value.shape().to_vec();
            let c = s[1];
            let hw_out = node.value.shape()[2] * node.value.shape()[3];
            let gd = before[gamma.0].value.data().to_vec();
            let bd = before[beta.0].value.data().to_vec();
            let (sum_g, sum_gx, gate) = kernels::bn_relu_pool_sums(
                before[x.0].value.data(),
                g.data(),
                argmax,
                &gd,
                &bd,
                mean,
                invstd,
                c,
                hw_out,
            );
            if before[gamma.0].needs {
                accumulate(&mut before[gamma.0], Tensor::new(&[c], sum_gx).expect("shape"));
            }
            if before[beta.0].needs {
                accumulate(&mut before[beta.0], Tensor::new(&[c], sum_g).expect("shape"));
            }
            if before[x.0].needs {
                let xn = &mut before[x.0];
                add_into(&mut xn.grad, &s, |gx| {
                    for (o, (&src, &gt)) in argmax.iter().zip(&gate).enumerate() {
                        if gt == 1 {
                            let ci = (o / hw_out) % c;
                            gx[src as usize] =
                                gx[src as usize] + gd[ci] * invstd[ci] * g.data()[o];
                        }
                    }
                });
            }
        }
        Op::Dropout { x, factors } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let shape = xn.value.shape().to_vec();
                add_into(&mut xn.grad, &shape, |gx| {
                    for (i, f) in factors.iter().enumerate() {
                        gx[i] = gx[i] + g.data()[i] * *f;
                    }
                });
            }
        }
        Op::MaxPool2d { x, argmax } | Op::GlobalMax2d { x, argmax } | Op::MaxChan { x, argmax } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let shape = xn.value.shape().to_vec();
                add_into(&mut xn.grad, &shape, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src as usize] = gx[src as usize] + g.data()[o];
                    }
                });
            }
        }
        Op::GlobalAvg2d { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec();
                let hw = s[2] * s[3];
                let inv = E::from_real(1.0 / hw as f64);
                add_into(&mut xn.grad, &s, |gx| {
                    for nc in 0..s[0] * s[1] {
                        let gv = g.data()[nc] * inv;
                        for v in &mut gx[nc * hw..(nc + 1) * hw] {
                            *v = *v + gv;
                        }
                    }
                });
            }
        }
        Op::MeanChan { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let inv = E::from_real(1.0 / c as f64);
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gx[base + i] = gx[base + i] + g.data()[ni * hw + i] * inv;
                            }
                        }
                    }
                });
            }
        }
        Op::AdaptiveAvg1d { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec();
                let (n, c, l) = (s[0], s[1], s[2]);
                let t_out = *node.value.shape().last().expect("rank 3");
                add_into(&mut xn.grad, &s, |gx| {
                    for nc in 0..n * c {
                        for t in 0..t_out {
                            let (a, b) = (t * l / t_out, (t + 1) * l / t_out);
                            let gv = g.data()[nc * t_out + t] * E::from_real(1.0 / (b - a) as f64);
                            for v in &mut gx[nc * l + a..nc * l + b] {
                                *v = *v + gv;
                            }
                        }
                    }
                });
            }
        }
        Op::MeanAxis1 { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec();
                let (n, t, d) = (s[0], s[1], s[2]);
                let inv = E::from_real(1.0 / t as f64);
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for ti in 0..t {
                            let base = (ni * t + ti) * d;
                            for di in 0..d {
                                gx[base + di] = gx[base + di] + g.data()[ni * d + di] * inv;
                            }
                        }
                    }
                });
            }
        }
        Op::AddBiasRow { x, b } => {
            let cols = before[b.0].value.len();
            if before[x.0].needs {
                let xn = &mut before[x.0];
                let shape = xn.value.shape().to_vec();
                add_into(&mut xn.grad, &shape, |gx| {
                    for (v, gv) in gx.iter_mut().zip(g.data()) {
                        *v = *v + *gv;
                    }
                });
            }
            if before[b.0].needs {
                let bn = &mut before[b.0];
                add_into(&mut bn.grad, &[cols], |gb| {
                    for row in g.data().chunks_exact(cols) {
                        for (v, gv) in gb.iter_mut().zip(row) {
                            *v = *v + *gv;
                        }
                    }
                });
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                let vn = &mut before[v.0];
                if vn.needs {
                    let shape = vn.value.shape().to_vec();
                    add_into(&mut vn.grad, &shape, |gv| {
                        for (x, gg) in gv.iter_mut().zip(g.data()) {
                            *x = *x + *gg;
                        }
                    });
                }
            }
        }
        Op::MulElem { a, b } => {
            if a == b {
                // d(x*x) = 2x g
                let an = &mut before[a.0];
                if an.needs {
                    let shape = an.value.shape().to_vec();
                    let vals = an.value.data().to_vec();
                    add_into(&mut an.grad, &shape, |ga| {
                        for i in 0..vals.len() {
                            ga[i] = ga[i] + E::from_real(2.0) * vals[i] * g.data()[i];
                        }
                    });
                }
            } else {
                if before[a.0].needs {
                    let bv = before[b.0].value.data().to_vec();
                    let an = &mut before[a.0];
                    let shape = an.value.shape().to_vec();
                    add_into(&mut an.grad, &shape, |ga| {
                        for i in 0..bv.len() {
                            ga[i] = ga[i] + bv[i] * g.data()[i];
                        }
                    });
                }
                if before[b.0].needs {
                    let av = before[a.0].value.data().to_vec();
                    let bn = &mut before[b.0];
                    let shape = bn.value.shape().to_vec();
                    add_into(&mut bn.grad, &shape, |gb| {
                        for i in 0..av.len() {
                            gb[i] = gb[i] + av[i] * g.data()[i];
                        }
                    });
                }
            }
        }
        Op::Affine { x, mul } => {
            let m = *mul;
            unary_bwd(before, *x, g, move |_x, _y, gv| gv * m, &node.value);
        }
        Op::PowConst { x, p } => {
            let p = *p;
            unary_bwd(
                before,
                *x,
                g,
                move |xv, _yv, gv| {
                    if xv == E::zero() {
                        E::zero() // subgradient choice at the boundary
                    } else {
                        gv * p * xv.powf(p - E::one())
                    }
                },
                &node.value,
            );
        }
        Op::Log { x } => {
            unary_bwd(before, *x, g, |xv, _yv, gv| gv / xv, &node.value);
        }
        Op::Exp { x } => {
            unary_bwd(before, *x, g, |_xv, yv, gv| gv * yv, &node.value);
        }
        Op::XLogX { x } => {
            unary_bwd(
                before,
                *x,
                g,
                |xv, _yv, gv| {
                    if xv == E::zero() {
                        E::zero()
                    } else {
                        gv * (xv.ln() + E::one())
                    }
                },
                &node.value,
            );
        }
        Op::ClampRange { x, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            unary_bwd(
                before,
                *x,
                g,
                move |xv, _yv, gv| {
                    if xv > lo && xv < hi {
                        gv
                    } else {
                        E::zero()
                    }
                },
                &node.value,
            );
        }
        Op::MulChanMask { x, m } => {
            let s = before[x.0].value.shape().to_vec();
            let hw = s[2] * s[3];
            if before[x.0].needs {
                let md = before[m.0].value.data().to_vec();
                let xn = &mut before[x.0];
                add_into(&mut xn.grad, &s, |gx| {
                    for nc in 0..s[0] * s[1] {
                        let f = md[nc];
                        for i in nc * hw..(nc + 1) * hw {
                            gx[i] = gx[i] + g.data()[i] * f;
                        }
                    }
                });
            }
            if before[m.0].needs {
                let xd = before[x.0].value.data().to_vec();
                let mn = &mut before[m.0];
                add_into(&mut mn.grad, &[s[0], s[1]], |gm| {
                    for nc in 0..s[0] * s[1] {
                        let mut acc = E::zero();
                        for i in nc * hw..(nc + 1) * hw {
                            acc = acc + g.data()[i] * xd[i];
                        }
                        gm[nc] = gm[nc] + acc;
                    }
                });
            }
        }
        Op::MulSpatMask { x, m } => {
            let s = before[x.0].value.shape().to_vec();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            if before[x.0].needs {
                let md = before[m.0].value.data().to_vec();
                let xn = &mut before[x.0];
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gx[base + i] = gx[base + i] + g.data()[base + i] * md[ni * hw + i];
                            }
                        }
                    }
                });
            }
            if before[m.0].needs {
                let xd = before[x.0].value.data().to_vec();
                let mn = &mut before[m.0];
                add_into(&mut mn.grad, &[n, 1, s[2], s[3]], |gm| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                gm[ni * hw + i] = gm[ni * hw + i] + g.data()[base + i] * xd[base + i];
                            }
                        }
                    }
                });
            }
        }
        Op::Transpose12 { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec(); // [N,A,B]
                let (n, a, b) = (s[0], s[1], s[2]);
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for ai in 0..a {
                            for bi in 0..b {
                                gx[(ni * a + ai) * b + bi] =
                                    gx[(ni * a + ai) * b + bi] + g.data()[(ni * b + bi) * a + ai];
                            }
                        }
                    }
                });
            }
        }
        Op::SplitHeads { x, h } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec(); // [N,T,h*d]
                let (n, t, hd) = (s[0], s[1], s[2]);
                let d = hd / h;
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for hi in 0..*h {
                            for ti in 0..t {
                                let src = ((ni * h + hi) * t + ti) * d;
                                let dst = (ni * t + ti) * hd + hi * d;
                                for j in 0..d {
                                    gx[dst + j] = gx[dst + j] + g.data()[src + j];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::MergeHeads { x, h } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec(); // [N*h,T,d]
                let (nh, t, d) = (s[0], s[1], s[2]);
                let n = nh / h;
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for hi in 0..*h {
                            for ti in 0..t {
                                let dst = ((ni * h + hi) * t + ti) * d;
                                let src = (ni * t + ti) * (h * d) + hi * d;
                                for j in 0..d {
                                    gx[dst + j] = gx[dst + j] + g.data()[src + j];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::MeanHeads { x, h } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec(); // [N*h,T,U]
                let tu = s[1] * s[2];
                let n = s[0] / h;
                let inv = E::from_real(1.0 / *h as f64);
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..n {
                        for hi in 0..*h {
                            let base = (ni * h + hi) * tu;
                            for i in 0..tu {
                                gx[base + i] = gx[base + i] + g.data()[ni * tu + i] * inv;
                            }
                        }
                    }
                });
            }
        }
        Op::StackPair { a, b } => {
            let d = before[a.0].value.shape()[1];
            let n = before[a.0].value.shape()[0];
            for (vi, v) in [a, b].into_iter().enumerate() {
                let vn = &mut before[v.0];
                if vn.needs {
                    add_into(&mut vn.grad, &[n, d], |gv| {
                        for ni in 0..n {
                            let src = (ni * 2 + vi) * d;
                            for j in 0..d {
                                gv[ni * d + j] = gv[ni * d + j] + g.data()[src + j];
                            }
                        }
                    });
                }
            }
        }
        Op::SliceAxis1 { x, idx } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec();
                let (t, d) = (s[1], s[2]);
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..s[0] {
                        let dst = (ni * t + idx) * d;
                        for j in 0..d {
                            gx[dst + j] = gx[dst + j] + g.data()[ni * d + j];
                        }
                    }
                });
            }
        }
        Op::ConcatLast { a, b } => {
            let (d1, d2) = (before[a.0].value.shape()[1], before[b.0].value.shape()[1]);
            let n = before[a.0].value.shape()[0];
            if before[a.0].needs {
                let an = &mut before[a.0];
                add_into(&mut an.grad, &[n, d1], |ga| {
                    for ni in 0..n {
                        for j in 0..d1 {
                            ga[ni * d1 + j] = ga[ni * d1 + j] + g.data()[ni * (d1 + d2) + j];
                        }
                    }
                });
            }
            if before[b.0].needs {
                let bn = &mut before[b.0];
                add_into(&mut bn.grad, &[n, d2], |gb| {
                    for ni in 0..n {
                        for j in 0..d2 {
                            gb[ni * d2 + j] = gb[ni * d2 + j] + g.data()[ni * (d1 + d2) + d1 + j];
                        }
                    }
                });
            }
        }
        Op::ChanConcat { a, b } => {
            let sa = before[a.0].value.shape().to_vec();
            let sb = before[b.0].value.shape().to_vec();
            let (n, c1, c2, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
            if before[a.0].needs {
                let an = &mut before[a.0];
                add_into(&mut an.grad, &sa, |ga| {
                    for ni in 0..n {
                        let src = ni * (c1 + c2) * hw;
                        for j in 0..c1 * hw {
                            ga[ni * c1 * hw + j] = ga[ni * c1 * hw + j] + g.data()[src + j];
                        }
                    }
                });
            }
            if before[b.0].needs {
                let bn = &mut before[b.0];
                add_into(&mut bn.grad, &sb, |gb| {
                    for ni in 0..n {
                        let src = ni * (c1 + c2) * hw + c1 * hw;
                        for j in 0..c2 * hw {
                            gb[ni * c2 * hw + j] = gb[ni * c2 * hw + j] + g.data()[src + j];
                        }
                    }
                });
            }
        }
        Op::Reshape { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let shape = xn.value.shape().to_vec();
                add_into(&mut xn.grad, &shape, |gx| {
                    for (v, gg) in gx.iter_mut().zip(g.data()) {
                        *v = *v + *gg;
                    }
                });
            }
        }
        Op::NormalizeRows { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec();
                let d = s[1];
                let xd = xn.value.data().to_vec();
                add_into(&mut xn.grad, &s, |gx| {
                    for ni in 0..s[0] {
                        let row = &xd[ni * d..(ni + 1) * d];
                        let sum: E = row.iter().copied().sum();
                        let yrow: Vec<E> = row.iter().map(|&v| v / sum).collect();
                        let dot: E = g.data()[ni * d..(ni + 1) * d]
                            .iter()
                            .zip(&yrow)
                            .map(|(&gv, &yv)| gv * yv)
                            .sum();
                        for j in 0..d {
                            gx[ni * d + j] =
                                gx[ni * d + j] + (g.data()[ni * d + j] - dot) / sum;
                        }
                    }
                });
            }
        }
        Op::PickPerRow { x, idx } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let s = xn.value.shape().to_vec();
                let c = s[1];
                add_into(&mut xn.grad, &s, |gx| {
                    for (n, &i) in idx.iter().enumerate() {
                        gx[n * c + i as usize] = gx[n * c + i as usize] + g.data()[n];
                    }
                });
            }
        }
        Op::WeightedSumConst { x, w } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let shape = xn.value.shape().to_vec();
                let gv = g.data()[0];
                add_into(&mut xn.grad, &shape, |gx| {
                    for (v, wi) in gx.iter_mut().zip(w) {
                        *v = *v + gv * *wi;
                    }
                });
            }
        }
        Op::SumAll { x } => {
            let xn = &mut before[x.0];
            if xn.needs {
                let shape = xn.value.shape().to_vec();
                let gv = g.data()[0];
                add_into(&mut xn.grad, &shape, |gx| {
                    for v in gx.iter_mut() {
                        *v = *v + gv;
                    }
                });
            }
        }
    }
}

fn accumulate<E: Element>(node: &mut Node<E>, delta: Tensor<E>) {
    match &mut node.grad {
        Some(g) => {
            for (v, d) in g.data_mut().iter_mut().zip(delta.data()) {
                *v = *v + *d;
            }
        }
        None => node.grad = Some(delta),
    }
}

fn unary_bwd<E: Element>(
    before: &mut [Node<E>],
    x: Var,
    g: &Tensor<E>,
    df: impl Fn(E, E, E) -> E,
    y: &Tensor<E>,
) {
    let xn = &mut before[x.0];
    if !xn.needs {
        return;
    }
    let shape = xn.value.shape().to_vec();
    let (value, grad) = (&xn.value, &mut xn.grad);
    add_into(grad, &shape, |gx| {
        let xv = value.data();
        for i in 0..xv.len() {
            gx[i] = gx[i] + df(xv[i], y.data()[i], g.data()[i]);
        }
    });
}
