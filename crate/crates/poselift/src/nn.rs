//! Neural network layer ops and layer containers.
//!
//! Layouts used throughout:
//!
//! * temporal activations: `[B, C, T]`, row-major (frame index fastest);
//! * feature activations: `[B, C]`;
//! * conv weights: `[C_out, C_in, K]`; dense weights: `[D_out, D_in]`.
//!
//! Convolutions are *valid* (no padding): a kernel of width `K` with
//! dilation `d` shrinks `T` by `(K-1)*d`. The temporal encoders rely on this
//! to reduce a full window to exactly one frame, so the op errors out rather
//! than pad when the input is too short.
//!
//! Batch norm follows the usual convention pair: normalization uses the
//! biased batch variance, running statistics are updated with the unbiased
//! one. Training-mode statistics over fewer than two samples are undefined
//! and rejected.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::rng::DropoutStream;
use crate::tensor::{BackwardOp, Node, Tensor};

/// Forward-pass mode. Training mode needs a dropout stream so masks are
/// drawn from a replayable sequence; eval mode uses running statistics and
/// disables dropout.
#[derive(Clone, Copy)]
pub enum Phase<'a> {
    Train { dropout: &'a DropoutStream },
    Eval,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    assert!(fan_in > 0, "fan_in must be positive");
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

struct Conv1dDims {
    b: usize,
    cin: usize,
    cout: usize,
    t: usize,
    tp: usize,
    k: usize,
    d: usize,
}

struct Conv1dBack {
    dims: Conv1dDims,
}

impl BackwardOp for Conv1dBack {
    fn name(&self) -> &'static str {
        "conv1d"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let Conv1dDims { b, cin, cout, t, tp, k, d } = self.dims;
        let x = node.parents[0].data();
        let w = node.parents[1].data();

        let gx = node.parents[0].is_tracked().then(|| {
            let mut gx = vec![0.0; b * cin * t];
            for bi in 0..b {
                for co in 0..cout {
                    let g_row = &grad[(bi * cout + co) * tp..(bi * cout + co + 1) * tp];
                    for ci in 0..cin {
                        let gx_row = &mut gx[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                        for ki in 0..k {
                            let wv = w[(co * cin + ci) * k + ki];
                            let off = ki * d;
                            for ti in 0..tp {
                                gx_row[off + ti] += wv * g_row[ti];
                            }
                        }
                    }
                }
            }
            gx
        });

        let gw = node.parents[1].is_tracked().then(|| {
            let mut gw = vec![0.0; cout * cin * k];
            for bi in 0..b {
                for co in 0..cout {
                    let g_row = &grad[(bi * cout + co) * tp..(bi * cout + co + 1) * tp];
                    for ci in 0..cin {
                        let x_row = &x[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                        for ki in 0..k {
                            let off = ki * d;
                            let mut acc = 0.0;
                            for ti in 0..tp {
                                acc += g_row[ti] * x_row[off + ti];
                            }
                            gw[(co * cin + ci) * k + ki] += acc;
                        }
                    }
                }
            }
            gw
        });

        let gb = node.parents[2].is_tracked().then(|| {
            let mut gb = vec![0.0; cout];
            for bi in 0..b {
                for co in 0..cout {
                    let g_row = &grad[(bi * cout + co) * tp..(bi * cout + co + 1) * tp];
                    gb[co] += g_row.iter().sum::<f64>();
                }
            }
            gb
        });

        vec![gx, gw, gb]
    }
}

/// Valid (unpadded) dilated 1-D convolution.
///
/// `x` is `[B, C_in, T]` or `[C_in, T]`; `w` is `[C_out, C_in, K]`; `b` is
/// `[C_out]`. Output has `T' = T - (K-1)*dilation` frames and matches the
/// input's rank.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, dilation: usize) -> Result<Tensor> {
    if dilation == 0 {
        return Err(config_err!("conv1d dilation must be >= 1"));
    }
    let (batch, cin, t, batched) = match *x.shape() {
        [bi, ci, ti] => (bi, ci, ti, true),
        [ci, ti] => (1, ci, ti, false),
        ref s => return Err(config_err!("conv1d input must be [B, C, T] or [C, T], got {s:?}")),
    };
    let [cout, wcin, k] = *w.shape() else {
        return Err(config_err!("conv1d weight must be [C_out, C_in, K], got {:?}", w.shape()));
    };
    if wcin != cin {
        return Err(config_err!(
            "conv1d channel mismatch: input has {cin}, weight expects {wcin}"
        ));
    }
    if b.shape() != [cout] {
        return Err(config_err!(
            "conv1d bias shape {:?} does not match {cout} output channels",
            b.shape()
        ));
    }
    let span = (k - 1) * dilation;
    if t <= span {
        return Err(config_err!(
            "conv1d: {t} frames too short for kernel {k} with dilation {dilation} \
             (needs more than {span})"
        ));
    }
    let tp = t - span;

    let mut out = vec![0.0; batch * cout * tp];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        for bi in 0..batch {
            for co in 0..cout {
                let y_row = &mut out[(bi * cout + co) * tp..(bi * cout + co + 1) * tp];
                y_row.fill(bd[co]);
                for ci in 0..cin {
                    let x_row = &xd[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                    for ki in 0..k {
                        let wv = wd[(co * cin + ci) * k + ki];
                        let xs = &x_row[ki * dilation..ki * dilation + tp];
                        for ti in 0..tp {
                            y_row[ti] += wv * xs[ti];
                        }
                    }
                }
            }
        }
    }

    let shape = if batched { vec![batch, cout, tp] } else { vec![cout, tp] };
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(Conv1dBack {
            dims: Conv1dDims { b: batch, cin, cout, t, tp, k, d: dilation },
        }),
    ))
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

struct DenseBack {
    b: usize,
    din: usize,
    dout: usize,
}

impl BackwardOp for DenseBack {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let DenseBack { b, din, dout } = *self;
        let x = node.parents[0].data();
        let w = node.parents[1].data();

        let gx = node.parents[0].is_tracked().then(|| {
            let mut gx = vec![0.0; b * din];
            for bi in 0..b {
                for o in 0..dout {
                    let g = grad[bi * dout + o];
                    let w_row = &w[o * din..(o + 1) * din];
                    let gx_row = &mut gx[bi * din..(bi + 1) * din];
                    for i in 0..din {
                        gx_row[i] += g * w_row[i];
                    }
                }
            }
            gx
        });

        let gw = node.parents[1].is_tracked().then(|| {
            let mut gw = vec![0.0; dout * din];
            for bi in 0..b {
                let x_row = &x[bi * din..(bi + 1) * din];
                for o in 0..dout {
                    let g = grad[bi * dout + o];
                    let gw_row = &mut gw[o * din..(o + 1) * din];
                    for i in 0..din {
                        gw_row[i] += g * x_row[i];
                    }
                }
            }
            gw
        });

        let gb = node.parents[2].is_tracked().then(|| {
            let mut gb = vec![0.0; dout];
            for bi in 0..b {
                for o in 0..dout {
                    gb[o] += grad[bi * dout + o];
                }
            }
            gb
        });

        vec![gx, gw, gb]
    }
}

/// Affine layer `y = x W^T + b`. `x` is `[B, D_in]` or `[D_in]`; `w` is
/// `[D_out, D_in]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, din, batched) = match *x.shape() {
        [bi, di] => (bi, di, true),
        [di] => (1, di, false),
        ref s => return Err(config_err!("dense input must be [B, D] or [D], got {s:?}")),
    };
    let [dout, wdin] = *w.shape() else {
        return Err(config_err!("dense weight must be [D_out, D_in], got {:?}", w.shape()));
    };
    if wdin != din {
        return Err(config_err!(
            "dense dim mismatch: input has {din}, weight expects {wdin}"
        ));
    }
    if b.shape() != [dout] {
        return Err(config_err!(
            "dense bias shape {:?} does not match {dout} outputs",
            b.shape()
        ));
    }

    let mut out = vec![0.0; batch * dout];
    {
        let xd = x.data();
        let wd = w.data();
        let bd = b.data();
        for bi in 0..batch {
            let x_row = &xd[bi * din..(bi + 1) * din];
            let y_row = &mut out[bi * dout..(bi + 1) * dout];
            for o in 0..dout {
                let w_row = &wd[o * din..(o + 1) * din];
                let mut acc = bd[o];
                for i in 0..din {
                    acc += w_row[i] * x_row[i];
                }
                y_row[o] = acc;
            }
        }
    }

    let shape = if batched { vec![batch, dout] } else { vec![dout] };
    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(DenseBack { b: batch, din, dout }),
    ))
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct BnDims {
    b: usize,
    c: usize,
    t: usize, // 1 for feature layout
}

impl BnDims {
    fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [b, c] => Ok(BnDims { b, c, t: 1 }),
            [b, c, t] => Ok(BnDims { b, c, t }),
            ref s => Err(config_err!("batch norm expects [B, C] or [B, C, T], got {s:?}")),
        }
    }

    /// Samples per channel.
    fn n(&self) -> usize {
        self.b * self.t
    }

    /// Flat index of sample `n` in channel `c`.
    #[inline]
    fn idx(&self, c: usize, n: usize) -> usize {
        let (bi, ti) = (n / self.t, n % self.t);
        (bi * self.c + c) * self.t + ti
    }
}

struct BnTrainBack {
    dims: BnDims,
    xhat: Vec<f64>,
    inv_std: Vec<f64>, // per channel
}

impl BackwardOp for BnTrainBack {
    fn name(&self) -> &'static str {
        "batch_norm(train)"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let dims = self.dims;
        let n = dims.n() as f64;
        let gamma = node.parents[1].data();

        let mut gx = node.parents[0].is_tracked().then(|| vec![0.0; grad.len()]);
        let mut gg = node.parents[1].is_tracked().then(|| vec![0.0; dims.c]);
        let mut gb = node.parents[2].is_tracked().then(|| vec![0.0; dims.c]);

        for c in 0..dims.c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for s in 0..dims.n() {
                let i = dims.idx(c, s);
                sum_g += grad[i];
                sum_gx += grad[i] * self.xhat[i];
            }
            if let Some(gb) = gb.as_mut() {
                gb[c] = sum_g;
            }
            if let Some(gg) = gg.as_mut() {
                gg[c] = sum_gx;
            }
            if let Some(gx) = gx.as_mut() {
                // dL/dx through the batch statistics:
                // dx = inv_std/N * gamma * (N*g - sum(g) - xhat * sum(g*xhat))
                let scale = gamma[c] * self.inv_std[c] / n;
                for s in 0..dims.n() {
                    let i = dims.idx(c, s);
                    gx[i] = scale * (n * grad[i] - sum_g - self.xhat[i] * sum_gx);
                }
            }
        }
        vec![gx, gg, gb]
    }
}

/// Training-mode batch norm output plus the batch statistics needed to
/// update running estimates.
pub struct BnTrainOut {
    pub out: Tensor,
    pub mean: Vec<f64>,
    /// Biased (divide by N) variance used for the normalization itself.
    pub var_biased: Vec<f64>,
}

/// Batch norm using batch statistics. Fails when fewer than two samples per
/// channel are available (variance undefined).
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<BnTrainOut> {
    let dims = BnDims::from_shape(x.shape())?;
    check_bn_params(dims.c, gamma, beta)?;
    if dims.n() < 2 {
        return Err(config_err!(
            "batch norm in training mode needs at least 2 samples per channel, got {}",
            dims.n()
        ));
    }

    let n = dims.n() as f64;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();

    let mut mean = vec![0.0; dims.c];
    let mut var = vec![0.0; dims.c];
    let mut inv_std = vec![0.0; dims.c];
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];

    for c in 0..dims.c {
        let mut acc = 0.0;
        for s in 0..dims.n() {
            acc += xd[dims.idx(c, s)];
        }
        mean[c] = acc / n;
        let mut vacc = 0.0;
        for s in 0..dims.n() {
            let d = xd[dims.idx(c, s)] - mean[c];
            vacc += d * d;
        }
        var[c] = vacc / n;
        inv_std[c] = 1.0 / (var[c] + eps).sqrt();
        for s in 0..dims.n() {
            let i = dims.idx(c, s);
            xhat[i] = (xd[i] - mean[c]) * inv_std[c];
            out[i] = gd[c] * xhat[i] + bd[c];
        }
    }
    drop((xd, gd, bd));

    let out = Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(BnTrainBack { dims, xhat, inv_std }),
    );
    Ok(BnTrainOut { out, mean, var_biased: var })
}

struct BnEvalBack {
    dims: BnDims,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BackwardOp for BnEvalBack {
    fn name(&self) -> &'static str {
        "batch_norm(eval)"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let dims = self.dims;
        let x = node.parents[0].data();
        let gamma = node.parents[1].data();

        let mut gx = node.parents[0].is_tracked().then(|| vec![0.0; grad.len()]);
        let mut gg = node.parents[1].is_tracked().then(|| vec![0.0; dims.c]);
        let mut gb = node.parents[2].is_tracked().then(|| vec![0.0; dims.c]);

        for c in 0..dims.c {
            for s in 0..dims.n() {
                let i = dims.idx(c, s);
                if let Some(gx) = gx.as_mut() {
                    gx[i] = grad[i] * gamma[c] * self.inv_std[c];
                }
                if let Some(gg) = gg.as_mut() {
                    gg[c] += grad[i] * (x[i] - self.mean[c]) * self.inv_std[c];
                }
                if let Some(gb) = gb.as_mut() {
                    gb[c] += grad[i];
                }
            }
        }
        vec![gx, gg, gb]
    }
}

/// Inference-mode batch norm: normalizes with the supplied running
/// statistics, which are treated as constants.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let dims = BnDims::from_shape(x.shape())?;
    check_bn_params(dims.c, gamma, beta)?;
    if running_mean.len() != dims.c || running_var.len() != dims.c {
        return Err(config_err!(
            "batch norm running stats cover {} channels, input has {}",
            running_mean.len(),
            dims.c
        ));
    }

    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; xd.len()];
    for c in 0..dims.c {
        for s in 0..dims.n() {
            let i = dims.idx(c, s);
            out[i] = gd[c] * (xd[i] - running_mean[c]) * inv_std[c] + bd[c];
        }
    }
    drop((xd, gd, bd));

    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(BnEvalBack { dims, mean: running_mean.to_vec(), inv_std }),
    ))
}

fn check_bn_params(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(config_err!(
            "batch norm params gamma {:?} / beta {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// activations / dropout
// ---------------------------------------------------------------------------

struct LeakyReluBack {
    slope: f64,
}

impl BackwardOp for LeakyReluBack {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let x = node.parents[0].data();
        let gx = grad
            .iter()
            .zip(x.iter())
            .map(|(g, x)| if *x >= 0.0 { *g } else { g * self.slope })
            .collect();
        vec![Some(gx)]
    }
}

/// `max(x, slope * x)` for `0 < slope < 1`; the gradient at exactly zero
/// takes the positive branch.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    let out = x
        .data()
        .iter()
        .map(|v| if *v >= 0.0 { *v } else { v * slope })
        .collect();
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(LeakyReluBack { slope }),
    )
}

struct DropoutBack {
    mask: Vec<f64>,
}

impl BackwardOp for DropoutBack {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, grad: &[f64], _node: &Node) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().zip(&self.mask).map(|(g, m)| g * m).collect())]
    }
}

/// Inverted dropout: kept elements are scaled by `1/(1-rate)` so the
/// expected activation is unchanged. Identity in eval mode and at rate 0.
pub fn dropout(x: &Tensor, rate: f64, phase: &Phase) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(config_err!("dropout rate must be in [0, 1), got {rate}"));
    }
    let stream = match phase {
        Phase::Train { dropout } if rate > 0.0 => dropout,
        _ => return Ok(x.clone()),
    };
    let ticket = stream.next_ticket();
    let keep_scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|i| if ticket.unit(i) < rate { 0.0 } else { keep_scale })
        .collect();
    let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(DropoutBack { mask }),
    ))
}

// ---------------------------------------------------------------------------
// pose distance loss
// ---------------------------------------------------------------------------

struct PoseDistBack {
    b: usize,
    j: usize,
}

impl BackwardOp for PoseDistBack {
    fn name(&self) -> &'static str {
        "mean_joint_distance"
    }
    fn backward(&self, grad: &[f64], node: &Node) -> Vec<Option<Vec<f64>>> {
        let pred = node.parents[0].data();
        let target = node.parents[1].data();
        let scale = grad[0] / (self.b * self.j) as f64;
        let mut gp = vec![0.0; pred.len()];
        for bj in 0..self.b * self.j {
            let o = bj * 3;
            let dx = pred[o] - target[o];
            let dy = pred[o + 1] - target[o + 1];
            let dz = pred[o + 2] - target[o + 2];
            let dist = (dx * dx + dy * dy + dz * dz).sqrt();
            if dist > 0.0 {
                let s = scale / dist;
                gp[o] = s * dx;
                gp[o + 1] = s * dy;
                gp[o + 2] = s * dz;
            }
            // Exactly coincident joints sit at the cone point of the norm;
            // use the zero subgradient there.
        }
        vec![Some(gp), None]
    }
}

/// Mean Euclidean distance between predicted and target joints, the training
/// loss. `pred` and `target` are `[B, J, 3]`; the target is a constant.
pub fn mean_joint_distance(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let [b, j, three] = *pred.shape() else {
        return Err(config_err!(
            "mean_joint_distance expects [B, J, 3] predictions, got {:?}",
            pred.shape()
        ));
    };
    if three != 3 {
        return Err(config_err!("joints must be 3-D, got {three} coords"));
    }
    if target.shape() != pred.shape() {
        return Err(config_err!(
            "prediction {:?} and target {:?} shapes differ",
            pred.shape(),
            target.shape()
        ));
    }
    let pd = pred.data();
    let td = target.data();
    let mut acc = 0.0;
    for bj in 0..b * j {
        let o = bj * 3;
        let dx = pd[o] - td[o];
        let dy = pd[o + 1] - td[o + 1];
        let dz = pd[o + 2] - td[o + 2];
        acc += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    let loss = acc / (b * j) as f64;
    drop((pd, td));
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        vec![pred.clone(), target.clone()],
        Box::new(PoseDistBack { b, j }),
    ))
}

// ---------------------------------------------------------------------------
// layer containers
// ---------------------------------------------------------------------------

/// Dilated 1-D convolution layer.
pub struct Conv1d {
    pub w: Tensor,
    pub b: Tensor,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Conv1d {
            w: Tensor::param(
                vec![out_channels, in_channels, kernel],
                uniform_init(rng, fan_in, out_channels * in_channels * kernel),
            ),
            b: Tensor::param(vec![out_channels], uniform_init(rng, fan_in, out_channels)),
            dilation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv1d(x, &self.w, &self.b, self.dilation)
    }
}

/// Fully connected layer.
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: Tensor::param(vec![out_dim, in_dim], uniform_init(rng, in_dim, out_dim * in_dim)),
            b: Tensor::param(vec![out_dim], uniform_init(rng, in_dim, out_dim)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        dense(x, &self.w, &self.b)
    }
}

/// Batch normalization layer owning its affine parameters and running
/// statistics. Running stats update as a side effect of training-mode
/// forward passes; eval-mode passes leave them untouched.
pub struct BatchNorm1d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm1d {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm1d {
            gamma: Tensor::param(vec![channels], vec![1.0; channels]),
            beta: Tensor::param(vec![channels], vec![0.0; channels]),
            running_mean: Tensor::constant(vec![channels], vec![0.0; channels]),
            running_var: Tensor::constant(vec![channels], vec![1.0; channels]),
            momentum,
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        if !train {
            return batch_norm_eval(
                x,
                &self.gamma,
                &self.beta,
                &self.running_mean.data(),
                &self.running_var.data(),
                self.eps,
            );
        }
        let dims = BnDims::from_shape(x.shape())?;
        let n = dims.n() as f64;
        let BnTrainOut { out, mean, var_biased } =
            batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
        // Running estimates use the unbiased variance.
        let unbias = n / (n - 1.0);
        let m = self.momentum;
        let new_mean: Vec<f64> = self
            .running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(r, b)| (1.0 - m) * r + m * b)
            .collect();
        let new_var: Vec<f64> = self
            .running_var
            .data()
            .iter()
            .zip(&var_biased)
            .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
            .collect();
        self.running_mean.set_data(&new_mean);
        self.running_var.set_data(&new_var);
        Ok(out)
    }
}
