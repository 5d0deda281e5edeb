//! The grouped lifting network.
//!
//! Joints are partitioned into anatomical groups (torso, arms, legs). Each
//! group gets a *local* temporal-convolution encoder over its own joints'
//! enhanced input channels; a *global* dense encoder summarizes the centre
//! frame's full pose; optional *fusion* blocks give each group a view of
//! every other group's features; per-group *decoders* regress the group's
//! root-relative 3D joints, which are scattered back into one pose with the
//! root pinned to the origin.
//!
//! The temporal encoders shrink time only through valid convolutions:
//! with window length `T = 3^L`, `L` residual blocks with kernel 3 and
//! dilations `1, 3, 9, ...` land on exactly one frame, so the receptive
//! field is the whole window by construction and no padding ever leaks
//! zeros into the features.
//!
//! Components are addressed by name (`local0..localN-1`, `global`,
//! `fusion0..`, `decoder0..`) for freezing, checkpointing, and the staged
//! training schedule. A frozen component runs in eval mode — dropout off,
//! running statistics pinned — and its parameters drop out of the autodiff
//! graph entirely.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::data::Window;
use crate::encoding::{assemble_input, InputFlags, PoseSequence2D, TemporalOperator};
use crate::error::{config_err, Result};
use crate::nn::{BatchNorm1d, Conv1d, Dense, Phase};
use crate::tensor::{add, concat_cols, scale, slice_time, squeeze_time, Tensor};
use crate::{nn, tensor};

/// Fixed gain from the decoder head's unit-scale output to millimetres.
/// Targets are root-relative millimetres with magnitudes in the hundreds;
/// asking freshly initialized O(1) weights to produce them directly would
/// spend the whole training budget inflating the head (AdamW moves each
/// weight by roughly the learning rate per step). With the gain, the head
/// works in metres and the optimizer only traverses O(1) weight space.
const OUTPUT_GAIN_MM: f64 = 1000.0;

// ---------------------------------------------------------------------------
// joint grouping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointGroup {
    pub name: String,
    pub joints: Vec<usize>,
}

/// A partition of the skeleton's joints into disjoint, covering groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub groups: Vec<JointGroup>,
    pub joints: usize,
    pub root: usize,
}

impl GroupPartition {
    /// The standard five-group split of the 17-joint skeleton.
    pub fn human17() -> GroupPartition {
        let g = |name: &str, joints: &[usize]| JointGroup {
            name: name.to_string(),
            joints: joints.to_vec(),
        };
        GroupPartition {
            groups: vec![
                g("torso", &[0, 7, 8, 9, 10]),
                g("left_arm", &[11, 12, 13]),
                g("right_arm", &[14, 15, 16]),
                g("left_leg", &[4, 5, 6]),
                g("right_leg", &[1, 2, 3]),
            ],
            joints: 17,
            root: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(config_err!("partition has no groups"));
        }
        if self.root >= self.joints {
            return Err(config_err!(
                "root joint {} out of range for {} joints",
                self.root,
                self.joints
            ));
        }
        let mut seen = vec![false; self.joints];
        for g in &self.groups {
            if g.joints.is_empty() {
                return Err(config_err!("group {:?} is empty", g.name));
            }
            for &j in &g.joints {
                if j >= self.joints {
                    return Err(config_err!("group {:?} lists joint {j} out of range", g.name));
                }
                if seen[j] {
                    return Err(config_err!("joint {j} appears in more than one group"));
                }
                seen[j] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(config_err!("joint {missing} is not covered by any group"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// model configuration
// ---------------------------------------------------------------------------

/// What the global encoder reads from the centre frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalInput {
    /// Absolute keypoints when the absolute family is enabled, otherwise
    /// the positional encoding.
    Auto,
    Absolute,
    Positional,
}

impl GlobalInput {
    pub fn parse(s: &str) -> Result<GlobalInput> {
        match s {
            "auto" => Ok(GlobalInput::Auto),
            "abs" => Ok(GlobalInput::Absolute),
            "pos" => Ok(GlobalInput::Positional),
            other => Err(config_err!("unknown global input {other:?} (auto | abs | pos)")),
        }
    }

    pub fn spelling(&self) -> &'static str {
        match self {
            GlobalInput::Auto => "auto",
            GlobalInput::Absolute => "abs",
            GlobalInput::Positional => "pos",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Window length; must be a power of three.
    pub frames: usize,
    pub partition: GroupPartition,
    /// Per-group (and global) feature width.
    pub feature_dim: usize,
    pub tcn_channels: usize,
    pub tcn_dropout: f64,
    pub dense_hidden: usize,
    pub dense_dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub flags: InputFlags,
    pub temporal_op: TemporalOperator,
    pub global_input: GlobalInput,
}

impl ModelConfig {
    /// Full-scale configuration (as trained on motion-capture data).
    pub fn full() -> ModelConfig {
        ModelConfig {
            frames: 243,
            partition: GroupPartition::human17(),
            feature_dim: 512,
            tcn_channels: 512,
            tcn_dropout: 0.2,
            dense_hidden: 1024,
            dense_dropout: 0.25,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            flags: InputFlags::all(),
            temporal_op: TemporalOperator::Sub,
            global_input: GlobalInput::Auto,
        }
    }

    /// Desk-scale configuration: same architecture, small enough that the
    /// whole pipeline trains in seconds on a CPU.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            frames: 27,
            feature_dim: 64,
            tcn_channels: 64,
            dense_hidden: 128,
            ..ModelConfig::full()
        }
    }

    /// Number of temporal blocks: `frames = 3^depth`.
    pub fn depth(&self) -> Result<usize> {
        let mut t = self.frames;
        let mut depth = 0;
        while t > 1 {
            if t % 3 != 0 {
                return Err(config_err!(
                    "window length {} is not a power of three; the temporal \
                     stack cannot reduce it to a single frame",
                    self.frames
                ));
            }
            t /= 3;
            depth += 1;
        }
        if depth == 0 {
            return Err(config_err!("window length must be at least 3"));
        }
        Ok(depth)
    }

    /// Channels per joint in the enhanced input.
    pub fn input_channels(&self) -> usize {
        self.flags.channels(self.temporal_op)
    }

    /// What the global encoder actually reads, after resolving `Auto`.
    pub fn resolved_global_input(&self) -> Result<GlobalInput> {
        match self.global_input {
            GlobalInput::Auto => Ok(if self.flags.absolute {
                GlobalInput::Absolute
            } else {
                GlobalInput::Positional
            }),
            GlobalInput::Absolute if !self.flags.absolute => Err(config_err!(
                "global input 'abs' requires the absolute input family"
            )),
            GlobalInput::Positional if !self.flags.positional => Err(config_err!(
                "global input 'pos' requires the positional input family"
            )),
            other => Ok(other),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.depth()?;
        self.resolved_global_input()?;
        if self.feature_dim == 0 || self.tcn_channels == 0 || self.dense_hidden == 0 {
            return Err(config_err!("feature, channel, and hidden widths must be positive"));
        }
        for (name, rate) in [("tcn", self.tcn_dropout), ("dense", self.dense_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(config_err!("{name} dropout {rate} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return Err(config_err!("leaky slope {} outside (0, 1)", self.leaky_slope));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(config_err!(
                "bad batch norm settings (momentum {}, eps {})",
                self.bn_momentum,
                self.bn_eps
            ));
        }
        if self.input_channels() == 0 {
            return Err(config_err!("at least one input family must be enabled"));
        }
        if let TemporalOperator::SubWindowed(len) = self.temporal_op {
            if len > self.frames {
                return Err(config_err!(
                    "temporal sub-window {len} exceeds the {} frame window",
                    self.frames
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

/// Visitor collecting named tensors. `param` distinguishes trainable
/// parameters from running statistics (saved, never optimized).
pub struct TensorEntry {
    pub name: String,
    pub tensor: Tensor,
    pub param: bool,
}

fn visit_bn(out: &mut Vec<TensorEntry>, prefix: &str, bn: &BatchNorm1d) {
    let e = |name: String, tensor: &Tensor, param: bool| TensorEntry {
        name,
        tensor: tensor.clone(),
        param,
    };
    out.push(e(format!("{prefix}.gamma"), &bn.gamma, true));
    out.push(e(format!("{prefix}.beta"), &bn.beta, true));
    out.push(e(format!("{prefix}.running_mean"), &bn.running_mean, false));
    out.push(e(format!("{prefix}.running_var"), &bn.running_var, false));
}

fn visit_wb(out: &mut Vec<TensorEntry>, prefix: &str, w: &Tensor, b: &Tensor) {
    out.push(TensorEntry { name: format!("{prefix}.w"), tensor: w.clone(), param: true });
    out.push(TensorEntry { name: format!("{prefix}.b"), tensor: b.clone(), param: true });
}

/// One residual temporal block: dilated conv + pointwise conv on the main
/// branch, a pointwise conv on the centre-cropped skip branch.
struct TcnBlock {
    conv_dil: Conv1d,
    bn1: BatchNorm1d,
    conv_pt: Conv1d,
    bn2: BatchNorm1d,
    skip: Conv1d,
    dilation: usize,
}

impl TcnBlock {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, dilation: usize) -> TcnBlock {
        let ch = cfg.tcn_channels;
        TcnBlock {
            conv_dil: Conv1d::new(rng, ch, ch, 3, dilation),
            bn1: BatchNorm1d::new(ch, cfg.bn_momentum, cfg.bn_eps),
            conv_pt: Conv1d::new(rng, ch, ch, 1, 1),
            bn2: BatchNorm1d::new(ch, cfg.bn_momentum, cfg.bn_eps),
            skip: Conv1d::new(rng, ch, ch, 1, 1),
            dilation,
        }
    }

    fn forward(&self, x: &Tensor, cfg: &ModelConfig, phase: &Phase) -> Result<Tensor> {
        let train = phase.is_train();
        let h = self.conv_dil.forward(x)?;
        let h = self.bn1.forward(&h, train)?;
        let h = nn::dropout(&nn::leaky_relu(&h, cfg.leaky_slope), cfg.tcn_dropout, phase)?;
        let h = self.conv_pt.forward(&h)?;
        let h = self.bn2.forward(&h, train)?;
        let h = nn::dropout(&nn::leaky_relu(&h, cfg.leaky_slope), cfg.tcn_dropout, phase)?;
        // Residual branch: centre-crop the input to the shrunken length so
        // output frame t aligns with the same centre frame.
        let t = x.shape()[2];
        let cropped = slice_time(x, self.dilation, t - 2 * self.dilation)?;
        add(&h, &self.skip.forward(&cropped)?)
    }

    fn visit(&self, out: &mut Vec<TensorEntry>, prefix: &str) {
        visit_wb(out, &format!("{prefix}.conv_dil"), &self.conv_dil.w, &self.conv_dil.b);
        visit_bn(out, &format!("{prefix}.bn1"), &self.bn1);
        visit_wb(out, &format!("{prefix}.conv_pt"), &self.conv_pt.w, &self.conv_pt.b);
        visit_bn(out, &format!("{prefix}.bn2"), &self.bn2);
        visit_wb(out, &format!("{prefix}.skip"), &self.skip.w, &self.skip.b);
    }
}

/// Local encoder: pointwise lift, `depth` residual temporal blocks with
/// dilations `1, 3, 9, ...`, pointwise projection of the surviving frame.
struct TcnEncoder {
    proj_in: Conv1d,
    bn_in: BatchNorm1d,
    blocks: Vec<TcnBlock>,
    proj_out: Conv1d,
}

impl TcnEncoder {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, in_rows: usize, depth: usize) -> TcnEncoder {
        TcnEncoder {
            proj_in: Conv1d::new(rng, in_rows, cfg.tcn_channels, 1, 1),
            bn_in: BatchNorm1d::new(cfg.tcn_channels, cfg.bn_momentum, cfg.bn_eps),
            blocks: (0..depth)
                .map(|l| TcnBlock::new(rng, cfg, 3usize.pow(l as u32)))
                .collect(),
            proj_out: Conv1d::new(rng, cfg.tcn_channels, cfg.feature_dim, 1, 1),
        }
    }

    fn forward(&self, x: &Tensor, cfg: &ModelConfig, phase: &Phase) -> Result<Tensor> {
        let train = phase.is_train();
        let h = self.proj_in.forward(x)?;
        let h = self.bn_in.forward(&h, train)?;
        let mut h = nn::dropout(&nn::leaky_relu(&h, cfg.leaky_slope), cfg.tcn_dropout, phase)?;
        for block in &self.blocks {
            h = block.forward(&h, cfg, phase)?;
        }
        squeeze_time(&self.proj_out.forward(&h)?)
    }

    fn visit(&self, out: &mut Vec<TensorEntry>, prefix: &str) {
        visit_wb(out, &format!("{prefix}.proj_in"), &self.proj_in.w, &self.proj_in.b);
        visit_bn(out, &format!("{prefix}.bn_in"), &self.bn_in);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(out, &format!("{prefix}.block{i}"));
        }
        visit_wb(out, &format!("{prefix}.proj_out"), &self.proj_out.w, &self.proj_out.b);
    }
}

/// Residual dense block shared by the global encoder, fusion blocks, and
/// decoders: lift to the hidden width, two hidden layers, project out, with
/// a skip from the lifted input to the projection.
struct DenseBlock {
    proj_in: Dense,
    bn_in: BatchNorm1d,
    fc1: Dense,
    bn1: BatchNorm1d,
    fc2: Dense,
    bn2: BatchNorm1d,
    proj_out: Dense,
}

impl DenseBlock {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, in_dim: usize, out_dim: usize) -> DenseBlock {
        let h = cfg.dense_hidden;
        DenseBlock {
            proj_in: Dense::new(rng, in_dim, h),
            bn_in: BatchNorm1d::new(h, cfg.bn_momentum, cfg.bn_eps),
            fc1: Dense::new(rng, h, h),
            bn1: BatchNorm1d::new(h, cfg.bn_momentum, cfg.bn_eps),
            fc2: Dense::new(rng, h, h),
            bn2: BatchNorm1d::new(h, cfg.bn_momentum, cfg.bn_eps),
            proj_out: Dense::new(rng, h, out_dim),
        }
    }

    fn forward(&self, x: &Tensor, cfg: &ModelConfig, phase: &Phase) -> Result<Tensor> {
        let train = phase.is_train();
        let act = |t: &Tensor, bn: &BatchNorm1d| -> Result<Tensor> {
            nn::dropout(
                &nn::leaky_relu(&bn.forward(t, train)?, cfg.leaky_slope),
                cfg.dense_dropout,
                phase,
            )
        };
        let h0 = act(&self.proj_in.forward(x)?, &self.bn_in)?;
        let h = act(&self.fc1.forward(&h0)?, &self.bn1)?;
        let h = act(&self.fc2.forward(&h)?, &self.bn2)?;
        self.proj_out.forward(&add(&h0, &h)?)
    }

    fn visit(&self, out: &mut Vec<TensorEntry>, prefix: &str) {
        visit_wb(out, &format!("{prefix}.proj_in"), &self.proj_in.w, &self.proj_in.b);
        visit_bn(out, &format!("{prefix}.bn_in"), &self.bn_in);
        visit_wb(out, &format!("{prefix}.fc1"), &self.fc1.w, &self.fc1.b);
        visit_bn(out, &format!("{prefix}.bn1"), &self.bn1);
        visit_wb(out, &format!("{prefix}.fc2"), &self.fc2.w, &self.fc2.b);
        visit_bn(out, &format!("{prefix}.bn2"), &self.bn2);
        visit_wb(out, &format!("{prefix}.proj_out"), &self.proj_out.w, &self.proj_out.b);
    }
}

// ---------------------------------------------------------------------------
// pose assembly op
// ---------------------------------------------------------------------------

struct AssembleBack {
    groups: Vec<Vec<usize>>,
    joints: usize,
    root: usize,
}

impl tensor::BackwardOp for AssembleBack {
    fn name(&self) -> &'static str {
        "assemble_pose"
    }
    fn backward(&self, grad: &[f64], node: &tensor::Node) -> Vec<Option<Vec<f64>>> {
        let b = grad.len() / (self.joints * 3);
        self.groups
            .iter()
            .zip(&node.parents)
            .map(|(joints, parent)| {
                parent.is_tracked().then(|| {
                    let gw = joints.len() * 3;
                    let mut pg = vec![0.0; b * gw];
                    for bi in 0..b {
                        for (k, &j) in joints.iter().enumerate() {
                            if j == self.root {
                                continue; // pinned output: no gradient
                            }
                            let src = (bi * self.joints + j) * 3;
                            let dst = bi * gw + k * 3;
                            pg[dst..dst + 3].copy_from_slice(&grad[src..src + 3]);
                        }
                    }
                    pg
                })
            })
            .collect()
    }
}

/// Scatter per-group decoder outputs `[B, 3*J_g]` into a `[B, J, 3]` pose
/// with the root joint pinned to the origin.
fn assemble_pose(parts: &[Tensor], partition: &GroupPartition) -> Result<Tensor> {
    let b = parts[0].shape()[0];
    let j = partition.joints;
    let mut out = vec![0.0; b * j * 3];
    for (part, group) in parts.iter().zip(&partition.groups) {
        if part.shape() != [b, group.joints.len() * 3] {
            return Err(config_err!(
                "group {:?} output shape {:?}, expected [{b}, {}]",
                group.name,
                part.shape(),
                group.joints.len() * 3
            ));
        }
        let d = part.data();
        let gw = group.joints.len() * 3;
        for bi in 0..b {
            for (k, &joint) in group.joints.iter().enumerate() {
                if joint == partition.root {
                    continue; // stays (0, 0, 0)
                }
                let src = bi * gw + k * 3;
                let dst = (bi * j + joint) * 3;
                out[dst..dst + 3].copy_from_slice(&d[src..src + 3]);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, j, 3],
        out,
        parts.to_vec(),
        Box::new(AssembleBack {
            groups: partition.groups.iter().map(|g| g.joints.clone()).collect(),
            joints: j,
            root: partition.root,
        }),
    ))
}

// ---------------------------------------------------------------------------
// the model
// ---------------------------------------------------------------------------

/// A prepared batch: per-group temporal inputs, the global centre-frame
/// input, and optional targets.
pub struct BatchInput {
    pub groups: Vec<Tensor>,
    pub global: Tensor,
    pub targets: Option<Tensor>,
    pub batch: usize,
}

/// Intermediate features of a forward pass.
pub struct ForwardDetail {
    /// Per-group temporal features `[B, D]`.
    pub f_local: Vec<Tensor>,
    /// Centre-frame feature `[B, D]`.
    pub f_global: Tensor,
    /// Per-group fused features; empty when fusion is disabled.
    pub f_fusion: Vec<Tensor>,
    /// Assembled root-relative pose `[B, J, 3]`.
    pub pose: Tensor,
}

pub struct Model {
    cfg: ModelConfig,
    ffm_enabled: bool,
    locals: Vec<TcnEncoder>,
    global: DenseBlock,
    fusions: Vec<DenseBlock>,
    decoders: Vec<DenseBlock>,
    frozen: BTreeSet<String>,
}

impl Model {
    /// Build a model with freshly initialized parameters. `ffm_enabled`
    /// decides whether fusion blocks exist and widens the decoders
    /// accordingly, so it is part of the architecture, not a runtime flag.
    pub fn new(cfg: ModelConfig, ffm_enabled: bool, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let depth = cfg.depth()?;
        let c = cfg.input_channels();
        let n = cfg.partition.groups.len();
        let d = cfg.feature_dim;
        let mut rng = crate::rng::chacha(seed);

        let locals: Vec<TcnEncoder> = cfg
            .partition
            .groups
            .iter()
            .map(|g| TcnEncoder::new(&mut rng, &cfg, g.joints.len() * c, depth))
            .collect();
        let global = DenseBlock::new(&mut rng, &cfg, cfg.partition.joints * 2, d);
        let fusions: Vec<DenseBlock> = if ffm_enabled {
            (0..n).map(|_| DenseBlock::new(&mut rng, &cfg, (n - 1) * d, d)).collect()
        } else {
            Vec::new()
        };
        let dec_in = if ffm_enabled { 3 * d } else { 2 * d };
        let decoders: Vec<DenseBlock> = cfg
            .partition
            .groups
            .iter()
            .map(|g| DenseBlock::new(&mut rng, &cfg, dec_in, g.joints.len() * 3))
            .collect();

        Ok(Model {
            cfg,
            ffm_enabled,
            locals,
            global,
            fusions,
            decoders,
            frozen: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ffm_enabled(&self) -> bool {
        self.ffm_enabled
    }

    /// Component names in a fixed order.
    pub fn components(&self) -> Vec<String> {
        let n = self.cfg.partition.groups.len();
        let mut out: Vec<String> = (0..n).map(|i| format!("local{i}")).collect();
        out.push("global".into());
        if self.ffm_enabled {
            out.extend((0..n).map(|i| format!("fusion{i}")));
        }
        out.extend((0..n).map(|i| format!("decoder{i}")));
        out
    }

    /// All named tensors (parameters and running stats), deterministic
    /// order. Names start with their component: `local2.block0.conv_dil.w`.
    pub fn named_tensors(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        for (i, l) in self.locals.iter().enumerate() {
            l.visit(&mut out, &format!("local{i}"));
        }
        self.global.visit(&mut out, "global");
        for (i, f) in self.fusions.iter().enumerate() {
            f.visit(&mut out, &format!("fusion{i}"));
        }
        for (i, d) in self.decoders.iter().enumerate() {
            d.visit(&mut out, &format!("decoder{i}"));
        }
        out
    }

    /// Trainable parameters (frozen components excluded), for the optimizer.
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        self.named_tensors()
            .into_iter()
            .filter(|e| e.param && !self.frozen.contains(component_of(&e.name)))
            .map(|e| (e.name, e.tensor))
            .collect()
    }

    pub fn frozen_components(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    /// Freeze exactly the given components: their parameters leave the
    /// gradient graph and they run in eval mode during training forwards.
    pub fn set_frozen(&mut self, components: &[String]) -> Result<()> {
        let known = self.components();
        for c in components {
            if !known.contains(c) {
                return Err(config_err!("unknown component {c:?} (have {known:?})"));
            }
        }
        self.frozen = components.iter().cloned().collect();
        for e in self.named_tensors() {
            if e.param {
                e.tensor.set_requires_grad(!self.frozen.contains(component_of(&e.name)));
            }
        }
        Ok(())
    }

    /// Phase seen by one component: frozen components always run eval.
    fn component_phase<'a>(&self, component: &str, phase: &Phase<'a>) -> Phase<'a> {
        if self.frozen.contains(component) {
            Phase::Eval
        } else {
            *phase
        }
    }

    /// Assemble the network inputs for a batch of windows.
    pub fn prepare_batch(&self, windows: &[&Window]) -> Result<BatchInput> {
        if windows.is_empty() {
            return Err(config_err!("empty batch"));
        }
        let cfg = &self.cfg;
        let b = windows.len();
        let c = cfg.input_channels();
        let t = cfg.frames;
        let j = cfg.partition.joints;

        for w in windows {
            if w.seq2d.frames() != t || w.seq2d.joints() != j {
                return Err(config_err!(
                    "window is {}x{} but the model expects {t} frames x {j} joints",
                    w.seq2d.frames(),
                    w.seq2d.joints()
                ));
            }
        }

        let mut groups = Vec::with_capacity(cfg.partition.groups.len());
        let enhanced: Vec<_> = windows
            .iter()
            .map(|w| assemble_input(&w.seq2d, cfg.flags, cfg.temporal_op))
            .collect::<Result<_>>()?;
        for g in &cfg.partition.groups {
            let rows = g.joints.len() * c;
            let mut data = Vec::with_capacity(b * rows * t);
            for e in &enhanced {
                data.extend_from_slice(&e.group_rows(&g.joints));
            }
            groups.push(Tensor::constant(vec![b, rows, t], data));
        }

        let global_kind = cfg.resolved_global_input()?;
        let mut gdata = Vec::with_capacity(b * j * 2);
        for w in windows {
            gdata.extend_from_slice(&global_rows(&w.seq2d, global_kind));
        }
        let global = Tensor::constant(vec![b, j * 2], gdata);

        let mut tdata = Vec::with_capacity(b * j * 3);
        for w in windows {
            for p in &w.target.joints {
                tdata.extend_from_slice(p);
            }
        }
        let targets = Some(Tensor::constant(vec![b, j, 3], tdata));

        Ok(BatchInput { groups, global, targets, batch: b })
    }

    /// Run the network: local features per group, the global feature,
    /// optional fusion, per-group decoding, pose assembly.
    pub fn forward(&self, batch: &BatchInput, phase: &Phase) -> Result<Tensor> {
        Ok(self.forward_detailed(batch, phase)?.pose)
    }

    /// Forward pass that keeps the intermediate features, for audits and
    /// inspection.
    pub fn forward_detailed(&self, batch: &BatchInput, phase: &Phase) -> Result<ForwardDetail> {
        let cfg = &self.cfg;
        let n = cfg.partition.groups.len();
        if batch.groups.len() != n {
            return Err(config_err!(
                "batch has {} group inputs, model expects {n}",
                batch.groups.len()
            ));
        }

        let mut f_local = Vec::with_capacity(n);
        for (i, (enc, x)) in self.locals.iter().zip(&batch.groups).enumerate() {
            let p = self.component_phase(&format!("local{i}"), phase);
            f_local.push(enc.forward(x, cfg, &p)?);
        }
        let f_global = {
            let p = self.component_phase("global", phase);
            self.global.forward(&batch.global, cfg, &p)?
        };

        let mut f_fusion = Vec::with_capacity(if self.ffm_enabled { n } else { 0 });
        let mut outputs = Vec::with_capacity(n);
        for i in 0..n {
            let mut features = vec![f_local[i].clone()];
            if self.ffm_enabled {
                let others: Vec<Tensor> = (0..n)
                    .filter(|k| *k != i)
                    .map(|k| f_local[k].clone())
                    .collect();
                let fused = {
                    let p = self.component_phase(&format!("fusion{i}"), phase);
                    self.fusions[i].forward(&concat_cols(&others)?, cfg, &p)?
                };
                features.push(fused.clone());
                f_fusion.push(fused);
            }
            features.push(f_global.clone());
            let dec_in = concat_cols(&features)?;
            let p = self.component_phase(&format!("decoder{i}"), phase);
            outputs.push(scale(&self.decoders[i].forward(&dec_in, cfg, &p)?, OUTPUT_GAIN_MM));
        }
        let pose = assemble_pose(&outputs, &cfg.partition)?;
        Ok(ForwardDetail { f_local, f_global, f_fusion, pose })
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|e| e.param)
            .map(|e| e.tensor.len())
            .sum()
    }
}

/// Component prefix of a tensor name (`local2.bn_in.gamma` -> `local2`).
pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// The global encoder's input row for one window: the centre frame's
/// keypoints, absolute or root-relative.
fn global_rows(seq: &PoseSequence2D, kind: GlobalInput) -> Vec<f64> {
    let c = seq.center();
    let j = seq.joints();
    let mut out = Vec::with_capacity(j * 2);
    match kind {
        GlobalInput::Positional => {
            let (rx, ry) = seq.coord(c, seq.root());
            for ji in 0..j {
                let (x, y) = seq.coord(c, ji);
                out.push(x - rx);
                out.push(y - ry);
            }
        }
        _ => {
            for ji in 0..j {
                let (x, y) = seq.coord(c, ji);
                out.push(x);
                out.push(y);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_windows, generate, Skeleton, SynthConfig};
    use crate::rng::DropoutStream;
    use crate::tensor::weighted_sum;

    /// A 3-joint, 2-group toy setup that exercises every code path fast.
    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            frames: 9,
            partition: GroupPartition {
                groups: vec![
                    JointGroup { name: "a".into(), joints: vec![0, 1] },
                    JointGroup { name: "b".into(), joints: vec![2] },
                ],
                joints: 3,
                root: 0,
            },
            feature_dim: 8,
            tcn_channels: 8,
            dense_hidden: 16,
            ..ModelConfig::full()
        }
    }

    fn tiny_batch(cfg: &ModelConfig, b: usize, seed: u64) -> BatchInput {
        let mut rng = crate::rng::chacha(seed);
        use rand::Rng;
        let model = Model::new(cfg.clone(), false, 0).unwrap();
        let windows: Vec<Window> = (0..b)
            .map(|i| {
                let data: Vec<f64> = (0..cfg.frames * 3 * 2)
                    .map(|_| crate::encoding::sanitize_normalized(rng.gen_range(-0.8..0.8)))
                    .collect();
                Window {
                    seq2d: PoseSequence2D::new(data, cfg.frames, 3, 0).unwrap(),
                    target: crate::data::Pose3D {
                        joints: vec![
                            [0.0, 0.0, 0.0],
                            [100.0 + i as f64, -50.0, 25.0],
                            [-80.0, 40.0, -10.0],
                        ],
                    },
                    sequence: 0,
                    frame: i,
                }
            })
            .collect();
        let refs: Vec<&Window> = windows.iter().collect();
        model.prepare_batch(&refs).unwrap()
    }

    #[test]
    fn human17_partition_is_a_partition() {
        GroupPartition::human17().validate().unwrap();
    }

    #[test]
    fn partition_validation_catches_overlap_and_gaps() {
        let mut p = GroupPartition::human17();
        p.groups[1].joints[0] = 0; // duplicate of torso's joint 0
        assert!(p.validate().is_err());
        let mut p = GroupPartition::human17();
        p.groups[1].joints.remove(0); // joint 11 now uncovered
        assert!(p.validate().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::full().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig { frames: 10, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { frames: 1, ..ModelConfig::desk() }.validate().is_err());
        assert!(ModelConfig { tcn_dropout: 1.0, ..ModelConfig::desk() }.validate().is_err());
        let no_abs = InputFlags { absolute: false, positional: true, temporal: true };
        assert!(ModelConfig {
            flags: no_abs,
            global_input: GlobalInput::Absolute,
            ..ModelConfig::desk()
        }
        .validate()
        .is_err());
        // Auto resolves to positional without the absolute family.
        let cfg = ModelConfig { flags: no_abs, ..ModelConfig::desk() };
        assert_eq!(cfg.resolved_global_input().unwrap(), GlobalInput::Positional);
    }

    #[test]
    fn depth_matches_window_length() {
        assert_eq!(ModelConfig { frames: 27, ..ModelConfig::desk() }.depth().unwrap(), 3);
        assert_eq!(ModelConfig { frames: 243, ..ModelConfig::full() }.depth().unwrap(), 5);
    }

    #[test]
    fn named_tensors_unique_and_counted() {
        let model = Model::new(tiny_cfg(), true, 1).unwrap();
        let names: Vec<String> = model.named_tensors().iter().map(|e| e.name.clone()).collect();
        let unique: std::collections::BTreeSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len(), "duplicate tensor names");

        // Per temporal encoder (depth 2): proj_in 2 + bn 4 + 2 blocks of 14
        // + proj_out 2 = 36. Per dense block: 20. 2 locals, global, 2
        // fusions, 2 decoders: 2*36 + 5*20 = 172.
        assert_eq!(names.len(), 172);
        assert!(names.contains(&"local1.block1.conv_dil.w".to_string()));
        assert!(names.contains(&"fusion0.proj_out.b".to_string()));

        let comps = model.components();
        assert_eq!(
            comps,
            vec!["local0", "local1", "global", "fusion0", "fusion1", "decoder0", "decoder1"]
        );
    }

    #[test]
    fn forward_shapes_and_pinned_root() {
        let cfg = tiny_cfg();
        for ffm in [false, true] {
            let model = Model::new(cfg.clone(), ffm, 7).unwrap();
            let batch = tiny_batch(&cfg, 3, 42);
            let out = model.forward(&batch, &Phase::Eval).unwrap();
            assert_eq!(out.shape(), &[3, 3, 3]);
            let d = out.to_vec();
            for bi in 0..3 {
                let o = bi * 9;
                assert_eq!(&d[o..o + 3], &[0.0, 0.0, 0.0], "root must be pinned");
            }
            // Non-root joints produce something nonzero.
            assert!(d.iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg.clone(), true, 3).unwrap();
        let batch = tiny_batch(&cfg, 2, 9);
        let a = model.forward(&batch, &Phase::Eval).unwrap().to_vec();
        let b = model.forward(&batch, &Phase::Eval).unwrap().to_vec();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn gradients_reach_every_trainable_parameter() {
        let cfg = tiny_cfg();
        let model = Model::new(cfg.clone(), true, 5).unwrap();
        let batch = tiny_batch(&cfg, 3, 1);
        let stream = DropoutStream::new(0);
        let out = model
            .forward(&batch, &Phase::Train { dropout: &stream })
            .unwrap();
        let loss = nn::mean_joint_distance(&out, batch.targets.as_ref().unwrap()).unwrap();
        loss.backward().unwrap();
        for (name, t) in model.trainable_params() {
            assert!(t.grad().is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn root_prediction_gets_no_gradient() {
        // The root's decoder slots are pinned to zero output, so their
        // weights receive gradient only via other joints.
        let cfg = tiny_cfg();
        let model = Model::new(cfg.clone(), false, 5).unwrap();
        let batch = tiny_batch(&cfg, 2, 2);
        let out = model.forward(&batch, &Phase::Eval).unwrap();
        // Loss reads only the root joint -> zero everywhere.
        let mut w = vec![0.0; out.len()];
        for bi in 0..2 {
            for c in 0..3 {
                w[bi * 9 + c] = 1.0;
            }
        }
        let loss = weighted_sum(&out, &w).unwrap();
        loss.backward().unwrap();
        for (name, t) in model.trainable_params() {
            if let Some(g) = t.grad() {
                assert!(
                    g.iter().all(|v| *v == 0.0),
                    "{name} received gradient through the pinned root"
                );
            }
        }
    }

    #[test]
    fn frozen_components_are_inert_in_training() {
        let cfg = tiny_cfg();
        let mut model = Model::new(cfg.clone(), true, 11).unwrap();
        model
            .set_frozen(&["local0".into(), "local1".into(), "global".into()])
            .unwrap();

        let before: Vec<(String, Vec<f64>)> = model
            .named_tensors()
            .iter()
            .filter(|e| !e.param)
            .map(|e| (e.name.clone(), e.tensor.to_vec()))
            .collect();

        let batch = tiny_batch(&cfg, 3, 8);
        let stream = DropoutStream::new(4);
        let out = model.forward(&batch, &Phase::Train { dropout: &stream }).unwrap();
        let loss = nn::mean_joint_distance(&out, batch.targets.as_ref().unwrap()).unwrap();
        loss.backward().unwrap();

        for e in model.named_tensors() {
            let comp = component_of(&e.name);
            let frozen = comp.starts_with("local") || comp == "global";
            if e.param {
                if frozen {
                    assert!(e.tensor.grad().is_none(), "{} got a gradient", e.name);
                } else {
                    assert!(e.tensor.grad().is_some(), "{} missing gradient", e.name);
                }
            } else {
                let (_, old) = before.iter().find(|(n, _)| *n == e.name).unwrap();
                let unchanged = e.tensor.to_vec() == *old;
                if frozen {
                    assert!(unchanged, "{} running stats moved while frozen", e.name);
                } else {
                    assert!(!unchanged, "{} running stats should update in training", e.name);
                }
            }
        }

        // Trainable params exclude the frozen components.
        assert!(model
            .trainable_params()
            .iter()
            .all(|(n, _)| !n.starts_with("local") && !n.starts_with("global")));

        assert!(model.set_frozen(&["nonsense".into()]).is_err());
    }

    #[test]
    fn prepare_batch_from_generated_windows() {
        let cfg = ModelConfig { frames: 9, ..ModelConfig::desk() };
        let model = Model::new(cfg.clone(), true, 0).unwrap();
        let ds = generate(
            &SynthConfig { sequences: 1, frames: 12, ..SynthConfig::default() },
            &Skeleton::human17(),
        )
        .unwrap();
        let ws = extract_windows(&ds, 9, 0).unwrap();
        let refs: Vec<&Window> = ws.windows.iter().take(4).collect();
        let batch = model.prepare_batch(&refs).unwrap();
        assert_eq!(batch.batch, 4);
        assert_eq!(batch.groups.len(), 5);
        // torso group: 5 joints x 6 channels = 30 rows.
        assert_eq!(batch.groups[0].shape(), &[4, 30, 9]);
        assert_eq!(batch.global.shape(), &[4, 34]);
        assert_eq!(batch.targets.as_ref().unwrap().shape(), &[4, 17, 3]);

        // Mismatched window length is rejected.
        let cfg27 = ModelConfig::desk();
        let model27 = Model::new(cfg27, true, 0).unwrap();
        assert!(model27.prepare_batch(&refs).is_err());
    }

    #[test]
    fn global_rows_positional_zeroes_root() {
        let data: Vec<f64> = (0..3 * 2 * 2).map(|i| i as f64 * 0.01).collect();
        let seq = PoseSequence2D::new(data, 3, 2, 0).unwrap();
        let abs = global_rows(&seq, GlobalInput::Absolute);
        let pos = global_rows(&seq, GlobalInput::Positional);
        assert_eq!(abs.len(), 4);
        assert_eq!(&pos[0..2], &[0.0, 0.0]);
        let (rx, ry) = seq.coord(1, 0);
        let (x, y) = seq.coord(1, 1);
        assert_eq!(&pos[2..4], &[x - rx, y - ry]);
    }
}
