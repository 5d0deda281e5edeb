//! Run configuration: a flat `key = value` file with `[model]`,
//! `[optimizer]`, `[stage1..3]`, and `[run]` sections.
//!
//! Files start from a named profile (`desk` by default) and override
//! individual keys, so a config file only needs the lines that differ.
//! Serialization is canonical — fixed key order, `{}` float formatting —
//! which makes the SHA-256 hash of the `[model]` section a stable
//! architecture fingerprint: checkpoints carry it, and evaluation refuses
//! to mix checkpoints whose model sections disagree.

use sha2::{Digest, Sha256};

use crate::encoding::{InputFlags, TemporalOperator};
use crate::error::{config_err, Result};
use crate::model::{GlobalInput, GroupPartition, JointGroup, ModelConfig};
use crate::optim::OptimConfig;

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub stages: [StageConfig; 3],
    pub val_fraction: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl RunConfig {
    /// Desk-scale profile: trains end to end in minutes on a CPU.
    pub fn desk() -> RunConfig {
        RunConfig {
            model: ModelConfig::desk(),
            optim: OptimConfig::default(),
            stages: [
                StageConfig { epochs: 20, lr: 1e-3, batch: 32 },
                StageConfig { epochs: 20, lr: 1e-3, batch: 32 },
                StageConfig { epochs: 5, lr: 5e-4, batch: 32 },
            ],
            val_fraction: 0.1,
            lr_decay: 0.95,
            seed: 0,
        }
    }

    /// Full-scale profile matching the published training schedule.
    pub fn full() -> RunConfig {
        RunConfig {
            model: ModelConfig::full(),
            stages: [
                StageConfig { epochs: 80, lr: 1e-3, batch: 1024 },
                StageConfig { epochs: 80, lr: 1e-3, batch: 1024 },
                StageConfig { epochs: 20, lr: 5e-4, batch: 1024 },
            ],
            ..RunConfig::desk()
        }
    }

    fn profile(name: &str) -> Result<RunConfig> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full()),
            other => Err(config_err!("unknown profile {other:?} (desk | full)")),
        }
    }

    /// Parse a config file. Keys not present keep their profile defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        // The profile line (if any) decides the defaults, so find it first.
        let mut cfg = RunConfig::desk();
        for (_, key, value) in config_lines(text)? {
            if key == "profile" {
                cfg = RunConfig::profile(&value)?;
            }
        }

        let mut partition_spec: Option<String> = None;
        let mut joints: Option<usize> = None;
        let mut root: Option<usize> = None;

        for (section, key, value) in config_lines(text)? {
            let fail = || config_err!("bad value {value:?} for [{section}] {key}");
            match (section.as_str(), key.as_str()) {
                (_, "profile") => {}
                ("model", "frames") => cfg.model.frames = value.parse().map_err(|_| fail())?,
                ("model", "joints") => joints = Some(value.parse().map_err(|_| fail())?),
                ("model", "root") => root = Some(value.parse().map_err(|_| fail())?),
                ("model", "partition") => partition_spec = Some(value),
                ("model", "feature_dim") => {
                    cfg.model.feature_dim = value.parse().map_err(|_| fail())?
                }
                ("model", "tcn_channels") => {
                    cfg.model.tcn_channels = value.parse().map_err(|_| fail())?
                }
                ("model", "tcn_dropout") => {
                    cfg.model.tcn_dropout = value.parse().map_err(|_| fail())?
                }
                ("model", "dense_hidden") => {
                    cfg.model.dense_hidden = value.parse().map_err(|_| fail())?
                }
                ("model", "dense_dropout") => {
                    cfg.model.dense_dropout = value.parse().map_err(|_| fail())?
                }
                ("model", "leaky_slope") => {
                    cfg.model.leaky_slope = value.parse().map_err(|_| fail())?
                }
                ("model", "bn_momentum") => {
                    cfg.model.bn_momentum = value.parse().map_err(|_| fail())?
                }
                ("model", "bn_eps") => cfg.model.bn_eps = value.parse().map_err(|_| fail())?,
                ("model", "inputs") => cfg.model.flags = InputFlags::parse(&value)?,
                ("model", "temporal_op") => {
                    cfg.model.temporal_op = TemporalOperator::parse(&value)?
                }
                ("model", "global_input") => {
                    cfg.model.global_input = GlobalInput::parse(&value)?
                }
                ("optimizer", "beta1") => cfg.optim.beta1 = value.parse().map_err(|_| fail())?,
                ("optimizer", "beta2") => cfg.optim.beta2 = value.parse().map_err(|_| fail())?,
                ("optimizer", "eps") => cfg.optim.eps = value.parse().map_err(|_| fail())?,
                ("optimizer", "weight_decay") => {
                    cfg.optim.weight_decay = value.parse().map_err(|_| fail())?
                }
                ("stage1" | "stage2" | "stage3", k) => {
                    let idx = section.as_bytes()[5] as usize - b'1' as usize;
                    let s = &mut cfg.stages[idx];
                    match k {
                        "epochs" => s.epochs = value.parse().map_err(|_| fail())?,
                        "lr" => s.lr = value.parse().map_err(|_| fail())?,
                        "batch" => s.batch = value.parse().map_err(|_| fail())?,
                        _ => return Err(config_err!("unknown key {key:?} in [{section}]")),
                    }
                }
                ("run", "val_fraction") => {
                    cfg.val_fraction = value.parse().map_err(|_| fail())?
                }
                ("run", "lr_decay") => cfg.lr_decay = value.parse().map_err(|_| fail())?,
                ("run", "seed") => cfg.seed = value.parse().map_err(|_| fail())?,
                _ => return Err(config_err!("unknown key {key:?} in [{section}]")),
            }
        }

        if let Some(spec) = partition_spec {
            cfg.model.partition = parse_partition(
                &spec,
                joints.unwrap_or(cfg.model.partition.joints),
                root.unwrap_or(cfg.model.partition.root),
            )?;
        } else if joints.is_some() || root.is_some() {
            return Err(config_err!(
                "joints/root given without a partition; set all three together"
            ));
        }

        if !(0.0..1.0).contains(&cfg.val_fraction) {
            return Err(config_err!("val_fraction {} outside [0, 1)", cfg.val_fraction));
        }
        if !(0.0..=1.0).contains(&cfg.lr_decay) || cfg.lr_decay == 0.0 {
            return Err(config_err!("lr_decay {} outside (0, 1]", cfg.lr_decay));
        }
        for (i, s) in cfg.stages.iter().enumerate() {
            if s.batch < 2 {
                return Err(config_err!(
                    "stage {} batch size {} too small; batch statistics need at least 2",
                    i + 1,
                    s.batch
                ));
            }
            if s.lr <= 0.0 {
                return Err(config_err!("stage {} learning rate must be positive", i + 1));
            }
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = model_section_text(&self.model);
        let o = &self.optim;
        out.push_str(&format!(
            "\n[optimizer]\nbeta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\n",
            o.beta1, o.beta2, o.eps, o.weight_decay
        ));
        for (i, s) in self.stages.iter().enumerate() {
            out.push_str(&format!(
                "\n[stage{}]\nepochs = {}\nlr = {}\nbatch = {}\n",
                i + 1,
                s.epochs,
                s.lr,
                s.batch
            ));
        }
        out.push_str(&format!(
            "\n[run]\nval_fraction = {}\nlr_decay = {}\nseed = {}\n",
            self.val_fraction, self.lr_decay, self.seed
        ));
        out
    }

    /// Architecture fingerprint: SHA-256 of the canonical `[model]` section.
    pub fn model_hash(&self) -> String {
        sha256_hex(model_section_text(&self.model).as_bytes())
    }
}

/// Canonical `[model]` section text for a model configuration.
pub fn model_section_text(m: &ModelConfig) -> String {
    format!(
        "[model]\nframes = {}\njoints = {}\nroot = {}\npartition = {}\n\
         feature_dim = {}\ntcn_channels = {}\ntcn_dropout = {}\n\
         dense_hidden = {}\ndense_dropout = {}\nleaky_slope = {}\n\
         bn_momentum = {}\nbn_eps = {}\ninputs = {}\ntemporal_op = {}\n\
         global_input = {}\n",
        m.frames,
        m.partition.joints,
        m.partition.root,
        partition_spelling(&m.partition),
        m.feature_dim,
        m.tcn_channels,
        m.tcn_dropout,
        m.dense_hidden,
        m.dense_dropout,
        m.leaky_slope,
        m.bn_momentum,
        m.bn_eps,
        m.flags.spelling(),
        m.temporal_op.spelling(),
        m.global_input.spelling(),
    )
}

/// Parse a standalone `[model]` section (as embedded in checkpoints).
pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let cfg = RunConfig::parse(text)?;
    Ok(cfg.model)
}

fn partition_spelling(p: &GroupPartition) -> String {
    if *p == GroupPartition::human17() {
        return "human17".to_string();
    }
    p.groups
        .iter()
        .map(|g| {
            let joints: Vec<String> = g.joints.iter().map(|j| j.to_string()).collect();
            format!("{}:{}", g.name, joints.join(","))
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_partition(spec: &str, joints: usize, root: usize) -> Result<GroupPartition> {
    if spec == "human17" {
        return Ok(GroupPartition::human17());
    }
    let mut groups = Vec::new();
    for part in spec.split(';') {
        let (name, list) = part
            .split_once(':')
            .ok_or_else(|| config_err!("partition group {part:?} is not name:j,j,..."))?;
        let ids: Result<Vec<usize>> = list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| config_err!("bad joint index {t:?} in partition"))
            })
            .collect();
        groups.push(JointGroup { name: name.trim().to_string(), joints: ids? });
    }
    let p = GroupPartition { groups, joints, root };
    p.validate()?;
    Ok(p)
}

/// Iterate `(section, key, value)` triples of a config file.
fn config_lines(text: &str) -> Result<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| config_err!("line {}: unterminated section header", lineno + 1))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected key = value, got {line:?}", lineno + 1))?;
        if section.is_empty() {
            return Err(config_err!("line {}: key before any [section]", lineno + 1));
        }
        out.push((section.clone(), key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}
