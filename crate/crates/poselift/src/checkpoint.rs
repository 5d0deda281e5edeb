//! Checkpoint container: everything needed to resume training or run
//! evaluation from a single file.
//!
//! Layout: a text header (`poselift checkpoint v1`, then `key = value`
//! lines, then `end`), the embedded canonical `[model]` section, and the
//! tensor blocks — for each tensor a name/shape line followed by raw
//! little-endian f64 data. Tensors are sorted by name, so a checkpoint's
//! bytes are a pure function of its contents.
//!
//! Stored tensors cover model parameters, batch-norm running statistics,
//! and (when training state is captured) the optimizer's first and second
//! moments under `opt.m.` / `opt.v.` prefixes. The header pins the stage,
//! epoch, learning rate, optimizer step count, dropout counter, and the
//! model-section hash, so resuming reproduces the exact run and evaluation
//! can rebuild the network without a config file.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{model_from_text, model_section_text, sha256_hex};
use crate::error::{config_err, data_err, io_at, Result};
use crate::model::{component_of, Model};
use crate::optim::AdamW;

const MAGIC: &str = "poselift checkpoint v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Canonical `[model]` section this checkpoint was trained with.
    pub model_text: String,
    pub model_hash: String,
    pub ffm_enabled: bool,
    /// Training stage this state belongs to (1-based).
    pub stage: usize,
    /// Completed epochs within the stage.
    pub epoch: usize,
    /// Learning rate after decay, as of `epoch`.
    pub lr: f64,
    pub opt_step: u64,
    pub dropout_counter: u64,
    /// name -> (shape, data); includes `opt.m.` / `opt.v.` moments.
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Snapshot a model (and optionally its optimizer) into a checkpoint.
    pub fn capture(
        model: &Model,
        opt: Option<&AdamW>,
        stage: usize,
        epoch: usize,
        lr: f64,
        dropout_counter: u64,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for e in model.named_tensors() {
            tensors.insert(e.name, (e.tensor.shape().to_vec(), e.tensor.to_vec()));
        }
        let mut opt_step = 0;
        if let Some(opt) = opt {
            opt_step = opt.step_count();
            for (name, m, v) in opt.state() {
                tensors.insert(format!("opt.m.{name}"), (vec![m.len()], m.to_vec()));
                tensors.insert(format!("opt.v.{name}"), (vec![v.len()], v.to_vec()));
            }
        }
        let model_text = model_section_text(model.config());
        let model_hash = sha256_hex(model_text.as_bytes());
        Checkpoint {
            model_text,
            model_hash,
            ffm_enabled: model.ffm_enabled(),
            stage,
            epoch,
            lr,
            opt_step,
            dropout_counter,
            tensors,
        }
    }

    /// Rebuild the network this checkpoint describes. Every model tensor
    /// must be present; optimizer moments are ignored here.
    pub fn build_model(&self) -> Result<Model> {
        let cfg = model_from_text(&self.model_text)?;
        let model = Model::new(cfg, self.ffm_enabled, 0)?;
        let applied = self.apply_to(&model, None)?;
        let expected = model.named_tensors().len();
        debug_assert_eq!(applied, expected);
        Ok(model)
    }

    /// Copy stored tensor values into a model. With `components`, only
    /// tensors of those components are loaded (used when a later stage
    /// adopts a subset of an earlier stage's network); otherwise every
    /// model tensor must have a stored value. Returns how many tensors
    /// were loaded.
    pub fn apply_to(&self, model: &Model, components: Option<&[String]>) -> Result<usize> {
        let mut applied = 0;
        for e in model.named_tensors() {
            if let Some(filter) = components {
                if !filter.iter().any(|c| c == component_of(&e.name)) {
                    continue;
                }
            }
            let (shape, data) = self.tensors.get(&e.name).ok_or_else(|| {
                data_err!("checkpoint is missing tensor {:?}", e.name)
            })?;
            if shape != e.tensor.shape() {
                return Err(data_err!(
                    "tensor {:?} has shape {:?} in the checkpoint but {:?} in the model",
                    e.name,
                    shape,
                    e.tensor.shape()
                ));
            }
            e.tensor.set_data(data);
            applied += 1;
        }
        Ok(applied)
    }

    /// Restore optimizer moments and step count captured by `capture`.
    /// Parameters absent from the stored state start with fresh moments.
    pub fn restore_optimizer(&self, opt: &mut AdamW) -> Result<()> {
        let mut entries = Vec::new();
        for (name, (_, m)) in self.tensors.range("opt.m.".to_string()..) {
            let Some(pname) = name.strip_prefix("opt.m.") else { break };
            let vname = format!("opt.v.{pname}");
            let (_, v) = self
                .tensors
                .get(&vname)
                .ok_or_else(|| data_err!("checkpoint has {name:?} but no {vname:?}"))?;
            entries.push((pname.to_string(), m.clone(), v.clone()));
        }
        opt.restore(self.opt_step, &entries)
    }

    /// Digest of one component's tensors (parameters and running stats):
    /// equal digests mean bit-identical state. Used to prove that frozen
    /// components did not move between two checkpoints.
    pub fn component_hash(&self, component: &str) -> Result<String> {
        let mut bytes = Vec::new();
        let mut found = false;
        for (name, (shape, data)) in &self.tensors {
            if component_of(name) != component || name.starts_with("opt.") {
                continue;
            }
            found = true;
            bytes.extend_from_slice(name.as_bytes());
            for d in shape {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if !found {
            return Err(config_err!("checkpoint has no component {component:?}"));
        }
        Ok(sha256_hex(&bytes))
    }

    /// Model component names present in this checkpoint, in name order.
    pub fn components(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.tensors.keys() {
            if name.starts_with("opt.") {
                continue;
            }
            let c = component_of(name);
            if out.last().map(String::as_str) != Some(c) {
                out.push(c.to_string());
            }
        }
        out
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_at(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "stage = {}", ckpt.stage)?;
    writeln!(w, "epoch = {}", ckpt.epoch)?;
    writeln!(w, "ffm_enabled = {}", ckpt.ffm_enabled)?;
    writeln!(w, "lr = {}", ckpt.lr)?;
    writeln!(w, "opt_step = {}", ckpt.opt_step)?;
    writeln!(w, "dropout_counter = {}", ckpt.dropout_counter)?;
    writeln!(w, "model_hash = {}", ckpt.model_hash)?;
    writeln!(w, "model_bytes = {}", ckpt.model_text.len())?;
    writeln!(w, "tensors = {}", ckpt.tensors.len())?;
    writeln!(w, "end")?;
    w.write_all(ckpt.model_text.as_bytes())?;
    for (name, (shape, data)) in &ckpt.tensors {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{name} {}", dims.join(" "))?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| io_at(path, e))?;
    let mut r = BufReader::new(file);

    let magic = read_line(&mut r)?;
    if magic != MAGIC {
        return Err(data_err!(
            "{} does not start with the checkpoint magic line",
            path.display()
        ));
    }

    let mut header = BTreeMap::new();
    loop {
        let line = read_line(&mut r)?;
        if line == "end" {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| data_err!("bad checkpoint header line {line:?}"))?;
        header.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |k: &str| {
        header
            .get(k)
            .ok_or_else(|| data_err!("checkpoint header missing {k:?}"))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        field(k)?.parse().map_err(|_| data_err!("bad checkpoint header value for {k:?}"))
    };
    let stage = parse_usize("stage")?;
    let epoch = parse_usize("epoch")?;
    let ffm_enabled = match field("ffm_enabled")?.as_str() {
        "true" => true,
        "false" => false,
        other => return Err(data_err!("bad ffm_enabled value {other:?}")),
    };
    let lr: f64 = field("lr")?
        .parse()
        .map_err(|_| data_err!("bad checkpoint header value for \"lr\""))?;
    let opt_step = parse_usize("opt_step")? as u64;
    let dropout_counter = parse_usize("dropout_counter")? as u64;
    let model_hash = field("model_hash")?.clone();
    let model_bytes = parse_usize("model_bytes")?;
    let tensor_count = parse_usize("tensors")?;

    let mut model_buf = vec![0u8; model_bytes];
    r.read_exact(&mut model_buf)
        .map_err(|_| data_err!("checkpoint truncated inside the model section"))?;
    let model_text = String::from_utf8(model_buf)
        .map_err(|_| data_err!("checkpoint model section is not UTF-8"))?;
    if sha256_hex(model_text.as_bytes()) != model_hash {
        return Err(data_err!(
            "model section hash mismatch; the checkpoint is corrupt"
        ));
    }

    let mut tensors = BTreeMap::new();
    for _ in 0..tensor_count {
        let line = read_line(&mut r)?;
        let mut parts = line.split_whitespace();
        let name = parts
            .next()
            .ok_or_else(|| data_err!("empty tensor header line"))?
            .to_string();
        let shape: Result<Vec<usize>> = parts
            .map(|t| t.parse::<usize>().map_err(|_| data_err!("bad dimension {t:?} for {name:?}")))
            .collect();
        let shape = shape?;
        let len: usize = shape.iter().product();
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf).map_err(|_| {
            data_err!("checkpoint truncated inside tensor {name:?} (wanted {} bytes)", len * 8)
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(data_err!("duplicate tensor {name:?} in checkpoint"));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(data_err!("trailing bytes after the last tensor"));
    }

    Ok(Checkpoint {
        model_text,
        model_hash,
        ffm_enabled,
        stage,
        epoch,
        lr,
        opt_step,
        dropout_counter,
        tensors,
    })
}

fn read_line<R: Read>(r: &mut R) -> Result<String> {
    let mut out = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(data_err!("checkpoint truncated inside a header line"));
        }
        if byte[0] == b'\n' {
            break;
        }
        out.push(byte[0]);
        if out.len() > 4096 {
            return Err(data_err!("checkpoint header line longer than 4096 bytes"));
        }
    }
    String::from_utf8(out).map_err(|_| data_err!("checkpoint header is not UTF-8"))
}
