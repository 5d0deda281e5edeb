//! The three-stage training schedule.
//!
//! Stage 1 pretrains the per-group temporal encoders and the global
//! encoder with throwaway decoders and no fusion. Stage 2 builds the full
//! network: the pretrained encoders are loaded and frozen — eval mode,
//! parameters out of the gradient graph — while fresh fusion blocks and
//! decoders train around them. Stage 3 unfreezes everything for a short
//! joint fine-tune at a lower learning rate.
//!
//! Each stage gets a fresh optimizer; the learning rate decays by a fixed
//! factor after every epoch. Shuffling, dropout, and initialization are
//! all driven by seeds derived from the run seed, so a run is a pure
//! function of (config, dataset): interrupting and resuming from the
//! per-epoch checkpoint reproduces the uninterrupted run exactly.
//!
//! Outputs land in the run directory: `resolved.cfg` (the canonical
//! configuration), `metrics.csv` (one row per epoch), `latest.ckpt`
//! (updated every epoch, the resume point), and `stage{1,2,3}.ckpt`
//! (end-of-stage snapshots feeding the next stage and evaluation).

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::{extract_windows, split_sequences, PoseDataset, Window, WindowSet};
use crate::error::{config_err, numerical_err, Result};
use crate::model::Model;
use crate::nn::{mean_joint_distance, Phase};
use crate::optim::AdamW;
use crate::rng::{chacha, derive_seed, DropoutStream};

pub const METRICS_HEADER: &str = "stage,epoch,lr,train_loss,val_mpjpe";

// Seed derivation labels. Distinct per purpose and per stage so no two
// random streams ever coincide.
const LABEL_SPLIT: u64 = 11;
const LABEL_MODEL: u64 = 100; // + stage
const LABEL_DROPOUT: u64 = 200; // + stage
const LABEL_SHUFFLE: u64 = 300; // + stage, then derived again per epoch

/// One completed training epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    /// Learning rate used during this epoch.
    pub lr: f64,
    /// Mean training loss (mm), weighted by batch size.
    pub train_loss: f64,
    /// Validation error (mm) in eval mode after the epoch.
    pub val_mpjpe: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.stage, self.epoch, self.lr, self.train_loss, self.val_mpjpe
        )
    }
}

/// Components shared between stage 1 and stage 2: the encoders.
fn encoder_components(groups: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..groups).map(|i| format!("local{i}")).collect();
    out.push("global".into());
    out
}

/// A training run rooted at an output directory.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    out_dir: PathBuf,
    windows: WindowSet,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

impl<'a> Trainer<'a> {
    /// Extract windows, perform the sequence-level train/validation split,
    /// and write the resolved configuration snapshot.
    pub fn new(cfg: &'a RunConfig, ds: &PoseDataset, out_dir: &Path) -> Result<Trainer<'a>> {
        if ds.joints() != cfg.model.partition.joints {
            return Err(config_err!(
                "dataset has {} joints, model expects {}",
                ds.joints(),
                cfg.model.partition.joints
            ));
        }
        let windows = extract_windows(ds, cfg.model.frames, cfg.model.partition.root)?;
        let (_, val_seq) = split_sequences(
            ds.sequences.len(),
            cfg.val_fraction,
            derive_seed(cfg.seed, LABEL_SPLIT),
        );
        let in_val = |s: usize| val_seq.binary_search(&s).is_ok();
        let mut train_idx = Vec::new();
        let mut val_idx = Vec::new();
        for (i, w) in windows.windows.iter().enumerate() {
            if in_val(w.sequence) {
                val_idx.push(i);
            } else {
                train_idx.push(i);
            }
        }
        if train_idx.len() < 2 {
            return Err(config_err!(
                "only {} training windows; need at least 2 for batch statistics",
                train_idx.len()
            ));
        }
        if val_idx.is_empty() {
            return Err(config_err!("validation split is empty; use more sequences"));
        }

        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("resolved.cfg"), cfg.to_text())?;
        Ok(Trainer {
            cfg,
            out_dir: out_dir.to_path_buf(),
            windows,
            train_idx,
            val_idx,
        })
    }

    pub fn train_windows(&self) -> usize {
        self.train_idx.len()
    }

    pub fn val_windows(&self) -> usize {
        self.val_idx.len()
    }

    fn stage_path(&self, stage: usize) -> PathBuf {
        self.out_dir.join(format!("stage{stage}.ckpt"))
    }

    fn latest_path(&self) -> PathBuf {
        self.out_dir.join("latest.ckpt")
    }

    /// Construct the network a stage starts from, with stage freezing
    /// applied. Stages after the first load their predecessor's snapshot —
    /// from `prev` when the caller supplies one, otherwise from the run
    /// directory.
    fn stage_model(&self, stage: usize, prev: Option<&Checkpoint>) -> Result<Model> {
        let cfg = self.cfg;
        let groups = cfg.model.partition.groups.len();
        let mut model = match stage {
            1 => Model::new(cfg.model.clone(), false, derive_seed(cfg.seed, LABEL_MODEL + 1))?,
            2 => {
                let prev = self.prerequisite(1, prev)?;
                let model =
                    Model::new(cfg.model.clone(), true, derive_seed(cfg.seed, LABEL_MODEL + 2))?;
                prev.apply_to(&model, Some(&encoder_components(groups)))?;
                model
            }
            3 => {
                let prev = self.prerequisite(2, prev)?;
                if !prev.ffm_enabled {
                    return Err(config_err!(
                        "the stage-2 checkpoint was trained without fusion; cannot fine-tune it"
                    ));
                }
                prev.build_model()?
            }
            s => return Err(config_err!("stage must be 1, 2, or 3, got {s}")),
        };
        apply_stage_freezing(&mut model, stage)?;
        Ok(model)
    }

    fn prerequisite(&self, stage: usize, supplied: Option<&Checkpoint>) -> Result<Checkpoint> {
        if let Some(c) = supplied {
            return Ok(c.clone());
        }
        let path = self.stage_path(stage);
        if !path.exists() {
            return Err(config_err!(
                "{} not found; run stage {stage} first",
                path.display()
            ));
        }
        let ckpt = checkpoint::load(&path)?;
        self.check_hash(&ckpt)?;
        Ok(ckpt)
    }

    fn check_hash(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.model_hash != self.cfg.model_hash() {
            return Err(config_err!(
                "checkpoint was trained with a different [model] section (hash {} vs {})",
                &ckpt.model_hash[..12],
                &self.cfg.model_hash()[..12]
            ));
        }
        Ok(())
    }

    /// Run the given stages in order. A `resume` checkpoint anchors the
    /// run: stages it has already finished are skipped, a stage it is in
    /// the middle of continues from the last finished epoch, and when it
    /// is the completed predecessor of the first stage to run, it serves
    /// as that stage's prerequisite (so `--stage 2` can start straight
    /// from a stage-1 snapshot that lives elsewhere).
    pub fn run(
        &self,
        stages: &[usize],
        resume: Option<Checkpoint>,
        mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
    ) -> Result<Vec<EpochRecord>> {
        if let Some(r) = &resume {
            self.check_hash(r)?;
        }

        let mut records = Vec::new();
        // Highest stage actually executed in this invocation; once a stage
        // runs here, later stages read its freshly written snapshot rather
        // than the resume anchor.
        let mut ran: Option<usize> = None;
        for &stage in stages {
            let plan = self
                .cfg
                .stages
                .get(stage.wrapping_sub(1))
                .copied()
                .ok_or_else(|| config_err!("stage must be 1, 2, or 3, got {stage}"))?;

            let anchor = resume.as_ref().filter(|_| ran.is_none());
            let mut start_epoch = 0;
            let mut model;
            let mut opt;
            let stream = DropoutStream::new(derive_seed(self.cfg.seed, LABEL_DROPOUT + stage as u64));

            match anchor {
                Some(r) if r.stage > stage || (r.stage == stage && r.epoch >= plan.epochs) => {
                    // Stage already finished in the interrupted run.
                    continue;
                }
                Some(r) if r.stage == stage && r.epoch > 0 => {
                    model = r.build_model()?;
                    apply_stage_freezing(&mut model, stage)?;
                    opt = AdamW::new(self.cfg.optim, r.lr, model.trainable_params());
                    r.restore_optimizer(&mut opt)?;
                    stream.set_counter(r.dropout_counter);
                    start_epoch = r.epoch;
                }
                _ => {
                    let prev = anchor.filter(|r| {
                        r.stage + 1 == stage && ran != Some(stage.wrapping_sub(1))
                    });
                    model = self.stage_model(stage, prev)?;
                    opt = AdamW::new(self.cfg.optim, plan.lr, model.trainable_params());
                }
            }

            for epoch in start_epoch + 1..=plan.epochs {
                let rec = self.run_epoch(&model, &mut opt, &stream, stage, epoch)?;
                self.append_metrics(&rec)?;
                if let Some(cb) = on_epoch.as_deref_mut() {
                    cb(&rec);
                }
                records.push(rec);

                let ckpt =
                    Checkpoint::capture(&model, Some(&opt), stage, epoch, opt.lr(), stream.counter());
                checkpoint::save(&self.latest_path(), &ckpt)?;
                if epoch == plan.epochs {
                    checkpoint::save(&self.stage_path(stage), &ckpt)?;
                }
            }
            ran = Some(stage);
        }
        Ok(records)
    }

    /// One pass over the training windows plus a validation sweep.
    fn run_epoch(
        &self,
        model: &Model,
        opt: &mut AdamW,
        stream: &DropoutStream,
        stage: usize,
        epoch: usize,
    ) -> Result<EpochRecord> {
        let plan = self.cfg.stages[stage - 1];
        let lr_used = opt.lr();

        let mut order = self.train_idx.clone();
        let shuffle_seed = derive_seed(
            derive_seed(self.cfg.seed, LABEL_SHUFFLE + stage as u64),
            epoch as u64,
        );
        fisher_yates(&mut order, shuffle_seed);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(plan.batch).enumerate() {
            if chunk.len() < 2 {
                // A final one-window remainder cannot provide batch
                // statistics; it re-enters the shuffle next epoch.
                continue;
            }
            let batch = self.prepare(model, chunk)?;
            let phase = Phase::Train { dropout: stream };
            let pred = model.forward(&batch, &phase)?;
            let loss = mean_joint_distance(&pred, batch.targets.as_ref().unwrap())?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(numerical_err!(
                    "training loss became {value} at stage {stage} epoch {epoch} batch {bi}"
                ));
            }
            opt.zero_grad();
            loss.backward()?;
            opt.step()?;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(config_err!(
                "no usable training batches (batch {} vs {} windows)",
                plan.batch,
                self.train_idx.len()
            ));
        }

        let val_mpjpe = self.validate(model, plan.batch)?;
        opt.scale_lr(self.cfg.lr_decay);

        Ok(EpochRecord {
            stage,
            epoch,
            lr: lr_used,
            train_loss: loss_sum / seen as f64,
            val_mpjpe,
        })
    }

    /// Eval-mode error over the validation windows.
    fn validate(&self, model: &Model, batch: usize) -> Result<f64> {
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in self.val_idx.chunks(batch) {
            let b = self.prepare(model, chunk)?;
            let pred = model.forward(&b, &Phase::Eval)?;
            let loss = mean_joint_distance(&pred, b.targets.as_ref().unwrap())?;
            sum += loss.item() * chunk.len() as f64;
            seen += chunk.len();
        }
        Ok(sum / seen as f64)
    }

    fn prepare(&self, model: &Model, indices: &[usize]) -> Result<crate::model::BatchInput> {
        let refs: Vec<&Window> = indices.iter().map(|&i| &self.windows.windows[i]).collect();
        model.prepare_batch(&refs)
    }

    fn append_metrics(&self, rec: &EpochRecord) -> Result<()> {
        let path = self.out_dir.join("metrics.csv");
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{METRICS_HEADER}")?;
        }
        writeln!(f, "{}", rec.csv_row())?;
        Ok(())
    }
}

/// Freezing that defines each stage: stage 2 trains around frozen
/// encoders, stages 1 and 3 train everything they have.
fn apply_stage_freezing(model: &mut Model, stage: usize) -> Result<()> {
    if stage == 2 {
        model.set_frozen(&encoder_components(model.config().partition.groups.len()))
    } else {
        model.set_frozen(&[])
    }
}

fn fisher_yates(indices: &mut [usize], seed: u64) {
    use rand::Rng;
    let mut rng = chacha(seed);
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::StageConfig;
    use crate::data::{generate, Skeleton, SynthConfig};
    use crate::model::component_of;

    /// A micro run config that trains in well under a second per stage.
    fn micro_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.frames = 9;
        cfg.model.feature_dim = 8;
        cfg.model.tcn_channels = 8;
        cfg.model.dense_hidden = 16;
        cfg.stages = [
            StageConfig { epochs: 2, lr: 1e-3, batch: 16 },
            StageConfig { epochs: 2, lr: 1e-3, batch: 16 },
            StageConfig { epochs: 1, lr: 5e-4, batch: 16 },
        ];
        cfg.seed = seed;
        cfg
    }

    fn micro_data(seed: u64) -> PoseDataset {
        generate(
            &SynthConfig { sequences: 4, frames: 15, seed, ..SynthConfig::default() },
            &Skeleton::human17(),
        )
        .unwrap()
    }

    #[test]
    fn full_schedule_trains_and_chains_checkpoints() {
        let cfg = micro_cfg(5);
        let ds = micro_data(5);
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(&cfg, &ds, dir.path()).unwrap();
        let records = trainer.run(&[1, 2, 3], None, None).unwrap();

        assert_eq!(records.len(), 5);
        assert!(records.iter().all(|r| r.train_loss.is_finite() && r.val_mpjpe.is_finite()));
        // Within a stage the learning rate decays.
        assert!(records[1].lr < records[0].lr);
        assert!((records[1].lr - 1e-3 * 0.95).abs() < 1e-12);
        // Stage 3 restarts from its own configured rate.
        assert!((records[4].lr - 5e-4).abs() < 1e-12);

        for stage in 1..=3 {
            assert!(dir.path().join(format!("stage{stage}.ckpt")).exists());
        }
        assert!(dir.path().join("resolved.cfg").exists());
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 6, "header plus five epochs");
        assert!(metrics.starts_with(METRICS_HEADER));

        // Stage 2 must not have moved the frozen encoders.
        let s1 = checkpoint::load(&dir.path().join("stage1.ckpt")).unwrap();
        let s2 = checkpoint::load(&dir.path().join("stage2.ckpt")).unwrap();
        for comp in encoder_components(5) {
            assert_eq!(
                s1.component_hash(&comp).unwrap(),
                s2.component_hash(&comp).unwrap(),
                "{comp} changed during stage 2"
            );
        }
        // ... but stage 3 does move them.
        let s3 = checkpoint::load(&dir.path().join("stage3.ckpt")).unwrap();
        assert_ne!(
            s1.component_hash("local0").unwrap(),
            s3.component_hash("local0").unwrap()
        );
        assert!(!s1.ffm_enabled);
        assert!(s2.ffm_enabled && s3.ffm_enabled);

        // Stage-2 decoders are fresh, not the stage-1 ones.
        let d1 = &s1.tensors["decoder0.proj_in.w"];
        let d2 = &s2.tensors["decoder0.proj_in.w"];
        assert_ne!(d1.0, d2.0, "fusion widens the decoder input");
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let cfg = micro_cfg(7);
        let ds = micro_data(7);

        let full_dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(&cfg, &ds, full_dir.path()).unwrap();
        let full = trainer.run(&[1, 2], None, None).unwrap();

        // Same run, interrupted after stage 1 epoch 1 (simulated by
        // training one epoch, then resuming the rest).
        let part_dir = tempfile::tempdir().unwrap();
        let trainer2 = Trainer::new(&cfg, &ds, part_dir.path()).unwrap();
        let mut cut = cfg.clone();
        cut.stages[0].epochs = 1;
        let t_cut = Trainer::new(&cut, &ds, part_dir.path()).unwrap();
        t_cut.run(&[1], None, None).unwrap();
        let anchor = checkpoint::load(&part_dir.path().join("latest.ckpt")).unwrap();
        let resumed = trainer2.run(&[1, 2], Some(anchor), None).unwrap();

        let full_tail: Vec<&EpochRecord> = full.iter().skip(1).collect();
        let resumed_ref: Vec<&EpochRecord> = resumed.iter().collect();
        assert_eq!(full_tail.len(), resumed_ref.len());
        for (a, b) in full_tail.iter().zip(&resumed_ref) {
            assert_eq!(a.stage, b.stage);
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits(), "epoch {}", a.epoch);
            assert_eq!(a.val_mpjpe.to_bits(), b.val_mpjpe.to_bits());
        }

        // Final checkpoints agree bit for bit on every tensor.
        let a = checkpoint::load(&full_dir.path().join("stage2.ckpt")).unwrap();
        let b = checkpoint::load(&part_dir.path().join("stage2.ckpt")).unwrap();
        assert_eq!(a.tensors.len(), b.tensors.len());
        for (name, (_, da)) in &a.tensors {
            let db = &b.tensors[name].1;
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(da), bits(db), "{name} differs after resume");
        }
    }

    #[test]
    fn stage_two_requires_stage_one() {
        let cfg = micro_cfg(1);
        let ds = micro_data(1);
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(&cfg, &ds, dir.path()).unwrap();
        let err = trainer.run(&[2], None, None).unwrap_err().to_string();
        assert!(err.contains("stage 1"), "{err}");
    }

    #[test]
    fn completed_stage_checkpoint_seeds_the_next_stage_anywhere() {
        let cfg = micro_cfg(1);
        let ds = micro_data(1);
        let first = tempfile::tempdir().unwrap();
        Trainer::new(&cfg, &ds, first.path())
            .unwrap()
            .run(&[1], None, None)
            .unwrap();
        let anchor = checkpoint::load(&first.path().join("stage1.ckpt")).unwrap();

        // A fresh directory has no stage1.ckpt on disk; the supplied
        // checkpoint stands in for it.
        let second = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(&cfg, &ds, second.path()).unwrap();
        let records = trainer.run(&[2], Some(anchor.clone()), None).unwrap();
        assert!(records.iter().all(|r| r.stage == 2));

        // Encoders were taken from the anchor and stay frozen.
        let done = checkpoint::load(&second.path().join("stage2.ckpt")).unwrap();
        for comp in encoder_components(cfg.model.partition.groups.len()) {
            assert_eq!(
                anchor.component_hash(&comp).unwrap(),
                done.component_hash(&comp).unwrap(),
                "{comp} drifted in stage 2"
            );
        }
    }

    #[test]
    fn mismatched_checkpoint_hash_is_rejected() {
        let cfg = micro_cfg(2);
        let ds = micro_data(2);
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(&cfg, &ds, dir.path()).unwrap();
        trainer.run(&[1], None, None).unwrap();

        let mut other = micro_cfg(2);
        other.model.feature_dim = 4;
        let trainer2 = Trainer::new(&other, &ds, dir.path()).unwrap();
        let err = trainer2.run(&[2], None, None).unwrap_err().to_string();
        assert!(err.contains("different [model] section"), "{err}");
    }

    #[test]
    fn stage_two_only_trains_fusion_and_decoders() {
        let cfg = micro_cfg(3);
        let ds = micro_data(3);
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(&cfg, &ds, dir.path()).unwrap();
        trainer.run(&[1], None, None).unwrap();
        let model = trainer.stage_model(2, None).unwrap();
        let trainable = model.trainable_params();
        assert!(!trainable.is_empty());
        for (name, _) in &trainable {
            let c = component_of(name);
            assert!(
                c.starts_with("fusion") || c.starts_with("decoder"),
                "{name} should be frozen in stage 2"
            );
        }
    }

    #[test]
    fn training_reduces_validation_error() {
        // Not a benchmark — just protection against sign errors in the
        // update direction: a few epochs must beat the untrained network.
        let mut cfg = micro_cfg(11);
        cfg.stages[0] = StageConfig { epochs: 6, lr: 2e-3, batch: 32 };
        let ds = micro_data(11);
        let dir = tempfile::tempdir().unwrap();
        let trainer = Trainer::new(&cfg, &ds, dir.path()).unwrap();
        let records = trainer.run(&[1], None, None).unwrap();
        let first = records.first().unwrap().val_mpjpe;
        let last = records.last().unwrap().val_mpjpe;
        assert!(
            last < first,
            "validation error should drop: first {first:.2}mm, last {last:.2}mm"
        );
    }
}
