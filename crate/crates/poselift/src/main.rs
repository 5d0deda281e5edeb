//! Command-line front end: synthetic dataset generation, the staged
//! training schedule, the two evaluation protocols, shift-robustness and
//! movement-range experiments, encoding dumps, and freeze verification.
//!
//! Every command is deterministic given its flags and seed, and every
//! command that writes into an output directory also leaves a config
//! snapshot there describing the run. Exit codes: 0 success, 1 a
//! `verify-freeze` mismatch, 2 config error, 3 data error, 4 numerical
//! failure, 5 I/O error.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use poselift::checkpoint;
use poselift::config::RunConfig;
use poselift::data::{
    extract_windows, generate, read_dataset, write_dataset, CameraSpec, PoseDataset, Sequence,
    Skeleton, SynthConfig, Window,
};
use poselift::encoding::{
    normalize_coords, positional_encode, sanitize_normalized, temporal_encode, OffsetVector,
    PoseSequence2D, TemporalOperator,
};
use poselift::error::{Error, Result};
use poselift::eval::{evaluate, mr_stratified, sample_offsets, shift_experiment};
use poselift::model::Model;
use poselift::training::{EpochRecord, Trainer};

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "POSELIFT_OUT";

#[derive(Parser)]
#[command(
    name = "poselift",
    version,
    about = "2D-to-3D human pose lifting: data generation, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic motion dataset.
    Gen(GenArgs),
    /// Run the staged training schedule.
    Train(TrainArgs),
    /// Evaluate a checkpoint under protocol 1 (MPJPE) and/or 2 (P-MPJPE).
    Eval(EvalArgs),
    /// Measure prediction consistency under global input shifts.
    Robustness(RobustnessArgs),
    /// Break evaluation down by movement range.
    Mr(MrArgs),
    /// Dump the enhanced input encodings of one window as CSV.
    Encode(EncodeArgs),
    /// Compare per-component parameter hashes between two checkpoints.
    VerifyFreeze(VerifyFreezeArgs),
}

#[derive(Args)]
struct GenArgs {
    /// RNG seed; the same seed reproduces the file byte for byte.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per sequence.
    #[arg(long, default_value_t = 81)]
    frames: usize,
    /// Number of sequences.
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    /// Overall motion scale; 0 freezes every pose.
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Gaussian jitter on the 2D observations, in pixels (detector-noise
    /// stand-in); 3D ground truth stays exact.
    #[arg(long, default_value_t = 0.0)]
    noise_px: f64,
    /// Output dataset file [default: $POSELIFT_OUT/dataset.bin].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (flat `key = value` text).
    #[arg(long)]
    config: PathBuf,
    /// Training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and metrics [default: $POSELIFT_OUT or .].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage selection: 1, 2, 3, or all.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Resume from a checkpoint; the bare flag uses <out>/latest.ckpt.
    #[arg(long)]
    resume: Option<Option<PathBuf>>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation dataset.
    #[arg(long)]
    data: PathBuf,
    /// Protocol columns to report: 1, 2, or both.
    #[arg(long, default_value = "both")]
    protocol: String,
    /// Windows per forward pass.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Output CSV [default: $POSELIFT_OUT/eval.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation dataset.
    #[arg(long)]
    data: PathBuf,
    /// Number of random offsets (a zero-offset control row is always added).
    #[arg(long, default_value_t = 6)]
    offsets: usize,
    /// Offset coordinates are drawn uniformly from [-a, a].
    #[arg(long, default_value_t = 0.2)]
    a: f64,
    /// RNG seed for the offsets.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Windows per forward pass.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Output CSV [default: $POSELIFT_OUT/robustness.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MrArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation dataset.
    #[arg(long)]
    data: PathBuf,
    /// Number of movement-range strata.
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Second checkpoint to compare against (adds mpjpe_b and delta columns).
    #[arg(long)]
    ckpt_b: Option<PathBuf>,
    /// Windows per forward pass.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Output CSV [default: $POSELIFT_OUT/mr.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    /// Dataset to pull the window from.
    #[arg(long)]
    data: PathBuf,
    /// Sequence index within the dataset.
    #[arg(long)]
    sequence: usize,
    /// Centre frame of the window.
    #[arg(long)]
    frame: usize,
    /// Window length (odd).
    #[arg(long, default_value_t = 27)]
    frames: usize,
    /// Temporal operator: sub | ip | cp | cs | sub_sq | sub_win:<len>.
    #[arg(long, default_value = "sub")]
    op: String,
    /// Root joint for the positional encoding.
    #[arg(long, default_value_t = 0)]
    root: usize,
    /// Apply a global offset "dx,dy" before encoding.
    #[arg(long)]
    shift: Option<String>,
    /// Output CSV [default: $POSELIFT_OUT/encoding.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyFreezeArgs {
    /// First checkpoint.
    #[arg(long)]
    a: PathBuf,
    /// Second checkpoint.
    #[arg(long)]
    b: PathBuf,
    /// Comma-separated component names [default: components present in both].
    #[arg(long)]
    components: Option<String>,
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen(args) => cmd_gen(args)?,
        Command::Train(args) => cmd_train(args)?,
        Command::Eval(args) => cmd_eval(args)?,
        Command::Robustness(args) => cmd_robustness(args)?,
        Command::Mr(args) => cmd_mr(args)?,
        Command::Encode(args) => cmd_encode(args)?,
        Command::VerifyFreeze(args) => return cmd_verify_freeze(args),
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> Result<()> {
    let out = args.out.unwrap_or_else(|| default_out_dir().join("dataset.bin"));
    let synth = SynthConfig {
        sequences: args.sequences,
        frames: args.frames,
        amplitude: args.amplitude,
        noise_px: args.noise_px,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let ds = generate(&synth, &Skeleton::human17())?;
    if let Some(dir) = parent_dir(&out) {
        fs::create_dir_all(dir)?;
    }
    write_dataset(&ds, &out)?;

    let snapshot = format!(
        "seed = {}\nframes = {}\nsequences = {}\namplitude = {}\nnoise_px = {}\n",
        args.seed, args.frames, args.sequences, args.amplitude, args.noise_px
    );
    write_text(&sidecar(&out, "gen.cfg"), &snapshot)?;

    let ranges: Vec<f64> = ds
        .sequences
        .iter()
        .map(|s| sequence_movement_range(s, &ds.cameras[s.camera], ds.joints()))
        .collect::<Result<_>>()?;
    let mean = ranges.iter().sum::<f64>() / ranges.len() as f64;
    let min = ranges.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = ranges.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "wrote {}: {} joints, {} sequences x {} frames",
        out.display(),
        ds.joints(),
        ds.sequences.len(),
        args.frames
    );
    println!("movement range: mean {mean:.4}, min {min:.4}, max {max:.4}");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let stages = parse_stage_selector(&args.stage)?;
    let text = fs::read_to_string(&args.config)?;
    let cfg = RunConfig::parse(&text)?;
    let ds = read_dataset(&args.data)?;

    let out_dir = args.out.unwrap_or_else(default_out_dir);
    fs::create_dir_all(&out_dir)?;
    let trainer = Trainer::new(&cfg, &ds, &out_dir)?;

    let resume = match &args.resume {
        None => None,
        Some(None) => Some(checkpoint::load(&out_dir.join("latest.ckpt"))?),
        Some(Some(p)) => Some(checkpoint::load(p)?),
    };

    println!(
        "training stage(s) {} on {} windows ({} held out for validation)",
        args.stage,
        trainer.train_windows(),
        trainer.val_windows()
    );
    let mut progress = |r: &EpochRecord| {
        let total = cfg.stages[r.stage - 1].epochs;
        println!(
            "stage {} epoch {:>3}/{}  lr {:.3e}  train {:.3}  val {:.3} mm",
            r.stage, r.epoch, total, r.lr, r.train_loss, r.val_mpjpe
        );
    };
    let records = trainer.run(&stages, resume, Some(&mut progress))?;
    println!(
        "done: {} epoch(s); checkpoints and metrics.csv in {}",
        records.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let protocol = Protocol::parse(&args.protocol)?;
    let ckpt = checkpoint::load(&args.ckpt)?;
    let model = ckpt.build_model()?;
    let ds = read_dataset(&args.data)?;
    check_joints(&model, &ds)?;
    let set = extract_windows(&ds, model.config().frames, model.config().partition.root)?;

    let mut csv = String::from("sequence,windows");
    if protocol.one() {
        csv.push_str(",mpjpe");
    }
    if protocol.two() {
        csv.push_str(",p_mpjpe");
    }
    csv.push('\n');
    for (si, refs) in by_sequence(&set.windows) {
        let report = evaluate(&model, &refs, args.batch)?;
        let _ = write!(csv, "{si},{}", report.windows);
        if protocol.one() {
            let _ = write!(csv, ",{}", report.mpjpe);
        }
        if protocol.two() {
            let _ = write!(csv, ",{}", report.p_mpjpe);
        }
        csv.push('\n');
    }
    let refs: Vec<&Window> = set.windows.iter().collect();
    let overall = evaluate(&model, &refs, args.batch)?;
    let _ = write!(csv, "average,{}", overall.windows);
    if protocol.one() {
        let _ = write!(csv, ",{}", overall.mpjpe);
    }
    if protocol.two() {
        let _ = write!(csv, ",{}", overall.p_mpjpe);
    }
    csv.push('\n');

    let out = args.out.unwrap_or_else(|| default_out_dir().join("eval.csv"));
    write_text(&out, &csv)?;
    write_text(&sidecar(&out, "resolved.cfg"), &ckpt.model_text)?;

    print!("{} windows", overall.windows);
    if protocol.one() {
        print!("  mpjpe {:.3} mm", overall.mpjpe);
    }
    if protocol.two() {
        print!("  p-mpjpe {:.3} mm", overall.p_mpjpe);
    }
    println!("\nwrote {}", out.display());
    Ok(())
}

fn cmd_robustness(args: RobustnessArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let model = ckpt.build_model()?;
    let ds = read_dataset(&args.data)?;
    check_joints(&model, &ds)?;
    let set = extract_windows(&ds, model.config().frames, model.config().partition.root)?;
    let refs: Vec<&Window> = set.windows.iter().collect();

    let offsets = sample_offsets(args.a, args.offsets, args.seed);
    let report = shift_experiment(&model, &refs, &offsets, args.batch)?;

    let mut csv = String::from("dx,dy,magnitude,err_vs_gt,consistency,skipped\n");
    for s in &report.samples {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            s.offset.dx(),
            s.offset.dy(),
            s.offset.magnitude(),
            s.mpjpe,
            s.consistency_gap,
            s.skipped
        );
    }
    let out = args.out.unwrap_or_else(|| default_out_dir().join("robustness.csv"));
    write_text(&out, &csv)?;
    write_text(&sidecar(&out, "resolved.cfg"), &ckpt.model_text)?;

    let shifted: Vec<&_> = report.samples.iter().filter(|s| s.offset.magnitude() > 0.0).collect();
    let mean_gap = shifted.iter().map(|s| s.consistency_gap).sum::<f64>() / shifted.len().max(1) as f64;
    println!(
        "unshifted mpjpe {:.3} mm; mean consistency gap over {} offset(s) {:.3} mm",
        report.base_mpjpe,
        shifted.len(),
        mean_gap
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_mr(args: MrArgs) -> Result<()> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let model = ckpt.build_model()?;
    let ds = read_dataset(&args.data)?;
    check_joints(&model, &ds)?;
    let set = extract_windows(&ds, model.config().frames, model.config().partition.root)?;
    let refs: Vec<&Window> = set.windows.iter().collect();
    let bins = mr_stratified(&model, &refs, args.bins, args.batch)?;

    let compare = match &args.ckpt_b {
        Some(path) => {
            let other = checkpoint::load(path)?;
            let model_b = other.build_model()?;
            let cfg = (model.config().frames, model.config().partition.joints, model.config().partition.root);
            let cfg_b = (model_b.config().frames, model_b.config().partition.joints, model_b.config().partition.root);
            if cfg != cfg_b {
                return Err(Error::Config(format!(
                    "checkpoints disagree on window geometry: \
                     (frames, joints, root) = {cfg:?} vs {cfg_b:?}"
                )));
            }
            Some(mr_stratified(&model_b, &refs, args.bins, args.batch)?)
        }
        None => None,
    };

    let mut csv = String::from("bin,mr_low,mr_high,count,mpjpe");
    if compare.is_some() {
        csv.push_str(",mpjpe_b,delta");
    }
    csv.push('\n');
    for (i, bin) in bins.iter().enumerate() {
        let _ = write!(csv, "{i},{},{},{},{}", bin.mr_low, bin.mr_high, bin.count, bin.mpjpe);
        if let Some(b) = &compare {
            let _ = write!(csv, ",{},{}", b[i].mpjpe, b[i].mpjpe - bin.mpjpe);
        }
        csv.push('\n');
    }
    let out = args.out.unwrap_or_else(|| default_out_dir().join("mr.csv"));
    write_text(&out, &csv)?;
    write_text(&sidecar(&out, "resolved.cfg"), &ckpt.model_text)?;

    println!(
        "{} bins over {} windows, movement range {:.4} to {:.4}",
        bins.len(),
        refs.len(),
        bins.first().map_or(0.0, |b| b.mr_low),
        bins.last().map_or(0.0, |b| b.mr_high)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_encode(args: EncodeArgs) -> Result<()> {
    let op = TemporalOperator::parse(&args.op)?;
    let ds = read_dataset(&args.data)?;
    let set = extract_windows(&ds, args.frames, args.root)?;
    let window = set
        .windows
        .iter()
        .find(|w| w.sequence == args.sequence && w.frame == args.frame)
        .ok_or_else(|| {
            Error::Config(format!(
                "no window at sequence {}, frame {} (dataset has {} sequences)",
                args.sequence,
                args.frame,
                ds.sequences.len()
            ))
        })?;

    let shift = args.shift.as_deref().map(parse_offset).transpose()?;
    let shifted;
    let seq: &PoseSequence2D = match shift {
        Some(off) => {
            shifted = window.seq2d.shifted(off);
            &shifted
        }
        None => &window.seq2d,
    };

    let pos = positional_encode(seq);
    let temp = temporal_encode(seq, op)?;
    let (t, j, ct) = (seq.frames(), seq.joints(), op.channels());
    let mut csv = String::from("family,frame,joint,channel,value\n");
    for ti in 0..t {
        for ji in 0..j {
            for c in 0..2 {
                let _ = writeln!(csv, "pos,{ti},{ji},{c},{}", pos[(ti * j + ji) * 2 + c]);
            }
        }
    }
    for ti in 0..t {
        for ji in 0..j {
            for c in 0..ct {
                let _ = writeln!(csv, "temp,{ti},{ji},{c},{}", temp[(ti * j + ji) * ct + c]);
            }
        }
    }
    let out = args.out.unwrap_or_else(|| default_out_dir().join("encoding.csv"));
    write_text(&out, &csv)?;
    let snapshot = format!(
        "sequence = {}\nframe = {}\nframes = {}\nop = {}\nroot = {}\nshift = {}\n",
        args.sequence,
        args.frame,
        args.frames,
        op.spelling(),
        args.root,
        shift.map_or_else(|| "none".into(), |o| format!("{},{}", o.dx(), o.dy())),
    );
    write_text(&sidecar(&out, "encode.cfg"), &snapshot)?;

    println!(
        "wrote {}: {} frames x {} joints, positional + temporal ({})",
        out.display(),
        t,
        j,
        op.spelling()
    );
    Ok(())
}

fn cmd_verify_freeze(args: VerifyFreezeArgs) -> Result<i32> {
    let a = checkpoint::load(&args.a)?;
    let b = checkpoint::load(&args.b)?;
    let comps: Vec<String> = match &args.components {
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        None => {
            let in_b: BTreeSet<String> = b.components().into_iter().collect();
            a.components().into_iter().filter(|c| in_b.contains(c)).collect()
        }
    };
    if comps.is_empty() {
        return Err(Error::Config("no components to compare".into()));
    }

    let mut differing = 0;
    for comp in &comps {
        if a.component_hash(comp)? == b.component_hash(comp)? {
            println!("{comp}: equal");
        } else {
            println!("{comp}: DIFFERS");
            differing += 1;
        }
    }
    if differing > 0 {
        println!("{differing} of {} component(s) differ", comps.len());
        Ok(1)
    } else {
        println!("all {} component(s) equal", comps.len());
        Ok(0)
    }
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn parent_dir(path: &Path) -> Option<&Path> {
    path.parent().filter(|p| !p.as_os_str().is_empty())
}

/// A sibling file in the same directory as `out`.
fn sidecar(out: &Path, name: &str) -> PathBuf {
    parent_dir(out).unwrap_or_else(|| Path::new(".")).join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = parent_dir(path) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn parse_stage_selector(s: &str) -> Result<Vec<usize>> {
    match s {
        "all" => Ok(vec![1, 2, 3]),
        "1" => Ok(vec![1]),
        "2" => Ok(vec![2]),
        "3" => Ok(vec![3]),
        other => Err(Error::Config(format!("stage must be 1, 2, 3, or all, got {other:?}"))),
    }
}

fn parse_offset(s: &str) -> Result<OffsetVector> {
    let parse = |part: &str| -> Result<f64> {
        part.trim()
            .parse()
            .map_err(|_| Error::Config(format!("offset must be \"dx,dy\", got {s:?}")))
    };
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("offset must be \"dx,dy\", got {s:?}")))?;
    Ok(OffsetVector::quantize(parse(x)?, parse(y)?))
}

fn check_joints(model: &Model, ds: &PoseDataset) -> Result<()> {
    let expect = model.config().partition.joints;
    if expect != ds.joints() {
        return Err(Error::Config(format!(
            "checkpoint expects {expect} joints but the dataset has {}",
            ds.joints()
        )));
    }
    Ok(())
}

/// Group window references by their source sequence (windows arrive
/// ordered by sequence).
fn by_sequence(windows: &[Window]) -> Vec<(usize, Vec<&Window>)> {
    let mut out: Vec<(usize, Vec<&Window>)> = Vec::new();
    for w in windows {
        match out.last_mut() {
            Some((s, v)) if *s == w.sequence => v.push(w),
            _ => out.push((w.sequence, vec![w])),
        }
    }
    out
}

/// Mean distance of every joint from its centre-frame position over one
/// full sequence, in normalized coordinates.
fn sequence_movement_range(seq: &Sequence, cam: &CameraSpec, joints: usize) -> Result<f64> {
    let mut norm = Vec::with_capacity(seq.frames * joints * 2);
    for c in seq.px.chunks_exact(2) {
        let (nx, ny) = normalize_coords(c[0], c[1], cam.width, cam.height)?;
        norm.push(sanitize_normalized(nx));
        norm.push(sanitize_normalized(ny));
    }
    let center = seq.frames / 2;
    let mut total = 0.0;
    for t in 0..seq.frames {
        for j in 0..joints {
            let i = (t * joints + j) * 2;
            let k = (center * joints + j) * 2;
            let (dx, dy) = (norm[i] - norm[k], norm[i + 1] - norm[k + 1]);
            total += dx.hypot(dy);
        }
    }
    Ok(total / (seq.frames * joints) as f64)
}

#[derive(Clone, Copy)]
enum Protocol {
    One,
    Two,
    Both,
}

impl Protocol {
    fn parse(s: &str) -> Result<Protocol> {
        match s {
            "1" => Ok(Protocol::One),
            "2" => Ok(Protocol::Two),
            "both" => Ok(Protocol::Both),
            other => Err(Error::Config(format!("protocol must be 1, 2, or both, got {other:?}"))),
        }
    }

    fn one(self) -> bool {
        matches!(self, Protocol::One | Protocol::Both)
    }

    fn two(self) -> bool {
        matches!(self, Protocol::Two | Protocol::Both)
    }
}
