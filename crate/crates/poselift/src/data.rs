//! Datasets: the on-disk container, window extraction, and a synthetic
//! kinematic sequence generator.
//!
//! The generator produces paired (2D pixels, 3D camera-space millimetres)
//! sequences from a fixed 17-joint skeleton: seeded sinusoidal joint
//! rotations compose along the kinematic chains (so bone lengths are
//! preserved by construction), a seeded root trajectory translates the
//! whole body — including in depth, which creates perspective scale
//! changes — and a pinhole camera projects every frame. Sequences whose
//! projection leaves the safe image region are deterministically resampled
//! with a derived seed. The same configuration therefore always produces
//! the same file, byte for byte.
//!
//! # Container format
//!
//! A text header followed by raw little-endian `f32` blocks:
//!
//! ```text
//! poseset v1
//! joints <J>
//! names <name_0> ... <name_{J-1}>
//! cameras <K>
//! camera <idx> <focal> <cx> <cy> <width> <height>   (K lines)
//! sequences <S>
//! sequence <idx> <subject> <action> <camera> <frames>   (S lines)
//! end
//! <payload>
//! ```
//!
//! The payload holds, for each sequence in order, its 2D block
//! (`frames * J * 2` pixels) then its 3D block (`frames * J * 3`
//! millimetres), both row-major `[frame][joint][coord]`. In memory all
//! values are `f64`; writing rounds to `f32`, reading widens exactly.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::{sanitize_normalized, normalize_coords, PoseSequence2D};
use crate::error::{config_err, data_err, io_at, Result};
use crate::rng::{chacha, derive_seed};

// ---------------------------------------------------------------------------
// poses and cameras
// ---------------------------------------------------------------------------

/// One 3-D pose, joint positions in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn from_flat(flat: &[f64]) -> Pose3D {
        debug_assert_eq!(flat.len() % 3, 0);
        Pose3D {
            joints: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        }
    }

    /// Express every joint relative to the given root; the root maps to the
    /// exact origin.
    pub fn root_relative(&self, root: usize) -> Pose3D {
        let r = self.joints[root];
        Pose3D {
            joints: self
                .joints
                .iter()
                .map(|j| [j[0] - r[0], j[1] - r[1], j[2] - r[2]])
                .collect(),
        }
    }
}

/// Pinhole camera. `+x` right, `+y` down, `+z` into the scene; pixel
/// coordinates have the origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSpec {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraSpec {
    /// The camera used by the synthetic generator.
    pub fn synth_default() -> CameraSpec {
        CameraSpec { focal: 1000.0, cx: 500.0, cy: 500.0, width: 1000.0, height: 1000.0 }
    }

    /// Project a camera-space point (mm) to pixels. The caller guarantees
    /// positive depth.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        debug_assert!(p[2] > 0.0, "projecting point at non-positive depth");
        (self.focal * p[0] / p[2] + self.cx, self.focal * p[1] / p[2] + self.cy)
    }
}

// ---------------------------------------------------------------------------
// skeleton + forward kinematics
// ---------------------------------------------------------------------------

/// A bone: a fixed-length offset from a parent joint in the skeleton's rest
/// orientation, animated by a rotation at the parent.
#[derive(Debug, Clone)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    pub rest_dir: Vector3<f64>,
    pub length: f64,
    /// Relative motion range: limbs swing wide, the spine barely.
    pub motion_gain: f64,
}

/// Kinematic tree. Bones are ordered parent-before-child so a single pass
/// computes all joint positions.
#[derive(Debug, Clone)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub root: usize,
    pub bones: Vec<Bone>,
}

impl Skeleton {
    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    /// The 17-joint human model used throughout: pelvis root, two legs,
    /// spine-to-head chain, two arms.
    pub fn human17() -> Skeleton {
        let names = [
            "pelvis", "rhip", "rknee", "rankle", "lhip", "lknee", "lankle", "spine", "thorax",
            "neck", "head", "lshoulder", "lelbow", "lwrist", "rshoulder", "relbow", "rwrist",
        ];
        // (parent, child, rest direction, length mm, motion gain).
        // Directions are in camera orientation: +y is down, so legs point
        // +y and the spine points -y.
        let spec: [(usize, usize, [f64; 3], f64, f64); 16] = [
            (0, 1, [-1.0, 0.0, 0.0], 132.0, 0.15),   // pelvis -> rhip
            (1, 2, [0.0, 1.0, 0.0], 442.0, 1.0),     // rhip -> rknee
            (2, 3, [0.0, 1.0, 0.0], 439.0, 1.0),     // rknee -> rankle
            (0, 4, [1.0, 0.0, 0.0], 132.0, 0.15),    // pelvis -> lhip
            (4, 5, [0.0, 1.0, 0.0], 442.0, 1.0),     // lhip -> lknee
            (5, 6, [0.0, 1.0, 0.0], 439.0, 1.0),     // lknee -> lankle
            (0, 7, [0.0, -1.0, 0.0], 233.0, 0.3),    // pelvis -> spine
            (7, 8, [0.0, -1.0, 0.0], 257.0, 0.3),    // spine -> thorax
            (8, 9, [0.0, -1.0, 0.0], 121.0, 0.3),    // thorax -> neck
            (9, 10, [0.0, -1.0, 0.0], 115.0, 0.3),   // neck -> head
            (8, 11, [1.0, -0.1, 0.0], 150.0, 0.15),  // thorax -> lshoulder
            (11, 12, [0.35, 0.94, 0.0], 279.0, 1.0), // lshoulder -> lelbow
            (12, 13, [0.2, 0.98, 0.0], 252.0, 1.0),  // lelbow -> lwrist
            (8, 14, [-1.0, -0.1, 0.0], 150.0, 0.15), // thorax -> rshoulder
            (14, 15, [-0.35, 0.94, 0.0], 279.0, 1.0),// rshoulder -> relbow
            (15, 16, [-0.2, 0.98, 0.0], 252.0, 1.0), // relbow -> rwrist
        ];
        Skeleton {
            joint_names: names.iter().map(|s| s.to_string()).collect(),
            root: 0,
            bones: spec
                .iter()
                .map(|&(parent, child, dir, length, motion_gain)| Bone {
                    parent,
                    child,
                    rest_dir: Vector3::from(dir).normalize(),
                    length,
                    motion_gain,
                })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// dataset container
// ---------------------------------------------------------------------------

/// One motion sequence with paired 2D and 3D data.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub subject: u32,
    pub action: u32,
    pub camera: usize,
    pub frames: usize,
    /// `[frame][joint][xy]` pixels.
    pub px: Vec<f64>,
    /// `[frame][joint][xyz]` camera-space millimetres.
    pub mm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PoseDataset {
    pub joint_names: Vec<String>,
    pub cameras: Vec<CameraSpec>,
    pub sequences: Vec<Sequence>,
}

impl PoseDataset {
    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if j == 0 {
            return Err(data_err!("dataset has no joints"));
        }
        if self.cameras.is_empty() {
            return Err(data_err!("dataset has no cameras"));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.camera >= self.cameras.len() {
                return Err(data_err!("sequence {i} references missing camera {}", s.camera));
            }
            if s.frames == 0 {
                return Err(data_err!("sequence {i} has no frames"));
            }
            if s.px.len() != s.frames * j * 2 || s.mm.len() != s.frames * j * 3 {
                return Err(data_err!(
                    "sequence {i} block sizes ({} px, {} mm values) do not match \
                     {} frames x {j} joints",
                    s.px.len(),
                    s.mm.len(),
                    s.frames
                ));
            }
        }
        Ok(())
    }
}

const MAGIC: &str = "poseset v1";

/// Format a float for the header: plain `Display` round-trips through
/// parsing without loss.
fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub fn write_dataset(ds: &PoseDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("joints {}\n", ds.joints()));
    header.push_str(&format!("names {}\n", ds.joint_names.join(" ")));
    header.push_str(&format!("cameras {}\n", ds.cameras.len()));
    for (i, c) in ds.cameras.iter().enumerate() {
        header.push_str(&format!(
            "camera {i} {} {} {} {} {}\n",
            fmt_f(c.focal),
            fmt_f(c.cx),
            fmt_f(c.cy),
            fmt_f(c.width),
            fmt_f(c.height)
        ));
    }
    header.push_str(&format!("sequences {}\n", ds.sequences.len()));
    for (i, s) in ds.sequences.iter().enumerate() {
        header.push_str(&format!(
            "sequence {i} {} {} {} {}\n",
            s.subject, s.action, s.camera, s.frames
        ));
    }
    header.push_str("end\n");

    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| io_at(path, e))?);
    file.write_all(header.as_bytes())?;
    for s in &ds.sequences {
        for &v in &s.px {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in &s.mm {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Pull the next whitespace token off a header line.
fn take_tok<'a>(iter: &mut impl Iterator<Item = &'a str>, what: &str, line: &str) -> Result<&'a str> {
    iter.next()
        .ok_or_else(|| data_err!("header line {line:?}: missing {what}"))
}

fn parse_num<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T> {
    tok.parse()
        .map_err(|_| data_err!("cannot parse {what} from {tok:?}"))
}

pub fn read_dataset(path: &Path) -> Result<PoseDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).map_err(|e| io_at(path, e))?.read_to_end(&mut bytes)?;

    // Header is everything up to and including the "end" line.
    let end_marker: &[u8] = b"\nend\n";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or_else(|| data_err!("missing end-of-header marker (is this a poseset file?)"))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| data_err!("header is not valid UTF-8"))?;
    let payload = &bytes[end + end_marker.len()..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != MAGIC {
        return Err(data_err!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        ));
    }

    let mut joint_names: Vec<String> = Vec::new();
    let mut cameras: Vec<CameraSpec> = Vec::new();
    let mut seq_meta: Vec<(u32, u32, usize, usize)> = Vec::new();
    let mut declared_joints = 0usize;

    for line in lines {
        let mut toks = line.split_whitespace();
        let Some(key) = toks.next() else { continue };
        match key {
            "joints" => {
                declared_joints = parse_num(take_tok(&mut toks, "count", line)?, "joint count")?;
            }
            "names" => {
                joint_names = toks.map(str::to_string).collect();
            }
            "cameras" | "sequences" => {
                // Counts are implied by the camera/sequence lines; validated below.
            }
            "camera" => {
                let _idx: usize = parse_num(take_tok(&mut toks, "index", line)?, "camera index")?;
                let focal = parse_num(take_tok(&mut toks, "focal", line)?, "focal")?;
                let cx = parse_num(take_tok(&mut toks, "cx", line)?, "cx")?;
                let cy = parse_num(take_tok(&mut toks, "cy", line)?, "cy")?;
                let width = parse_num(take_tok(&mut toks, "width", line)?, "width")?;
                let height = parse_num(take_tok(&mut toks, "height", line)?, "height")?;
                cameras.push(CameraSpec { focal, cx, cy, width, height });
            }
            "sequence" => {
                let _idx: usize = parse_num(take_tok(&mut toks, "index", line)?, "sequence index")?;
                let subject = parse_num(take_tok(&mut toks, "subject", line)?, "subject")?;
                let action = parse_num(take_tok(&mut toks, "action", line)?, "action")?;
                let camera = parse_num(take_tok(&mut toks, "camera", line)?, "camera ref")?;
                let frames = parse_num(take_tok(&mut toks, "frames", line)?, "frame count")?;
                seq_meta.push((subject, action, camera, frames));
            }
            other => return Err(data_err!("unknown header key {other:?}")),
        }
    }

    if joint_names.len() != declared_joints {
        return Err(data_err!(
            "header declares {declared_joints} joints but lists {} names",
            joint_names.len()
        ));
    }
    let j = declared_joints;
    if j == 0 {
        return Err(data_err!("dataset has no joints"));
    }

    let expected: usize = seq_meta.iter().map(|&(_, _, _, f)| f * j * 5 * 4).sum();
    if payload.len() < expected {
        return Err(data_err!(
            "payload truncated: expected {expected} bytes of tensor data, found {}",
            payload.len()
        ));
    }
    if payload.len() > expected {
        return Err(data_err!(
            "payload has {} trailing bytes beyond the declared blocks \
             (header/blocks dimension mismatch?)",
            payload.len() - expected
        ));
    }

    let mut offset = 0usize;
    let mut read_block = |count: usize| -> Vec<f64> {
        let out = payload[offset..offset + count * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset += count * 4;
        out
    };

    let mut sequences = Vec::with_capacity(seq_meta.len());
    for &(subject, action, camera, frames) in &seq_meta {
        let px = read_block(frames * j * 2);
        let mm = read_block(frames * j * 3);
        sequences.push(Sequence { subject, action, camera, frames, px, mm });
    }

    let ds = PoseDataset { joint_names, cameras, sequences };
    ds.validate()?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub sequences: usize,
    pub frames: usize,
    /// Overall motion scale. 0 produces static sequences; 1 is a natural
    /// range; large values move faster and wider.
    pub amplitude: f64,
    /// Standard deviation, in pixels, of seeded Gaussian jitter added to
    /// the 2D observations — a stand-in for keypoint detector error. 0
    /// disables it. The 3D ground truth is never jittered.
    pub noise_px: f64,
    pub seed: u64,
    pub camera: CameraSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sequences: 8,
            frames: 81,
            amplitude: 1.0,
            noise_px: 0.0,
            seed: 0,
            camera: CameraSpec::synth_default(),
        }
    }
}

/// Keep projections at least this fraction of the frame away from the
/// border, so normalized coordinates stay within +-0.88 and shifted
/// evaluation offsets cannot push plausible inputs absurdly far out.
const FRUSTUM_MARGIN: f64 = 0.06;
/// Minimum depth for any joint, mm.
const MIN_DEPTH: f64 = 1000.0;
/// Per-sequence amplitude gains, cycled by sequence index. The mixture
/// spreads sequences across slow and fast motion so movement-range
/// breakdowns have meaningfully distinct bins.
const AMPLITUDE_CYCLE: [f64; 4] = [0.3, 0.6, 1.0, 1.6];

struct Harmonic {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Harmonic {
    fn eval(&self, tau: f64) -> f64 {
        self.amp * (std::f64::consts::TAU * self.freq * tau + self.phase).sin()
    }
}

struct BoneMotion {
    axis: Unit<Vector3<f64>>,
    harmonics: [Harmonic; 3],
}

impl BoneMotion {
    fn angle(&self, tau: f64) -> f64 {
        self.harmonics.iter().map(|h| h.eval(tau)).sum()
    }
}

fn draw_unit_axis(rng: &mut ChaCha8Rng) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

/// Base joint swing at amplitude 1, radians.
const BASE_SWING: f64 = 0.55;

fn draw_bone_motion(rng: &mut ChaCha8Rng, range: f64) -> BoneMotion {
    let axis = draw_unit_axis(rng);
    let raw: [f64; 3] = [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
    let total: f64 = raw.iter().sum();
    let harmonics = raw.map(|a| Harmonic {
        amp: a / total * range,
        freq: rng.gen_range(0.3..1.8),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    });
    BoneMotion { axis, harmonics }
}

/// One candidate sequence: seeded joint swings + seeded root trajectory,
/// forward kinematics, projection.
fn synth_sequence(
    skel: &Skeleton,
    cam: &CameraSpec,
    seed: u64,
    frames: usize,
    amp: f64,
    noise_px: f64,
) -> Sequence {
    let mut rng = chacha(seed);
    let motions: Vec<BoneMotion> = skel
        .bones
        .iter()
        .map(|b| draw_bone_motion(&mut rng, BASE_SWING * amp * b.motion_gain))
        .collect();

    // Root trajectory: a base position plus one harmonic per axis. Depth
    // variation gives perspective scale changes.
    let base = Vector3::new(
        rng.gen_range(-300.0..300.0),
        rng.gen_range(-150.0..150.0),
        rng.gen_range(3800.0..4600.0),
    );
    let traj: [Harmonic; 3] = [
        Harmonic {
            amp: amp * rng.gen_range(100.0..400.0),
            freq: rng.gen_range(0.2..0.9),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        Harmonic {
            amp: amp * rng.gen_range(50.0..150.0),
            freq: rng.gen_range(0.2..0.9),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        },
        Harmonic {
            amp: amp * rng.gen_range(150.0..450.0),
            freq: rng.gen_range(0.2..0.7),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        },
    ];

    let j = skel.joints();
    let mut px = Vec::with_capacity(frames * j * 2);
    let mut mm = Vec::with_capacity(frames * j * 3);
    let mut pos = vec![Vector3::zeros(); j];
    let mut rot = vec![UnitQuaternion::identity(); j];

    for f in 0..frames {
        let tau = f as f64 / frames as f64;
        pos[skel.root] = base
            + Vector3::new(traj[0].eval(tau), traj[1].eval(tau), traj[2].eval(tau));
        rot[skel.root] = UnitQuaternion::identity();
        for (b, m) in skel.bones.iter().zip(&motions) {
            let local = UnitQuaternion::from_axis_angle(&m.axis, m.angle(tau));
            rot[b.child] = rot[b.parent] * local;
            pos[b.child] = pos[b.parent] + rot[b.child] * (b.rest_dir * b.length);
        }
        for p in pos.iter() {
            let (x, y) = cam.project([p.x, p.y, p.z]);
            px.extend_from_slice(&[x, y]);
            mm.extend_from_slice(&[p.x, p.y, p.z]);
        }
    }
    if noise_px > 0.0 {
        // Observation jitter comes from its own stream so the underlying
        // motion is identical with and without it for a given seed.
        let mut nrng = chacha(derive_seed(seed, LABEL_NOISE));
        for c in px.chunks_exact_mut(2) {
            let (nx, ny) = gaussian_pair(&mut nrng);
            c[0] += noise_px * nx;
            c[1] += noise_px * ny;
        }
    }
    Sequence { subject: 0, action: 0, camera: 0, frames, px, mm }
}

/// Seed-derivation label for the observation-jitter stream.
const LABEL_NOISE: u64 = 0x6a6974746572;

/// One pair of independent standard normal draws (Box–Muller).
fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (-2.0 * u1.ln()).sqrt();
    (r * u2.cos(), r * u2.sin())
}

fn in_safe_frustum(seq: &Sequence, cam: &CameraSpec) -> bool {
    let (x_lo, x_hi) = (cam.width * FRUSTUM_MARGIN, cam.width * (1.0 - FRUSTUM_MARGIN));
    let (y_lo, y_hi) = (cam.height * FRUSTUM_MARGIN, cam.height * (1.0 - FRUSTUM_MARGIN));
    let px_ok = seq
        .px
        .chunks_exact(2)
        .all(|c| c[0] >= x_lo && c[0] <= x_hi && c[1] >= y_lo && c[1] <= y_hi);
    let depth_ok = seq.mm.chunks_exact(3).all(|c| c[2] >= MIN_DEPTH);
    px_ok && depth_ok
}

/// Generate a dataset. Deterministic in the full configuration; sequences
/// that leave the safe frustum are resampled from derived seeds.
pub fn generate(cfg: &SynthConfig, skel: &Skeleton) -> Result<PoseDataset> {
    if cfg.sequences == 0 || cfg.frames == 0 {
        return Err(config_err!("generation needs at least one sequence and one frame"));
    }
    if !cfg.amplitude.is_finite() || cfg.amplitude < 0.0 {
        return Err(config_err!("amplitude must be a non-negative number"));
    }
    if !cfg.noise_px.is_finite() || cfg.noise_px < 0.0 {
        return Err(config_err!("observation noise must be a non-negative number"));
    }
    let mut sequences = Vec::with_capacity(cfg.sequences);
    for s in 0..cfg.sequences {
        let gain = AMPLITUDE_CYCLE[s % AMPLITUDE_CYCLE.len()];
        let seq_seed = derive_seed(cfg.seed, s as u64);
        let mut found = None;
        for attempt in 0..64u64 {
            let candidate = synth_sequence(
                skel,
                &cfg.camera,
                derive_seed(seq_seed, attempt),
                cfg.frames,
                cfg.amplitude * gain,
                cfg.noise_px,
            );
            if in_safe_frustum(&candidate, &cfg.camera) {
                found = Some(candidate);
                break;
            }
        }
        let mut seq = found.ok_or_else(|| {
            data_err!(
                "sequence {s}: no in-frame motion found after 64 attempts; \
                 lower the amplitude"
            )
        })?;
        seq.subject = (s % AMPLITUDE_CYCLE.len()) as u32;
        seq.action = s as u32;
        sequences.push(seq);
    }
    Ok(PoseDataset {
        joint_names: skel.joint_names.clone(),
        cameras: vec![cfg.camera],
        sequences,
    })
}

// ---------------------------------------------------------------------------
// windows
// ---------------------------------------------------------------------------

/// One training/evaluation sample: a sanitized normalized 2D window and the
/// root-relative 3D pose of its centre frame.
#[derive(Debug, Clone)]
pub struct Window {
    pub seq2d: PoseSequence2D,
    pub target: Pose3D,
    /// Provenance, for sequence-level splits and reports.
    pub sequence: usize,
    pub frame: usize,
}

#[derive(Debug, Clone)]
pub struct WindowSet {
    pub windows: Vec<Window>,
    pub frames: usize,
    pub joints: usize,
    pub root: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Windows whose source sequence is in `keep` (sorted or not).
    pub fn subset(&self, keep: &[usize]) -> WindowSet {
        WindowSet {
            windows: self
                .windows
                .iter()
                .filter(|w| keep.contains(&w.sequence))
                .cloned()
                .collect(),
            frames: self.frames,
            joints: self.joints,
            root: self.root,
        }
    }
}

/// Slice every sequence into one window per frame. Edges replicate the
/// first/last frame so each frame has a full window centred on it.
/// Coordinates are normalized against the sequence's camera and sanitized
/// (see [`crate::encoding`]); targets are root-relative millimetres.
pub fn extract_windows(ds: &PoseDataset, frames: usize, root: usize) -> Result<WindowSet> {
    ds.validate()?;
    if frames % 2 == 0 {
        return Err(config_err!("window length must be odd, got {frames}"));
    }
    let j = ds.joints();
    if root >= j {
        return Err(config_err!("root joint {root} out of range for {j} joints"));
    }
    let half = frames / 2;

    let mut windows = Vec::with_capacity(ds.total_frames());
    for (si, seq) in ds.sequences.iter().enumerate() {
        let cam = &ds.cameras[seq.camera];
        // Normalize + sanitize the whole sequence once.
        let mut norm = Vec::with_capacity(seq.frames * j * 2);
        for c in seq.px.chunks_exact(2) {
            let (nx, ny) = normalize_coords(c[0], c[1], cam.width, cam.height)?;
            norm.push(sanitize_normalized(nx));
            norm.push(sanitize_normalized(ny));
        }
        for f in 0..seq.frames {
            let mut data = Vec::with_capacity(frames * j * 2);
            for off in 0..frames {
                // Clamped source frame: replicate at the edges.
                let src = (f + off).saturating_sub(half).min(seq.frames - 1);
                data.extend_from_slice(&norm[src * j * 2..(src + 1) * j * 2]);
            }
            let seq2d = PoseSequence2D::new(data, frames, j, root)?;
            let target =
                Pose3D::from_flat(&seq.mm[f * j * 3..(f + 1) * j * 3]).root_relative(root);
            windows.push(Window { seq2d, target, sequence: si, frame: f });
        }
    }
    Ok(WindowSet { windows, frames, joints: j, root })
}

/// Deterministic sequence-level split; validation gets at least one
/// sequence whenever the fraction is positive and there are two or more
/// sequences. Returns sorted (train, val) id lists.
pub fn split_sequences(count: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..count).collect();
    let mut rng = chacha(seed);
    // Fisher-Yates.
    for i in (1..ids.len()).rev() {
        let k = rng.gen_range(0..=i);
        ids.swap(i, k);
    }
    let mut n_val = (count as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && count >= 2 {
        n_val = n_val.clamp(1, count - 1);
    } else {
        n_val = n_val.min(count.saturating_sub(1));
    }
    let mut val: Vec<usize> = ids[..n_val].to_vec();
    let mut train: Vec<usize> = ids[n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
