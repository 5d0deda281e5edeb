//! Relative-information input encodings for 2D keypoint windows.
//!
//! A lifting model fed raw (absolute) keypoints learns the camera frame
//! along with the pose: translate every keypoint by the same offset and the
//! prediction drifts. The encodings here expose *relative* structure
//! directly:
//!
//! * **positional**: per frame, every joint minus the root joint of that
//!   frame — invariant to any constant shift of the frame;
//! * **temporal**: per joint, each frame combined with the centre frame of
//!   the window through a pairwise operator. The difference-family
//!   operators ([`TemporalOperator::Sub`] and friends) are shift-invariant;
//!   the product-family ones (inner product, cross product, cosine
//!   similarity) retain cross-frame relativity but not shift invariance.
//!
//! # Exact shift invariance
//!
//! Invariance of the difference encodings is made *bit-exact*, not just
//! approximate, by a pair of quantization rules:
//!
//! * normalized coordinates are rounded to `f32` and values below
//!   [`COORD_FLUSH`] are flushed to zero ([`sanitize_normalized`]), making
//!   every stored coordinate an integer multiple of 2^-52 with magnitude
//!   below 1;
//! * shift offsets are rounded to integer multiples of 2^-24
//!   ([`OffsetVector`]), magnitude well below 1.
//!
//! Coordinate-plus-offset then sits on the 2^-52 lattice with magnitude
//! under 2, so the sum is computed exactly in `f64`. A difference of two
//! exact sums rounds the same real number as the difference of the
//! unshifted coordinates, hence identical bits. The `f32` rounding costs
//! about 6e-8 in normalized units (well under a hundredth of a pixel for
//! any realistic camera), which is far below keypoint noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};

/// Normalized coordinates with magnitude below this are flushed to exactly
/// zero when sanitized. 2^-29: keeps every surviving `f32` coordinate on
/// the 2^-52 lattice (see module docs); geometrically ~0.0000002% of the
/// frame, far below any meaningful keypoint precision.
pub const COORD_FLUSH: f64 = 1.862645149230957e-9; // 2^-29

/// Offsets are rounded to integer multiples of this (2^-24).
pub const OFFSET_QUANTUM: f64 = 5.960464477539063e-8;

/// Map pixel coordinates to `[-1, 1]` per axis: `(2*px - w) / w` and
/// `(2*py - h) / h`. Pixels outside the frame map outside the unit box but
/// are still well-defined.
pub fn normalize_coords(px: f64, py: f64, width: f64, height: f64) -> Result<(f64, f64)> {
    if width <= 0.0 || height <= 0.0 {
        return Err(config_err!("frame size {width}x{height} must be positive"));
    }
    Ok(((2.0 * px - width) / width, (2.0 * py - height) / height))
}

/// Inverse of [`normalize_coords`].
pub fn denormalize_coords(nx: f64, ny: f64, width: f64, height: f64) -> (f64, f64) {
    ((nx * width + width) / 2.0, (ny * height + height) / 2.0)
}

/// Quantize a normalized coordinate for storage in a window: round to `f32`
/// precision and flush magnitudes below [`COORD_FLUSH`] to exactly zero.
pub fn sanitize_normalized(n: f64) -> f64 {
    let q = n as f32 as f64;
    if q.abs() < COORD_FLUSH {
        0.0
    } else {
        q
    }
}

/// A 2-D shift in normalized coordinates, quantized to the offset lattice
/// so that applying it to sanitized coordinates is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetVector {
    dx: f64,
    dy: f64,
}

impl OffsetVector {
    /// Quantize an arbitrary shift onto multiples of [`OFFSET_QUANTUM`].
    pub fn quantize(dx: f64, dy: f64) -> OffsetVector {
        let q = |v: f64| (v / OFFSET_QUANTUM).round() * OFFSET_QUANTUM;
        OffsetVector { dx: q(dx), dy: q(dy) }
    }

    /// Draw both components uniformly from `[-a, a]`.
    pub fn sample(rng: &mut ChaCha8Rng, a: f64) -> OffsetVector {
        if a == 0.0 {
            return OffsetVector { dx: 0.0, dy: 0.0 };
        }
        OffsetVector::quantize(rng.gen_range(-a..=a), rng.gen_range(-a..=a))
    }

    pub fn zero() -> OffsetVector {
        OffsetVector { dx: 0.0, dy: 0.0 }
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    /// Euclidean length, for reporting.
    pub fn magnitude(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

/// A window of 2D keypoints in sanitized normalized coordinates, laid out
/// `[T][J][2]`. The centre frame is the lifting target's frame; the root
/// joint anchors the positional encoding.
#[derive(Debug, Clone)]
pub struct PoseSequence2D {
    data: Vec<f64>,
    frames: usize,
    joints: usize,
    root: usize,
}

impl PoseSequence2D {
    /// `data` is `[T][J][2]` row-major, already normalized and sanitized.
    /// The window length must be odd so the centre frame is unambiguous.
    pub fn new(data: Vec<f64>, frames: usize, joints: usize, root: usize) -> Result<Self> {
        if frames == 0 || frames % 2 == 0 {
            return Err(config_err!("window length must be odd and positive, got {frames}"));
        }
        if joints == 0 {
            return Err(config_err!("window must have at least one joint"));
        }
        if root >= joints {
            return Err(config_err!("root joint {root} out of range for {joints} joints"));
        }
        if data.len() != frames * joints * 2 {
            return Err(config_err!(
                "window data has {} values, expected {}x{}x2 = {}",
                data.len(),
                frames,
                joints,
                frames * joints * 2
            ));
        }
        Ok(PoseSequence2D { data, frames, joints, root })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Index of the centre frame.
    pub fn center(&self) -> usize {
        self.frames / 2
    }

    #[inline]
    pub fn coord(&self, frame: usize, joint: usize) -> (f64, f64) {
        let i = (frame * self.joints + joint) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shift every keypoint by a quantized offset. With sanitized
    /// coordinates this is exact (see module docs), so difference encodings
    /// of the result are bit-identical to the unshifted ones.
    pub fn shifted(&self, offset: OffsetVector) -> PoseSequence2D {
        let mut out = self.clone();
        for i in (0..out.data.len()).step_by(2) {
            out.data[i] += offset.dx;
            out.data[i + 1] += offset.dy;
        }
        out
    }
}

/// Pairwise operator combining a frame's keypoint with the same joint's
/// centre-frame keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalOperator {
    /// Coordinate difference `k_t - k_c` (2 channels). Shift-invariant.
    Sub,
    /// Inner product `<k_t, k_c>` (1 channel).
    InnerProduct,
    /// 2-D cross product `x_t*y_c - y_t*x_c` (1 channel).
    CrossProduct,
    /// Cosine similarity (1 channel); zero when either vector is zero.
    CosineSim,
    /// Difference plus its elementwise square (4 channels). Shift-invariant.
    SubSquared,
    /// Difference inside a centred sub-window of the given odd length,
    /// zeros outside it (2 channels). Shift-invariant.
    SubWindowed(usize),
}

impl TemporalOperator {
    pub fn channels(&self) -> usize {
        match self {
            TemporalOperator::Sub | TemporalOperator::SubWindowed(_) => 2,
            TemporalOperator::SubSquared => 4,
            _ => 1,
        }
    }

    /// Whether encodings from this operator are invariant to a constant
    /// shift of the inputs.
    pub fn shift_invariant(&self) -> bool {
        matches!(
            self,
            TemporalOperator::Sub | TemporalOperator::SubSquared | TemporalOperator::SubWindowed(_)
        )
    }

    /// Parse the CLI/config spelling: `sub`, `ip`, `cp`, `cs`, `sub_sq`,
    /// `sub_win:<len>`.
    pub fn parse(s: &str) -> Result<TemporalOperator> {
        match s {
            "sub" => Ok(TemporalOperator::Sub),
            "ip" => Ok(TemporalOperator::InnerProduct),
            "cp" => Ok(TemporalOperator::CrossProduct),
            "cs" => Ok(TemporalOperator::CosineSim),
            "sub_sq" => Ok(TemporalOperator::SubSquared),
            _ => {
                if let Some(len) = s.strip_prefix("sub_win:") {
                    let len: usize = len
                        .parse()
                        .map_err(|_| config_err!("bad sub-window length in {s:?}"))?;
                    if len == 0 || len % 2 == 0 {
                        return Err(config_err!("sub-window length must be odd, got {len}"));
                    }
                    Ok(TemporalOperator::SubWindowed(len))
                } else {
                    Err(config_err!(
                        "unknown temporal operator {s:?} \
                         (expected sub | ip | cp | cs | sub_sq | sub_win:<len>)"
                    ))
                }
            }
        }
    }

    pub fn spelling(&self) -> String {
        match self {
            TemporalOperator::Sub => "sub".into(),
            TemporalOperator::InnerProduct => "ip".into(),
            TemporalOperator::CrossProduct => "cp".into(),
            TemporalOperator::CosineSim => "cs".into(),
            TemporalOperator::SubSquared => "sub_sq".into(),
            TemporalOperator::SubWindowed(len) => format!("sub_win:{len}"),
        }
    }
}

/// Positional encoding: per frame, every joint minus that frame's root
/// joint. Output `[T][J][2]`; the root's own rows are exactly zero.
pub fn positional_encode(seq: &PoseSequence2D) -> Vec<f64> {
    let mut out = vec![0.0; seq.frames * seq.joints * 2];
    for t in 0..seq.frames {
        let (rx, ry) = seq.coord(t, seq.root);
        for j in 0..seq.joints {
            let (x, y) = seq.coord(t, j);
            let i = (t * seq.joints + j) * 2;
            out[i] = x - rx;
            out[i + 1] = y - ry;
        }
    }
    out
}

/// Temporal encoding: per joint, each frame combined with the same joint at
/// the centre frame. Output `[T][J][C]` where `C = op.channels()`.
pub fn temporal_encode(seq: &PoseSequence2D, op: TemporalOperator) -> Result<Vec<f64>> {
    if let TemporalOperator::SubWindowed(len) = op {
        if len % 2 == 0 || len == 0 {
            return Err(config_err!("sub-window length must be odd, got {len}"));
        }
    }
    let c = op.channels();
    let center = seq.center();
    let mut out = vec![0.0; seq.frames * seq.joints * c];
    for t in 0..seq.frames {
        for j in 0..seq.joints {
            let (x, y) = seq.coord(t, j);
            let (cx, cy) = seq.coord(center, j);
            let o = (t * seq.joints + j) * c;
            match op {
                TemporalOperator::Sub => {
                    out[o] = x - cx;
                    out[o + 1] = y - cy;
                }
                TemporalOperator::InnerProduct => {
                    out[o] = x * cx + y * cy;
                }
                TemporalOperator::CrossProduct => {
                    out[o] = x * cy - y * cx;
                }
                TemporalOperator::CosineSim => {
                    let na = x.hypot(y);
                    let nb = cx.hypot(cy);
                    out[o] = if na > 0.0 && nb > 0.0 {
                        (x * cx + y * cy) / (na * nb)
                    } else {
                        0.0
                    };
                }
                TemporalOperator::SubSquared => {
                    let dx = x - cx;
                    let dy = y - cy;
                    out[o] = dx;
                    out[o + 1] = dy;
                    out[o + 2] = dx * dx;
                    out[o + 3] = dy * dy;
                }
                TemporalOperator::SubWindowed(len) => {
                    let radius = len / 2;
                    if t.abs_diff(center) <= radius {
                        out[o] = x - cx;
                        out[o + 1] = y - cy;
                    }
                    // outside the sub-window both channels stay zero
                }
            }
        }
    }
    Ok(out)
}

/// Which input families the model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputFlags {
    /// Raw absolute normalized keypoints.
    pub absolute: bool,
    /// Positional (root-relative) encoding.
    pub positional: bool,
    /// Temporal (centre-frame-relative) encoding.
    pub temporal: bool,
}

impl InputFlags {
    pub fn all() -> Self {
        InputFlags { absolute: true, positional: true, temporal: true }
    }

    /// Parse a comma-separated subset of `abs,pos,temp`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut flags = InputFlags { absolute: false, positional: false, temporal: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "abs" => flags.absolute = true,
                "pos" => flags.positional = true,
                "temp" => flags.temporal = true,
                other => return Err(config_err!("unknown input flag {other:?}")),
            }
        }
        if flags == (InputFlags { absolute: false, positional: false, temporal: false }) {
            return Err(config_err!("at least one input family must be enabled"));
        }
        Ok(flags)
    }

    pub fn spelling(&self) -> String {
        let mut parts = Vec::new();
        if self.absolute {
            parts.push("abs");
        }
        if self.positional {
            parts.push("pos");
        }
        if self.temporal {
            parts.push("temp");
        }
        parts.join(",")
    }

    /// Channels per joint given a temporal operator.
    pub fn channels(&self, op: TemporalOperator) -> usize {
        let mut c = 0;
        if self.absolute {
            c += 2;
        }
        if self.positional {
            c += 2;
        }
        if self.temporal {
            c += op.channels();
        }
        c
    }
}

/// A window's model-ready input: `[T][J][C]` with the channel order
/// (absolute, positional, temporal) for whichever families are enabled.
#[derive(Debug, Clone)]
pub struct EnhancedInput {
    pub data: Vec<f64>,
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
}

/// Build the enhanced input for one window.
pub fn assemble_input(
    seq: &PoseSequence2D,
    flags: InputFlags,
    op: TemporalOperator,
) -> Result<EnhancedInput> {
    let c = flags.channels(op);
    if c == 0 {
        return Err(config_err!("at least one input family must be enabled"));
    }
    let (t, j) = (seq.frames(), seq.joints());
    let pos = flags.positional.then(|| positional_encode(seq));
    let temp = if flags.temporal { Some(temporal_encode(seq, op)?) } else { None };
    let ct = op.channels();

    let mut data = vec![0.0; t * j * c];
    for ti in 0..t {
        for ji in 0..j {
            let mut o = (ti * j + ji) * c;
            if flags.absolute {
                let (x, y) = seq.coord(ti, ji);
                data[o] = x;
                data[o + 1] = y;
                o += 2;
            }
            if let Some(p) = &pos {
                let i = (ti * j + ji) * 2;
                data[o] = p[i];
                data[o + 1] = p[i + 1];
                o += 2;
            }
            if let Some(tp) = &temp {
                let i = (ti * j + ji) * ct;
                data[o..o + ct].copy_from_slice(&tp[i..i + ct]);
            }
        }
    }
    Ok(EnhancedInput { data, frames: t, joints: j, channels: c })
}

impl EnhancedInput {
    #[inline]
    pub fn at(&self, frame: usize, joint: usize, channel: usize) -> f64 {
        self.data[(frame * self.joints + joint) * self.channels + channel]
    }

    /// Repack a subset of joints into the `[J_g * C, T]` layout a temporal
    /// encoder consumes (channels of one joint contiguous).
    pub fn group_rows(&self, joint_ids: &[usize]) -> Vec<f64> {
        let rows = joint_ids.len() * self.channels;
        let mut out = vec![0.0; rows * self.frames];
        for (gi, &j) in joint_ids.iter().enumerate() {
            for ch in 0..self.channels {
                let row = gi * self.channels + ch;
                for t in 0..self.frames {
                    out[row * self.frames + t] = self.at(t, j, ch);
                }
            }
        }
        out
    }

    /// The centre frame's channels for a set of joints, flattened in joint
    /// order — the global encoder's input.
    pub fn center_frame_rows(&self, joint_ids: &[usize]) -> Vec<f64> {
        let c = self.frames / 2;
        let mut out = Vec::with_capacity(joint_ids.len() * self.channels);
        for &j in joint_ids {
            for ch in 0..self.channels {
                out.push(self.at(c, j, ch));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chacha;

    /// 3 frames x 3 joints; root = joint 0. Values chosen exactly
    /// representable so hand-computed expectations are exact.
    fn tiny_seq() -> PoseSequence2D {
        #[rustfmt::skip]
        let data = vec![
            // frame 0: root (0.25, 0.5), j1 (0.5, 0.5), j2 (-0.25, 0.0)
            0.25, 0.5,   0.5, 0.5,   -0.25, 0.0,
            // frame 1 (centre): root (0.0, 0.25), j1 (0.5, 0.75), j2 (0.25, -0.5)
            0.0, 0.25,   0.5, 0.75,   0.25, -0.5,
            // frame 2: root (-0.5, 0.0), j1 (0.0, 1.0), j2 (0.5, 0.5)
            -0.5, 0.0,   0.0, 1.0,   0.5, 0.5,
        ];
        PoseSequence2D::new(data, 3, 3, 0).unwrap()
    }

    #[test]
    fn normalize_round_trip_is_tight() {
        let (w, h) = (1000.0, 1002.0);
        for &(px, py) in &[(123.456, 789.012), (0.0, 0.0), (999.999, 1.5)] {
            let (nx, ny) = normalize_coords(px, py, w, h).unwrap();
            assert!(nx.abs() <= 1.0 && ny.abs() <= 1.0);
            let (bx, by) = denormalize_coords(nx, ny, w, h);
            assert!((bx - px).abs() < 1e-12 && (by - py).abs() < 1e-12);
        }
        assert!(normalize_coords(1.0, 1.0, 0.0, 100.0).is_err());
    }

    #[test]
    fn normalize_maps_frame_to_unit_box() {
        let (nx, ny) = normalize_coords(0.0, 500.0, 1000.0, 1000.0).unwrap();
        assert_eq!((nx, ny), (-1.0, 0.0));
        let (nx, ny) = normalize_coords(1000.0, 1000.0, 1000.0, 1000.0).unwrap();
        assert_eq!((nx, ny), (1.0, 1.0));
    }

    #[test]
    fn sanitize_flushes_tiny_values_and_rounds_to_f32() {
        assert_eq!(sanitize_normalized(1e-10), 0.0);
        assert_eq!(sanitize_normalized(-1e-12), 0.0);
        assert_eq!(sanitize_normalized(0.0), 0.0);
        let v = 0.123456789123;
        assert_eq!(sanitize_normalized(v), v as f32 as f64);
        // At or above the flush threshold values survive.
        assert_ne!(sanitize_normalized(COORD_FLUSH), 0.0);
    }

    #[test]
    fn offsets_land_on_the_quantum_lattice() {
        let o = OffsetVector::quantize(0.1234567, -0.0765432);
        let kx = o.dx() / OFFSET_QUANTUM;
        let ky = o.dy() / OFFSET_QUANTUM;
        assert_eq!(kx, kx.round());
        assert_eq!(ky, ky.round());
        assert!((o.dx() - 0.1234567).abs() < OFFSET_QUANTUM);
        assert!((o.dy() + 0.0765432).abs() < OFFSET_QUANTUM);
    }

    #[test]
    fn sampled_offsets_respect_magnitude_bound() {
        let mut rng = chacha(9);
        for _ in 0..100 {
            let o = OffsetVector::sample(&mut rng, 0.2);
            assert!(o.dx().abs() <= 0.2 + OFFSET_QUANTUM);
            assert!(o.dy().abs() <= 0.2 + OFFSET_QUANTUM);
        }
        let z = OffsetVector::sample(&mut rng, 0.0);
        assert_eq!(z, OffsetVector::zero());
    }

    #[test]
    fn positional_encoding_hand_case() {
        let s = tiny_seq();
        let p = positional_encode(&s);
        // Root rows are exactly zero in every frame.
        for t in 0..3 {
            assert_eq!(p[(t * 3) * 2], 0.0);
            assert_eq!(p[(t * 3) * 2 + 1], 0.0);
        }
        // Frame 0, joint 1: (0.5, 0.5) - (0.25, 0.5) = (0.25, 0.0).
        assert_eq!(&p[2..4], &[0.25, 0.0]);
        // Frame 2, joint 2: (0.5, 0.5) - (-0.5, 0.0) = (1.0, 0.5).
        assert_eq!(&p[(2 * 3 + 2) * 2..(2 * 3 + 2) * 2 + 2], &[1.0, 0.5]);
    }

    #[test]
    fn temporal_sub_hand_case() {
        let s = tiny_seq();
        let t = temporal_encode(&s, TemporalOperator::Sub).unwrap();
        // Centre frame rows are exactly zero.
        for j in 0..3 {
            assert_eq!(t[(3 + j) * 2], 0.0);
            assert_eq!(t[(3 + j) * 2 + 1], 0.0);
        }
        // Frame 0, joint 2: (-0.25, 0.0) - (0.25, -0.5) = (-0.5, 0.5).
        assert_eq!(&t[(2) * 2..(2) * 2 + 2], &[-0.5, 0.5]);
        // Frame 2, joint 1: (0.0, 1.0) - (0.5, 0.75) = (-0.5, 0.25).
        assert_eq!(&t[(2 * 3 + 1) * 2..(2 * 3 + 1) * 2 + 2], &[-0.5, 0.25]);
    }

    #[test]
    fn temporal_product_operators_hand_cases() {
        let s = tiny_seq();
        // Frame 0 joint 1: a = (0.5, 0.5); centre joint 1: b = (0.5, 0.75).
        let ip = temporal_encode(&s, TemporalOperator::InnerProduct).unwrap();
        assert_eq!(ip[1], 0.5 * 0.5 + 0.5 * 0.75);
        let cp = temporal_encode(&s, TemporalOperator::CrossProduct).unwrap();
        assert_eq!(cp[1], 0.5 * 0.75 - 0.5 * 0.5);
        let cs = temporal_encode(&s, TemporalOperator::CosineSim).unwrap();
        let want = (0.5 * 0.5 + 0.5 * 0.75)
            / (0.5f64.hypot(0.5) * 0.5f64.hypot(0.75));
        assert!((cs[1] - want).abs() < 1e-15);
        // Cosine with a zero vector is defined as 0: root at centre frame
        // compared against frame 1's root (0,0.25)... build a seq with a
        // zero keypoint instead.
        let mut data = vec![0.1; 3 * 1 * 2];
        data[2] = 0.0; // centre frame x
        data[3] = 0.0; // centre frame y
        let z = PoseSequence2D::new(data, 3, 1, 0).unwrap();
        let cs = temporal_encode(&z, TemporalOperator::CosineSim).unwrap();
        assert_eq!(cs[0], 0.0);
    }

    #[test]
    fn temporal_sub_squared_appends_squares() {
        let s = tiny_seq();
        let t = temporal_encode(&s, TemporalOperator::SubSquared).unwrap();
        // Frame 0, joint 2: diff (-0.5, 0.5) -> (-0.5, 0.5, 0.25, 0.25).
        assert_eq!(&t[2 * 4..2 * 4 + 4], &[-0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn temporal_sub_windowed_zeroes_outside_window() {
        // 5 frames, 1 joint, window length 3 -> only frames 1..=3 active.
        let data: Vec<f64> = (0..5).flat_map(|t| [t as f64 * 0.1, 0.0]).collect();
        let s = PoseSequence2D::new(data, 5, 1, 0).unwrap();
        let t = temporal_encode(&s, TemporalOperator::SubWindowed(3)).unwrap();
        assert_eq!(&t[0..2], &[0.0, 0.0], "frame 0 outside sub-window");
        assert!((t[2] - (-0.1)).abs() < 1e-15, "frame 1 active");
        assert_eq!(&t[8..10], &[0.0, 0.0], "frame 4 outside sub-window");
        assert!(temporal_encode(&s, TemporalOperator::SubWindowed(4)).is_err());
    }

    #[test]
    fn operator_parsing_round_trips() {
        for s in ["sub", "ip", "cp", "cs", "sub_sq", "sub_win:81"] {
            let op = TemporalOperator::parse(s).unwrap();
            assert_eq!(op.spelling(), s);
        }
        assert!(TemporalOperator::parse("sub_win:80").is_err());
        assert!(TemporalOperator::parse("norm").is_err());
    }

    #[test]
    fn input_flags_parse_and_count_channels() {
        let f = InputFlags::parse("abs,pos,temp").unwrap();
        assert_eq!(f, InputFlags::all());
        assert_eq!(f.channels(TemporalOperator::Sub), 6);
        assert_eq!(f.channels(TemporalOperator::SubSquared), 8);
        let p = InputFlags::parse("pos").unwrap();
        assert_eq!(p.channels(TemporalOperator::Sub), 2);
        assert!(InputFlags::parse("").is_err());
        assert!(InputFlags::parse("abs,bogus").is_err());
    }

    #[test]
    fn assemble_orders_channels_abs_pos_temp() {
        let s = tiny_seq();
        let e = assemble_input(&s, InputFlags::all(), TemporalOperator::Sub).unwrap();
        assert_eq!(e.channels, 6);
        // Frame 0, joint 1: abs (0.5, 0.5); pos (0.25, 0.0);
        // temp = (0.5,0.5) - (0.5,0.75) = (0.0, -0.25).
        let got: Vec<f64> = (0..6).map(|c| e.at(0, 1, c)).collect();
        assert_eq!(got, vec![0.5, 0.5, 0.25, 0.0, 0.0, -0.25]);

        // pos+temp only: absolute channels disappear, order preserved.
        let f = InputFlags { absolute: false, positional: true, temporal: true };
        let e2 = assemble_input(&s, f, TemporalOperator::Sub).unwrap();
        assert_eq!(e2.channels, 4);
        let got: Vec<f64> = (0..4).map(|c| e2.at(0, 1, c)).collect();
        assert_eq!(got, vec![0.25, 0.0, 0.0, -0.25]);
    }

    #[test]
    fn group_rows_layout_is_joint_major_channel_then_time() {
        let s = tiny_seq();
        let e = assemble_input(
            &s,
            InputFlags { absolute: true, positional: false, temporal: false },
            TemporalOperator::Sub,
        )
        .unwrap();
        let rows = e.group_rows(&[2, 0]);
        // Row 0 = joint 2 channel x over time: (-0.25, 0.25, 0.5).
        assert_eq!(&rows[0..3], &[-0.25, 0.25, 0.5]);
        // Row 2 = joint 0 channel x over time: (0.25, 0.0, -0.5).
        assert_eq!(&rows[6..9], &[0.25, 0.0, -0.5]);
        // Centre-frame extraction for the same joints.
        assert_eq!(e.center_frame_rows(&[2, 0]), vec![0.25, -0.5, 0.0, 0.25]);
    }

    #[test]
    fn window_constructor_validates() {
        assert!(PoseSequence2D::new(vec![0.0; 12], 2, 3, 0).is_err(), "even window");
        assert!(PoseSequence2D::new(vec![0.0; 6], 3, 1, 1).is_err(), "root out of range");
        assert!(PoseSequence2D::new(vec![0.0; 5], 3, 1, 0).is_err(), "bad length");
    }

    /// Build a sanitized random window the way the data pipeline would.
    fn random_sanitized_seq(seed: u64, frames: usize, joints: usize) -> PoseSequence2D {
        let mut rng = chacha(seed);
        let data: Vec<f64> = (0..frames * joints * 2)
            .map(|_| sanitize_normalized(rng.gen_range(-0.85..0.85)))
            .collect();
        PoseSequence2D::new(data, frames, joints, 0).unwrap()
    }

    #[test]
    fn difference_encodings_are_bit_exact_under_shift() {
        for seed in 0..20u64 {
            let s = random_sanitized_seq(seed, 9, 5);
            let mut rng = chacha(1000 + seed);
            let off = OffsetVector::sample(&mut rng, 0.2);
            let shifted = s.shifted(off);
            for op in [
                TemporalOperator::Sub,
                TemporalOperator::SubSquared,
                TemporalOperator::SubWindowed(5),
            ] {
                let a = temporal_encode(&s, op).unwrap();
                let b = temporal_encode(&shifted, op).unwrap();
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a), bits(&b), "op {op:?} seed {seed} offset {off:?}");
            }
            let pa = positional_encode(&s);
            let pb = positional_encode(&shifted);
            assert_eq!(
                pa.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                pb.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                "positional, seed {seed}"
            );
        }
    }

    #[test]
    fn product_operators_are_not_shift_invariant() {
        // Sanity check that the invariance above is a property of the
        // difference family, not an accident of the test data.
        let s = random_sanitized_seq(3, 9, 5);
        let off = OffsetVector::quantize(0.15, -0.1);
        let shifted = s.shifted(off);
        let a = temporal_encode(&s, TemporalOperator::InnerProduct).unwrap();
        let b = temporal_encode(&shifted, TemporalOperator::InnerProduct).unwrap();
        assert_ne!(a, b);
        assert!(!TemporalOperator::InnerProduct.shift_invariant());
        assert!(TemporalOperator::Sub.shift_invariant());
    }
}
