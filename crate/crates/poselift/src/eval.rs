//! Evaluation protocols: joint position error, rigid-alignment error,
//! robustness to keypoint translation, and movement-range stratification.
//!
//! All errors are in millimetres on root-relative poses. The shift
//! experiment re-runs inference on inputs translated by small normalized
//! offsets and reports both the error under shift and the *consistency
//! gap* — how far the predictions themselves moved. Networks fed only
//! relative encodings are translation-invariant by construction, so their
//! gap is exactly zero; absolute inputs make it positive.

use nalgebra::{Matrix3, Vector3};

use crate::data::{Pose3D, Window};
use crate::encoding::{OffsetVector, PoseSequence2D};
use crate::error::{config_err, numerical_err, Result};
use crate::model::Model;
use crate::nn::Phase;
use crate::rng::{chacha, derive_seed};

// ---------------------------------------------------------------------------
// core metrics
// ---------------------------------------------------------------------------

/// Mean per-joint position error: Euclidean distance averaged over all
/// joints of all poses.
pub fn mpjpe(pred: &[Pose3D], target: &[Pose3D]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(config_err!(
            "need matching non-empty pose lists, got {} and {}",
            pred.len(),
            target.len()
        ));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        if p.joints.len() != t.joints.len() {
            return Err(config_err!("pose joint counts differ"));
        }
        for (a, b) in p.joints.iter().zip(&t.joints) {
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Align `pred` onto `target` with the similarity transform (rotation,
/// uniform scale, translation) minimizing the summed squared joint
/// distance, and return the transformed pose. Reflections are not
/// admitted. A degenerate prediction (all joints coincident) collapses to
/// the target centroid, the best a pure translation can do.
pub fn procrustes_align(pred: &Pose3D, target: &Pose3D) -> Result<Pose3D> {
    let j = pred.joints.len();
    if j != target.joints.len() || j == 0 {
        return Err(config_err!(
            "cannot align a {}-joint pose to a {}-joint pose",
            j,
            target.joints.len()
        ));
    }
    let centroid = |p: &Pose3D| {
        let mut c = Vector3::zeros();
        for q in &p.joints {
            c += Vector3::new(q[0], q[1], q[2]);
        }
        c / j as f64
    };
    let mu_x = centroid(pred);
    let mu_y = centroid(target);

    let mut h = Matrix3::zeros();
    let mut ssx = 0.0;
    for (p, t) in pred.joints.iter().zip(&target.joints) {
        let xc = Vector3::new(p[0], p[1], p[2]) - mu_x;
        let yc = Vector3::new(t[0], t[1], t[2]) - mu_y;
        h += xc * yc.transpose();
        ssx += xc.norm_squared();
    }

    if ssx == 0.0 {
        return Ok(Pose3D { joints: vec![[mu_y.x, mu_y.y, mu_y.z]; j] });
    }

    let svd = h.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(numerical_err!("singular value decomposition failed")),
    };
    let v = v_t.transpose();
    // Proper rotation only: flip the least-significant axis if V*U^T would
    // be a reflection.
    let d = if (v * u.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
    let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * dm * u.transpose();
    let sv = svd.singular_values;
    let scale = (sv[0] + sv[1] + d * sv[2]) / ssx;

    let joints = pred
        .joints
        .iter()
        .map(|p| {
            let xc = Vector3::new(p[0], p[1], p[2]) - mu_x;
            let y = scale * (r * xc) + mu_y;
            [y.x, y.y, y.z]
        })
        .collect();
    Ok(Pose3D { joints })
}

/// Position error after per-pose similarity alignment.
pub fn p_mpjpe(pred: &[Pose3D], target: &[Pose3D]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(config_err!(
            "need matching non-empty pose lists, got {} and {}",
            pred.len(),
            target.len()
        ));
    }
    let aligned: Result<Vec<Pose3D>> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| procrustes_align(p, t))
        .collect();
    mpjpe(&aligned?, target)
}

/// How much a window's keypoints move: mean distance of every joint in
/// every frame from its position in the centre frame (normalized units).
pub fn movement_range(seq: &PoseSequence2D) -> f64 {
    let (t, j, c) = (seq.frames(), seq.joints(), seq.center());
    let mut sum = 0.0;
    for f in 0..t {
        for ji in 0..j {
            let (x, y) = seq.coord(f, ji);
            let (cx, cy) = seq.coord(c, ji);
            sum += ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        }
    }
    sum / (t * j) as f64
}

// ---------------------------------------------------------------------------
// batched inference
// ---------------------------------------------------------------------------

/// Run the network over windows in eval mode and return root-relative
/// poses. Results are independent of `batch`: normalization uses running
/// statistics, so no cross-window coupling exists at inference time.
pub fn predict(model: &Model, windows: &[&Window], batch: usize) -> Result<Vec<Pose3D>> {
    if batch == 0 {
        return Err(config_err!("batch size must be positive"));
    }
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch) {
        let b = model.prepare_batch(chunk)?;
        let pred = model.forward(&b, &Phase::Eval)?;
        let shape = pred.shape().to_vec();
        let data = pred.to_vec();
        let j = shape[1];
        for bi in 0..shape[0] {
            let joints = (0..j)
                .map(|ji| {
                    let o = (bi * j + ji) * 3;
                    [data[o], data[o + 1], data[o + 2]]
                })
                .collect();
            out.push(Pose3D { joints });
        }
    }
    Ok(out)
}

fn targets_of(windows: &[&Window]) -> Vec<Pose3D> {
    windows.iter().map(|w| w.target.clone()).collect()
}

/// Standard evaluation: position error and aligned position error.
pub struct EvalReport {
    pub windows: usize,
    pub mpjpe: f64,
    pub p_mpjpe: f64,
}

pub fn evaluate(model: &Model, windows: &[&Window], batch: usize) -> Result<EvalReport> {
    let pred = predict(model, windows, batch)?;
    let gt = targets_of(windows);
    Ok(EvalReport {
        windows: windows.len(),
        mpjpe: mpjpe(&pred, &gt)?,
        p_mpjpe: p_mpjpe(&pred, &gt)?,
    })
}

// ---------------------------------------------------------------------------
// shift robustness
// ---------------------------------------------------------------------------

/// One translated re-run of the evaluation set.
pub struct ShiftSample {
    pub offset: OffsetVector,
    /// Position error of the shifted predictions against the targets,
    /// over the windows that stayed in frame.
    pub mpjpe: f64,
    /// Mean joint distance between shifted and unshifted predictions.
    pub consistency_gap: f64,
    /// Windows excluded because the offset pushed a keypoint outside the
    /// open unit box (-1, 1).
    pub skipped: usize,
}

pub struct ShiftReport {
    pub base_mpjpe: f64,
    pub samples: Vec<ShiftSample>,
}

impl ShiftReport {
    pub fn mean_gap(&self) -> f64 {
        self.samples.iter().map(|s| s.consistency_gap).sum::<f64>() / self.samples.len() as f64
    }

    pub fn mean_shifted_mpjpe(&self) -> f64 {
        self.samples.iter().map(|s| s.mpjpe).sum::<f64>() / self.samples.len() as f64
    }
}

/// The standard offset panel: a zero-offset control row followed by
/// `count` random offsets with coordinates in [-a, a].
pub fn sample_offsets(a: f64, count: usize, seed: u64) -> Vec<OffsetVector> {
    let mut out = vec![OffsetVector::zero()];
    for i in 0..count {
        let mut rng = chacha(derive_seed(seed, i as u64));
        out.push(OffsetVector::sample(&mut rng, a));
    }
    out
}

fn in_unit_box(seq: &PoseSequence2D) -> bool {
    (0..seq.frames()).all(|f| {
        (0..seq.joints()).all(|j| {
            let (x, y) = seq.coord(f, j);
            x.abs() < 1.0 && y.abs() < 1.0
        })
    })
}

/// Re-run inference under each keypoint translation. The same windows,
/// the same network — only the inputs move. Windows that an offset pushes
/// out of the normalized frame are skipped for that offset (and counted);
/// an offset that evicts every window reports NaN metrics.
pub fn shift_experiment(
    model: &Model,
    windows: &[&Window],
    offsets: &[OffsetVector],
    batch: usize,
) -> Result<ShiftReport> {
    if offsets.is_empty() {
        return Err(config_err!("need at least one offset"));
    }
    let base = predict(model, windows, batch)?;
    let gt = targets_of(windows);
    let base_mpjpe = mpjpe(&base, &gt)?;

    let mut samples = Vec::with_capacity(offsets.len());
    for &offset in offsets {
        let mut kept_idx = Vec::with_capacity(windows.len());
        let mut shifted_windows = Vec::with_capacity(windows.len());
        for (i, w) in windows.iter().enumerate() {
            let seq2d = w.seq2d.shifted(offset);
            if !in_unit_box(&seq2d) {
                continue;
            }
            kept_idx.push(i);
            shifted_windows.push(Window {
                seq2d,
                target: w.target.clone(),
                sequence: w.sequence,
                frame: w.frame,
            });
        }
        let skipped = windows.len() - kept_idx.len();
        if kept_idx.is_empty() {
            samples.push(ShiftSample {
                offset,
                mpjpe: f64::NAN,
                consistency_gap: f64::NAN,
                skipped,
            });
            continue;
        }
        let refs: Vec<&Window> = shifted_windows.iter().collect();
        let shifted = predict(model, &refs, batch)?;
        let kept_gt: Vec<Pose3D> = kept_idx.iter().map(|&i| gt[i].clone()).collect();
        let kept_base: Vec<Pose3D> = kept_idx.iter().map(|&i| base[i].clone()).collect();
        samples.push(ShiftSample {
            offset,
            mpjpe: mpjpe(&shifted, &kept_gt)?,
            consistency_gap: mpjpe(&shifted, &kept_base)?,
            skipped,
        });
    }
    Ok(ShiftReport { base_mpjpe, samples })
}

// ---------------------------------------------------------------------------
// movement-range stratification
// ---------------------------------------------------------------------------

pub struct MrBin {
    /// Movement-range bounds of the windows in this bin.
    pub mr_low: f64,
    pub mr_high: f64,
    pub count: usize,
    pub mpjpe: f64,
}

/// Split windows into `bins` movement-range strata of (near-)equal size —
/// sorted ascending, remainder windows going to the largest-range bins —
/// and report the position error within each.
pub fn mr_stratified(
    model: &Model,
    windows: &[&Window],
    bins: usize,
    batch: usize,
) -> Result<Vec<MrBin>> {
    if bins == 0 || windows.len() < bins {
        return Err(config_err!(
            "cannot form {bins} bins from {} windows",
            windows.len()
        ));
    }
    let mut ranked: Vec<(f64, &Window)> = windows
        .iter()
        .map(|w| (movement_range(&w.seq2d), *w))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));

    let base = windows.len() / bins;
    let remainder = windows.len() % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        // The first `bins - remainder` bins take `base` windows, the rest
        // take one extra.
        let size = base + usize::from(b >= bins - remainder);
        let slice = &ranked[start..start + size];
        start += size;
        let refs: Vec<&Window> = slice.iter().map(|(_, w)| *w).collect();
        let pred = predict(model, &refs, batch)?;
        let gt = targets_of(&refs);
        out.push(MrBin {
            mr_low: slice.first().unwrap().0,
            mr_high: slice.last().unwrap().0,
            count: size,
            mpjpe: mpjpe(&pred, &gt)?,
        });
    }
    Ok(out)
}
