//! Training windows: IoU banding, per-stage angle labels, jittered face
//! crops from rotated views, random negatives and cascade-mined hard
//! negatives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, OrientLabel, SampleBand, StageId, StageLabels, StageOutput};
use crate::error::{PcnError, Result};
use crate::geometry::{
    bbox_apply, bbox_targets, iou, normalize_deg, rotated_crop_resize, sin_cos_deg, Box, ImageBuffer,
};
use crate::pipeline::{sanitize_regression, DetectConfig};
use crate::tensor::Tensor;

use super::corpus::{ImageSource, LabeledImage};
use super::synth::{self, FaceAnnotation};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Network input, `(3, side, side)` in `[-1, 1]`.
    pub patch: Tensor<f32>,
    pub labels: StageLabels,
}

/// Band of a window by its IoU with the nearest face; `None` in the unused
/// `[0.3, 0.4)` gap.
pub fn band_for_iou(overlap: f64) -> Option<SampleBand> {
    if overlap > 0.7 {
        Some(SampleBand::Positive)
    } else if overlap < 0.3 {
        Some(SampleBand::Negative)
    } else if overlap >= 0.4 {
        Some(SampleBand::Suspected)
    } else {
        None
    }
}

/// RIP range faces are rotated into when training `stage`.
pub fn stage_angle_range(stage: StageId) -> (f64, f64) {
    match stage {
        StageId::One => (-180.0, 180.0),
        StageId::Two => (-90.0, 90.0),
        StageId::Three => (-45.0, 45.0),
    }
}

/// Calibration label of a face at in-plane angle `rip`, or `None` when the
/// angle lies in a gap that does not train calibration.
pub fn orient_label(stage: StageId, rip: f64) -> Option<OrientLabel> {
    let r = normalize_deg(rip);
    match stage {
        StageId::One => {
            if r.abs() <= 65.0 {
                Some(OrientLabel::Binary(true))
            } else if r.abs() >= 115.0 {
                Some(OrientLabel::Binary(false))
            } else {
                None
            }
        }
        StageId::Two => {
            if (-90.0..=-60.0).contains(&r) {
                Some(OrientLabel::Ternary(0))
            } else if (-30.0..=30.0).contains(&r) {
                Some(OrientLabel::Ternary(1))
            } else if (60.0..=90.0).contains(&r) {
                Some(OrientLabel::Ternary(2))
            } else {
                None
            }
        }
        StageId::Three => (r.abs() <= 45.0).then_some(OrientLabel::Residual(r / 45.0)),
    }
}

/// Labels of `window` against a face with box `gt` at angle `rip`, both in
/// the same view. `None` when the IoU falls in the unused gap.
pub fn window_labels(stage: StageId, window: Box, gt: Box, rip: f64) -> Result<Option<StageLabels>> {
    let band = match band_for_iou(iou(&window, &gt)) {
        Some(b) => b,
        None => return Ok(None),
    };
    if band == SampleBand::Negative {
        return Ok(Some(StageLabels::negative()));
    }
    Ok(Some(StageLabels {
        band,
        reg: Some(bbox_targets(window, gt)?),
        orient: orient_label(stage, rip),
    }))
}

// (log scale jitter, center offset as a fraction of the face side)
fn jitter_limits(band: SampleBand) -> (f64, f64) {
    match band {
        SampleBand::Positive => (0.2, 0.15),
        _ => (0.45, 0.35),
    }
}

/// A positive or suspected crop of `face`: the image is viewed rotated about
/// the face center so the face sits at a uniform angle in the stage range,
/// and the window is a random perturbation of the face box in that view.
pub fn face_sample(
    img: &ImageBuffer,
    face: &FaceAnnotation,
    stage: StageId,
    band: SampleBand,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    assert!(band != SampleBand::Negative, "face samples are positive or suspected");
    let (lo, hi) = stage_angle_range(stage);
    let rip = normalize_deg(rng.random_range(lo..=hi));
    let gt = face.bbox();
    let (cx, cy) = gt.center();
    let (scale, shift) = jitter_limits(band);
    for _ in 0..200 {
        let w = gt.w * rng.random_range(-scale..=scale).exp();
        let dx = rng.random_range(-shift..=shift) * gt.w;
        let dy = rng.random_range(-shift..=shift) * gt.w;
        let window = Box::from_center(cx + dx, cy + dy, w);
        match window_labels(stage, window, gt, rip)? {
            Some(labels) if labels.band == band => {
                let patch = rotated_crop_resize(img, Some((cx, cy)), rip - face.theta, window, stage.input_side())?;
                return Ok(TrainingSample { patch, labels });
            }
            _ => {}
        }
    }
    Err(PcnError::InsufficientData(format!("no {band:?} window found for face {face:?}")))
}

/// Magnitude range of angles a stage should reject faces at: the errors an
/// earlier stage can hand it. Stage 1 sees every angle and has none.
pub fn misoriented_range(stage: StageId) -> Option<(f64, f64)> {
    match stage {
        StageId::One => None,
        StageId::Two => Some((135.0, 180.0)),
        StageId::Three => Some((90.0, 180.0)),
    }
}

/// A tight crop of `face` rotated outside the stage's working range,
/// labeled as a non-face.
pub fn misoriented_sample(
    img: &ImageBuffer,
    face: &FaceAnnotation,
    stage: StageId,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let (lo, hi) = misoriented_range(stage).expect("stage has a misoriented range");
    let magnitude = rng.random_range(lo..=hi);
    let rip = if rng.random_bool(0.5) { magnitude } else { -magnitude };
    let gt = face.bbox();
    let (cx, cy) = gt.center();
    let (scale, shift) = jitter_limits(SampleBand::Positive);
    let w = gt.w * rng.random_range(-scale..=scale).exp();
    let window = Box::from_center(
        cx + rng.random_range(-shift..=shift) * gt.w,
        cy + rng.random_range(-shift..=shift) * gt.w,
        w,
    );
    Ok(TrainingSample {
        patch: rotated_crop_resize(img, Some((cx, cy)), normalize_deg(rip) - face.theta, window, stage.input_side())?,
        labels: StageLabels::negative(),
    })
}

/// Face boxes and angles as seen in the view rotated clockwise by `phi`
/// about `pivot`.
pub fn rotate_annotations(faces: &[FaceAnnotation], pivot: (f64, f64), phi: f64) -> Vec<FaceAnnotation> {
    let (sin, cos) = sin_cos_deg(phi);
    faces
        .iter()
        .map(|f| {
            let (x, y) = f.bbox().center();
            let (dx, dy) = (x - pivot.0, y - pivot.1);
            let q = (pivot.0 + dx * cos - dy * sin, pivot.1 + dx * sin + dy * cos);
            FaceAnnotation::new(Box::from_center(q.0, q.1, f.w), normalize_deg(f.theta + phi))
        })
        .collect()
}

/// A random window with IoU below 0.3 against every face, from the image
/// viewed at a random rotation about its center. Half of the draws are
/// placed near a face.
pub fn random_negative(
    img: &ImageBuffer,
    faces: &[FaceAnnotation],
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSample> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let pivot = (w * 0.5, h * 0.5);
    let phi = normalize_deg(rng.random_range(-180.0..=180.0));
    let seen = rotate_annotations(faces, pivot, phi);
    let max_side = w.min(h);
    for _ in 0..200 {
        let window = if !seen.is_empty() && rng.random_bool(0.5) {
            let f = seen[rng.random_range(0..seen.len())];
            let (cx, cy) = f.bbox().center();
            let s = f.w * rng.random_range(-0.6f64..=0.6).exp();
            Box::from_center(
                cx + rng.random_range(-1.0..=1.0) * f.w,
                cy + rng.random_range(-1.0..=1.0) * f.w,
                s,
            )
        } else {
            let s = rng.random_range(16.0f64.ln()..=max_side.ln()).exp();
            Box::new(
                rng.random_range(-0.1 * s..=w - 0.9 * s),
                rng.random_range(-0.1 * s..=h - 0.9 * s),
                s,
            )
        };
        if seen.iter().all(|f| iou(&window, &f.bbox()) < 0.3) {
            let patch = rotated_crop_resize(img, Some(pivot), phi, window, side)?;
            return Ok(TrainingSample {
                patch,
                labels: StageLabels::negative(),
            });
        }
    }
    Err(PcnError::InsufficientData("no negative window found".into()))
}

/// A square window in the view of an image rotated clockwise by `psi`
/// about the window's own center `(cx, cy)` (source coordinates).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub psi: f64,
}

impl ViewWindow {
    fn bbox(&self) -> Box {
        Box::from_center(self.cx, self.cy, self.side)
    }

    pub fn patch(&self, img: &ImageBuffer, out_side: usize) -> Result<Tensor<f32>> {
        rotated_crop_resize(img, Some((self.cx, self.cy)), self.psi, self.bbox(), out_side)
    }

    /// The window after a stage's regression and calibration, as the
    /// detector would hand it to the next stage.
    pub fn advance(&self, stage: StageId, out: &StageOutput) -> Result<ViewWindow> {
        let moved = bbox_apply(self.bbox(), sanitize_regression(out.t))?;
        let (qx, qy) = moved.center();
        let (dx, dy) = (qx - self.cx, qy - self.cy);
        let (sin, cos) = sin_cos_deg(self.psi);
        let psi = match stage {
            StageId::Three => self.psi,
            _ => normalize_deg(self.psi - out.theta()),
        };
        Ok(ViewWindow {
            cx: self.cx + dx * cos + dy * sin,
            cy: self.cy - dx * sin + dy * cos,
            side: moved.w,
            psi,
        })
    }

    /// Largest IoU with any face, measured in this window's view.
    pub fn max_iou(&self, faces: &[FaceAnnotation]) -> f64 {
        let me = self.bbox();
        rotate_annotations(faces, (self.cx, self.cy), self.psi)
            .iter()
            .map(|f| iou(&me, &f.bbox()))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Face-probability thresholds the earlier stages apply.
    pub thresholds: [f64; 3],
    /// Pool size to stop at.
    pub target: usize,
    /// Random windows proposed per image.
    pub windows_per_image: usize,
    /// Upper bound on images visited.
    pub max_images: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            thresholds: DetectConfig::default().thresholds,
            target: 4000,
            windows_per_image: 64,
            max_images: usize::MAX,
        }
    }
}

fn random_view_window(w: f64, h: f64, faces: &[FaceAnnotation], rng: &mut ChaCha8Rng) -> ViewWindow {
    let psi = normalize_deg(rng.random_range(-180.0..=180.0));
    let (cx, cy, side) = if !faces.is_empty() && rng.random_bool(0.5) {
        let f = faces[rng.random_range(0..faces.len())];
        let (fx, fy) = f.bbox().center();
        (
            fx + rng.random_range(-1.0..=1.0) * f.w,
            fy + rng.random_range(-1.0..=1.0) * f.w,
            f.w * rng.random_range(-0.6f64..=0.6).exp(),
        )
    } else {
        let side = rng.random_range(synth::MIN_FACE.ln()..=w.min(h).ln()).exp();
        (
            rng.random_range(0.4 * side..=w - 0.4 * side),
            rng.random_range(0.4 * side..=h - 0.4 * side),
            side,
        )
    };
    ViewWindow { cx, cy, side, psi }
}

fn mine_image(
    item: &LabeledImage,
    cascade: &Cascade,
    stage: StageId,
    cfg: &MiningConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor<f32>>> {
    let (w, h) = (item.image.width() as f64, item.image.height() as f64);
    let mut out = Vec::new();
    'windows: for _ in 0..cfg.windows_per_image {
        let mut win = random_view_window(w, h, &item.faces, rng);
        for earlier in StageId::ALL.into_iter().filter(|&s| s < stage) {
            let patch = win.patch(&item.image, earlier.input_side())?;
            let out = StageOutput::decode(earlier, &cascade.net(earlier).forward(&patch)?)?;
            if out.f < cfg.thresholds[earlier.index()] {
                continue 'windows;
            }
            win = win.advance(earlier, &out)?;
        }
        if win.max_iou(&item.faces) < 0.3 {
            out.push(win.patch(&item.image, stage.input_side())?);
        }
    }
    Ok(out)
}

/// Hard negatives for `stage`: random windows at random view angles that
/// the earlier stages of `cascade` accept, carried through their
/// regression and calibration, and that still overlap every face by less
/// than 0.3 IoU. Images are visited in a seeded random order until
/// `cfg.target` patches are collected.
pub fn mine_hard_negatives(
    source: &dyn ImageSource,
    cascade: &Cascade,
    stage: StageId,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    if stage == StageId::One {
        return Err(PcnError::InsufficientData(
            "stage 1 has no earlier stage to mine hard negatives with".into(),
        ));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(cfg.max_images);
    let mut out = Vec::new();
    // fixed-size chunks keep the result independent of the worker count
    for chunk in order.chunks(16) {
        if out.len() >= cfg.target {
            break;
        }
        let mined = chunk
            .par_iter()
            .map(|&i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                mine_image(&source.load(i)?, cascade, stage, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(mined.into_iter().flatten());
    }
    out.truncate(cfg.target);
    if out.is_empty() {
        return Err(PcnError::InsufficientData(format!(
            "earlier stages reject every non-face window; no hard negatives for {stage}"
        )));
    }
    Ok(out)
}
