//! End-to-end detection: sliding-window proposals over an image pyramid,
//! three cascade passes with flip-based calibration, NMS, and final
//! in-plane angles.
//!
//! Every candidate keeps its box in original-image coordinates together
//! with the orientation frame its pixels are read from. After each coarse
//! decision the frame is switched so that it undoes the accumulated angle;
//! no per-window rotation is ever performed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{accumulate_rip, Cascade, StageId, StageOutput};
use crate::error::Result;
use crate::geometry::{
    bbox_apply, crop_resize, frame_image, nms_indices, normalize_deg, remap_box, Box,
    ImageBuffer, OrientationFrame, RegressionTarget,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Smallest face side to search for, in pixels.
    pub min_face: f64,
    /// Scale step between pyramid levels, in `(0, 1)`.
    pub pyramid_factor: f64,
    /// Window step at network scale, in pixels.
    pub stride: f64,
    /// Face-probability thresholds per stage.
    pub thresholds: [f64; 3],
    /// NMS IoU thresholds per stage.
    pub nms_iou: [f64; 3],
    /// Cap on candidates kept after the first stage.
    pub max_candidates: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            min_face: 40.0,
            pyramid_factor: 0.79,
            stride: 4.0,
            thresholds: [0.4, 0.5, 0.9],
            nms_iou: [0.8, 0.8, 0.3],
            max_candidates: 2000,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_face > 0.0
            && self.pyramid_factor > 0.0
            && self.pyramid_factor < 1.0
            && self.stride > 0.0
            && self.thresholds.iter().all(|t| (0.0..1.0).contains(t))
            && self.nms_iou.iter().all(|t| *t > 0.0 && *t <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(crate::PcnError::Shape(format!("invalid detection config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    /// Square in original-image coordinates.
    pub bbox: Box,
    /// Frame whose pixels feed the next network.
    pub frame: OrientationFrame,
    pub score: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
}

impl Candidate {
    pub fn new(bbox: Box) -> Self {
        Candidate {
            bbox,
            frame: OrientationFrame::Up,
            score: 0.0,
            theta1: 0.0,
            theta2: 0.0,
            theta3: 0.0,
        }
    }

    /// Coarse angle accumulated by the first two stages.
    pub fn theta_acc(&self) -> f64 {
        normalize_deg(self.theta1 + self.theta2)
    }

    pub fn theta_rip(&self) -> f64 {
        accumulate_rip(self.theta1, self.theta2, self.theta3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedFace {
    pub bbox: Box,
    /// In-plane angle in `(-180, 180]`, clockwise positive.
    pub theta_rip: f64,
    pub score: f64,
}

/// The original image and its three exact rotations.
#[derive(Clone, Debug)]
pub struct FrameSet {
    images: [ImageBuffer; 4],
    width: usize,
    height: usize,
}

impl FrameSet {
    pub fn build(img: &ImageBuffer) -> Self {
        FrameSet {
            images: OrientationFrame::ALL.map(|f| frame_image(img, f)),
            width: img.width(),
            height: img.height(),
        }
    }

    pub fn get(&self, frame: OrientationFrame) -> &ImageBuffer {
        &self.images[frame.index()]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Network input for a candidate: its box cropped from its frame.
    pub fn patch(&self, cand: &Candidate, side: usize) -> Result<Tensor<f32>> {
        let fb = remap_box(cand.bbox, OrientationFrame::Up, cand.frame, self.width, self.height);
        crop_resize(self.get(cand.frame), fb, side)
    }
}

/// Per-call counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectStats {
    /// Number of times the four orientation frames were built.
    pub frame_builds: usize,
    /// Candidates entering stages 1, 2 and 3.
    pub stage_inputs: [usize; 3],
    pub detections: usize,
}

/// Pyramid scales `(24 / min_face) * factor^k` down to a 24 px short side.
pub fn pyramid_scales(width: usize, height: usize, cfg: &DetectConfig) -> Vec<f64> {
    let side = StageId::One.input_side() as f64;
    let short = width.min(height) as f64;
    let mut scales = Vec::new();
    let mut s = side / cfg.min_face;
    // small tolerance so an image exactly min_face wide keeps its level
    while (short * s + 1e-9).floor() >= side {
        scales.push(s);
        s *= cfg.pyramid_factor;
    }
    scales
}

/// Sliding-window proposals over the pyramid, mapped back to original
/// pixels. Each level's grid is centered so that the proposal set of a
/// square image is closed under quarter turns.
pub fn propose(width: usize, height: usize, cfg: &DetectConfig) -> Vec<Candidate> {
    let side = StageId::One.input_side() as f64;
    let mut out = Vec::new();
    for s in pyramid_scales(width, height, cfg) {
        let (lw, lh) = (width as f64 * s, height as f64 * s);
        let nx = ((lw + 1e-9).floor() - side) as usize / cfg.stride as usize + 1;
        let ny = ((lh + 1e-9).floor() - side) as usize / cfg.stride as usize + 1;
        let nx = level_count(lw, side, cfg.stride).min(nx.max(1));
        let ny = level_count(lh, side, cfg.stride).min(ny.max(1));
        let ox = ((lw - side) - (nx - 1) as f64 * cfg.stride).max(0.0) * 0.5;
        let oy = ((lh - side) - (ny - 1) as f64 * cfg.stride).max(0.0) * 0.5;
        for iy in 0..ny {
            for ix in 0..nx {
                let lx = ox + ix as f64 * cfg.stride;
                let ly = oy + iy as f64 * cfg.stride;
                out.push(Candidate::new(Box::new(lx / s, ly / s, side / s)));
            }
        }
    }
    out
}

/// `floor((floor(level_side) - 24) / stride) + 1`.
fn level_count(level_side: f64, side: f64, stride: f64) -> usize {
    (((level_side + 1e-9).floor() - side) / stride).floor() as usize + 1
}

/// Clamps regression outputs so degenerate boxes never reach later stages.
pub fn sanitize_regression(t: RegressionTarget) -> RegressionTarget {
    RegressionTarget {
        t_w: t.t_w.clamp(0.5, 2.0),
        t_a: t.t_a.clamp(-0.5, 0.5),
        t_b: t.t_b.clamp(-0.5, 0.5),
    }
}

fn evaluate(
    cand: &Candidate,
    stage: StageId,
    cascade: &Cascade,
    frames: &FrameSet,
    threshold: f64,
) -> Result<Option<Candidate>> {
    let side = stage.input_side();
    let (w, h) = (frames.width(), frames.height());
    let fb = remap_box(cand.bbox, OrientationFrame::Up, cand.frame, w, h);
    let patch = crop_resize(frames.get(cand.frame), fb, side)?;
    let raw = cascade.net(stage).forward(&patch)?;
    let out = StageOutput::decode(stage, &raw)?;
    if out.f < threshold {
        return Ok(None);
    }
    let regressed = bbox_apply(fb, sanitize_regression(out.t))?;
    let mut next = *cand;
    next.bbox = remap_box(regressed, cand.frame, OrientationFrame::Up, w, h);
    next.score = out.f;
    match stage {
        StageId::One => next.theta1 = out.theta(),
        StageId::Two => next.theta2 = out.theta(),
        StageId::Three => next.theta3 = out.theta(),
    }
    if stage != StageId::Three {
        next.frame = OrientationFrame::from_rotation(-next.theta_acc())
            .expect("coarse angles are multiples of 90");
    }
    Ok(Some(next))
}

/// Runs one stage over all candidates: crop from the candidate's frame,
/// classify, regress, calibrate, then NMS (per frame for the coarse stages,
/// global for the last). Output is sorted by descending score.
pub fn run_stage(
    cands: &[Candidate],
    stage: StageId,
    cascade: &Cascade,
    frames: &FrameSet,
    cfg: &DetectConfig,
) -> Result<Vec<Candidate>> {
    let threshold = cfg.thresholds[stage.index()];
    let evaluated = cands
        .par_iter()
        .map(|c| evaluate(c, stage, cascade, frames, threshold))
        .collect::<Result<Vec<_>>>()?;
    let survivors: Vec<Candidate> = evaluated.into_iter().flatten().collect();
    let iou_thresh = cfg.nms_iou[stage.index()];
    let mut kept = if stage == StageId::Three {
        nms_candidates(&survivors, iou_thresh)
    } else {
        let mut all = Vec::new();
        for frame in OrientationFrame::ALL {
            let group: Vec<Candidate> = survivors.iter().filter(|c| c.frame == frame).copied().collect();
            all.extend(nms_candidates(&group, iou_thresh));
        }
        all.sort_by(|a, b| b.score.total_cmp(&a.score));
        all
    };
    if stage == StageId::One {
        kept.truncate(cfg.max_candidates);
    }
    Ok(kept)
}

pub fn nms_candidates(cands: &[Candidate], thresh: f64) -> Vec<Candidate> {
    if thresh >= 1.0 {
        let mut all = cands.to_vec();
        all.sort_by(|a, b| b.score.total_cmp(&a.score));
        return all;
    }
    let boxes: Vec<Box> = cands.iter().map(|c| c.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.score).collect();
    nms_indices(&boxes, &scores, thresh)
        .into_iter()
        .map(|i| cands[i])
        .collect()
}

/// Runs the cascade through `last` and returns the survivors.
pub fn run_cascade(
    frames: &FrameSet,
    cascade: &Cascade,
    cfg: &DetectConfig,
    last: StageId,
    stats: &mut DetectStats,
) -> Result<Vec<Candidate>> {
    let mut cands = propose(frames.width(), frames.height(), cfg);
    for stage in StageId::ALL {
        if stage > last {
            break;
        }
        stats.stage_inputs[stage.index()] = cands.len();
        if cands.is_empty() {
            break;
        }
        cands = run_stage(&cands, stage, cascade, frames, cfg)?;
    }
    Ok(cands)
}

pub fn detect(img: &ImageBuffer, cascade: &Cascade, cfg: &DetectConfig) -> Result<Vec<DetectedFace>> {
    Ok(detect_with_stats(img, cascade, cfg)?.0)
}

pub fn detect_with_stats(
    img: &ImageBuffer,
    cascade: &Cascade,
    cfg: &DetectConfig,
) -> Result<(Vec<DetectedFace>, DetectStats)> {
    cfg.validate()?;
    let mut stats = DetectStats::default();
    let frames = FrameSet::build(img);
    stats.frame_builds += 1;
    let survivors = run_cascade(&frames, cascade, cfg, StageId::Three, &mut stats)?;
    let finals = nms_candidates(&survivors, cfg.nms_iou[StageId::Three.index()]);
    let faces: Vec<DetectedFace> = finals
        .iter()
        .map(|c| DetectedFace {
            bbox: c.bbox,
            theta_rip: c.theta_rip(),
            score: c.score,
        })
        .collect();
    stats.detections = faces.len();
    Ok((faces, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_count(w: usize, h: usize, cfg: &DetectConfig) -> usize {
        let mut total = 0;
        let mut s = 24.0 / cfg.min_face;
        loop {
            let lw = (w as f64 * s + 1e-9).floor();
            let lh = (h as f64 * s + 1e-9).floor();
            if lw.min(lh) < 24.0 {
                break;
            }
            let nx = ((lw - 24.0) / cfg.stride).floor() as usize + 1;
            let ny = ((lh - 24.0) / cfg.stride).floor() as usize + 1;
            total += nx * ny;
            s *= cfg.pyramid_factor;
        }
        total
    }

    #[test]
    fn vga_proposals() {
        let cfg = DetectConfig::default();
        let cands = propose(640, 480, &cfg);
        assert!(!cands.is_empty());
        assert_eq!(cands.len(), closed_form_count(640, 480, &cfg));
        for c in &cands {
            assert!(c.bbox.w >= 40.0 - 1e-9);
            assert!(c.bbox.a >= -1e-9 && c.bbox.b >= -1e-9);
            assert!(c.bbox.a + c.bbox.w <= 640.0 + 1e-9);
            assert!(c.bbox.b + c.bbox.w <= 480.0 + 1e-9);
            assert_eq!(c.frame, OrientationFrame::Up);
            assert_eq!(c.theta_acc(), 0.0);
        }
        let smallest = cands.iter().map(|c| c.bbox.w).fold(f64::INFINITY, f64::min);
        assert!(smallest < 40.0 / cfg.pyramid_factor);
    }

    #[test]
    fn proposal_count_matches_closed_form() {
        for (w, h, mf, stride) in [(128, 128, 24.0, 4.0), (300, 200, 33.0, 3.0), (97, 150, 40.0, 5.0)] {
            let cfg = DetectConfig {
                min_face: mf,
                stride,
                ..DetectConfig::default()
            };
            assert_eq!(propose(w, h, &cfg).len(), closed_form_count(w, h, &cfg));
        }
    }

    #[test]
    fn image_of_min_face_has_single_window() {
        let cfg = DetectConfig::default();
        let cands = propose(40, 40, &cfg);
        assert_eq!(cands.len(), 1);
        let b = cands[0].bbox;
        assert!(b.a.abs() < 1e-9 && b.b.abs() < 1e-9 && (b.w - 40.0).abs() < 1e-9);
        assert!(propose(39, 60, &cfg).is_empty());
    }

    #[test]
    fn square_proposals_are_closed_under_quarter_turns() {
        let cfg = DetectConfig {
            min_face: 24.0,
            ..DetectConfig::default()
        };
        let cands = propose(128, 128, &cfg);
        for c in cands.iter().take(200) {
            let r = remap_box(c.bbox, OrientationFrame::Up, OrientationFrame::Right, 128, 128);
            assert!(cands.iter().any(|d| (d.bbox.a - r.a).abs() < 1e-6
                && (d.bbox.b - r.b).abs() < 1e-6
                && (d.bbox.w - r.w).abs() < 1e-6));
        }
    }

    #[test]
    fn empty_candidates_stay_empty() {
        let cascade = Cascade::new(1);
        let frames = FrameSet::build(&ImageBuffer::new(64, 64, 3));
        let out = run_stage(&[], StageId::One, &cascade, &frames, &DetectConfig::default()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn disabled_thresholds_keep_every_candidate() {
        let cascade = Cascade::new(2);
        let img = crate::trainer::gen_synthetic(1, 5).scenes[0].render();
        let frames = FrameSet::build(&img);
        let cfg = DetectConfig {
            min_face: 48.0,
            thresholds: [0.0; 3],
            nms_iou: [1.0; 3],
            ..DetectConfig::default()
        };
        let cands = propose(img.width(), img.height(), &cfg);
        for stage in StageId::ALL {
            let out = run_stage(&cands, stage, &cascade, &frames, &cfg).unwrap();
            assert_eq!(out.len(), cands.len());
        }
    }

    #[test]
    fn frame_tracks_accumulated_angle() {
        let mut c = Candidate::new(Box::new(0.0, 0.0, 10.0));
        for (t1, t2, frame) in [
            (0.0, 0.0, OrientationFrame::Up),
            (180.0, 0.0, OrientationFrame::Down),
            (0.0, 90.0, OrientationFrame::Left),
            (0.0, -90.0, OrientationFrame::Right),
            (180.0, 90.0, OrientationFrame::Right),
            (180.0, -90.0, OrientationFrame::Left),
        ] {
            c.theta1 = t1;
            c.theta2 = t2;
            assert_eq!(OrientationFrame::from_rotation(-c.theta_acc()), Some(frame));
        }
    }
}
