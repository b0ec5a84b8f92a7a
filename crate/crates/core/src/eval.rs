//! Held-out metrics: per-stage orientation accuracy, fine-angle error,
//! detection recall at a false-positive budget, and the same recall on
//! quarter-turned copies of a corpus.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, OrientLabel, SampleBand, StageId, StageOutput};
use crate::error::Result;
use crate::geometry::{iou, normalize_deg, remap_box, rot_exact, OrientationFrame, QuarterTurn};
use crate::pipeline::{detect, DetectConfig, DetectedFace};
use crate::trainer::{face_sample, FaceAnnotation, ImageSource, LabeledImage, TrainingSample};

/// Running orientation statistics for one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrientationTally {
    pub samples: usize,
    pub correct: usize,
    pub abs_error_sum: f64,
}

impl OrientationTally {
    /// Scores one prediction against its label; unlabeled samples are
    /// skipped.
    pub fn add(&mut self, label: Option<OrientLabel>, out: &StageOutput) {
        let Some(label) = label else { return };
        self.samples += 1;
        let predicted = out.theta();
        let truth = match label {
            OrientLabel::Binary(up) => {
                if up {
                    0.0
                } else {
                    180.0
                }
            }
            OrientLabel::Ternary(id) => [-90.0, 0.0, 90.0][id as usize],
            OrientLabel::Residual(v) => 45.0 * v,
        };
        let err = normalize_deg(predicted - truth).abs();
        self.abs_error_sum += err;
        if err < 1e-9 {
            self.correct += 1;
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples.max(1) as f64
    }

    pub fn mean_abs_error(&self) -> f64 {
        self.abs_error_sum / self.samples.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrientationMetrics {
    /// Up/down accuracy of stage 1.
    pub stage1_accuracy: f64,
    /// Three-way accuracy of stage 2.
    pub stage2_accuracy: f64,
    /// Mean absolute error of the stage-3 angle, degrees.
    pub stage3_mae: f64,
    pub samples: [usize; 3],
}

/// Positive crops of every face in `source`, `per_face` per stage, each at a
/// fresh random angle in the stage's training range.
pub fn held_out_positives(
    source: &dyn ImageSource,
    per_face: usize,
    seed: u64,
) -> Result<[Vec<TrainingSample>; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: [Vec<TrainingSample>; 3] = Default::default();
    for i in 0..source.len() {
        let item = source.load(i)?;
        for face in &item.faces {
            for stage in StageId::ALL {
                for _ in 0..per_face {
                    let s = face_sample(&item.image, face, stage, SampleBand::Positive, &mut rng)?;
                    out[stage.index()].push(s);
                }
            }
        }
    }
    Ok(out)
}

/// Runs each stage network on its held-out positives.
pub fn orientation_metrics(cascade: &Cascade, samples: &[Vec<TrainingSample>; 3]) -> Result<OrientationMetrics> {
    let mut tallies = [OrientationTally::default(); 3];
    for stage in StageId::ALL {
        let set = &samples[stage.index()];
        let outputs = set
            .par_iter()
            .map(|s| StageOutput::decode(stage, &cascade.net(stage).forward(&s.patch)?))
            .collect::<Result<Vec<_>>>()?;
        for (s, out) in set.iter().zip(&outputs) {
            tallies[stage.index()].add(s.labels.orient, out);
        }
    }
    Ok(OrientationMetrics {
        stage1_accuracy: tallies[0].accuracy(),
        stage2_accuracy: tallies[1].accuracy(),
        stage3_mae: tallies[2].mean_abs_error(),
        samples: tallies.map(|t| t.samples),
    })
}

/// False-positive budget for a corpus, 100 per 2845 images.
pub fn fp_budget(corpus_size: usize) -> usize {
    corpus_size / 28
}

/// Detection recall at the loosest score threshold whose false positives
/// stay within `max_fp`. Detections match a face at IoU >= 0.5, greedily
/// by descending score; each face is matched at most once. Detections with
/// equal scores enter or leave together.
pub fn recall_at_fp(
    detections: &[Vec<DetectedFace>],
    faces: &[Vec<FaceAnnotation>],
    max_fp: usize,
) -> f64 {
    let total: usize = faces.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in detections.iter().zip(faces) {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut taken = vec![false; gts.len()];
        for i in order {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, iou(&dets[i].bbox, &g.bbox())))
                .filter(|(_, o)| *o >= 0.5)
                .max_by(|x, y| x.1.total_cmp(&y.1));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    scored.push((dets[i].score, true));
                }
                None => scored.push((dets[i].score, false)),
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut best_tp) = (0usize, 0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0, 0);
        while j < scored.len() && scored[j].0 == scored[i].0 {
            if scored[j].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        if fp + dfp > max_fp {
            break;
        }
        tp += dtp;
        fp += dfp;
        best_tp = tp;
        i = j;
    }
    best_tp as f64 / total as f64
}

/// The image turned by a quarter-turn multiple (`Up` = unchanged) with its
/// annotations mapped along.
pub fn rotate_labeled(item: &LabeledImage, frame: OrientationFrame) -> LabeledImage {
    let (w, h) = (item.image.width(), item.image.height());
    let image = match QuarterTurn::from_degrees(frame.rotation()) {
        Some(turn) => rot_exact(&item.image, turn),
        None => item.image.clone(),
    };
    let faces = item
        .faces
        .iter()
        .map(|f| {
            FaceAnnotation::new(
                remap_box(f.bbox(), OrientationFrame::Up, frame, w, h),
                normalize_deg(f.theta + frame.rotation() as f64),
            )
        })
        .collect();
    LabeledImage { image, faces }
}

/// Detections on every image of `source` turned into `frame`.
pub fn detect_corpus(
    source: &dyn ImageSource,
    cascade: &Cascade,
    cfg: &DetectConfig,
    frame: OrientationFrame,
) -> Result<(Vec<Vec<DetectedFace>>, Vec<Vec<FaceAnnotation>>)> {
    let mut dets = Vec::with_capacity(source.len());
    let mut faces = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let item = rotate_labeled(&source.load(i)?, frame);
        dets.push(detect(&item.image, cascade, cfg)?);
        faces.push(item.faces);
    }
    Ok((dets, faces))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub fp_budget: usize,
    /// Recall on the corpus as given and turned by 90, 180 and 270 degrees
    /// clockwise, in [`OrientationFrame::ALL`] order (up, left, right, down).
    pub per_orientation: [f64; 4],
}

impl RecallReport {
    pub fn spread(&self) -> f64 {
        let max = self.per_orientation.iter().copied().fold(f64::MIN, f64::max);
        let min = self.per_orientation.iter().copied().fold(f64::MAX, f64::min);
        max - min
    }
}

pub fn per_orientation_recall(
    source: &dyn ImageSource,
    cascade: &Cascade,
    cfg: &DetectConfig,
    max_fp: usize,
) -> Result<RecallReport> {
    let mut report = RecallReport {
        fp_budget: max_fp,
        ..RecallReport::default()
    };
    for frame in OrientationFrame::ALL {
        let (dets, faces) = detect_corpus(source, cascade, cfg, frame)?;
        report.per_orientation[frame.index()] = recall_at_fp(&dets, &faces, max_fp);
    }
    Ok(report)
}

/// Whether `det` and `other` describe the same face: IoU at least
/// `min_iou` and angles within `max_dtheta` degrees.
pub fn same_detection(det: &DetectedFace, other: &DetectedFace, min_iou: f64, max_dtheta: f64) -> bool {
    iou(&det.bbox, &other.bbox) >= min_iou && normalize_deg(det.theta_rip - other.theta_rip).abs() <= max_dtheta
}

/// Maps detections of an image into the same image turned into `frame`.
pub fn rotate_detections(dets: &[DetectedFace], frame: OrientationFrame, width: usize, height: usize) -> Vec<DetectedFace> {
    dets.iter()
        .map(|d| DetectedFace {
            bbox: remap_box(d.bbox, OrientationFrame::Up, frame, width, height),
            theta_rip: normalize_deg(d.theta_rip + frame.rotation() as f64),
            score: d.score,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::Orientation;
    use crate::geometry::{Box, RegressionTarget};
    use crate::trainer::gen_synthetic;

    fn output_for(label: OrientLabel) -> StageOutput {
        let orient = match label {
            OrientLabel::Binary(up) => Orientation::Binary(if up { 0.9 } else { 0.1 }),
            OrientLabel::Ternary(id) => {
                let mut p = [0.1; 3];
                p[id as usize] = 0.8;
                Orientation::Ternary(p)
            }
            OrientLabel::Residual(v) => Orientation::Residual(v),
        };
        StageOutput {
            f: 1.0,
            t: RegressionTarget::IDENTITY,
            orient,
        }
    }

    #[test]
    fn oracle_predictions_are_perfect() {
        let samples = held_out_positives(&gen_synthetic(10, 8), 2, 1).unwrap();
        for stage in StageId::ALL {
            let mut tally = OrientationTally::default();
            for s in &samples[stage.index()] {
                let out = s.labels.orient.map(output_for);
                if let Some(out) = out {
                    tally.add(s.labels.orient, &out);
                }
            }
            assert!(tally.samples > 0);
            if stage == StageId::Three {
                assert!(tally.mean_abs_error() < 1e-9);
            } else {
                assert_eq!(tally.accuracy(), 1.0);
            }
        }
    }

    #[test]
    fn wrong_flip_costs_180_degrees() {
        let mut t = OrientationTally::default();
        t.add(Some(OrientLabel::Binary(true)), &output_for(OrientLabel::Binary(false)));
        t.add(None, &output_for(OrientLabel::Binary(false)));
        assert_eq!(t.samples, 1);
        assert_eq!(t.accuracy(), 0.0);
        assert_eq!(t.mean_abs_error(), 180.0);
    }

    fn face(a: f64) -> FaceAnnotation {
        FaceAnnotation::new(Box::new(a, 0.0, 10.0), 0.0)
    }

    fn det(a: f64, score: f64) -> DetectedFace {
        DetectedFace {
            bbox: Box::new(a, 0.0, 10.0),
            theta_rip: 0.0,
            score,
        }
    }

    #[test]
    fn recall_walks_down_the_score_list() {
        let faces = vec![vec![face(0.0), face(50.0)], vec![face(0.0)]];
        let dets = vec![
            vec![det(0.0, 0.9), det(100.0, 0.8), det(50.0, 0.7)],
            vec![det(200.0, 0.95), det(0.5, 0.6)],
        ];
        assert_eq!(recall_at_fp(&dets, &faces, 0), 0.0);
        assert!((recall_at_fp(&dets, &faces, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(recall_at_fp(&dets, &faces, 2), 1.0);
    }

    #[test]
    fn zero_budget_counts_hits_above_first_false_positive() {
        let faces = vec![vec![face(0.0), face(50.0)]];
        let dets = vec![vec![det(0.0, 0.9), det(100.0, 0.8), det(50.0, 0.7)]];
        assert_eq!(recall_at_fp(&dets, &faces, 0), 0.5);
    }

    #[test]
    fn duplicates_count_as_false_positives() {
        let faces = vec![vec![face(0.0)]];
        let dets = vec![vec![det(0.0, 0.9), det(0.5, 0.8)]];
        assert_eq!(recall_at_fp(&dets, &faces, 0), 1.0);
        let faces = vec![vec![face(0.0)]];
        let dets = vec![vec![det(0.0, 0.9), det(0.5, 0.9)]];
        assert_eq!(recall_at_fp(&dets, &faces, 0), 0.0);
    }

    #[test]
    fn budget_follows_corpus_size() {
        assert_eq!(fp_budget(2845), 101);
        assert_eq!(fp_budget(200), 7);
        assert_eq!(fp_budget(27), 0);
    }

    #[test]
    fn rotated_corpus_keeps_faces_on_their_pixels() {
        let corpus = gen_synthetic(6, 3);
        for i in 0..corpus.len() {
            let item = corpus.load(i).unwrap();
            for frame in OrientationFrame::ALL {
                let r = rotate_labeled(&item, frame);
                for (f, g) in item.faces.iter().zip(&r.faces) {
                    let a = crate::geometry::crop_resize(&item.image, f.bbox(), 12).unwrap();
                    let turned = rotate_labeled(
                        &LabeledImage {
                            image: r.image.clone(),
                            faces: vec![*g],
                        },
                        OrientationFrame::from_rotation(-(frame.rotation() as f64)).unwrap(),
                    );
                    let b = crate::geometry::crop_resize(&turned.image, turned.faces[0].bbox(), 12).unwrap();
                    assert_eq!(a, b);
                    assert!((normalize_deg(turned.faces[0].theta - f.theta)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn detection_matching_is_circular_in_angle() {
        let mut a = det(0.0, 0.9);
        let mut b = det(0.5, 0.9);
        a.theta_rip = 175.0;
        b.theta_rip = -178.0;
        assert!(same_detection(&a, &b, 0.7, 15.0));
        b.theta_rip = 150.0;
        assert!(!same_detection(&a, &b, 0.7, 15.0));
    }
}
