//! Procedural "glyph face" scenes used in place of a real face dataset.
//!
//! A glyph is a disc with a dark cap on top, two eyes and a mouth. It has no
//! rotational self-symmetry, so its in-plane angle is well defined over the
//! full circle. Scenes are described by a small seeded [`SceneSpec`] and
//! rendered on demand, so a corpus of thousands of images costs almost no
//! memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, sin_cos_deg, Box, ImageBuffer};

use super::corpus::{ImageSource, LabeledImage};

/// Ground truth for one face: its square box and in-plane angle (degrees,
/// clockwise positive, in `(-180, 180]`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceAnnotation {
    pub a: f64,
    pub b: f64,
    pub w: f64,
    pub theta: f64,
}

impl FaceAnnotation {
    pub fn new(bbox: Box, theta: f64) -> Self {
        FaceAnnotation {
            a: bbox.a,
            b: bbox.b,
            w: bbox.w,
            theta,
        }
    }

    pub fn bbox(&self) -> Box {
        Box::new(self.a, self.b, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphStyle {
    pub skin: [f32; 3],
    pub cap: [f32; 3],
    pub feature: [f32; 3],
}

impl Default for GlyphStyle {
    fn default() -> Self {
        GlyphStyle {
            skin: [0.92, 0.76, 0.6],
            cap: [0.25, 0.15, 0.08],
            feature: [0.05, 0.05, 0.08],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Distractor {
    Disc { cx: f64, cy: f64, r: f64, color: [f32; 3] },
    Bar { cx: f64, cy: f64, half_len: f64, half_thick: f64, angle: f64, color: [f32; 3] },
}

/// Everything needed to re-render one scene bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub noise_seed: u64,
    pub faces: Vec<FaceAnnotation>,
    pub styles: Vec<GlyphStyle>,
    pub distractors: Vec<Distractor>,
}

pub const SCENE_SIDE: usize = 128;
pub const MIN_FACE: f64 = 24.0;
pub const MAX_FACE: f64 = 64.0;

// glyph geometry in box-relative units, upright, y down
const HEAD_R: f64 = 0.46;
const CAP_Y: f64 = -0.2;
const EYE_X: f64 = 0.17;
const EYE_Y: f64 = -0.04;
const EYE_R: f64 = 0.08;
const MOUTH_Y: f64 = 0.22;
const MOUTH_HALF_W: f64 = 0.18;
const MOUTH_HALF_H: f64 = 0.05;

// 2x2 supersampling grid, closed under quarter turns
const SUBSAMPLES: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Color of the upright glyph at box-relative `(u, v)`, or `None` outside it.
fn glyph_color(u: f64, v: f64, style: &GlyphStyle) -> Option<[f32; 3]> {
    if u * u + v * v > HEAD_R * HEAD_R {
        return None;
    }
    let eye = |ex: f64| (u - ex).powi(2) + (v - EYE_Y).powi(2) <= EYE_R * EYE_R;
    if eye(EYE_X) || eye(-EYE_X) {
        return Some(style.feature);
    }
    if u.abs() <= MOUTH_HALF_W && (v - MOUTH_Y).abs() <= MOUTH_HALF_H {
        return Some(style.feature);
    }
    if v < CAP_Y {
        return Some(style.cap);
    }
    Some(style.skin)
}

/// Draws one glyph face onto `canvas`, anti-aliased by supersampling.
pub fn render_glyph(canvas: &mut ImageBuffer, face: &FaceAnnotation, style: &GlyphStyle) {
    let (cx, cy) = face.bbox().center();
    let w = face.w;
    let (sin, cos) = sin_cos_deg(face.theta);
    let reach = 0.5 * w + 1.0;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil().max(0.0) as usize).min(canvas.width());
    let y1 = ((cy + reach).ceil().max(0.0) as usize).min(canvas.height());
    let channels = canvas.channels();
    for y in y0..y1 {
        for x in x0..x1 {
            let mut acc = [0.0f32; 3];
            let mut hits = 0;
            for (ox, oy) in SUBSAMPLES {
                let dx = x as f64 + 0.5 + ox - cx;
                let dy = y as f64 + 0.5 + oy - cy;
                // undo the clockwise rotation to reach upright glyph coords
                let u = (dx * cos + dy * sin) / w;
                let v = (-dx * sin + dy * cos) / w;
                if let Some(col) = glyph_color(u, v, style) {
                    hits += 1;
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f32 / SUBSAMPLES.len() as f32;
            let px = canvas.pixel_mut(x, y);
            if channels == 3 {
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + acc[c] / SUBSAMPLES.len() as f32;
                }
            } else {
                let lum = (acc[0] + acc[1] + acc[2]) / (3.0 * SUBSAMPLES.len() as f32);
                px[0] = px[0] * (1.0 - cover) + lum;
            }
        }
    }
}

fn draw_distractor(canvas: &mut ImageBuffer, d: &Distractor) {
    let (cx, cy, reach, color) = match *d {
        Distractor::Disc { cx, cy, r, color } => (cx, cy, r, color),
        Distractor::Bar { cx, cy, half_len, color, .. } => (cx, cy, half_len, color),
    };
    let x0 = (cx - reach - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - reach - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + reach + 1.0).ceil().max(0.0) as usize).min(canvas.width());
    let y1 = ((cy + reach + 1.0).ceil().max(0.0) as usize).min(canvas.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for (ox, oy) in SUBSAMPLES {
                let dx = x as f64 + 0.5 + ox - cx;
                let dy = y as f64 + 0.5 + oy - cy;
                let inside = match *d {
                    Distractor::Disc { r, .. } => dx * dx + dy * dy <= r * r,
                    Distractor::Bar { half_len, half_thick, angle, .. } => {
                        let (s, c) = sin_cos_deg(angle);
                        let along = dx * c + dy * s;
                        let across = -dx * s + dy * c;
                        along.abs() <= half_len && across.abs() <= half_thick
                    }
                };
                hits += inside as usize;
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f32 / SUBSAMPLES.len() as f32;
            let px = canvas.pixel_mut(x, y);
            for (c, p) in px.iter_mut().enumerate() {
                *p = *p * (1.0 - cover) + color[c.min(2)] * cover;
            }
        }
    }
}

/// Low-frequency color field plus fine grain.
fn render_background(width: usize, height: usize, seed: u64) -> ImageBuffer {
    const GRID: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let knots: Vec<[f32; 3]> = (0..GRID * GRID)
        .map(|_| {
            let base = rng.random_range(0.15f32..0.85);
            [
                (base + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0),
                (base + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0),
                (base + rng.random_range(-0.15f32..0.15)).clamp(0.0, 1.0),
            ]
        })
        .collect();
    let grain = rng.random_range(0.02f32..0.08);
    let mut img = ImageBuffer::new(width, height, 3);
    for y in 0..height {
        let gy = y as f32 / height as f32 * (GRID - 1) as f32;
        let (iy, fy) = (gy.floor() as usize, gy.fract());
        let iy1 = (iy + 1).min(GRID - 1);
        for x in 0..width {
            let gx = x as f32 / width as f32 * (GRID - 1) as f32;
            let (ix, fx) = (gx.floor() as usize, gx.fract());
            let ix1 = (ix + 1).min(GRID - 1);
            let px = img.pixel_mut(x, y);
            for c in 0..3 {
                let top = knots[iy * GRID + ix][c] * (1.0 - fx) + knots[iy * GRID + ix1][c] * fx;
                let bot = knots[iy1 * GRID + ix][c] * (1.0 - fx) + knots[iy1 * GRID + ix1][c] * fx;
                let n = rng.random_range(-grain..grain);
                px[c] = (top * (1.0 - fy) + bot * fy + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

impl SceneSpec {
    pub fn render(&self) -> ImageBuffer {
        let mut img = render_background(self.width, self.height, self.noise_seed);
        for d in &self.distractors {
            draw_distractor(&mut img, d);
        }
        for (face, style) in self.faces.iter().zip(&self.styles) {
            render_glyph(&mut img, face, style);
        }
        img
    }

    /// Random scene with `n_faces` non-overlapping glyphs placed fully inside
    /// the image.
    pub fn random(width: usize, height: usize, n_faces: usize, face_range: (f64, f64), rng: &mut ChaCha8Rng) -> Self {
        let mut faces: Vec<FaceAnnotation> = Vec::new();
        let max_w = face_range.1.min(width.min(height) as f64);
        for _ in 0..n_faces {
            for _ in 0..50 {
                let w = rng.random_range(face_range.0..=max_w);
                let a = rng.random_range(0.0..=(width as f64 - w));
                let b = rng.random_range(0.0..=(height as f64 - w));
                let bx = Box::new(a, b, w);
                if faces.iter().all(|f| iou(&f.bbox(), &bx) == 0.0) {
                    let theta = 180.0 - rng.random_range(0.0..360.0);
                    faces.push(FaceAnnotation::new(bx, theta));
                    break;
                }
            }
        }
        let styles = faces
            .iter()
            .map(|_| {
                let tone = rng.random_range(0.55f32..1.0);
                let cap = rng.random_range(0.0f32..0.35);
                GlyphStyle {
                    skin: [tone, tone * rng.random_range(0.7f32..0.9), tone * rng.random_range(0.5f32..0.75)],
                    cap: [cap, cap * 0.7, cap * 0.5],
                    feature: [0.05, 0.05, 0.08],
                }
            })
            .collect();
        let n_distract = rng.random_range(0..=3usize);
        let distractors = (0..n_distract)
            .map(|_| {
                let color = [rng.random(), rng.random(), rng.random()];
                let cx = rng.random_range(0.0..width as f64);
                let cy = rng.random_range(0.0..height as f64);
                if rng.random_bool(0.5) {
                    Distractor::Disc {
                        cx,
                        cy,
                        r: rng.random_range(5.0..25.0),
                        color,
                    }
                } else {
                    Distractor::Bar {
                        cx,
                        cy,
                        half_len: rng.random_range(6.0..30.0),
                        half_thick: rng.random_range(1.5..5.0),
                        angle: rng.random_range(0.0..180.0),
                        color,
                    }
                }
            })
            .collect();
        SceneSpec {
            width,
            height,
            noise_seed: rng.random(),
            faces,
            styles,
            distractors,
        }
    }
}

/// A seeded corpus of 128x128 scenes with 0-2 faces each.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub scenes: Vec<SceneSpec>,
}

impl ImageSource for SyntheticCorpus {
    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn load(&self, index: usize) -> Result<LabeledImage> {
        let scene = &self.scenes[index];
        Ok(LabeledImage {
            image: scene.render(),
            faces: scene.faces.clone(),
        })
    }

    fn load_faces(&self, index: usize) -> Result<Vec<FaceAnnotation>> {
        Ok(self.scenes[index].faces.clone())
    }
}

/// Generates `n` scenes; identical seeds give identical corpora.
pub fn gen_synthetic(n: usize, seed: u64) -> SyntheticCorpus {
    let scenes = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let n_faces = rng.random_range(0..=2usize);
            SceneSpec::random(SCENE_SIDE, SCENE_SIDE, n_faces, (MIN_FACE, MAX_FACE), &mut rng)
        })
        .collect();
    SyntheticCorpus { scenes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rot_exact, QuarterTurn};

    #[test]
    fn empty_corpus() {
        assert!(gen_synthetic(0, 1).scenes.is_empty());
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = gen_synthetic(6, 9);
        let b = gen_synthetic(6, 9);
        assert_eq!(a, b);
        for i in 0..6 {
            assert_eq!(a.load(i).unwrap().image, b.load(i).unwrap().image);
        }
        assert_ne!(a, gen_synthetic(6, 10));
    }

    #[test]
    fn faces_fit_and_angles_in_range() {
        let corpus = gen_synthetic(200, 3);
        let mut count = 0;
        for s in &corpus.scenes {
            assert!(s.faces.len() <= 2);
            for f in &s.faces {
                count += 1;
                assert!(f.w >= MIN_FACE && f.w <= MAX_FACE);
                assert!(f.a >= 0.0 && f.b >= 0.0);
                assert!(f.a + f.w <= SCENE_SIDE as f64 && f.b + f.w <= SCENE_SIDE as f64);
                assert!(f.theta > -180.0 && f.theta <= 180.0);
            }
        }
        assert!(count > 100);
    }

    #[test]
    fn quarter_turn_render_matches_exact_rotation() {
        let side = 40;
        let face = |theta| FaceAnnotation::new(Box::new(4.0, 4.0, 32.0), theta);
        let style = GlyphStyle::default();
        let mut up = ImageBuffer::new(side, side, 3);
        render_glyph(&mut up, &face(0.0), &style);
        for (theta, turn) in [
            (90.0, QuarterTurn::Cw90),
            (180.0, QuarterTurn::Half),
            (-90.0, QuarterTurn::Cw270),
        ] {
            let mut rotated = ImageBuffer::new(side, side, 3);
            render_glyph(&mut rotated, &face(theta), &style);
            let expect = rot_exact(&up, turn);
            for (a, b) in rotated.pixels().iter().zip(expect.pixels()) {
                assert!((a - b).abs() <= 1e-6, "theta {theta}");
            }
        }
    }

    #[test]
    fn glyph_has_no_rotational_symmetry() {
        let side = 40;
        let style = GlyphStyle::default();
        let mut up = ImageBuffer::new(side, side, 3);
        render_glyph(&mut up, &FaceAnnotation::new(Box::new(4.0, 4.0, 32.0), 0.0), &style);
        for turn in [QuarterTurn::Cw90, QuarterTurn::Half, QuarterTurn::Cw270] {
            let r = rot_exact(&up, turn);
            let diff: f32 = r.pixels().iter().zip(up.pixels()).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 10.0, "{turn:?} leaves the glyph unchanged");
        }
    }
}
