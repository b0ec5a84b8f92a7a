//! Drawing detections: a 1-px box outline and a tick from the box center
//! pointing to the top of the face.

use pcn_core::geometry::{sin_cos_deg, ImageBuffer};
use pcn_core::pipeline::DetectedFace;

pub const BOX_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
pub const TICK_COLOR: [f32; 3] = [0.0, 0.3, 1.0];

fn put(img: &mut ImageBuffer, x: i64, y: i64, color: [f32; 3]) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let px = img.pixel_mut(x as usize, y as usize);
    if px.len() == 3 {
        px.copy_from_slice(&color);
    } else {
        px[0] = (color[0] + color[1] + color[2]) / 3.0;
    }
}

fn line(img: &mut ImageBuffer, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [f32; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (x0 + t * (x1 - x0)).floor() as i64, (y0 + t * (y1 - y0)).floor() as i64, color);
    }
}

/// Copy of `img` with every detection drawn.
pub fn draw_detections(img: &ImageBuffer, faces: &[DetectedFace]) -> ImageBuffer {
    let mut out = img.clone();
    for f in faces {
        let b = f.bbox;
        let (x0, y0) = (b.a, b.b);
        let (x1, y1) = (b.a + b.w - 1.0, b.b + b.w - 1.0);
        line(&mut out, (x0, y0), (x1, y0), BOX_COLOR);
        line(&mut out, (x1, y0), (x1, y1), BOX_COLOR);
        line(&mut out, (x1, y1), (x0, y1), BOX_COLOR);
        line(&mut out, (x0, y1), (x0, y0), BOX_COLOR);
        // upright faces point to -y; clockwise angles turn that toward +x
        let (cx, cy) = b.center();
        let (sin, cos) = sin_cos_deg(f.theta_rip);
        let r = 0.5 * b.w;
        line(&mut out, (cx, cy), (cx + r * sin, cy - r * cos), TICK_COLOR);
    }
    out
}
