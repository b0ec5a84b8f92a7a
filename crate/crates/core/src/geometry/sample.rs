//! Bilinear window extraction and continuous rotation.
//!
//! Pixel `(x, y)` covers `[x, x+1) x [y, y+1)`; its value sits at the center
//! `(x + 0.5, y + 0.5)`. Samples outside the image read as zero.

use crate::error::{PcnError, Result};
use crate::tensor::Tensor;

use super::boxes::Box;
use super::image::ImageBuffer;

/// `(sin, cos)` of an angle in degrees, exact on multiples of 90.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Normalizes an angle into `(-180, 180]`.
pub fn normalize_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Bilinear sample at continuous point `(px, py)`, written to `out[..channels]`.
#[inline]
pub fn bilinear(img: &ImageBuffer, px: f64, py: f64, out: &mut [f32]) {
    let c = img.channels();
    let u = px - 0.5;
    let v = py - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = (u - x0) as f32;
    let fy = (v - y0) as f32;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (w, h) = (img.width() as i64, img.height() as i64);
    out[..c].iter_mut().for_each(|o| *o = 0.0);
    if x0 + 1 < 0 || y0 + 1 < 0 || x0 >= w || y0 >= h {
        return;
    }
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    for (x, y, wt) in taps {
        if wt == 0.0 || x < 0 || y < 0 || x >= w || y >= h {
            continue;
        }
        let p = img.pixel(x as usize, y as usize);
        for ch in 0..c {
            out[ch] += wt * p[ch];
        }
    }
}

fn check_window(win: &Box) -> Result<()> {
    if !(win.w > 0.0) || !win.a.is_finite() || !win.b.is_finite() {
        return Err(PcnError::InvalidBox(format!("window {win:?}")));
    }
    Ok(())
}

/// Resamples the square `win` to `out_side x out_side` and maps values to
/// `[-1, 1]` (`x * 2 - 1`). Output layout is `(channels, side, side)`.
pub fn crop_resize(img: &ImageBuffer, win: Box, out_side: usize) -> Result<Tensor<f32>> {
    rotated_crop_resize(img, None, 0.0, win, out_side)
}

/// Crops `win` from `img` rotated clockwise by `theta_deg` about `pivot`
/// (the image center when `None`), without materializing the rotated image.
pub fn rotated_crop_resize(
    img: &ImageBuffer,
    pivot: Option<(f64, f64)>,
    theta_deg: f64,
    win: Box,
    out_side: usize,
) -> Result<Tensor<f32>> {
    check_window(&win)?;
    if out_side == 0 {
        return Err(PcnError::shape("output side must be positive"));
    }
    let c = img.channels();
    let (cx, cy) = pivot.unwrap_or((img.width() as f64 * 0.5, img.height() as f64 * 0.5));
    let (sin, cos) = sin_cos_deg(theta_deg);
    let rotate = theta_deg.rem_euclid(360.0) != 0.0;
    let step = win.w / out_side as f64;
    let plane = out_side * out_side;
    let mut data = vec![0.0f32; c * plane];
    let mut px = [0.0f32; 3];
    for i in 0..out_side {
        let qy = win.b + (i as f64 + 0.5) * step;
        for j in 0..out_side {
            let qx = win.a + (j as f64 + 0.5) * step;
            let (sx, sy) = if rotate {
                let (dx, dy) = (qx - cx, qy - cy);
                (cx + dx * cos + dy * sin, cy - dx * sin + dy * cos)
            } else {
                (qx, qy)
            };
            bilinear(img, sx, sy, &mut px);
            for ch in 0..c {
                data[ch * plane + i * out_side + j] = px[ch] * 2.0 - 1.0;
            }
        }
    }
    Tensor::from_vec(&[c, out_side, out_side], data)
}

/// Rotates about the image center, clockwise for positive angles, with
/// bilinear sampling and zero fill. Output keeps the input dimensions.
pub fn rotate_continuous(img: &ImageBuffer, theta_deg: f64) -> ImageBuffer {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (cx, cy) = (w as f64 * 0.5, h as f64 * 0.5);
    let (sin, cos) = sin_cos_deg(theta_deg);
    let mut out = ImageBuffer::new(w, h, c);
    let mut px = [0.0f32; 3];
    for y in 0..h {
        let dy = y as f64 + 0.5 - cy;
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let sx = cx + dx * cos + dy * sin;
            let sy = cy - dx * sin + dy * cos;
            bilinear(img, sx, sy, &mut px);
            out.pixel_mut(x, y).copy_from_slice(&px[..c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::frames::{rot_exact, QuarterTurn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h * c).map(|_| rng.random::<f32>()).collect();
        ImageBuffer::from_pixels(w, h, c, px).unwrap()
    }

    fn smooth(w: usize, h: usize) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                let v = 0.5
                    + 0.25 * ((x as f32) * 0.21).sin() * ((y as f32) * 0.17).cos()
                    + 0.2 * ((x as f32 + y as f32) * 0.05).sin();
                img.set(x, y, 0, v);
            }
        }
        img
    }

    #[test]
    fn normalize_range() {
        assert_eq!(normalize_deg(180.0), 180.0);
        assert_eq!(normalize_deg(-180.0), 180.0);
        assert_eq!(normalize_deg(290.0), -70.0);
        assert_eq!(normalize_deg(-190.0), 170.0);
        assert_eq!(normalize_deg(0.0), 0.0);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = noise(9, 6, 3, 1);
        assert_eq!(rotate_continuous(&img, 0.0), img);
    }

    #[test]
    fn half_turn_matches_exact() {
        let img = noise(10, 8, 3, 2);
        let a = rotate_continuous(&img, 180.0);
        let b = rot_exact(&img, QuarterTurn::Half);
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn rotate_back_and_forth() {
        let img = smooth(64, 64);
        let back = rotate_continuous(&rotate_continuous(&img, 30.0), -30.0);
        let mut err = 0.0;
        let mut n = 0;
        for y in 16..48 {
            for x in 16..48 {
                err += (back.get(x, y, 0) - img.get(x, y, 0)).abs();
                n += 1;
            }
        }
        assert!(err / (n as f32) < 0.02, "mean abs error {}", err / n as f32);
    }

    #[test]
    fn full_window_crop_is_normalization() {
        let img = noise(12, 12, 3, 3);
        let t = crop_resize(&img, Box::new(0.0, 0.0, 12.0), 12).unwrap();
        for c in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    let v = t.data()[c * 144 + y * 12 + x];
                    assert!((v - (img.get(x, y, c) * 2.0 - 1.0)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_image_constant_crop() {
        let mut img = ImageBuffer::new(20, 20, 1);
        img.pixels_mut().iter_mut().for_each(|p| *p = 0.25);
        let t = crop_resize(&img, Box::new(2.3, 4.1, 11.7), 24).unwrap();
        assert!(t.data().iter().all(|&v| (v + 0.5).abs() < 1e-6));
    }

    #[test]
    fn out_of_bounds_is_zero_padded() {
        let mut img = ImageBuffer::new(4, 4, 1);
        img.pixels_mut().iter_mut().for_each(|p| *p = 1.0);
        let t = crop_resize(&img, Box::new(-8.0, -8.0, 4.0), 4).unwrap();
        assert!(t.data().iter().all(|&v| v == -1.0));
        assert!(crop_resize(&img, Box::new(0.0, 0.0, 0.0), 4).is_err());
    }

    #[test]
    fn checkerboard_downscale_matches_bilinear_oracle() {
        let n = 16;
        let mut img = ImageBuffer::new(n, n, 1);
        for y in 0..n {
            for x in 0..n {
                img.set(x, y, 0, ((x + y) % 2) as f32);
            }
        }
        let t = crop_resize(&img, Box::new(0.0, 0.0, n as f64), n / 2).unwrap();
        // Output pixel j samples source center 2j + 1, i.e. index-space
        // coordinate 2j + 0.5: an even average of columns 2j and 2j+1.
        for i in 0..n / 2 {
            for j in 0..n / 2 {
                let (u, v) = (2.0 * j as f64 + 0.5, 2.0 * i as f64 + 0.5);
                let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                let (fx, fy) = (u - x0 as f64, v - y0 as f64);
                let g = |x: usize, y: usize| img.get(x, y, 0) as f64;
                let expect = g(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + g(x0 + 1, y0) * fx * (1.0 - fy)
                    + g(x0, y0 + 1) * (1.0 - fx) * fy
                    + g(x0 + 1, y0 + 1) * fx * fy;
                let got = t.data()[i * n / 2 + j] as f64;
                assert!((got - (expect * 2.0 - 1.0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotated_crop_matches_materialized_rotation() {
        let img = smooth(40, 40);
        let win = Box::new(8.0, 10.0, 16.0);
        let rotated = rotate_continuous(&img, 37.0);
        let a = crop_resize(&rotated, win, 16).unwrap();
        let b = rotated_crop_resize(&img, None, 37.0, win, 16).unwrap();
        // Pixel-aligned window: sampling the rotated raster at its pixel
        // centers equals sampling the source directly.
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
