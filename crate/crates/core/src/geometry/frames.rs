//! Exact quarter-turn rotations and window remapping between the four
//! pre-rotated copies of an image.
//!
//! Angles are in degrees, positive clockwise in screen coordinates
//! (x right, y down).

use serde::{Deserialize, Serialize};

use crate::error::{PcnError, Result};

use super::boxes::Box;
use super::image::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuarterTurn {
    Cw90,
    Half,
    Cw270,
}

impl QuarterTurn {
    pub fn from_degrees(deg: i32) -> Option<Self> {
        match deg.rem_euclid(360) {
            90 => Some(QuarterTurn::Cw90),
            180 => Some(QuarterTurn::Half),
            270 => Some(QuarterTurn::Cw270),
            _ => None,
        }
    }

    pub fn degrees(self) -> i32 {
        match self {
            QuarterTurn::Cw90 => 90,
            QuarterTurn::Half => 180,
            QuarterTurn::Cw270 => 270,
        }
    }
}

/// Which rotated copy of the source image a window's coordinates refer to.
/// The frame image is the original rotated by [`OrientationFrame::rotation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OrientationFrame {
    Up,
    Left,
    Right,
    Down,
}

impl OrientationFrame {
    pub const ALL: [OrientationFrame; 4] = [
        OrientationFrame::Up,
        OrientationFrame::Left,
        OrientationFrame::Right,
        OrientationFrame::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Rotation applied to the original image to obtain this frame.
    pub fn rotation(self) -> i32 {
        match self {
            OrientationFrame::Up => 0,
            OrientationFrame::Left => -90,
            OrientationFrame::Right => 90,
            OrientationFrame::Down => 180,
        }
    }

    /// Frame for a rotation in the 90 degree family; `None` otherwise.
    pub fn from_rotation(deg: f64) -> Option<Self> {
        let r = deg.rem_euclid(360.0);
        if r == 0.0 {
            Some(OrientationFrame::Up)
        } else if r == 90.0 {
            Some(OrientationFrame::Right)
        } else if r == 180.0 {
            Some(OrientationFrame::Down)
        } else if r == 270.0 {
            Some(OrientationFrame::Left)
        } else {
            None
        }
    }

    /// Dimensions of the frame image for an original of `width x height`.
    pub fn dims(self, width: usize, height: usize) -> (usize, usize) {
        match self {
            OrientationFrame::Up | OrientationFrame::Down => (width, height),
            OrientationFrame::Left | OrientationFrame::Right => (height, width),
        }
    }
}

/// Exact pixel permutation; no interpolation.
pub fn rot_exact(img: &ImageBuffer, turn: QuarterTurn) -> ImageBuffer {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (ow, oh) = match turn {
        QuarterTurn::Half => (w, h),
        _ => (h, w),
    };
    let mut out = ImageBuffer::new(ow, oh, c);
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = match turn {
                QuarterTurn::Cw90 => (y, h - 1 - x),
                QuarterTurn::Half => (w - 1 - x, h - 1 - y),
                QuarterTurn::Cw270 => (w - 1 - y, x),
            };
            out.pixel_mut(x, y).copy_from_slice(img.pixel(sx, sy));
        }
    }
    out
}

/// Renders the given frame of `img`; `Up` is a copy.
pub fn frame_image(img: &ImageBuffer, frame: OrientationFrame) -> ImageBuffer {
    match frame {
        OrientationFrame::Up => img.clone(),
        OrientationFrame::Right => rot_exact(img, QuarterTurn::Cw90),
        OrientationFrame::Down => rot_exact(img, QuarterTurn::Half),
        OrientationFrame::Left => rot_exact(img, QuarterTurn::Cw270),
    }
}

fn to_original(b: Box, from: OrientationFrame, w: f64, h: f64) -> Box {
    let (x, y, s) = (b.a, b.b, b.w);
    let (a, bb) = match from {
        OrientationFrame::Up => (x, y),
        OrientationFrame::Right => (y, h - x - s),
        OrientationFrame::Down => (w - x - s, h - y - s),
        OrientationFrame::Left => (w - y - s, x),
    };
    Box::new(a, bb, s)
}

fn from_original(b: Box, to: OrientationFrame, w: f64, h: f64) -> Box {
    let (x, y, s) = (b.a, b.b, b.w);
    let (a, bb) = match to {
        OrientationFrame::Up => (x, y),
        OrientationFrame::Right => (h - y - s, x),
        OrientationFrame::Down => (w - x - s, h - y - s),
        OrientationFrame::Left => (y, w - x - s),
    };
    Box::new(a, bb, s)
}

/// Moves a square between frames of a `width x height` original. Works on
/// real coordinates and never fails; see [`remap_window`] for the checked
/// variant.
pub fn remap_box(b: Box, from: OrientationFrame, to: OrientationFrame, width: usize, height: usize) -> Box {
    let (w, h) = (width as f64, height as f64);
    from_original(to_original(b, from, w, h), to, w, h)
}

/// Like [`remap_box`] but fails with `Oob` when the result leaves the target
/// frame.
pub fn remap_window(
    win: Box,
    from: OrientationFrame,
    to: OrientationFrame,
    width: usize,
    height: usize,
) -> Result<Box> {
    let out = remap_box(win, from, to, width, height);
    let (fw, fh) = to.dims(width, height);
    let inside = out.a >= 0.0
        && out.b >= 0.0
        && out.a + out.w <= fw as f64
        && out.b + out.w <= fh as f64;
    if !inside {
        return Err(PcnError::Oob(format!("{out:?}"), fw, fh));
    }
    Ok(out)
}
