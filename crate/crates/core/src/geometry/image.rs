use crate::error::{PcnError, Result};

/// Interleaved row-major image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        ImageBuffer {
            width,
            height,
            channels,
            pixels: vec![0.0; width * height * channels],
        }
    }

    pub fn from_pixels(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(PcnError::Image(format!(
                "invalid image geometry {width}x{height}x{channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(PcnError::Image(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.pixels[i..i + self.channels]
    }

    /// Exact integer crop. Fails with `Oob` unless the window lies inside
    /// the image.
    pub fn crop(&self, x: i64, y: i64, side: usize) -> Result<ImageBuffer> {
        if x < 0
            || y < 0
            || side == 0
            || x as usize + side > self.width
            || y as usize + side > self.height
        {
            return Err(PcnError::Oob(
                format!("({x}, {y}, {side})"),
                self.width,
                self.height,
            ));
        }
        let (x, y) = (x as usize, y as usize);
        let mut out = ImageBuffer::new(side, side, self.channels);
        for row in 0..side {
            let src = ((y + row) * self.width + x) * self.channels;
            let dst = row * side * self.channels;
            out.pixels[dst..dst + side * self.channels]
                .copy_from_slice(&self.pixels[src..src + side * self.channels]);
        }
        Ok(out)
    }
}
