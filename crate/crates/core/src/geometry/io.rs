//! Image file I/O: binary PPM (P6) and PGM (P5), PNG behind the `png`
//! feature.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{PcnError, Result};

use super::image::ImageBuffer;

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PcnError::Image("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(PcnError::Image(format!("unsupported magic {other:?}"))),
    };
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| PcnError::Image(format!("bad header field {s:?}")))
    };
    let width = parse(token()?)?;
    let height = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval == 0 || maxval > 255 {
        return Err(PcnError::Image(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let n = width * height * channels;
    if width == 0 || height == 0 || bytes.len() < start + n {
        return Err(PcnError::Image("truncated raster".into()));
    }
    let pixels = bytes[start..start + n]
        .iter()
        .map(|&b| (b as f32 / maxval as f32).min(1.0))
        .collect();
    ImageBuffer::from_pixels(width, height, channels, pixels)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.pixels().iter().map(|&v| quantize(v)));
    out
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        return decode_png(&bytes);
    }
    decode_pnm(&bytes)
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_pnm(img))?;
    Ok(())
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| PcnError::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| PcnError::Image("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| PcnError::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_ch = info.color_type.samples();
    let channels = if src_ch >= 3 { 3 } else { 1 };
    let mut pixels = Vec::with_capacity(w * h * channels);
    for px in buf[..info.buffer_size()].chunks_exact(src_ch) {
        for &b in &px[..channels] {
            pixels.push(b as f32 / 255.0);
        }
    }
    ImageBuffer::from_pixels(w, h, channels, pixels)
}

#[cfg(not(feature = "png"))]
fn decode_png(_bytes: &[u8]) -> Result<ImageBuffer> {
    Err(PcnError::Image(
        "PNG input requires the `png` feature".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_on_quantized_values() {
        let px: Vec<f32> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
        let img = ImageBuffer::from_pixels(2, 3, 3, px).unwrap();
        let back = decode_pnm(&encode_pnm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_pnm(&bytes).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 1, 1));
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P6\n4 4\n255\n\x00").is_err());
    }
}
