//! Image input.
//!
//! Two lossless formats are read:
//!
//! * binary PPM (`P6`, maxval up to 255), scaled to `[0, 1]`;
//! * a raw float array: the four bytes `KRAW`, then height, width and
//!   channel count as little-endian `u32`, then `height * width * channels`
//!   little-endian `f32` values in row-major HWC order.
//!
//! Images are held as `H × W × 3` arrays of `f64` and resized bilinearly
//! to the model's square input size.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"KRAW";

pub type Image = Array3<f64>;

pub fn load(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { what, detail } => Error::Format {
            what,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::format("image", "unrecognized header"))
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("image", "truncated raw header"))
}

fn decode_raw(bytes: &[u8]) -> Result<Image> {
    let h = read_u32(bytes, 4)? as usize;
    let w = read_u32(bytes, 8)? as usize;
    let c = read_u32(bytes, 12)? as usize;
    if c != 3 {
        return Err(Error::format("image", format!("{c} channels, expected 3")));
    }
    let body = &bytes[16..];
    if body.len() != h * w * c * 4 {
        return Err(Error::format(
            "image",
            format!("raw body of {} bytes for {h}x{w}x{c}", body.len()),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array3::from_shape_vec((h, w, c), values).map_err(|e| Error::format("image", e.to_string()))
}

pub fn encode_raw(image: &Image) -> Vec<u8> {
    let (h, w, c) = image.dim();
    let mut out = Vec::with_capacity(16 + h * w * c * 4);
    out.extend_from_slice(RAW_MAGIC);
    for v in [h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in image.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn save_raw(image: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(image)).map_err(|e| Error::io(path, e))
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    // header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    let mut fields = Vec::with_capacity(3);
    let mut pos = 2;
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("image", "bad PPM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields.push(
            text.parse::<usize>()
                .map_err(|e| Error::format("image", e.to_string()))?,
        );
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 255 {
        return Err(Error::format("image", format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace byte before the raster
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 3 {
        return Err(Error::format(
            "image",
            format!("PPM raster of {} bytes for {w}x{h}", body.len()),
        ));
    }
    let scale = maxval as f64;
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        body[(y * w + x) * 3 + c] as f64 / scale
    }))
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w, _) = image.dim();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Bilinear resize with half-pixel centers. Returns the input unchanged when
/// it already has the requested size.
pub fn resize(image: &Image, size: usize) -> Image {
    let (h, w, c) = image.dim();
    if h == size && w == size {
        return image.clone();
    }
    let sample = |dst: usize, src_len: usize| {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / size as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    Array3::from_shape_fn((size, size, c), |(y, x, ch)| {
        let (y0, y1, fy) = sample(y, h);
        let (x0, x1, fx) = sample(x, w);
        let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
        let bottom = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * w + x) * 3 + c) as f64 / (h * w * 3) as f64)
    }

    #[test]
    fn raw_round_trip() {
        let img = ramp(4, 5);
        let back = decode(&encode_raw(&img)).unwrap();
        assert_eq!(back.dim(), (4, 5, 3));
        for (a, b) in img.iter().zip(back.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn ppm_round_trip_at_8_bits() {
        let img = ramp(3, 2).mapv(|v| (v * 255.0).round() / 255.0);
        let back = decode(&encode_ppm(&img)).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img[[0, 0, 0]], 1.0);
        assert_eq!(img[[0, 0, 2]], 0.2);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"GIF89a").is_err());
        assert!(decode(b"KRAW\x01\x00\x00\x00").is_err());
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = Array3::from_elem((7, 9, 3), 0.25);
        let out = resize(&img, 4);
        assert_eq!(out.dim(), (4, 4, 3));
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = ramp(6, 6);
        assert_eq!(resize(&img, 6), img);
    }
}
