//! Binary greyscale PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Dims, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreyImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode_pgm(img: &GreyImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GreyImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err("not a binary PGM (expected P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and `#` comments may separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(format_err("truncated PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| format_err(format!("bad PGM header field `{text}`")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(format!("unsupported PGM maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err("missing whitespace after PGM header"));
    }
    pos += 1;
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(format_err(format!("truncated PGM payload: {} of {need} bytes", payload.len())));
    }
    Ok(GreyImage { width, height, pixels: payload[..need].to_vec() })
}

pub fn read_pgm(path: &Path) -> Result<GreyImage> {
    decode_pgm(&fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_pgm(path: &Path, img: &GreyImage) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

/// `round(255 v)` of a value clamped to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn image_to_grey<T: Real>(t: &Tensor<T>) -> GreyImage {
    let d = t.dims();
    GreyImage { width: d.w, height: d.h, pixels: t.data()[..d.h * d.w].iter().map(|v| quantize(v.as_f64())).collect() }
}

pub fn grey_to_image(g: &GreyImage) -> Tensor<f32> {
    Tensor::from_vec(Dims::new(1, 1, g.height, g.width), g.pixels.iter().map(|&b| dequantize(b)).collect())
        .expect("length matches")
}

pub fn mask_to_grey(m: &BinaryMask) -> GreyImage {
    GreyImage {
        width: m.width(),
        height: m.height(),
        pixels: m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
}

/// Pixels of 128 or more are foreground.
pub fn grey_to_mask(g: &GreyImage) -> BinaryMask {
    BinaryMask::from_bits(g.height, g.width, g.pixels.iter().map(|&b| b >= 128).collect()).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 9]);
        let g = decode_pgm(&bytes).unwrap();
        assert_eq!((g.width, g.height, g.pixels.clone()), (2, 1, vec![7, 9]));
        assert_eq!(decode_pgm(&encode_pgm(&g)).unwrap(), g);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0\n"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n1"), Err(Error::Format(_))));
    }

    #[test]
    fn quantization_bound() {
        for i in 0..=1000 {
            let v = i as f64 / 1000.0;
            assert!((dequantize(quantize(v)) as f64 - v).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }
}
