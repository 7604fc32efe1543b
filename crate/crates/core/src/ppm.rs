//! Binary PPM (P6, maxval 255) reading and writing.
//!
//! This is the bit-exact interchange format: writing quantizes with
//! `round(v * 255)` clamped to [0, 255], reading maps back with `v / 255`,
//! and write-read-write is byte stable.

use crate::backbone::Image;
use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub fn image_to_ppm_bytes(image: &Image) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    let data = image.tensor().to_vec();
    let plane = h * w;
    for i in 0..plane {
        for c in 0..3 {
            let v = (data[c * plane + i] * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    out
}

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, image_to_ppm_bytes(image))?;
    Ok(())
}

pub fn image_from_ppm_bytes(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;

    fn parse_err(detail: impl Into<String>) -> Error {
        Error::Parse {
            what: "ppm",
            detail: detail.into(),
        }
    }

    // Header tokens are separated by whitespace; '#' starts a comment that
    // runs to end of line.
    let next_token = |bytes: &[u8], pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(parse_err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(parse_err(format!("expected magic P6, got {magic:?}")));
    }
    let w: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|e| parse_err(format!("bad width: {e}")))?;
    let h: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|e| parse_err(format!("bad height: {e}")))?;
    let maxval: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|e| parse_err(format!("bad maxval: {e}")))?;
    if maxval != 255 {
        return Err(parse_err(format!("unsupported maxval {maxval} (only 255)")));
    }
    if w == 0 || h == 0 {
        return Err(parse_err("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(parse_err("missing separator after maxval"));
    }
    pos += 1;

    let need = 3 * w * h;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(parse_err(format!(
            "truncated payload: need {need} bytes, have {}",
            payload.len()
        )));
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = payload[3 * i + c] as f64 / 255.0;
        }
    }
    Image::from_unit_pixels(h, w, data)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    image_from_ppm_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, ImageKind};

    #[test]
    fn zero_image_header_and_payload() {
        let img = Image::from_unit_pixels(2, 2, vec![0.0; 12]).unwrap();
        let bytes = image_to_ppm_bytes(&img);
        let mut expect = b"P6\n2 2\n255\n".to_vec();
        expect.extend([0u8; 12]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn write_read_recovers_within_quantization() {
        let imgs = gen_synthetic(ImageKind::Content, 1, 16, 3).unwrap();
        let bytes = image_to_ppm_bytes(&imgs[0]);
        let back = image_from_ppm_bytes(&bytes).unwrap();
        let (a, b) = (imgs[0].tensor().to_vec(), back.tensor().to_vec());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn second_write_is_byte_identical() {
        let imgs = gen_synthetic(ImageKind::Style, 1, 16, 4).unwrap();
        let first = image_to_ppm_bytes(&imgs[0]);
        let back = image_from_ppm_bytes(&first).unwrap();
        let second = image_to_ppm_bytes(&back);
        assert_eq!(first, second);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n2 1\n# another\n255\n".to_vec();
        bytes.extend([10u8, 20, 30, 40, 50, 60]);
        let img = image_from_ppm_bytes(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert!((img.tensor().to_vec()[0] - 10.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_inputs_error() {
        assert!(image_from_ppm_bytes(b"P5\n1 1\n255\n\x00").is_err());
        assert!(image_from_ppm_bytes(b"P6\n2 2\n65535\n").is_err());
        let mut truncated = b"P6\n4 4\n255\n".to_vec();
        truncated.extend([0u8; 10]);
        assert!(image_from_ppm_bytes(&truncated).is_err());
    }
}
