//! Binary PPM (P6) and PGM (P5) images, 8-bit only.

use dcat_core::image::RgbImage;

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> AppResult<Header> {
    if bytes.len() < 2 {
        return Err(AppError::data("image file is too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments between fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AppError::data("malformed netpbm header"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(AppError::data("malformed netpbm header"));
    }
    if fields[2] != 255 {
        return Err(AppError::data(format!("unsupported maxval {}", fields[2])));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        offset: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8]) -> AppResult<RgbImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(AppError::data("not a binary PPM (P6) file"));
    }
    let need = h.width * h.height * 3;
    let body = &bytes[h.offset..];
    if body.len() != need {
        return Err(AppError::data(format!("PPM body has {} bytes, expected {need}", body.len())));
    }
    RgbImage::new(h.width, h.height, body.to_vec()).map_err(AppError::from)
}

pub fn decode_pgm(bytes: &[u8]) -> AppResult<GrayImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(AppError::data("not a binary PGM (P5) file"));
    }
    let need = h.width * h.height;
    let body = &bytes[h.offset..];
    if body.len() != need {
        return Err(AppError::data(format!("PGM body has {} bytes, expected {need}", body.len())));
    }
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        data: body.to_vec(),
    })
}
