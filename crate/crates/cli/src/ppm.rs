//! Binary PPM (P6, maxval 255) images. Pixel `p` stands for `p / 127.5 - 1`;
//! values are encoded by `floor((v + 1) * 127.5 + 0.5)` after clamping to
//! `[-1, 1]`, so decoding then re-encoding is the identity on bytes.

use std::path::Path;

use cgans_core::{Error, Result, Tensor};

pub fn encode_value(v: f32) -> u8 {
    let v = (v as f64).clamp(-1.0, 1.0);
    ((v + 1.0) * 127.5 + 0.5).floor() as u8
}

pub fn decode_value(p: u8) -> f32 {
    (p as f64 / 127.5 - 1.0) as f32
}

/// Encodes a `[3,H,W]` or `[1,3,H,W]` image.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.dims() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        ref d => return Err(Error::Data(format!("expected a 3-channel image, got dims {d:?}"))),
    };
    if !image.is_finite() {
        return Err(Error::NonFinite("image to encode".into()));
    }
    let plane = h * w;
    let data = image.data();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(encode_value(data[c * plane + i]));
        }
    }
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
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
        return Err(Error::Format("truncated PPM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&v: &usize| v > 0)
        .ok_or_else(|| Error::Format(format!("bad PPM {what} {:?}", String::from_utf8_lossy(tok))))
}

/// Decodes to a `[3,H,W]` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::Format("not a binary PPM (expected P6)".into()));
    }
    let w = header_number(bytes, &mut pos, "width")?;
    let h = header_number(bytes, &mut pos, "height")?;
    let max = header_number(bytes, &mut pos, "maxval")?;
    if max != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {max}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = bytes.get(pos + 1..).unwrap_or_default();
    let plane = h * w;
    if raster.len() != 3 * plane {
        return Err(Error::Format(format!(
            "PPM raster has {} bytes, expected {}",
            raster.len(),
            3 * plane
        )));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = decode_value(px[c]);
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
