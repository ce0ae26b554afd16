//! PNG (8-bit, sRGB-encoded) and PFM (32-bit float) images.
//!
//! In memory, images are linear-light `f64`. PNG stores `round(255 srgb(v))`
//! for color channels; a fourth channel is treated as linear alpha. PFM stores
//! the values as little-endian `f32`, bottom row first.

use std::io::Cursor;
use std::path::Path;

use texmesh::render::Image;
use texmesh::{Error, Result};

/// Standard sRGB transfer curve, linear to encoded, clamped to `[0, 1]`.
pub fn srgb_encode(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn srgb_byte(v: f64) -> u8 {
    (srgb_encode(v) * 255.0).round() as u8
}

/// Raw 8-bit pixels as stored in a PNG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bytes8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Bytes8 {
    pub fn from_linear(img: &Image) -> Self {
        let data = img
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if img.channels == 4 && i % 4 == 3 {
                    (v.clamp(0.0, 1.0) * 255.0).round() as u8
                } else {
                    srgb_byte(v)
                }
            })
            .collect();
        Self {
            width: img.width,
            height: img.height,
            channels: img.channels,
            data,
        }
    }

    pub fn to_linear(&self) -> Image {
        let mut img = Image::new(self.width, self.height, self.channels);
        for (i, (dst, &b)) in img.data.iter_mut().zip(&self.data).enumerate() {
            let c = b as f64 / 255.0;
            *dst = if self.channels == 4 && i % 4 == 3 { c } else { srgb_decode(c) };
        }
        img
    }
}

fn color_type(channels: usize) -> Result<png::ColorType> {
    Ok(match channels {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::invalid(format!("PNG supports 1 to 4 channels, got {c}"))),
    })
}

pub fn encode_png(px: &Bytes8) -> Result<Vec<u8>> {
    let ct = color_type(px.channels)?;
    if px.width == 0 || px.height == 0 || px.data.len() != px.width * px.height * px.channels {
        return Err(Error::invalid("PNG pixel buffer does not match its dimensions"));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, px.width as u32, px.height as u32);
        enc.set_color(ct);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
        let mut w = enc.write_header().map_err(|e| Error::invalid(format!("png: {e}")))?;
        w.write_image_data(&px.data).map_err(|e| Error::invalid(format!("png: {e}")))?;
    }
    Ok(out)
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Decode any PNG to 8-bit samples (palettes expanded, 16-bit stripped).
pub fn decode_png(bytes: &[u8]) -> Result<Bytes8> {
    if bytes.len() < 8 || bytes[..8] != PNG_SIGNATURE {
        return Err(Error::parse(0, "missing PNG signature"));
    }
    if bytes.len() < 33 || &bytes[12..16] != b"IHDR" {
        return Err(Error::parse(8, "first chunk is not IHDR"));
    }
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    // the png crate does not report positions; header problems point at IHDR
    let mut reader = dec.read_info().map_err(|e| Error::parse(16, format!("png header: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(16, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(33, format!("png data: {e}")))?;
    let channels = info.color_type.samples();
    buf.truncate(info.line_size * info.height as usize);
    let (w, h) = (info.width as usize, info.height as usize);
    // rows may be padded only for sub-byte depths, which normalize_to_color8 removes
    debug_assert_eq!(info.line_size, w * channels);
    Ok(Bytes8 {
        width: w,
        height: h,
        channels,
        data: buf,
    })
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_png(&Bytes8::from_linear(img))?)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    Ok(decode_png(&std::fs::read(path)?)?.to_linear())
}

/// PFM bytes: `PF` (3 channels) or `Pf` (1 channel), scale `-1` for little-endian.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Next whitespace-delimited token at or after `pos`: `(start, text)`.
fn token(bytes: &[u8], pos: &mut usize) -> Option<(usize, String)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| (start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let channels = match token(bytes, &mut pos) {
        Some((_, t)) if t == "PF" => 3,
        Some((_, t)) if t == "Pf" => 1,
        Some((s, t)) => return Err(Error::parse(s, format!("bad PFM magic {t:?}"))),
        None => return Err(Error::parse(0, "empty PFM file")),
    };
    let mut dim = |what: &str| -> Result<usize> {
        let (s, t) = token(bytes, &mut pos).ok_or_else(|| Error::parse(bytes.len(), format!("missing {what}")))?;
        t.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::parse(s, format!("bad {what} {t:?}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let (s, t) = token(bytes, &mut pos).ok_or_else(|| Error::parse(bytes.len(), "missing scale"))?;
    let scale: f64 = t
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite() && *v != 0.0)
        .ok_or_else(|| Error::parse(s, format!("bad scale {t:?}")))?;
    // exactly one whitespace byte separates the header from the data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(pos, "missing newline after scale"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::parse(s, "image dimensions overflow"))?;
    let data = &bytes[pos..];
    if data.len() != 4 * n {
        return Err(Error::parse(pos, format!("expected {} data bytes, found {}", 4 * n, data.len())));
    }
    let little = scale < 0.0;
    let mut img = Image::new(width, height, channels);
    let row = width * channels;
    for (k, c) in data.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (y, i) = (k / row, k % row);
        img.data[(height - 1 - y) * row + i] = v as f64;
    }
    Ok(img)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pfm(img)?)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(&std::fs::read(path)?)
}
