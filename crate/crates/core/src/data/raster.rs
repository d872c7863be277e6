//! 8-bit raster decoding and encoding: PNG via the `png` crate, and binary
//! PPM (P6) / PGM (P5) handled here.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit raster with 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3)
            || width == 0
            || height == 0
            || data.len() != width * height * channels
        {
            return Err(Error::Data(format!(
                "raster {width}x{height}x{channels} with {} bytes",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Raster {
            channels: 3,
            data,
            ..*self
        }
    }

    /// Gray version; RGB is reduced by the rounded channel mean.
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| ((p[0] as u32 + p[1] as u32 + p[2] as u32 + 1) / 3) as u8)
            .collect();
        Raster {
            channels: 1,
            data,
            ..*self
        }
    }
}

fn decode_err(reason: impl Into<String>) -> Error {
    Error::Data(reason.into())
}

pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| decode_err(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(format!("png: {e}")))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgb => (3, buf),
        png::ColorType::Rgba => (
            3,
            buf.chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .collect(),
        ),
        png::ColorType::Indexed => return Err(decode_err("png: unexpanded palette")),
    };
    Raster::new(w, h, channels, data)
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(if r.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| decode_err(format!("png: {e}")))?;
        writer
            .write_image_data(&r.data)
            .map_err(|e| decode_err(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Binary PGM (P5) or PPM (P6) with maxval ≤ 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(decode_err("pnm: expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(format!("pnm: bad header field at byte {start}")))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(format!("pnm: unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(decode_err("pnm: missing separator after header"));
    }
    pos += 1;
    let need = w * h * channels;
    let body = bytes.get(pos..pos + need).ok_or_else(|| {
        decode_err(format!(
            "pnm: truncated pixel data ({} of {need} bytes)",
            bytes.len() - pos
        ))
    })?;
    let data = if maxval == 255 {
        body.to_vec()
    } else {
        body.iter()
            .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
            .collect()
    };
    Raster::new(w, h, channels, data)
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    out
}

/// Decodes by content: PNG signature, otherwise PNM.
pub fn decode(bytes: &[u8]) -> Result<Raster> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else {
        decode_pnm(bytes)
    }
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(reason) => Error::Data(format!("{}: {reason}", path.display())),
        other => other,
    })
}

/// Encodes as PNM when the extension is `.pgm`/`.ppm`, otherwise PNG.
pub fn encode_for_path(r: &Raster, path: &Path) -> Result<Vec<u8>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") | Some("ppm") | Some("pnm") => Ok(encode_pnm(r)),
        _ => encode_png(r),
    }
}
