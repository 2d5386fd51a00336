use std::fs;
use std::io::{self, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::scalar::Scalar;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Sample depth used when writing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

fn describe_magic(bytes: &[u8]) -> String {
    let head = &bytes[..bytes.len().min(8)];
    let hex: Vec<String> = head.iter().map(|b| format!("{b:02x}")).collect();
    let text: String =
        head.iter().map(|&b| if b.is_ascii_graphic() { b as char } else { '.' }).collect();
    format!("leading bytes [{}] \"{text}\"", hex.join(" "))
}

/// Load a binary PGM (P5) or 8/16-bit grayscale PNG, scaled to `[0, 1]` by
/// its maximum sample value.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let decoded = if bytes.starts_with(b"P5") {
        decode_pgm(&bytes)
    } else if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes)
    } else {
        Err(Error::Format(format!(
            "unsupported image format ({}); expected binary PGM (P5) or PNG",
            describe_magic(&bytes)
        )))
    };
    decoded.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn samples_to_image<T: Scalar>(w: usize, h: usize, samples: Vec<u32>, maxval: u32) -> Result<Image<T>> {
    let scale = 1.0 / maxval as f64;
    let data = samples.into_iter().map(|v| T::lit((v.min(maxval) as f64) * scale)).collect();
    Image::new(h, w, data)
}

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}")))
}

fn decode_pgm<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let mut pos = 2;
    let mut field = |name: &str| -> Result<u32> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(truncated("PGM header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PGM {name} field")))
    };
    let (w, h, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("invalid PGM header {w}x{h}, maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(truncated("PGM header"));
    }
    let body = &bytes[pos + 1..];
    let (w, h) = (w as usize, h as usize);
    let width = if maxval > 255 { 2 } else { 1 };
    if body.len() < w * h * width {
        return Err(truncated(&format!("PGM data: {} of {} bytes", body.len(), w * h * width)));
    }
    let samples = if width == 2 {
        body.chunks_exact(2).take(w * h).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        body[..w * h].iter().map(|&b| b as u32).collect()
    };
    samples_to_image(w, h, samples, maxval)
}

fn decode_png<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(png_error)?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    let (color, depth) = (info.color_type, info.bit_depth);
    if color != png::ColorType::Grayscale {
        return Err(Error::Format(format!("PNG colour type {color:?} is not grayscale")));
    }
    let maxval = match depth {
        png::BitDepth::Eight => 255,
        png::BitDepth::Sixteen => 65535,
        d => return Err(Error::Format(format!("PNG bit depth {d:?} is not 8 or 16"))),
    };
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    let row = frame.line_size;
    let samples = if maxval == 255 {
        (0..h).flat_map(|y| buf[y * row..y * row + w].iter().map(|&b| b as u32)).collect()
    } else {
        (0..h)
            .flat_map(|y| {
                buf[y * row..y * row + 2 * w]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
            })
            .collect()
    };
    samples_to_image(w, h, samples, maxval)
}

fn png_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::Format(format!("PNG: {other}")),
    }
}

fn quantize<T: Scalar>(img: &Image<T>, depth: BitDepth) -> Vec<u32> {
    let max = depth.max() as f64;
    img.data()
        .iter()
        .map(|v| (v.to_f64().unwrap_or(0.0).clamp(0.0, 1.0) * max).round() as u32)
        .collect()
}

/// Write a grayscale image; the format follows the extension (`.pgm` or
/// `.png`). Values are clamped to `[0, 1]` and rounded.
pub fn save_image<T: Scalar>(path: impl AsRef<Path>, img: &Image<T>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let samples = quantize(img, depth);
    let bytes: Vec<u8> = match depth {
        BitDepth::Eight => samples.iter().map(|&v| v as u8).collect(),
        BitDepth::Sixteen => samples.iter().flat_map(|&v| (v as u16).to_be_bytes()).collect(),
    };
    let (w, h) = (img.width(), img.height());
    let mut out = BufWriter::new(fs::File::create(path)?);
    match ext.as_deref() {
        Some("pgm") => {
            write!(out, "P5\n{w} {h}\n{}\n", depth.max())?;
            out.write_all(&bytes)?;
        }
        Some("png") => {
            let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(match depth {
                BitDepth::Eight => png::BitDepth::Eight,
                BitDepth::Sixteen => png::BitDepth::Sixteen,
            });
            let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
            writer.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
            writer.finish().map_err(|e| Error::Format(e.to_string()))?;
        }
        _ => {
            return Err(Error::Format(format!(
                "{}: unknown output extension; use .pgm or .png",
                path.display()
            )))
        }
    }
    out.flush()?;
    Ok(())
}
