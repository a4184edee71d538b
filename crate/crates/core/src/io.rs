//! Reading and writing 8-bit images.
//!
//! Binary PGM (`P5`, maxval 255) is parsed by hand; 8-bit grayscale and RGB
//! PNG go through the `png` crate. Pixel values map to `[0, 1]` by `/255`,
//! and writing quantises with round-half-up after clamping.
//!
//! All writes go to a temporary file in the destination directory that is
//! renamed into place, so a failed write never leaves a partial file.

use std::io::{Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Largest accepted pixel count per channel (2^28).
pub const MAX_PIXELS: u64 = 1 << 28;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Reads a PGM or PNG file, detected from its leading bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.first() == Some(&b'P') {
        decode_pgm(bytes)
    } else {
        Err(Error::UnsupportedFormat("unrecognised file signature".into()))
    }
}

/// Writes `img` as PGM (`.pgm`, one channel) or PNG (`.png`, one or three
/// channels), chosen by extension.
pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_for_path(path, img)?)
}

/// The bytes [`write_image`] would write to `path`.
pub fn encode_for_path(path: &Path, img: &Image) -> Result<Vec<u8>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pgm") => encode_pgm(img),
        Some("png") => encode_png(img),
        _ => Err(Error::UnsupportedFormat(format!(
            "cannot infer format of {} (use .pgm or .png)",
            path.display()
        ))),
    }
}

/// Replaces `path` with `bytes` via a temporary file and a rename.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// `round(v·255)` with halves rounded up, clamped to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn check_writable(img: &Image) -> Result<()> {
    if img.is_empty() {
        return Err(Error::dim("cannot write an empty image"));
    }
    if !img.is_finite() {
        return Err(Error::config("cannot write an image with non-finite values"));
    }
    Ok(())
}

fn check_extent(width: u64, height: u64) -> Result<()> {
    match width.checked_mul(height) {
        Some(n) if n <= MAX_PIXELS => Ok(()),
        _ => Err(Error::DimensionOverflow { width, height }),
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Decimal field; `None` on overflow.
    fn number(&mut self, what: &str) -> Result<Option<u64>> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        let mut value = Some(0u64);
        while let Some(&b) = self.bytes.get(self.pos).filter(|b| b.is_ascii_digit()) {
            value = value
                .and_then(|v| v.checked_mul(10))
                .and_then(|v| v.checked_add(u64::from(b - b'0')));
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::CorruptHeader(format!("expected {what} at byte {start}")));
        }
        Ok(value)
    }
}

/// Parses a binary PGM (`P5`) with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some([b'P', d]) if d.is_ascii_digit() => {
            return Err(Error::UnsupportedFormat(format!(
                "netpbm P{} (only binary graymap P5 is supported)",
                *d as char
            )))
        }
        _ => return Err(Error::CorruptHeader("missing P5 magic".into())),
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::CorruptHeader("magic must be followed by whitespace".into()));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let (w, h) = match (width, height) {
        (Some(w), Some(h)) => (w, h),
        (w, h) => {
            return Err(Error::DimensionOverflow {
                width: w.unwrap_or(u64::MAX),
                height: h.unwrap_or(u64::MAX),
            })
        }
    };
    if w == 0 || h == 0 {
        return Err(Error::CorruptHeader(format!("zero dimension {w}x{h}")));
    }
    check_extent(w, h)?;
    let maxval = cur.number("maxval")?;
    match maxval {
        Some(255) => {}
        Some(m) if (1..=65535).contains(&m) => {
            return Err(Error::UnsupportedFormat(format!("PGM maxval {m} (only 255 is supported)")))
        }
        _ => return Err(Error::CorruptHeader("maxval must be in 1..=65535".into())),
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::CorruptHeader("maxval must be followed by one whitespace byte".into())),
    }
    let (w, h) = (w as usize, h as usize);
    let payload = &bytes[cur.pos..];
    if payload.len() < w * h {
        return Err(Error::Truncated { expected: w * h, found: payload.len() });
    }
    let data = payload[..w * h].iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(1, h, w, data)
}

pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    check_writable(img)?;
    if img.channels() != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM holds one channel, image has {}",
            img.channels()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.as_slice().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::Png(e.to_string())
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let (w, h) = {
        let info = reader.info();
        (u64::from(info.width), u64::from(info.height))
    };
    check_extent(w, h)?;
    let (color, depth) = reader.output_color_type();
    let channels = match (color, depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => 1,
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "PNG {other:?} (only 8-bit grayscale or RGB)"
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or(Error::DimensionOverflow { width: w, height: h })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    let (w, h) = (w as usize, h as usize);
    let stride = frame.line_size;
    let img = Image::from_fn(channels, h, w, |c, i, j| f64::from(buf[i * stride + j * channels + c]) / 255.0);
    Ok(img)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    check_writable(img)?;
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::UnsupportedFormat(format!("PNG needs 1 or 3 channels, image has {c}"))),
    };
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let too_big = || Error::DimensionOverflow { width: w as u64, height: h as u64 };
    let (w32, h32) = (u32::try_from(w).map_err(|_| too_big())?, u32::try_from(h).map_err(|_| too_big())?);
    let mut interleaved = Vec::with_capacity(img.len());
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                interleaved.push(quantize(img.get(ch, i, j)));
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w32, h32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(png_error)?;
        writer.write_image_data(&interleaved).map_err(png_error)?;
        writer.finish().map_err(png_error)?;
    }
    Ok(out)
}
