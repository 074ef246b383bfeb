//! Binary PPM (P6), PGM (P5) and PNG reading and writing.
//!
//! Pixel values in memory are in [-1, 1]; files hold 8-bit samples.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{Image, Mask};

pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Header of a binary netpbm file: magic, width, height, maxval, then one
/// whitespace byte before the payload.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let what = path.display().to_string();
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            what,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
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
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(what.clone(), "malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(what, format!("maxval {maxval} unsupported (need 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(what, "zero image dimension"));
    }
    Ok((w, h, &bytes[(pos + 1).min(bytes.len())..]))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse_netpbm(&bytes, b"P6", path)?;
    if payload.len() < w * h * 3 {
        return Err(Error::format(path.display().to_string(), "truncated pixel data"));
    }
    Image::new(h, w, 3, payload[..w * h * 3].iter().map(|&b| from_byte(b)).collect())
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    match img.channels {
        3 => out.extend(img.data.iter().map(|&v| to_byte(v))),
        1 => out.extend(img.data.iter().flat_map(|&v| [to_byte(v); 3])),
        c => return Err(Error::invalid(format!("cannot write {c}-channel image as PPM"))),
    }
    Ok(out)
}

pub fn read_pgm_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, payload) = parse_netpbm(&bytes, b"P5", path)?;
    if payload.len() < w * h {
        return Err(Error::format(path.display().to_string(), "truncated mask data"));
    }
    Mask::new(h, w, payload[..w * h].iter().map(|&b| b >= 128).collect())
}

pub fn write_pgm_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let what = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(what.clone(), e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(what.clone(), e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let pick: &dyn Fn(&[u8]) -> [u8; 3] = match info.color_type {
        png::ColorType::Rgb => &|p| [p[0], p[1], p[2]],
        png::ColorType::Rgba => &|p| [p[0], p[1], p[2]],
        png::ColorType::Grayscale => &|p| [p[0]; 3],
        png::ColorType::GrayscaleAlpha => &|p| [p[0]; 3],
        other => return Err(Error::format(what, format!("unsupported PNG colour type {other:?}"))),
    };
    let stride = info.color_type.samples();
    let data = bytes.chunks(stride).flat_map(pick).map(from_byte).collect();
    Image::new(h, w, 3, data)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    let (color, data): (_, Vec<u8>) = match img.channels {
        3 => (png::ColorType::Rgb, img.data.iter().map(|&v| to_byte(v)).collect()),
        1 => (
            png::ColorType::Grayscale,
            img.data.iter().map(|&v| to_byte(v)).collect(),
        ),
        c => return Err(Error::invalid(format!("cannot write {c}-channel image as PNG"))),
    };
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let what = path.display().to_string();
    let mut w = enc
        .write_header()
        .map_err(|e| Error::format(what.clone(), e.to_string()))?;
    w.write_image_data(&data)
        .map_err(|e| Error::format(what, e.to_string()))
}

/// Reads a PPM or PNG file, chosen by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => read_png(path),
        Some("ppm") => read_ppm(path),
        _ => Err(Error::invalid(format!(
            "{}: expected a .ppm or .png image",
            path.display()
        ))),
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => write_png(path, img),
        Some("ppm") => write_ppm(path, img),
        _ => Err(Error::invalid(format!(
            "{}: expected a .ppm or .png image",
            path.display()
        ))),
    }
}
