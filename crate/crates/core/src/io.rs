//! File formats.
//!
//! * PGM (`P5`): 8-bit read, 16-bit read/write; intensities map to `[0, 1]`.
//! * PPM (`P6`): 8-bit RGB, used for fused overlays.
//! * `.f32img`: little-endian `u32 width, u32 height`, then `w*h` `f32` row-major.
//! * `.f32vol`: `u32 w, u32 h, u32 d`, then `f32` slice-major.
//! * `.f32fld`: `u32 w, u32 h`, then interleaved `vx, vy` `f32` pairs.
//! * landmarks: CSV rows `fx,fy,mx,my`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{DeformationField2D, Image2D, Mask2D, Volume3D};

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Option<u32> {
        let b = self.buf.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(u32::from_le_bytes(b.try_into().ok()?))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let bytes = self.buf.get(self.pos..self.pos.checked_add(n.checked_mul(4)?)?)?;
        self.pos += n * 4;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    }

    fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_f32img(img: &Image2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * img.len());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    img.data().iter().for_each(|&v| push_f32(&mut out, v));
    out
}

pub fn decode_f32img(buf: &[u8]) -> Option<Result<Image2D>> {
    let mut r = Reader { buf, pos: 0 };
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let data = r.f32s(w.checked_mul(h)?)?;
    if !r.finished() {
        return None;
    }
    Some(Image2D::new(w, h, data.into_iter().map(f64::from).collect()))
}

pub fn encode_f32vol(vol: &Volume3D) -> Vec<u8> {
    let (w, h, d) = vol.dims();
    let mut out = Vec::with_capacity(12 + 4 * w * h * d);
    for v in [w, h, d] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    vol.data().iter().for_each(|&v| push_f32(&mut out, v));
    out
}

pub fn decode_f32vol(buf: &[u8]) -> Option<Result<Volume3D>> {
    let mut r = Reader { buf, pos: 0 };
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let d = r.u32()? as usize;
    let data = r.f32s(w.checked_mul(h)?.checked_mul(d)?)?;
    if !r.finished() {
        return None;
    }
    Some(Volume3D::new(w, h, d, data.into_iter().map(f64::from).collect()))
}

pub fn encode_f32fld(field: &DeformationField2D) -> Vec<u8> {
    let (w, h) = field.dims();
    let mut out = Vec::with_capacity(8 + 8 * w * h);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for (&a, &b) in field.vx().iter().zip(field.vy()) {
        push_f32(&mut out, a);
        push_f32(&mut out, b);
    }
    out
}

pub fn decode_f32fld(buf: &[u8]) -> Option<Result<DeformationField2D>> {
    let mut r = Reader { buf, pos: 0 };
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let data = r.f32s(w.checked_mul(h)?.checked_mul(2)?)?;
    if !r.finished() {
        return None;
    }
    let vx = data.iter().step_by(2).map(|&v| f64::from(v)).collect();
    let vy = data.iter().skip(1).step_by(2).map(|&v| f64::from(v)).collect();
    Some(DeformationField2D::new(w, h, vx, vy))
}

/// Parses the whitespace/comment separated header tokens of a netpbm file.
/// Returns the tokens and the offset of the first raster byte.
fn netpbm_header(buf: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        while i < buf.len() && (buf[i].is_ascii_whitespace() || buf[i] == b'#') {
            if buf[i] == b'#' {
                while i < buf.len() && buf[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&buf[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if i >= buf.len() || !buf[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

/// 16-bit binary PGM, intensities clamped to `[0, 1]` and scaled to 65535.
pub fn encode_pgm16(img: &Image2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    out.reserve(2 * img.len());
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn decode_pgm(buf: &[u8]) -> std::result::Result<Image2D, String> {
    let (tok, start) = netpbm_header(buf, 4).ok_or("malformed PGM header")?;
    if tok[0] != "P5" {
        return Err(format!("expected P5 magic, found {}", tok[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header value `{s}`"));
    let (w, h, maxval) = (parse(&tok[1])?, parse(&tok[2])?, parse(&tok[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let raster = &buf[start..];
    if raster.len() != w * h * bytes_per {
        return Err(format!("raster holds {} bytes, expected {}", raster.len(), w * h * bytes_per));
    }
    let scale = 1.0 / maxval as f64;
    let data = if bytes_per == 1 {
        raster.iter().map(|&b| b as f64 * scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    };
    Image2D::new(w, h, data).map_err(|e| e.to_string())
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in rgb {
        out.extend_from_slice(px);
    }
    out
}

pub fn decode_ppm(buf: &[u8]) -> std::result::Result<(usize, usize, Vec<[u8; 3]>), String> {
    let (tok, start) = netpbm_header(buf, 4).ok_or("malformed PPM header")?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err("only 8-bit P6 is supported".into());
    }
    let w: usize = tok[1].parse().map_err(|_| "bad width")?;
    let h: usize = tok[2].parse().map_err(|_| "bad height")?;
    let raster = &buf[start..];
    if raster.len() != 3 * w * h {
        return Err("truncated raster".into());
    }
    Ok((w, h, raster.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

fn has_ext(path: &Path, ext: &str) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

/// Reads an image by extension: `.pgm` or `.f32img`.
pub fn read_image(path: &Path) -> Result<Image2D> {
    let buf = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    if has_ext(path, "pgm") {
        decode_pgm(&buf).map_err(|e| format_err(path, e))
    } else {
        decode_f32img(&buf)
            .ok_or_else(|| format_err(path, "malformed .f32img"))?
            .map_err(|e| format_err(path, e.to_string()))
    }
}

/// Writes an image by extension: `.pgm` (16-bit) or `.f32img`.
pub fn write_image(path: &Path, img: &Image2D) -> Result<()> {
    let bytes = if has_ext(path, "pgm") {
        encode_pgm16(img)
    } else {
        encode_f32img(img)
    };
    write_bytes(path, &bytes)
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let buf = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    decode_f32vol(&buf)
        .ok_or_else(|| format_err(path, "malformed .f32vol"))?
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    write_bytes(path, &encode_f32vol(vol))
}

pub fn read_field(path: &Path) -> Result<DeformationField2D> {
    let buf = fs::read(path).map_err(|e| format_err(path, e.to_string()))?;
    decode_f32fld(&buf)
        .ok_or_else(|| format_err(path, "malformed .f32fld"))?
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn write_field(path: &Path, field: &DeformationField2D) -> Result<()> {
    write_bytes(path, &encode_f32fld(field))
}

/// Reads a mask image; any positive pixel is inside.
pub fn read_mask(path: &Path) -> Result<Mask2D> {
    Ok(Mask2D::from_image(&read_image(path)?))
}

/// Paired landmark CSV, one `fx,fy,mx,my` row per pair. Blank lines, `#`
/// comments and a non-numeric header row are skipped.
pub fn parse_landmarks(text: &str) -> std::result::Result<Vec<((f64, f64), (f64, f64))>, String> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let nums: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match nums {
            Ok(v) if v.len() == 4 => out.push(((v[0], v[1]), (v[2], v[3]))),
            Err(_) if out.is_empty() && idx == 0 => continue,
            _ => return Err(format!("line {}: expected `fx,fy,mx,my`", idx + 1)),
        }
    }
    Ok(out)
}

pub fn format_landmarks(pairs: &[((f64, f64), (f64, f64))]) -> String {
    let mut out = String::from("fx,fy,mx,my\n");
    for ((fx, fy), (mx, my)) in pairs {
        out.push_str(&format!("{fx},{fy},{mx},{my}\n"));
    }
    out
}

pub fn read_landmarks(path: &Path) -> Result<Vec<((f64, f64), (f64, f64))>> {
    let text = fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))?;
    parse_landmarks(&text).map_err(|e| format_err(path, e))
}

pub fn write_landmarks(path: &Path, pairs: &[((f64, f64), (f64, f64))]) -> Result<()> {
    write_bytes(path, format_landmarks(pairs).as_bytes())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| format_err(path, e.to_string()))?;
    f.write_all(bytes)?;
    Ok(())
}
