//! Image codec: PNG and binary PPM (P6), 8-bit RGB, mapped to [−1, 1]
//! tensors of shape (size, size, 3). Larger sources are center-cropped
//! square and box-downsampled.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMG_SIZE: usize = 16;

fn to_unit(p: u8) -> f64 {
    2.0 * p as f64 / 255.0 - 1.0
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 255.0 / 2.0).round()) as u8
}

/// Write as PNG or PPM depending on the extension. Values are clamped
/// to [−1, 1] on the way out.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape("(h, w, 3)", format!("{shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => {
            let file = File::create(path)?;
            let mut out = BufWriter::new(file);
            write!(out, "P6\n{w} {h}\n255\n")?;
            out.write_all(&bytes)?;
            out.flush()?;
            Ok(())
        }
        _ => {
            let file = File::create(path)?;
            let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc
                .write_header()
                .map_err(|e| Error::Data(format!("png header: {e}")))?;
            writer
                .write_image_data(&bytes)
                .map_err(|e| Error::Data(format!("png write: {e}")))?;
            Ok(())
        }
    }
}

fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 2];
    file.read_exact(&mut head)?;
    drop(file);
    if &head == b"P6" {
        read_ppm(path)
    } else {
        read_png(path)
    }
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(File::open(path)?);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("png read {}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("png frame {}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
        png::ColorType::Rgba => {
            let mut out = Vec::with_capacity(w * h * 3);
            for px in buf[..w * h * 4].chunks(4) {
                out.extend_from_slice(&px[..3]);
            }
            out
        }
        png::ColorType::Grayscale => {
            let mut out = Vec::with_capacity(w * h * 3);
            for &g in &buf[..w * h] {
                out.extend_from_slice(&[g, g, g]);
            }
            out
        }
        other => {
            return Err(Error::Data(format!(
                "unsupported png color type {other:?} in {}",
                path.display()
            )))
        }
    };
    Ok((h, w, rgb))
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = std::fs::read(path)?;
    // header: "P6" ws width ws height ws maxval single-ws, then raw data
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).unwrap_or("").to_string());
    }
    if fields.len() < 4 || fields[0] != "P6" {
        return Err(Error::Data(format!("not a P6 ppm: {}", path.display())));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| Error::Data("bad ppm width".into()))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| Error::Data("bad ppm height".into()))?;
    if fields[3] != "255" {
        return Err(Error::Data("ppm maxval must be 255".into()));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if raw.len() < pos + need {
        return Err(Error::Data(format!("truncated ppm: {}", path.display())));
    }
    Ok((h, w, raw[pos..pos + need].to_vec()))
}

/// Read a PNG/PPM file into a (target, target, 3) tensor in [−1, 1].
pub fn read_image(path: &Path, target: usize) -> Result<Tensor> {
    let (h, w, rgb) = read_rgb8(path)?;
    if h == 0 || w == 0 {
        return Err(Error::Data(format!("empty image {}", path.display())));
    }
    // center crop to square
    let side = h.min(w);
    let oy = (h - side) / 2;
    let ox = (w - side) / 2;
    let mut out = Tensor::zeros(&[target, target, 3]);
    let od = out.data_mut();
    for ty in 0..target {
        let y0 = oy + ty * side / target;
        let y1 = (oy + ((ty + 1) * side).div_ceil(target)).max(y0 + 1);
        for tx in 0..target {
            let x0 = ox + tx * side / target;
            let x1 = (ox + ((tx + 1) * side).div_ceil(target)).max(x0 + 1);
            for c in 0..3 {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += to_unit(rgb[(y * w + x) * 3 + c]);
                    }
                }
                od[(ty * target + tx) * 3 + c] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Ok(out)
}
