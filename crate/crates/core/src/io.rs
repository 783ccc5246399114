//! Atomic file writes and PNG encoding of [-1, 1] maps.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::engine::Tensor;
use crate::error::{invalid, Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

fn quantize(v: f32, max: f64) -> f64 {
    // round half away from zero
    ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 0.5 * max).round()
}

fn dequantize(q: f64, max: f64) -> f32 {
    (q / max * 2.0 - 1.0) as f32
}

fn encode(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut out), w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Png(e.to_string()))?;
    }
    write_atomic(path, &out)
}

struct Decoded {
    w: usize,
    h: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(file)
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut data = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut data)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    data.truncate(info.buffer_size());
    Ok(Decoded {
        w: info.width as usize,
        h: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

fn check_chw(t: &Tensor<f32>, c: usize) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[0] != c {
        return Err(invalid!("expected [{c}, h, w], got {s:?}"));
    }
    Ok((s[1], s[2]))
}

/// `[3, h, w]` in [-1, 1] as 8-bit RGB (also used for normals).
pub fn write_rgb8(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w) = check_chw(img, 3)?;
    let plane = h * w;
    let mut data = vec![0u8; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[3 * i + c] = quantize(img.data()[c * plane + i], 255.0) as u8;
        }
    }
    encode(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

pub fn read_rgb8(path: &Path) -> Result<Tensor<f32>> {
    let d = decode(path)?;
    if d.color != png::ColorType::Rgb || d.depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "{}: expected 8-bit RGB, found {:?} at {:?}",
            path.display(),
            d.color,
            d.depth
        )));
    }
    let plane = d.w * d.h;
    Ok(Tensor::from_fn([3, d.h, d.w], |i| {
        let (c, p) = (i / plane, i % plane);
        dequantize(d.data[3 * p + c] as f64, 255.0)
    }))
}

/// `[1, h, w]` in [-1, 1] as 16-bit grayscale, -1 → 0 and +1 → 65535.
pub fn write_gray16(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = check_chw(map, 1)?;
    let mut data = Vec::with_capacity(2 * h * w);
    for &v in map.data() {
        data.extend_from_slice(&(quantize(v, 65535.0) as u16).to_be_bytes());
    }
    encode(
        path,
        w,
        h,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &data,
    )
}

pub fn read_gray16(path: &Path) -> Result<Tensor<f32>> {
    let d = decode(path)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Sixteen {
        return Err(Error::Png(format!(
            "{}: expected 16-bit grayscale, found {:?} at {:?}",
            path.display(),
            d.color,
            d.depth
        )));
    }
    Ok(Tensor::from_fn([1, d.h, d.w], |i| {
        dequantize(
            u16::from_be_bytes([d.data[2 * i], d.data[2 * i + 1]]) as f64,
            65535.0,
        )
    }))
}

/// `[1, h, w]` 0/1 mask as 8-bit grayscale (white = 1).
pub fn write_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let (h, w) = check_chw(mask, 1)?;
    let data: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    encode(
        path,
        w,
        h,
        png::ColorType::Grayscale,
        png::BitDepth::Eight,
        &data,
    )
}

/// Reads an 8-bit grayscale mask; values above 127 are 1.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let d = decode(path)?;
    if d.color != png::ColorType::Grayscale || d.depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "{}: masks must be 8-bit grayscale, found {:?} at {:?}",
            path.display(),
            d.color,
            d.depth
        )));
    }
    Ok(Tensor::from_fn([1, d.h, d.w], |i| {
        (d.data[i] > 127) as u8 as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_endpoints() {
        assert_eq!(quantize(-1.0, 65535.0), 0.0);
        assert_eq!(quantize(1.0, 65535.0), 65535.0);
        assert_eq!(quantize(0.0, 255.0), 128.0);
        assert_eq!(quantize(1.0, 255.0), 255.0);
    }

    #[test]
    fn wrong_bit_depth_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        write_rgb8(&p, &Tensor::zeros([3, 2, 2])).unwrap();
        assert!(matches!(read_gray16(&p), Err(Error::Png(_))));
        assert!(matches!(read_mask(&p), Err(Error::Png(_))));
    }
}
