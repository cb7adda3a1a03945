//! File formats: PFM float maps, binary PLY point clouds, 8-bit PNG and JSON.

use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Reads a whole file; a missing file is an ingestion error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::ingestion(path, "file not found"),
        _ => Error::io(path, e),
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

/// Decoded PFM: rows top to bottom, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Little-endian PFM (scale -1.0), rows stored bottom to top.
pub fn encode_pfm(pfm: &Pfm) -> Vec<u8> {
    let tag = if pfm.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row = pfm.width * pfm.channels;
    for r in (0..pfm.height).rev() {
        for v in &pfm.data[r * row..(r + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Pfm> {
    let bad = |msg: &str| Error::format(path, msg);
    // tag, width, height and scale, then a single whitespace byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    let channels = match fields[0] {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(bad(&format!("unknown PFM tag {other:?}"))),
    };
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be nonzero"));
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != 4 * n {
        return Err(bad(&format!("expected {} payload bytes, found {}", 4 * n, payload.len())));
    }
    let row = width * channels;
    let mut data = vec![0f32; n];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, c) = (i / row, i % row);
        data[(height - 1 - r) * row + c] = v;
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

/// Writes `[H, W]` or `[3, H, W]` as PFM.
pub fn write_pfm<S: Scalar>(path: &Path, map: &Tensor<S>) -> Result<()> {
    let (c, h, w) = match *map.shape() {
        [h, w] => (1, h, w),
        [3, h, w] => (3, h, w),
        _ => return Err(Error::dim("write_pfm", map.shape(), &[3])),
    };
    let hw = h * w;
    let d = map.data();
    let data = (0..hw)
        .flat_map(|p| (0..c).map(move |k| d[k * hw + p].as_f64() as f32))
        .collect();
    write_file(
        path,
        &encode_pfm(&Pfm {
            width: w,
            height: h,
            channels: c,
            data,
        }),
    )
}

/// Reads a PFM as `[H, W]` (grayscale) or `[3, H, W]`.
pub fn read_pfm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let pfm = decode_pfm(&read_file(path)?, path)?;
    let (c, h, w) = (pfm.channels, pfm.height, pfm.width);
    let hw = h * w;
    let data = (0..c)
        .flat_map(|k| pfm.data.iter().skip(k).step_by(c).map(|&v| S::lit(v as f64)).collect::<Vec<_>>())
        .collect();
    let shape: Vec<usize> = if c == 1 { vec![h, w] } else { vec![3, h, w] };
    debug_assert_eq!(hw * c, pfm.data.len());
    Tensor::from_vec(&shape, data)
}

/// `[3, H, W]` in `[0, 1]` to an 8-bit RGB PNG.
pub fn write_png<S: Scalar>(path: &Path, img: &Tensor<S>) -> Result<()> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::dim("write_png", img.shape(), &[3])),
    };
    let hw = h * w;
    let d = img.data();
    let bytes: Vec<u8> = (0..hw)
        .flat_map(|p| (0..3).map(move |k| (d[k * hw + p].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_file(path, &out)
}

pub fn read_png<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = read_file(path)?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let hw = h * w;
    let data = (0..3)
        .flat_map(|k| (0..hw).map(|p| S::lit(raw[p * 3 + k] as f64 / 255.0)).collect::<Vec<_>>())
        .collect();
    Tensor::from_vec(&[3, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyPoint {
    pub position: [f32; 3],
    pub color: [u8; 3],
}

pub fn encode_ply(points: &[PlyPoint]) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", points.len());
    header.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    let mut out = header.into_bytes();
    out.reserve(points.len() * 15);
    for p in points {
        for v in p.position {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.color);
    }
    out
}

/// Reads files produced by [`encode_ply`].
pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<Vec<PlyPoint>> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "non-ASCII header"))?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err(Error::format(path, "not a little-endian binary PLY"));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "missing vertex count"))?;
    let body = &bytes[end + marker.len()..];
    if body.len() != count * 15 {
        return Err(Error::format(path, format!("expected {} vertex bytes, found {}", count * 15, body.len())));
    }
    Ok(body
        .chunks_exact(15)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
            PlyPoint {
                position: [f(0), f(4), f(8)],
                color: [c[12], c[13], c[14]],
            }
        })
        .collect())
}

pub fn write_ply(path: &Path, points: &[PlyPoint]) -> Result<()> {
    write_file(path, &encode_ply(points))
}

pub fn read_ply(path: &Path) -> Result<Vec<PlyPoint>> {
    decode_ply(&read_file(path)?, path)
}
