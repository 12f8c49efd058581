//! File formats: ASCII point clouds, 8-bit PNG images and the JSON-lines
//! dataset manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Parses `x y z` lines; blank lines and lines starting with `#` are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid number {f:?}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite coordinate {f:?}"),
                });
            }
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn load_xyz(path: &Path) -> Result<PointCloud> {
    parse_xyz(&std::fs::read_to_string(path)?)
}

/// Writes one point per line using the shortest round-tripping decimal form.
pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an 8-bit PNG as values in `[0, 1]`.
///
/// Grayscale images load with one channel and color images with three; an
/// alpha channel is dropped. Palette and sub-byte images are expanded to 8 bits.
pub fn load_png(path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: unsupported bit depth {:?}, expected 8",
            path.display(),
            info.bit_depth
        )));
    }
    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::Format(format!("{}: unexpanded palette image", path.display())))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * keep);
    for px in buf[..info.buffer_size()].chunks_exact(src_channels) {
        data.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
    }
    Image::new(h, w, keep, data)
}

/// Writes an image as an 8-bit PNG, rounding `value * 255`.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png_u8(path, image.width(), image.height(), image.channels(), &bytes)
}

/// Writes interleaved 8-bit samples with 1 (gray) or 3 (RGB) channels.
pub fn write_png_u8(path: &Path, width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Format(format!("cannot write {c}-channel PNG"))),
    };
    if bytes.len() != width * height * channels {
        return Err(Error::Shape(format!(
            "{} bytes for a {width}x{height}x{channels} image",
            bytes.len()
        )));
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub cloud_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb_path: Option<PathBuf>,
}

/// Reads a JSON-lines manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        entry.cloud_path = base.join(&entry.cloud_path);
        entry.rgb_path = entry.rgb_path.map(|p| base.join(p));
        out.push(entry);
    }
    Ok(out)
}
