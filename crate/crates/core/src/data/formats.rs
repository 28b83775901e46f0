//! On-disk dataset formats.
//!
//! Depth rasters use the binary `DPT1` layout (little-endian): magic `DPT1`,
//! `u16` width, `u16` height, then `width * height` float32 meters in
//! row-major order with NaN marking invalid pixels. Grayscale frames are
//! 8-bit binary PGM. Each sequence directory carries a `manifest.json` and a
//! dataset root maps sequence names to splits in `split.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::Frame;
use crate::metrics::DepthMap;

pub const DPT1_MAGIC: &[u8; 4] = b"DPT1";

/// Writes metric depth as `DPT1`; invalid pixels are stored as NaN.
pub fn write_dpt(path: &Path, depth: &DepthMap) -> Result<()> {
    let display = path.display().to_string();
    if depth.width > u16::MAX as usize || depth.height > u16::MAX as usize {
        return Err(Error::Config(format!(
            "depth raster {}x{} exceeds the format's u16 dims",
            depth.width, depth.height
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&display, e);
    w.write_all(DPT1_MAGIC).map_err(io)?;
    w.write_u16::<LittleEndian>(depth.width as u16).map_err(io)?;
    w.write_u16::<LittleEndian>(depth.height as u16).map_err(io)?;
    for (i, &v) in depth.values.iter().enumerate() {
        let stored = if depth.mask[i] { v as f32 } else { f32::NAN };
        w.write_f32::<LittleEndian>(stored).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a `DPT1` raster; NaN entries come back masked invalid.
pub fn read_dpt(path: &Path) -> Result<DepthMap> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(&display, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != DPT1_MAGIC {
        return Err(Error::format(&display, "bad magic, not a depth file"));
    }
    let width = r.read_u16::<LittleEndian>().map_err(io)? as usize;
    let height = r.read_u16::<LittleEndian>().map_err(io)? as usize;
    let mut values = vec![0.0f64; width * height];
    let mut mask = vec![false; width * height];
    for i in 0..width * height {
        let v = r.read_f32::<LittleEndian>().map_err(io)?;
        if v.is_nan() {
            values[i] = f64::NAN;
        } else {
            values[i] = v as f64;
            mask[i] = true;
        }
    }
    DepthMap::new(height, width, values, mask)
}

/// Reads just the dimensions from a `DPT1` header.
pub fn read_dpt_dims(path: &Path) -> Result<(usize, usize)> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(&display, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != DPT1_MAGIC {
        return Err(Error::format(&display, "bad magic, not a depth file"));
    }
    let width = r.read_u16::<LittleEndian>().map_err(io)? as usize;
    let height = r.read_u16::<LittleEndian>().map_err(io)? as usize;
    Ok((width, height))
}

/// Writes a frame as binary 8-bit PGM; intensities are clamped to [0, 1] and
/// quantized to 255 levels.
pub fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&display, e);
    write!(w, "P5\n{} {}\n255\n", frame.width, frame.height).map_err(io)?;
    let bytes: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads a binary 8-bit PGM into a frame with intensities in [0, 1].
pub fn read_pgm(path: &Path) -> Result<Frame> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(&display, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).to_string())
    };
    if token(&bytes)? != "P5" {
        return Err(Error::format(&display, "not a binary PGM"));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::format(&display, "bad width"))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::format(&display, "bad height"))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::format(&display, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(&display, "only 8-bit PGM is supported"));
    }
    pos += 1; // the single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err(Error::format(&display, "truncated pixel data"));
    }
    let data = bytes[pos..pos + width * height]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Frame::new(height, width, data)
}

/// Per-sequence metadata stored as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    /// One timestamp per depth frame, microseconds, strictly increasing.
    pub timestamps_us: Vec<u64>,
}

pub fn read_manifest_file(path: &Path) -> Result<ManifestFile> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&display, format!("bad manifest: {e}")))
}

pub fn write_manifest_file(path: &Path, manifest: &ManifestFile) -> Result<()> {
    let display = path.display().to_string();
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("cannot encode manifest: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(&display, e))
}

/// Dataset split stored as `split.json` at the dataset root.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn read_split_file(path: &Path) -> Result<SplitFile> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&display, format!("bad split file: {e}")))
}

pub fn write_split_file(path: &Path, split: &SplitFile) -> Result<()> {
    let display = path.display().to_string();
    let text = serde_json::to_string_pretty(split)
        .map_err(|e| Error::Config(format!("cannot encode split file: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(&display, e))
}

/// Zero-padded depth file name for frame `index`.
pub fn depth_file_name(index: usize) -> String {
    format!("{index:06}.dpt")
}

/// Zero-padded frame file name for frame `index`.
pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.pgm")
}
