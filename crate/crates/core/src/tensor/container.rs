//! Flat binary container for named float64 tensors.
//!
//! Layout (little-endian): magic `E2DW`, version `u32`, entry count `u32`;
//! then per entry: name length `u32`, UTF-8 name, rank `u32`, one `u64` per
//! dimension, and the raw float64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"E2DW";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_named_tensors(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(&display, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(entries.len() as u32).map_err(io)?;
    for (name, tensor) in entries {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(tensor.rank() as u32).map_err(io)?;
        for &d in tensor.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in tensor.data() {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_named_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(&display, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(&display, "bad magic, not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &display,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(&display, "tensor name is not valid UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        for v in &mut data {
            *v = r.read_f64::<LittleEndian>().map_err(io)?;
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}
