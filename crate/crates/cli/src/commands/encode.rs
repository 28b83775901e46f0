use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use e2depth_core::events::{encode_voxel_grid, normalize_voxel_grid, read_evt1, window_events, VoxelGrid};

use crate::commands::ensure_out_dir;
use crate::settings::{CliError, Settings};

/// Voxel grid container (little-endian): magic `VOX1`, `u16` bins, `u16`
/// width, `u16` height, then `bins * height * width` float64 values in
/// `[bin, row, col]` order.
fn write_vox(path: &Path, grid: &VoxelGrid) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| CliError::runtime(format!("write {}: {e}", path.display()));
    w.write_all(b"VOX1").map_err(io)?;
    w.write_u16::<LittleEndian>(grid.bins() as u16).map_err(io)?;
    w.write_u16::<LittleEndian>(grid.width() as u16).map_err(io)?;
    w.write_u16::<LittleEndian>(grid.height() as u16).map_err(io)?;
    for &v in grid.data() {
        w.write_f64::<LittleEndian>(v).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn run(
    events_path: &Path,
    out_dir: &Path,
    delta_t: u64,
    normalize: bool,
    settings: &mut Settings,
    verbose: u8,
) -> Result<(), CliError> {
    let bins = settings.take_usize("data.bins", 5)?;
    settings.finish()?;
    if !events_path.is_file() {
        return Err(CliError::usage(format!(
            "event file not found: {}",
            events_path.display()
        )));
    }
    let (width, height, events) = read_evt1(events_path)?;
    let windows = window_events(&events, delta_t)?;
    ensure_out_dir(out_dir)?;
    for (i, window) in windows.iter().enumerate() {
        let grid = encode_voxel_grid(window, bins, height as usize, width as usize)?;
        let grid = if normalize {
            normalize_voxel_grid(&grid)
        } else {
            grid
        };
        write_vox(&out_dir.join(format!("{i:06}.vox")), &grid)?;
        if verbose > 0 {
            eprintln!(
                "window {i}: [{}, {}) us, {} events",
                window.t_start(),
                window.t_end(),
                window.events().len()
            );
        }
    }
    println!(
        "{} windows of {} us -> {}",
        windows.len(),
        delta_t,
        out_dir.display()
    );
    Ok(())
}
