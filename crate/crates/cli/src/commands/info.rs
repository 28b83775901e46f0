use std::path::Path;

use e2depth_core::data::formats::{read_dpt, read_manifest_file};
use e2depth_core::events::read_evt1;
use e2depth_core::tensor::load_named_tensors;

use crate::settings::{CliError, Settings};

pub fn run(path: &Path, settings: &mut Settings) -> Result<(), CliError> {
    settings.finish()?;
    if !path.is_file() {
        return Err(CliError::usage(format!("file not found: {}", path.display())));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default();
    match ext {
        "evt1" => {
            let (w, h, events) = read_evt1(path)?;
            let (t0, t1) = match (events.first(), events.last()) {
                (Some(a), Some(b)) => (a.t, b.t),
                _ => (0, 0),
            };
            let pos = events.iter().filter(|e| e.polarity > 0).count();
            println!("event stream: sensor {w}x{h}, {} events", events.len());
            println!("  time span: [{t0}, {t1}] us");
            println!("  polarity: {pos} positive, {} negative", events.len() - pos);
        }
        "dpt" => {
            let d = read_dpt(path)?;
            let valid: Vec<f64> = d
                .values
                .iter()
                .zip(&d.mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .collect();
            println!("depth raster: {}x{}", d.width, d.height);
            println!(
                "  valid: {} / {} pixels",
                valid.len(),
                d.values.len()
            );
            if !valid.is_empty() {
                let min = valid.iter().copied().fold(f64::INFINITY, f64::min);
                let max = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                println!("  range: [{min:.3}, {max:.3}] m");
            }
        }
        "e2dw" => {
            let entries = load_named_tensors(path)?;
            let total: usize = entries.iter().map(|(_, t)| t.numel()).sum();
            println!("checkpoint: {} entries, {} values", entries.len(), total);
            for (name, t) in entries.iter().take(8) {
                println!("  {name} {:?}", t.shape());
            }
            if entries.len() > 8 {
                println!("  ... {} more", entries.len() - 8);
            }
        }
        "json" => {
            let m = read_manifest_file(path)?;
            println!(
                "sequence manifest: {} ({}x{}, {} fps)",
                m.name, m.width, m.height, m.fps
            );
            println!("  depth frames: {}", m.timestamps_us.len());
            if let (Some(a), Some(b)) = (m.timestamps_us.first(), m.timestamps_us.last()) {
                println!("  time span: [{a}, {b}] us");
            }
        }
        other => {
            return Err(CliError::usage(format!(
                "unrecognized file type .{other} (expected .evt1, .dpt, .e2dw, or manifest .json)"
            )))
        }
    }
    Ok(())
}
