use std::path::Path;

use e2depth_core::data::formats::read_pgm;
use e2depth_core::events::{simulate_events, write_evt1, Frame};

use crate::commands::{ensure_out_dir, list_with_extension};
use crate::settings::{CliError, Settings};

pub fn run(
    frames_dir: &Path,
    out: &Path,
    fps: f64,
    timestamps: Option<&Path>,
    settings: &mut Settings,
    verbose: u8,
) -> Result<(), CliError> {
    let config = settings.simulator_config()?;
    settings.finish()?;

    let files = list_with_extension(frames_dir, "pgm")?;
    if files.len() < 2 {
        return Err(CliError::usage(format!(
            "{} holds {} PGM frames; simulation needs at least two",
            frames_dir.display(),
            files.len()
        )));
    }
    let frames: Vec<Frame> = files
        .iter()
        .map(|p| read_pgm(p).map_err(CliError::from))
        .collect::<Result<_, _>>()?;

    let ts: Vec<u64> = match timestamps {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
            let ts: Vec<u64> = serde_json::from_str(&text).map_err(|e| {
                CliError::usage(format!("{} must be a JSON array of microseconds: {e}", path.display()))
            })?;
            if ts.len() != frames.len() {
                return Err(CliError::usage(format!(
                    "{} timestamps for {} frames",
                    ts.len(),
                    frames.len()
                )));
            }
            ts
        }
        None => {
            if !(fps.is_finite() && fps > 0.0) {
                return Err(CliError::usage("fps must be positive"));
            }
            (0..frames.len())
                .map(|k| (k as f64 * 1.0e6 / fps).round() as u64)
                .collect()
        }
    };

    let events = simulate_events(&frames, &ts, &config)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_out_dir(parent)?;
        }
    }
    write_evt1(
        out,
        frames[0].width as u16,
        frames[0].height as u16,
        &events,
    )?;

    let span_s = (ts[ts.len() - 1] - ts[0]) as f64 / 1e6;
    let rate = if span_s > 0.0 {
        events.len() as f64 / span_s
    } else {
        0.0
    };
    println!(
        "{} events over {:.3} s ({:.0} ev/s) -> {}",
        events.len(),
        span_s,
        rate,
        out.display()
    );
    if verbose > 0 {
        eprintln!(
            "sensor {}x{}, C = {}, upsample = {}",
            frames[0].width, frames[0].height, config.contrast_threshold, config.upsample_factor
        );
    }
    Ok(())
}
