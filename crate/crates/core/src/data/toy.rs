//! Deterministic synthetic scene for smoke tests and the toy overfit run: a
//! sinusoidal texture drifting horizontally, with scene depth modulated in
//! phase with the texture so the event stream carries depth information.

use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{simulate_events, write_evt1, Frame, SimulatorConfig};
use crate::metrics::DepthMap;

use super::formats::{
    depth_file_name, frame_file_name, write_dpt, write_manifest_file, write_pgm, write_split_file,
    ManifestFile, SplitFile,
};

#[derive(Debug, Clone, Copy)]
pub struct ToySpec {
    /// Number of samples the sequence yields (frames minus one).
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// Texture period in pixels.
    pub period_px: f64,
    /// Horizontal drift per frame in pixels.
    pub drift_px_per_frame: f64,
    pub base_depth_m: f64,
    pub depth_amplitude_m: f64,
    /// Intensity amplitude around 0.5.
    pub contrast: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            samples: 16,
            height: 64,
            width: 64,
            fps: 30.0,
            period_px: 24.0,
            drift_px_per_frame: 3.0,
            base_depth_m: 15.0,
            depth_amplitude_m: 0.75,
            contrast: 0.45,
        }
    }
}

impl ToySpec {
    fn pattern(&self, x: usize, y: usize, k: usize) -> f64 {
        let two_pi = std::f64::consts::TAU;
        let phase_x = (x as f64 + self.drift_px_per_frame * k as f64) / self.period_px;
        let phase_y = y as f64 / self.period_px;
        (two_pi * phase_x).sin() * (two_pi * phase_y).sin()
    }
}

/// Frames, per-frame timestamps, and metric depth maps of the toy scene.
/// There are `samples + 1` frames so the sample stream has `samples` entries.
pub fn generate_toy_sequence(spec: &ToySpec) -> Result<(Vec<Frame>, Vec<u64>, Vec<DepthMap>)> {
    if spec.samples == 0 || spec.fps <= 0.0 {
        return Err(Error::Config("toy spec needs samples >= 1 and fps > 0".into()));
    }
    let n_frames = spec.samples + 1;
    let dt_us = 1.0e6 / spec.fps;
    let mut frames = Vec::with_capacity(n_frames);
    let mut depths = Vec::with_capacity(n_frames);
    let mut timestamps = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let mut intensity = Vec::with_capacity(spec.height * spec.width);
        let mut depth = Vec::with_capacity(spec.height * spec.width);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let p = spec.pattern(x, y, k);
                intensity.push(0.5 + spec.contrast * p);
                depth.push(spec.base_depth_m + spec.depth_amplitude_m * p);
            }
        }
        frames.push(Frame::new(spec.height, spec.width, intensity)?);
        depths.push(DepthMap::dense(spec.height, spec.width, depth)?);
        timestamps.push((k as f64 * dt_us).round() as u64);
    }
    Ok((frames, timestamps, depths))
}

/// Writes a complete one-sequence dataset tree under `root`:
/// `seq-000/{events.evt1, depth/, frames/, manifest.json}` plus a
/// `split.json` that points every split at the single sequence.
pub fn write_toy_dataset(root: &Path, spec: &ToySpec) -> Result<()> {
    let (frames, timestamps, depths) = generate_toy_sequence(spec)?;
    let events = simulate_events(&frames, &timestamps, &SimulatorConfig::default())?;

    let seq = root.join("seq-000");
    let mkdir = |p: &Path| {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e))
    };
    mkdir(&seq.join("depth"))?;
    mkdir(&seq.join("frames"))?;

    write_evt1(
        &seq.join("events.evt1"),
        spec.width as u16,
        spec.height as u16,
        &events,
    )?;
    for (k, depth) in depths.iter().enumerate() {
        write_dpt(&seq.join("depth").join(depth_file_name(k)), depth)?;
    }
    for (k, frame) in frames.iter().enumerate() {
        write_pgm(&seq.join("frames").join(frame_file_name(k)), frame)?;
    }
    write_manifest_file(
        &seq.join("manifest.json"),
        &ManifestFile {
            name: "seq-000".into(),
            width: spec.width,
            height: spec.height,
            fps: spec.fps,
            timestamps_us: timestamps,
        },
    )?;
    write_split_file(
        &root.join("split.json"),
        &SplitFile {
            train: vec!["seq-000".into()],
            val: vec!["seq-000".into()],
            test: vec!["seq-000".into()],
        },
    )?;
    Ok(())
}
