//! Event simulation from an intensity frame sequence.
//!
//! Each pixel keeps a reference log intensity. The log signal is linearly
//! interpolated between consecutive frames at a configurable number of
//! sub-steps; every full crossing of `reference ± C` emits one event and moves
//! the reference by `±C`, so a jump of several thresholds emits several
//! events. Crossing timestamps are linearly interpolated within the sub-step.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::events::Event;

/// A grayscale intensity image with non-negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "frame data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Frame {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Frame {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f64 {
        &mut self.data[y * self.width + x]
    }
}

/// Contrast-threshold sensor model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulatorConfig {
    /// Threshold C in log-intensity units; one event per full crossing.
    pub contrast_threshold: f64,
    /// Interpolation sub-steps per frame interval.
    pub upsample_factor: u32,
    /// Guard added to intensity before taking the log.
    pub log_eps: f64,
    /// Per-pixel dead time after an emitted event. Suppressed crossings do
    /// not move the reference, so the pixel fires again once the period ends.
    pub refractory_us: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            contrast_threshold: 0.5,
            upsample_factor: 20,
            log_eps: 1e-3,
            refractory_us: 0,
        }
    }
}

impl SimulatorConfig {
    fn validate(&self) -> Result<()> {
        if !self.contrast_threshold.is_finite() || self.contrast_threshold <= 0.0 {
            return Err(Error::Config(format!(
                "contrast threshold must be positive, got {}",
                self.contrast_threshold
            )));
        }
        if self.upsample_factor < 1 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        if !self.log_eps.is_finite() || self.log_eps <= 0.0 {
            return Err(Error::Config("log guard must be positive".into()));
        }
        Ok(())
    }
}

/// Simulates an event stream from intensity frames with per-frame timestamps.
///
/// Output is globally sorted by timestamp with ties broken by (y, x, polarity).
pub fn simulate_events(
    frames: &[Frame],
    timestamps_us: &[u64],
    config: &SimulatorConfig,
) -> Result<Vec<Event>> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(Error::Config(format!(
            "simulation needs at least two frames, got {}",
            frames.len()
        )));
    }
    if frames.len() != timestamps_us.len() {
        return Err(Error::Config(format!(
            "{} frames but {} timestamps",
            frames.len(),
            timestamps_us.len()
        )));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    for (i, f) in frames.iter().enumerate() {
        if f.height != h || f.width != w {
            return Err(Error::Shape(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                f.height, f.width
            )));
        }
        if f.data.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Domain(format!(
                "frame {i} contains negative or non-finite intensities"
            )));
        }
    }
    for pair in timestamps_us.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Ordering(format!(
                "timestamps must be strictly increasing ({} then {})",
                pair[0], pair[1]
            )));
        }
    }

    let log_frames: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.data.iter().map(|&v| (v + config.log_eps).ln()).collect())
        .collect();

    let rows: Vec<Vec<Event>> = (0..h)
        .into_par_iter()
        .map(|y| simulate_row(y, w, &log_frames, timestamps_us, config))
        .collect();

    let mut events: Vec<Event> = rows.into_iter().flatten().collect();
    events.sort_unstable_by_key(Event::sort_key);
    Ok(events)
}

fn simulate_row(
    y: usize,
    width: usize,
    log_frames: &[Vec<f64>],
    timestamps_us: &[u64],
    config: &SimulatorConfig,
) -> Vec<Event> {
    let c = config.contrast_threshold;
    let up = config.upsample_factor as f64;
    let mut out = Vec::new();
    for x in 0..width {
        let idx = y * width + x;
        let mut l_ref = log_frames[0][idx];
        let mut l_prev = l_ref;
        let mut t_prev = timestamps_us[0] as f64;
        let mut last_emit: Option<u64> = None;
        for seg in 0..log_frames.len() - 1 {
            let (l0, l1) = (log_frames[seg][idx], log_frames[seg + 1][idx]);
            let (t0, t1) = (timestamps_us[seg] as f64, timestamps_us[seg + 1] as f64);
            for step in 1..=config.upsample_factor {
                let frac = step as f64 / up;
                let l_cur = l0 + (l1 - l0) * frac;
                let t_cur = t0 + (t1 - t0) * frac;
                'crossings: loop {
                    let (level, polarity) = if l_cur - l_ref >= c {
                        (l_ref + c, 1i8)
                    } else if l_cur - l_ref <= -c {
                        (l_ref - c, -1i8)
                    } else {
                        break 'crossings;
                    };
                    let span = l_cur - l_prev;
                    let a = if span == 0.0 {
                        1.0
                    } else {
                        ((level - l_prev) / span).clamp(0.0, 1.0)
                    };
                    let t_event = (t_prev + a * (t_cur - t_prev)).round() as u64;
                    if let Some(last) = last_emit {
                        if config.refractory_us > 0 && t_event < last + config.refractory_us {
                            // still inside the dead time; the reference stays
                            // anchored and later sub-steps retry
                            break 'crossings;
                        }
                    }
                    out.push(Event {
                        x: x as u16,
                        y: y as u16,
                        t: t_event,
                        polarity,
                    });
                    last_emit = Some(t_event);
                    l_ref = level;
                }
                l_prev = l_cur;
                t_prev = t_cur;
            }
        }
    }
    out
}
