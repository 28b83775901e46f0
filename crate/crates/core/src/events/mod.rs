//! Event data model, frame-sequence simulation, and voxel-grid encoding.

mod format;
mod simulator;

pub use format::{read_events_text, read_evt1, write_events_text, write_evt1, EVT1_MAGIC};
pub use simulator::{simulate_events, Frame, SimulatorConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single brightness-change record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: u64,
    /// Sign of the brightness change, exactly -1 or +1.
    pub polarity: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, polarity: i8) -> Result<Self> {
        if polarity != -1 && polarity != 1 {
            return Err(Error::Domain(format!(
                "event polarity must be -1 or +1, got {polarity}"
            )));
        }
        Ok(Event { x, y, t, polarity })
    }

    /// Total ordering used for deterministic output: (t, y, x, polarity).
    pub fn sort_key(&self) -> (u64, u16, u16, i8) {
        (self.t, self.y, self.x, self.polarity)
    }
}

/// A half-open time window `[t_start, t_end)` of time-ordered events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventWindow {
    events: Vec<Event>,
    t_start: u64,
    t_end: u64,
}

impl EventWindow {
    pub fn new(events: Vec<Event>, t_start: u64, t_end: u64) -> Result<Self> {
        if t_end <= t_start {
            return Err(Error::Config(format!(
                "window span must be positive, got [{t_start}, {t_end})"
            )));
        }
        let mut prev = None;
        for e in &events {
            if e.t < t_start || e.t >= t_end {
                return Err(Error::Ordering(format!(
                    "event at t={} outside window [{t_start}, {t_end})",
                    e.t
                )));
            }
            if let Some(p) = prev {
                if e.t < p {
                    return Err(Error::Ordering(
                        "window events must be sorted by timestamp".into(),
                    ));
                }
            }
            prev = Some(e.t);
        }
        Ok(EventWindow {
            events,
            t_start,
            t_end,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn span_us(&self) -> u64 {
        self.t_end - self.t_start
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Dense `[B, H, W]` grid of temporally binned polarities.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    data: Vec<f64>,
    bins: usize,
    height: usize,
    width: usize,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        VoxelGrid {
            data: vec![0.0; bins * height * width],
            bins,
            height,
            width,
        }
    }

    pub fn from_data(bins: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bins * height * width {
            return Err(Error::Shape(format!(
                "voxel data length {} does not match {}x{}x{}",
                data.len(),
                bins,
                height,
                width
            )));
        }
        Ok(VoxelGrid {
            data,
            bins,
            height,
            width,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, bin: usize, y: usize, x: usize) -> f64 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, bin: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(bin * self.height + y) * self.width + x]
    }

    /// Total signed mass of the grid, summed in storage order.
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.bins, self.height, self.width], self.data.clone())
            .expect("voxel grid dimensions are consistent")
    }
}

/// The two temporal taps an event at normalized timestamp `t_star` hits, with
/// their triangular kernel weights `1 - |bin - t_star|`. Taps with zero weight
/// are omitted.
pub fn kernel_taps(t_star: f64, bins: usize) -> ((usize, f64), Option<(usize, f64)>) {
    let i0 = t_star.floor() as usize;
    let i0 = i0.min(bins - 1);
    let w0 = 1.0 - (t_star - i0 as f64).abs();
    let second = if i0 + 1 < bins {
        let w1 = 1.0 - ((i0 + 1) as f64 - t_star).abs();
        if w1 > 0.0 {
            Some((i0 + 1, w1))
        } else {
            None
        }
    } else {
        None
    };
    ((i0, w0), second)
}

/// Normalized event timestamp `(B-1) / dT * (t - t0)` with `t0` the window
/// start and `dT` the window span.
pub fn normalized_timestamp(t: u64, window: &EventWindow, bins: usize) -> f64 {
    (bins as f64 - 1.0) * ((t - window.t_start) as f64) / (window.span_us() as f64)
}

/// Splits a sorted event stream into consecutive half-open windows of
/// `delta_t` microseconds starting at the first event's timestamp. Interior
/// windows without events are still emitted.
pub fn window_events(events: &[Event], delta_t: u64) -> Result<Vec<EventWindow>> {
    if delta_t == 0 {
        return Err(Error::Config("window span must be positive".into()));
    }
    for pair in events.windows(2) {
        if pair[1].t < pair[0].t {
            return Err(Error::Ordering(format!(
                "events must be sorted by timestamp ({} precedes {})",
                pair[0].t, pair[1].t
            )));
        }
    }
    let Some(first) = events.first() else {
        return Ok(Vec::new());
    };
    let t0 = first.t;
    let mut windows = Vec::new();
    let mut idx = 0usize;
    let mut k = 0u64;
    while idx < events.len() {
        let start = t0 + k * delta_t;
        let end = start + delta_t;
        let mut chunk = Vec::new();
        while idx < events.len() && events[idx].t < end {
            chunk.push(events[idx]);
            idx += 1;
        }
        windows.push(EventWindow::new(chunk, start, end)?);
        k += 1;
    }
    Ok(windows)
}

/// Accumulates a window of events into an unnormalized `B x H x W` voxel grid
/// using the triangular temporal kernel.
pub fn encode_voxel_grid(
    window: &EventWindow,
    bins: usize,
    height: usize,
    width: usize,
) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::Config("voxel grid needs at least one bin".into()));
    }
    let mut grid = VoxelGrid::zeros(bins, height, width);
    for e in window.events() {
        if (e.x as usize) >= width || (e.y as usize) >= height {
            return Err(Error::Bounds(format!(
                "event at ({}, {}) outside sensor {}x{}",
                e.x, e.y, width, height
            )));
        }
        let t_star = normalized_timestamp(e.t, window, bins);
        let p = e.polarity as f64;
        let ((b0, w0), second) = kernel_taps(t_star, bins);
        if w0 > 0.0 {
            *grid.at_mut(b0, e.y as usize, e.x as usize) += p * w0;
        }
        if let Some((b1, w1)) = second {
            *grid.at_mut(b1, e.y as usize, e.x as usize) += p * w1;
        }
    }
    Ok(grid)
}

/// Zero-mean unit-variance normalization over the strictly non-zero entries.
///
/// Zero entries stay zero. An all-zero grid is returned unchanged; when the
/// non-zero entries have (population) standard deviation below `1e-6` only the
/// mean is subtracted.
pub fn normalize_voxel_grid(grid: &VoxelGrid) -> VoxelGrid {
    let nonzero: Vec<f64> = grid.data().iter().copied().filter(|&v| v != 0.0).collect();
    if nonzero.is_empty() {
        return grid.clone();
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut out = grid.clone();
    if std < 1e-6 {
        for v in out.data_mut() {
            if *v != 0.0 {
                *v -= mean;
            }
        }
    } else {
        for v in out.data_mut() {
            if *v != 0.0 {
                *v = (*v - mean) / std;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ev(x: u16, y: u16, t: u64, p: i8) -> Event {
        Event::new(x, y, t, p).unwrap()
    }

    #[test]
    fn event_rejects_bad_polarity() {
        assert!(Event::new(0, 0, 0, 0).is_err());
        assert!(Event::new(0, 0, 0, 2).is_err());
        assert!(Event::new(0, 0, 0, -1).is_ok());
    }

    #[test]
    fn window_events_empty_input() {
        assert!(window_events(&[], 50_000).unwrap().is_empty());
    }

    #[test]
    fn window_events_half_open_boundary() {
        let events = [ev(0, 0, 0, 1), ev(1, 0, 49_999, 1), ev(2, 0, 50_000, 1)];
        let windows = window_events(&events, 50_000).unwrap();
        assert_eq!(windows.len(), 2);
        assert_eq!(windows[0].events().len(), 2);
        assert_eq!(windows[1].events().len(), 1);
        assert_eq!(windows[0].t_start(), 0);
        assert_eq!(windows[0].t_end(), 50_000);
        assert_eq!(windows[1].events()[0].x, 2);
    }

    #[test]
    fn window_events_emits_empty_middle_window() {
        let events = [ev(0, 0, 10, 1), ev(0, 0, 10 + 2 * 1_000 + 500, -1)];
        let windows = window_events(&events, 1_000).unwrap();
        assert_eq!(windows.len(), 3);
        assert!(windows[1].is_empty());
    }

    #[test]
    fn window_events_rejects_unsorted() {
        let events = [ev(0, 0, 100, 1), ev(0, 0, 50, 1)];
        assert!(matches!(
            window_events(&events, 1_000),
            Err(crate::Error::Ordering(_))
        ));
    }

    #[test]
    fn windowing_partitions_the_input() {
        let events: Vec<Event> = (0..500u64)
            .map(|i| ev((i % 7) as u16, (i % 5) as u16, i * 137, if i % 3 == 0 { -1 } else { 1 }))
            .collect();
        let windows = window_events(&events, 10_000).unwrap();
        let rejoined: Vec<Event> = windows.iter().flat_map(|w| w.events().iter().copied()).collect();
        assert_eq!(rejoined, events);
    }

    #[test]
    fn encode_event_at_window_start_hits_bin_zero() {
        let w = EventWindow::new(vec![ev(3, 2, 1_000, 1)], 1_000, 51_000).unwrap();
        let grid = encode_voxel_grid(&w, 5, 4, 6).unwrap();
        assert_eq!(grid.at(0, 2, 3), 1.0);
        assert_eq!(grid.total(), 1.0);
    }

    #[test]
    fn encode_fractional_timestamp_splits_between_bins() {
        // t at 1.4/4 of the span puts t_star at 1.4
        let span = 40_000u64;
        let t = span * 14 / 40;
        let w = EventWindow::new(vec![ev(0, 0, t, 1)], 0, span).unwrap();
        let grid = encode_voxel_grid(&w, 5, 1, 1).unwrap();
        assert_relative_eq!(grid.at(1, 0, 0), 0.6, epsilon = 1e-12);
        assert_relative_eq!(grid.at(2, 0, 0), 0.4, epsilon = 1e-12);
        assert_eq!(grid.at(0, 0, 0), 0.0);
        assert_eq!(grid.at(3, 0, 0), 0.0);
    }

    #[test]
    fn encode_opposite_polarities_cancel() {
        let t = 17_345u64;
        let w = EventWindow::new(vec![ev(1, 1, t, 1), ev(1, 1, t, -1)], 0, 50_000).unwrap();
        let grid = encode_voxel_grid(&w, 5, 3, 3).unwrap();
        for b in 0..5 {
            assert_eq!(grid.at(b, 1, 1), 0.0);
        }
    }

    #[test]
    fn encode_rejects_out_of_bounds_event() {
        let w = EventWindow::new(vec![ev(10, 0, 5, 1)], 0, 100).unwrap();
        assert!(matches!(
            encode_voxel_grid(&w, 5, 4, 4),
            Err(crate::Error::Bounds(_))
        ));
    }

    #[test]
    fn kernel_taps_sum_to_one() {
        for &t_star in &[0.0, 0.25, 1.999, 2.0, 3.7, 4.0] {
            let ((_, w0), second) = kernel_taps(t_star, 5);
            let total = w0 + second.map(|(_, w)| w).unwrap_or(0.0);
            assert_eq!(total, 1.0, "t_star={t_star}");
        }
    }

    #[test]
    fn normalize_all_zero_grid_unchanged() {
        let grid = VoxelGrid::zeros(5, 4, 4);
        assert_eq!(normalize_voxel_grid(&grid), grid);
    }

    #[test]
    fn normalize_two_values() {
        let mut grid = VoxelGrid::zeros(1, 1, 3);
        *grid.at_mut(0, 0, 0) = 2.0;
        *grid.at_mut(0, 0, 2) = 4.0;
        let out = normalize_voxel_grid(&grid);
        assert_relative_eq!(out.at(0, 0, 0), -1.0);
        assert_relative_eq!(out.at(0, 0, 2), 1.0);
        assert_eq!(out.at(0, 0, 1), 0.0);
    }

    #[test]
    fn normalize_constant_nonzeros_subtracts_mean() {
        let mut grid = VoxelGrid::zeros(1, 1, 4);
        *grid.at_mut(0, 0, 1) = 5.0;
        *grid.at_mut(0, 0, 3) = 5.0;
        let out = normalize_voxel_grid(&grid);
        assert_eq!(out.at(0, 0, 1), 0.0);
        assert_eq!(out.at(0, 0, 3), 0.0);
        assert_eq!(out.at(0, 0, 0), 0.0);
    }

    #[test]
    fn normalize_is_idempotent_on_fixed_nonzero_set() {
        let mut grid = VoxelGrid::zeros(2, 2, 2);
        for (i, v) in [1.5, -2.0, 0.75, 3.0].into_iter().enumerate() {
            grid.data_mut()[i] = v;
        }
        let once = normalize_voxel_grid(&grid);
        let twice = normalize_voxel_grid(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    proptest! {
        /// Shuffling events within a window yields a bit-identical grid once
        /// accumulation happens in sorted order, and the grid total matches
        /// the signed event count closely.
        #[test]
        fn encoding_is_permutation_invariant(seed in 0u64..1_000) {
            use rand::prelude::*;
            use rand_chacha::ChaCha8Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let span = 50_000u64;
            let n = rng.gen_range(1..200usize);
            let mut events: Vec<Event> = (0..n)
                .map(|_| ev(
                    rng.gen_range(0..8),
                    rng.gen_range(0..6),
                    rng.gen_range(0..span),
                    if rng.gen::<bool>() { 1 } else { -1 },
                ))
                .collect();
            events.sort_by_key(|e| e.sort_key());
            let w = EventWindow::new(events.clone(), 0, span).unwrap();
            let grid = encode_voxel_grid(&w, 5, 6, 8).unwrap();

            let mut shuffled = events.clone();
            shuffled.shuffle(&mut rng);
            shuffled.sort_by_key(|e| e.sort_key());
            let w2 = EventWindow::new(shuffled, 0, span).unwrap();
            let grid2 = encode_voxel_grid(&w2, 5, 6, 8).unwrap();
            for (a, b) in grid.data().iter().zip(grid2.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }

            let signed: f64 = events.iter().map(|e| e.polarity as f64).sum();
            prop_assert!((grid.total() - signed).abs() < 1e-9);
        }
    }
}
