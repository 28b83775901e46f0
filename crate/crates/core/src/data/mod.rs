//! Dataset loading, sample assembly, and training-time augmentation.
//!
//! A sequence directory holds `events.evt1`, `depth/NNNNNN.dpt`, an optional
//! `frames/NNNNNN.pgm` mirror, and `manifest.json`. Making samples windows
//! the event stream by consecutive depth timestamps, encodes and normalizes
//! each window into a voxel grid, and pairs it with the normalized log-depth
//! ground truth. The first depth frame has no preceding window and yields no
//! sample.
//!
//! MVSEC-style recordings arrive as ROS bags; converting one means unpacking
//! its event and depth topics into exactly this tree (events as `EVT1`,
//! depth rasters as `DPT1` at the depth timestamps). Bag parsing itself is
//! out of scope here.

pub mod formats;
pub mod toy;

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::events::{
    encode_voxel_grid, normalize_voxel_grid, read_evt1, Event, EventWindow, Frame, VoxelGrid,
};
use crate::metrics::{normalize_ground_truth, DepthMap, DepthPostprocessConfig};
use formats::{
    depth_file_name, frame_file_name, read_dpt, read_dpt_dims, read_manifest_file, ManifestFile,
};

/// How non-finite ground-truth depth (synthetic sky) is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkyPolicy {
    /// Sky pixels become invalid mask entries.
    #[default]
    MaskInvalid,
    /// Sky pixels are clamped to the maximum depth and stay valid.
    ClampToMax,
}

/// One training/evaluation record: a normalized voxel grid aligned with
/// normalized log-depth ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub grid: VoxelGrid,
    pub depth: DepthMap,
    pub frame: Option<Frame>,
    /// Index of the depth frame within its sequence.
    pub index: usize,
}

/// A validated, lazily loading view of one sequence directory.
#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub timestamps_us: Vec<u64>,
    pub has_frames: bool,
}

impl SequenceManifest {
    pub fn events_path(&self) -> PathBuf {
        self.root.join("events.evt1")
    }

    pub fn depth_path(&self, index: usize) -> PathBuf {
        self.root.join("depth").join(depth_file_name(index))
    }

    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.root.join("frames").join(frame_file_name(index))
    }

    pub fn len(&self) -> usize {
        self.timestamps_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps_us.is_empty()
    }
}

/// Validates a sequence directory: manifest presence, monotone timestamps,
/// event-file header dims, and every depth file's header dims.
pub fn load_sequence(root: &Path) -> Result<SequenceManifest> {
    let manifest_path = root.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(Error::Load(format!(
            "missing manifest {}",
            manifest_path.display()
        )));
    }
    let m: ManifestFile = read_manifest_file(&manifest_path)?;
    if m.timestamps_us.is_empty() {
        return Err(Error::Load(format!(
            "{}: manifest lists no depth frames",
            manifest_path.display()
        )));
    }
    for pair in m.timestamps_us.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Load(format!(
                "{}: timestamps not strictly increasing ({} then {})",
                manifest_path.display(),
                pair[0],
                pair[1]
            )));
        }
    }
    let events_path = root.join("events.evt1");
    if !events_path.is_file() {
        return Err(Error::Load(format!(
            "missing event file {}",
            events_path.display()
        )));
    }
    let manifest = SequenceManifest {
        root: root.to_path_buf(),
        name: m.name,
        width: m.width,
        height: m.height,
        fps: m.fps,
        timestamps_us: m.timestamps_us,
        has_frames: root.join("frames").is_dir(),
    };
    // cheap header probe of the event stream
    let (ew, eh, _) = read_evt1(&manifest.events_path())?;
    if (ew as usize, eh as usize) != (manifest.width, manifest.height) {
        return Err(Error::Load(format!(
            "{}: event sensor {}x{} does not match manifest {}x{}",
            manifest.events_path().display(),
            ew,
            eh,
            manifest.width,
            manifest.height
        )));
    }
    for i in 0..manifest.len() {
        let p = manifest.depth_path(i);
        if !p.is_file() {
            return Err(Error::Load(format!("missing depth file {}", p.display())));
        }
        let (w, h) = read_dpt_dims(&p)?;
        if (w, h) != (manifest.width, manifest.height) {
            return Err(Error::Load(format!(
                "{}: depth raster {}x{} does not match manifest {}x{}",
                p.display(),
                w,
                h,
                manifest.width,
                manifest.height
            )));
        }
    }
    Ok(manifest)
}

/// Sample assembly parameters.
#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub bins: usize,
    /// Spatial dims are center-cropped to the largest multiple of this.
    pub spatial_factor: usize,
    pub postprocess: DepthPostprocessConfig,
    pub sky: SkyPolicy,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            bins: 5,
            spatial_factor: 8,
            postprocess: DepthPostprocessConfig::default(),
            sky: SkyPolicy::MaskInvalid,
        }
    }
}

/// Largest multiple of `factor` at or below `v`.
fn crop_target(v: usize, factor: usize) -> usize {
    (v / factor) * factor
}

fn center_crop_plane<T: Copy>(
    data: &[T],
    h: usize,
    w: usize,
    off_y: usize,
    off_x: usize,
    ch: usize,
    cw: usize,
) -> Vec<T> {
    debug_assert!(off_y + ch <= h && off_x + cw <= w);
    let mut out = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        let row = (y + off_y) * w + off_x;
        out.extend_from_slice(&data[row..row + cw]);
    }
    out
}

/// Crops grid, depth, mask, and frame identically to `(ch, cw)` at the given
/// offset.
pub fn crop_sample(sample: &Sample, off_y: usize, off_x: usize, ch: usize, cw: usize) -> Result<Sample> {
    let (h, w) = (sample.depth.height, sample.depth.width);
    if off_y + ch > h || off_x + cw > w || ch == 0 || cw == 0 {
        return Err(Error::Config(format!(
            "crop {ch}x{cw} at ({off_y}, {off_x}) does not fit in {h}x{w}"
        )));
    }
    let bins = sample.grid.bins();
    let mut grid_data = Vec::with_capacity(bins * ch * cw);
    for b in 0..bins {
        let plane = &sample.grid.data()[b * h * w..(b + 1) * h * w];
        grid_data.extend(center_crop_plane(plane, h, w, off_y, off_x, ch, cw));
    }
    let grid = VoxelGrid::from_data(bins, ch, cw, grid_data)?;
    let depth = DepthMap::new(
        ch,
        cw,
        center_crop_plane(&sample.depth.values, h, w, off_y, off_x, ch, cw),
        center_crop_plane(&sample.depth.mask, h, w, off_y, off_x, ch, cw),
    )?;
    let frame = sample
        .frame
        .as_ref()
        .map(|f| {
            Frame::new(
                ch,
                cw,
                center_crop_plane(&f.data, h, w, off_y, off_x, ch, cw),
            )
        })
        .transpose()?;
    Ok(Sample {
        grid,
        depth,
        frame,
        index: sample.index,
    })
}

/// Mirrors grid, depth, mask, and frame horizontally: `x -> W - 1 - x`.
pub fn flip_sample(sample: &Sample) -> Sample {
    let (h, w) = (sample.depth.height, sample.depth.width);
    let flip_plane = |data: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = data[y * w + (w - 1 - x)];
            }
        }
        out
    };
    let bins = sample.grid.bins();
    let mut grid_data = Vec::with_capacity(bins * h * w);
    for b in 0..bins {
        grid_data.extend(flip_plane(&sample.grid.data()[b * h * w..(b + 1) * h * w]));
    }
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            mask[y * w + x] = sample.depth.mask[y * w + (w - 1 - x)];
        }
    }
    Sample {
        grid: VoxelGrid::from_data(bins, h, w, grid_data).expect("consistent dims"),
        depth: DepthMap::new(h, w, flip_plane(&sample.depth.values), mask)
            .expect("consistent dims"),
        frame: sample
            .frame
            .as_ref()
            .map(|f| Frame::new(h, w, flip_plane(&f.data)).expect("consistent dims")),
        index: sample.index,
    }
}

/// Builds the sample stream of a sequence: one sample per depth frame after
/// the first, pairing the events between consecutive depth timestamps with
/// the later frame's ground truth.
pub fn make_samples(
    manifest: &SequenceManifest,
    options: &SampleOptions,
    load_frames: bool,
) -> Result<Vec<Sample>> {
    let (_, _, events) = read_evt1(&manifest.events_path())?;
    let (h, w) = (manifest.height, manifest.width);
    let (ch, cw) = (
        crop_target(h, options.spatial_factor),
        crop_target(w, options.spatial_factor),
    );
    if ch == 0 || cw == 0 {
        return Err(Error::Config(format!(
            "sequence {h}x{w} smaller than the spatial factor {}",
            options.spatial_factor
        )));
    }
    let (off_y, off_x) = ((h - ch) / 2, (w - cw) / 2);

    let mut samples = Vec::with_capacity(manifest.len().saturating_sub(1));
    let mut cursor = 0usize;
    // skip events before the very first depth timestamp
    while cursor < events.len() && events[cursor].t < manifest.timestamps_us[0] {
        cursor += 1;
    }
    for k in 1..manifest.len() {
        let (t0, t1) = (manifest.timestamps_us[k - 1], manifest.timestamps_us[k]);
        let mut chunk: Vec<Event> = Vec::new();
        while cursor < events.len() && events[cursor].t < t1 {
            chunk.push(events[cursor]);
            cursor += 1;
        }
        let window = EventWindow::new(chunk, t0, t1)?;
        let grid = encode_voxel_grid(&window, options.bins, h, w)?;
        let grid = normalize_voxel_grid(&grid);

        let metric = read_dpt(&manifest.depth_path(k))?;
        let metric = apply_sky_policy(metric, options);
        let (depth, _) = normalize_ground_truth(&metric, &options.postprocess)?;

        let frame = if load_frames && manifest.has_frames {
            Some(formats::read_pgm(&manifest.frame_path(k))?)
        } else {
            None
        };

        let full = Sample {
            grid,
            depth,
            frame,
            index: k,
        };
        samples.push(crop_sample(&full, off_y, off_x, ch, cw)?);
    }
    Ok(samples)
}

fn apply_sky_policy(mut metric: DepthMap, options: &SampleOptions) -> DepthMap {
    if options.sky == SkyPolicy::ClampToMax {
        for i in 0..metric.values.len() {
            if !metric.values[i].is_finite() {
                metric.values[i] = options.postprocess.d_max;
                metric.mask[i] = true;
            }
        }
    }
    metric
}

/// Random crop plus probability-0.5 horizontal flip, the identical transform
/// applied to grid, depth, and mask.
pub fn augment(
    sample: &Sample,
    crop: (usize, usize),
    spatial_factor: usize,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let (ch, cw) = crop;
    let (h, w) = (sample.depth.height, sample.depth.width);
    if ch > h || cw > w {
        return Err(Error::Config(format!(
            "crop {ch}x{cw} larger than sample {h}x{w}"
        )));
    }
    if !ch.is_multiple_of(spatial_factor) || !cw.is_multiple_of(spatial_factor) {
        return Err(Error::Config(format!(
            "crop {ch}x{cw} not divisible by the spatial factor {spatial_factor}"
        )));
    }
    let off_y = rng.gen_range(0..=h - ch);
    let off_x = rng.gen_range(0..=w - cw);
    let cropped = crop_sample(sample, off_y, off_x, ch, cw)?;
    Ok(if rng.gen::<bool>() {
        flip_sample(&cropped)
    } else {
        cropped
    })
}
