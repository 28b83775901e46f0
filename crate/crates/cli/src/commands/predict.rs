use std::path::Path;

use e2depth_core::data::formats::{depth_file_name, frame_file_name, write_dpt, write_pgm};
use e2depth_core::data::{load_sequence, make_samples, SampleOptions};
use e2depth_core::events::Frame;
use e2depth_core::metrics::denormalize_depth;
use e2depth_core::model::{Network, RecurrentState};

use crate::commands::ensure_out_dir;
use crate::settings::{CliError, Settings};

pub fn run(
    checkpoint: &Path,
    sequence_dir: &Path,
    out_dir: &Path,
    settings: &mut Settings,
    verbose: u8,
) -> Result<(), CliError> {
    let postprocess = settings.postprocess_config()?;
    let sky = settings.take_string("data.sky", "mask")?;
    settings.finish()?;
    if !checkpoint.is_file() {
        return Err(CliError::usage(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let net = Network::load(checkpoint)?;
    let manifest = load_sequence(sequence_dir)?;

    let net_config = *net.config();
    if manifest.width < net_config.spatial_factor() || manifest.height < net_config.spatial_factor()
    {
        return Err(CliError::usage(format!(
            "sequence {}x{} smaller than the network's spatial factor {}",
            manifest.width,
            manifest.height,
            net_config.spatial_factor()
        )));
    }
    let options = SampleOptions {
        bins: net_config.input_bins,
        spatial_factor: net_config.spatial_factor(),
        postprocess,
        sky: match sky.as_str() {
            "mask" => e2depth_core::data::SkyPolicy::MaskInvalid,
            "clamp" => e2depth_core::data::SkyPolicy::ClampToMax,
            other => {
                return Err(CliError::usage(format!(
                    "data.sky must be \"mask\" or \"clamp\", got {other}"
                )))
            }
        },
    };
    let samples = make_samples(&manifest, &options, false)?;
    if samples.is_empty() {
        return Err(CliError::usage(format!(
            "{} yields no samples (needs at least two depth frames)",
            sequence_dir.display()
        )));
    }

    ensure_out_dir(out_dir)?;
    let (h, w) = (samples[0].grid.height(), samples[0].grid.width());
    let mut state = RecurrentState::zeros(&net_config, h, w)?;
    for sample in &samples {
        let (pred, next) = net.predict_step(&sample.grid, &state)?;
        state = next;
        let metric = denormalize_depth(&pred.to_depth_map(), &postprocess)?;
        write_dpt(&out_dir.join(depth_file_name(sample.index)), &metric)?;
        // normalized log depth doubles as the log-scale grayscale rendering
        let rendering = Frame::new(pred.height, pred.width, pred.values.clone())?;
        write_pgm(&out_dir.join(frame_file_name(sample.index)), &rendering)?;
        if verbose > 0 {
            eprintln!("frame {:06} -> depth + rendering", sample.index);
        }
    }
    println!(
        "{} depth maps ({}x{}) -> {}",
        samples.len(),
        w,
        h,
        out_dir.display()
    );
    Ok(())
}
