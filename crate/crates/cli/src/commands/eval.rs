use std::path::Path;

use e2depth_core::data::formats::read_dpt;
use e2depth_core::metrics::MetricAccumulator;

use crate::commands::{ensure_out_dir, list_with_extension};
use crate::settings::{CliError, Settings};

pub fn run(
    pred_dir: &Path,
    gt_dir: &Path,
    cutoffs: &str,
    out_dir: Option<&Path>,
    settings: &mut Settings,
) -> Result<(), CliError> {
    settings.finish()?;
    let cutoffs: Vec<f64> = cutoffs
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("bad cutoff value {s}")))
        })
        .collect::<Result<_, _>>()?;

    let preds = list_with_extension(pred_dir, "dpt")?;
    let gts = list_with_extension(gt_dir, "dpt")?;
    if preds.is_empty() {
        return Err(CliError::usage(format!(
            "no .dpt files under {}",
            pred_dir.display()
        )));
    }
    if preds.len() != gts.len() {
        return Err(CliError::usage(format!(
            "{} predictions but {} ground-truth files",
            preds.len(),
            gts.len()
        )));
    }
    for p in &preds {
        let name = p.file_name().expect("listed file has a name");
        let counterpart = gt_dir.join(name);
        if !counterpart.is_file() {
            return Err(CliError::usage(format!(
                "missing ground truth {}",
                counterpart.display()
            )));
        }
    }

    let mut acc = MetricAccumulator::new(&cutoffs);
    for p in &preds {
        let name = p.file_name().expect("listed file has a name");
        let pred = read_dpt(p)?;
        let gt = read_dpt(&gt_dir.join(name))?;
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(CliError::usage(format!(
                "{}: prediction {}x{} vs ground truth {}x{}",
                name.to_string_lossy(),
                pred.width,
                pred.height,
                gt.width,
                gt.height
            )));
        }
        acc.push_maps(&pred, &gt, &gt.mask)?;
    }
    let report = acc.finalize()?;
    let json =
        serde_json::to_string_pretty(&report.to_json()).expect("metric report serializes");
    println!("{json}");
    if let Some(dir) = out_dir {
        ensure_out_dir(dir)?;
        std::fs::write(dir.join("metrics.json"), &json)
            .map_err(|e| CliError::runtime(format!("write metrics.json: {e}")))?;
        let csv = format!("{}\n{}\n", report.csv_header(), report.csv_row());
        std::fs::write(dir.join("metrics.csv"), csv)
            .map_err(|e| CliError::runtime(format!("write metrics.csv: {e}")))?;
    }
    Ok(())
}
