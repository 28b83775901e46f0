use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use e2depth_core::data::formats::read_split_file;
use e2depth_core::data::{load_sequence, make_samples, Sample};
use e2depth_core::model::Network;
use e2depth_core::train::{chunk_sequence, validate, TrainItem, Trainer};
use e2depth_core::metrics::DEFAULT_CUTOFFS;

use crate::commands::ensure_out_dir;
use crate::settings::{parse_stages, CliError, Settings, StageSpec};

pub fn run(
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
    seed: u64,
    settings: &mut Settings,
    verbose: u8,
) -> Result<(), CliError> {
    let net_config = settings.network_config()?;
    let train_config = settings.train_config(seed, net_config.unroll_length)?;
    let postprocess = settings.postprocess_config()?;
    let sample_options = settings.sample_options(&net_config, postprocess)?;
    let stages = parse_stages(settings)?;
    settings.finish()?;

    let split_path = data_root.join("split.json");
    if !split_path.is_file() {
        return Err(CliError::usage(format!(
            "missing split file {}",
            split_path.display()
        )));
    }
    let split = read_split_file(&split_path)?;
    if split.train.is_empty() {
        return Err(CliError::usage("split.json lists no training sequences"));
    }

    let stages = if stages.is_empty() {
        vec![StageSpec {
            name: "train".into(),
            sequences: split.train.clone(),
            weights: vec![1.0; split.train.len()],
            epochs: train_config.epochs,
        }]
    } else {
        stages
    };

    // load every sequence any stage or the validation split touches
    let mut needed: Vec<String> = stages.iter().flat_map(|s| s.sequences.clone()).collect();
    needed.extend(split.val.clone());
    needed.sort();
    needed.dedup();
    let mut pools: BTreeMap<String, Vec<TrainItem>> = BTreeMap::new();
    let mut sequences: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for name in &needed {
        let manifest = load_sequence(&data_root.join(name))?;
        let samples = make_samples(&manifest, &sample_options, false)?;
        pools.insert(
            name.clone(),
            chunk_sequence(&samples, train_config.unroll),
        );
        sequences.insert(name.clone(), samples);
    }

    let net = match resume {
        Some(path) => {
            let net = Network::load(path)?;
            if *net.config() != net_config {
                return Err(CliError::usage(format!(
                    "checkpoint config {:?} does not match requested {:?}",
                    net.config(),
                    net_config
                )));
            }
            net
        }
        None => Network::init(net_config, seed)?,
    };

    ensure_out_dir(out_dir)?;
    let log_path = out_dir.join("log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", log_path.display())))?,
    );

    let mut trainer = Trainer::new(net, train_config)?;
    let mut epoch_counter = 0usize;
    for (stage_idx, stage) in stages.iter().enumerate() {
        // each stage starts with fresh optimizer moments
        if stage_idx > 0 {
            trainer.reset_optimizer();
        }
        for s in &stage.sequences {
            if !pools.contains_key(s) {
                return Err(CliError::usage(format!(
                    "stage {} names unknown sequence {s}",
                    stage.name
                )));
            }
        }
        for epoch in 0..stage.epochs {
            let items = stage_items(stage, &pools, seed, stage_idx, epoch)?;
            if items.is_empty() {
                return Err(CliError::usage(format!(
                    "stage {} epoch {epoch} produced no items (sequences shorter than the unroll?)",
                    stage.name
                )));
            }
            let stats = trainer.train_epoch(&items)?;
            for s in &stats.steps {
                writeln!(log, "{}", s.log_line())
                    .map_err(|e| CliError::runtime(format!("write {}: {e}", log_path.display())))?;
            }
            if verbose > 0 {
                eprintln!(
                    "stage {} epoch {epoch}: mean loss {:.6} (si {:.6}, grad {:.6}) in {:.0} ms",
                    stage.name, stats.mean_loss, stats.mean_si, stats.mean_grad, stats.wall_ms
                );
            }
            epoch_counter += 1;
            if trainer.config.checkpoint_every > 0
                && epoch_counter.is_multiple_of(trainer.config.checkpoint_every)
            {
                trainer
                    .net
                    .save(&out_dir.join(format!("ckpt-{epoch_counter:05}.e2dw")))?;
            }
        }
    }
    log.flush()
        .map_err(|e| CliError::runtime(format!("write {}: {e}", log_path.display())))?;
    trainer.net.save(&out_dir.join("model.e2dw"))?;

    // validate on the val split, or the train split when none is given
    let val_names = if split.val.is_empty() {
        &split.train
    } else {
        &split.val
    };
    let val_seqs: Vec<Vec<Sample>> = val_names
        .iter()
        .filter_map(|n| sequences.get(n).cloned())
        .collect();
    let report = validate(&trainer.net, &val_seqs, &postprocess, &DEFAULT_CUTOFFS)?;
    let json = serde_json::to_string_pretty(&report.to_json())
        .expect("metric report serializes");
    std::fs::write(out_dir.join("metrics.json"), &json)
        .map_err(|e| CliError::runtime(format!("write metrics.json: {e}")))?;
    println!("{json}");
    Ok(())
}

/// The item list one epoch trains on. Uniform single-sequence stages iterate
/// items in order; weighted or multi-sequence stages draw with replacement
/// from the pools, deterministically from (seed, stage, epoch).
fn stage_items(
    stage: &StageSpec,
    pools: &BTreeMap<String, Vec<TrainItem>>,
    seed: u64,
    stage_idx: usize,
    epoch: usize,
) -> Result<Vec<TrainItem>, CliError> {
    let uniform = stage.weights.iter().all(|&w| (w - 1.0).abs() < 1e-12);
    if uniform {
        let mut items = Vec::new();
        for name in &stage.sequences {
            items.extend(pools[name].iter().cloned());
        }
        return Ok(items);
    }
    let total: usize = stage.sequences.iter().map(|n| pools[n].len()).sum();
    let weight_sum: f64 = stage.weights.iter().sum();
    if weight_sum <= 0.0 {
        return Err(CliError::usage(format!(
            "stage {} has non-positive total weight",
            stage.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ (stage_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (epoch as u64) << 32,
    );
    let mut items = Vec::with_capacity(total);
    for _ in 0..total {
        let mut pick = rng.gen_range(0.0..weight_sum);
        let mut chosen = stage.sequences.len() - 1;
        for (i, &w) in stage.weights.iter().enumerate() {
            if pick < w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        let pool = &pools[&stage.sequences[chosen]];
        if pool.is_empty() {
            return Err(CliError::usage(format!(
                "sequence {} yields no items at this unroll",
                stage.sequences[chosen]
            )));
        }
        items.push(pool[rng.gen_range(0..pool.len())].clone());
    }
    Ok(items)
}
