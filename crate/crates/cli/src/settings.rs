//! Flat dotted-key configuration: a JSON object file overlaid by repeated
//! `--set key=value` flags, last writer wins. Every key must be consumed by
//! the subcommand; leftovers are rejected as unknown.

use std::collections::BTreeMap;
use std::path::Path;

use e2depth_core::data::{SampleOptions, SkyPolicy};
use e2depth_core::events::SimulatorConfig;
use e2depth_core::metrics::DepthPostprocessConfig;
use e2depth_core::model::NetworkConfig;
use e2depth_core::train::TrainConfig;
use serde_json::Value;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<e2depth_core::Error> for CliError {
    fn from(e: e2depth_core::Error) -> Self {
        match e {
            // bad parameters are usage errors, everything else is runtime
            e2depth_core::Error::Config(_) => CliError::usage(e.to_string()),
            other => CliError::runtime(other.to_string()),
        }
    }
}

pub struct Settings {
    map: BTreeMap<String, Value>,
}

impl Settings {
    pub fn load(config: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            let value: Value = serde_json::from_str(&text).map_err(|e| {
                CliError::usage(format!("config {} is not valid JSON: {e}", path.display()))
            })?;
            let Value::Object(obj) = value else {
                return Err(CliError::usage(format!(
                    "config {} must be a flat JSON object",
                    path.display()
                )));
            };
            for (k, v) in obj {
                if v.is_object() || v.is_array() {
                    return Err(CliError::usage(format!(
                        "config key {k} must be a scalar (flat dotted keys)"
                    )));
                }
                map.insert(k, v);
            }
        }
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                return Err(CliError::usage(format!("--set expects KEY=VALUE, got {s}")));
            };
            // numbers and booleans parse as JSON, anything else is a string
            let value = serde_json::from_str::<Value>(v)
                .unwrap_or_else(|_| Value::String(v.to_string()));
            map.insert(k.to_string(), value);
        }
        Ok(Settings { map })
    }

    pub fn peek_u64(&mut self, key: &str) -> Result<Option<u64>, CliError> {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| CliError::usage(format!("{key} must be a non-negative integer"))),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| CliError::usage(format!("{key} must be a number"))),
        }
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| CliError::usage(format!("{key} must be a non-negative integer"))),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| CliError::usage(format!("{key} must be a non-negative integer"))),
        }
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> Result<String, CliError> {
        match self.take(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s),
            Some(v) => Ok(v.to_string()),
        }
    }

    /// All keys starting with `prefix`, removed from the map.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Value)> {
        let keys: Vec<String> = self
            .map
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let v = self.map.remove(&k).expect("key listed above");
                (k, v)
            })
            .collect()
    }

    /// Rejects any keys no subcommand consumed.
    pub fn finish(&mut self) -> Result<(), CliError> {
        if self.map.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&String> = self.map.keys().collect();
            Err(CliError::usage(format!("unknown config keys: {keys:?}")))
        }
    }

    pub fn network_config(&mut self) -> Result<NetworkConfig, CliError> {
        let d = NetworkConfig::default();
        let cfg = NetworkConfig {
            num_encoders: self.take_usize("net.num_encoders", d.num_encoders)?,
            num_residual_blocks: self
                .take_usize("net.num_residual_blocks", d.num_residual_blocks)?,
            base_channels: self.take_usize("net.base_channels", d.base_channels)?,
            input_bins: self.take_usize("net.input_bins", d.input_bins)?,
            unroll_length: self.take_usize("net.unroll_length", d.unroll_length)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&mut self, seed: u64, unroll_default: usize) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let crop_h = self.take_usize("train.crop_height", 224)?;
        let crop_w = self.take_usize("train.crop_width", 224)?;
        let grad_clip = self.take_f64("train.grad_clip", 0.0)?;
        let cfg = TrainConfig {
            learning_rate: self.take_f64("train.learning_rate", d.learning_rate)?,
            batch_size: self.take_usize("train.batch_size", d.batch_size)?,
            unroll: self.take_usize("train.unroll", unroll_default)?,
            lambda: self.take_f64("train.lambda", d.lambda)?,
            scales: self.take_usize("train.scales", d.scales)?,
            epochs: self.take_usize("train.epochs", d.epochs)?,
            seed,
            checkpoint_every: self.take_usize("train.checkpoint_every", d.checkpoint_every)?,
            grad_clip: (grad_clip > 0.0).then_some(grad_clip),
            crop: (crop_h > 0 && crop_w > 0).then_some((crop_h, crop_w)),
        };
        // consume a possibly present train.seed; the caller already resolved it
        let _ = self.take("train.seed");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn simulator_config(&mut self) -> Result<SimulatorConfig, CliError> {
        let d = SimulatorConfig::default();
        Ok(SimulatorConfig {
            contrast_threshold: self.take_f64("sim.contrast_threshold", d.contrast_threshold)?,
            upsample_factor: self.take_u64("sim.upsample_factor", d.upsample_factor as u64)? as u32,
            log_eps: self.take_f64("sim.log_eps", d.log_eps)?,
            refractory_us: self.take_u64("sim.refractory_us", d.refractory_us)?,
        })
    }

    pub fn postprocess_config(&mut self) -> Result<DepthPostprocessConfig, CliError> {
        let d = DepthPostprocessConfig::default();
        let cfg = DepthPostprocessConfig {
            d_max: self.take_f64("depth.d_max", d.d_max)?,
            alpha: self.take_f64("depth.alpha", d.alpha)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sample_options(
        &mut self,
        net: &NetworkConfig,
        postprocess: DepthPostprocessConfig,
    ) -> Result<SampleOptions, CliError> {
        let sky = match self.take_string("data.sky", "mask")?.as_str() {
            "mask" => SkyPolicy::MaskInvalid,
            "clamp" => SkyPolicy::ClampToMax,
            other => {
                return Err(CliError::usage(format!(
                    "data.sky must be \"mask\" or \"clamp\", got {other}"
                )))
            }
        };
        let bins = self.take_usize("data.bins", net.input_bins)?;
        if bins != net.input_bins {
            return Err(CliError::usage(format!(
                "data.bins = {bins} does not match net.input_bins = {}",
                net.input_bins
            )));
        }
        Ok(SampleOptions {
            bins,
            spatial_factor: net.spatial_factor(),
            postprocess,
            sky,
        })
    }
}

/// One pretrain/finetune stage: which sequences it draws from, with what
/// weights, for how many epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub name: String,
    pub sequences: Vec<String>,
    pub weights: Vec<f64>,
    pub epochs: usize,
}

/// Parses `stage.N.name`, `stage.N.sequences` (comma-separated),
/// `stage.N.weights` (comma-separated), `stage.N.epochs` keys into an ordered
/// stage list. Returns an empty vector when no stage keys are present.
pub fn parse_stages(settings: &mut Settings) -> Result<Vec<StageSpec>, CliError> {
    let raw = settings.take_prefixed("stage.");
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let mut by_index: BTreeMap<usize, BTreeMap<String, Value>> = BTreeMap::new();
    for (key, value) in raw {
        let rest = &key["stage.".len()..];
        let Some((idx, field)) = rest.split_once('.') else {
            return Err(CliError::usage(format!("malformed stage key {key}")));
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| CliError::usage(format!("stage index must be an integer in {key}")))?;
        by_index
            .entry(idx)
            .or_default()
            .insert(field.to_string(), value);
    }
    let mut stages = Vec::new();
    for (expected, (idx, mut fields)) in by_index.into_iter().enumerate() {
        if idx != expected {
            return Err(CliError::usage(format!(
                "stage indices must be contiguous from 0; missing stage.{expected}"
            )));
        }
        let name = match fields.remove("name") {
            Some(Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => format!("stage{idx}"),
        };
        let sequences: Vec<String> = match fields.remove("sequences") {
            Some(Value::String(s)) => s.split(',').map(|x| x.trim().to_string()).collect(),
            Some(_) | None => {
                return Err(CliError::usage(format!(
                    "stage.{idx}.sequences must be a comma-separated string"
                )))
            }
        };
        let weights: Vec<f64> = match fields.remove("weights") {
            None => vec![1.0; sequences.len()],
            Some(Value::String(s)) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::usage(format!("bad weight {x} in stage.{idx}")))
                })
                .collect::<Result<_, _>>()?,
            Some(_) => {
                return Err(CliError::usage(format!(
                    "stage.{idx}.weights must be a comma-separated string"
                )))
            }
        };
        if weights.len() != sequences.len() {
            return Err(CliError::usage(format!(
                "stage.{idx}: {} weights for {} sequences",
                weights.len(),
                sequences.len()
            )));
        }
        let epochs = match fields.remove("epochs") {
            Some(v) => v
                .as_u64()
                .ok_or_else(|| CliError::usage(format!("stage.{idx}.epochs must be an integer")))?
                as usize,
            None => return Err(CliError::usage(format!("stage.{idx}.epochs is required"))),
        };
        if !fields.is_empty() {
            let keys: Vec<&String> = fields.keys().collect();
            return Err(CliError::usage(format!(
                "unknown stage.{idx} fields: {keys:?}"
            )));
        }
        stages.push(StageSpec {
            name,
            sequences,
            weights,
            epochs,
        });
    }
    Ok(stages)
}
