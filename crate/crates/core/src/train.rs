//! Supervised training: Adam, full backpropagation through L-step unrolls,
//! deterministic augmentation, validation, and step logging.
//!
//! A training item is one contiguous sub-sequence of `unroll` samples. Items
//! are grouped into batches; each batch runs every item from zero recurrent
//! state on one shared tape, averages the per-item sequence losses, does one
//! backward pass, and takes one Adam step. Recurrent state never crosses
//! item boundaries.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_sample, flip_sample, Sample};
use crate::error::{Error, Result};
use crate::losses::sequence_loss_graph;
use crate::metrics::{
    denormalize_depth, DepthMap, DepthPostprocessConfig, MetricAccumulator, MetricReport,
};
use crate::model::{Network, RecurrentState};
use crate::tensor::{Graph, Parameter, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Sub-sequence length L each item unrolls over.
    pub unroll: usize,
    /// Weight of the gradient-matching term.
    pub lambda: f64,
    /// Pyramid depth of the gradient-matching term.
    pub scales: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Optional global-norm gradient clipping.
    pub grad_clip: Option<f64>,
    /// Training-time random crop (height, width); `None` trains full-frame.
    pub crop: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 20,
            unroll: 40,
            lambda: 0.5,
            scales: 4,
            epochs: 1,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: None,
            crop: Some((224, 224)),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.unroll == 0
            || self.scales == 0
            || self.epochs == 0
        {
            return Err(Error::Config(format!(
                "training config fields must be positive: {self:?}"
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("gradient clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// First and second Adam moment buffers, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Parameter]) -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn for_network(net: &Network) -> Self {
        Self::new(&net.parameters())
    }
}

/// One bias-corrected Adam update from the parameters' accumulated gradients.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - state.beta1.powi(state.step as i32);
    let c2 = 1.0 - state.beta2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if state.m[i].len() != p.numel() {
            return Err(Error::Shape(format!(
                "adam buffer {i} has {} entries, parameter {} has {}",
                state.m[i].len(),
                p.name,
                p.numel()
            )));
        }
        let grads = p.grad.data().to_vec();
        let values = p.value.data_mut();
        for j in 0..grads.len() {
            let g = grads[j];
            state.m[i][j] = state.beta1 * state.m[i][j] + (1.0 - state.beta1) * g;
            state.v[i][j] = state.beta2 * state.v[i][j] + (1.0 - state.beta2) * g * g;
            let m_hat = state.m[i][j] / c1;
            let v_hat = state.v[i][j] / c2;
            values[j] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// One contiguous sub-sequence of samples trained as a unit.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub steps: Vec<Sample>,
}

/// Splits a sequence into non-overlapping items of `unroll` samples; a
/// trailing remainder shorter than `unroll` is dropped.
pub fn chunk_sequence(samples: &[Sample], unroll: usize) -> Vec<TrainItem> {
    samples
        .chunks_exact(unroll)
        .map(|c| TrainItem { steps: c.to_vec() })
        .collect()
}

/// Per-optimizer-step record; serialized as one JSON log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub si: f64,
    pub grad: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        serde_json::to_string(self).expect("step stats are serializable")
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub steps: Vec<StepStats>,
    pub mean_loss: f64,
    pub mean_si: f64,
    pub mean_grad: f64,
    pub wall_ms: f64,
}

pub struct Trainer {
    pub net: Network,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub global_step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::for_network(&net);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            net,
            adam,
            config,
            global_step: 0,
            rng,
        })
    }

    /// Resets the optimizer moments (used between training stages).
    pub fn reset_optimizer(&mut self) {
        self.adam = AdamState::for_network(&self.net);
    }

    /// Applies one crop/flip draw uniformly to every step of an item.
    fn augment_item(&mut self, item: &TrainItem) -> Result<Vec<Sample>> {
        let Some((ch, cw)) = self.config.crop else {
            return Ok(item.steps.clone());
        };
        let first = item
            .steps
            .first()
            .ok_or_else(|| Error::Config("empty training item".into()))?;
        let (h, w) = (first.depth.height, first.depth.width);
        if ch > h || cw > w {
            return Err(Error::Config(format!(
                "crop {ch}x{cw} larger than sample {h}x{w}"
            )));
        }
        let off_y = self.rng.gen_range(0..=h - ch);
        let off_x = self.rng.gen_range(0..=w - cw);
        let flip = self.rng.gen::<bool>();
        item.steps
            .iter()
            .map(|s| {
                let c = crop_sample(s, off_y, off_x, ch, cw)?;
                Ok(if flip { flip_sample(&c) } else { c })
            })
            .collect()
    }

    /// Runs one pass over the items: per batch, forward every item from zero
    /// state, average the sequence losses, backpropagate once, and take one
    /// Adam step. Errors carry the index of the offending batch.
    pub fn train_epoch(&mut self, items: &[TrainItem]) -> Result<EpochStats> {
        if items.is_empty() {
            return Err(Error::Config("train_epoch got no items".into()));
        }
        let epoch_start = Instant::now();
        let mut steps = Vec::new();
        let batch_count = items.len().div_ceil(self.config.batch_size);
        for (batch_idx, batch) in items.chunks(self.config.batch_size).enumerate() {
            let step_start = Instant::now();
            let stats = self
                .train_batch(batch)
                .map_err(|e| Error::Config(format!("batch {batch_idx}/{batch_count}: {e}")))?;
            let wall_ms = step_start.elapsed().as_secs_f64() * 1e3;
            steps.push(StepStats { wall_ms, ..stats });
        }
        let n = steps.len() as f64;
        Ok(EpochStats {
            mean_loss: steps.iter().map(|s| s.loss).sum::<f64>() / n,
            mean_si: steps.iter().map(|s| s.si).sum::<f64>() / n,
            mean_grad: steps.iter().map(|s| s.grad).sum::<f64>() / n,
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
            steps,
        })
    }

    fn train_batch(&mut self, batch: &[TrainItem]) -> Result<StepStats> {
        let prepared: Vec<Vec<Sample>> = batch
            .iter()
            .map(|item| self.augment_item(item))
            .collect::<Result<_>>()?;

        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, true);
        let mut updates = Vec::new();
        let mut item_losses: Vec<Var> = Vec::with_capacity(prepared.len());
        let mut si_sum = 0.0;
        let mut grad_sum = 0.0;
        for samples in &prepared {
            let inputs: Vec<Var> = samples
                .iter()
                .map(|s| g.leaf(s.grid.to_tensor(), false))
                .collect();
            let outs = self
                .net
                .forward_sequence(&mut g, &vars, &inputs, true, &mut updates)?;
            let pairs: Vec<(Var, &DepthMap)> = outs
                .iter()
                .zip(samples)
                .map(|(&o, s)| (o, &s.depth))
                .collect();
            let (loss, breakdown) =
                sequence_loss_graph(&mut g, &pairs, self.config.lambda, self.config.scales)?;
            item_losses.push(loss);
            si_sum += breakdown.si_sum;
            grad_sum += breakdown.grad_sum;
        }
        let mut acc = item_losses[0];
        for &l in &item_losses[1..] {
            acc = g.add(acc, l)?;
        }
        let batch_loss = g.scale(acc, 1.0 / item_losses.len() as f64);
        let loss_value = g.value(batch_loss).scalar_value()?;

        g.backward(batch_loss)?;
        self.net.zero_grads();
        self.net.accumulate_grads(&g, &vars);
        self.net.apply_bn_updates(&updates);
        if let Some(clip) = self.config.grad_clip {
            clip_global_norm(&mut self.net, clip);
        }
        let mut params = self.net.parameters_mut();
        adam_step(&mut params, &mut self.adam, self.config.learning_rate)?;
        self.global_step += 1;
        let n_items = prepared.len() as f64;
        Ok(StepStats {
            step: self.global_step,
            loss: loss_value,
            si: si_sum / n_items,
            grad: grad_sum / n_items,
            lr: self.config.learning_rate,
            wall_ms: 0.0,
        })
    }
}

/// Scales every gradient so the global L2 norm does not exceed `clip`.
pub fn clip_global_norm(net: &mut Network, clip: f64) {
    let norm_sq: f64 = net
        .parameters()
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum();
    let norm = norm_sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for p in net.parameters_mut() {
            for g in p.grad.data_mut() {
                *g *= scale;
            }
        }
    }
}

/// Runs the network over whole sequences with intra-sequence recurrent state,
/// denormalizes predictions and ground truth to meters, and pools every valid
/// pixel into one metric report.
pub fn validate(
    net: &Network,
    sequences: &[Vec<Sample>],
    postprocess: &DepthPostprocessConfig,
    cutoffs: &[f64],
) -> Result<MetricReport> {
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut acc = MetricAccumulator::new(cutoffs);
    for seq in sequences {
        let Some(first) = seq.first() else { continue };
        let (h, w) = (first.grid.height(), first.grid.width());
        let mut state = RecurrentState::zeros(net.config(), h, w)?;
        for sample in seq {
            let (pred, next) = net.predict_step(&sample.grid, &state)?;
            state = next;
            accumulate_frame(&mut acc, &pred.to_depth_map(), &sample.depth, postprocess)?;
        }
    }
    acc.finalize()
}

/// Adds one normalized (prediction, ground truth) frame pair to the pool.
pub fn accumulate_frame(
    acc: &mut MetricAccumulator,
    pred_norm: &DepthMap,
    gt_norm: &DepthMap,
    postprocess: &DepthPostprocessConfig,
) -> Result<()> {
    let pred_m = denormalize_depth(pred_norm, postprocess)?;
    let gt_m = denormalize_depth(gt_norm, postprocess)?;
    acc.push_maps(&pred_m, &gt_m, &gt_m.mask)
}
