//! The recurrent encoder-decoder depth network.
//!
//! Topology: head conv (bins -> N_b channels, k5) -> N_E encoder layers
//! (stride-2 conv k5, batch norm, ReLU, ConvLSTM k3) -> N_R residual blocks
//! -> N_E decoder layers (bilinear x2, conv k5, batch norm, skip sum, ReLU)
//! -> 1x1 prediction conv -> sigmoid. Skip connections add each decoder's
//! output to the recurrent features of the symmetric encoder (the head
//! features for the last decoder). Channel count doubles at every encoder
//! and halves at every decoder.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::VoxelGrid;
use crate::metrics::DepthMap;
use crate::nn::{
    BatchNormLayer, BnUpdate, BnVars, ConvLayer, ConvLstmCell, ConvVars, LstmVars, ResidualBlock,
    ResidualVars,
};
use crate::tensor::{load_named_tensors, save_named_tensors, Graph, Parameter, Tensor, Var};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_encoders: usize,
    pub num_residual_blocks: usize,
    pub base_channels: usize,
    pub input_bins: usize,
    pub unroll_length: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_encoders: 3,
            num_residual_blocks: 2,
            base_channels: 32,
            input_bins: 5,
            unroll_length: 40,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_encoders == 0
            || self.base_channels == 0
            || self.input_bins == 0
            || self.unroll_length == 0
        {
            return Err(Error::Config(format!(
                "network config fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Spatial downsampling factor of the full encoder stack.
    pub fn spatial_factor(&self) -> usize {
        1 << self.num_encoders
    }

    /// Output channels of encoder `i` (0-indexed).
    pub fn encoder_channels(&self, i: usize) -> usize {
        self.base_channels << (i + 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.num_encoders
    }

    /// Rejects spatial dims the encoder stack cannot halve cleanly.
    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        let f = self.spatial_factor();
        if height == 0 || width == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(Error::Shape(format!(
                "input {height}x{width} not divisible by {f} (2^num_encoders)"
            )));
        }
        Ok(())
    }
}

/// Per-encoder (hidden, cell) tensors carried across windows.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl RecurrentState {
    /// All-zero state for a given input resolution, the k = 0 condition.
    pub fn zeros(config: &NetworkConfig, height: usize, width: usize) -> Result<Self> {
        config.check_spatial(height, width)?;
        let mut layers = Vec::with_capacity(config.num_encoders);
        for i in 0..config.num_encoders {
            let ch = config.encoder_channels(i);
            let (h, w) = (height >> (i + 1), width >> (i + 1));
            layers.push((Tensor::zeros(&[ch, h, w]), Tensor::zeros(&[ch, h, w])));
        }
        Ok(RecurrentState { layers })
    }
}

/// A normalized log-depth prediction in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPrediction {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthPrediction {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "prediction tensor must be rank-2, got {:?}",
                t.shape()
            )));
        }
        Ok(DepthPrediction {
            height: t.shape()[0],
            width: t.shape()[1],
            values: t.data().to_vec(),
        })
    }

    /// Dense depth map (every pixel valid) in normalized log-depth space.
    pub fn to_depth_map(&self) -> DepthMap {
        DepthMap::dense(self.height, self.width, self.values.clone())
            .expect("prediction buffers are consistent")
    }
}

struct EncoderLayer {
    down: ConvLayer,
    bn: BatchNormLayer,
    lstm: ConvLstmCell,
}

struct DecoderLayer {
    conv: ConvLayer,
    bn: BatchNormLayer,
}

/// Graph variables mirroring the network's parameters for one tape.
pub struct NetworkVars {
    head: ConvVars,
    head_bn: BnVars,
    encoders: Vec<(ConvVars, BnVars, LstmVars)>,
    res_blocks: Vec<ResidualVars>,
    decoders: Vec<(ConvVars, BnVars)>,
    pred: ConvVars,
}

/// Graph-side recurrent state: one (hidden, cell) pair per encoder.
pub type StateVars = Vec<(Var, Var)>;

pub struct Network {
    config: NetworkConfig,
    head: ConvLayer,
    head_bn: BatchNormLayer,
    encoders: Vec<EncoderLayer>,
    res_blocks: Vec<ResidualBlock>,
    decoders: Vec<DecoderLayer>,
    pred: ConvLayer,
}

impl Network {
    /// Builds the network with deterministic seeded initialization.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = config.base_channels;
        let head = ConvLayer::init("head.conv", config.input_bins, nb, 5, 1, &mut rng);
        let head_bn = BatchNormLayer::init("head.bn", nb);
        let mut encoders = Vec::with_capacity(config.num_encoders);
        for i in 0..config.num_encoders {
            let c_in = if i == 0 {
                nb
            } else {
                config.encoder_channels(i - 1)
            };
            let c_out = config.encoder_channels(i);
            encoders.push(EncoderLayer {
                down: ConvLayer::init(&format!("encoder{i}.down"), c_in, c_out, 5, 2, &mut rng),
                bn: BatchNormLayer::init(&format!("encoder{i}.bn"), c_out),
                lstm: ConvLstmCell::init(&format!("encoder{i}.lstm"), c_out, c_out, &mut rng),
            });
        }
        let cb = config.bottleneck_channels();
        let res_blocks = (0..config.num_residual_blocks)
            .map(|j| ResidualBlock::init(&format!("res{j}"), cb, &mut rng))
            .collect();
        let mut decoders = Vec::with_capacity(config.num_encoders);
        for j in 0..config.num_encoders {
            let c_in = nb << (config.num_encoders - j);
            let c_out = c_in / 2;
            decoders.push(DecoderLayer {
                conv: ConvLayer::init(&format!("decoder{j}.conv"), c_in, c_out, 5, 1, &mut rng),
                bn: BatchNormLayer::init(&format!("decoder{j}.bn"), c_out),
            });
        }
        let pred = ConvLayer::init("pred.conv", nb, 1, 1, 1, &mut rng);
        Ok(Network {
            config,
            head,
            head_bn,
            encoders,
            res_blocks,
            decoders,
            pred,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Every trainable parameter in canonical order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.head.params();
        p.extend(self.head_bn.params());
        for e in &self.encoders {
            p.extend(e.down.params());
            p.extend(e.bn.params());
            p.extend(e.lstm.params());
        }
        for r in &self.res_blocks {
            p.extend(r.params());
        }
        for d in &self.decoders {
            p.extend(d.conv.params());
            p.extend(d.bn.params());
        }
        p.extend(self.pred.params());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.head.params_mut();
        p.extend(self.head_bn.params_mut());
        for e in &mut self.encoders {
            p.extend(e.down.params_mut());
            p.extend(e.bn.params_mut());
            p.extend(e.lstm.params_mut());
        }
        for r in &mut self.res_blocks {
            p.extend(r.params_mut());
        }
        for d in &mut self.decoders {
            p.extend(d.conv.params_mut());
            p.extend(d.bn.params_mut());
        }
        p.extend(self.pred.params_mut());
        p
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        let mut b = vec![&mut self.head_bn];
        for e in &mut self.encoders {
            b.push(&mut e.bn);
        }
        for r in &mut self.res_blocks {
            b.push(&mut r.bn1);
            b.push(&mut r.bn2);
        }
        for d in &mut self.decoders {
            b.push(&mut d.bn);
        }
        b
    }

    fn bn_layers(&self) -> Vec<&BatchNormLayer> {
        let mut b = vec![&self.head_bn];
        for e in &self.encoders {
            b.push(&e.bn);
        }
        for r in &self.res_blocks {
            b.push(&r.bn1);
            b.push(&r.bn2);
        }
        for d in &self.decoders {
            b.push(&d.bn);
        }
        b
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Leafs every parameter into `g` once, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> NetworkVars {
        NetworkVars {
            head: self.head.bind(g, trainable),
            head_bn: self.head_bn.bind(g, trainable),
            encoders: self
                .encoders
                .iter()
                .map(|e| {
                    (
                        e.down.bind(g, trainable),
                        e.bn.bind(g, trainable),
                        e.lstm.bind(g, trainable),
                    )
                })
                .collect(),
            res_blocks: self.res_blocks.iter().map(|r| r.bind(g, trainable)).collect(),
            decoders: self
                .decoders
                .iter()
                .map(|d| (d.conv.bind(g, trainable), d.bn.bind(g, trainable)))
                .collect(),
            pred: self.pred.bind(g, trainable),
        }
    }

    /// Bound variables in the same order as [`Network::parameters`].
    pub fn var_list(vars: &NetworkVars) -> Vec<Var> {
        let mut v = ConvLayer::var_list(&vars.head);
        v.extend(BatchNormLayer::var_list(&vars.head_bn));
        for (down, bn, lstm) in &vars.encoders {
            v.extend(ConvLayer::var_list(down));
            v.extend(BatchNormLayer::var_list(bn));
            v.extend(ConvLstmCell::var_list(lstm));
        }
        for r in &vars.res_blocks {
            v.extend(ResidualBlock::var_list(r));
        }
        for (conv, bn) in &vars.decoders {
            v.extend(ConvLayer::var_list(conv));
            v.extend(BatchNormLayer::var_list(bn));
        }
        v.extend(ConvLayer::var_list(&vars.pred));
        v
    }

    /// Adds each bound variable's gradient into its parameter's grad slot.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &NetworkVars) {
        let var_list = Self::var_list(vars);
        for (param, var) in self.parameters_mut().into_iter().zip(var_list) {
            if let Some(grad) = g.grad(var) {
                for (dst, src) in param.grad.data_mut().iter_mut().zip(grad.data()) {
                    *dst += src;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    /// Folds recorded batch statistics into the layers' running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let mut layers = self.bn_layers_mut();
        for u in updates {
            for layer in layers.iter_mut() {
                if layer.name == u.layer {
                    layer.apply_update(u);
                    break;
                }
            }
        }
    }

    /// Zero recurrent state leafed into the graph as constants.
    pub fn zero_state_vars(&self, g: &mut Graph, height: usize, width: usize) -> Result<StateVars> {
        let state = RecurrentState::zeros(&self.config, height, width)?;
        Ok(state
            .layers
            .into_iter()
            .map(|(h, c)| (g.leaf(h, false), g.leaf(c, false)))
            .collect())
    }

    /// One window forward. Input is a `[bins, H, W]` variable; returns the
    /// `[H, W]` sigmoid prediction and the next state. In training mode, batch
    /// statistics land in `updates` for [`Network::apply_bn_updates`].
    pub fn forward_step(
        &self,
        g: &mut Graph,
        vars: &NetworkVars,
        input: Var,
        state: &StateVars,
        training: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Var, StateVars)> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.config.input_bins {
            return Err(Error::Shape(format!(
                "expected [{}, H, W] input, got {shape:?}",
                self.config.input_bins
            )));
        }
        let (height, width) = (shape[1], shape[2]);
        self.config.check_spatial(height, width)?;
        if state.len() != self.config.num_encoders {
            return Err(Error::Shape(format!(
                "state has {} layers, expected {}",
                state.len(),
                self.config.num_encoders
            )));
        }

        let x = self.head.forward(g, &vars.head, input)?;
        let x = self.head_bn.forward(g, &vars.head_bn, x, training, updates)?;
        let head_out = g.relu(x);

        let mut x = head_out;
        let mut new_state: StateVars = Vec::with_capacity(self.encoders.len());
        let mut skips: Vec<Var> = Vec::with_capacity(self.encoders.len());
        for (i, enc) in self.encoders.iter().enumerate() {
            let y = enc.down.forward(g, &vars.encoders[i].0, x)?;
            let y = enc.bn.forward(g, &vars.encoders[i].1, y, training, updates)?;
            let y = g.relu(y);
            let (h2, c2) = enc
                .lstm
                .step(g, &vars.encoders[i].2, y, state[i].0, state[i].1)?;
            new_state.push((h2, c2));
            skips.push(h2);
            x = h2;
        }

        for (r, rv) in self.res_blocks.iter().zip(&vars.res_blocks) {
            x = r.forward(g, rv, x, training, updates)?;
        }

        let n = self.config.num_encoders;
        for (j, dec) in self.decoders.iter().enumerate() {
            let y = g.upsample2(x)?;
            let y = dec.conv.forward(g, &vars.decoders[j].0, y)?;
            let y = dec.bn.forward(g, &vars.decoders[j].1, y, training, updates)?;
            let skip = if j + 2 <= n { skips[n - j - 2] } else { head_out };
            let y = g.add(y, skip)?;
            x = g.relu(y);
        }

        let y = self.pred.forward(g, &vars.pred, x)?;
        let y = g.sigmoid(y);
        let out = g.reshape(y, &[height, width])?;
        Ok((out, new_state))
    }

    /// Unrolls the network over a window sequence from zero state, keeping
    /// the whole tape connected for backpropagation through time.
    pub fn forward_sequence(
        &self,
        g: &mut Graph,
        vars: &NetworkVars,
        inputs: &[Var],
        training: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Err(Error::Config("forward_sequence needs at least one input".into()));
        };
        let shape = g.value(first).shape().to_vec();
        for &v in inputs {
            if g.value(v).shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "mixed input shapes in sequence: {:?} vs {:?}",
                    g.value(v).shape(),
                    shape
                )));
            }
        }
        let mut state = self.zero_state_vars(g, shape[1], shape[2])?;
        let mut outputs = Vec::with_capacity(inputs.len());
        for &input in inputs {
            let (out, next) = self.forward_step(g, vars, input, &state, training, updates)?;
            outputs.push(out);
            state = next;
        }
        Ok(outputs)
    }

    /// Streaming single-window inference: fresh tape per call, state carried
    /// as plain tensors. Safe to call from multiple threads on `&self`.
    pub fn predict_step(
        &self,
        grid: &VoxelGrid,
        state: &RecurrentState,
    ) -> Result<(DepthPrediction, RecurrentState)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let input = g.leaf(grid.to_tensor(), false);
        let sv: StateVars = state
            .layers
            .iter()
            .map(|(h, c)| (g.leaf(h.clone(), false), g.leaf(c.clone(), false)))
            .collect();
        let mut updates = Vec::new();
        let (out, new_sv) = self.forward_step(&mut g, &vars, input, &sv, false, &mut updates)?;
        let pred = DepthPrediction::from_tensor(g.value(out))?;
        let layers = new_sv
            .into_iter()
            .map(|(h, c)| (g.value(h).clone(), g.value(c).clone()))
            .collect();
        Ok((pred, RecurrentState { layers }))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes parameters plus batch-norm running statistics, with a JSON
    /// config sidecar for reload validation.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .parameters()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for bn in self.bn_layers() {
            entries.push((
                format!("{}.running_mean", bn.name),
                Tensor::new(vec![bn.running_mean.len()], bn.running_mean.clone())?,
            ));
            entries.push((
                format!("{}.running_var", bn.name),
                Tensor::new(vec![bn.running_var.len()], bn.running_var.clone())?,
            ));
        }
        let refs: Vec<(String, &Tensor)> =
            entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_named_tensors(path, &refs)?;

        let sidecar = Self::sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.config)
            .map_err(|e| Error::Config(format!("cannot encode network config: {e}")))?;
        std::fs::write(&sidecar, json)
            .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
        Ok(())
    }

    /// Rebuilds a network from a checkpoint and its config sidecar. Every
    /// stored entry must be consumed and every parameter filled.
    pub fn load(path: &Path) -> Result<Network> {
        let sidecar = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar)
            .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
        let config: NetworkConfig = serde_json::from_str(&text).map_err(|e| {
            Error::format(sidecar.display().to_string(), format!("bad config sidecar: {e}"))
        })?;
        let mut net = Network::init(config, 0)?;

        let mut entries: std::collections::HashMap<String, Tensor> =
            load_named_tensors(path)?.into_iter().collect();
        let display = path.display().to_string();
        for p in net.parameters_mut() {
            let Some(t) = entries.remove(&p.name) else {
                return Err(Error::format(&display, format!("missing parameter {}", p.name)));
            };
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    &display,
                    format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = t;
        }
        for bn in net.bn_layers_mut() {
            for (suffix, dst_len) in [("running_mean", 0usize), ("running_var", 1)] {
                let key = format!("{}.{}", bn.name, suffix);
                let Some(t) = entries.remove(&key) else {
                    return Err(Error::format(&display, format!("missing entry {key}")));
                };
                let dst = if dst_len == 0 {
                    &mut bn.running_mean
                } else {
                    &mut bn.running_var
                };
                if t.numel() != dst.len() {
                    return Err(Error::format(&display, format!("entry {key} has wrong length")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        if !entries.is_empty() {
            let mut names: Vec<&String> = entries.keys().collect();
            names.sort();
            return Err(Error::format(
                &display,
                format!("unexpected entries in checkpoint: {names:?}"),
            ));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            num_encoders: 2,
            num_residual_blocks: 1,
            base_channels: 2,
            input_bins: 3,
            unroll_length: 4,
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, bins: usize, h: usize, w: usize) -> Tensor {
        Tensor::new(
            vec![bins, h, w],
            (0..bins * h * w).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_config_parameter_count_is_frozen() {
        let net = Network::init(NetworkConfig::default(), 0).unwrap();
        // golden value recorded from the defining topology
        assert_eq!(net.num_parameters(), 10_713_857);
    }

    #[test]
    fn minimal_network_builds_and_runs() {
        let cfg = NetworkConfig {
            num_encoders: 1,
            num_residual_blocks: 0,
            base_channels: 4,
            input_bins: 5,
            unroll_length: 1,
        };
        let net = Network::init(cfg, 1).unwrap();
        let state = RecurrentState::zeros(&cfg, 8, 8).unwrap();
        let grid = VoxelGrid::zeros(5, 8, 8);
        let (pred, _) = net.predict_step(&grid, &state).unwrap();
        assert_eq!((pred.height, pred.width), (8, 8));
        assert!(pred.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn indivisible_dims_are_rejected() {
        let cfg = NetworkConfig::default();
        assert!(cfg.check_spatial(344, 256).is_ok());
        assert!(cfg.check_spatial(346, 260).is_err());
        assert!(RecurrentState::zeros(&cfg, 12, 16).is_err());
    }

    #[test]
    fn channel_and_resolution_schedule() {
        let cfg = tiny_config();
        let net = Network::init(cfg, 2).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let input = g.leaf(random_grid(&mut rng, 3, 16, 12), false);
        let state = net.zero_state_vars(&mut g, 16, 12).unwrap();
        // state shapes follow the doubling/halving schedule
        assert_eq!(g.value(state[0].0).shape(), &[4, 8, 6]);
        assert_eq!(g.value(state[1].0).shape(), &[8, 4, 3]);
        let mut updates = Vec::new();
        let (out, next) = net
            .forward_step(&mut g, &vars, input, &state, false, &mut updates)
            .unwrap();
        assert_eq!(g.value(out).shape(), &[16, 12]);
        for (a, b) in state.iter().zip(&next) {
            assert_eq!(g.value(a.0).shape(), g.value(b.0).shape());
            assert_eq!(g.value(a.1).shape(), g.value(b.1).shape());
        }
        assert!(g.value(out).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = tiny_config();
        let run = || {
            let net = Network::init(cfg, 7).unwrap();
            let state = RecurrentState::zeros(&cfg, 8, 8).unwrap();
            let grid = VoxelGrid::zeros(3, 8, 8);
            net.predict_step(&grid, &state).unwrap().0
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn state_evolves_between_identical_inputs() {
        let cfg = tiny_config();
        let net = Network::init(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let grid = VoxelGrid::from_data(
            3,
            8,
            8,
            (0..3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let s0 = RecurrentState::zeros(&cfg, 8, 8).unwrap();
        let (p1, s1) = net.predict_step(&grid, &s0).unwrap();
        let (p2, _) = net.predict_step(&grid, &s1).unwrap();
        let max_diff = p1
            .values
            .iter()
            .zip(&p2.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(
            max_diff > 1e-9,
            "recurrent state should change the output, max diff {max_diff}"
        );
    }

    #[test]
    fn sequence_order_matters() {
        let cfg = tiny_config();
        let net = Network::init(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let grids: Vec<Tensor> = (0..3).map(|_| random_grid(&mut rng, 3, 8, 8)).collect();

        let run = |order: &[usize]| {
            let mut g = Graph::new();
            let vars = net.bind(&mut g, false);
            let inputs: Vec<Var> = order
                .iter()
                .map(|&i| g.leaf(grids[i].clone(), false))
                .collect();
            let mut updates = Vec::new();
            let outs = net
                .forward_sequence(&mut g, &vars, &inputs, false, &mut updates)
                .unwrap();
            g.value(*outs.last().unwrap()).data().to_vec()
        };
        let forward = run(&[0, 1, 2]);
        let permuted = run(&[2, 1, 0]);
        let max_diff = forward
            .iter()
            .zip(&permuted)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-9, "permuting inputs should change outputs");
    }

    #[test]
    fn sequence_of_one_equals_single_step() {
        let cfg = tiny_config();
        let net = Network::init(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let grid = random_grid(&mut rng, 3, 8, 8);

        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let input = g.leaf(grid.clone(), false);
        let mut updates = Vec::new();
        let outs = net
            .forward_sequence(&mut g, &vars, &[input], false, &mut updates)
            .unwrap();

        let mut g2 = Graph::new();
        let vars2 = net.bind(&mut g2, false);
        let input2 = g2.leaf(grid, false);
        let state = net.zero_state_vars(&mut g2, 8, 8).unwrap();
        let (out2, _) = net
            .forward_step(&mut g2, &vars2, input2, &state, false, &mut updates)
            .unwrap();
        assert_eq!(g.value(outs[0]).data(), g2.value(out2).data());
    }

    #[test]
    fn forward_sequence_rejects_mixed_shapes() {
        let cfg = tiny_config();
        let net = Network::init(cfg, 6).unwrap();
        let mut g = Graph::new();
        let vars = net.bind(&mut g, false);
        let a = g.leaf(Tensor::zeros(&[3, 8, 8]), false);
        let b = g.leaf(Tensor::zeros(&[3, 16, 8]), false);
        let mut updates = Vec::new();
        assert!(matches!(
            net.forward_sequence(&mut g, &vars, &[a, b], false, &mut updates),
            Err(crate::Error::Shape(_))
        ));
    }

    /// Rebuilds the forward pass from the public layer primitives, once with
    /// the skip sums and once without, verifying both the documented wiring
    /// and that the skips carry signal.
    #[test]
    fn skip_connections_are_wired_and_load_bearing() {
        let cfg = tiny_config();
        let net = Network::init(cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let grid = random_grid(&mut rng, 3, 8, 8);

        let state = RecurrentState::zeros(&cfg, 8, 8).unwrap();
        let (reference, _) = net
            .predict_step(
                &VoxelGrid::from_data(3, 8, 8, grid.data().to_vec()).unwrap(),
                &state,
            )
            .unwrap();

        let manual = |with_skips: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let vars = net.bind(&mut g, false);
            let input = g.leaf(grid.clone(), false);
            let sv = net.zero_state_vars(&mut g, 8, 8).unwrap();
            let mut updates = Vec::new();
            let x = net.head.forward(&mut g, &vars.head, input).unwrap();
            let x = net
                .head_bn
                .forward(&mut g, &vars.head_bn, x, false, &mut updates)
                .unwrap();
            let head_out = g.relu(x);
            let mut x = head_out;
            let mut skips = Vec::new();
            for (i, enc) in net.encoders.iter().enumerate() {
                let y = enc.down.forward(&mut g, &vars.encoders[i].0, x).unwrap();
                let y = enc
                    .bn
                    .forward(&mut g, &vars.encoders[i].1, y, false, &mut updates)
                    .unwrap();
                let y = g.relu(y);
                let (h2, _) = enc
                    .lstm
                    .step(&mut g, &vars.encoders[i].2, y, sv[i].0, sv[i].1)
                    .unwrap();
                skips.push(h2);
                x = h2;
            }
            for (r, rv) in net.res_blocks.iter().zip(&vars.res_blocks) {
                x = r.forward(&mut g, rv, x, false, &mut updates).unwrap();
            }
            let n = cfg.num_encoders;
            for (j, dec) in net.decoders.iter().enumerate() {
                let y = g.upsample2(x).unwrap();
                let y = dec.conv.forward(&mut g, &vars.decoders[j].0, y).unwrap();
                let y = dec
                    .bn
                    .forward(&mut g, &vars.decoders[j].1, y, false, &mut updates)
                    .unwrap();
                let y = if with_skips {
                    let skip = if j + 2 <= n { skips[n - j - 2] } else { head_out };
                    g.add(y, skip).unwrap()
                } else {
                    y
                };
                x = g.relu(y);
            }
            let y = net.pred.forward(&mut g, &vars.pred, x).unwrap();
            let y = g.sigmoid(y);
            g.value(y).data().to_vec()
        };

        let with_skips = manual(true);
        for (a, e) in with_skips.iter().zip(&reference.values) {
            assert_eq!(a.to_bits(), e.to_bits(), "manual wiring must match forward_step");
        }
        let without = manual(false);
        let max_diff = with_skips
            .iter()
            .zip(&without)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 1e-9, "zeroed skips must change decoder outputs");
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_outputs() {
        let cfg = tiny_config();
        let mut net = Network::init(cfg, 9).unwrap();
        // perturb running stats so the roundtrip covers them
        {
            let mut g = Graph::new();
            let vars = net.bind(&mut g, false);
            let mut rng = ChaCha8Rng::seed_from_u64(45);
            let input = g.leaf(random_grid(&mut rng, 3, 8, 8), false);
            let state = net.zero_state_vars(&mut g, 8, 8).unwrap();
            let mut updates = Vec::new();
            net.forward_step(&mut g, &vars, input, &state, true, &mut updates)
                .unwrap();
            net.apply_bn_updates(&updates);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.e2dw");
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(loaded.num_parameters(), net.num_parameters());

        let grid = VoxelGrid::zeros(3, 8, 8);
        let state = RecurrentState::zeros(&cfg, 8, 8).unwrap();
        let a = net.predict_step(&grid, &state).unwrap().0;
        let b = loaded.predict_step(&grid, &state).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        use crate::gradcheck::{finite_diff_grad, max_rel_err};
        use crate::losses::sequence_loss_graph;

        let cfg = NetworkConfig {
            num_encoders: 2,
            num_residual_blocks: 1,
            base_channels: 2,
            input_bins: 2,
            unroll_length: 2,
        };
        let net = Network::init(cfg, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let (h, w) = (8usize, 8usize);
        let grids: Vec<Tensor> = (0..2).map(|_| random_grid(&mut rng, 2, h, w)).collect();
        let gt = DepthMap::new(
            h,
            w,
            (0..h * w).map(|_| rng.gen_range(0.2..0.8)).collect(),
            (0..h * w).map(|_| rng.gen::<f64>() > 0.1).collect(),
        )
        .unwrap();

        // loss as a function of one flattened parameter vector
        let run = |theta: &[f64], want_grads: bool| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let mut offset = 0usize;
            // bind parameters manually from theta, preserving order
            let mut clone = Network::init(cfg, 10).unwrap();
            for p in clone.parameters_mut() {
                let n = p.value.numel();
                p.value
                    .data_mut()
                    .copy_from_slice(&theta[offset..offset + n]);
                offset += n;
            }
            let vars = clone.bind(&mut g, true);
            let inputs: Vec<Var> = grids.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let mut updates = Vec::new();
            let outs = clone
                .forward_sequence(&mut g, &vars, &inputs, true, &mut updates)
                .unwrap();
            let items: Vec<(Var, &DepthMap)> = outs.iter().map(|&o| (o, &gt)).collect();
            let (loss, _) = sequence_loss_graph(&mut g, &items, 0.5, 2).unwrap();
            let val = g.value(loss).scalar_value().unwrap();
            if !want_grads {
                return (val, None);
            }
            g.backward(loss).unwrap();
            let mut grads = Vec::with_capacity(theta.len());
            for var in Network::var_list(&vars) {
                match g.grad(var) {
                    Some(t) => grads.extend_from_slice(t.data()),
                    None => grads.extend(std::iter::repeat_n(0.0, g.value(var).numel())),
                }
            }
            (val, Some(grads))
        };

        let theta: Vec<f64> = net
            .parameters()
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        let (_, analytic) = run(&theta, true);
        let analytic = analytic.unwrap();

        // probe a deterministic subset of coordinates; full FD would be slow
        let mut probe_idx: Vec<usize> = Vec::new();
        let stride = (theta.len() / 60).max(1);
        let mut i = 0;
        while i < theta.len() {
            probe_idx.push(i);
            i += stride;
        }
        let sub_theta: Vec<f64> = probe_idx.iter().map(|&i| theta[i]).collect();
        let numeric_sub = finite_diff_grad(
            |sub| {
                let mut full = theta.clone();
                for (k, &i) in probe_idx.iter().enumerate() {
                    full[i] = sub[k];
                }
                run(&full, false).0
            },
            &sub_theta,
            1e-5,
        );
        let analytic_sub: Vec<f64> = probe_idx.iter().map(|&i| analytic[i]).collect();
        let err = max_rel_err(&analytic_sub, &numeric_sub);
        assert!(err < 1e-3, "end-to-end max relative error {err}");
    }
}
