//! Layer building blocks: convolution, batch normalization, ConvLSTM cells,
//! and residual blocks, each holding its parameters plus a mirror struct of
//! graph variables produced by `bind`.
//!
//! Binding leafs every parameter into a graph once; the same bound variables
//! are then reused across all steps of an unrolled sequence so gradients
//! accumulate over time. Training-mode batch norm does not mutate the layer
//! during the forward pass; it records a [`BnUpdate`] that the owner folds
//! into the running statistics afterwards, which keeps inference `&self`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Parameter, Tensor, Var};

/// Kaiming-uniform fan-in initialization for a conv weight `[Cout,Cin,k,k]`,
/// with the `1/sqrt(fan_in)` bound convention.
fn kaiming_uniform(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    let bound = (1.0 / fan_in).sqrt();
    let n = c_out * c_in * k * k;
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![c_out, c_in, k, k], data).expect("consistent dims")
}

/// Batch statistics observed by one batch-norm layer during a training
/// forward pass, keyed by layer name.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl ConvLayer {
    pub fn init(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvLayer {
            weight: Parameter::new(format!("{name}.weight"), kaiming_uniform(rng, c_out, c_in, k)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            padding: k / 2,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ConvVars {
        ConvVars {
            weight: g.leaf(self.weight.value.clone(), trainable),
            bias: g.leaf(self.bias.value.clone(), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &ConvVars, x: Var) -> Result<Var> {
        g.conv2d(x, vars.weight, vars.bias, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn var_list(vars: &ConvVars) -> Vec<Var> {
        vec![vars.weight, vars.bias]
    }
}

pub struct BatchNormLayer {
    pub name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Copy)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

impl BatchNormLayer {
    pub fn init(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BnVars {
        BnVars {
            gamma: g.leaf(self.gamma.value.clone(), trainable),
            beta: g.leaf(self.beta.value.clone(), trainable),
        }
    }

    /// Training mode normalizes with batch statistics and records them in
    /// `updates`; eval mode uses the frozen running statistics.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &BnVars,
        x: Var,
        training: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        if training {
            let (y, mean, var) = g.batch_norm_train(x, vars.gamma, vars.beta, self.eps)?;
            updates.push(BnUpdate {
                layer: self.name.clone(),
                mean,
                var,
            });
            Ok(y)
        } else {
            g.batch_norm_eval(
                x,
                vars.gamma,
                vars.beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            )
        }
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn apply_update(&mut self, update: &BnUpdate) {
        for (r, m) in self.running_mean.iter_mut().zip(&update.mean) {
            *r = (1.0 - self.momentum) * *r + self.momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&update.var) {
            *r = (1.0 - self.momentum) * *r + self.momentum * v;
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn var_list(vars: &BnVars) -> Vec<Var> {
        vec![vars.gamma, vars.beta]
    }
}

/// ConvLSTM cell: the four gates come from one convolution over the channel
/// concatenation of input and hidden state, sliced in (i, f, o, g) order.
/// No peephole connections. The forget-gate bias starts at +1.
pub struct ConvLstmCell {
    pub conv: ConvLayer,
    pub hidden: usize,
}

#[derive(Clone, Copy)]
pub struct LstmVars {
    pub conv: ConvVars,
}

impl ConvLstmCell {
    pub fn init(name: &str, c_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut conv =
            ConvLayer::init(&format!("{name}.gates"), c_in + hidden, 4 * hidden, 3, 1, rng);
        for b in conv.bias.value.data_mut()[hidden..2 * hidden].iter_mut() {
            *b = 1.0;
        }
        ConvLstmCell { conv, hidden }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LstmVars {
        LstmVars {
            conv: self.conv.bind(g, trainable),
        }
    }

    /// One gating step; `h` and `c` must share the input's spatial dims.
    pub fn step(
        &self,
        g: &mut Graph,
        vars: &LstmVars,
        input: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let (si, sh) = (g.value(input).shape(), g.value(h).shape());
        if si.len() != 3 || sh.len() != 3 || si[1..] != sh[1..] {
            return Err(Error::Shape(format!(
                "convlstm spatial mismatch: input {si:?} vs state {sh:?}"
            )));
        }
        let ch = self.hidden;
        let xh = g.concat_ch(input, h)?;
        let gates = self.conv.forward(g, &vars.conv, xh)?;
        let i_raw = g.slice_ch(gates, 0, ch)?;
        let f_raw = g.slice_ch(gates, ch, 2 * ch)?;
        let o_raw = g.slice_ch(gates, 2 * ch, 3 * ch)?;
        let g_raw = g.slice_ch(gates, 3 * ch, 4 * ch)?;
        let i_gate = g.sigmoid(i_raw);
        let f_gate = g.sigmoid(f_raw);
        let o_gate = g.sigmoid(o_raw);
        let g_gate = g.tanh(g_raw);
        let fc = g.mul(f_gate, c)?;
        let ig = g.mul(i_gate, g_gate)?;
        let c_next = g.add(fc, ig)?;
        let c_act = g.tanh(c_next);
        let h_next = g.mul(o_gate, c_act)?;
        Ok((h_next, c_next))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.conv.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.conv.params_mut()
    }

    pub fn var_list(vars: &LstmVars) -> Vec<Var> {
        ConvLayer::var_list(&vars.conv)
    }
}

/// conv(k3) -> BN -> ReLU -> conv(k3) -> BN -> add input -> ReLU.
pub struct ResidualBlock {
    pub conv1: ConvLayer,
    pub bn1: BatchNormLayer,
    pub conv2: ConvLayer,
    pub bn2: BatchNormLayer,
}

#[derive(Clone, Copy)]
pub struct ResidualVars {
    pub conv1: ConvVars,
    pub bn1: BnVars,
    pub conv2: ConvVars,
    pub bn2: BnVars,
}

impl ResidualBlock {
    pub fn init(name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            conv1: ConvLayer::init(&format!("{name}.conv1"), channels, channels, 3, 1, rng),
            bn1: BatchNormLayer::init(&format!("{name}.bn1"), channels),
            conv2: ConvLayer::init(&format!("{name}.conv2"), channels, channels, 3, 1, rng),
            bn2: BatchNormLayer::init(&format!("{name}.bn2"), channels),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ResidualVars {
        ResidualVars {
            conv1: self.conv1.bind(g, trainable),
            bn1: self.bn1.bind(g, trainable),
            conv2: self.conv2.bind(g, trainable),
            bn2: self.bn2.bind(g, trainable),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &ResidualVars,
        x: Var,
        training: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let y = self.conv1.forward(g, &vars.conv1, x)?;
        let y = self.bn1.forward(g, &vars.bn1, y, training, updates)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, &vars.conv2, y)?;
        let y = self.bn2.forward(g, &vars.bn2, y, training, updates)?;
        let y = g.add(y, x)?;
        Ok(g.relu(y))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.conv1.params();
        p.extend(self.bn1.params());
        p.extend(self.conv2.params());
        p.extend(self.bn2.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        p
    }

    pub fn var_list(vars: &ResidualVars) -> Vec<Var> {
        let mut v = ConvLayer::var_list(&vars.conv1);
        v.extend(BatchNormLayer::var_list(&vars.bn1));
        v.extend(ConvLayer::var_list(&vars.conv2));
        v.extend(BatchNormLayer::var_list(&vars.bn2));
        v
    }
}
