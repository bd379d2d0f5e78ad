//! Bidirectional LSTM with additive attention and a two-layer classifier head.
//!
//! ```text
//! x (l x D) -> forward LSTM  h_t ┐
//!           -> backward LSTM ĥ_t ┴ O_t = [h_t, ĥ_t]
//! u_t = tanh(O_t W)      a*_t = u_t · proj      a = softmax(a*)
//! context = Σ a_t O_t -> tanh(W1 context + b1) -> dropout -> W2 · + b2 -> softmax
//! ```
//!
//! Forward and backward passes are written out by hand; gradients are checked
//! against central finite differences in the tests.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at batch item {index}")]
    NonFiniteLoss { index: usize },
    #[error("target class {target} outside 0..{classes}")]
    Target { target: usize, classes: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged { epoch: usize, batch: usize, source: NetError, history: Vec<EpochRecord> },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// How the sequence of states is reduced to one context vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Attention,
    /// Final forward state, concatenated with the backward state at the first step.
    LastState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_size: usize,
    pub sequence_length: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Width of the attention transform; defaults to the state width.
    pub attention_dim: Option<usize>,
    pub fc_hidden: usize,
    pub bidirectional: bool,
    pub readout: Readout,
    /// Evaluate batch members on the rayon pool; reduction order stays fixed.
    pub parallel: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 61,
            hidden_size: 128,
            sequence_length: 16,
            num_classes: 6,
            dropout_rate: 0.5,
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 50,
            seed: 0,
            attention_dim: None,
            fc_hidden: 64,
            bidirectional: true,
            readout: Readout::Attention,
            parallel: false,
        }
    }
}

impl NetConfig {
    pub fn state_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden_size
        } else {
            self.hidden_size
        }
    }

    pub fn attention_width(&self) -> usize {
        self.attention_dim.unwrap_or_else(|| self.state_dim())
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let sizes = [
            ("input_dim", self.input_dim),
            ("hidden_size", self.hidden_size),
            ("sequence_length", self.sequence_length),
            ("num_classes", self.num_classes),
            ("batch_size", self.batch_size),
            ("fc_hidden", self.fc_hidden),
            ("attention_dim", self.attention_width()),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(NetError::Config(format!("{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(NetError::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NetError::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        Ok(())
    }
}

/// One LSTM direction. Gate blocks are stacked in the order input, forget,
/// cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// `4H x D`
    pub w_input: Vec<f64>,
    /// `4H x H`
    pub w_hidden: Vec<f64>,
    /// `4H`
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FearNetParams {
    pub forward: LstmParams,
    pub backward: Option<LstmParams>,
    /// `S x A` where S is the state width; empty for last-state readout.
    pub attention_w: Vec<f64>,
    /// `A`
    pub attention_proj: Vec<f64>,
    /// `F x S`
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    /// `C x F`
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

/// Named parameter group with its declared shape.
pub struct Group<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl FearNetParams {
    /// Uniform ±1/sqrt(fan_in) initialization; forget-gate biases start at 1.
    pub fn init(config: &NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::init_with(config, &mut rng))
    }

    pub fn init_with<R: Rng>(config: &NetConfig, rng: &mut R) -> Self {
        let h = config.hidden_size;
        let d = config.input_dim;
        let s = config.state_dim();
        let a = config.attention_width();
        let f = config.fc_hidden;
        let c = config.num_classes;
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let lstm = |uniform: &mut dyn FnMut(usize, usize) -> Vec<f64>| {
            let mut bias = uniform(4 * h, h);
            bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
            LstmParams { w_input: uniform(4 * h * d, d), w_hidden: uniform(4 * h * h, h), bias }
        };
        let forward = lstm(&mut uniform);
        let backward = config.bidirectional.then(|| lstm(&mut uniform));
        let (attention_w, attention_proj) = match config.readout {
            Readout::Attention => (uniform(s * a, s), uniform(a, a)),
            Readout::LastState => (Vec::new(), Vec::new()),
        };
        Self {
            forward,
            backward,
            attention_w,
            attention_proj,
            fc1_w: uniform(f * s, s),
            fc1_b: uniform(f, s),
            fc2_w: uniform(c * f, f),
            fc2_b: uniform(c, f),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        let zl = |l: &LstmParams| LstmParams { w_input: z(&l.w_input), w_hidden: z(&l.w_hidden), bias: z(&l.bias) };
        Self {
            forward: zl(&self.forward),
            backward: self.backward.as_ref().map(zl),
            attention_w: z(&self.attention_w),
            attention_proj: z(&self.attention_proj),
            fc1_w: z(&self.fc1_w),
            fc1_b: z(&self.fc1_b),
            fc2_w: z(&self.fc2_w),
            fc2_b: z(&self.fc2_b),
        }
    }

    /// Parameter groups in a fixed order.
    pub fn groups(&self, config: &NetConfig) -> Vec<Group<'_>> {
        let (h, d, s, a, f, c) = dims(config);
        let mut out = vec![
            Group { name: "forward.w_input", shape: vec![4 * h, d], data: &self.forward.w_input },
            Group { name: "forward.w_hidden", shape: vec![4 * h, h], data: &self.forward.w_hidden },
            Group { name: "forward.bias", shape: vec![4 * h], data: &self.forward.bias },
        ];
        if let Some(b) = &self.backward {
            out.push(Group { name: "backward.w_input", shape: vec![4 * h, d], data: &b.w_input });
            out.push(Group { name: "backward.w_hidden", shape: vec![4 * h, h], data: &b.w_hidden });
            out.push(Group { name: "backward.bias", shape: vec![4 * h], data: &b.bias });
        }
        if config.readout == Readout::Attention {
            out.push(Group { name: "attention.weight_w", shape: vec![s, a], data: &self.attention_w });
            out.push(Group { name: "attention.weight_proj", shape: vec![a, 1], data: &self.attention_proj });
        }
        out.extend([
            Group { name: "fc1.weight", shape: vec![f, s], data: &self.fc1_w },
            Group { name: "fc1.bias", shape: vec![f], data: &self.fc1_b },
            Group { name: "fc2.weight", shape: vec![c, f], data: &self.fc2_w },
            Group { name: "fc2.bias", shape: vec![c], data: &self.fc2_b },
        ]);
        out
    }

    /// Mutable views in the same order as [`FearNetParams::groups`].
    pub fn groups_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.forward.w_input, &mut self.forward.w_hidden, &mut self.forward.bias];
        if let Some(b) = &mut self.backward {
            out.extend([&mut b.w_input, &mut b.w_hidden, &mut b.bias]);
        }
        if !self.attention_w.is_empty() {
            out.push(&mut self.attention_w);
            out.push(&mut self.attention_proj);
        }
        out.extend([&mut self.fc1_w, &mut self.fc1_b, &mut self.fc2_w, &mut self.fc2_b]);
        out
    }

    pub fn check_shapes(&self, config: &NetConfig) -> Result<(), NetError> {
        if self.backward.is_some() != config.bidirectional {
            return Err(NetError::Shape("backward direction presence does not match config".into()));
        }
        if (config.readout == Readout::Attention) == self.attention_w.is_empty() {
            return Err(NetError::Shape("attention parameters do not match readout".into()));
        }
        for g in self.groups(config) {
            let want: usize = g.shape.iter().product();
            if g.data.len() != want {
                return Err(NetError::Shape(format!("{} has {} values, expected {:?}", g.name, g.data.len(), g.shape)));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(NetError::Shape(format!("{} contains non-finite values", g.name)));
            }
        }
        Ok(())
    }

    /// Read-only views in the same order as [`FearNetParams::groups_mut`].
    pub fn groups_ref(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.forward.w_input, &self.forward.w_hidden, &self.forward.bias];
        if let Some(b) = &self.backward {
            out.extend([&b.w_input, &b.w_hidden, &b.bias]);
        }
        if !self.attention_w.is_empty() {
            out.push(&self.attention_w);
            out.push(&self.attention_proj);
        }
        out.extend([&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.groups_ref().iter().map(|g| g.len()).sum()
    }

    fn add_assign(&mut self, other: &FearNetParams) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn dims(config: &NetConfig) -> (usize, usize, usize, usize, usize, usize) {
    (
        config.hidden_size,
        config.input_dim,
        config.state_dim(),
        config.attention_width(),
        config.fc_hidden,
        config.num_classes,
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = W x` for row-major `W` of shape `rows x x.len()`.
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ y` for row-major `W` of shape `y.len() x out.len()`.
fn matvec_t_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if *yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * yi;
        }
    }
}

/// `g += y ⊗ x` for row-major `g` of shape `y.len() x x.len()`.
fn outer_add(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if *yi == 0.0 {
            continue;
        }
        for (gv, xv) in row.iter_mut().zip(x) {
            *gv += yi * xv;
        }
    }
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Activations of one LSTM direction, indexed by processing step.
struct LstmTrace {
    /// Sequence position processed at each step.
    order: Vec<usize>,
    gates: Vec<[Vec<f64>; 4]>,
    cells: Vec<Vec<f64>>,
    cell_tanh: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

fn lstm_run(p: &LstmParams, x: &[f64], d: usize, h: usize, order: Vec<usize>) -> LstmTrace {
    let steps = order.len();
    let mut trace = LstmTrace {
        order,
        gates: Vec::with_capacity(steps),
        cells: Vec::with_capacity(steps),
        cell_tanh: Vec::with_capacity(steps),
        hidden: Vec::with_capacity(steps),
    };
    let mut z = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for k in 0..steps {
        let t = trace.order[k];
        let (h_prev, c_prev) = if k == 0 { (&zeros, &zeros) } else { (&trace.hidden[k - 1], &trace.cells[k - 1]) };
        z.copy_from_slice(&p.bias);
        matvec_add(&p.w_input, &x[t * d..(t + 1) * d], &mut z);
        matvec_add(&p.w_hidden, h_prev, &mut z);
        let i: Vec<f64> = z[..h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[h..2 * h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * h..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let ct: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let hn: Vec<f64> = (0..h).map(|j| o[j] * ct[j]).collect();
        trace.gates.push([i, f, g, o]);
        trace.cells.push(c);
        trace.cell_tanh.push(ct);
        trace.hidden.push(hn);
    }
    trace
}

/// Accumulates parameter gradients given `d_hidden[k]`, the loss gradient
/// w.r.t. the hidden state emitted at step `k`.
fn lstm_backprop(p: &LstmParams, grad: &mut LstmParams, trace: &LstmTrace, x: &[f64], d: usize, h: usize, d_hidden: &[Vec<f64>]) {
    let steps = trace.order.len();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for k in (0..steps).rev() {
        let t = trace.order[k];
        let [i, f, g, o] = &trace.gates[k];
        let ct = &trace.cell_tanh[k];
        let (h_prev, c_prev) = if k == 0 { (&zeros, &zeros) } else { (&trace.hidden[k - 1], &trace.cells[k - 1]) };
        for j in 0..h {
            let dh = d_hidden[k][j] + dh_next[j];
            let d_o = dh * ct[j];
            let dc = dh * o[j] * (1.0 - ct[j] * ct[j]) + dc_next[j];
            let d_i = dc * g[j];
            let d_g = dc * i[j];
            let d_f = dc * c_prev[j];
            dc_next[j] = dc * f[j];
            dz[j] = d_i * i[j] * (1.0 - i[j]);
            dz[h + j] = d_f * f[j] * (1.0 - f[j]);
            dz[2 * h + j] = d_g * (1.0 - g[j] * g[j]);
            dz[3 * h + j] = d_o * o[j] * (1.0 - o[j]);
        }
        outer_add(&mut grad.w_input, &dz, &x[t * d..(t + 1) * d]);
        outer_add(&mut grad.w_hidden, &dz, h_prev);
        for (b, v) in grad.bias.iter_mut().zip(&dz) {
            *b += v;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(&p.w_hidden, &dz, &mut dh_next);
    }
}

fn check_input(x: &[f64], config: &NetConfig) -> Result<(), NetError> {
    let want = config.sequence_length * config.input_dim;
    if x.len() != want {
        return Err(NetError::Shape(format!(
            "input has {} values, expected {} x {}",
            x.len(),
            config.sequence_length,
            config.input_dim
        )));
    }
    Ok(())
}

struct EncoderTrace {
    forward: LstmTrace,
    backward: Option<LstmTrace>,
    states: Vec<Vec<f64>>,
}

fn encode(x: &[f64], params: &FearNetParams, config: &NetConfig) -> EncoderTrace {
    let (h, d, ..) = dims(config);
    let l = config.sequence_length;
    let forward = lstm_run(&params.forward, x, d, h, (0..l).collect());
    let backward = params.backward.as_ref().map(|p| lstm_run(p, x, d, h, (0..l).rev().collect()));
    let states = (0..l)
        .map(|t| {
            let mut s = forward.hidden[t].clone();
            if let Some(b) = &backward {
                s.extend_from_slice(&b.hidden[l - 1 - t]);
            }
            s
        })
        .collect();
    EncoderTrace { forward, backward, states }
}

/// BLSTM states `O_t` (one row per time step) from zero initial states.
pub fn blstm_forward(x: &[f64], params: &FearNetParams, config: &NetConfig) -> Result<Vec<Vec<f64>>, NetError> {
    check_input(x, config)?;
    Ok(encode(x, params, config).states)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub raw_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
    #[serde(skip)]
    pub intermediate: Vec<Vec<f64>>,
}

/// `u_t = tanh(O_t W)`, `a*_t = u_t · proj`, softmax over steps, weighted sum of states.
pub fn attention(states: &[Vec<f64>], weight_w: &[f64], weight_proj: &[f64]) -> Result<AttentionTrace, NetError> {
    let a = weight_proj.len();
    let s = states.first().map_or(0, Vec::len);
    if states.is_empty() || a == 0 || weight_w.len() != s * a || states.iter().any(|o| o.len() != s) {
        return Err(NetError::Shape(format!(
            "attention over {} states of width {s} with {} x {a} transform",
            states.len(),
            weight_w.len() / a.max(1)
        )));
    }
    let intermediate: Vec<Vec<f64>> = states
        .iter()
        .map(|o| {
            let mut u = vec![0.0; a];
            matvec_t_add(weight_w, o, &mut u);
            u.iter_mut().for_each(|v| *v = v.tanh());
            u
        })
        .collect();
    let raw_scores: Vec<f64> = intermediate.iter().map(|u| u.iter().zip(weight_proj).map(|(x, y)| x * y).sum()).collect();
    let weights = softmax(&raw_scores);
    let mut context = vec![0.0; s];
    for (w, o) in weights.iter().zip(states) {
        for (c, v) in context.iter_mut().zip(o) {
            *c += w * v;
        }
    }
    Ok(AttentionTrace { raw_scores, weights, context, intermediate })
}

fn readout(trace: &EncoderTrace, params: &FearNetParams, config: &NetConfig) -> Result<(Vec<f64>, Option<AttentionTrace>), NetError> {
    match config.readout {
        Readout::Attention => {
            let at = attention(&trace.states, &params.attention_w, &params.attention_proj)?;
            Ok((at.context.clone(), Some(at)))
        }
        Readout::LastState => {
            let h = config.hidden_size;
            let l = config.sequence_length;
            let mut ctx = trace.states[l - 1][..h].to_vec();
            if config.bidirectional {
                ctx.extend_from_slice(&trace.states[0][h..]);
            }
            Ok((ctx, None))
        }
    }
}

/// Inverted-dropout mask: each unit kept with probability `1 - rate` and scaled by `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(rng: &mut R, width: usize, rate: f64) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; width];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..width).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// FC -> tanh -> dropout (only when a mask is given) -> FC -> softmax.
pub fn classify(context: &[f64], params: &FearNetParams, config: &NetConfig, mask: Option<&[f64]>) -> Result<ClassifierOutput, NetError> {
    let (_, _, s, _, f, c) = dims(config);
    if context.len() != s {
        return Err(NetError::Shape(format!("context width {} expected {s}", context.len())));
    }
    let mut hidden = params.fc1_b.clone();
    matvec_add(&params.fc1_w, context, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = v.tanh());
    let dropped: Vec<f64> = match mask {
        Some(m) if m.len() == f => hidden.iter().zip(m).map(|(a, b)| a * b).collect(),
        Some(m) => return Err(NetError::Shape(format!("dropout mask width {} expected {f}", m.len()))),
        None => hidden.clone(),
    };
    let mut logits = vec![0.0; c];
    matvec(&params.fc2_w, &dropped, &mut logits);
    for (l, b) in logits.iter_mut().zip(&params.fc2_b) {
        *l += b;
    }
    let probabilities = softmax(&logits);
    Ok(ClassifierOutput { hidden, logits, probabilities })
}

/// One labelled sequence: `sequence_length x input_dim` row-major features.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub target: usize,
}

/// Loss of one example and, when requested, its gradient accumulated into `grad`.
fn example_loss(
    ex: &Example<'_>,
    params: &FearNetParams,
    config: &NetConfig,
    mask: Option<&[f64]>,
    grad: Option<(&mut FearNetParams, f64)>,
) -> Result<f64, NetError> {
    check_input(ex.features, config)?;
    if ex.target >= config.num_classes {
        return Err(NetError::Target { target: ex.target, classes: config.num_classes });
    }
    let trace = encode(ex.features, params, config);
    let (context, at) = readout(&trace, params, config)?;
    let out = classify(&context, params, config, mask)?;
    let loss = -out.probabilities[ex.target].ln();
    let Some((grad, weight)) = grad else { return Ok(loss) };

    let (h, d, s, a, f, _) = dims(config);
    let l = config.sequence_length;
    let dropped: Vec<f64> = match mask {
        Some(m) => out.hidden.iter().zip(m).map(|(x, y)| x * y).collect(),
        None => out.hidden.clone(),
    };
    let mut d_logits = out.probabilities.clone();
    d_logits[ex.target] -= 1.0;
    d_logits.iter_mut().for_each(|v| *v *= weight);
    outer_add(&mut grad.fc2_w, &d_logits, &dropped);
    for (b, v) in grad.fc2_b.iter_mut().zip(&d_logits) {
        *b += v;
    }
    let mut d_hidden = vec![0.0; f];
    matvec_t_add(&params.fc2_w, &d_logits, &mut d_hidden);
    if let Some(m) = mask {
        d_hidden.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    let d_pre1: Vec<f64> = d_hidden.iter().zip(&out.hidden).map(|(g, y)| g * (1.0 - y * y)).collect();
    outer_add(&mut grad.fc1_w, &d_pre1, &context);
    for (b, v) in grad.fc1_b.iter_mut().zip(&d_pre1) {
        *b += v;
    }
    let mut d_context = vec![0.0; s];
    matvec_t_add(&params.fc1_w, &d_pre1, &mut d_context);

    let mut d_states = vec![vec![0.0; s]; l];
    match (config.readout, at) {
        (Readout::Attention, Some(at)) => {
            let d_weights: Vec<f64> =
                trace.states.iter().map(|o| o.iter().zip(&d_context).map(|(x, y)| x * y).sum()).collect();
            let dot: f64 = at.weights.iter().zip(&d_weights).map(|(x, y)| x * y).sum();
            for t in 0..l {
                let w_t = at.weights[t];
                for (ds, dc) in d_states[t].iter_mut().zip(&d_context) {
                    *ds += w_t * dc;
                }
                let d_score = w_t * (d_weights[t] - dot);
                let u = &at.intermediate[t];
                let mut d_pre = vec![0.0; a];
                for j in 0..a {
                    grad.attention_proj[j] += d_score * u[j];
                    d_pre[j] = d_score * params.attention_proj[j] * (1.0 - u[j] * u[j]);
                }
                // u = Oᵀ W with W of shape S x A
                outer_add(&mut grad.attention_w, &trace.states[t], &d_pre);
                matvec_add(&params.attention_w, &d_pre, &mut d_states[t]);
            }
        }
        _ => {
            for (ds, dc) in d_states[l - 1][..h].iter_mut().zip(&d_context[..h]) {
                *ds += dc;
            }
            if config.bidirectional {
                for (ds, dc) in d_states[0][h..].iter_mut().zip(&d_context[h..]) {
                    *ds += dc;
                }
            }
        }
    }

    let d_fwd: Vec<Vec<f64>> = (0..l).map(|t| d_states[t][..h].to_vec()).collect();
    lstm_backprop(&params.forward, &mut grad.forward, &trace.forward, ex.features, d, h, &d_fwd);
    if let (Some(p), Some(g), Some(bt)) = (&params.backward, grad.backward.as_mut(), &trace.backward) {
        let d_bwd: Vec<Vec<f64>> = (0..l).map(|k| d_states[l - 1 - k][h..].to_vec()).collect();
        lstm_backprop(p, g, bt, ex.features, d, h, &d_bwd);
    }
    Ok(loss)
}

const CHUNK: usize = 8;

/// Mean cross-entropy over `batch` with explicit dropout masks (one per
/// example, or `None` for inference mode), plus its gradient.
pub fn loss_and_gradients_with_masks(
    batch: &[Example<'_>],
    params: &FearNetParams,
    config: &NetConfig,
    masks: Option<&[Vec<f64>]>,
) -> Result<(f64, FearNetParams), NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let weight = 1.0 / batch.len() as f64;
    let run_chunk = |start: usize, items: &[Example<'_>]| -> Result<(f64, FearNetParams), NetError> {
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        for (k, ex) in items.iter().enumerate() {
            let idx = start + k;
            let mask = masks.map(|m| m[idx].as_slice());
            let li = example_loss(ex, params, config, mask, Some((&mut grad, weight)))?;
            if !li.is_finite() {
                return Err(NetError::NonFiniteLoss { index: idx });
            }
            loss += li;
        }
        Ok((loss, grad))
    };
    let partials: Vec<Result<(f64, FearNetParams), NetError>> = if config.parallel {
        batch.par_chunks(CHUNK).enumerate().map(|(c, items)| run_chunk(c * CHUNK, items)).collect()
    } else {
        batch.chunks(CHUNK).enumerate().map(|(c, items)| run_chunk(c * CHUNK, items)).collect()
    };
    let mut total = 0.0;
    let mut grad = params.zeros_like();
    for p in partials {
        let (l, g) = p?;
        total += l;
        grad.add_assign(&g);
    }
    Ok((total * weight, grad))
}

/// Mean cross-entropy and gradient; dropout masks are drawn from `dropout_rng`
/// when given (training mode), otherwise inference mode is used.
pub fn loss_and_gradients<R: Rng>(
    batch: &[Example<'_>],
    params: &FearNetParams,
    config: &NetConfig,
    dropout_rng: Option<&mut R>,
) -> Result<(f64, FearNetParams), NetError> {
    let masks: Option<Vec<Vec<f64>>> =
        dropout_rng.map(|rng| batch.iter().map(|_| dropout_mask(rng, config.fc_hidden, config.dropout_rate)).collect());
    loss_and_gradients_with_masks(batch, params, config, masks.as_deref())
}

/// Mean cross-entropy without gradients.
pub fn batch_loss(batch: &[Example<'_>], params: &FearNetParams, config: &NetConfig, masks: Option<&[Vec<f64>]>) -> Result<f64, NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let li = example_loss(ex, params, config, masks.map(|m| m[i].as_slice()), None)?;
        if !li.is_finite() {
            return Err(NetError::NonFiniteLoss { index: i });
        }
        total += li;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub attention: Option<AttentionTrace>,
}

/// Inference-mode prediction; ties go to the lower class.
pub fn predict(x: &[f64], params: &FearNetParams, config: &NetConfig) -> Result<Prediction, NetError> {
    check_input(x, config)?;
    let trace = encode(x, params, config);
    let (context, attention) = readout(&trace, params, config)?;
    let out = classify(&context, params, config, None)?;
    let class = argmax(&out.probabilities);
    Ok(Prediction { class, probabilities: out.probabilities, attention })
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict_all(examples: &[Example<'_>], params: &FearNetParams, config: &NetConfig) -> Result<Vec<usize>, NetError> {
    let run = |ex: &Example<'_>| predict(ex.features, params, config).map(|p| p.class);
    if config.parallel {
        examples.par_iter().map(run).collect()
    } else {
        examples.iter().map(run).collect()
    }
}

pub fn accuracy(examples: &[Example<'_>], params: &FearNetParams, config: &NetConfig) -> Result<f64, NetError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_all(examples, params, config)?;
    let hits = preds.iter().zip(examples).filter(|(p, e)| **p == e.target).count();
    Ok(hits as f64 / examples.len() as f64)
}

/// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: FearNetParams,
    v: FearNetParams,
}

impl Adam {
    pub fn new(params: &FearNetParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut FearNetParams, grad: &FearNetParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let groups = params.groups_mut().into_iter().zip(grad.groups_ref()).zip(self.m.groups_mut()).zip(self.v.groups_mut());
        for (((p, g), m), v) in groups {
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FearNetParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Mini-batch Adam training. Batches are reshuffled every epoch from the
/// config seed; the returned parameters are those with the best validation
/// accuracy (earliest epoch on ties).
pub fn train(train_set: &[Example<'_>], val_set: &[Example<'_>], config: &NetConfig) -> Result<TrainOutcome, TrainError> {
    train_with(train_set, val_set, config, |_| ControlFlow::Continue(()))
}

/// As [`train`], calling `on_epoch` after every epoch; `Break` ends training
/// after that epoch.
pub fn train_with(
    train_set: &[Example<'_>],
    val_set: &[Example<'_>],
    config: &NetConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(NetError::EmptyBatch.into());
    }
    let mut params = FearNetParams::init(config)?;
    let mut optimizer = Adam::new(&params, config.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, FearNetParams)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = idx.iter().map(|&i| train_set[i]).collect();
            let (loss, grad) = loss_and_gradients(&batch, &params, config, Some(&mut dropout_rng)).map_err(|source| {
                TrainError::Diverged { epoch, batch: b, source, history: history.clone() }
            })?;
            epoch_loss += loss * batch.len() as f64;
            optimizer.update(&mut params, &grad);
        }
        let val_accuracy = accuracy(val_set, &params, config)?;
        let record = EpochRecord { epoch, loss: epoch_loss / train_set.len() as f64, val_accuracy };
        let flow = on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(acc, ..)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, params.clone()));
        }
        if flow.is_break() {
            break;
        }
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, 0),
    };
    Ok(TrainOutcome { params, history, best_epoch })
}

pub fn write_history_csv<W: std::io::Write>(mut out: W, history: &[EpochRecord], comment: Option<&str>) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    writeln!(out, "epoch,loss,val_accuracy")?;
    for r in history {
        writeln!(out, "{},{},{}", r.epoch, r.loss, r.val_accuracy)?;
    }
    Ok(())
}
