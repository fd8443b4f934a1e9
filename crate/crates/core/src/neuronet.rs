//! Minimal differentiable compute core.
//!
//! Fixed topology: two tanh fully-connected layers feeding an LSTM cell
//! (optionally bypassed), then a linear head — softmax for the actor,
//! scalar for the critic. Forward passes over a segment record a [`Tape`]
//! from which [`backward`] produces exact reverse-mode gradients, unrolled
//! through time. Everything is 64-bit and deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation encountered")]
    NonFinite,
    #[error("tape does not match this network or gradient shape")]
    TapeMismatch,
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub fc1: usize,
    pub fc2: usize,
    /// LSTM hidden width (ignored when `use_lstm` is false).
    pub hidden: usize,
    pub outputs: usize,
    pub use_lstm: bool,
}

impl NetConfig {
    /// Width of the feature vector entering the head.
    pub fn feature_dim(&self) -> usize {
        if self.use_lstm {
            self.hidden
        } else {
            self.fc2
        }
    }

    /// Hidden-state width carried between steps (0 without the LSTM).
    pub fn rec_dim(&self) -> usize {
        if self.use_lstm {
            self.hidden
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            b: (0..out_dim).map(|_| rng.gen_range(-bound..=bound)).collect(),
            in_dim,
            out_dim,
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out[o] = acc;
        }
    }
}

/// LSTM gate parameters; rows are blocked in (input, forget, cell, output)
/// order, so `wx` is (4·hidden)×input and `wh` is (4·hidden)×hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub b: Vec<f64>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            wx: vec![0.0; 4 * hidden * input_dim],
            wh: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
            input_dim,
            hidden,
        }
    }

    fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Self {
            wx: (0..4 * hidden * input_dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            wh: (0..4 * hidden * hidden)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
            b: (0..4 * hidden).map(|_| rng.gen_range(-bound..=bound)).collect(),
            input_dim,
            hidden,
        }
    }
}

/// Per-episode recurrent state; reset to zeros at episode start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(dim: usize) -> Self {
        Self {
            h: vec![0.0; dim],
            c: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetConfig,
    pub fc1: Linear,
    pub fc2: Linear,
    pub lstm: Option<LstmParams>,
    pub head: Linear,
}

impl Network {
    pub fn init(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            fc1: Linear::init(config.input_dim, config.fc1, &mut rng),
            fc2: Linear::init(config.fc1, config.fc2, &mut rng),
            lstm: config
                .use_lstm
                .then(|| LstmParams::init(config.fc2, config.hidden, &mut rng)),
            head: Linear::init(config.feature_dim(), config.outputs, &mut rng),
            config,
        }
    }

    pub fn zeros(config: NetConfig) -> Self {
        Self {
            fc1: Linear::zeros(config.input_dim, config.fc1),
            fc2: Linear::zeros(config.fc1, config.fc2),
            lstm: config
                .use_lstm
                .then(|| LstmParams::zeros(config.fc2, config.hidden)),
            head: Linear::zeros(config.feature_dim(), config.outputs),
            config,
        }
    }

    pub fn fresh_state(&self) -> RecurrentState {
        RecurrentState::zeros(self.config.rec_dim())
    }

    /// Parameter blocks in a fixed order shared with [`Grads`] and
    /// [`AdamState`]: fc1.w, fc1.b, fc2.w, fc2.b, [wx, wh, b], head.w, head.b.
    pub fn blocks(&self) -> Vec<&Vec<f64>> {
        let mut v = vec![&self.fc1.w, &self.fc1.b, &self.fc2.w, &self.fc2.b];
        if let Some(l) = &self.lstm {
            v.push(&l.wx);
            v.push(&l.wh);
            v.push(&l.b);
        }
        v.push(&self.head.w);
        v.push(&self.head.b);
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = vec![&mut self.fc1.w, &mut self.fc1.b];
        v.push(&mut self.fc2.w);
        v.push(&mut self.fc2.b);
        if let Some(l) = &mut self.lstm {
            v.push(&mut l.wx);
            v.push(&mut l.wh);
            v.push(&mut l.b);
        }
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn validate_shapes(&self) -> Result<(), NetError> {
        let c = &self.config;
        let ok = self.fc1.in_dim == c.input_dim
            && self.fc1.out_dim == c.fc1
            && self.fc1.w.len() == c.input_dim * c.fc1
            && self.fc1.b.len() == c.fc1
            && self.fc2.in_dim == c.fc1
            && self.fc2.out_dim == c.fc2
            && self.fc2.w.len() == c.fc1 * c.fc2
            && self.fc2.b.len() == c.fc2
            && self.head.in_dim == c.feature_dim()
            && self.head.out_dim == c.outputs
            && self.head.w.len() == c.feature_dim() * c.outputs
            && self.head.b.len() == c.outputs
            && self.lstm.is_some() == c.use_lstm
            && self.lstm.as_ref().map_or(true, |l| {
                l.input_dim == c.fc2
                    && l.hidden == c.hidden
                    && l.wx.len() == 4 * c.hidden * c.fc2
                    && l.wh.len() == 4 * c.hidden * c.hidden
                    && l.b.len() == 4 * c.hidden
            });
        if ok {
            Ok(())
        } else {
            Err(NetError::ShapeMismatch(
                "network fields disagree with config".into(),
            ))
        }
    }

    /// Single forward step without recording a tape.
    pub fn forward_step(
        &self,
        x: &[f64],
        rec: &RecurrentState,
    ) -> Result<(Vec<f64>, RecurrentState), NetError> {
        let tape = forward_segment(self, &[x], rec)?;
        Ok((tape.outputs(0).to_vec(), tape.final_state()))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax (shifted by the max logit).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Log-probabilities via the shifted log-sum-exp form; safe for logits up
/// to ±700 and beyond.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Actor distribution over actions for one state, plus the advanced
/// recurrent state.
pub fn actor_forward(
    net: &Network,
    state: &[f64],
    rec: &RecurrentState,
) -> Result<(Vec<f64>, RecurrentState), NetError> {
    let (logits, next) = net.forward_step(state, rec)?;
    Ok((softmax(&logits), next))
}

/// Scalar state value for one state, plus the advanced recurrent state.
pub fn critic_forward(
    net: &Network,
    state: &[f64],
    rec: &RecurrentState,
) -> Result<(f64, RecurrentState), NetError> {
    let (out, next) = net.forward_step(state, rec)?;
    Ok((out[0], next))
}

/// Recorded activations for one forward segment.
#[derive(Debug, Clone)]
pub struct Tape {
    config: NetConfig,
    h0: Vec<f64>,
    c0: Vec<f64>,
    steps: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
struct StepRecord {
    x: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    // LSTM internals (empty without the LSTM).
    gi: Vec<f64>,
    gf: Vec<f64>,
    gg: Vec<f64>,
    go: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    feat: Vec<f64>,
    out: Vec<f64>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn outputs(&self, t: usize) -> &[f64] {
        &self.steps[t].out
    }

    pub fn feature(&self, t: usize) -> &[f64] {
        &self.steps[t].feat
    }

    pub fn final_state(&self) -> RecurrentState {
        if !self.config.use_lstm {
            return RecurrentState::zeros(0);
        }
        match self.steps.last() {
            Some(s) => RecurrentState {
                h: s.feat.clone(),
                c: s.c.clone(),
            },
            None => RecurrentState {
                h: self.h0.clone(),
                c: self.c0.clone(),
            },
        }
    }
}

/// Runs the network over a sequence of inputs starting from `init`,
/// recording everything needed for exact gradients.
pub fn forward_segment(
    net: &Network,
    inputs: &[&[f64]],
    init: &RecurrentState,
) -> Result<Tape, NetError> {
    let c = &net.config;
    if c.use_lstm && (init.h.len() != c.hidden || init.c.len() != c.hidden) {
        return Err(NetError::ShapeMismatch(format!(
            "recurrent state width {} does not match hidden {}",
            init.h.len(),
            c.hidden
        )));
    }
    let mut steps = Vec::with_capacity(inputs.len());
    let mut h_prev = init.h.clone();
    let mut c_prev = init.c.clone();
    for x in inputs {
        if x.len() != c.input_dim {
            return Err(NetError::ShapeMismatch(format!(
                "input width {} does not match input_dim {}",
                x.len(),
                c.input_dim
            )));
        }
        let mut z1 = vec![0.0; c.fc1];
        net.fc1.forward(x, &mut z1);
        for v in &mut z1 {
            *v = v.tanh();
        }
        let mut z2 = vec![0.0; c.fc2];
        net.fc2.forward(&z1, &mut z2);
        for v in &mut z2 {
            *v = v.tanh();
        }

        let (gi, gf, gg, go, cc, tanh_c, feat);
        if let Some(l) = &net.lstm {
            let hsz = l.hidden;
            let mut pre = vec![0.0; 4 * hsz];
            for (r, slot) in pre.iter_mut().enumerate() {
                let mut acc = l.b[r];
                let wx_row = &l.wx[r * l.input_dim..(r + 1) * l.input_dim];
                for (wi, xi) in wx_row.iter().zip(&z2) {
                    acc += wi * xi;
                }
                let wh_row = &l.wh[r * hsz..(r + 1) * hsz];
                for (wi, hi) in wh_row.iter().zip(&h_prev) {
                    acc += wi * hi;
                }
                *slot = acc;
            }
            let mut i_g = vec![0.0; hsz];
            let mut f_g = vec![0.0; hsz];
            let mut g_g = vec![0.0; hsz];
            let mut o_g = vec![0.0; hsz];
            let mut c_new = vec![0.0; hsz];
            let mut tc = vec![0.0; hsz];
            let mut h_new = vec![0.0; hsz];
            for u in 0..hsz {
                i_g[u] = sigmoid(pre[u]);
                f_g[u] = sigmoid(pre[hsz + u]);
                g_g[u] = pre[2 * hsz + u].tanh();
                o_g[u] = sigmoid(pre[3 * hsz + u]);
                c_new[u] = f_g[u] * c_prev[u] + i_g[u] * g_g[u];
                tc[u] = c_new[u].tanh();
                h_new[u] = o_g[u] * tc[u];
            }
            gi = i_g;
            gf = f_g;
            gg = g_g;
            go = o_g;
            cc = c_new.clone();
            tanh_c = tc;
            feat = h_new.clone();
            h_prev = h_new;
            c_prev = c_new;
        } else {
            gi = Vec::new();
            gf = Vec::new();
            gg = Vec::new();
            go = Vec::new();
            cc = Vec::new();
            tanh_c = Vec::new();
            feat = z2.clone();
        }

        let mut out = vec![0.0; c.outputs];
        net.head.forward(&feat, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite);
        }
        steps.push(StepRecord {
            x: x.to_vec(),
            z1,
            z2,
            gi,
            gf,
            gg,
            go,
            c: cc,
            tanh_c,
            feat,
            out,
        });
    }
    Ok(Tape {
        config: *c,
        h0: init.h.clone(),
        c0: init.c.clone(),
        steps,
    })
}

/// Parameter gradients, block-aligned with [`Network::blocks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grads {
    pub blocks: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            blocks: net.blocks().iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.blocks {
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.l2_norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|&x| x == 0.0))
    }
}

/// Exact reverse-mode gradients of `Σ_t d_outputs[t]·out[t]` with respect to
/// every parameter, unrolled over the recorded segment.
pub fn backward(net: &Network, tape: &Tape, d_outputs: &[Vec<f64>]) -> Result<Grads, NetError> {
    let c = &net.config;
    if tape.config != *c || d_outputs.len() != tape.len() {
        return Err(NetError::TapeMismatch);
    }
    for d in d_outputs {
        if d.len() != c.outputs {
            return Err(NetError::TapeMismatch);
        }
    }
    let mut grads = Grads::zeros_like(net);
    // Block indices within `grads`.
    let (fc1w, fc1b, fc2w, fc2b) = (0, 1, 2, 3);
    let (lwx, lwh, lb, headw, headb) = if c.use_lstm {
        (4, 5, 6, 7, 8)
    } else {
        (0, 0, 0, 4, 5)
    };

    let hsz = c.rec_dim();
    let mut dh_next = vec![0.0; hsz];
    let mut dc_next = vec![0.0; hsz];
    for t in (0..tape.len()).rev() {
        let rec = &tape.steps[t];
        let dout = &d_outputs[t];

        // Head: feat -> out.
        let mut dfeat = vec![0.0; c.feature_dim()];
        for o in 0..c.outputs {
            let g = dout[o];
            grads.blocks[headb][o] += g;
            let row = o * net.head.in_dim;
            for i in 0..net.head.in_dim {
                grads.blocks[headw][row + i] += g * rec.feat[i];
                dfeat[i] += g * net.head.w[row + i];
            }
        }

        let dz2 = if let Some(l) = &net.lstm {
            // dh flows from both the head and the next step.
            let mut dh = dfeat;
            for (a, b) in dh.iter_mut().zip(&dh_next) {
                *a += b;
            }
            let c_prev: &[f64] = if t == 0 { &tape.c0 } else { &tape.steps[t - 1].c };
            let h_prev: &[f64] = if t == 0 { &tape.h0 } else { &tape.steps[t - 1].feat };

            let mut dpre = vec![0.0; 4 * hsz];
            let mut dc_prev = vec![0.0; hsz];
            for u in 0..hsz {
                let d_o = dh[u] * rec.tanh_c[u];
                let dc = dc_next[u] + dh[u] * rec.go[u] * (1.0 - rec.tanh_c[u] * rec.tanh_c[u]);
                let d_i = dc * rec.gg[u];
                let d_g = dc * rec.gi[u];
                let d_f = dc * c_prev[u];
                dc_prev[u] = dc * rec.gf[u];
                dpre[u] = d_i * rec.gi[u] * (1.0 - rec.gi[u]);
                dpre[hsz + u] = d_f * rec.gf[u] * (1.0 - rec.gf[u]);
                dpre[2 * hsz + u] = d_g * (1.0 - rec.gg[u] * rec.gg[u]);
                dpre[3 * hsz + u] = d_o * rec.go[u] * (1.0 - rec.go[u]);
            }
            let mut dz2 = vec![0.0; c.fc2];
            let mut dh_prev = vec![0.0; hsz];
            for (r, &g) in dpre.iter().enumerate() {
                grads.blocks[lb][r] += g;
                let wx_row = r * l.input_dim;
                for i in 0..l.input_dim {
                    grads.blocks[lwx][wx_row + i] += g * rec.z2[i];
                    dz2[i] += g * l.wx[wx_row + i];
                }
                let wh_row = r * hsz;
                for j in 0..hsz {
                    grads.blocks[lwh][wh_row + j] += g * h_prev[j];
                    dh_prev[j] += g * l.wh[wh_row + j];
                }
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
            dz2
        } else {
            dfeat
        };

        // fc2 through its tanh.
        let mut dz1 = vec![0.0; c.fc1];
        for o in 0..c.fc2 {
            let g = dz2[o] * (1.0 - rec.z2[o] * rec.z2[o]);
            grads.blocks[fc2b][o] += g;
            let row = o * net.fc2.in_dim;
            for i in 0..net.fc2.in_dim {
                grads.blocks[fc2w][row + i] += g * rec.z1[i];
                dz1[i] += g * net.fc2.w[row + i];
            }
        }
        // fc1 through its tanh.
        for o in 0..c.fc1 {
            let g = dz1[o] * (1.0 - rec.z1[o] * rec.z1[o]);
            grads.blocks[fc1b][o] += g;
            let row = o * net.fc1.in_dim;
            for i in 0..net.fc1.in_dim {
                grads.blocks[fc1w][row + i] += g * rec.x[i];
            }
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators, block-aligned with the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(net: &Network) -> Self {
        let shape: Vec<Vec<f64>> = net.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            m: shape.clone(),
            v: shape,
            t: 0,
        }
    }
}

/// One Adam descent step along `grads` with bias correction.
pub fn adam_step(
    net: &mut Network,
    adam: &mut AdamState,
    grads: &Grads,
    hp: &AdamParams,
) -> Result<(), NetError> {
    let blocks = net.blocks_mut();
    if blocks.len() != grads.blocks.len() || blocks.len() != adam.m.len() {
        return Err(NetError::ShapeMismatch(
            "gradient blocks do not match network".into(),
        ));
    }
    adam.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(adam.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(adam.t as i32);
    for (bi, params) in blocks.into_iter().enumerate() {
        if params.len() != grads.blocks[bi].len() {
            return Err(NetError::ShapeMismatch(format!("block {bi} size mismatch")));
        }
        for (pi, p) in params.iter_mut().enumerate() {
            let g = grads.blocks[bi][pi];
            let m = &mut adam.m[bi][pi];
            let v = &mut adam.v[bi][pi];
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Outcome of comparing analytic BPTT gradients against central finite
/// differences of the scalar objective `Σ_t coeffs[t]·out[t]`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// Checks every parameter with central differences at the given
/// perturbation. The relative-error denominator is floored so that true
/// near-zero gradients (where the finite difference is pure rounding noise)
/// do not dominate the report.
pub fn grad_check(
    net: &Network,
    inputs: &[&[f64]],
    init: &RecurrentState,
    coeffs: &[Vec<f64>],
    perturbation: f64,
) -> Result<GradCheckReport, NetError> {
    let tape = forward_segment(net, inputs, init)?;
    let analytic = backward(net, &tape, coeffs)?;

    let objective = |n: &Network| -> Result<f64, NetError> {
        let tape = forward_segment(n, inputs, init)?;
        let mut total = 0.0;
        for t in 0..tape.len() {
            for (c, o) in coeffs[t].iter().zip(tape.outputs(t)) {
                total += c * o;
            }
        }
        Ok(total)
    };

    let mut work = net.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for bi in 0..analytic.blocks.len() {
        for pi in 0..analytic.blocks[bi].len() {
            let orig = work.blocks()[bi][pi];
            work.blocks_mut()[bi][pi] = orig + perturbation;
            let up = objective(&work)?;
            work.blocks_mut()[bi][pi] = orig - perturbation;
            let down = objective(&work)?;
            work.blocks_mut()[bi][pi] = orig;
            let fd = (up - down) / (2.0 * perturbation);
            let a = analytic.blocks[bi][pi];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        params_checked: checked,
    })
}

/// Actor/critic parameter sets plus optimizer state; the unit of
/// checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcParams {
    pub actor: Network,
    pub critic: Network,
    pub adam_actor: AdamState,
    pub adam_critic: AdamState,
    /// Incremented on every snapshot publication.
    pub version: u64,
}

impl AcParams {
    pub fn init(actor_cfg: NetConfig, critic_cfg: NetConfig, seed: u64) -> Self {
        let actor = Network::init(actor_cfg, crate::subseed(seed, "actor-init"));
        let critic = Network::init(critic_cfg, crate::subseed(seed, "critic-init"));
        let adam_actor = AdamState::zeros_like(&actor);
        let adam_critic = AdamState::zeros_like(&critic);
        Self {
            actor,
            critic,
            adam_actor,
            adam_critic,
            version: 0,
        }
    }
}

const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    params: AcParams,
}

pub fn save_checkpoint(params: &AcParams, path: &std::path::Path) -> Result<(), NetError> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT,
        params: params.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Loads a checkpoint, rejecting unknown formats and shape-inconsistent
/// parameter sets.
pub fn load_checkpoint(path: &std::path::Path) -> Result<AcParams, NetError> {
    let file: CheckpointFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format_version != CHECKPOINT_FORMAT {
        return Err(NetError::Checkpoint(format!(
            "unsupported format version {}",
            file.format_version
        )));
    }
    let p = &file.params;
    p.actor
        .validate_shapes()
        .map_err(|e| NetError::Checkpoint(format!("actor: {e}")))?;
    p.critic
        .validate_shapes()
        .map_err(|e| NetError::Checkpoint(format!("critic: {e}")))?;
    for (net, adam, name) in [
        (&p.actor, &p.adam_actor, "actor"),
        (&p.critic, &p.adam_critic, "critic"),
    ] {
        let blocks = net.blocks();
        if adam.m.len() != blocks.len()
            || adam.v.len() != blocks.len()
            || blocks
                .iter()
                .enumerate()
                .any(|(i, b)| adam.m[i].len() != b.len() || adam.v[i].len() != b.len())
        {
            return Err(NetError::Checkpoint(format!(
                "{name} optimizer state does not match parameters"
            )));
        }
    }
    Ok(file.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(input: usize, width: usize, hidden: usize, outputs: usize) -> NetConfig {
        NetConfig {
            input_dim: input,
            fc1: width,
            fc2: width,
            hidden,
            outputs,
            use_lstm: true,
        }
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect()
    }

    #[test]
    fn zero_network_gives_uniform_policy_and_zero_value() {
        let net = Network::zeros(cfg(6, 8, 8, 4));
        let rec = net.fresh_state();
        let (probs, _) = actor_forward(&net, &[0.3; 6], &rec).unwrap();
        for p in &probs {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let critic = Network::zeros(cfg(6, 8, 8, 1));
        let (v, _) = critic_forward(&critic, &[0.3; 6], &critic.fresh_state()).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let logits: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..=5.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|l| l + 3.7).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_survives_extreme_logits() {
        let logits = vec![700.0, -700.0, 0.0];
        let lp = log_softmax(&logits);
        assert!(lp.iter().all(|v| v.is_finite()));
        assert!(lp[0].abs() < 1e-9);
        let p: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((p - 1.0).abs() < 1e-9);
    }

    #[test]
    fn recurrence_carries_history() {
        let net = Network::init(cfg(5, 8, 8, 3), 7);
        let a = [0.5; 5];
        let b = [-0.7; 5];
        let x = [0.1; 5];
        let rec = net.fresh_state();
        let (_, rec_a) = net.forward_step(&a, &rec).unwrap();
        let (_, rec_b) = net.forward_step(&b, &rec).unwrap();
        let (out_after_a, _) = net.forward_step(&x, &rec_a).unwrap();
        let (out_after_b, _) = net.forward_step(&x, &rec_b).unwrap();
        assert_ne!(out_after_a, out_after_b, "history must influence outputs");
    }

    #[test]
    fn severed_recurrence_reduces_to_feedforward() {
        // Recurrent connections are wh (hidden-to-gates) and the cell
        // self-loop, whose gain is the forget gate. Zeroing wh and driving
        // the forget gate to exactly 0 removes both.
        let mut net = Network::init(cfg(5, 8, 8, 3), 7);
        if let Some(l) = &mut net.lstm {
            for w in &mut l.wh {
                *w = 0.0;
            }
            let hsz = l.hidden;
            for u in 0..hsz {
                l.b[hsz + u] = -1e4; // sigmoid(-1e4) == 0.0 in f64
            }
        }
        let a = [0.5; 5];
        let b = [-0.7; 5];
        let x = [0.1; 5];
        let rec = net.fresh_state();
        let (_, rec_a) = net.forward_step(&a, &rec).unwrap();
        let (_, rec_b) = net.forward_step(&b, &rec).unwrap();
        let (out_after_a, _) = net.forward_step(&x, &rec_a).unwrap();
        let (out_after_b, _) = net.forward_step(&x, &rec_b).unwrap();
        assert_eq!(out_after_a, out_after_b);
    }

    #[test]
    fn feedforward_mode_ignores_state() {
        let mut c = cfg(5, 8, 8, 3);
        c.use_lstm = false;
        let net = Network::init(c, 7);
        let rec = net.fresh_state();
        assert!(rec.h.is_empty());
        let (_, rec2) = net.forward_step(&[0.5; 5], &rec).unwrap();
        let (o1, _) = net.forward_step(&[0.1; 5], &rec).unwrap();
        let (o2, _) = net.forward_step(&[0.1; 5], &rec2).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn zero_loss_gradient_means_zero_parameter_gradient() {
        let net = Network::init(cfg(5, 8, 8, 3), 3);
        let inputs = random_inputs(&mut ChaCha8Rng::seed_from_u64(0), 4, 5);
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let tape = forward_segment(&net, &refs, &net.fresh_state()).unwrap();
        let d = vec![vec![0.0; 3]; 4];
        let grads = backward(&net, &tape, &d).unwrap();
        assert!(grads.is_all_zero());
    }

    #[test]
    fn one_step_backward_matches_hand_derived_formulas() {
        // Head layer on a 1-step segment: with loss = Σ d·out,
        // d head.w[o][i] = d[o]·feat[i] and d head.b[o] = d[o].
        let net = Network::init(cfg(4, 6, 6, 2), 11);
        let x = [0.3, -0.2, 0.9, 0.5];
        let rec = net.fresh_state();
        let tape = forward_segment(&net, &[&x], &rec).unwrap();
        let d = vec![vec![1.0, -2.0]];
        let grads = backward(&net, &tape, &d).unwrap();

        let feat = tape.feature(0).to_vec();
        let headw = &grads.blocks[7];
        let headb = &grads.blocks[8];
        for o in 0..2 {
            assert!((headb[o] - d[0][o]).abs() < 1e-15);
            for i in 0..feat.len() {
                assert!((headw[o * feat.len() + i] - d[0][o] * feat[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bptt_matches_finite_differences_at_spec_sizes() {
        let sizes = [(6, 8, 8, 4), (12, 16, 16, 8), (20, 8, 8, 25)];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for (input, width, hidden, outputs) in sizes {
            let net = Network::init(cfg(input, width, hidden, outputs), rng.gen());
            let inputs = random_inputs(&mut rng, 5, input);
            let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
            let coeffs: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..outputs).map(|_| rng.gen_range(-1.0..=1.0)).collect())
                .collect();
            let report = grad_check(&net, &refs, &net.fresh_state(), &coeffs, 1e-5).unwrap();
            assert!(
                report.max_rel_error <= 1e-4,
                "({input},{width},{hidden},{outputs}): max rel err {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn bptt_matches_finite_differences_without_lstm() {
        let mut c = cfg(6, 8, 8, 4);
        c.use_lstm = false;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Network::init(c, 9);
        let inputs = random_inputs(&mut rng, 3, 6);
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let coeffs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        let report = grad_check(&net, &refs, &net.fresh_state(), &coeffs, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4);
    }

    #[test]
    fn adam_fixed_point_and_first_step_direction() {
        let mut net = Network::init(cfg(4, 6, 6, 2), 13);
        let reference = net.clone();
        let mut adam = AdamState::zeros_like(&net);
        let hp = AdamParams::with_lr(0.01);
        let zeros = Grads::zeros_like(&net);
        adam_step(&mut net, &mut adam, &zeros, &hp).unwrap();
        assert_eq!(net, reference, "zero gradient must not move parameters");

        // First step with gradient g moves each parameter by ~ -lr·sign(g).
        let mut grads = Grads::zeros_like(&net);
        for b in &mut grads.blocks {
            for (i, g) in b.iter_mut().enumerate() {
                *g = if i % 2 == 0 { 0.5 } else { -1.5 };
            }
        }
        let before = net.clone();
        let mut adam = AdamState::zeros_like(&net);
        adam_step(&mut net, &mut adam, &grads, &hp).unwrap();
        for (bi, (nb, ob)) in net.blocks().iter().zip(before.blocks()).enumerate() {
            for i in 0..nb.len() {
                let delta = nb[i] - ob[i];
                let g = grads.blocks[bi][i];
                assert!(
                    (delta + hp.lr * g.signum()).abs() < 1e-6,
                    "block {bi} param {i}: delta {delta} for gradient {g}"
                );
            }
        }

        // Determinism: replaying the same updates gives identical parameters.
        let mut net2 = Network::init(cfg(4, 6, 6, 2), 13);
        let mut adam2 = AdamState::zeros_like(&net2);
        adam_step(&mut net2, &mut adam2, &grads, &hp).unwrap();
        assert_eq!(net, net2);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_rejection() {
        let params = AcParams::init(cfg(6, 8, 8, 4), cfg(6, 8, 8, 1), 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);

        let mut bad = params.clone();
        bad.actor.head.w.truncate(3);
        let bad_path = dir.path().join("bad.json");
        save_checkpoint(&bad, &bad_path).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_path),
            Err(NetError::Checkpoint(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = Network::init(cfg(6, 8, 8, 4), 1);
        assert!(matches!(
            net.forward_step(&[0.0; 5], &net.fresh_state()),
            Err(NetError::ShapeMismatch(_))
        ));
    }
}
