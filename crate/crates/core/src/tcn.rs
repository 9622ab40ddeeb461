//! A small temporal convolutional network over the 11-signal x 5-step window.
//!
//! Three residual blocks of causal dilated convolutions (dilations 1, 2, 4,
//! kernel 2) feed a dense projection of the last time step to a 256-wide
//! latent, followed by a softmax head. Gradients are derived by hand and
//! checked against central differences in [`TcnNetwork::gradient_check`].
//!
//! Windows are flat, channel-major: `window[c * seq_len + t]`, `t = 0` oldest.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::logistic::softmax_in_place;
use crate::{par, rng};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// Makes the whole network piecewise-free; used to verify gradients exactly.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => (pre > 0.0) as u8 as f64,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub in_channels: usize,
    pub seq_len: usize,
    pub dilations: Vec<usize>,
    pub kernel_size: usize,
    pub hidden_channels: usize,
    pub latent_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub class_weighted: bool,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            in_channels: 11,
            seq_len: 5,
            dilations: vec![1, 2, 4],
            kernel_size: 2,
            hidden_channels: 64,
            latent_dim: 256,
            n_classes: 3,
            dropout: 0.1,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            class_weighted: true,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl TcnConfig {
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn window_len(&self) -> usize {
        self.in_channels * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.seq_len == 0 || self.hidden_channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("TCN dimensions must be positive".into()));
        }
        if self.kernel_size == 0 || self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("TCN needs at least one block with positive kernel and dilation".into()));
        }
        if self.receptive_field() < self.seq_len {
            return Err(Error::Config(format!(
                "receptive field {} shorter than sequence length {}",
                self.receptive_field(),
                self.seq_len
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("TCN head needs at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    k: usize,
    dilation: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    nin: usize,
    nout: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    proj: Option<Dense>,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<Block>,
    latent: Dense,
    head: Dense,
    n_params: usize,
    /// (name, shape, offset) for every parameter tensor, in storage order.
    tensors: Vec<(String, Vec<usize>, usize)>,
}

impl Layout {
    fn new(cfg: &TcnConfig) -> Layout {
        let mut off = 0;
        let mut tensors = Vec::new();
        let mut alloc = |name: String, shape: Vec<usize>| {
            let start = off;
            off += shape.iter().product::<usize>();
            tensors.push((name, shape, start));
            start
        };
        let mut blocks = Vec::new();
        let mut cin = cfg.in_channels;
        let h = cfg.hidden_channels;
        let k = cfg.kernel_size;
        for (bi, &dilation) in cfg.dilations.iter().enumerate() {
            let conv1 = Conv {
                w: alloc(format!("block{bi}.conv1.weight"), vec![h, cin, k]),
                b: alloc(format!("block{bi}.conv1.bias"), vec![h]),
                cin,
                cout: h,
                k,
                dilation,
            };
            let conv2 = Conv {
                w: alloc(format!("block{bi}.conv2.weight"), vec![h, h, k]),
                b: alloc(format!("block{bi}.conv2.bias"), vec![h]),
                cin: h,
                cout: h,
                k,
                dilation,
            };
            let proj = (cin != h).then(|| Dense {
                w: alloc(format!("block{bi}.residual.weight"), vec![h, cin]),
                b: alloc(format!("block{bi}.residual.bias"), vec![h]),
                nin: cin,
                nout: h,
            });
            blocks.push(Block { conv1, conv2, proj });
            cin = h;
        }
        let latent = Dense {
            w: alloc("latent.weight".into(), vec![cfg.latent_dim, h]),
            b: alloc("latent.bias".into(), vec![cfg.latent_dim]),
            nin: h,
            nout: cfg.latent_dim,
        };
        let head = Dense {
            w: alloc("head.weight".into(), vec![cfg.n_classes, cfg.latent_dim]),
            b: alloc("head.bias".into(), vec![cfg.n_classes]),
            nin: cfg.latent_dim,
            nout: cfg.n_classes,
        };
        Layout { blocks, latent, head, n_params: off, tensors }
    }
}

/// `y[o,t] = b[o] + sum_{i,j} w[o,i,j] * x[i, t - (k-1-j)*d]`, zero left-padding.
fn conv_forward(p: &[f64], l: &Conv, x: &[f64], t_len: usize, y: &mut [f64]) {
    for o in 0..l.cout {
        let bias = p[l.b + o];
        for t in 0..t_len {
            let mut acc = bias;
            for i in 0..l.cin {
                let wrow = &p[l.w + (o * l.cin + i) * l.k..][..l.k];
                let xrow = &x[i * t_len..(i + 1) * t_len];
                for (j, w) in wrow.iter().enumerate() {
                    let shift = (l.k - 1 - j) * l.dilation;
                    if t >= shift {
                        acc += w * xrow[t - shift];
                    }
                }
            }
            y[o * t_len + t] = acc;
        }
    }
}

/// Accumulates parameter gradients into `g` and input gradients into `dx`.
fn conv_backward(p: &[f64], l: &Conv, x: &[f64], dy: &[f64], t_len: usize, g: &mut [f64], dx: &mut [f64]) {
    for o in 0..l.cout {
        let dyrow = &dy[o * t_len..(o + 1) * t_len];
        g[l.b + o] += dyrow.iter().sum::<f64>();
        for i in 0..l.cin {
            let base = l.w + (o * l.cin + i) * l.k;
            for j in 0..l.k {
                let shift = (l.k - 1 - j) * l.dilation;
                let w = p[base + j];
                let mut gw = 0.0;
                for t in shift..t_len {
                    gw += dyrow[t] * x[i * t_len + t - shift];
                    dx[i * t_len + t - shift] += w * dyrow[t];
                }
                g[base + j] += gw;
            }
        }
    }
}

/// Pointwise (1x1) projection applied at every time step.
fn pointwise_forward(p: &[f64], l: &Dense, x: &[f64], t_len: usize, y: &mut [f64]) {
    for o in 0..l.nout {
        for t in 0..t_len {
            let mut acc = p[l.b + o];
            for i in 0..l.nin {
                acc += p[l.w + o * l.nin + i] * x[i * t_len + t];
            }
            y[o * t_len + t] = acc;
        }
    }
}

fn pointwise_backward(p: &[f64], l: &Dense, x: &[f64], dy: &[f64], t_len: usize, g: &mut [f64], dx: &mut [f64]) {
    for o in 0..l.nout {
        for t in 0..t_len {
            let d = dy[o * t_len + t];
            g[l.b + o] += d;
            for i in 0..l.nin {
                g[l.w + o * l.nin + i] += d * x[i * t_len + t];
                dx[i * t_len + t] += p[l.w + o * l.nin + i] * d;
            }
        }
    }
}

fn dense_forward(p: &[f64], l: &Dense, x: &[f64]) -> Vec<f64> {
    (0..l.nout)
        .map(|o| {
            let w = &p[l.w + o * l.nin..][..l.nin];
            p[l.b + o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn dense_backward(p: &[f64], l: &Dense, x: &[f64], dy: &[f64], g: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; l.nin];
    for o in 0..l.nout {
        let d = dy[o];
        g[l.b + o] += d;
        for i in 0..l.nin {
            g[l.w + o * l.nin + i] += d * x[i];
            dx[i] += p[l.w + o * l.nin + i] * d;
        }
    }
    dx
}

struct BlockTrace {
    input: Vec<f64>,
    a1: Vec<f64>,
    mask1: Option<Vec<f64>>,
    /// Dropped-out activation fed to conv2.
    h1: Vec<f64>,
    a2: Vec<f64>,
    mask2: Option<Vec<f64>>,
    s: Vec<f64>,
    out: Vec<f64>,
}

struct Trace {
    blocks: Vec<BlockTrace>,
    last: Vec<f64>,
    z: Vec<f64>,
    latent: Vec<f64>,
    probs: Vec<f64>,
}

/// Output of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnOutput {
    pub latent: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TcnNetwork {
    config: TcnConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for TcnNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen_bool(rate) { 0.0 } else { keep }).collect()
}

impl TcnNetwork {
    /// Fan-in scaled uniform init, zero biases.
    pub fn new(config: TcnConfig) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = rng::stream(net.config.seed, &[0x7C4, 0]);
        let tensors = net.layout.tensors.clone();
        for (name, shape, off) in tensors {
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            for v in &mut net.params[off..off + n] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(config: TcnConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0; layout.n_params];
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &TcnConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter tensor names and shapes in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layout.tensors.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect()
    }

    /// Mutable view of one named tensor.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (_, shape, off) = self.layout.tensors.iter().find(|(n, _, _)| n == name)?;
        let n: usize = shape.iter().product();
        Some(&mut self.params[*off..*off + n])
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        if window.len() != self.config.window_len() {
            return Err(Error::DimensionMismatch { expected: self.config.window_len(), got: window.len() });
        }
        Ok(())
    }

    fn run(&self, window: &[f64], mut dropout: Option<&mut ChaCha8Rng>) -> Trace {
        let p = &self.params;
        let t_len = self.config.seq_len;
        let act = self.config.activation;
        let rate = self.config.dropout;
        let mut x = window.to_vec();
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        for blk in &self.layout.blocks {
            let h = blk.conv1.cout;
            let mut a1 = vec![0.0; h * t_len];
            conv_forward(p, &blk.conv1, &x, t_len, &mut a1);
            let mut h1: Vec<f64> = a1.iter().map(|v| act.apply(*v)).collect();
            let mask1 = dropout.as_deref_mut().filter(|_| rate > 0.0).map(|r| dropout_mask(r, h1.len(), rate));
            if let Some(m) = &mask1 {
                h1.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
            }
            let mut a2 = vec![0.0; h * t_len];
            conv_forward(p, &blk.conv2, &h1, t_len, &mut a2);
            let mut h2: Vec<f64> = a2.iter().map(|v| act.apply(*v)).collect();
            let mask2 = dropout.as_deref_mut().filter(|_| rate > 0.0).map(|r| dropout_mask(r, h2.len(), rate));
            if let Some(m) = &mask2 {
                h2.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
            }
            let residual = match &blk.proj {
                Some(pr) => {
                    let mut r = vec![0.0; h * t_len];
                    pointwise_forward(p, pr, &x, t_len, &mut r);
                    r
                }
                None => x.clone(),
            };
            let s: Vec<f64> = h2.iter().zip(&residual).map(|(a, b)| a + b).collect();
            let out: Vec<f64> = s.iter().map(|v| act.apply(*v)).collect();
            blocks.push(BlockTrace { input: std::mem::replace(&mut x, out.clone()), a1, mask1, h1, a2, mask2, s, out });
        }
        let hidden = self.config.hidden_channels;
        let last: Vec<f64> = (0..hidden).map(|c| x[c * t_len + t_len - 1]).collect();
        let z = dense_forward(p, &self.layout.latent, &last);
        let latent: Vec<f64> = z.iter().map(|v| act.apply(*v)).collect();
        let mut probs = dense_forward(p, &self.layout.head, &latent);
        softmax_in_place(&mut probs);
        Trace { blocks, last, z, latent, probs }
    }

    /// Inference pass (dropout off).
    pub fn forward(&self, window: &[f64]) -> Result<TcnOutput> {
        self.check_window(window)?;
        let tr = self.run(window, None);
        Ok(TcnOutput { latent: tr.latent, probs: tr.probs })
    }

    /// Each block's output map (`hidden x seq_len`, channel-major).
    pub fn block_outputs(&self, window: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_window(window)?;
        Ok(self.run(window, None).blocks.into_iter().map(|b| b.out).collect())
    }

    pub fn extract_latent(&self, windows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        windows.iter().try_for_each(|w| self.check_window(w))?;
        Ok(par::map(windows, |w| self.run(w, None).latent))
    }

    /// Weighted cross-entropy of one window.
    pub fn loss(&self, window: &[f64], label: usize) -> f64 {
        -self.run(window, None).probs[label].max(f64::MIN_POSITIVE).ln()
    }

    /// Loss and its gradient for one window, accumulating `weight * dL/dθ` into `grad`.
    fn backprop(
        &self,
        window: &[f64],
        label: usize,
        weight: f64,
        dropout: Option<&mut ChaCha8Rng>,
        grad: &mut [f64],
    ) -> f64 {
        let p = &self.params;
        let act = self.config.activation;
        let t_len = self.config.seq_len;
        let tr = self.run(window, dropout);
        let loss = -tr.probs[label].max(f64::MIN_POSITIVE).ln();

        let mut dlogits: Vec<f64> = tr.probs.iter().map(|v| weight * v).collect();
        dlogits[label] -= weight;
        let dlatent = dense_backward(p, &self.layout.head, &tr.latent, &dlogits, grad);
        let dz: Vec<f64> = dlatent.iter().zip(&tr.z).map(|(d, z)| d * act.derivative(*z)).collect();
        let dlast = dense_backward(p, &self.layout.latent, &tr.last, &dz, grad);

        let hidden = self.config.hidden_channels;
        let mut dout = vec![0.0; hidden * t_len];
        for c in 0..hidden {
            dout[c * t_len + t_len - 1] = dlast[c];
        }
        for (blk, bt) in self.layout.blocks.iter().zip(&tr.blocks).rev() {
            let ds: Vec<f64> = dout.iter().zip(&bt.s).map(|(d, s)| d * act.derivative(*s)).collect();
            let mut da2: Vec<f64> = ds.iter().zip(&bt.a2).map(|(d, a)| d * act.derivative(*a)).collect();
            if let Some(m) = &bt.mask2 {
                da2.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
            }
            let mut dh1 = vec![0.0; bt.h1.len()];
            conv_backward(p, &blk.conv2, &bt.h1, &da2, t_len, grad, &mut dh1);
            if let Some(m) = &bt.mask1 {
                dh1.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
            }
            let da1: Vec<f64> = dh1.iter().zip(&bt.a1).map(|(d, a)| d * act.derivative(*a)).collect();
            let mut dx = vec![0.0; bt.input.len()];
            conv_backward(p, &blk.conv1, &bt.input, &da1, t_len, grad, &mut dx);
            match &blk.proj {
                Some(pr) => pointwise_backward(p, pr, &bt.input, &ds, t_len, grad, &mut dx),
                None => dx.iter_mut().zip(&ds).for_each(|(a, b)| *a += b),
            }
            dout = dx;
        }
        loss
    }

    /// Analytic gradient of the unweighted loss at one window (no dropout).
    pub fn gradient(&self, window: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_window(window)?;
        if label >= self.config.n_classes {
            return Err(Error::Data(format!("label {label} outside [0, {})", self.config.n_classes)));
        }
        let mut g = vec![0.0; self.params.len()];
        self.backprop(window, label, 1.0, None, &mut g);
        Ok(g)
    }

    /// Largest relative error between analytic and central-difference
    /// gradients (step 1e-5) over `n_probes` random parameters. The relative
    /// error is `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn gradient_check(&self, window: &[f64], label: usize, n_probes: usize, seed: u64) -> Result<f64> {
        const STEP: f64 = 1e-5;
        let analytic = self.gradient(window, label)?;
        let mut rng = rng::stream(seed, &[0x6C4EC]);
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for _ in 0..n_probes {
            let i = rng.gen_range(0..self.params.len());
            let orig = probe.params[i];
            probe.params[i] = orig + STEP;
            let up = probe.loss(window, label);
            probe.params[i] = orig - STEP;
            let down = probe.loss(window, label);
            probe.params[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Per-class loss weights: `1/count`, scaled so a class-balanced set gets weight 1.
    fn class_weights(&self, labels: &[usize]) -> Vec<f64> {
        let k = self.config.n_classes;
        if !self.config.class_weighted {
            return vec![1.0; k];
        }
        let mut counts = vec![0usize; k];
        for &y in labels {
            counts[y] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count() as f64;
        let n = labels.len() as f64;
        counts.iter().map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) }).collect()
    }
}

/// Minibatch Adam on class-weighted cross-entropy. Per-instance gradients are
/// computed in fixed-size chunks and summed in order, so the result does not
/// depend on the number of worker threads.
pub fn train(mut net: TcnNetwork, windows: &[Vec<f64>], labels: &[usize]) -> Result<(TcnNetwork, TrainHistory)> {
    const CHUNK: usize = 8;
    let cfg = net.config.clone();
    if windows.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: windows.len(), got: labels.len() });
    }
    windows.iter().try_for_each(|w| net.check_window(w))?;
    if let Some(bad) = labels.iter().find(|&&y| y >= cfg.n_classes) {
        return Err(Error::Data(format!("label {bad} outside [0, {})", cfg.n_classes)));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("TCN training needs at least two classes".into()));
    }

    let weights = net.class_weights(labels);
    let n_params = net.params.len();
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut step = 0i32;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..windows.len()).collect();

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.seed, &[0x5E, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let chunks: Vec<&[usize]> = batch.chunks(CHUNK).collect();
            let net_ref = &net;
            let partials = par::map(&chunks, |chunk| {
                let mut g = vec![0.0; n_params];
                let mut loss = 0.0;
                for &i in chunk.iter() {
                    let mut drop_rng = rng::stream(cfg.seed, &[0xD0, epoch as u64, bi as u64, i as u64]);
                    let w = weights[labels[i]];
                    loss += w * net_ref.backprop(&windows[i], labels[i], w, Some(&mut drop_rng), &mut g);
                }
                (loss, g)
            });
            let mut grad = vec![0.0; n_params];
            for (loss, g) in partials {
                epoch_loss += loss;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(step);
            let bc2 = 1.0 - cfg.beta2.powi(step);
            for j in 0..n_params {
                let g = grad[j] * scale;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                net.params[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
        history.epoch_loss.push(epoch_loss / windows.len() as f64);
    }
    Ok((net, history))
}

/// JSON weight file: one record per named tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnWeightsFile {
    pub format_version: u32,
    pub config: TcnConfig,
    pub layers: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TcnNetwork {
    pub fn to_file(&self) -> TcnWeightsFile {
        TcnWeightsFile {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            layers: self
                .layout
                .tensors
                .iter()
                .map(|(name, shape, off)| {
                    let n: usize = shape.iter().product();
                    TensorRecord {
                        name: name.clone(),
                        shape: shape.clone(),
                        values: self.params[*off..off + n].to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn from_file(file: TcnWeightsFile) -> Result<Self> {
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion { found: file.format_version, expected: FORMAT_VERSION });
        }
        let mut net = Self::zeros(file.config)?;
        if file.layers.len() != net.layout.tensors.len() {
            return Err(Error::Data("TCN weight file has the wrong number of tensors".into()));
        }
        for (rec, (name, shape, off)) in file.layers.iter().zip(net.layout.tensors.clone()) {
            if rec.name != name || rec.shape != shape || rec.values.len() != shape.iter().product::<usize>() {
                return Err(Error::Data(format!("TCN tensor `{}` does not match layout `{name}`", rec.name)));
            }
            net.params[off..off + rec.values.len()].copy_from_slice(&rec.values);
        }
        Ok(net)
    }
}

impl Serialize for TcnNetwork {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_file().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TcnNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = TcnWeightsFile::deserialize(d)?;
        TcnNetwork::from_file(file).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_window(seed: u64, cfg: &TcnConfig) -> Vec<f64> {
        let mut r = rng::stream(seed, &[]);
        let n = Normal::new(0.0, 1.0).unwrap();
        (0..cfg.window_len()).map(|_| n.sample(&mut r)).collect()
    }

    fn small(activation: Activation) -> TcnConfig {
        TcnConfig { hidden_channels: 6, latent_dim: 8, activation, seed: 3, ..Default::default() }
    }

    #[test]
    fn receptive_field_covers_window() {
        let cfg = TcnConfig::default();
        assert_eq!(cfg.receptive_field(), 8);
        assert!(cfg.receptive_field() >= cfg.seq_len);
        let bad = TcnConfig { dilations: vec![1], ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let net = TcnNetwork::zeros(TcnConfig::default()).unwrap();
        let out = net.forward(&random_window(1, net.config())).unwrap();
        assert_eq!(out.probs, vec![1.0 / 3.0; 3]);
        assert_eq!(out.latent.len(), 256);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = TcnNetwork::zeros(TcnConfig::default()).unwrap();
        assert!(matches!(net.forward(&[0.0; 54]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn probs_normalized_and_reproducible() {
        let cfg = TcnConfig { seed: 9, ..Default::default() };
        let a = TcnNetwork::new(cfg.clone()).unwrap();
        let b = TcnNetwork::new(cfg).unwrap();
        let w = random_window(2, a.config());
        let oa = a.forward(&w).unwrap();
        assert!((oa.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(oa, b.forward(&w).unwrap());
    }

    #[test]
    fn intermediate_taps_are_causal() {
        let net = TcnNetwork::new(TcnConfig { seed: 5, ..Default::default() }).unwrap();
        let cfg = net.config().clone();
        let base = random_window(4, &cfg);
        let taps = net.block_outputs(&base).unwrap();
        for future in 1..cfg.seq_len {
            let mut w = base.clone();
            for c in 0..cfg.in_channels {
                w[c * cfg.seq_len + future] += 3.7;
            }
            let perturbed = net.block_outputs(&w).unwrap();
            for (a, b) in taps.iter().zip(&perturbed) {
                for ch in 0..cfg.hidden_channels {
                    for t in 0..future {
                        assert_eq!(a[ch * cfg.seq_len + t], b[ch * cfg.seq_len + t]);
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_check_small_relu_net() {
        let net = TcnNetwork::new(small(Activation::Relu)).unwrap();
        for s in 0..3 {
            let w = random_window(10 + s, net.config());
            let err = net.gradient_check(&w, (s % 3) as usize, 60, s).unwrap();
            assert!(err < 1e-3, "relative error {err}");
        }
    }

    #[test]
    fn gradient_check_linear_net_is_tight() {
        let net = TcnNetwork::new(small(Activation::Identity)).unwrap();
        let w = random_window(21, net.config());
        let err = net.gradient_check(&w, 1, 100, 7).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn stationary_point_has_tiny_gradient() {
        let mut net = TcnNetwork::new(TcnConfig { seed: 1, ..Default::default() }).unwrap();
        net.tensor_mut("head.weight").unwrap().fill(0.0);
        net.tensor_mut("head.bias").unwrap().copy_from_slice(&[60.0, 0.0, 0.0]);
        let g = net.gradient(&random_window(3, net.config()), 0).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn memorizes_two_repeated_instances() {
        let cfg = TcnConfig {
            hidden_channels: 16,
            latent_dim: 32,
            n_classes: 2,
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-2,
            dropout: 0.0,
            seed: 2,
            ..Default::default()
        };
        let a = random_window(1, &cfg);
        let b = random_window(2, &cfg);
        let windows: Vec<Vec<f64>> = (0..32).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let (net, hist) = train(TcnNetwork::new(cfg).unwrap(), &windows, &labels).unwrap();
        assert!(*hist.epoch_loss.last().unwrap() < 1e-3, "{:?}", hist.epoch_loss.last());
        assert!(net.forward(&a).unwrap().probs[0] > 0.99);
    }

    #[test]
    fn single_class_is_rejected() {
        let cfg = small(Activation::Relu);
        let net = TcnNetwork::new(cfg.clone()).unwrap();
        let w = vec![random_window(1, &cfg)];
        assert!(matches!(train(net, &w, &[1]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn weights_json_round_trip() {
        let net = TcnNetwork::new(small(Activation::Relu)).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: TcnNetwork = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        let file = net.to_file();
        assert_eq!(file.layers[0].name, "block0.conv1.weight");
        assert_eq!(file.layers[0].shape, vec![6, 11, 2]);
        let mut bad = file;
        bad.format_version = 99;
        assert!(matches!(TcnNetwork::from_file(bad), Err(Error::FormatVersion { .. })));
    }
}
