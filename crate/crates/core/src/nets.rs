//! Parameterized function approximators: online and EMA-target encoders,
//! decoder, latent dynamics, reward predictor, policy, and the bilinear
//! similarity matrix.
//!
//! Every network is a plain MLP with tanh hidden layers. Each has two
//! forward routes: a graph route used for training (differentiable) and a
//! straight-line route used for acting and evaluation; tests hold the two
//! against each other.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Soft clamp range for the policy's log standard deviation head.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputSquash {
    Linear,
    /// `(1 + tanh(x/2)) / 2`, mapping to (0, 1).
    Sigmoid,
}

/// Network geometry shared by all parameter sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetDims {
    /// Flattened crop size consumed by the encoder (h * w).
    pub crop_pixels: usize,
    /// Latent dimension D.
    pub latent: usize,
    /// Action dimension A.
    pub action: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
}

impl NetDims {
    pub fn standard(action: usize) -> Self {
        NetDims {
            crop_pixels: 1024,
            latent: 32,
            action,
            hidden: vec![128, 128],
        }
    }

    /// Tiny geometry for gradient-check suites.
    pub fn toy() -> Self {
        NetDims {
            crop_pixels: 16,
            latent: 4,
            action: 2,
            hidden: vec![8],
        }
    }
}

/// Multilayer perceptron with tanh hidden activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    output: OutputSquash,
}

fn xavier_uniform(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

impl Mlp {
    /// Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases.
    pub fn new(sizes: &[usize], output: OutputSquash, rng: &mut ChaCha20Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::contract(format!("Mlp: bad layer sizes {:?}", sizes)));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            weights.push(Tensor::new(vec![fi, fo], xavier_uniform(rng, fi, fo))?);
            biases.push(Tensor::zeros(vec![fo]));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            output,
        })
    }

    /// All-zero parameters (closed-form test fixture).
    pub fn zeros(sizes: &[usize], output: OutputSquash) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::contract(format!("Mlp: bad layer sizes {:?}", sizes)));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            weights.push(Tensor::zeros(vec![w[0], w[1]]));
            biases.push(Tensor::zeros(vec![w[1]]));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
            output,
        })
    }

    /// Rebuilds an MLP from explicit layer tensors (checkpoint load).
    pub fn from_layers(weights: Vec<Tensor>, biases: Vec<Tensor>, output: OutputSquash) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::contract("Mlp::from_layers: layer count mismatch"));
        }
        let mut sizes = vec![weights[0].shape()[0]];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.shape().len() != 2 || b.shape().len() != 1 || w.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {}: weight {:?} bias {:?}", i, w.shape(), b.shape()),
                ));
            }
            if w.shape()[0] != *sizes.last().unwrap() {
                return Err(Error::shape(
                    "Mlp::from_layers",
                    format!("layer {} input {} does not chain", i, w.shape()[0]),
                ));
            }
            sizes.push(w.shape()[1]);
        }
        Ok(Mlp {
            sizes,
            weights,
            biases,
            output,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn output_squash(&self) -> OutputSquash {
        self.output
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameter tensors in canonical order: w0, b0, w1, b1, ...
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push(format!("{}.w{}", prefix, i));
            out.push(format!("{}.b{}", prefix, i));
        }
        out
    }

    /// Replaces parameters from canonical order, validating shapes.
    pub fn set_param_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != 2 * self.weights.len() {
            return Err(Error::contract(format!(
                "set_param_tensors: want {} tensors, got {}",
                2 * self.weights.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            let slot = if i % 2 == 0 {
                &self.weights[i / 2]
            } else {
                &self.biases[i / 2]
            };
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    "set_param_tensors",
                    format!("slot {}: {:?} vs {:?}", i, slot.shape(), t.shape()),
                ));
            }
        }
        for (i, t) in tensors.iter().enumerate() {
            if i % 2 == 0 {
                self.weights[i / 2] = t.detach();
            } else {
                self.biases[i / 2] = t.detach();
            }
        }
        Ok(())
    }

    pub fn congruent(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes
    }

    /// Attaches the parameters to a graph. `trainable` leaves receive
    /// gradient entries; constant lifts are how the policy loss sees the
    /// world model.
    pub fn lift(&self, g: &Graph, trainable: bool) -> LiftedMlp {
        LiftedMlp {
            weights: self.weights.iter().map(|w| g.leaf(w, trainable)).collect(),
            biases: self.biases.iter().map(|b| g.leaf(b, trainable)).collect(),
            output: self.output,
            sizes: self.sizes.clone(),
        }
    }

    /// Straight-line forward pass on raw data: `x` holds `batch` rows of
    /// `input_dim` values. Independent of the graph route.
    pub fn forward_plain(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        if x.len() != batch * self.input_dim() {
            return Err(Error::shape(
                "mlp-forward",
                format!(
                    "input length {} != batch {} x input dim {}",
                    x.len(),
                    batch,
                    self.input_dim()
                ),
            ));
        }
        let mut cur = x.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            let wd = w.data();
            let bd = b.data();
            let mut next = vec![0.0; batch * fo];
            for r in 0..batch {
                let row = &cur[r * fi..(r + 1) * fi];
                let out = &mut next[r * fo..(r + 1) * fo];
                out.copy_from_slice(bd);
                for (i, &xv) in row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd[i * fo..(i + 1) * fo];
                    for o in 0..fo {
                        out[o] += xv * wrow[o];
                    }
                }
            }
            let last = l + 1 == self.weights.len();
            if !last {
                for v in &mut next {
                    *v = v.tanh();
                }
            } else if self.output == OutputSquash::Sigmoid {
                for v in &mut next {
                    *v = 0.5 * (1.0 + (0.5 * *v).tanh());
                }
            }
            cur = next;
        }
        Ok(cur)
    }
}

/// Graph-attached view of an [`Mlp`]'s parameters.
#[derive(Debug, Clone)]
pub struct LiftedMlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    output: OutputSquash,
    sizes: Vec<usize>,
}

impl LiftedMlp {
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Attached parameter tensors in canonical order: w0, b0, w1, b1, ...
    pub fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }

    /// Differentiable forward pass on a `[batch, input_dim]` tensor.
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::shape(
                "mlp-forward",
                format!(
                    "input {:?}, want [batch, {}]",
                    x.shape(),
                    self.input_dim()
                ),
            ));
        }
        let batch = x.shape()[0];
        let mut cur = x.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let fo = w.shape()[1];
            let z = g.matmul(&cur, w)?;
            let bb = g.broadcast_to(b, &[batch, fo])?;
            let z = g.add(&z, &bb)?;
            let last = l + 1 == self.weights.len();
            cur = if !last {
                g.tanh(&z)?
            } else {
                match self.output {
                    OutputSquash::Linear => z,
                    OutputSquash::Sigmoid => {
                        let half = g.scale(&z, 0.5)?;
                        let t = g.tanh(&half)?;
                        g.scale(&g.offset(&t, 1.0)?, 0.5)?
                    }
                }
            };
        }
        Ok(cur)
    }
}

/// Whether an action is sampled or taken at the distribution mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Mean,
}

/// Standard normal draw via Box-Muller; two uniform draws per call.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `[rows, cols]` tensor of standard normal draws, row-major order.
pub fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data by construction")
}

fn soft_clamp_log_std(raw: f64) -> f64 {
    let center = 0.5 * (LOG_STD_MAX + LOG_STD_MIN);
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    center + half * raw.tanh()
}

/// Splits a policy head output `[batch, 2A]` into the action mean and the
/// soft-clamped log standard deviation, both `[batch, A]`.
pub fn policy_heads(g: &Graph, head_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let cols = *head_out
        .shape()
        .last()
        .ok_or_else(|| Error::shape("policy_heads", "scalar input"))?;
    if cols % 2 != 0 || cols == 0 {
        return Err(Error::shape(
            "policy_heads",
            format!("last axis {} is not 2 x action dim", cols),
        ));
    }
    let a = cols / 2;
    let mean = g.slice_last(head_out, 0, a)?;
    let raw = g.slice_last(head_out, a, a)?;
    let center = 0.5 * (LOG_STD_MAX + LOG_STD_MIN);
    let half = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
    let log_std = g.offset(&g.scale(&g.tanh(&raw)?, half)?, center)?;
    Ok((mean, log_std))
}

/// Differentiable reparameterized action: `tanh(mean + exp(log_std) * noise)`.
/// `noise` must be a `[batch, A]` tensor of pre-drawn standard normals.
pub fn policy_sample(g: &Graph, policy: &LiftedMlp, z: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let head = policy.forward(g, z)?;
    let (mean, log_std) = policy_heads(g, &head)?;
    if noise.shape() != mean.shape() {
        return Err(Error::shape(
            "policy_sample",
            format!("noise {:?} vs mean {:?}", noise.shape(), mean.shape()),
        ));
    }
    let std = g.exp(&log_std)?;
    let pre = g.add(&mean, &g.mul(&std, noise)?)?;
    g.tanh(&pre)
}

/// Action selection on raw latents, used when interacting with environments.
/// Stochastic mode draws its noise from `rng`; mean mode is deterministic.
pub fn policy_act<R: Rng>(policy: &Mlp, z: &[f64], mode: ActMode, rng: &mut R) -> Result<Vec<f64>> {
    if z.len() != policy.input_dim() {
        return Err(Error::shape(
            "policy_act",
            format!("latent length {} != {}", z.len(), policy.input_dim()),
        ));
    }
    let out = policy.forward_plain(z, 1)?;
    let a = out.len() / 2;
    let mut action = Vec::with_capacity(a);
    for i in 0..a {
        let mean = out[i];
        let pre = match mode {
            ActMode::Mean => mean,
            ActMode::Stochastic => {
                let std = soft_clamp_log_std(out[a + i]).exp();
                mean + std * standard_normal(rng)
            }
        };
        action.push(pre.tanh());
    }
    Ok(action)
}

/// Exponential-moving-average update of the target encoder:
/// every target parameter becomes `m * target + (1 - m) * online`.
/// Never touches `online`.
pub fn ema_update(target: &mut Mlp, online: &Mlp, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::contract(format!(
            "ema_update: momentum {} outside [0, 1]",
            m
        )));
    }
    if !target.congruent(online) {
        return Err(Error::shape(
            "ema_update",
            format!("target {:?} vs online {:?}", target.sizes, online.sizes),
        ));
    }
    let blend = |t: &Tensor, o: &Tensor| -> Result<Tensor> {
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(o.data())
            .map(|(&tv, &ov)| m * tv + (1.0 - m) * ov)
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    for i in 0..target.weights.len() {
        target.weights[i] = blend(&target.weights[i], &online.weights[i])?;
        target.biases[i] = blend(&target.biases[i], &online.biases[i])?;
    }
    Ok(())
}

/// The five trainable networks, the EMA target encoder, and the bilinear
/// similarity matrix W.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: NetDims,
    pub encoder: Mlp,
    pub target_encoder: Mlp,
    pub decoder: Mlp,
    pub dynamics: Mlp,
    pub reward: Mlp,
    pub policy: Mlp,
    /// D x D matrix for bilinear similarity, identity at init.
    pub bilinear: Tensor,
}

fn identity_matrix(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], data).expect("square shape")
}

impl ModelParams {
    /// Seeded initialization. The target encoder starts as an exact copy of
    /// the online encoder.
    pub fn new(dims: &NetDims, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = dims.latent;
        let a = dims.action;
        let mut enc_sizes = vec![dims.crop_pixels];
        enc_sizes.extend(&dims.hidden);
        enc_sizes.push(d);
        let mut dec_sizes = vec![d];
        dec_sizes.extend(&dims.hidden);
        dec_sizes.push(dims.crop_pixels);
        let mut dyn_sizes = vec![d + a];
        dyn_sizes.extend(&dims.hidden);
        dyn_sizes.push(d);
        let mut rew_sizes = vec![d + a];
        rew_sizes.extend(&dims.hidden);
        rew_sizes.push(1);
        let mut pol_sizes = vec![d];
        pol_sizes.extend(&dims.hidden);
        pol_sizes.push(2 * a);

        let encoder = Mlp::new(&enc_sizes, OutputSquash::Linear, &mut rng)?;
        let decoder = Mlp::new(&dec_sizes, OutputSquash::Sigmoid, &mut rng)?;
        let dynamics = Mlp::new(&dyn_sizes, OutputSquash::Linear, &mut rng)?;
        let reward = Mlp::new(&rew_sizes, OutputSquash::Linear, &mut rng)?;
        let policy = Mlp::new(&pol_sizes, OutputSquash::Linear, &mut rng)?;
        let target_encoder = encoder.clone();
        Ok(ModelParams {
            dims: dims.clone(),
            encoder,
            target_encoder,
            decoder,
            dynamics,
            reward,
            policy,
            bilinear: identity_matrix(d),
        })
    }

    /// Names of the gradient-updated parameters, canonical order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = self.encoder.param_names("encoder");
        names.extend(self.decoder.param_names("decoder"));
        names.extend(self.dynamics.param_names("dynamics"));
        names.extend(self.reward.param_names("reward"));
        names.extend(self.policy.param_names("policy"));
        names.push("bilinear.w".to_string());
        names
    }

    /// Gradient-updated parameter tensors, canonical order (matching
    /// [`ModelParams::trainable_names`]).
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        let mut out = self.encoder.param_tensors();
        out.extend(self.decoder.param_tensors());
        out.extend(self.dynamics.param_tensors());
        out.extend(self.reward.param_tensors());
        out.extend(self.policy.param_tensors());
        out.push(self.bilinear.clone());
        out
    }

    /// Writes back tensors produced by an optimizer step, canonical order.
    pub fn set_trainable_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let counts = [
            2 * self.encoder.layer_count(),
            2 * self.decoder.layer_count(),
            2 * self.dynamics.layer_count(),
            2 * self.reward.layer_count(),
            2 * self.policy.layer_count(),
            1,
        ];
        let total: usize = counts.iter().sum();
        if tensors.len() != total {
            return Err(Error::contract(format!(
                "set_trainable_tensors: want {} tensors, got {}",
                total,
                tensors.len()
            )));
        }
        let mut at = 0;
        self.encoder.set_param_tensors(&tensors[at..at + counts[0]])?;
        at += counts[0];
        self.decoder.set_param_tensors(&tensors[at..at + counts[1]])?;
        at += counts[1];
        self.dynamics.set_param_tensors(&tensors[at..at + counts[2]])?;
        at += counts[2];
        self.reward.set_param_tensors(&tensors[at..at + counts[3]])?;
        at += counts[3];
        self.policy.set_param_tensors(&tensors[at..at + counts[4]])?;
        at += counts[4];
        if tensors[at].shape() != self.bilinear.shape() {
            return Err(Error::shape(
                "set_trainable_tensors",
                format!("bilinear {:?}", tensors[at].shape()),
            ));
        }
        self.bilinear = tensors[at].detach();
        Ok(())
    }

    /// Encodes a batch of flattened crops with the online encoder
    /// (straight-line route).
    pub fn encode_plain(&self, crops: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.encoder.forward_plain(crops, batch)
    }
}
