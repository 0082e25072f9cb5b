//! The training objective: InfoNCE contrastive loss, latent dynamics and
//! reward prediction loss, observation reconstruction loss, imagined-reward
//! policy loss, and their weighted combination.
//!
//! All losses are pure functions over graph tensors. Positives always enter
//! InfoNCE as constants (the target encoder is never differentiated), and
//! the policy loss sees the world model as constants, so one backward pass
//! of the total routes gradients exactly where they belong.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{policy_sample, LiftedMlp};
use crate::tensor::{Graph, Tensor};

/// Similarity used inside InfoNCE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Cosine,
    Bilinear,
}

/// Loss weights and schedule constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Discount factor for imagined rewards.
    pub gamma: f64,
    /// Imagination rollout length H.
    pub horizon: usize,
    /// EMA momentum for the target encoder.
    pub momentum: f64,
    pub sim: SimKind,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.1,
            gamma: 0.99,
            horizon: 15,
            momentum: 0.95,
            sim: SimKind::Cosine,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::contract(format!("tau {} must be > 0", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::contract(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::contract("loss weights must be non-negative"));
        }
        if self.horizon < 1 {
            return Err(Error::contract("horizon must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// The four component losses plus the weighted total, as plain values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub policy: f64,
    pub dynamics: f64,
    pub infonce: f64,
    pub reconstruction: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted recombination; by construction equal to `total` with the
    /// same floating-point arithmetic.
    pub fn recombine(&self, hyper: &Hyperparams) -> f64 {
        self.policy
            + hyper.lambda1 * self.dynamics
            + hyper.lambda2 * self.infonce
            + hyper.lambda3 * self.reconstruction
    }
}

/// Scalar similarity between two latent vectors. The bilinear variant needs
/// the D x D matrix `w`; cosine rejects zero vectors.
pub fn similarity(u: &[f64], v: &[f64], kind: SimKind, w: Option<&Tensor>) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::shape(
            "similarity",
            format!("lengths {} vs {}", u.len(), v.len()),
        ));
    }
    match kind {
        SimKind::Cosine => {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::domain("similarity", "cosine of a zero vector"));
            }
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            Ok(dot / (nu * nv))
        }
        SimKind::Bilinear => {
            let w = w.ok_or_else(|| Error::contract("similarity: bilinear needs W"))?;
            let d = u.len();
            if w.shape() != [d, d] {
                return Err(Error::shape(
                    "similarity",
                    format!("W {:?} for dimension {}", w.shape(), d),
                ));
            }
            let wd = w.data();
            let mut acc = 0.0;
            for (i, &ui) in u.iter().enumerate() {
                let mut row = 0.0;
                for (j, &vj) in v.iter().enumerate() {
                    row += wd[i * d + j] * vj;
                }
                acc += ui * row;
            }
            Ok(acc)
        }
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn normalize_rows(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut out = data.to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::domain(
                "infonce_loss",
                format!("cosine of a zero positive latent at row {}", r),
            ));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(out)
}

/// InfoNCE over a batch of anchor/positive latent pairs.
///
/// For each anchor `i`, the positive `i` is classified against all `N`
/// positives at temperature tau; the loss is the mean negative log
/// probability. Positives are treated as constants: no gradient reaches
/// them. Gradients flow into the anchors (and W for bilinear similarity).
pub fn infonce_loss(
    g: &Graph,
    anchors: &Tensor,
    positives: &Tensor,
    hyper: &Hyperparams,
    w: Option<&Tensor>,
) -> Result<Tensor> {
    if !(hyper.tau > 0.0) {
        return Err(Error::contract(format!(
            "infonce_loss: tau {} must be > 0",
            hyper.tau
        )));
    }
    if anchors.shape().len() != 2 || positives.shape().len() != 2 {
        return Err(Error::shape(
            "infonce_loss",
            format!("{:?} and {:?}", anchors.shape(), positives.shape()),
        ));
    }
    if anchors.shape() != positives.shape() {
        return Err(Error::shape(
            "infonce_loss",
            format!("anchors {:?} vs positives {:?}", anchors.shape(), positives.shape()),
        ));
    }
    let (n, d) = (anchors.shape()[0], anchors.shape()[1]);
    if n == 0 {
        return Err(Error::contract("infonce_loss: empty batch"));
    }

    // similarity matrix S[i, j] = sim(anchor_i, positive_j), positives constant
    let sims = match hyper.sim {
        SimKind::Cosine => {
            let a_n = g.l2_normalize_last(anchors)?;
            let p_n = normalize_rows(positives.data(), n, d)?;
            let p_t = g.constant(&Tensor::new(vec![d, n], transpose(&p_n, n, d))?);
            g.matmul(&a_n, &p_t)?
        }
        SimKind::Bilinear => {
            let w = w.ok_or_else(|| Error::contract("infonce_loss: bilinear needs W"))?;
            if w.shape() != [d, d] {
                return Err(Error::shape(
                    "infonce_loss",
                    format!("W {:?} for latent dimension {}", w.shape(), d),
                ));
            }
            let p_t = g.constant(&Tensor::new(vec![d, n], transpose(positives.data(), n, d))?);
            let aw = g.matmul(anchors, w)?;
            g.matmul(&aw, &p_t)?
        }
    };

    let logits = g.scale(&sims, 1.0 / hyper.tau)?;
    let probs = g.softmax_last(&logits)?;
    let log_probs = g.log(&probs).map_err(|e| match e {
        Error::Domain { .. } => Error::non_finite("infonce_loss: softmax underflow"),
        other => other,
    })?;
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let mask = g.constant(&Tensor::new(vec![n, n], eye)?);
    let diag = g.mul(&log_probs, &mask)?;
    g.scale(&g.sum(&diag)?, -1.0 / n as f64)
}

/// Latent dynamics and reward prediction loss over a batch of sequences.
///
/// `latents` holds T+1 per-step `[N, D]` tensors, `actions` and `rewards`
/// hold T per-step `[N, A]` and `[N, 1]` tensors. Per step the squared
/// latent prediction error is summed over coordinates and added to the
/// squared reward error; the result is averaged over batch and time.
pub fn dynamics_loss(
    g: &Graph,
    latents: &[Tensor],
    actions: &[Tensor],
    rewards: &[Tensor],
    dynamics: &LiftedMlp,
    reward: &LiftedMlp,
) -> Result<Tensor> {
    if latents.len() < 2 {
        return Err(Error::contract("dynamics_loss: need at least 2 latents"));
    }
    let t_len = latents.len() - 1;
    if actions.len() != t_len || rewards.len() != t_len {
        return Err(Error::contract(format!(
            "dynamics_loss: {} latents need {} actions/rewards, got {}/{}",
            latents.len(),
            t_len,
            actions.len(),
            rewards.len()
        )));
    }
    let n = latents[0].shape()[0];

    let mut acc: Option<Tensor> = None;
    for t in 0..t_len {
        let x = g.concat(&[&latents[t], &actions[t]])?;
        let pred = dynamics.forward(g, &x)?;
        let err = g.sub(&pred, &latents[t + 1])?;
        let latent_term = g.sum(&g.square(&err)?)?;
        let rhat = reward.forward(g, &x)?;
        let rerr = g.sub(&rhat, &rewards[t])?;
        let reward_term = g.sum(&g.square(&rerr)?)?;
        let step = g.add(&latent_term, &reward_term)?;
        acc = Some(match acc {
            Some(a) => g.add(&a, &step)?,
            None => step,
        });
    }
    g.scale(&acc.unwrap(), 1.0 / (n * t_len) as f64)
}

/// Mean over the batch of the summed squared pixel error.
pub fn reconstruction_loss(g: &Graph, targets: &Tensor, reconstructions: &Tensor) -> Result<Tensor> {
    if targets.shape() != reconstructions.shape() {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("{:?} vs {:?}", targets.shape(), reconstructions.shape()),
        ));
    }
    if targets.shape().len() != 2 {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("want [batch, pixels], got {:?}", targets.shape()),
        ));
    }
    let n = targets.shape()[0];
    let err = g.sub(reconstructions, targets)?;
    g.scale(&g.sum(&g.square(&err)?)?, 1.0 / n as f64)
}

/// Pre-drawn standard normal noise for a reparameterized imagination
/// rollout: one `[N, A]` tensor per step. Drawing it up front keeps the
/// loss a deterministic function, which the gradient checks require.
#[derive(Debug, Clone)]
pub struct PolicyNoise(pub Vec<Tensor>);

impl PolicyNoise {
    pub fn draw<R: rand::Rng>(rng: &mut R, horizon: usize, batch: usize, action_dim: usize) -> Self {
        PolicyNoise(
            (0..horizon)
                .map(|_| crate::nets::normal_matrix(rng, batch, action_dim))
                .collect(),
        )
    }
}

/// Negative discounted imagined return over an H-step latent rollout.
///
/// The rollout starts from `z0` (entered as constants), samples actions with
/// the reparameterized policy, and steps entirely through the learned
/// dynamics. `dynamics` and `reward` must be constant lifts so gradients
/// reach the policy only.
pub fn policy_loss(
    g: &Graph,
    z0: &Tensor,
    policy: &LiftedMlp,
    dynamics: &LiftedMlp,
    reward: &LiftedMlp,
    hyper: &Hyperparams,
    noise: &PolicyNoise,
) -> Result<Tensor> {
    if hyper.horizon < 1 {
        return Err(Error::contract("policy_loss: horizon must be >= 1"));
    }
    if noise.0.len() != hyper.horizon {
        return Err(Error::contract(format!(
            "policy_loss: {} noise steps for horizon {}",
            noise.0.len(),
            hyper.horizon
        )));
    }
    let mut z = g.constant(&z0.detach());
    let mut acc: Option<Tensor> = None;
    let mut gamma_pow = 1.0;
    for t in 1..=hyper.horizon {
        gamma_pow *= hyper.gamma;
        let step = (|| -> Result<Tensor> {
            let a = policy_sample(g, policy, &z, &g.constant(&noise.0[t - 1]))?;
            let x = g.concat(&[&z, &a])?;
            let rhat = reward.forward(g, &x)?;
            let term = g.scale(&g.mean(&rhat)?, gamma_pow)?;
            z = dynamics.forward(g, &x)?;
            Ok(term)
        })()
        .map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!(
                "imagination step {}: {}",
                t, context
            )),
            other => other,
        })?;
        acc = Some(match acc {
            Some(prev) => g.add(&prev, &step)?,
            None => step,
        });
    }
    g.scale(&acc.unwrap(), -1.0)
}

/// The component scalars entering the weighted total.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub policy: Tensor,
    pub dynamics: Tensor,
    pub infonce: Tensor,
    pub reconstruction: Tensor,
}

/// The weighted total plus the weighted component nodes (kept for isolated
/// telemetry backward passes) and the plain-value breakdown.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Tensor,
    pub weighted_dynamics: Tensor,
    pub weighted_infonce: Tensor,
    pub weighted_reconstruction: Tensor,
    pub breakdown: LossBreakdown,
}

/// Combines the components: `policy + l1 * dynamics + l2 * infonce +
/// l3 * reconstruction`, left to right.
pub fn total_loss(g: &Graph, parts: &LossParts, hyper: &Hyperparams) -> Result<TotalLoss> {
    for (name, part) in [
        ("policy", &parts.policy),
        ("dynamics", &parts.dynamics),
        ("infonce", &parts.infonce),
        ("reconstruction", &parts.reconstruction),
    ] {
        let v = part.item()?;
        if !v.is_finite() {
            return Err(Error::non_finite(format!("total_loss: {} component", name)));
        }
    }
    let wd = g.scale(&parts.dynamics, hyper.lambda1)?;
    let wi = g.scale(&parts.infonce, hyper.lambda2)?;
    let wr = g.scale(&parts.reconstruction, hyper.lambda3)?;
    let total = g.add(&g.add(&g.add(&parts.policy, &wd)?, &wi)?, &wr)?;
    let breakdown = LossBreakdown {
        policy: parts.policy.item()?,
        dynamics: parts.dynamics.item()?,
        infonce: parts.infonce.item()?,
        reconstruction: parts.reconstruction.item()?,
        total: total.item()?,
    };
    Ok(TotalLoss {
        total,
        weighted_dynamics: wd,
        weighted_infonce: wi,
        weighted_reconstruction: wr,
        breakdown,
    })
}
