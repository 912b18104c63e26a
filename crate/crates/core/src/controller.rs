//! PPO actor-critic controller acting on VAE latents.
//!
//! One shared `tanh` layer feeds a 9-way actor head (action logits) and a
//! scalar critic head. Training is the clipped-surrogate PPO update with GAE
//! advantages; gradients are written out by hand like the rest of `nn`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, Action, Observation, RewardWeights, TrackSpec, NUM_ACTIONS};
use crate::episodes::{Feedback, Policy};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Adam, AdamConfig, Dense, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vae::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub latent_dim: usize,
    pub hidden: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            latent_dim: crate::vae::LATENT_DIM,
            hidden: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Controller<T> {
    pub config: ControllerConfig,
    pub params: ParamSet<T>,
    shared: Dense,
    actor: Dense,
    critic: Dense,
}

/// Output of [`Controller::act`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub logprob: f64,
    pub value: f64,
}

struct Pass<T> {
    hidden: Tensor<T>,
    logits: Tensor<T>,
    values: Tensor<T>,
}

impl<T: Scalar> Controller<T> {
    pub fn new(config: ControllerConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.hidden == 0 {
            return Err(Error::InvalidArgument(format!("invalid controller config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let shared_bound = (3.0 / config.latent_dim as f64).sqrt();
        let shared = Dense::with_bound(&mut params, "ctrl.shared", config.latent_dim, config.hidden, shared_bound, &mut rng);
        // small actor init keeps the initial policy close to uniform
        let actor = Dense::with_bound(&mut params, "ctrl.actor", config.hidden, NUM_ACTIONS, 0.01, &mut rng);
        let critic_bound = 1.0 / (config.hidden as f64).sqrt();
        let critic = Dense::with_bound(&mut params, "ctrl.critic", config.hidden, 1, critic_bound, &mut rng);
        Ok(Self {
            config,
            params,
            shared,
            actor,
            critic,
        })
    }

    fn pass(&self, z: &Tensor<T>) -> Result<Pass<T>> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.latent_dim {
            return Err(Error::shape("policy_forward", &[z.rows(), self.config.latent_dim], z.shape()));
        }
        let hidden = self.shared.forward(&self.params, z)?.map(|v| v.tanh());
        let logits = self.actor.forward(&self.params, &hidden)?;
        let values = self.critic.forward(&self.params, &hidden)?;
        Ok(Pass { hidden, logits, values })
    }

    /// Batched forward pass: logits `[n, 9]` and one value per row of `z` `[n, latent]`.
    pub fn forward(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let p = self.pass(z)?;
        Ok((p.logits, p.values.into_data()))
    }

    pub fn policy_forward(&self, z: &[T]) -> Result<(Vec<T>, T)> {
        let z = Tensor::from_vec(&[1, z.len()], z.to_vec())?;
        let (logits, values) = self.forward(&z)?;
        Ok((logits.into_data(), values[0]))
    }

    pub fn value(&self, z: &[T]) -> Result<f64> {
        Ok(self.policy_forward(z)?.1.as_f64())
    }

    /// Greedy picks the arg-max logit (lowest index on ties); otherwise samples
    /// from the softmax.
    pub fn act<R: Rng + ?Sized>(&self, z: &[T], rng: &mut R, greedy: bool) -> Result<Decision> {
        let (logits, value) = self.policy_forward(z)?;
        let logits: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        let index = if greedy { argmax(&logits) } else { sample_categorical(&logits, rng) };
        Ok(Decision {
            action: Action::new(index)?,
            logprob: log_softmax(&logits)[index],
            value: value.as_f64(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load::<T>(path)?;
        let config: ControllerConfig = serde_json::from_str(&meta).map_err(|e| Error::Format {
            path: path.into(),
            reason: format!("controller metadata: {e}"),
        })?;
        let mut ctrl = Self::new(config, 0)?;
        ctrl.params.load_from(&params)?;
        Ok(ctrl)
    }

    pub fn cast<U: Scalar>(&self) -> Controller<U> {
        Controller {
            config: self.config,
            params: self.params.cast(),
            shared: self.shared.clone(),
            actor: self.actor.clone(),
            critic: self.critic.clone(),
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::scalar::log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().map(|lp| -lp.exp() * lp).sum()
}

fn sample_categorical<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let logp = log_softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logits.len() - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs_per_batch: usize,
    pub minibatch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub rollout_horizon: usize,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    /// Rewards are multiplied by this before GAE so the critic regresses
    /// returns of order one.
    pub reward_scale: f64,
}

impl PpoConfig {
    pub fn online() -> Self {
        Self {
            clip_epsilon: 0.1,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs_per_batch: 4,
            minibatch: 256,
            value_coef: 0.5,
            entropy_coef: 0.01,
            rollout_horizon: 512,
            lr: 3e-4,
            max_grad_norm: Some(0.5),
            reward_scale: 0.1,
        }
    }

    /// Dream training: same as online with the ratio clip reduced 10× to 0.01.
    pub fn offline() -> Self {
        Self {
            clip_epsilon: 0.01,
            ..Self::online()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.clip_epsilon > 0.0
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.epochs_per_batch > 0
            && self.minibatch > 0
            && self.rollout_horizon > 0
            && self.lr > 0.0
            && self.reward_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid PPO config {self:?}")))
        }
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self::online()
    }
}

/// GAE(λ) with the recursion cut wherever `dones[t]` is set. `bootstrap` is the
/// value estimate of the state following the last step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::InvalidArgument(format!(
            "GAE inputs misaligned: {n} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        adv[t] = gae;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// One uninterrupted stretch of experience from a single environment or dream
/// session, in raw reward units.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segment<T> {
    /// Flattened latents, `latent_dim` per step.
    pub z: Vec<T>,
    pub actions: Vec<Action>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state after the last step; ignored when that step is done.
    pub bootstrap: f64,
}

impl<T: Scalar> Segment<T> {
    pub fn new() -> Self {
        Self {
            z: Vec::new(),
            actions: Vec::new(),
            logprobs: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
            bootstrap: 0.0,
        }
    }

    pub fn push(&mut self, z: &[T], decision: Decision, reward: f64, done: bool) {
        self.z.extend_from_slice(z);
        self.actions.push(decision.action);
        self.logprobs.push(decision.logprob);
        self.values.push(decision.value);
        self.rewards.push(reward);
        self.dones.push(done);
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn clear(&mut self) {
        *self = Self::new();
    }
}

/// Flattened PPO training data with advantages normalized per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch<T> {
    /// `[n, latent_dim]`
    pub z: Tensor<T>,
    pub actions: Vec<Action>,
    pub logprob_old: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<T: Scalar> TrajectoryBatch<T> {
    /// Runs GAE per segment on scaled rewards, then normalizes the concatenated
    /// advantages to mean 0 and standard deviation 1.
    pub fn from_segments(latent_dim: usize, segments: &[Segment<T>], config: &PpoConfig) -> Result<Self> {
        let n: usize = segments.iter().map(Segment::len).sum();
        if n == 0 {
            return Err(Error::InvalidArgument("empty trajectory batch".into()));
        }
        let mut batch = Self {
            z: Tensor::zeros(&[n, latent_dim]),
            actions: Vec::with_capacity(n),
            logprob_old: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            values_old: Vec::with_capacity(n),
            advantages: Vec::with_capacity(n),
            returns: Vec::with_capacity(n),
        };
        let mut zs = Vec::with_capacity(n * latent_dim);
        for seg in segments {
            if seg.z.len() != seg.len() * latent_dim {
                return Err(Error::shape("trajectory batch", &[seg.len(), latent_dim], &[seg.z.len()]));
            }
            let scaled: Vec<f64> = seg.rewards.iter().map(|r| r * config.reward_scale).collect();
            let (adv, ret) = compute_gae(&scaled, &seg.values, &seg.dones, seg.bootstrap, config.gamma, config.gae_lambda)?;
            zs.extend_from_slice(&seg.z);
            batch.actions.extend_from_slice(&seg.actions);
            batch.logprob_old.extend_from_slice(&seg.logprobs);
            batch.rewards.extend_from_slice(&seg.rewards);
            batch.dones.extend_from_slice(&seg.dones);
            batch.values_old.extend_from_slice(&seg.values);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
        }
        batch.z = Tensor::from_vec(&[n, latent_dim], zs)?;
        normalize(&mut batch.advantages);
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Shifts to mean 0 and, when the spread is non-negligible, scales to std 1.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if std > 1e-8 {
            *x /= std;
        }
    }
}

/// Minibatch-mean loss terms. `total = policy + value_coef·value − entropy_coef·entropy`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoLoss {
    pub total: f64,
    /// Negated clipped surrogate.
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// PPO loss over the rows `indices` of `batch`. `clip = None` gives the
/// unclipped surrogate `ρ·A`. Also returns a per-sample kink signature (which
/// side of the clip range and which branch of the min was taken).
pub fn ppo_loss<T: Scalar>(
    ctrl: &Controller<T>,
    batch: &TrajectoryBatch<T>,
    indices: &[usize],
    clip: Option<f64>,
    config: &PpoConfig,
) -> Result<(PpoLoss, Vec<bool>)> {
    let (loss, _, kinks) = ppo_eval(ctrl, batch, indices, clip, config, false)?;
    Ok((loss, kinks))
}

pub fn ppo_loss_and_grad<T: Scalar>(
    ctrl: &Controller<T>,
    batch: &TrajectoryBatch<T>,
    indices: &[usize],
    clip: Option<f64>,
    config: &PpoConfig,
) -> Result<(PpoLoss, ParamSet<T>)> {
    let (loss, grads, _) = ppo_eval(ctrl, batch, indices, clip, config, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn ppo_eval<T: Scalar>(
    ctrl: &Controller<T>,
    batch: &TrajectoryBatch<T>,
    indices: &[usize],
    clip: Option<f64>,
    config: &PpoConfig,
    want_grad: bool,
) -> Result<(PpoLoss, Option<ParamSet<T>>, Vec<bool>)> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty PPO minibatch".into()));
    }
    let latent = ctrl.config.latent_dim;
    let rows: Vec<&[T]> = indices.iter().map(|&i| batch.z.row(i)).collect();
    let z = Tensor::stack_rows(&rows, &[latent])?;
    let pass = ctrl.pass(&z)?;
    let m = indices.len() as f64;
    let mut loss = PpoLoss::default();
    let mut kinks = Vec::with_capacity(3 * indices.len());
    let mut dlogits = Tensor::zeros(&[indices.len(), NUM_ACTIONS]);
    let mut dvalues = Tensor::zeros(&[indices.len(), 1]);
    for (r, &i) in indices.iter().enumerate() {
        let logits: Vec<f64> = pass.logits.row(r).iter().map(|v| v.as_f64()).collect();
        let logp = log_softmax(&logits);
        let probs: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
        let h: f64 = -probs.iter().zip(&logp).map(|(p, lp)| p * lp).sum::<f64>();
        let a = batch.actions[i].index();
        let adv = batch.advantages[i];
        let ratio = (logp[a] - batch.logprob_old[i]).exp();
        let unclipped = ratio * adv;
        let (objective, use_unclipped, below, above) = match clip {
            Some(eps) => {
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
                (unclipped.min(clipped), unclipped <= clipped, ratio < 1.0 - eps, ratio > 1.0 + eps)
            }
            None => (unclipped, true, false, false),
        };
        kinks.extend([below, above, use_unclipped]);
        let v = pass.values.data()[r].as_f64();
        let ret = batch.returns[i];
        loss.policy -= objective;
        loss.value += (v - ret).powi(2);
        loss.entropy += h;
        loss.mean_ratio += ratio;
        if below || above {
            loss.clip_fraction += 1.0;
        }
        if want_grad {
            let row = dlogits.row_mut(r);
            for j in 0..NUM_ACTIONS {
                let onehot = if j == a { 1.0 } else { 0.0 };
                let mut g = 0.0;
                if use_unclipped {
                    g -= adv * ratio * (onehot - probs[j]);
                }
                // dH/dl_j = -p_j (log p_j + H)
                g += config.entropy_coef * probs[j] * (logp[j] + h);
                row[j] = T::lit(g / m);
            }
            dvalues.data_mut()[r] = T::lit(2.0 * config.value_coef * (v - ret) / m);
        }
    }
    loss.policy /= m;
    loss.value /= m;
    loss.entropy /= m;
    loss.mean_ratio /= m;
    loss.clip_fraction /= m;
    loss.total = loss.policy + config.value_coef * loss.value - config.entropy_coef * loss.entropy;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("PPO loss {}", loss.total)));
    }
    if !want_grad {
        return Ok((loss, None, kinks));
    }
    let mut grads = ctrl.params.zeros_like();
    let mut dh = ctrl.actor.backward(&ctrl.params, &pass.hidden, &dlogits, &mut grads);
    let dh_critic = ctrl.critic.backward(&ctrl.params, &pass.hidden, &dvalues, &mut grads);
    dh.add_scaled(&dh_critic, T::one());
    for (g, &hv) in dh.data_mut().iter_mut().zip(pass.hidden.data()) {
        *g = *g * (T::one() - hv * hv);
    }
    ctrl.shared.backward(&ctrl.params, &z, &dh, &mut grads);
    Ok((loss, Some(grads), kinks))
}

/// Averages over all minibatch steps of one [`PpoTrainer::update`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub samples: usize,
    pub minibatches: usize,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

/// Owns a controller, its optimizer state and the minibatch shuffling RNG.
#[derive(Debug, Clone)]
pub struct PpoTrainer<T> {
    pub controller: Controller<T>,
    pub config: PpoConfig,
    adam: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> PpoTrainer<T> {
    pub fn new(controller: Controller<T>, config: PpoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(
            AdamConfig {
                max_grad_norm: config.max_grad_norm,
                ..AdamConfig::with_lr(config.lr)
            },
            &controller.params,
        );
        Ok(Self {
            controller,
            config,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `epochs_per_batch` passes over shuffled minibatches of `batch`.
    pub fn update(&mut self, batch: &TrajectoryBatch<T>) -> Result<PpoStats> {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut stats = PpoStats {
            samples: batch.len(),
            ..PpoStats::default()
        };
        for _ in 0..self.config.epochs_per_batch {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.minibatch) {
                let (loss, grads) =
                    ppo_loss_and_grad(&self.controller, batch, chunk, Some(self.config.clip_epsilon), &self.config)?;
                self.adam.step(&mut self.controller.params, &grads)?;
                stats.minibatches += 1;
                stats.mean_ratio += loss.mean_ratio;
                stats.clip_fraction += loss.clip_fraction;
                stats.policy_loss += loss.policy;
                stats.value_loss += loss.value;
                stats.entropy += loss.entropy;
            }
        }
        let k = stats.minibatches as f64;
        stats.mean_ratio /= k;
        stats.clip_fraction /= k;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        Ok(stats)
    }
}

/// Encodes each observation to its mean latent and acts greedily.
pub struct GreedyPolicy<'a, T> {
    pub encoder: &'a Vae<T>,
    pub controller: &'a Controller<T>,
}

impl<T: Scalar> Policy for GreedyPolicy<'_, T> {
    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Action> {
        let (z, _) = self.encoder.encode(obs)?;
        Ok(self.controller.act(&z, rng, true)?.action)
    }
}

/// A stochastic policy that learns while it acts: experience is buffered and a
/// PPO update runs every `rollout_horizon` steps.
pub struct PpoLearner<'a, T> {
    pub encoder: &'a Vae<T>,
    pub trainer: PpoTrainer<T>,
    pub stats: Vec<PpoStats>,
    segment: Segment<T>,
    pending: Option<(Vec<T>, Decision)>,
}

impl<'a, T: Scalar> PpoLearner<'a, T> {
    pub fn new(encoder: &'a Vae<T>, trainer: PpoTrainer<T>) -> Result<Self> {
        if encoder.latent_dim() != trainer.controller.config.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "encoder latent {} does not match controller input {}",
                encoder.latent_dim(),
                trainer.controller.config.latent_dim
            )));
        }
        Ok(Self {
            encoder,
            trainer,
            stats: Vec::new(),
            segment: Segment::new(),
            pending: None,
        })
    }

    /// Trains on whatever is buffered, bootstrapping from `next` when the last
    /// buffered step did not end its episode.
    pub fn flush(&mut self, next: Option<&Observation>) -> Result<()> {
        if self.segment.is_empty() {
            return Ok(());
        }
        let last_done = *self.segment.dones.last().expect("non-empty");
        self.segment.bootstrap = match next {
            Some(obs) if !last_done => self.trainer.controller.value(&self.encoder.encode(obs)?.0)?,
            _ => 0.0,
        };
        let batch = TrajectoryBatch::from_segments(
            self.trainer.controller.config.latent_dim,
            std::slice::from_ref(&self.segment),
            &self.trainer.config,
        )?;
        self.segment.clear();
        let stats = self.trainer.update(&batch)?;
        self.stats.push(stats);
        Ok(())
    }

    pub fn into_controller(self) -> Controller<T> {
        self.trainer.controller
    }
}

impl<T: Scalar> Policy for PpoLearner<'_, T> {
    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Action> {
        let (z, _) = self.encoder.encode(obs)?;
        let decision = self.trainer.controller.act(&z, rng, false)?;
        let action = decision.action;
        self.pending = Some((z, decision));
        Ok(action)
    }

    fn feedback(&mut self, fb: Feedback, next: &Observation) -> Result<()> {
        let (z, decision) = self
            .pending
            .take()
            .ok_or_else(|| Error::ContractViolation("feedback without a preceding act".into()))?;
        self.segment.push(&z, decision, fb.reward, fb.done);
        if self.segment.len() >= self.trainer.config.rollout_horizon {
            self.flush(Some(next))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub budget_steps: usize,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub weights: RewardWeights,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            budget_steps: 30_000,
            seed: 0,
            ppo: PpoConfig::online(),
            weights: RewardWeights::default(),
        }
    }
}

/// One finished training episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Environment steps consumed when the episode ended.
    pub step: usize,
    pub episode_return: f64,
    pub norm_d: f64,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,episode_return,norm_d\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.step, p.episode_return, p.norm_d));
    }
    s
}

#[derive(Debug, Clone)]
pub struct OnlineResult<T> {
    pub controller: Controller<T>,
    pub curve: Vec<CurvePoint>,
    pub stats: Vec<PpoStats>,
    pub env_steps: usize,
}

/// Online PPO against the simulator, cycling over `tracks` without obstacles.
/// Consumes exactly `budget_steps` environment steps; an episode cut short by
/// the budget is trained on but not reported in the curve.
pub fn train_online<T: Scalar>(
    controller: Controller<T>,
    encoder: &Vae<T>,
    tracks: &[TrackSpec],
    config: &OnlineConfig,
) -> Result<OnlineResult<T>> {
    if tracks.is_empty() {
        return Err(Error::InvalidArgument("online training needs at least one track".into()));
    }
    let trainer = PpoTrainer::new(controller, config.ppo, config.seed ^ 0x5EED)?;
    let mut learner = PpoLearner::new(encoder, trainer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::new();
    let mut steps = 0;
    let mut episode = 0;
    while steps < config.budget_steps {
        let track = &tracks[episode % tracks.len()];
        episode += 1;
        let (mut state, mut obs) = env::reset(track, rng.random(), None)?;
        let mut ret = 0.0;
        loop {
            let a = learner.act(&obs, &mut rng)?;
            let res = env::step_with(track, &state, a, &config.weights)?;
            steps += 1;
            ret += res.reward;
            learner.feedback(
                Feedback {
                    reward: res.reward,
                    done: res.done,
                    terminated: res.terminated,
                },
                &res.observation,
            )?;
            if res.done {
                curve.push(CurvePoint {
                    step: steps,
                    episode_return: ret,
                    norm_d: env::normalized_distance(res.state.distance_to_goal, track.initial_distance()),
                });
                break;
            }
            state = res.state;
            obs = res.observation;
            if steps == config.budget_steps {
                learner.flush(Some(&obs))?;
                break;
            }
        }
    }
    learner.flush(None)?;
    let stats = std::mem::take(&mut learner.stats);
    Ok(OnlineResult {
        controller: learner.into_controller(),
        curve,
        stats,
        env_steps: steps,
    })
}
