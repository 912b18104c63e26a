//! Mixture-density LSTM world model predicting `P(z_{t+1} | z_t, a_t[, c_t])`,
//! the step reward and the termination flag.
//!
//! Input per step is `z ⊕ onehot(a) ⊕ concept` (concept part only for the
//! concept-modulated variant). The LSTM output feeds one dense head whose
//! output row is laid out as
//! `[π logits (L·K) | μ (L·K) | log σ (L·K) | reward | done logit]`, with
//! index `d·K + k` for latent dimension `d` and component `k`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{Action, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, Adam, AdamConfig, Dense, EarlyStopping, Lstm, LstmState, LstmTape, ParamSet};
use crate::scalar::{log_sum_exp, sigmoid, softplus, Scalar};
use crate::tensor::Tensor;

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdnConfig {
    pub latent_dim: usize,
    pub action_dim: usize,
    /// 0 for the plain model-based variant, the concept count otherwise.
    pub concept_dim: usize,
    pub lstm_hidden: usize,
    pub n_mixtures: usize,
}

impl Default for MdnConfig {
    fn default() -> Self {
        Self {
            latent_dim: crate::vae::LATENT_DIM,
            action_dim: NUM_ACTIONS,
            concept_dim: 0,
            lstm_hidden: 256,
            n_mixtures: 5,
        }
    }
}

impl MdnConfig {
    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.action_dim + self.concept_dim
    }

    pub fn head_dim(&self) -> usize {
        3 * self.latent_dim * self.n_mixtures + 2
    }
}

/// Per-step mixture over the next latent, plus reward and done predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOutput {
    pub latent_dim: usize,
    pub n_mixtures: usize,
    /// Mixture weights, `latent_dim × K`, each row a simplex.
    pub pi: Vec<f64>,
    pub log_pi: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub reward: f64,
    pub done_logit: f64,
}

impl MixtureOutput {
    /// Builds the mixture from one raw head row.
    pub fn from_head<T: Scalar>(row: &[T], latent_dim: usize, n_mixtures: usize) -> Self {
        let lk = latent_dim * n_mixtures;
        let mut log_pi = Vec::with_capacity(lk);
        for d in 0..latent_dim {
            let logits: Vec<f64> = row[d * n_mixtures..(d + 1) * n_mixtures].iter().map(|v| v.as_f64()).collect();
            let lse = log_sum_exp(&logits);
            log_pi.extend(logits.iter().map(|v| v - lse));
        }
        let (ls_min, ls_max) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
        Self {
            latent_dim,
            n_mixtures,
            pi: log_pi.iter().map(|v| v.exp()).collect(),
            log_pi,
            mu: row[lk..2 * lk].iter().map(|v| v.as_f64()).collect(),
            sigma: row[2 * lk..3 * lk].iter().map(|v| v.as_f64().clamp(ls_min, ls_max).exp()).collect(),
            reward: row[3 * lk].as_f64(),
            done_logit: row[3 * lk + 1].as_f64(),
        }
    }

    pub fn done_probability(&self) -> f64 {
        sigmoid(self.done_logit)
    }

    /// `Σ_k π_k μ_k` per dimension.
    pub fn mean(&self) -> Vec<f64> {
        let k = self.n_mixtures;
        (0..self.latent_dim)
            .map(|d| (0..k).map(|j| self.pi[d * k + j] * self.mu[d * k + j]).sum())
            .collect()
    }
}

/// `−Σ_d log Σ_k π_k N(y_d; μ_k, σ_k)`, evaluated with log-sum-exp.
pub fn gmm_nll(mix: &MixtureOutput, target: &[f64]) -> f64 {
    let k = mix.n_mixtures;
    let mut nll = 0.0;
    let mut terms = vec![0.0; k];
    for (d, &y) in target.iter().enumerate().take(mix.latent_dim) {
        for j in 0..k {
            let i = d * k + j;
            let u = (y - mix.mu[i]) / mix.sigma[i];
            terms[j] = mix.log_pi[i] - HALF_LN_2PI - mix.sigma[i].ln() - 0.5 * u * u;
        }
        nll -= log_sum_exp(&terms);
    }
    nll
}

/// Per-dimension component draw then Gaussian draw; done when `σ(logit) > 0.5`.
pub fn sample_next<R: Rng + ?Sized>(mix: &MixtureOutput, rng: &mut R) -> (Vec<f64>, f64, bool) {
    let k = mix.n_mixtures;
    let z = (0..mix.latent_dim)
        .map(|d| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = k - 1;
            for j in 0..k {
                acc += mix.pi[d * k + j];
                if u < acc {
                    chosen = j;
                    break;
                }
            }
            let e: f64 = StandardNormal.sample(rng);
            mix.mu[d * k + chosen] + mix.sigma[d * k + chosen] * e
        })
        .collect();
    (z, mix.reward, mix.done_probability() > 0.5)
}

#[derive(Debug, Clone)]
pub struct Mdn<T> {
    pub config: MdnConfig,
    pub params: ParamSet<T>,
    lstm: Lstm,
    head: Dense,
}

/// Teacher-forcing data for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSeq {
    /// Encoded latents `[T, latent]`.
    pub z: Tensor<f32>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f32>,
    pub dones: Vec<bool>,
    /// Concept vectors `[T, concept_dim]` for the concept-modulated variant.
    pub concepts: Option<Tensor<f32>>,
}

impl EpisodeSeq {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Batch-mean loss terms; `total = gmm + mse + bce`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MdnLoss {
    pub total: f64,
    pub gmm: f64,
    pub mse: f64,
    pub bce: f64,
}

impl<T: Scalar> Mdn<T> {
    pub fn new(config: MdnConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.n_mixtures == 0 || config.lstm_hidden == 0 {
            return Err(Error::InvalidArgument(format!("invalid MDN config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let lstm = Lstm::new(&mut params, "mdn.lstm", config.input_dim(), config.lstm_hidden, &mut rng);
        let bound = 1.0 / (config.lstm_hidden as f64).sqrt();
        let head = Dense::with_bound(&mut params, "mdn.head", config.lstm_hidden, config.head_dim(), bound, &mut rng);
        Ok(Self {
            config,
            params,
            lstm,
            head,
        })
    }

    pub fn lstm(&self) -> &Lstm {
        &self.lstm
    }

    pub fn initial_state(&self, batch: usize) -> LstmState<T> {
        LstmState::zeros(batch, self.config.lstm_hidden)
    }

    /// Writes `z ⊕ onehot(a) ⊕ concept` into `out`.
    pub fn write_input<U: Scalar>(
        &self,
        z: &[U],
        action: Action,
        concept: Option<&[U]>,
        out: &mut [T],
    ) -> Result<()> {
        let c = &self.config;
        if z.len() != c.latent_dim {
            return Err(Error::shape("mdn.z", &[c.latent_dim], &[z.len()]));
        }
        match (concept, c.concept_dim) {
            (None, 0) => {}
            (Some(v), n) if v.len() == n && n > 0 => {}
            (got, want) => {
                return Err(Error::InvalidArgument(format!(
                    "world model expects a concept vector of width {want}, got {}",
                    got.map_or("none".to_string(), |v| v.len().to_string())
                )))
            }
        }
        out.fill(T::zero());
        for (o, &v) in out.iter_mut().zip(z) {
            *o = T::lit(v.as_f64());
        }
        out[c.latent_dim + action.index()] = T::one();
        if let Some(v) = concept {
            let off = c.latent_dim + c.action_dim;
            for (o, &x) in out[off..].iter_mut().zip(v) {
                *o = T::lit(x.as_f64());
            }
        }
        Ok(())
    }

    /// One recurrent step for a batch of prepared inputs `[n, input_dim]`.
    pub fn step_batch(&self, x: &Tensor<T>, state: &LstmState<T>) -> Result<(Vec<MixtureOutput>, LstmState<T>)> {
        let next = self.lstm.step(&self.params, x, state)?;
        let head = self.head.forward(&self.params, &next.h)?;
        let mixes = (0..head.rows())
            .map(|r| MixtureOutput::from_head(head.row(r), self.config.latent_dim, self.config.n_mixtures))
            .collect();
        Ok((mixes, next))
    }

    /// Single-sample step.
    pub fn step(
        &self,
        z: &[T],
        action: Action,
        concept: Option<&[T]>,
        state: &LstmState<T>,
    ) -> Result<(MixtureOutput, LstmState<T>)> {
        let mut x = Tensor::zeros(&[1, self.config.input_dim()]);
        self.write_input(z, action, concept, x.data_mut())?;
        let (mut mixes, next) = self.step_batch(&x, state)?;
        Ok((mixes.pop().expect("one row"), next))
    }

    fn pack(&self, batch: &[&EpisodeSeq]) -> Result<(Tensor<T>, usize)> {
        let steps = batch.iter().map(|e| e.len()).max().unwrap_or(0);
        let n = batch.len();
        let width = self.config.input_dim();
        let mut xs = Tensor::zeros(&[steps, n, width]);
        for (b, ep) in batch.iter().enumerate() {
            if ep.z.shape() != [ep.len(), self.config.latent_dim] {
                return Err(Error::shape("mdn.episode", &[ep.len(), self.config.latent_dim], ep.z.shape()));
            }
            for t in 0..ep.len() {
                let concept = ep.concepts.as_ref().map(|c| c.row(t));
                let start = (t * n + b) * width;
                self.write_input(ep.z.row(t), ep.actions[t], concept, &mut xs.data_mut()[start..start + width])?;
            }
        }
        Ok((xs, steps))
    }

    fn batch_pass(&self, batch: &[&EpisodeSeq], grads: Option<&mut ParamSet<T>>) -> Result<MdnLoss> {
        let (xs, steps) = self.pack(batch)?;
        let n = batch.len();
        let mut tape = LstmTape::default();
        let record = grads.is_some();
        let (hs, _) = self
            .lstm
            .forward_seq(&self.params, &xs, &self.initial_state(n), record.then_some(&mut tape))?;
        let flat = hs.reshape(&[steps * n, self.config.lstm_hidden])?;
        let head = self.head.forward(&self.params, &flat)?;
        let (l, k) = (self.config.latent_dim, self.config.n_mixtures);
        let lk = l * k;
        let valid: usize = batch.iter().map(|e| e.len()).sum();
        let gmm_steps: usize = batch.iter().map(|e| e.len().saturating_sub(1)).sum();
        let mut d_head = record.then(|| Tensor::<T>::zeros(head.shape()));
        let (mut gmm, mut mse, mut bce) = (0.0, 0.0, 0.0);
        let mut gamma = vec![0.0; k];
        let (ls_min, ls_max) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
        for (b, ep) in batch.iter().enumerate() {
            for t in 0..ep.len() {
                let row_index = t * n + b;
                let row = head.row(row_index);
                let mix = MixtureOutput::from_head(row, l, k);
                let r_target = ep.rewards[t] as f64;
                let d_target = if ep.dones[t] { 1.0 } else { 0.0 };
                let err = mix.reward - r_target;
                mse += err * err;
                bce += softplus(mix.done_logit) - d_target * mix.done_logit;
                let has_next = t + 1 < ep.len();
                if has_next {
                    let target = ep.z.row(t + 1);
                    let target: Vec<f64> = target.iter().map(|v| v.as_f64()).collect();
                    gmm += gmm_nll(&mix, &target);
                }
                let Some(dh) = d_head.as_mut() else { continue };
                let g = dh.row_mut(row_index);
                g[3 * lk] = T::lit(2.0 * err / valid as f64);
                g[3 * lk + 1] = T::lit((mix.done_probability() - d_target) / valid as f64);
                if !has_next {
                    continue;
                }
                let scale = 1.0 / gmm_steps as f64;
                let target = ep.z.row(t + 1);
                for d in 0..l {
                    let y = target[d] as f64;
                    for j in 0..k {
                        let i = d * k + j;
                        let u = (y - mix.mu[i]) / mix.sigma[i];
                        gamma[j] = mix.log_pi[i] - HALF_LN_2PI - mix.sigma[i].ln() - 0.5 * u * u;
                    }
                    let lse = log_sum_exp(&gamma);
                    for j in 0..k {
                        let i = d * k + j;
                        let resp = (gamma[j] - lse).exp();
                        let u = (y - mix.mu[i]) / mix.sigma[i];
                        g[i] = T::lit(scale * (mix.pi[i] - resp));
                        g[lk + i] = T::lit(-scale * resp * u / mix.sigma[i]);
                        let raw = row[2 * lk + i].as_f64();
                        g[2 * lk + i] = if raw > ls_min && raw < ls_max {
                            T::lit(-scale * resp * (u * u - 1.0))
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
        let loss = {
            let gmm = if gmm_steps > 0 { gmm / gmm_steps as f64 } else { 0.0 };
            let (mse, bce) = (mse / valid.max(1) as f64, bce / valid.max(1) as f64);
            MdnLoss {
                total: gmm + mse + bce,
                gmm,
                mse,
                bce,
            }
        };
        if let (Some(grads), Some(dh)) = (grads, d_head) {
            let dflat = self.head.backward(&self.params, &flat, &dh, grads);
            let dhs = dflat.reshape(&[steps, n, self.config.lstm_hidden])?;
            self.lstm.backward_seq(&self.params, &tape, &dhs, grads)?;
        }
        Ok(loss)
    }

    /// Teacher-forced loss over a batch of episodes; state starts at zero for each.
    pub fn loss(&self, batch: &[&EpisodeSeq]) -> Result<MdnLoss> {
        self.batch_pass(batch, None)
    }

    pub fn loss_and_grad(&self, batch: &[&EpisodeSeq]) -> Result<(MdnLoss, ParamSet<T>)> {
        let mut grads = self.params.zeros_like();
        let loss = self.batch_pass(batch, Some(&mut grads))?;
        Ok((loss, grads))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::save(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load::<T>(path)?;
        let config: MdnConfig = serde_json::from_str(&meta).map_err(|e| Error::Format {
            path: path.into(),
            reason: format!("MDN metadata: {e}"),
        })?;
        let mut mdn = Self::new(config, 0)?;
        mdn.params.load_from(&params)?;
        Ok(mdn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdnTrainConfig {
    /// Episodes per minibatch.
    pub batch_episodes: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for MdnTrainConfig {
    fn default() -> Self {
        Self {
            batch_episodes: 20,
            lr: 1e-4,
            max_epochs: 500,
            patience: 10,
            min_delta: 1e-4,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdnEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: MdnLoss,
}

pub fn log_csv(log: &[MdnEpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,test_loss,gmm,mse,bce\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
            r.epoch, r.train_loss, r.test.total, r.test.gmm, r.test.mse, r.test.bce
        ));
    }
    s
}

/// Step-weighted mean loss over a set of episodes.
pub fn evaluate<T: Scalar>(mdn: &Mdn<T>, episodes: &[EpisodeSeq], batch_episodes: usize) -> Result<MdnLoss> {
    let total_steps: usize = episodes.iter().map(EpisodeSeq::len).sum();
    let mut acc = MdnLoss::default();
    for chunk in episodes.chunks(batch_episodes.max(1)) {
        let refs: Vec<&EpisodeSeq> = chunk.iter().collect();
        let l = mdn.loss(&refs)?;
        let w = chunk.iter().map(EpisodeSeq::len).sum::<usize>() as f64 / total_steps as f64;
        acc.total += l.total * w;
        acc.gmm += l.gmm * w;
        acc.mse += l.mse * w;
        acc.bce += l.bce * w;
    }
    Ok(acc)
}

/// Adam over shuffled episode minibatches with early stopping on test loss;
/// returns the best-test-loss parameters and the per-epoch log.
pub fn train_mdn<T: Scalar>(
    mut mdn: Mdn<T>,
    train: &[EpisodeSeq],
    test: &[EpisodeSeq],
    config: &MdnTrainConfig,
) -> Result<(Mdn<T>, Vec<MdnEpochLog>)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("MDN training needs nonempty train and test episodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam_config = AdamConfig {
        max_grad_norm: config.max_grad_norm,
        ..AdamConfig::with_lr(config.lr)
    };
    let mut adam = Adam::new(adam_config, &mdn.params);
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut best = mdn.params.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let train_steps: usize = train.iter().map(EpisodeSeq::len).sum();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_episodes.max(1)).enumerate() {
            let batch: Vec<&EpisodeSeq> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = mdn.loss_and_grad(&batch)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "MDN loss {} at epoch {epoch}, batch {b} (gmm {}, mse {}, bce {})",
                    loss.total, loss.gmm, loss.mse, loss.bce
                )));
            }
            adam.step(&mut mdn.params, &grads)
                .map_err(|e| Error::NonFinite(format!("MDN epoch {epoch}, batch {b}: {e}")))?;
            train_sum += loss.total * batch.iter().map(|e| e.len()).sum::<usize>() as f64;
        }
        let test_loss = evaluate(&mdn, test, config.batch_episodes)?;
        if !test_loss.total.is_finite() {
            return Err(Error::NonFinite(format!("MDN test loss {} at epoch {epoch}", test_loss.total)));
        }
        log.push(MdnEpochLog {
            epoch,
            train_loss: train_sum / train_steps as f64,
            test: test_loss,
        });
        let decision = stopper.observe(test_loss.total);
        if decision.improved {
            best = mdn.params.clone();
        }
        if decision.stop {
            break;
        }
    }
    mdn.params = best;
    Ok((mdn, log))
}

#[cfg(test)]
mod tests;
