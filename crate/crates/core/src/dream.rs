//! Offline training inside the world model.
//!
//! A dream session warms the MDN's recurrent state on ten stored `(z, a)`
//! pairs, then lets the controller act on sampled latents until the predicted
//! done probability exceeds 0.5 or the length cap is hit. PPO consumes only
//! dreamed transitions; the simulator is never stepped here except by
//! [`make_failure_seed_dataset`], which logs the seed episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptModel;
use crate::controller::{log_softmax, Controller, Decision, PpoConfig, PpoStats, PpoTrainer, Segment, TrajectoryBatch};
use crate::env::{Action, ObstacleScenario, RewardWeights, TrackSpec};
use crate::episodes::{run_episode, Dataset, Policy};
use crate::error::{Error, Result};
use crate::nn::LstmState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vae::Vae;
use crate::worldmodel::{sample_next, Mdn};

/// Stored frames teacher-forced before a dream starts.
pub const SEED_LEN: usize = 10;
/// Dream length cap, equal to the simulator's episode cap.
pub const MAX_DREAM_LEN: usize = 300;

/// Frozen models a dream runs in. The concept model is present exactly when
/// the MDN takes concept inputs.
#[derive(Debug, Clone, Copy)]
pub struct DreamWorld<'a, T> {
    pub mdn: &'a Mdn<T>,
    pub concepts: Option<&'a ConceptModel<T>>,
}

impl<'a, T: Scalar> DreamWorld<'a, T> {
    pub fn new(mdn: &'a Mdn<T>, concepts: Option<&'a ConceptModel<T>>) -> Result<Self> {
        let c = &mdn.config;
        match concepts {
            None if c.concept_dim == 0 => {}
            Some(m) if m.n_clusters() == c.concept_dim && m.latent_dim() == c.latent_dim => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "world model with concept width {} cannot run with concept model {:?}",
                    c.concept_dim,
                    concepts.map(|m| (m.n_clusters(), m.latent_dim()))
                )))
            }
        }
        Ok(Self { mdn, concepts })
    }

    fn write_input(&self, z: &[f64], action: Action, out: &mut [T]) -> Result<()> {
        let concept = self.concepts.map(|m| m.concept_vector(z)).transpose()?;
        self.mdn.write_input(z, action, concept.as_deref(), out)
    }
}

/// Encoded seed episodes: mean latents and the actions that were taken.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedData {
    pub episodes: Vec<SeedEpisode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedEpisode {
    /// `[T, latent]`
    pub z: Tensor<f64>,
    pub actions: Vec<Action>,
}

impl SeedData {
    pub fn encode<T: Scalar>(dataset: &Dataset, vae: &Vae<T>) -> Result<Self> {
        let episodes = dataset
            .episodes
            .iter()
            .map(|ep| {
                Ok(SeedEpisode {
                    z: vae.encode_means(ep.observations())?.cast(),
                    actions: ep.transitions.iter().map(|t| t.a).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { episodes })
    }

    /// Indices of episodes long enough to seed from.
    fn eligible(&self) -> Vec<usize> {
        (0..self.episodes.len()).filter(|&i| self.episodes[i].actions.len() >= SEED_LEN).collect()
    }
}

/// One dream in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct DreamSession<T> {
    pub state: LstmState<T>,
    /// Current latent.
    pub z: Vec<f64>,
    pub steps_elapsed: usize,
    pub max_dream_len: usize,
    pub done: bool,
    /// `(episode, start)` of the seed window.
    pub origin: (usize, usize),
}

/// What the world model predicts for one dream step.
#[derive(Debug, Clone, PartialEq)]
pub struct DreamStep {
    pub z_next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl<T: Scalar> DreamSession<T> {
    /// Picks a random episode and window start, teacher-forces the ten stored
    /// pairs and sets the current latent to the last seed frame's.
    pub fn seed(world: &DreamWorld<'_, T>, seeds: &SeedData, max_dream_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let eligible = seeds.eligible();
        if eligible.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no seed episode has at least {SEED_LEN} frames"
            )));
        }
        let episode = eligible[rng.random_range(0..eligible.len())];
        let ep = &seeds.episodes[episode];
        let start = rng.random_range(0..=ep.actions.len() - SEED_LEN);
        let mdn = world.mdn;
        let mut state = mdn.initial_state(1);
        let mut x = Tensor::zeros(&[1, mdn.config.input_dim()]);
        for t in start..start + SEED_LEN {
            world.write_input(ep.z.row(t), ep.actions[t], x.data_mut())?;
            state = mdn.step_batch(&x, &state)?.1;
        }
        Ok(Self {
            state,
            z: ep.z.row(start + SEED_LEN - 1).to_vec(),
            steps_elapsed: 0,
            max_dream_len,
            done: false,
            origin: (episode, start),
        })
    }

    pub fn step(&mut self, world: &DreamWorld<'_, T>, action: Action, rng: &mut ChaCha8Rng) -> Result<DreamStep> {
        let mut out = step_sessions(world, &mut [self], &[action], rng)?;
        Ok(out.pop().expect("one session"))
    }
}

/// Advances several sessions together through one batched MDN step. Random
/// draws happen in session order.
pub fn step_sessions<T: Scalar>(
    world: &DreamWorld<'_, T>,
    sessions: &mut [&mut DreamSession<T>],
    actions: &[Action],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DreamStep>> {
    if sessions.len() != actions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sessions but {} actions",
            sessions.len(),
            actions.len()
        )));
    }
    if let Some(s) = sessions.iter().find(|s| s.done) {
        return Err(Error::ContractViolation(format!(
            "dream step after done (session seeded at {:?})",
            s.origin
        )));
    }
    let n = sessions.len();
    let mdn = world.mdn;
    let (in_dim, hidden) = (mdn.config.input_dim(), mdn.config.lstm_hidden);
    let mut x = Tensor::zeros(&[n, in_dim]);
    let mut state = mdn.initial_state(n);
    for (i, s) in sessions.iter().enumerate() {
        world.write_input(&s.z, actions[i], x.row_mut(i))?;
        state.h.row_mut(i).copy_from_slice(s.state.h.row(0));
        state.c.row_mut(i).copy_from_slice(s.state.c.row(0));
    }
    let (mixes, next) = mdn.step_batch(&x, &state)?;
    let mut out = Vec::with_capacity(n);
    for (i, (s, mix)) in sessions.iter_mut().zip(&mixes).enumerate() {
        let (z_next, reward, done_pred) = sample_next(mix, rng);
        if z_next.iter().any(|v| !v.is_finite()) || !reward.is_finite() {
            return Err(Error::NonFinite(format!("dream step from seed {:?}", s.origin)));
        }
        s.state = LstmState {
            h: Tensor::from_vec(&[1, hidden], next.h.row(i).to_vec())?,
            c: Tensor::from_vec(&[1, hidden], next.c.row(i).to_vec())?,
        };
        s.steps_elapsed += 1;
        s.done = done_pred || s.steps_elapsed >= s.max_dream_len;
        s.z = z_next.clone();
        out.push(DreamStep {
            z_next,
            reward,
            done: s.done,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DreamConfig {
    pub budget_steps: usize,
    /// Sessions stepped together through the MDN.
    pub parallel_sessions: usize,
    pub max_dream_len: usize,
    pub seed: u64,
    pub ppo: PpoConfig,
}

impl Default for DreamConfig {
    fn default() -> Self {
        Self {
            budget_steps: 100_000,
            parallel_sessions: 16,
            max_dream_len: MAX_DREAM_LEN,
            seed: 0,
            ppo: PpoConfig::offline(),
        }
    }
}

/// Session-length bookkeeping used to detect a degenerate world model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DreamCounts {
    pub transitions: usize,
    pub sessions_finished: usize,
    /// Finished sessions that lasted a single step.
    pub immediate_done: usize,
}

/// Sessions finished before the degeneracy check applies.
const DEGENERACY_MIN_SESSIONS: usize = 20;

impl DreamCounts {
    fn check(&self) -> Result<()> {
        if self.sessions_finished >= DEGENERACY_MIN_SESSIONS
            && self.immediate_done as f64 > 0.9 * self.sessions_finished as f64
        {
            return Err(Error::DegenerateWorldModel(format!(
                "{} of {} dream sessions ended within one step",
                self.immediate_done, self.sessions_finished
            )));
        }
        Ok(())
    }
}

/// Keeps a pool of live sessions and turns them into PPO segments.
pub struct DreamRunner<'a, T> {
    world: DreamWorld<'a, T>,
    seeds: &'a SeedData,
    sessions: Vec<DreamSession<T>>,
    rng: ChaCha8Rng,
    max_dream_len: usize,
    pub counts: DreamCounts,
}

impl<'a, T: Scalar> DreamRunner<'a, T> {
    pub fn new(world: DreamWorld<'a, T>, seeds: &'a SeedData, config: &DreamConfig) -> Result<Self> {
        if config.parallel_sessions == 0 || config.max_dream_len == 0 {
            return Err(Error::InvalidArgument(format!("invalid dream config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sessions = (0..config.parallel_sessions)
            .map(|_| DreamSession::seed(&world, seeds, config.max_dream_len, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            world,
            seeds,
            sessions,
            rng,
            max_dream_len: config.max_dream_len,
            counts: DreamCounts::default(),
        })
    }

    /// Exactly `n_steps` dreamed transitions from the stochastic policy of
    /// `controller`, split into one segment per uninterrupted session stretch.
    pub fn collect(&mut self, controller: &Controller<T>, n_steps: usize) -> Result<Vec<Segment<T>>> {
        let latent = controller.config.latent_dim;
        let mut open: Vec<Segment<T>> = (0..self.sessions.len()).map(|_| Segment::new()).collect();
        let mut finished = Vec::new();
        let mut taken = 0;
        while taken < n_steps {
            let active = self.sessions.len().min(n_steps - taken);
            let mut z = Tensor::<T>::zeros(&[active, latent]);
            for (i, s) in self.sessions[..active].iter().enumerate() {
                for (o, &v) in z.row_mut(i).iter_mut().zip(&s.z) {
                    *o = T::lit(v);
                }
            }
            let (logits, values) = controller.forward(&z)?;
            let decisions: Vec<Decision> = (0..active)
                .map(|i| {
                    let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
                    let logp = log_softmax(&row);
                    let u: f64 = self.rng.random();
                    let mut acc = 0.0;
                    let mut index = row.len() - 1;
                    for (j, lp) in logp.iter().enumerate() {
                        acc += lp.exp();
                        if u < acc {
                            index = j;
                            break;
                        }
                    }
                    Ok(Decision {
                        action: Action::new(index)?,
                        logprob: logp[index],
                        value: values[i].as_f64(),
                    })
                })
                .collect::<Result<_>>()?;
            let actions: Vec<Action> = decisions.iter().map(|d| d.action).collect();
            let mut refs: Vec<&mut DreamSession<T>> = self.sessions[..active].iter_mut().collect();
            let steps = step_sessions(&self.world, &mut refs, &actions, &mut self.rng)?;
            for (i, step) in steps.into_iter().enumerate() {
                open[i].push(z.row(i), decisions[i], step.reward, step.done);
                if step.done {
                    self.counts.sessions_finished += 1;
                    if self.sessions[i].steps_elapsed <= 1 {
                        self.counts.immediate_done += 1;
                    }
                    finished.push(std::mem::replace(&mut open[i], Segment::new()));
                    self.sessions[i] = DreamSession::seed(&self.world, self.seeds, self.max_dream_len, &mut self.rng)?;
                }
            }
            taken += active;
            self.counts.transitions += active;
            self.counts.check()?;
        }
        for (i, mut seg) in open.into_iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            let z: Vec<T> = self.sessions[i].z.iter().map(|&v| T::lit(v)).collect();
            seg.bootstrap = controller.value(&z)?;
            finished.push(seg);
        }
        Ok(finished)
    }
}

#[derive(Debug, Clone)]
pub struct DreamResult<T> {
    pub controller: Controller<T>,
    pub stats: Vec<PpoStats>,
    pub counts: DreamCounts,
}

/// Offline PPO from dreamed experience only, starting from `controller`.
/// Consumes exactly `config.budget_steps` dream transitions; seeding steps are
/// not counted.
pub fn dream_train<T: Scalar>(
    controller: Controller<T>,
    world: DreamWorld<'_, T>,
    seeds: &SeedData,
    config: &DreamConfig,
) -> Result<DreamResult<T>> {
    if controller.config.latent_dim != world.mdn.config.latent_dim {
        return Err(Error::InvalidArgument(format!(
            "controller latent {} does not match world model latent {}",
            controller.config.latent_dim, world.mdn.config.latent_dim
        )));
    }
    let mut trainer = PpoTrainer::new(controller, config.ppo, config.seed ^ 0xD2EA)?;
    let mut runner = DreamRunner::new(world, seeds, config)?;
    let mut stats = Vec::new();
    let mut consumed = 0;
    while consumed < config.budget_steps {
        let n = config.ppo.rollout_horizon.min(config.budget_steps - consumed);
        let segments = runner.collect(&trainer.controller, n)?;
        let batch = TrajectoryBatch::from_segments(trainer.controller.config.latent_dim, &segments, &trainer.config)?;
        stats.push(trainer.update(&batch)?);
        consumed += n;
    }
    Ok(DreamResult {
        controller: trainer.controller,
        stats,
        counts: runner.counts,
    })
}

/// One episode per track with a stationary obstacle `distance` units ahead,
/// driven by `policy`.
pub fn make_failure_seed_dataset<P: Policy + ?Sized>(
    tracks: &[TrackSpec],
    policy: &mut P,
    distance: f64,
    weights: &RewardWeights,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = ObstacleScenario::failure_case(distance);
    let episodes = tracks
        .iter()
        .map(|track| {
            let episode_seed = rng.random();
            run_episode(policy, track, episode_seed, Some(scenario), weights, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut dataset = Dataset::new(episodes);
    dataset.provenance = serde_json::json!({ "failure_seeds": { "distance": distance, "seed": seed } });
    Ok(dataset)
}

#[cfg(test)]
mod tests;
