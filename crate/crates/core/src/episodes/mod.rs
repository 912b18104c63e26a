//! Rollout storage: the `[s, a, r, d]` data model, the on-disk dataset
//! format, the collection driver and the chronological train/test split.
//!
//! A dataset is a directory holding `manifest.json` plus one binary file per
//! episode. Episode files are little-endian:
//!
//! ```text
//! "CMWM" | u16 version=1 | u32 T | u16 H | u16 W | u8 C=3
//! T*H*W*C u8 pixels | T u8 actions | T f32 rewards | T u8 done
//! ```

pub mod format;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, Action, ObstacleScenario, Observation, RewardWeights, Split, TrackSpec, NUM_ROUTES};
use crate::error::{Error, Result};

pub use format::{decode_episode, encode_episode, FORMAT_VERSION, MAGIC};

/// One stored time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Observation,
    pub a: Action,
    pub r: f32,
    /// True only on a goal-reaching final step; truncation stores false.
    pub d: bool,
}

/// Where an episode came from; enough to replay it in the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInfo {
    pub route_id: usize,
    pub split: Split,
    pub seed: u64,
    pub scenario: Option<ObstacleScenario>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub info: EpisodeInfo,
    pub transitions: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.transitions.iter().map(|t| &t.s)
    }

    pub fn track(&self) -> Result<TrackSpec> {
        env::make_track(self.info.route_id, self.info.split)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    /// Free-form provenance stored in the manifest.
    pub provenance: serde_json::Value,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>) -> Self {
        Self {
            episodes,
            provenance: serde_json::Value::Null,
        }
    }

    pub fn total_transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Observation> {
        self.episodes.iter().flat_map(Episode::observations)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        format::save(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        format::load(dir)
    }
}

/// Partitions at an episode boundary; the test side holds the chronologically
/// last episodes totalling at least `test_tail` transitions.
pub fn split_train_test(dataset: &Dataset, test_tail: usize) -> Result<(Dataset, Dataset)> {
    let total = dataset.total_transitions();
    if test_tail >= total {
        return Err(Error::InvalidArgument(format!(
            "test tail {test_tail} must be smaller than the dataset ({total} transitions)"
        )));
    }
    let mut cut = dataset.episodes.len();
    let mut taken = 0;
    while taken < test_tail {
        cut -= 1;
        taken += dataset.episodes[cut].len();
    }
    let part = |eps: &[Episode]| Dataset {
        episodes: eps.to_vec(),
        provenance: dataset.provenance.clone(),
    };
    Ok((part(&dataset.episodes[..cut]), part(&dataset.episodes[cut..])))
}

/// What a policy sees after each of its actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub reward: f64,
    pub done: bool,
    pub terminated: bool,
}

/// Observation-driven action source used by [`collect`]. Learning policies may
/// update themselves inside `feedback`.
pub trait Policy {
    fn act(&mut self, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Action>;

    fn feedback(&mut self, _fb: Feedback, _next: &Observation) -> Result<()> {
        Ok(())
    }
}

/// Always coasts: no steering, no throttle.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoastPolicy;

impl Policy for CoastPolicy {
    fn act(&mut self, _obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(Action::COAST)
    }
}

/// Uniformly random actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&mut self, _obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Action> {
        Action::new(rng.random_range(0..env::NUM_ACTIONS))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub budget_steps: usize,
    pub rng_seed: u64,
    /// Probability that an episode starts with a parked vehicle somewhere ahead.
    pub obstacle_probability: f64,
    /// Range of distances (world units) for those background obstacles.
    pub obstacle_distance: (f64, f64),
    pub obstacle_lifetime: u32,
    pub weights: RewardWeights,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            budget_steps: 30_000,
            rng_seed: 0,
            obstacle_probability: 0.5,
            obstacle_distance: (12.0, 40.0),
            obstacle_lifetime: 50,
            weights: RewardWeights::default(),
        }
    }
}

/// Runs whole episodes, cycling over the train routes, until at least
/// `budget_steps` transitions are stored.
pub fn collect<P: Policy + ?Sized>(policy: &mut P, config: &CollectConfig) -> Result<Dataset> {
    if config.budget_steps == 0 {
        return Err(Error::InvalidArgument("collection budget must be positive".into()));
    }
    let tracks = (0..NUM_ROUTES)
        .map(|r| env::make_track(r, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut episodes = Vec::new();
    let mut total = 0;
    while total < config.budget_steps {
        let track = &tracks[episodes.len() % NUM_ROUTES];
        let seed: u64 = rng.random();
        let scenario = if rng.random_bool(config.obstacle_probability) {
            let (lo, hi) = config.obstacle_distance;
            Some(ObstacleScenario {
                distance: rng.random_range(lo..=hi),
                lifetime_steps: config.obstacle_lifetime,
            })
        } else {
            None
        };
        let episode = run_episode(policy, track, seed, scenario, &config.weights, &mut rng)?;
        total += episode.len();
        episodes.push(episode);
    }
    let mut dataset = Dataset::new(episodes);
    dataset.provenance = serde_json::json!({ "collect": config });
    Ok(dataset)
}

/// Plays one episode with `policy` and records it. An invalid scenario is
/// surfaced as an error.
pub fn run_episode<P: Policy + ?Sized>(
    policy: &mut P,
    track: &TrackSpec,
    seed: u64,
    scenario: Option<ObstacleScenario>,
    weights: &RewardWeights,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let (mut state, mut obs) = env::reset(track, seed, scenario)?;
    let mut transitions = Vec::new();
    loop {
        let a = policy.act(&obs, rng)?;
        let res = env::step_with(track, &state, a, weights)?;
        transitions.push(Transition {
            s: obs,
            a,
            r: res.reward as f32,
            d: res.terminated,
        });
        policy.feedback(
            Feedback {
                reward: res.reward,
                done: res.done,
                terminated: res.terminated,
            },
            &res.observation,
        )?;
        if res.done {
            break;
        }
        state = res.state;
        obs = res.observation;
    }
    Ok(Episode {
        info: EpisodeInfo {
            route_id: track.route_id,
            split: track.split,
            seed,
            scenario,
        },
        transitions,
    })
}

/// Replays the stored actions in the simulator and checks that every stored
/// observation, reward and done flag is reproduced.
pub fn replay_matches(episode: &Episode, weights: &RewardWeights) -> Result<bool> {
    let track = episode.track()?;
    let (mut state, mut obs) = env::reset(&track, episode.info.seed, episode.info.scenario)?;
    for (i, t) in episode.transitions.iter().enumerate() {
        if state.done || obs != t.s {
            return Ok(false);
        }
        let res = env::step_with(&track, &state, t.a, weights)?;
        if res.reward as f32 != t.r || res.terminated != t.d || res.done != (i + 1 == episode.len()) {
            return Ok(false);
        }
        state = res.state;
        obs = res.observation;
    }
    Ok(true)
}
