//! Deterministic toy top-down driving simulator.
//!
//! Kinematics per step: `heading += 0.15·steer`, `speed = clamp(speed + 0.5·throttle, 0, 3)`,
//! `position += speed·(cos, sin)(heading)`. An episode ends when the remaining
//! route distance drops below 1 unit or after 300 steps.

mod render;
pub mod track;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use render::{render, Observation, ANCHOR_COL, ANCHOR_ROW, CHANNELS, HEIGHT, PALETTE_EGO, PALETTE_OBSTACLE, WIDTH};
pub use track::{make_track, straight_track, CellClass, Pose, Split, TrackSpec, NUM_ROUTES, PROGRESS_WINDOW};

use crate::error::{Error, Result};

pub const TURN_RATE: f64 = 0.15;
pub const ACCEL: f64 = 0.5;
pub const V_MAX: f64 = 3.0;
pub const MAX_STEPS: u32 = 300;
pub const GOAL_THRESHOLD: f64 = 1.0;
pub const NUM_ACTIONS: usize = 9;
pub const CAR_HALF_LENGTH: f64 = 2.0;
pub const CAR_HALF_WIDTH: f64 = 1.0;

/// One of nine discrete (steer, throttle) pairs, each in {-1, 0, +1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action(u8);

impl Action {
    pub const COAST: Action = Action(4);

    pub fn new(index: usize) -> Result<Self> {
        if index >= NUM_ACTIONS {
            return Err(Error::InvalidArgument(format!("action index {index} not in [0, 9)")));
        }
        Ok(Action(index as u8))
    }

    pub fn from_controls(steer: i8, throttle: i8) -> Self {
        debug_assert!((-1..=1).contains(&steer) && (-1..=1).contains(&throttle));
        Action(((steer + 1) * 3 + throttle + 1) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn steer(self) -> i8 {
        (self.0 / 3) as i8 - 1
    }

    pub fn throttle(self) -> i8 {
        (self.0 % 3) as i8 - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub distance: f64,
    pub speed: f64,
    pub collision: f64,
    pub sidewalk: f64,
    pub opposite: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            distance: 1.0,
            speed: 0.05,
            collision: 2.0,
            sidewalk: 2.0,
            opposite: 2.0,
        }
    }
}

/// A stationary vehicle placed on the ego lane at reset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleScenario {
    /// Distance ahead of the start along the lane, in world units.
    pub distance: f64,
    /// Present while `step_index <= lifetime_steps`.
    pub lifetime_steps: u32,
}

impl ObstacleScenario {
    /// Failure case: obstacle `distance` units ahead, stationary for 50 steps (≈5 s at 10 steps/s).
    pub fn failure_case(distance: f64) -> Self {
        Self {
            distance,
            lifetime_steps: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub pose: Pose,
    pub lifetime_steps: u32,
}

impl Obstacle {
    pub fn active(&self, step_index: u32) -> bool {
        step_index <= self.lifetime_steps
    }

    /// Whether a world point lies inside the obstacle's footprint.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        inside_box(&self.pose, x, y)
    }
}

fn inside_box(pose: &Pose, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - pose.x, y - pose.y);
    let (c, s) = (pose.heading.cos(), pose.heading.sin());
    let along = dx * c + dy * s;
    let across = dx * s - dy * c;
    along.abs() <= CAR_HALF_LENGTH && across.abs() <= CAR_HALF_WIDTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pose: Pose,
    pub speed: f64,
    pub step_index: u32,
    /// Cumulative collision events `c_t`.
    pub cum_collision: u32,
    /// Cumulative sidewalk/offroad overlap `s_t`; each step adds a fraction in [0, 1].
    pub cum_sidewalk: f64,
    /// Cumulative opposite-lane overlap `o_t`; each step adds a fraction in [0, 1].
    pub cum_opposite: f64,
    /// Arc length of the ego position along the route, tracked locally step to step.
    pub route_s: f64,
    /// `goal_s - route_s`, floored at 0.
    pub distance_to_goal: f64,
    pub obstacles: Vec<Obstacle>,
    pub done: bool,
}

/// Result of one [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: EnvState,
    pub observation: Observation,
    pub reward: f64,
    /// Episode over (goal or step cap).
    pub done: bool,
    /// Goal reached; false when the episode was only truncated.
    pub terminated: bool,
    pub collided: bool,
}

/// Footprint sample points: 5 along × 3 across.
fn footprint(pose: &Pose) -> impl Iterator<Item = (f64, f64)> + '_ {
    let (c, s) = (pose.heading.cos(), pose.heading.sin());
    (0..5).flat_map(move |i| {
        (0..3).map(move |j| {
            let along = -CAR_HALF_LENGTH + i as f64 * CAR_HALF_LENGTH / 2.0;
            let across = -CAR_HALF_WIDTH + j as f64 * CAR_HALF_WIDTH;
            (pose.x + along * c + across * s, pose.y + along * s - across * c)
        })
    })
}

/// Fractions of the ego footprint over (sidewalk or offroad, opposite lane or divider).
pub fn overlap_fractions(track: &TrackSpec, pose: &Pose) -> (f64, f64) {
    let (mut side, mut opp, mut n) = (0usize, 0usize, 0usize);
    for (x, y) in footprint(pose) {
        n += 1;
        match track.cell_class(x, y) {
            CellClass::Sidewalk | CellClass::Offroad => side += 1,
            CellClass::LaneOpposite | CellClass::Divider => opp += 1,
            _ => {}
        }
    }
    (side as f64 / n as f64, opp as f64 / n as f64)
}

fn collides(pose: &Pose, obstacles: &[Obstacle], step_index: u32) -> bool {
    obstacles
        .iter()
        .filter(|o| o.active(step_index))
        .any(|o| footprint(pose).any(|(x, y)| o.contains(x, y)) || footprint(&o.pose).any(|(x, y)| inside_box(pose, x, y)))
}

/// Places the ego at the (seed-jittered) start pose with zeroed counters.
pub fn reset(track: &TrackSpec, seed: u64, scenario: Option<ObstacleScenario>) -> Result<(EnvState, Observation)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (track.generation_seed << 32));
    let lateral: f64 = rng.random_range(-0.5..0.5);
    let dh: f64 = rng.random_range(-0.05..0.05);
    let sp = track.start_pose;
    let pose = Pose {
        x: sp.x + lateral * sp.heading.sin(),
        y: sp.y - lateral * sp.heading.cos(),
        heading: sp.heading + dh,
    };
    let mut obstacles = Vec::new();
    if let Some(sc) = scenario {
        let s = track.start_s + sc.distance;
        if !(sc.distance > 0.0 && s <= track.goal_s) {
            return Err(Error::InvalidScenario(format!(
                "obstacle at distance {} leaves the route (route length {:.1})",
                sc.distance,
                track.initial_distance()
            )));
        }
        let p = track.route.point_at(s);
        if track.cell_class(p.x, p.y) != CellClass::LaneRight {
            return Err(Error::InvalidScenario(format!(
                "obstacle at distance {} is off the ego lane",
                sc.distance
            )));
        }
        let obstacle = Obstacle {
            pose: p,
            lifetime_steps: sc.lifetime_steps,
        };
        if collides(&pose, std::slice::from_ref(&obstacle), 0) {
            return Err(Error::InvalidScenario(format!(
                "obstacle at distance {} overlaps the ego vehicle",
                sc.distance
            )));
        }
        obstacles.push(obstacle);
    }
    let route_s = track.route.project(pose.x, pose.y).s;
    let state = EnvState {
        pose,
        speed: 0.0,
        step_index: 0,
        cum_collision: 0,
        cum_sidewalk: 0.0,
        cum_opposite: 0.0,
        route_s,
        distance_to_goal: (track.goal_s - route_s).max(0.0),
        obstacles,
        done: false,
    };
    let obs = render(track, &state);
    Ok((state, obs))
}

pub fn step(track: &TrackSpec, state: &EnvState, action: Action) -> Result<StepResult> {
    step_with(track, state, action, &RewardWeights::default())
}

pub fn step_with(track: &TrackSpec, state: &EnvState, action: Action, weights: &RewardWeights) -> Result<StepResult> {
    if state.done {
        return Err(Error::ContractViolation("step called on a finished episode".into()));
    }
    let mut next = state.clone();
    next.step_index += 1;
    let heading = state.pose.heading + TURN_RATE * action.steer() as f64;
    let speed = (state.speed + ACCEL * action.throttle() as f64).clamp(0.0, V_MAX);
    let limit = track::WORLD_SIZE - 1e-6;
    let candidate = Pose {
        x: (state.pose.x + speed * heading.cos()).clamp(0.0, limit),
        y: (state.pose.y + speed * heading.sin()).clamp(0.0, limit),
        heading,
    };
    let collided = collides(&candidate, &state.obstacles, next.step_index);
    if collided {
        next.speed = 0.0;
        next.cum_collision += 1;
    } else {
        next.pose = candidate;
        next.speed = speed;
    }
    let (side, opp) = overlap_fractions(track, &next.pose);
    next.cum_sidewalk += side;
    next.cum_opposite += opp;
    next.route_s = track.route_progress(next.pose.x, next.pose.y, state.route_s);
    next.distance_to_goal = (track.goal_s - next.route_s).max(0.0);
    let terminated = next.distance_to_goal < GOAL_THRESHOLD;
    next.done = terminated || next.step_index >= MAX_STEPS;
    let reward = compute_reward_with(state, &next, weights);
    let observation = render(track, &next);
    Ok(StepResult {
        done: next.done,
        state: next,
        observation,
        reward,
        terminated,
        collided,
    })
}

/// Five-term weighted reward between consecutive states.
pub fn compute_reward(prev: &EnvState, cur: &EnvState) -> f64 {
    compute_reward_with(prev, cur, &RewardWeights::default())
}

pub fn compute_reward_with(prev: &EnvState, cur: &EnvState, w: &RewardWeights) -> f64 {
    w.distance * (prev.distance_to_goal - cur.distance_to_goal) + w.speed * (cur.speed - prev.speed)
        - w.collision * (cur.cum_collision as f64 - prev.cum_collision as f64)
        - w.sidewalk * (cur.cum_sidewalk - prev.cum_sidewalk)
        - w.opposite * (cur.cum_opposite - prev.cum_opposite)
}

/// Remaining fraction of the route, `clamp(final / initial, 0, 1)`.
pub fn normalized_distance(final_distance: f64, initial_distance: f64) -> f64 {
    if initial_distance <= 0.0 {
        return 0.0;
    }
    (final_distance / initial_distance).clamp(0.0, 1.0)
}

/// Stateful convenience wrapper around [`reset`] / [`step`].
#[derive(Debug, Clone)]
pub struct Env {
    pub track: TrackSpec,
    pub weights: RewardWeights,
    state: EnvState,
    observation: Observation,
}

impl Env {
    pub fn new(track: TrackSpec, seed: u64, scenario: Option<ObstacleScenario>) -> Result<Self> {
        let (state, observation) = reset(&track, seed, scenario)?;
        Ok(Self {
            track,
            weights: RewardWeights::default(),
            state,
            observation,
        })
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn observation(&self) -> &Observation {
        &self.observation
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let r = step_with(&self.track, &self.state, action, &self.weights)?;
        self.state = r.state.clone();
        self.observation = r.observation.clone();
        Ok(r)
    }
}
